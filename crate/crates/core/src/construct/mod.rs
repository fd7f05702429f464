//! Simulated constructs: a deterministic, synchronous circuit automaton over
//! the stateful blocks of a connected region.
//!
//! Transition rules (all cells updated from the previous state at once):
//!
//! * source: always 15
//! * wire: strongest emitting orthogonal neighbour minus one, floored at 0
//! * inverter: 15 when no emitting orthogonal neighbour is powered, else 0
//! * lamp: strongest emitting orthogonal neighbour
//!
//! Sources, wires and inverters emit their power; lamps, air and solid
//! blocks do not.

mod fixtures;
mod registry;

pub use fixtures::{ConstructTemplate, TemplateBlock};
pub use registry::{member_positions, write_back, BlockSource, ConstructRegistry, RegistryChanges};

use std::collections::HashMap;

use crate::world::{Block, BlockPos, BlockType, CodecError, MAX_POWER};

pub type ConstructId = u64;
pub type Cells = Vec<Block>;

pub const DEFAULT_MAX_CONSTRUCT_BLOCKS: usize = 4096;

/// Inclusive axis-aligned box in block coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Bounds {
    pub min: BlockPos,
    pub max: BlockPos,
}

impl Bounds {
    pub fn new(min: BlockPos, max: BlockPos) -> Self {
        debug_assert!(min.x <= max.x && min.y <= max.y && min.z <= max.z);
        Bounds { min, max }
    }

    pub fn around<'a>(positions: impl IntoIterator<Item = &'a BlockPos>) -> Option<Self> {
        let mut it = positions.into_iter();
        let first = *it.next()?;
        let (mut lo, mut hi) = (first, first);
        for p in it {
            lo = BlockPos::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
            hi = BlockPos::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
        }
        Some(Bounds::new(lo, hi))
    }

    /// Extent along (x, y, z).
    pub fn dims(&self) -> (usize, usize, usize) {
        (
            (self.max.x - self.min.x + 1) as usize,
            (self.max.y - self.min.y + 1) as usize,
            (self.max.z - self.min.z + 1) as usize,
        )
    }

    pub fn volume(&self) -> usize {
        let (sx, sy, sz) = self.dims();
        sx * sy * sz
    }

    pub fn contains(&self, p: &BlockPos) -> bool {
        (self.min.x..=self.max.x).contains(&p.x)
            && (self.min.y..=self.max.y).contains(&p.y)
            && (self.min.z..=self.max.z).contains(&p.z)
    }

    pub fn expanded(&self, by: i32) -> Bounds {
        Bounds::new(self.min.offset(-by, -by, -by), self.max.offset(by, by, by))
    }

    pub fn intersects(&self, other: &Bounds) -> bool {
        self.min.x <= other.max.x
            && other.min.x <= self.max.x
            && self.min.y <= other.max.y
            && other.min.y <= self.max.y
            && self.min.z <= other.max.z
            && other.min.z <= self.max.z
    }

    /// Cell index in canonical order: x fastest, then z, then y.
    pub fn index(&self, p: &BlockPos) -> usize {
        let (sx, _, sz) = self.dims();
        let (dx, dy, dz) = (
            (p.x - self.min.x) as usize,
            (p.y - self.min.y) as usize,
            (p.z - self.min.z) as usize,
        );
        dx + sx * (dz + sz * dy)
    }

    pub fn position(&self, index: usize) -> BlockPos {
        let (sx, _, sz) = self.dims();
        let dx = index % sx;
        let dz = (index / sx) % sz;
        let dy = index / (sx * sz);
        self.min.offset(dx as i32, dy as i32, dz as i32)
    }
}

/// 64-bit FNV-1a digest of a construct's cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateHash(pub u64);

impl StateHash {
    pub fn of(cells: &[Block]) -> Self {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        for b in cells {
            h ^= b.kind as u64;
            h = h.wrapping_mul(PRIME);
            h ^= b.power as u64;
            h = h.wrapping_mul(PRIME);
        }
        StateHash(h)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConstructState {
    pub id: ConstructId,
    pub bounds: Bounds,
    pub cells: Cells,
    /// Player-modification epoch.
    pub logical_ts: u64,
    /// World tick this state corresponds to.
    pub base_tick: u64,
}

impl ConstructState {
    pub fn new(id: ConstructId, bounds: Bounds, cells: Cells, base_tick: u64) -> Self {
        assert_eq!(cells.len(), bounds.volume(), "cell count must match bounds");
        ConstructState { id, bounds, cells, logical_ts: 0, base_tick }
    }

    /// Builds a construct from explicit blocks; unspecified cells are air.
    pub fn from_blocks(id: ConstructId, blocks: &[(BlockPos, Block)], base_tick: u64) -> Option<Self> {
        let bounds = Bounds::around(blocks.iter().map(|(p, _)| p))?;
        let mut cells = vec![Block::AIR; bounds.volume()];
        for (p, b) in blocks {
            cells[bounds.index(p)] = *b;
        }
        Some(ConstructState::new(id, bounds, cells, base_tick))
    }

    pub fn hash(&self) -> StateHash {
        StateHash::of(&self.cells)
    }

    pub fn active_blocks(&self) -> usize {
        self.cells.iter().filter(|b| b.is_active()).count()
    }

    pub fn get(&self, p: &BlockPos) -> Block {
        if self.bounds.contains(p) {
            self.cells[self.bounds.index(p)]
        } else {
            Block::AIR
        }
    }

    /// One synchronous tick.
    pub fn step(&self) -> ConstructState {
        ConstructState {
            cells: step_cells(&self.bounds, &self.cells),
            base_tick: self.base_tick + 1,
            ..self.clone()
        }
    }

    pub fn step_in_place(&mut self) {
        self.cells = step_cells(&self.bounds, &self.cells);
        self.base_tick += 1;
    }

    /// `n` successive states; element `k` is the state after `k + 1` steps.
    pub fn simulate(&self, n: usize) -> Vec<ConstructState> {
        let mut out = Vec::with_capacity(n);
        let mut cur = self.clone();
        for _ in 0..n {
            cur = cur.step();
            out.push(cur.clone());
        }
        out
    }

    /// Canonical bytes: bounds as six little-endian i32, then (type, power)
    /// pairs in x, z, y order.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 2 * self.cells.len());
        encode_bounds(&self.bounds, &mut out);
        encode_cells(&self.cells, &mut out);
        out
    }

    /// Inverse of [`encode`](Self::encode); identity fields come from the caller.
    pub fn decode(
        bytes: &[u8],
        id: ConstructId,
        logical_ts: u64,
        base_tick: u64,
    ) -> Result<(ConstructState, usize), CodecError> {
        let (bounds, mut used) = decode_bounds(bytes)?;
        let (cells, n) = decode_cells(&bytes[used..], bounds.volume())?;
        used += n;
        Ok((ConstructState { id, bounds, cells, logical_ts, base_tick }, used))
    }
}

pub(crate) fn encode_bounds(b: &Bounds, out: &mut Vec<u8>) {
    for v in [b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z] {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn decode_bounds(bytes: &[u8]) -> Result<(Bounds, usize), CodecError> {
    if bytes.len() < 24 {
        return Err(CodecError::Truncated(bytes.len()));
    }
    let v: Vec<i32> = bytes[..24]
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (min, max) = (BlockPos::new(v[0], v[1], v[2]), BlockPos::new(v[3], v[4], v[5]));
    if min.x > max.x || min.y > max.y || min.z > max.z {
        return Err(CodecError::Invalid("inverted bounds".into()));
    }
    let b = Bounds::new(min, max);
    if b.volume() > 1 << 24 {
        return Err(CodecError::Invalid("bounds too large".into()));
    }
    Ok((b, 24))
}

pub(crate) fn encode_cells(cells: &[Block], out: &mut Vec<u8>) {
    for b in cells {
        out.push(b.kind as u8);
        out.push(b.power);
    }
}

pub(crate) fn decode_cells(bytes: &[u8], volume: usize) -> Result<(Cells, usize), CodecError> {
    let need = 2 * volume;
    if bytes.len() < need {
        return Err(CodecError::Truncated(bytes.len()));
    }
    let cells = bytes[..need]
        .chunks_exact(2)
        .map(|p| Block::decode(p[0], p[1]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((cells, need))
}

/// Transition function over a dense box of cells.
pub fn step_cells(bounds: &Bounds, cells: &[Block]) -> Cells {
    let (sx, sy, sz) = bounds.dims();
    let layer = sx * sz;
    let mut next = Vec::with_capacity(cells.len());
    for (i, b) in cells.iter().enumerate() {
        let nb = match b.kind {
            BlockType::Air | BlockType::Solid => *b,
            BlockType::Source => Block { kind: BlockType::Source, power: MAX_POWER },
            kind => {
                let x = i % sx;
                let z = (i / sx) % sz;
                let y = i / layer;
                let mut input = 0u8;
                let mut read = |j: usize| input = input.max(cells[j].emitted());
                if x > 0 {
                    read(i - 1);
                }
                if x + 1 < sx {
                    read(i + 1);
                }
                if z > 0 {
                    read(i - sx);
                }
                if z + 1 < sz {
                    read(i + sx);
                }
                if y > 0 {
                    read(i - layer);
                }
                if y + 1 < sy {
                    read(i + layer);
                }
                let power = match kind {
                    BlockType::Wire => input.saturating_sub(1),
                    BlockType::Inverter => {
                        if input == 0 {
                            MAX_POWER
                        } else {
                            0
                        }
                    }
                    _ => input,
                };
                Block { kind, power }
            }
        };
        next.push(nb);
    }
    next
}

/// A trajectory folded onto its eventual cycle.
///
/// Index `k` of the trajectory is the state after `k + 1` steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoopDescriptor {
    pub prefix: Vec<Cells>,
    pub cycle: Vec<Cells>,
    /// Trajectory index at which the cycle starts (equals `prefix.len()`).
    pub entry_index: usize,
}

impl LoopDescriptor {
    pub fn period(&self) -> usize {
        self.cycle.len()
    }

    pub fn stored_states(&self) -> usize {
        self.prefix.len() + self.cycle.len()
    }
}

/// Cells of trajectory index `k` (the state after `k + 1` steps).
pub fn expand(d: &LoopDescriptor, k: usize) -> &[Block] {
    if k < d.prefix.len() {
        &d.prefix[k]
    } else {
        &d.cycle[(k - d.prefix.len()) % d.cycle.len()]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trajectory {
    States(Vec<Cells>),
    Loop(LoopDescriptor),
}

impl Trajectory {
    /// Number of states the trajectory stores explicitly.
    pub fn stored_states(&self) -> usize {
        match self {
            Trajectory::States(s) => s.len(),
            Trajectory::Loop(d) => d.stored_states(),
        }
    }
}

/// Simulates up to `n` steps, stopping at the first repeated state.
///
/// Every hash match is confirmed by comparing cells, so a digest collision
/// can never fold a trajectory incorrectly.
pub fn simulate_with_loop_detection(s: &ConstructState, n: usize) -> Trajectory {
    let mut seen: HashMap<StateHash, Vec<usize>> = HashMap::new();
    // history[0] is the start state; history[k] the state after k steps.
    let mut history: Vec<Cells> = vec![s.cells.clone()];
    seen.entry(StateHash::of(&s.cells)).or_default().push(0);
    for j in 1..=n {
        let next = step_cells(&s.bounds, &history[j - 1]);
        let h = StateHash::of(&next);
        let earlier = seen
            .get(&h)
            .and_then(|idx| idx.iter().copied().find(|&i| history[i] == next));
        if let Some(i) = earlier {
            let period = j - i;
            // Trajectory index k holds history[k + 1].
            let start = i.max(1);
            let prefix = history[1..start].to_vec();
            let cycle: Vec<Cells> = (start..start + period)
                .map(|t| {
                    if t < j {
                        history[t].clone()
                    } else {
                        history[t - period].clone()
                    }
                })
                .collect();
            return Trajectory::Loop(LoopDescriptor { entry_index: prefix.len(), prefix, cycle });
        }
        seen.entry(h).or_default().push(j);
        history.push(next);
    }
    history.remove(0);
    Trajectory::States(history)
}
