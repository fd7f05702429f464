//! Voxel world model: blocks, chunk columns, coordinates and avatars.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHUNK_WIDTH: i32 = 16;
pub const CHUNK_HEIGHT: i32 = 256;
pub const CHUNK_VOLUME: usize = (CHUNK_WIDTH * CHUNK_WIDTH * CHUNK_HEIGHT) as usize;
pub const MAX_POWER: u8 = 15;
pub const DEFAULT_VIEW_DISTANCE: i32 = 128;

const SECTION_HEIGHT: i32 = 16;
const SECTION_VOLUME: usize = (CHUNK_WIDTH * CHUNK_WIDTH * SECTION_HEIGHT) as usize;
const SECTIONS: usize = (CHUNK_HEIGHT / SECTION_HEIGHT) as usize;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorldError {
    #[error("chunk {0} is not loaded")]
    ChunkNotLoaded(ChunkCoord),
    #[error("block position {0} is outside the vertical range")]
    OutOfRange(BlockPos),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("input truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown block type tag {0}")]
    BadBlockType(u8),
    #[error("unknown generation mode tag {0}")]
    BadMode(u8),
    #[error("run-length data covers {0} cells, expected {1}")]
    WrongLength(usize, usize),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum BlockType {
    #[default]
    Air = 0,
    Solid = 1,
    Wire = 2,
    Source = 3,
    Inverter = 4,
    Lamp = 5,
}

impl BlockType {
    pub const ALL: [BlockType; 6] = [
        BlockType::Air,
        BlockType::Solid,
        BlockType::Wire,
        BlockType::Source,
        BlockType::Inverter,
        BlockType::Lamp,
    ];

    pub fn from_tag(tag: u8) -> Result<Self, CodecError> {
        Self::ALL
            .get(tag as usize)
            .copied()
            .ok_or(CodecError::BadBlockType(tag))
    }

    /// Stateful blocks take part in simulated constructs.
    pub fn is_active(self) -> bool {
        !matches!(self, BlockType::Air | BlockType::Solid)
    }

    /// Whether neighbours can read this block's power. Lamps are sinks.
    pub fn emits(self) -> bool {
        matches!(self, BlockType::Wire | BlockType::Source | BlockType::Inverter)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Block {
    pub kind: BlockType,
    pub power: u8,
}

impl Block {
    pub const AIR: Block = Block { kind: BlockType::Air, power: 0 };
    pub const SOLID: Block = Block { kind: BlockType::Solid, power: 0 };

    /// Builds a block with its power normalised: inert blocks carry no
    /// power and a source is always fully powered.
    pub fn new(kind: BlockType, power: u8) -> Self {
        let power = match kind {
            BlockType::Air | BlockType::Solid => 0,
            BlockType::Source => MAX_POWER,
            _ => power.min(MAX_POWER),
        };
        Block { kind, power }
    }

    pub fn of(kind: BlockType) -> Self {
        Self::new(kind, 0)
    }

    pub fn decode(kind: u8, power: u8) -> Result<Self, CodecError> {
        let kind = BlockType::from_tag(kind)?;
        if power > MAX_POWER {
            return Err(CodecError::Invalid(format!("power {power} above {MAX_POWER}")));
        }
        Ok(Block::new(kind, power))
    }

    pub fn is_active(&self) -> bool {
        self.kind.is_active()
    }

    /// Power visible to orthogonal neighbours.
    pub fn emitted(&self) -> u8 {
        if self.kind.emits() {
            self.power
        } else {
            0
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockPos {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl BlockPos {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        BlockPos { x, y, z }
    }

    pub fn chunk(&self) -> ChunkCoord {
        ChunkCoord::containing(self.x, self.z)
    }

    pub fn offset(&self, dx: i32, dy: i32, dz: i32) -> Self {
        BlockPos::new(self.x + dx, self.y + dy, self.z + dz)
    }

    pub fn neighbors(&self) -> [BlockPos; 6] {
        [
            self.offset(1, 0, 0),
            self.offset(-1, 0, 0),
            self.offset(0, 1, 0),
            self.offset(0, -1, 0),
            self.offset(0, 0, 1),
            self.offset(0, 0, -1),
        ]
    }

    /// Horizontal Chebyshev distance.
    pub fn flat_distance(&self, other: &BlockPos) -> i32 {
        (self.x - other.x).abs().max((self.z - other.z).abs())
    }
}

impl fmt::Display for BlockPos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChunkCoord {
    pub cx: i32,
    pub cz: i32,
}

impl ChunkCoord {
    pub const fn new(cx: i32, cz: i32) -> Self {
        ChunkCoord { cx, cz }
    }

    pub fn containing(x: i32, z: i32) -> Self {
        ChunkCoord::new(x.div_euclid(CHUNK_WIDTH), z.div_euclid(CHUNK_WIDTH))
    }

    pub fn min_x(&self) -> i32 {
        self.cx * CHUNK_WIDTH
    }

    pub fn min_z(&self) -> i32 {
        self.cz * CHUNK_WIDTH
    }

    /// Chebyshev distance in blocks from `pos` to the nearest column of this chunk.
    pub fn block_distance(&self, pos: &BlockPos) -> i32 {
        let axis = |p: i32, lo: i32| {
            let hi = lo + CHUNK_WIDTH - 1;
            if p < lo {
                lo - p
            } else if p > hi {
                p - hi
            } else {
                0
            }
        };
        axis(pos.x, self.min_x()).max(axis(pos.z, self.min_z()))
    }
}

impl fmt::Display for ChunkCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.cx, self.cz)
    }
}

/// Inclusive chunk-index rectangle covering every chunk within `radius`
/// blocks (Chebyshev) of `pos`.
pub fn chunk_rect(pos: &BlockPos, radius: i32) -> (ChunkCoord, ChunkCoord) {
    (
        ChunkCoord::containing(pos.x - radius, pos.z - radius),
        ChunkCoord::containing(pos.x + radius, pos.z + radius),
    )
}

pub fn chunks_within(pos: &BlockPos, radius: i32) -> impl Iterator<Item = ChunkCoord> {
    let (lo, hi) = chunk_rect(pos, radius);
    (lo.cz..=hi.cz).flat_map(move |cz| (lo.cx..=hi.cx).map(move |cx| ChunkCoord::new(cx, cz)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum GenMode {
    #[default]
    Flat = 0,
    Noise = 1,
}

impl GenMode {
    pub fn from_tag(tag: u8) -> Result<Self, CodecError> {
        match tag {
            0 => Ok(GenMode::Flat),
            1 => Ok(GenMode::Noise),
            t => Err(CodecError::BadMode(t)),
        }
    }
}

/// Index of a block inside a chunk: x fastest, then z, then y.
pub fn encode_index(x: i32, y: i32, z: i32) -> usize {
    debug_assert!((0..CHUNK_WIDTH).contains(&x) && (0..CHUNK_WIDTH).contains(&z));
    debug_assert!((0..CHUNK_HEIGHT).contains(&y));
    (x + CHUNK_WIDTH * z + CHUNK_WIDTH * CHUNK_WIDTH * y) as usize
}

pub fn decode_index(index: usize) -> (i32, i32, i32) {
    let i = index as i32;
    let layer = CHUNK_WIDTH * CHUNK_WIDTH;
    (i % CHUNK_WIDTH, i / layer, (i % layer) / CHUNK_WIDTH)
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Section {
    Uniform(Block),
    Dense(Box<[Block]>),
}

impl Section {
    fn get(&self, i: usize) -> Block {
        match self {
            Section::Uniform(b) => *b,
            Section::Dense(cells) => cells[i],
        }
    }

    fn set(&mut self, i: usize, b: Block) {
        match self {
            Section::Uniform(current) if *current == b => {}
            Section::Uniform(current) => {
                let mut cells = vec![*current; SECTION_VOLUME].into_boxed_slice();
                cells[i] = b;
                *self = Section::Dense(cells);
            }
            Section::Dense(cells) => cells[i] = b,
        }
    }
}

/// A 16×16×256 column of blocks.
///
/// Logically a dense array of [`CHUNK_VOLUME`] blocks. Storage is split in
/// 16-block-high sections so that uniform sections (all air, all solid) cost
/// a single block.
#[derive(Clone)]
pub struct Chunk {
    pub coord: ChunkCoord,
    pub generated_by: GenMode,
    pub dirty: bool,
    sections: Vec<Section>,
}

impl PartialEq for Chunk {
    fn eq(&self, other: &Self) -> bool {
        self.coord == other.coord
            && self.generated_by == other.generated_by
            && self.dirty == other.dirty
            && self.iter().eq(other.iter())
    }
}

impl Eq for Chunk {}

impl fmt::Debug for Chunk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Chunk")
            .field("coord", &self.coord)
            .field("generated_by", &self.generated_by)
            .field("dirty", &self.dirty)
            .field("solid", &self.count(BlockType::Solid))
            .finish_non_exhaustive()
    }
}

impl Chunk {
    pub fn empty(coord: ChunkCoord, generated_by: GenMode) -> Self {
        Chunk {
            coord,
            generated_by,
            dirty: false,
            sections: vec![Section::Uniform(Block::AIR); SECTIONS],
        }
    }

    pub fn len(&self) -> usize {
        CHUNK_VOLUME
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get_local(&self, x: i32, y: i32, z: i32) -> Block {
        let (s, i) = Self::locate(x, y, z);
        self.sections[s].get(i)
    }

    /// Writes a block without touching the dirty flag.
    pub fn put_local(&mut self, x: i32, y: i32, z: i32, b: Block) {
        let (s, i) = Self::locate(x, y, z);
        self.sections[s].set(i, b);
    }

    pub fn set_local(&mut self, x: i32, y: i32, z: i32, b: Block) {
        self.put_local(x, y, z, b);
        self.dirty = true;
    }

    /// Fills layers `y0..y1` of every column with `b`.
    pub fn fill_layers(&mut self, y0: i32, y1: i32, b: Block) {
        let (y0, y1) = (y0.max(0), y1.min(CHUNK_HEIGHT));
        let mut y = y0;
        while y < y1 {
            if y % SECTION_HEIGHT == 0 && y + SECTION_HEIGHT <= y1 {
                self.sections[(y / SECTION_HEIGHT) as usize] = Section::Uniform(b);
                y += SECTION_HEIGHT;
                continue;
            }
            for z in 0..CHUNK_WIDTH {
                for x in 0..CHUNK_WIDTH {
                    self.put_local(x, y, z, b);
                }
            }
            y += 1;
        }
    }

    pub fn get_index(&self, index: usize) -> Block {
        let s = index / SECTION_VOLUME;
        self.sections[s].get(index % SECTION_VOLUME)
    }

    fn locate(x: i32, y: i32, z: i32) -> (usize, usize) {
        let s = (y / SECTION_HEIGHT) as usize;
        let i = (x + CHUNK_WIDTH * z + CHUNK_WIDTH * CHUNK_WIDTH * (y % SECTION_HEIGHT)) as usize;
        (s, i)
    }

    /// Blocks in wire order (x fastest, then z, then y).
    pub fn iter(&self) -> impl Iterator<Item = Block> + '_ {
        self.sections
            .iter()
            .flat_map(|s| (0..SECTION_VOLUME).map(move |i| s.get(i)))
    }

    pub fn count(&self, kind: BlockType) -> usize {
        self.sections
            .iter()
            .map(|s| match s {
                Section::Uniform(b) if b.kind == kind => SECTION_VOLUME,
                Section::Uniform(_) => 0,
                Section::Dense(cells) => cells.iter().filter(|b| b.kind == kind).count(),
            })
            .sum()
    }

    /// Local positions of stateful blocks.
    pub fn active_positions(&self) -> Vec<(i32, i32, i32)> {
        let mut out = Vec::new();
        for (s, section) in self.sections.iter().enumerate() {
            match section {
                Section::Uniform(b) if !b.is_active() => {}
                _ => {
                    for i in 0..SECTION_VOLUME {
                        if section.get(i).is_active() {
                            let (x, y, z) = decode_index(i);
                            out.push((x, y + s as i32 * SECTION_HEIGHT, z));
                        }
                    }
                }
            }
        }
        out
    }

    /// Wire format: `cx:i32 cz:i32 mode:u8` then `(type:u8, power:u8, run:u16)`
    /// triples, all little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        out.extend_from_slice(&self.coord.cx.to_le_bytes());
        out.extend_from_slice(&self.coord.cz.to_le_bytes());
        out.push(self.generated_by as u8);
        let flush = |out: &mut Vec<u8>, b: Block, run: u32| {
            out.push(b.kind as u8);
            out.push(b.power);
            out.extend_from_slice(&(run as u16).to_le_bytes());
        };
        let mut current: Option<(Block, u32)> = None;
        let mut push = |out: &mut Vec<u8>, b: Block, n: u32| {
            let mut n = n;
            while n > 0 {
                match current {
                    Some((c, run)) if c == b && run < u16::MAX as u32 => {
                        let take = n.min(u16::MAX as u32 - run);
                        current = Some((c, run + take));
                        n -= take;
                    }
                    Some((c, run)) => {
                        flush(out, c, run);
                        current = Some((b, 0));
                    }
                    None => current = Some((b, 0)),
                }
            }
        };
        for section in &self.sections {
            match section {
                Section::Uniform(b) => push(&mut out, *b, SECTION_VOLUME as u32),
                Section::Dense(cells) => {
                    for b in cells.iter() {
                        push(&mut out, *b, 1);
                    }
                }
            }
        }
        if let Some((c, run)) = current {
            flush(&mut out, c, run);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Chunk, CodecError> {
        if bytes.len() < 9 {
            return Err(CodecError::Truncated(bytes.len()));
        }
        let cx = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let cz = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let mode = GenMode::from_tag(bytes[8])?;
        let mut chunk = Chunk::empty(ChunkCoord::new(cx, cz), mode);
        let body = &bytes[9..];
        if body.len() % 4 != 0 {
            return Err(CodecError::Truncated(bytes.len()));
        }
        let mut filled = 0usize;
        for triple in body.chunks_exact(4) {
            let b = Block::decode(triple[0], triple[1])?;
            let run = u16::from_le_bytes([triple[2], triple[3]]) as usize;
            if filled + run > CHUNK_VOLUME {
                return Err(CodecError::WrongLength(filled + run, CHUNK_VOLUME));
            }
            let mut i = filled;
            let end = filled + run;
            while i < end {
                let s = i / SECTION_VOLUME;
                let off = i % SECTION_VOLUME;
                if off == 0 && end - i >= SECTION_VOLUME {
                    chunk.sections[s] = Section::Uniform(b);
                    i += SECTION_VOLUME;
                } else {
                    chunk.sections[s].set(off, b);
                    i += 1;
                }
            }
            filled = end;
        }
        if filled != CHUNK_VOLUME {
            return Err(CodecError::WrongLength(filled, CHUNK_VOLUME));
        }
        Ok(chunk)
    }
}

/// Little-endian cursor used by the binary codecs.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.bytes.len() < n {
            return Err(CodecError::Truncated(self.bytes.len()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn i32(&mut self) -> Result<i32, CodecError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn rest(&self) -> &'a [u8] {
        self.bytes
    }
}

pub type PlayerId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModificationEvent {
    pub pos: BlockPos,
    pub block: Block,
    pub tick: u64,
}

#[derive(Clone, Debug)]
pub struct WorldState {
    pub loaded: HashMap<ChunkCoord, Chunk>,
    pub avatars: BTreeMap<PlayerId, BlockPos>,
    pub view_distance_blocks: i32,
    tick: u64,
}

impl Default for WorldState {
    fn default() -> Self {
        Self::new(DEFAULT_VIEW_DISTANCE)
    }
}

impl WorldState {
    pub fn new(view_distance_blocks: i32) -> Self {
        WorldState {
            loaded: HashMap::new(),
            avatars: BTreeMap::new(),
            view_distance_blocks,
            tick: 0,
        }
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn advance_tick(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    pub fn insert_chunk(&mut self, chunk: Chunk) -> Option<Chunk> {
        self.loaded.insert(chunk.coord, chunk)
    }

    pub fn is_loaded(&self, coord: &ChunkCoord) -> bool {
        self.loaded.contains_key(coord)
    }

    pub fn get_block(&self, pos: BlockPos) -> Result<Block, WorldError> {
        if !(0..CHUNK_HEIGHT).contains(&pos.y) {
            return Err(WorldError::OutOfRange(pos));
        }
        let coord = pos.chunk();
        let chunk = self.loaded.get(&coord).ok_or(WorldError::ChunkNotLoaded(coord))?;
        Ok(chunk.get_local(pos.x - coord.min_x(), pos.y, pos.z - coord.min_z()))
    }

    /// Replaces a block, marking its chunk dirty.
    pub fn set_block(&mut self, pos: BlockPos, b: Block) -> Result<ModificationEvent, WorldError> {
        self.write_block(pos, b)?;
        Ok(ModificationEvent { pos, block: b, tick: self.tick })
    }

    /// Same as [`set_block`](Self::set_block) without producing an event;
    /// used when constructs write back their simulated cells.
    pub fn write_block(&mut self, pos: BlockPos, b: Block) -> Result<(), WorldError> {
        if !(0..CHUNK_HEIGHT).contains(&pos.y) {
            return Err(WorldError::OutOfRange(pos));
        }
        let coord = pos.chunk();
        let chunk = self
            .loaded
            .get_mut(&coord)
            .ok_or(WorldError::ChunkNotLoaded(coord))?;
        chunk.set_local(pos.x - coord.min_x(), pos.y, pos.z - coord.min_z(), b);
        Ok(())
    }

    /// Union over avatars of every chunk within view distance.
    pub fn required_chunks(&self) -> BTreeSet<ChunkCoord> {
        self.chunks_around_avatars(self.view_distance_blocks)
    }

    pub fn chunks_around_avatars(&self, radius: i32) -> BTreeSet<ChunkCoord> {
        self.avatars
            .values()
            .flat_map(|p| chunks_within(p, radius))
            .collect()
    }

    pub fn dirty_chunks(&self) -> BTreeSet<ChunkCoord> {
        self.loaded
            .values()
            .filter(|c| c.dirty)
            .map(|c| c.coord)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flat_chunk(coord: ChunkCoord) -> Chunk {
        let mut c = Chunk::empty(coord, GenMode::Flat);
        c.fill_layers(0, 4, Block::SOLID);
        c
    }

    fn world_with(coords: &[ChunkCoord]) -> WorldState {
        let mut w = WorldState::default();
        for c in coords {
            w.insert_chunk(flat_chunk(*c));
        }
        w
    }

    #[test]
    fn flat_chunk_reads() {
        let w = world_with(&[ChunkCoord::new(0, 0)]);
        assert_eq!(w.get_block(BlockPos::new(3, 200, 7)).unwrap(), Block::AIR);
        assert_eq!(w.get_block(BlockPos::new(3, 0, 7)).unwrap(), Block::SOLID);
    }

    #[test]
    fn read_your_write() {
        let mut w = world_with(&[ChunkCoord::new(-1, 0)]);
        let p = BlockPos::new(-5, 10, 4);
        let ev = w.set_block(p, Block::of(BlockType::Wire)).unwrap();
        assert_eq!(ev.pos, p);
        assert_eq!(w.get_block(p).unwrap().kind, BlockType::Wire);
        assert!(w.loaded[&ChunkCoord::new(-1, 0)].dirty);
    }

    #[test]
    fn setting_twice_yields_two_events() {
        let mut w = world_with(&[ChunkCoord::new(0, 0)]);
        let p = BlockPos::new(1, 5, 1);
        let a = w.set_block(p, Block::of(BlockType::Lamp)).unwrap();
        let b = w.set_block(p, Block::of(BlockType::Lamp)).unwrap();
        assert_eq!(a, b);
        assert_eq!(w.dirty_chunks().len(), 1);
    }

    #[test]
    fn unloaded_chunk_errors() {
        let mut w = world_with(&[]);
        let p = BlockPos::new(40, 5, 40);
        assert_eq!(
            w.set_block(p, Block::of(BlockType::Wire)),
            Err(WorldError::ChunkNotLoaded(ChunkCoord::new(2, 2)))
        );
        assert!(w.get_block(p).is_err());
    }

    #[test]
    fn source_is_always_powered() {
        assert_eq!(Block::new(BlockType::Source, 0).power, 15);
        assert_eq!(Block::new(BlockType::Solid, 9).power, 0);
    }

    #[test]
    fn required_chunks_counts() {
        let mut w = WorldState::default();
        assert!(w.required_chunks().is_empty());
        w.avatars.insert(1, BlockPos::new(0, 4, 0));
        // -128..=128 spans chunks -8..=8 on both axes.
        assert_eq!(w.required_chunks().len(), 289);
        let one = w.required_chunks();
        w.avatars.insert(2, BlockPos::new(1, 4, 0));
        assert_eq!(w.required_chunks(), one);
    }

    #[test]
    fn negative_coordinates_floor() {
        assert_eq!(BlockPos::new(-1, 0, -16).chunk(), ChunkCoord::new(-1, -1));
        assert_eq!(BlockPos::new(-17, 0, 15).chunk(), ChunkCoord::new(-2, 0));
    }

    #[test]
    fn codec_rejects_garbage() {
        assert!(matches!(Chunk::decode(&[0; 4]), Err(CodecError::Truncated(_))));
        let mut bytes = flat_chunk(ChunkCoord::new(0, 0)).encode();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(Chunk::decode(&bytes), Err(CodecError::WrongLength(..))));
        let mut bytes = flat_chunk(ChunkCoord::new(0, 0)).encode();
        bytes[9] = 42;
        assert_eq!(Chunk::decode(&bytes), Err(CodecError::BadBlockType(42)));
    }

    #[test]
    fn flat_chunk_wire_bytes() {
        let bytes = flat_chunk(ChunkCoord::new(2, -3)).encode();
        let mut expected = Vec::new();
        expected.extend_from_slice(&2i32.to_le_bytes());
        expected.extend_from_slice(&(-3i32).to_le_bytes());
        expected.push(0);
        expected.extend_from_slice(&[1, 0, 0x00, 0x04]); // 1024 solid
        // 64512 air, split at the u16 limit? 64512 < 65535 so a single run.
        expected.extend_from_slice(&[0, 0]);
        expected.extend_from_slice(&(64512u16).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn uniform_chunk_splits_long_runs() {
        let mut c = Chunk::empty(ChunkCoord::new(0, 0), GenMode::Flat);
        c.fill_layers(0, 256, Block::SOLID);
        let bytes = c.encode();
        assert_eq!(bytes.len(), 9 + 8);
        assert_eq!(Chunk::decode(&bytes).unwrap(), c);
    }

    proptest! {
        #[test]
        fn index_is_a_bijection(x in 0..16i32, y in 0..256i32, z in 0..16i32) {
            let i = encode_index(x, y, z);
            prop_assert!(i < CHUNK_VOLUME);
            prop_assert_eq!(decode_index(i), (x, y, z));
        }

        #[test]
        fn codec_round_trips(writes in prop::collection::vec(
            (0..16i32, 0..256i32, 0..16i32, 0..6u8, 0..16u8), 0..200)) {
            let mut c = flat_chunk(ChunkCoord::new(-7, 11));
            for (x, y, z, t, p) in writes {
                c.set_local(x, y, z, Block::new(BlockType::from_tag(t).unwrap(), p));
            }
            c.dirty = false;
            let back = Chunk::decode(&c.encode()).unwrap();
            prop_assert!(back.iter().eq(c.iter()));
            prop_assert_eq!(back.coord, c.coord);
        }

        #[test]
        fn dirty_set_is_touched_set(writes in prop::collection::vec(
            (-40..40i32, 0..256i32, -40..40i32), 0..50)) {
            let coords: Vec<_> = (-3..3).flat_map(|cx| (-3..3).map(move |cz| ChunkCoord::new(cx, cz))).collect();
            let mut w = world_with(&coords);
            let mut touched = BTreeSet::new();
            for (x, y, z) in writes {
                let p = BlockPos::new(x, y, z);
                w.set_block(p, Block::of(BlockType::Wire)).unwrap();
                touched.insert(p.chunk());
            }
            prop_assert_eq!(w.dirty_chunks(), touched);
        }

        #[test]
        fn required_chunks_monotone_in_view(
            avatars in prop::collection::vec((-300..300i32, -300..300i32), 0..5),
            r1 in 0..200i32, extra in 0..100i32) {
            let mut w = WorldState::new(r1);
            for (i, (x, z)) in avatars.into_iter().enumerate() {
                w.avatars.insert(i as u32, BlockPos::new(x, 4, z));
            }
            let small = w.required_chunks();
            w.view_distance_blocks = r1 + extra;
            let big = w.required_chunks();
            prop_assert!(small.is_subset(&big));
            for c in &small {
                prop_assert!(w.avatars.values().any(|p| c.block_distance(p) <= r1));
            }
        }
    }
}
