use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use crate::world::{Block, BlockPos, ChunkCoord, ModificationEvent, WorldError, WorldState, CHUNK_WIDTH};

use super::{Bounds, ConstructId, ConstructState};

/// Read access to blocks; `None` means the containing chunk is not loaded.
pub trait BlockSource {
    fn block_at(&self, pos: BlockPos) -> Option<Block>;
}

impl BlockSource for WorldState {
    fn block_at(&self, pos: BlockPos) -> Option<Block> {
        match self.get_block(pos) {
            Ok(b) => Some(b),
            Err(WorldError::OutOfRange(_)) => Some(Block::AIR),
            Err(WorldError::ChunkNotLoaded(_)) => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RegistryChanges {
    /// Constructs that kept their id; their logical timestamp was bumped.
    pub modified: Vec<ConstructId>,
    pub created: Vec<ConstructId>,
    pub removed: Vec<ConstructId>,
}

impl RegistryChanges {
    fn merge(&mut self, other: RegistryChanges) {
        self.modified.extend(other.modified);
        self.created.extend(other.created);
        self.removed.extend(other.removed);
    }
}

enum Discovery {
    Found(Vec<BlockPos>),
    /// Touches an unloaded chunk; simulation is halted until it loads.
    Incomplete(Vec<BlockPos>),
    TooLarge(Vec<BlockPos>),
}

/// Tracks the constructs present in loaded terrain.
///
/// A construct is a connected component (orthogonal adjacency) of stateful
/// blocks. Its state holds only its own cells; other positions inside its
/// bounding box read as air.
#[derive(Clone, Debug)]
pub struct ConstructRegistry {
    constructs: BTreeMap<ConstructId, ConstructState>,
    members: HashMap<BlockPos, ConstructId>,
    next_id: ConstructId,
    max_blocks: usize,
}

impl ConstructRegistry {
    pub fn new(max_blocks: usize) -> Self {
        ConstructRegistry {
            constructs: BTreeMap::new(),
            members: HashMap::new(),
            next_id: 1,
            max_blocks,
        }
    }

    pub fn len(&self) -> usize {
        self.constructs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constructs.is_empty()
    }

    pub fn ids(&self) -> Vec<ConstructId> {
        self.constructs.keys().copied().collect()
    }

    pub fn get(&self, id: ConstructId) -> Option<&ConstructState> {
        self.constructs.get(&id)
    }

    pub fn get_mut(&mut self, id: ConstructId) -> Option<&mut ConstructState> {
        self.constructs.get_mut(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ConstructState> {
        self.constructs.values()
    }

    pub fn owner(&self, pos: &BlockPos) -> Option<ConstructId> {
        self.members.get(pos).copied()
    }

    /// Whether `pos` lies inside any construct's bounds grown by `margin`.
    pub fn near_any(&self, pos: &BlockPos, margin: i32) -> bool {
        self.constructs.values().any(|c| c.bounds.expanded(margin).contains(pos))
    }

    /// Re-derives constructs around a batch of block modifications.
    ///
    /// A construct whose (one-block grown) bounds contain a modification is
    /// rebuilt from the world. The rebuilt component holding its former
    /// anchor cell keeps the id and its logical timestamp advances by the
    /// number of modifications inside the bounds.
    pub fn apply_events(
        &mut self,
        world: &impl BlockSource,
        events: &[ModificationEvent],
        base_tick: u64,
    ) -> RegistryChanges {
        let mut changes = RegistryChanges::default();
        if events.is_empty() {
            return changes;
        }
        let mut affected: BTreeMap<ConstructId, u64> = BTreeMap::new();
        for ev in events {
            for c in self.constructs.values() {
                if c.bounds.expanded(1).contains(&ev.pos) {
                    *affected.entry(c.id).or_default() += 1;
                }
            }
        }
        let mut seeds: BTreeSet<BlockPos> = BTreeSet::new();
        let mut anchors: Vec<(ConstructId, BlockPos, u64)> = Vec::new();
        for (&id, &bumps) in &affected {
            let old = self.remove(id).expect("affected construct exists");
            let cells = member_positions(&old);
            anchors.push((id, cells[0], old.logical_ts + bumps));
            seeds.extend(cells);
        }
        for ev in events {
            seeds.insert(ev.pos);
            seeds.extend(ev.pos.neighbors());
        }

        let mut claimed: BTreeSet<ConstructId> = BTreeSet::new();
        let mut visited: BTreeSet<BlockPos> = BTreeSet::new();
        for seed in seeds {
            if visited.contains(&seed) || self.members.contains_key(&seed) {
                continue;
            }
            match world.block_at(seed) {
                Some(b) if b.is_active() => {}
                _ => continue,
            }
            let found = self.discover(world, seed);
            let cells = match found {
                Discovery::Found(c) => c,
                Discovery::Incomplete(c) | Discovery::TooLarge(c) => {
                    visited.extend(c);
                    continue;
                }
            };
            visited.extend(cells.iter().copied());
            let set: BTreeSet<BlockPos> = cells.iter().copied().collect();
            let reuse = anchors
                .iter()
                .find(|(id, anchor, _)| !claimed.contains(id) && set.contains(anchor))
                .map(|(id, _, ts)| (*id, *ts));
            let id = match reuse {
                Some((id, ts)) => {
                    claimed.insert(id);
                    let st = self.build_state(world, id, &cells, base_tick);
                    self.insert(ConstructState { logical_ts: ts, ..st });
                    changes.modified.push(id);
                    continue;
                }
                None => self.fresh_id(),
            };
            let st = self.build_state(world, id, &cells, base_tick);
            self.insert(st);
            changes.created.push(id);
        }
        changes
            .removed
            .extend(affected.keys().filter(|id| !claimed.contains(id)).copied());
        changes
    }

    /// Registers every complete construct with a cell in `coord`.
    pub fn discover_in_chunk(
        &mut self,
        world: &WorldState,
        coord: ChunkCoord,
        base_tick: u64,
    ) -> RegistryChanges {
        let mut changes = RegistryChanges::default();
        let Some(chunk) = world.loaded.get(&coord) else {
            return changes;
        };
        let mut visited: BTreeSet<BlockPos> = BTreeSet::new();
        for (x, y, z) in chunk.active_positions() {
            let p = BlockPos::new(coord.min_x() + x, y, coord.min_z() + z);
            if visited.contains(&p) || self.members.contains_key(&p) {
                continue;
            }
            match self.discover(world, p) {
                Discovery::Found(cells) => {
                    visited.extend(cells.iter().copied());
                    let id = self.fresh_id();
                    let st = self.build_state(world, id, &cells, base_tick);
                    self.insert(st);
                    changes.created.push(id);
                }
                Discovery::Incomplete(c) | Discovery::TooLarge(c) => visited.extend(c),
            }
        }
        changes
    }

    /// Halts every construct overlapping `coord`.
    pub fn remove_in_chunk(&mut self, coord: ChunkCoord) -> RegistryChanges {
        let column = Bounds::new(
            BlockPos::new(coord.min_x(), i32::MIN / 2, coord.min_z()),
            BlockPos::new(coord.min_x() + CHUNK_WIDTH - 1, i32::MAX / 2, coord.min_z() + CHUNK_WIDTH - 1),
        );
        let ids: Vec<_> = self
            .constructs
            .values()
            .filter(|c| c.bounds.intersects(&column))
            .map(|c| c.id)
            .collect();
        let mut changes = RegistryChanges::default();
        for id in ids {
            self.remove(id);
            changes.removed.push(id);
        }
        changes
    }

    pub fn rediscover_chunks(
        &mut self,
        world: &WorldState,
        coords: &[ChunkCoord],
        base_tick: u64,
    ) -> RegistryChanges {
        let mut all = RegistryChanges::default();
        for c in coords {
            all.merge(self.discover_in_chunk(world, *c, base_tick));
        }
        all
    }

    fn fresh_id(&mut self) -> ConstructId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn insert(&mut self, st: ConstructState) {
        for p in member_positions(&st) {
            self.members.insert(p, st.id);
        }
        self.constructs.insert(st.id, st);
    }

    fn remove(&mut self, id: ConstructId) -> Option<ConstructState> {
        let st = self.constructs.remove(&id)?;
        for p in member_positions(&st) {
            self.members.remove(&p);
        }
        Some(st)
    }

    fn discover(&self, world: &impl BlockSource, seed: BlockPos) -> Discovery {
        let mut seen: BTreeSet<BlockPos> = BTreeSet::new();
        let mut queue = VecDeque::from([seed]);
        seen.insert(seed);
        let mut cells = Vec::new();
        let mut incomplete = false;
        while let Some(p) = queue.pop_front() {
            cells.push(p);
            if cells.len() > self.max_blocks {
                return Discovery::TooLarge(cells);
            }
            for q in p.neighbors() {
                if seen.contains(&q) {
                    continue;
                }
                match world.block_at(q) {
                    None => incomplete = true,
                    Some(b) if b.is_active() => {
                        seen.insert(q);
                        queue.push_back(q);
                    }
                    Some(_) => {}
                }
            }
        }
        cells.sort();
        if incomplete {
            Discovery::Incomplete(cells)
        } else {
            Discovery::Found(cells)
        }
    }

    fn build_state(
        &self,
        world: &impl BlockSource,
        id: ConstructId,
        cells: &[BlockPos],
        base_tick: u64,
    ) -> ConstructState {
        let bounds = Bounds::around(cells).expect("component is non-empty");
        let mut dense = vec![Block::AIR; bounds.volume()];
        for p in cells {
            dense[bounds.index(p)] = world.block_at(*p).unwrap_or(Block::AIR);
        }
        ConstructState::new(id, bounds, dense, base_tick)
    }
}

/// Positions of a construct's own (stateful) cells, sorted.
pub fn member_positions(st: &ConstructState) -> Vec<BlockPos> {
    let mut v: Vec<BlockPos> = st
        .cells
        .iter()
        .enumerate()
        .filter(|(_, b)| b.is_active())
        .map(|(i, _)| st.bounds.position(i))
        .collect();
    v.sort();
    v
}

/// Writes the cells of `next` that differ from `prev` back into the world.
pub fn write_back(world: &mut WorldState, prev: &[Block], next: &ConstructState) {
    for (i, (a, b)) in prev.iter().zip(&next.cells).enumerate() {
        if a != b && b.is_active() {
            let _ = world.write_block(next.bounds.position(i), *b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{BlockType, Chunk, GenMode};

    fn world() -> WorldState {
        let mut w = WorldState::default();
        for cx in -1..=1 {
            for cz in -1..=1 {
                let mut c = Chunk::empty(ChunkCoord::new(cx, cz), GenMode::Flat);
                c.fill_layers(0, 4, Block::SOLID);
                w.insert_chunk(c);
            }
        }
        w
    }

    fn place(w: &mut WorldState, blocks: &[(i32, i32, i32, BlockType)]) -> Vec<ModificationEvent> {
        blocks
            .iter()
            .map(|&(x, y, z, k)| w.set_block(BlockPos::new(x, y, z), Block::of(k)).unwrap())
            .collect()
    }

    #[test]
    fn discovers_components() {
        let mut w = world();
        let mut reg = ConstructRegistry::new(4096);
        let ev = place(
            &mut w,
            &[
                (0, 4, 0, BlockType::Inverter),
                (1, 4, 0, BlockType::Wire),
                (5, 4, 5, BlockType::Source),
                (5, 4, 6, BlockType::Lamp),
            ],
        );
        let ch = reg.apply_events(&w, &ev, 0);
        assert_eq!(ch.created.len(), 2);
        assert_eq!(reg.len(), 2);
        let sizes: Vec<_> = reg.iter().map(|c| c.active_blocks()).collect();
        assert_eq!(sizes, vec![2, 2]);
    }

    #[test]
    fn modification_bumps_logical_ts() {
        let mut w = world();
        let mut reg = ConstructRegistry::new(4096);
        let ev = place(&mut w, &[(0, 4, 0, BlockType::Inverter), (1, 4, 0, BlockType::Wire)]);
        reg.apply_events(&w, &ev, 0);
        let id = reg.ids()[0];
        let ev = place(&mut w, &[(2, 4, 0, BlockType::Lamp)]);
        let ch = reg.apply_events(&w, &ev, 3);
        assert_eq!(ch.modified, vec![id]);
        let c = reg.get(id).unwrap();
        assert_eq!(c.logical_ts, 1);
        assert_eq!(c.active_blocks(), 3);
        assert_eq!(c.base_tick, 3);
        let ev = place(&mut w, &[(1, 4, 1, BlockType::Solid), (0, 5, 0, BlockType::Air)]);
        reg.apply_events(&w, &ev, 4);
        assert_eq!(reg.get(id).unwrap().logical_ts, 3);
    }

    #[test]
    fn split_keeps_anchor_side() {
        let mut w = world();
        let mut reg = ConstructRegistry::new(4096);
        let ev = place(
            &mut w,
            &[(0, 4, 0, BlockType::Wire), (1, 4, 0, BlockType::Wire), (2, 4, 0, BlockType::Lamp)],
        );
        reg.apply_events(&w, &ev, 0);
        let id = reg.ids()[0];
        let ev = place(&mut w, &[(1, 4, 0, BlockType::Air)]);
        let ch = reg.apply_events(&w, &ev, 1);
        assert_eq!(ch.modified, vec![id]);
        assert_eq!(ch.created.len(), 1);
        assert_eq!(reg.len(), 2);
        assert_eq!(reg.get(id).unwrap().active_blocks(), 1);
    }

    #[test]
    fn removing_everything_drops_construct() {
        let mut w = world();
        let mut reg = ConstructRegistry::new(4096);
        let ev = place(&mut w, &[(0, 4, 0, BlockType::Lamp)]);
        reg.apply_events(&w, &ev, 0);
        let ev = place(&mut w, &[(0, 4, 0, BlockType::Air)]);
        let ch = reg.apply_events(&w, &ev, 1);
        assert_eq!(ch.removed.len(), 1);
        assert!(reg.is_empty());
    }

    #[test]
    fn constructs_touching_unloaded_terrain_are_halted() {
        let mut w = world();
        let mut reg = ConstructRegistry::new(4096);
        // x = 31 is the last column of chunk 1; x = 32 belongs to an unloaded chunk.
        let ev = place(&mut w, &[(31, 4, 0, BlockType::Wire)]);
        assert!(reg.apply_events(&w, &ev, 0).created.is_empty());
        let ev = place(&mut w, &[(0, 4, 0, BlockType::Wire)]);
        reg.apply_events(&w, &ev, 0);
        assert_eq!(reg.len(), 1);
        assert_eq!(reg.remove_in_chunk(ChunkCoord::new(0, 0)).removed.len(), 1);
        assert!(reg.is_empty());
        assert_eq!(reg.discover_in_chunk(&w, ChunkCoord::new(0, 0), 0).created.len(), 1);
    }

    #[test]
    fn oversized_components_are_not_simulated() {
        let mut w = world();
        let mut reg = ConstructRegistry::new(8);
        let blocks: Vec<_> = (0..10).map(|x| (x, 4, 0, BlockType::Wire)).collect();
        let ev = place(&mut w, &blocks);
        reg.apply_events(&w, &ev, 0);
        assert!(reg.is_empty());
    }

    #[test]
    fn foreign_cells_inside_bounds_read_as_air() {
        let mut w = world();
        let mut reg = ConstructRegistry::new(4096);
        // An L shape whose bounding box contains an unrelated lamp.
        let ev = place(
            &mut w,
            &[
                (0, 4, 0, BlockType::Wire),
                (1, 4, 0, BlockType::Wire),
                (2, 4, 0, BlockType::Wire),
                (2, 4, 1, BlockType::Wire),
                (2, 4, 2, BlockType::Wire),
                (0, 4, 2, BlockType::Lamp),
            ],
        );
        reg.apply_events(&w, &ev, 0);
        assert_eq!(reg.len(), 2);
        let big = reg.iter().find(|c| c.active_blocks() == 5).unwrap();
        assert_eq!(big.get(&BlockPos::new(0, 4, 2)), Block::AIR);
    }
}
