//! Procedural terrain and generation bookkeeping.
//!
//! Noise terrain uses two octaves of bilinear value noise. Lattice values
//! come from a SplitMix64 finaliser applied to `seed ^ octave ^ ix ^ iz`
//! mixed with distinct odd constants, so the result depends on nothing but
//! integer arithmetic and is identical on every platform.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{chunks_within, Block, BlockPos, Chunk, ChunkCoord, GenMode, WorldState, CHUNK_WIDTH};

pub const FLAT_HEIGHT: i32 = 4;
pub const NOISE_BASE_HEIGHT: f64 = 48.0;
pub const NOISE_AMPLITUDE: f64 = 16.0;
pub const NOISE_MIN_HEIGHT: i32 = 1;
pub const NOISE_MAX_HEIGHT: i32 = 128;
/// Lattice spacing of the two octaves, in blocks.
pub const OCTAVE_CELLS: [i32; 2] = [64, 16];
pub const OCTAVE_WEIGHTS: [f64; 2] = [1.0, 0.5];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorldSeed {
    pub seed: u64,
    pub mode: GenMode,
}

impl WorldSeed {
    pub fn new(seed: u64, mode: GenMode) -> Self {
        WorldSeed { seed, mode }
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Lattice value in [-1, 1].
fn lattice(seed: u64, octave: usize, ix: i32, iz: i32) -> f64 {
    let h = mix(
        seed ^ (octave as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93)
            ^ (ix as i64 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (iz as i64 as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Weighted octave sum normalised to [-1, 1].
pub fn value_noise(seed: u64, x: i32, z: i32) -> f64 {
    let mut sum = 0.0;
    for (o, (&cell, &w)) in OCTAVE_CELLS.iter().zip(&OCTAVE_WEIGHTS).enumerate() {
        let (ix, iz) = (x.div_euclid(cell), z.div_euclid(cell));
        let fx = x.rem_euclid(cell) as f64 / cell as f64;
        let fz = z.rem_euclid(cell) as f64 / cell as f64;
        let v00 = lattice(seed, o, ix, iz);
        let v10 = lattice(seed, o, ix + 1, iz);
        let v01 = lattice(seed, o, ix, iz + 1);
        let v11 = lattice(seed, o, ix + 1, iz + 1);
        let a = v00 + (v10 - v00) * fx;
        let b = v01 + (v11 - v01) * fx;
        sum += w * (a + (b - a) * fz);
    }
    sum / OCTAVE_WEIGHTS.iter().sum::<f64>()
}

/// Surface height of a column: blocks with `y < height` are solid.
pub fn column_height(seed: &WorldSeed, x: i32, z: i32) -> i32 {
    match seed.mode {
        GenMode::Flat => FLAT_HEIGHT,
        GenMode::Noise => {
            let h = NOISE_BASE_HEIGHT + NOISE_AMPLITUDE * value_noise(seed.seed, x, z);
            (h.round() as i32).clamp(NOISE_MIN_HEIGHT, NOISE_MAX_HEIGHT)
        }
    }
}

pub fn generate_chunk(seed: &WorldSeed, coord: ChunkCoord) -> Chunk {
    let mut chunk = Chunk::empty(coord, seed.mode);
    match seed.mode {
        GenMode::Flat => chunk.fill_layers(0, FLAT_HEIGHT, Block::SOLID),
        GenMode::Noise => {
            let heights: Vec<i32> = (0..CHUNK_WIDTH * CHUNK_WIDTH)
                .map(|i| column_height(seed, coord.min_x() + i % CHUNK_WIDTH, coord.min_z() + i / CHUNK_WIDTH))
                .collect();
            let lowest = *heights.iter().min().unwrap();
            chunk.fill_layers(0, lowest, Block::SOLID);
            for (i, &h) in heights.iter().enumerate() {
                let (x, z) = (i as i32 % CHUNK_WIDTH, i as i32 / CHUNK_WIDTH);
                for y in lowest..h {
                    chunk.put_local(x, y, z, Block::SOLID);
                }
            }
        }
    }
    chunk
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TerrainError {
    #[error("no avatars in the world")]
    NoAvatars,
}

/// Chebyshev block distance from the nearest avatar to a missing chunk
/// within its view square, clamped to the view distance.
pub fn distance_to_closest_unloaded(world: &WorldState) -> Result<i32, TerrainError> {
    if world.avatars.is_empty() {
        return Err(TerrainError::NoAvatars);
    }
    let view = world.view_distance_blocks;
    let mut best = view;
    for pos in world.avatars.values() {
        for c in chunks_within(pos, view) {
            if !world.is_loaded(&c) {
                best = best.min(c.block_distance(pos));
            }
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenExecMode {
    /// Generated on the tick thread, charged to the tick.
    LocalSync,
    /// Generated by a bounded local worker pool.
    LocalAsync,
    /// One function invocation per chunk.
    #[default]
    Offloaded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskStatus {
    Pending,
    InFlight,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenTask {
    pub coord: ChunkCoord,
    pub requested_tick: u64,
    pub mode: GenExecMode,
    pub status: TaskStatus,
}

/// Tracks which chunks are being generated and which ever were.
#[derive(Clone, Debug)]
pub struct Dispatcher {
    pub mode: GenExecMode,
    tasks: BTreeMap<ChunkCoord, GenTask>,
    generated: HashSet<ChunkCoord>,
}

impl Dispatcher {
    pub fn new(mode: GenExecMode) -> Self {
        Dispatcher { mode, tasks: BTreeMap::new(), generated: HashSet::new() }
    }

    /// Creates Pending tasks for `required` chunks that are neither loaded,
    /// in flight, already generated nor available from storage.
    pub fn dispatch(
        &mut self,
        required: &BTreeSet<ChunkCoord>,
        tick: u64,
        mut available: impl FnMut(&ChunkCoord) -> bool,
    ) -> Vec<GenTask> {
        let mut out = Vec::new();
        for c in required {
            if self.tasks.contains_key(c) || self.generated.contains(c) || available(c) {
                continue;
            }
            let t = GenTask { coord: *c, requested_tick: tick, mode: self.mode, status: TaskStatus::Pending };
            self.tasks.insert(*c, t);
            out.push(t);
        }
        out
    }

    pub fn mark_in_flight(&mut self, coord: &ChunkCoord) {
        if let Some(t) = self.tasks.get_mut(coord) {
            t.status = TaskStatus::InFlight;
        }
    }

    /// Completes a task; returns false if none was open for `coord`.
    pub fn complete(&mut self, coord: &ChunkCoord) -> bool {
        self.generated.insert(*coord);
        self.tasks.remove(coord).is_some()
    }

    /// Drops a task that is no longer needed before it started.
    pub fn cancel_pending(&mut self, coord: &ChunkCoord) -> bool {
        if matches!(self.tasks.get(coord), Some(t) if t.status == TaskStatus::Pending) {
            self.tasks.remove(coord);
            return true;
        }
        false
    }

    /// Drops a task whose generation failed so that it is dispatched again.
    pub fn fail(&mut self, coord: &ChunkCoord) -> bool {
        self.tasks.remove(coord).is_some()
    }

    pub fn is_open(&self, coord: &ChunkCoord) -> bool {
        self.tasks.contains_key(coord)
    }

    pub fn was_generated(&self, coord: &ChunkCoord) -> bool {
        self.generated.contains(coord)
    }

    pub fn generated_count(&self) -> usize {
        self.generated.len()
    }

    pub fn open_tasks(&self) -> impl Iterator<Item = &GenTask> {
        self.tasks.values()
    }

    /// Pending tasks ordered by distance to the closest of `anchors`.
    pub fn pending_by_distance(&self, anchors: &[BlockPos]) -> Vec<ChunkCoord> {
        let mut v: Vec<(i32, ChunkCoord)> = self
            .tasks
            .values()
            .filter(|t| t.status == TaskStatus::Pending)
            .map(|t| {
                let d = anchors.iter().map(|p| t.coord.block_distance(p)).min().unwrap_or(0);
                (d, t.coord)
            })
            .collect();
        v.sort();
        v.into_iter().map(|(_, c)| c).collect()
    }
}
