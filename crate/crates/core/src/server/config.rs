use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::faas::{Distribution, Emulator, EmulatorConfig, FaasError, FaasRuntime, HttpRuntime};
use crate::spec_exec::OffloadPolicy;
use crate::storage::{
    blob_read_latency, blob_write_latency, local_disk_latency, Backend, CachePolicy, EmulatedBlob, LocalDisk,
    StorageError, TerrainStore,
};
use crate::terrain::{GenExecMode, WorldSeed};
use crate::world::{GenMode, DEFAULT_VIEW_DISTANCE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScMode {
    #[default]
    LocalOnly,
    Offloaded,
    /// Constructs advance on even ticks only.
    LocalEveryOtherTick,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// Tick durations come from [`CostModel`]; nothing sleeps.
    #[default]
    Virtual,
    /// Tick durations are measured and the loop sleeps to tick boundaries.
    RealTime,
}

/// Modelled tick-thread work, in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub base_ms: f64,
    pub per_player_ms: f64,
    pub per_action_ms: f64,
    /// Local simulation, per stateful block per step.
    pub sc_local_block_step_ms: f64,
    /// Applying a speculative state, per stateful block.
    pub sc_apply_block_ms: f64,
    pub invoke_ms: f64,
    pub chunk_load_ms: f64,
    /// Generating one chunk on the tick thread.
    pub local_gen_ms: f64,
    pub per_session_emit_ms: f64,
    pub per_message_ms: f64,
    /// Per avatar entry in every position update.
    pub per_position_ms: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            base_ms: 1.0,
            per_player_ms: 0.6,
            per_action_ms: 0.05,
            sc_local_block_step_ms: 0.0015,
            sc_apply_block_ms: 0.0001,
            invoke_ms: 0.02,
            chunk_load_ms: 0.5,
            local_gen_ms: 55.0,
            per_session_emit_ms: 0.05,
            per_message_ms: 0.0002,
            per_position_ms: 0.0005,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Files in `StorageConfig::dir`.
    LocalDisk,
    /// In memory, with local-disk latencies.
    #[default]
    EmulatedLocal,
    /// In memory, with managed blob store latencies.
    EmulatedBlob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StorageConfig {
    pub backend: BackendKind,
    pub dir: Option<PathBuf>,
    pub cache: CachePolicy,
    pub cache_dir: Option<PathBuf>,
    /// The backend already holds every chunk of the world.
    pub prepopulated: bool,
    pub read_latency: Option<Distribution>,
    pub write_latency: Option<Distribution>,
}

impl Default for StorageConfig {
    fn default() -> Self {
        StorageConfig {
            backend: BackendKind::EmulatedLocal,
            dir: None,
            cache: CachePolicy::default(),
            cache_dir: None,
            prepopulated: false,
            read_latency: None,
            write_latency: None,
        }
    }
}

impl StorageConfig {
    pub fn build(&self, world: WorldSeed, seed: u64) -> Result<TerrainStore, StorageError> {
        let pre = self.prepopulated.then_some(world);
        let backend: Box<dyn Backend> = match self.backend {
            BackendKind::LocalDisk => {
                let dir = self.dir.clone().unwrap_or_else(|| PathBuf::from("world"));
                Box::new(LocalDisk::open(dir, seed)?)
            }
            BackendKind::EmulatedLocal => Box::new(EmulatedBlob::new(
                self.read_latency.clone().unwrap_or_else(local_disk_latency),
                self.write_latency.clone().unwrap_or_else(local_disk_latency),
                pre,
                seed,
            )),
            BackendKind::EmulatedBlob => Box::new(EmulatedBlob::new(
                self.read_latency.clone().unwrap_or_else(blob_read_latency),
                self.write_latency.clone().unwrap_or_else(blob_write_latency),
                pre,
                seed,
            )),
        };
        TerrainStore::new(backend, self.cache.clone(), self.cache_dir.clone(), seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaasConfig {
    /// HTTP gateway; the local emulator is used when absent.
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub emulator: EmulatorConfig,
}

impl Default for FaasConfig {
    fn default() -> Self {
        FaasConfig { endpoint: None, timeout_ms: 30_000, emulator: EmulatorConfig::default() }
    }
}

impl FaasConfig {
    pub fn build(&self) -> Result<Box<dyn FaasRuntime>, FaasError> {
        Ok(match &self.endpoint {
            Some(url) => Box::new(HttpRuntime::new(url, Duration::from_millis(self.timeout_ms))?),
            None => Box::new(Emulator::new(self.emulator.clone())),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub tick_rate_hz: u32,
    pub sc_mode: ScMode,
    pub terrain_mode: GenExecMode,
    pub world: WorldSeed,
    pub view_distance: i32,
    /// Chunks this far beyond the view distance are kept in memory.
    pub load_margin_blocks: i32,
    /// Block radius around spawn that is generated at boot and never unloaded.
    pub spawn_radius_blocks: i32,
    pub unload_delay_ms: f64,
    pub max_players: usize,
    pub max_chunk_loads_per_tick: usize,
    pub local_sync_gens_per_tick: usize,
    pub local_async_workers: usize,
    pub max_construct_blocks: usize,
    /// Ticks between samples of the distance metric.
    pub distance_sample_ticks: u64,
    pub listen: String,
    pub clock: ClockMode,
    pub seed: u64,
    pub offload: OffloadPolicy,
    pub faas: FaasConfig,
    pub storage: StorageConfig,
    pub cost: CostModel,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            tick_rate_hz: 20,
            sc_mode: ScMode::LocalOnly,
            terrain_mode: GenExecMode::Offloaded,
            world: WorldSeed::new(1, GenMode::Flat),
            view_distance: DEFAULT_VIEW_DISTANCE,
            load_margin_blocks: 16,
            spawn_radius_blocks: 32,
            unload_delay_ms: 5_000.0,
            max_players: 256,
            max_chunk_loads_per_tick: 16,
            local_sync_gens_per_tick: 1,
            local_async_workers: 2,
            max_construct_blocks: crate::construct::DEFAULT_MAX_CONSTRUCT_BLOCKS,
            distance_sample_ticks: 20,
            listen: "127.0.0.1:25565".into(),
            clock: ClockMode::Virtual,
            seed: 0,
            offload: OffloadPolicy::default(),
            faas: FaasConfig::default(),
            storage: StorageConfig::default(),
            cost: CostModel::default(),
        }
    }
}

impl ServerConfig {
    pub fn tick_budget_ms(&self) -> f64 {
        1000.0 / self.tick_rate_hz as f64
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.tick_rate_hz == 0 {
            return Err("tick_rate_hz must be positive".into());
        }
        if self.view_distance < 0 || self.load_margin_blocks < 0 || self.spawn_radius_blocks < 0 {
            return Err("distances must be non-negative".into());
        }
        if self.max_chunk_loads_per_tick == 0 {
            return Err("max_chunk_loads_per_tick must be positive".into());
        }
        if self.terrain_mode == GenExecMode::LocalAsync && self.local_async_workers == 0 {
            return Err("local_async_workers must be positive".into());
        }
        self.offload.validate()?;
        self.storage.cache.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_follows_rate() {
        let mut c = ServerConfig::default();
        assert_eq!(c.tick_budget_ms(), 50.0);
        c.tick_rate_hz = 10;
        assert_eq!(c.tick_budget_ms(), 100.0);
        c.tick_rate_hz = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let c: ServerConfig = toml::from_str(
            "sc_mode = \"offloaded\"\nterrain_mode = \"local_sync\"\n[offload]\ntick_lead = 10\n[storage]\nbackend = \"emulated_blob\"\n",
        )
        .unwrap();
        assert_eq!(c.sc_mode, ScMode::Offloaded);
        assert_eq!(c.terrain_mode, GenExecMode::LocalSync);
        assert_eq!(c.offload.tick_lead, 10);
        assert_eq!(c.offload.num_steps, 100);
        assert_eq!(c.storage.backend, BackendKind::EmulatedBlob);
        assert_eq!(c.tick_rate_hz, 20);
        c.validate().unwrap();
    }
}
