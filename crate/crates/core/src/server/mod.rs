//! The game server: a fixed-rate tick loop that owns the world.
//!
//! Each tick drains function replies and finished chunks, applies queued
//! player actions, moves avatars, advances every construct one step,
//! schedules terrain work, then emits state updates. In virtual-clock mode
//! tick durations come from a cost model so experiments run faster than
//! real time and replay exactly.

pub mod config;
pub mod net;
pub mod protocol;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::io;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::Sender;
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{BackendKind, ClockMode, CostModel, FaasConfig, ScMode, ServerConfig, StorageConfig};
use net::{ConnId, Frontend, NetEvent};
pub use protocol::{ActionKind, ClientMsg, PlayerAction, ServerMsg};

use crate::bench::MetricsLog;
use crate::construct::ConstructRegistry;
use crate::faas::wire::TerrainRequest;
use crate::faas::{FaasError, FaasRuntime, FunctionKind, InvocationId};
use crate::spec_exec::{OffloadReply, RequestId, SpeculativeUnit, TickSource};
use crate::storage::{prefetch_ring, BlobKey, StorageError, TerrainStore};
use crate::terrain::{column_height, distance_to_closest_unloaded, generate_chunk, Dispatcher, GenExecMode};
use crate::world::{
    Block, BlockPos, BlockType, Chunk, ChunkCoord, ModificationEvent, PlayerId, WorldState, CHUNK_WIDTH,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub actions_ms: f64,
    pub sc_ms: f64,
    pub chunk_load_ms: f64,
    pub emit_ms: f64,
}

impl Breakdown {
    pub fn total(&self) -> f64 {
        self.actions_ms + self.sc_ms + self.chunk_load_ms + self.emit_ms
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickSample {
    pub tick: u64,
    pub start_ms: f64,
    pub duration_ms: f64,
    pub breakdown: Breakdown,
    pub players: usize,
    /// Measured time spent in the tick, whatever the clock mode.
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceSample {
    pub tick: u64,
    pub time_s: f64,
    pub blocks: i32,
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("server full ({0} players)")]
    ServerFull(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Faas(#[from] FaasError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug)]
struct Motion {
    x: f64,
    z: f64,
    speed: f64,
}

#[derive(Clone, Copy, Debug)]
struct Avatar {
    x: f64,
    z: f64,
    motion: Option<Motion>,
}

impl Avatar {
    fn block(&self, y: i32) -> BlockPos {
        BlockPos::new(self.x.floor() as i32, y, self.z.floor() as i32)
    }
}

struct Session {
    outbox: Sender<ServerMsg>,
    ready: bool,
    center: Option<ChunkCoord>,
    sent: HashSet<ChunkCoord>,
    inventory: u16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Anchor {
    Spawn,
    Player(PlayerId),
}

fn chunk_radius(blocks: i32) -> i32 {
    (blocks + CHUNK_WIDTH - 1).div_euclid(CHUNK_WIDTH)
}

fn in_square(c: &ChunkCoord, center: &ChunkCoord, r: i32) -> bool {
    (c.cx - center.cx).abs() <= r && (c.cz - center.cz).abs() <= r
}

fn square(center: ChunkCoord, r: i32) -> impl Iterator<Item = ChunkCoord> {
    (center.cx - r..=center.cx + r).flat_map(move |cx| (center.cz - r..=center.cz + r).map(move |cz| ChunkCoord::new(cx, cz)))
}

/// Per-tick modelled costs and measured wall time.
#[derive(Default)]
struct Meter {
    modelled: Breakdown,
    measured: Breakdown,
}

pub struct Server {
    pub config: ServerConfig,
    pub world: WorldState,
    pub registry: ConstructRegistry,
    pub unit: SpeculativeUnit,
    pub store: TerrainStore,
    pub dispatcher: Dispatcher,
    faas: Box<dyn FaasRuntime>,
    spawn: BlockPos,
    sessions: BTreeMap<PlayerId, Session>,
    avatars: BTreeMap<PlayerId, Avatar>,
    actions: VecDeque<PlayerAction>,
    chat: Vec<(PlayerId, String)>,
    next_player: PlayerId,
    connections: HashMap<ConnId, (Sender<ServerMsg>, Option<PlayerId>)>,
    anchors: BTreeMap<Anchor, ChunkCoord>,
    anchors_moved: bool,
    wanted: HashMap<ChunkCoord, u32>,
    unrequested: BTreeSet<ChunkCoord>,
    reading: BTreeSet<ChunkCoord>,
    ready: BTreeMap<ChunkCoord, Chunk>,
    unneeded: BTreeMap<ChunkCoord, f64>,
    placements: BTreeMap<ChunkCoord, Vec<(BlockPos, Block)>>,
    sc_calls: BTreeMap<InvocationId, RequestId>,
    gen_calls: BTreeMap<InvocationId, ChunkCoord>,
    async_free_at: Vec<f64>,
    async_done: BTreeMap<(u64, u64), ChunkCoord>,
    seq: u64,
    encoded: HashMap<ChunkCoord, Arc<[u8]>>,
    samples: Vec<TickSample>,
    distance: Vec<DistanceSample>,
    errors: BTreeMap<&'static str, u64>,
    last_start_ms: Option<f64>,
    next_start_ms: f64,
    origin: Instant,
}

impl Server {
    /// Builds the server and generates the spawn area.
    pub fn new(config: ServerConfig) -> Result<Self, ServerError> {
        config.validate().map_err(ServerError::Config)?;
        let faas = config.faas.build()?;
        let store = config.storage.build(config.world, config.seed)?;
        let spawn = BlockPos::new(0, column_height(&config.world, 0, 0), 0);
        let mut s = Server {
            world: WorldState::new(config.view_distance),
            registry: ConstructRegistry::new(config.max_construct_blocks),
            unit: SpeculativeUnit::new(config.offload.clone()),
            dispatcher: Dispatcher::new(config.terrain_mode),
            async_free_at: vec![0.0; config.local_async_workers],
            store,
            faas,
            spawn,
            sessions: BTreeMap::new(),
            avatars: BTreeMap::new(),
            actions: VecDeque::new(),
            chat: Vec::new(),
            next_player: 1,
            connections: HashMap::new(),
            anchors: BTreeMap::new(),
            anchors_moved: false,
            wanted: HashMap::new(),
            unrequested: BTreeSet::new(),
            reading: BTreeSet::new(),
            ready: BTreeMap::new(),
            unneeded: BTreeMap::new(),
            placements: BTreeMap::new(),
            sc_calls: BTreeMap::new(),
            gen_calls: BTreeMap::new(),
            async_done: BTreeMap::new(),
            seq: 0,
            encoded: HashMap::new(),
            samples: Vec::new(),
            distance: Vec::new(),
            errors: BTreeMap::new(),
            last_start_ms: None,
            next_start_ms: 0.0,
            origin: Instant::now(),
            config,
        };
        s.boot()?;
        Ok(s)
    }

    fn boot(&mut self) -> Result<(), ServerError> {
        let center = self.spawn.chunk();
        self.retarget(Anchor::Spawn, Some(center), 0.0);
        let coords: Vec<ChunkCoord> = std::mem::take(&mut self.unrequested).into_iter().collect();
        for c in &coords {
            let key = BlobKey::chunk(*c);
            if self.store.contains(&key) {
                self.store.read_chunk(&key, 0.0);
            } else {
                let chunk = generate_chunk(&self.config.world, *c);
                self.dispatcher.complete(c);
                self.store.write_chunk(&key, chunk.encode(), 0.0)?;
                self.world.insert_chunk(chunk);
            }
        }
        for done in self.store.poll(f64::INFINITY) {
            let chunk = Chunk::decode(&done.result?).map_err(|e| ServerError::Config(e.to_string()))?;
            self.world.insert_chunk(chunk);
        }
        let tick = self.world.tick();
        for c in coords {
            self.registry.discover_in_chunk(&self.world, c, tick);
        }
        info!("spawn area ready: {} chunks", self.world.loaded.len());
        Ok(())
    }

    pub fn spawn(&self) -> BlockPos {
        self.spawn
    }

    pub fn players(&self) -> usize {
        self.sessions.len()
    }

    pub fn player_ids(&self) -> Vec<PlayerId> {
        self.sessions.keys().copied().collect()
    }

    pub fn is_ready(&self, id: PlayerId) -> bool {
        self.sessions.get(&id).is_some_and(|s| s.ready)
    }

    pub fn avatar(&self, id: PlayerId) -> Option<BlockPos> {
        self.world.avatars.get(&id).copied()
    }

    pub fn error_counts(&self) -> &BTreeMap<&'static str, u64> {
        &self.errors
    }

    pub fn samples(&self) -> &[TickSample] {
        &self.samples
    }

    pub fn distance_series(&self) -> &[DistanceSample] {
        &self.distance
    }

    /// Start of the next tick on the virtual clock.
    pub fn next_start_ms(&self) -> f64 {
        self.next_start_ms
    }

    pub fn faas_in_flight(&self) -> usize {
        self.faas.in_flight()
    }

    fn meter_error(&mut self, what: &'static str) {
        *self.errors.entry(what).or_default() += 1;
    }

    /// Milliseconds on the real clock since the server was built.
    pub fn wall_now_ms(&self) -> f64 {
        self.origin.elapsed().as_secs_f64() * 1e3
    }

    fn now(&self, start_ms: f64, meter: &Meter) -> f64 {
        match self.config.clock {
            ClockMode::Virtual => start_ms + self.config.cost.base_ms + meter.modelled.total(),
            ClockMode::RealTime => self.wall_now_ms(),
        }
    }

    pub fn connect_player(&mut self, outbox: Sender<ServerMsg>) -> Result<PlayerId, ServerError> {
        if self.sessions.len() >= self.config.max_players {
            return Err(ServerError::ServerFull(self.config.max_players));
        }
        let id = self.next_player;
        self.next_player += 1;
        let avatar = Avatar { x: self.spawn.x as f64 + 0.5, z: self.spawn.z as f64 + 0.5, motion: None };
        self.avatars.insert(id, avatar);
        self.world.avatars.insert(id, self.spawn);
        let now = self.last_start_ms.unwrap_or(0.0);
        self.retarget(Anchor::Player(id), Some(self.spawn.chunk()), now);
        let _ = outbox.send(ServerMsg::Welcome { player_id: id, tick_rate: self.config.tick_rate_hz, spawn: self.spawn });
        self.sessions.insert(id, Session { outbox, ready: false, center: None, sent: HashSet::new(), inventory: 0 });
        debug!("player {id} joined");
        Ok(id)
    }

    pub fn disconnect_player(&mut self, id: PlayerId) -> bool {
        if self.sessions.remove(&id).is_none() {
            return false;
        }
        self.avatars.remove(&id);
        self.world.avatars.remove(&id);
        self.actions.retain(|a| a.player_id != id);
        let now = self.last_start_ms.unwrap_or(0.0);
        self.retarget(Anchor::Player(id), None, now);
        debug!("player {id} left");
        true
    }

    pub fn queue_action(&mut self, action: PlayerAction) {
        self.actions.push_back(action);
    }

    /// Writes blocks into the world. Blocks in chunks that are not loaded
    /// are applied when the chunk loads.
    pub fn place_blocks(&mut self, blocks: &[(BlockPos, Block)]) {
        let mut events = Vec::new();
        for &(pos, b) in blocks {
            let c = pos.chunk();
            if self.world.is_loaded(&c) {
                match self.world.set_block(pos, b) {
                    Ok(ev) => events.push(ev),
                    Err(e) => warn!("placement at {pos:?} failed: {e}"),
                }
                self.encoded.remove(&c);
            } else {
                self.placements.entry(c).or_default().push((pos, b));
            }
        }
        let tick = self.world.tick();
        let changes = self.registry.apply_events(&self.world, &events, tick);
        for id in changes.removed {
            self.unit.forget(id);
        }
    }

    /// Encoded chunks, ordered by coordinate.
    pub fn world_snapshot(&self) -> BTreeMap<ChunkCoord, Vec<u8>> {
        self.world.loaded.iter().map(|(c, ch)| (*c, ch.encode())).collect()
    }

    fn wanted_radius(&self, a: Anchor) -> i32 {
        match a {
            Anchor::Spawn => chunk_radius(self.config.spawn_radius_blocks),
            Anchor::Player(_) => chunk_radius(self.config.view_distance + self.config.load_margin_blocks),
        }
    }

    fn retarget(&mut self, a: Anchor, center: Option<ChunkCoord>, now_ms: f64) {
        let old = self.anchors.get(&a).copied();
        if old == center {
            return;
        }
        self.anchors_moved = true;
        let r = self.wanted_radius(a);
        if let Some(n) = center {
            self.anchors.insert(a, n);
            for c in square(n, r) {
                if old.is_some_and(|o| in_square(&c, &o, r)) {
                    continue;
                }
                let count = self.wanted.entry(c).or_default();
                *count += 1;
                if *count == 1 {
                    self.unneeded.remove(&c);
                    if !self.world.is_loaded(&c) && !self.ready.contains_key(&c) {
                        self.unrequested.insert(c);
                    }
                }
            }
        } else {
            self.anchors.remove(&a);
        }
        if let Some(o) = old {
            for c in square(o, r) {
                if center.is_some_and(|n| in_square(&c, &n, r)) {
                    continue;
                }
                let Some(count) = self.wanted.get_mut(&c) else { continue };
                *count -= 1;
                if *count == 0 {
                    self.wanted.remove(&c);
                    self.unrequested.remove(&c);
                    self.dispatcher.cancel_pending(&c);
                    if self.world.is_loaded(&c) {
                        self.unneeded.insert(c, now_ms);
                    }
                }
            }
        }
    }

    fn is_wanted(&self, c: &ChunkCoord) -> bool {
        self.wanted.contains_key(c)
    }

    fn anchor_positions(&self) -> Vec<BlockPos> {
        let mut v: Vec<BlockPos> = self.world.avatars.values().copied().collect();
        v.push(self.spawn);
        v
    }

    fn chunk_arrived(&mut self, coord: ChunkCoord, chunk: Chunk) {
        if self.is_wanted(&coord) && !self.world.is_loaded(&coord) {
            self.ready.insert(coord, chunk);
        }
    }

    fn chunk_generated(&mut self, coord: ChunkCoord, chunk: Chunk, bytes: Option<Vec<u8>>, now_ms: f64) {
        self.dispatcher.complete(&coord);
        let bytes = bytes.unwrap_or_else(|| chunk.encode());
        if let Err(e) = self.store.write_chunk(&BlobKey::chunk(coord), bytes, now_ms) {
            warn!("storing generated chunk {coord:?} failed: {e}");
            self.meter_error("storage_write");
        }
        self.chunk_arrived(coord, chunk);
    }

    /// Runs one tick that starts at `start_ms` on the server clock.
    pub fn run_tick(&mut self, start_ms: f64) -> TickSample {
        let wall_start = Instant::now();
        let mut meter = Meter::default();
        let tick = self.world.advance_tick();
        let prev_tick = tick - 1;
        let dt_ms = self.last_start_ms.map_or(self.config.tick_budget_ms(), |p| start_ms - p);
        self.last_start_ms = Some(start_ms);
        let cost = self.config.cost.clone();

        // Replies and finished chunks.
        let t0 = Instant::now();
        self.drain_completions(start_ms, prev_tick);
        self.unit.expire(tick);
        let mut new_loads = Vec::new();
        self.load_ready(prev_tick, &mut new_loads);
        meter.modelled.chunk_load_ms += cost.chunk_load_ms * new_loads.len() as f64;
        meter.measured.chunk_load_ms += t0.elapsed().as_secs_f64() * 1e3;

        // Player actions and avatar movement.
        let t0 = Instant::now();
        let mut changed: BTreeMap<ChunkCoord, Vec<(BlockPos, Block)>> = BTreeMap::new();
        let applied = self.apply_actions(prev_tick, &mut changed);
        self.move_avatars(dt_ms, start_ms);
        meter.modelled.actions_ms += cost.per_action_ms * applied as f64 + cost.per_player_ms * self.sessions.len() as f64;
        meter.measured.actions_ms += t0.elapsed().as_secs_f64() * 1e3;

        // Simulated constructs.
        let t0 = Instant::now();
        self.update_constructs(tick, start_ms, &mut meter, &mut changed);
        meter.measured.sc_ms += t0.elapsed().as_secs_f64() * 1e3;

        // Terrain: storage reads, generation, prefetch, unload, write-back.
        let t0 = Instant::now();
        let generated = self.schedule_terrain(tick, start_ms, &mut meter);
        new_loads.extend(generated);
        let now = self.now(start_ms, &meter);
        self.unload_and_flush(now);
        meter.measured.chunk_load_ms += t0.elapsed().as_secs_f64() * 1e3;

        // State updates.
        let t0 = Instant::now();
        let messages = self.emit(tick, &new_loads, &changed);
        meter.modelled.emit_ms += cost.per_session_emit_ms * self.sessions.len() as f64
            + cost.per_message_ms * messages as f64
            + cost.per_position_ms * (self.sessions.len() * self.world.avatars.len()) as f64;
        meter.measured.emit_ms += t0.elapsed().as_secs_f64() * 1e3;

        if self.config.distance_sample_ticks > 0 && tick % self.config.distance_sample_ticks == 0 {
            if let Ok(blocks) = distance_to_closest_unloaded(&self.world) {
                self.distance.push(DistanceSample { tick, time_s: start_ms / 1e3, blocks });
            }
        }

        let wall_ms = wall_start.elapsed().as_secs_f64() * 1e3;
        let (duration_ms, breakdown) = match self.config.clock {
            ClockMode::Virtual => (cost.base_ms + meter.modelled.total(), meter.modelled),
            ClockMode::RealTime => (wall_ms, meter.measured),
        };
        let sample = TickSample { tick, start_ms, duration_ms, breakdown, players: self.sessions.len(), wall_ms };
        self.next_start_ms = self.next_start(&sample);
        self.samples.push(sample.clone());
        sample
    }

    /// Start of the tick after `s`: the next budget boundary, or the end of
    /// `s` when it overran.
    pub fn next_start(&self, s: &TickSample) -> f64 {
        s.start_ms + s.duration_ms.max(self.config.tick_budget_ms())
    }

    fn drain_completions(&mut self, now_ms: f64, prev_tick: u64) {
        for done in self.faas.poll(now_ms) {
            match done.function {
                FunctionKind::ScSimulate => {
                    let Some(req) = self.sc_calls.remove(&done.id) else { continue };
                    let reply = done
                        .result
                        .map_err(|e| e.to_string())
                        .and_then(|b| OffloadReply::decode(&b).map_err(|e| e.to_string()));
                    match reply {
                        Ok(r) => {
                            if let Err(e) = self.unit.accept_reply(r, prev_tick) {
                                debug!("reply {req} discarded: {e}");
                            }
                        }
                        Err(e) => {
                            warn!("construct invocation {req} failed: {e}");
                            self.meter_error("sc_invocation");
                            let _ = self.unit.fail(req, prev_tick);
                        }
                    }
                }
                FunctionKind::TerrainGenerate => {
                    let Some(coord) = self.gen_calls.remove(&done.id) else { continue };
                    let decoded = done
                        .result
                        .map_err(|e| e.to_string())
                        .and_then(|b| Chunk::decode(&b).map(|c| (c, b)).map_err(|e| e.to_string()));
                    match decoded {
                        Ok((chunk, bytes)) if chunk.coord == coord => {
                            self.chunk_generated(coord, chunk, Some(bytes), done.ready_ms)
                        }
                        Ok(_) | Err(_) => {
                            warn!("generation of {coord:?} failed");
                            self.meter_error("terrain_invocation");
                            self.dispatcher.fail(&coord);
                            if self.is_wanted(&coord) {
                                self.unrequested.insert(coord);
                            }
                        }
                    }
                }
            }
        }
        let later = self.async_done.split_off(&(now_ms.max(0.0).to_bits(), u64::MAX));
        for ((bits, _), coord) in std::mem::replace(&mut self.async_done, later) {
            let chunk = generate_chunk(&self.config.world, coord);
            self.chunk_generated(coord, chunk, None, f64::from_bits(bits));
        }
        for done in self.store.poll(now_ms) {
            let Some(coord) = done.key.coord() else { continue };
            self.reading.remove(&coord);
            match done.result.map_err(|e| e.to_string()).and_then(|b| Chunk::decode(&b).map_err(|e| e.to_string())) {
                Ok(chunk) => self.chunk_arrived(coord, chunk),
                Err(e) => {
                    warn!("reading {coord:?} failed: {e}");
                    self.meter_error("storage_read");
                    if self.is_wanted(&coord) {
                        self.unrequested.insert(coord);
                    }
                }
            }
        }
    }

    fn load_ready(&mut self, base_tick: u64, loaded: &mut Vec<ChunkCoord>) {
        if self.ready.is_empty() {
            return;
        }
        let centers: Vec<ChunkCoord> = self.anchors.values().copied().collect();
        let mut order: Vec<(i32, ChunkCoord)> = Vec::new();
        let mut stale = Vec::new();
        for c in self.ready.keys() {
            if !self.is_wanted(c) || self.world.is_loaded(c) {
                stale.push(*c);
                continue;
            }
            let d = centers.iter().map(|a| (c.cx - a.cx).abs().max((c.cz - a.cz).abs())).min().unwrap_or(0);
            order.push((d, *c));
        }
        for c in stale {
            self.ready.remove(&c);
        }
        order.sort();
        for (_, c) in order.into_iter().take(self.config.max_chunk_loads_per_tick) {
            let chunk = self.ready.remove(&c).expect("ready chunk");
            self.install(c, chunk, base_tick);
            loaded.push(c);
        }
    }

    /// Inserts a chunk, applies deferred placements and registers the
    /// constructs it completes.
    fn install(&mut self, c: ChunkCoord, mut chunk: Chunk, base_tick: u64) {
        if let Some(blocks) = self.placements.remove(&c) {
            for (p, b) in blocks {
                chunk.set_local(p.x - c.min_x(), p.y, p.z - c.min_z(), b);
            }
        }
        self.world.insert_chunk(chunk);
        self.registry.discover_in_chunk(&self.world, c, base_tick);
    }

    fn apply_actions(&mut self, base_tick: u64, changed: &mut BTreeMap<ChunkCoord, Vec<(BlockPos, Block)>>) -> usize {
        let mut events: Vec<ModificationEvent> = Vec::new();
        let mut applied = 0;
        while let Some(a) = self.actions.pop_front() {
            if !self.sessions.contains_key(&a.player_id) || a.validate().is_err() {
                self.meter_error("rejected_action");
                continue;
            }
            applied += 1;
            match a.kind {
                ActionKind::Move { target, speed } => {
                    if let Some(av) = self.avatars.get_mut(&a.player_id) {
                        av.motion = Some(Motion { x: target.x as f64 + 0.5, z: target.z as f64 + 0.5, speed: speed as f64 });
                    }
                }
                ActionKind::Break { pos } => {
                    if matches!(self.world.get_block(pos), Ok(b) if b.kind != BlockType::Air) {
                        if let Ok(ev) = self.world.set_block(pos, Block::AIR) {
                            events.push(ev);
                        }
                    }
                }
                ActionKind::Place { pos, kind } => {
                    if kind != BlockType::Air && matches!(self.world.get_block(pos), Ok(b) if b.kind == BlockType::Air) {
                        if let Ok(ev) = self.world.set_block(pos, Block::of(kind)) {
                            events.push(ev);
                        }
                    }
                }
                ActionKind::Stand { .. } => {}
                ActionKind::Chat { text } => self.chat.push((a.player_id, text)),
                ActionKind::SetInventory { item } => {
                    if let Some(s) = self.sessions.get_mut(&a.player_id) {
                        s.inventory = item;
                    }
                }
            }
        }
        if !events.is_empty() {
            for ev in &events {
                let c = ev.pos.chunk();
                self.encoded.remove(&c);
                changed.entry(c).or_default().push((ev.pos, ev.block));
            }
            let changes = self.registry.apply_events(&self.world, &events, base_tick);
            for id in changes.removed {
                self.unit.forget(id);
            }
        }
        applied
    }

    fn move_avatars(&mut self, dt_ms: f64, now_ms: f64) {
        let mut moved = Vec::new();
        for (id, av) in self.avatars.iter_mut() {
            let Some(m) = av.motion else { continue };
            let step = m.speed * dt_ms.max(0.0) / 1e3;
            let (dx, dz) = (m.x - av.x, m.z - av.z);
            let dist = dx.hypot(dz);
            if dist <= step {
                av.x = m.x;
                av.z = m.z;
                av.motion = None;
            } else {
                av.x += dx / dist * step;
                av.z += dz / dist * step;
            }
            moved.push(*id);
        }
        for id in moved {
            let av = self.avatars[&id];
            let y = column_height(&self.config.world, av.x.floor() as i32, av.z.floor() as i32);
            let pos = av.block(y);
            self.world.avatars.insert(id, pos);
            self.retarget(Anchor::Player(id), Some(pos.chunk()), now_ms);
        }
    }

    fn update_constructs(
        &mut self,
        tick: u64,
        start_ms: f64,
        meter: &mut Meter,
        changed: &mut BTreeMap<ChunkCoord, Vec<(BlockPos, Block)>>,
    ) {
        let mode = self.config.sc_mode;
        if mode == ScMode::LocalEveryOtherTick && tick % 2 == 1 {
            return;
        }
        let cost = self.config.cost.clone();
        for id in self.registry.ids() {
            let Some(st) = self.registry.get_mut(id) else { continue };
            let prev = st.cells.clone();
            let blocks = st.active_blocks() as f64;
            let source = match mode {
                ScMode::Offloaded => self.unit.on_construct_tick(st, tick),
                ScMode::LocalOnly | ScMode::LocalEveryOtherTick => {
                    st.step_in_place();
                    st.base_tick = tick;
                    TickSource::Local
                }
            };
            meter.modelled.sc_ms += match source {
                TickSource::Local => cost.sc_local_block_step_ms * blocks,
                TickSource::Speculative => cost.sc_apply_block_ms * blocks,
            };
            let st = &*st;
            for (i, (a, b)) in prev.iter().zip(&st.cells).enumerate() {
                if a != b {
                    let pos = st.bounds.position(i);
                    if self.world.write_block(pos, *b).is_ok() {
                        let c = pos.chunk();
                        self.encoded.remove(&c);
                        changed.entry(c).or_default().push((pos, *b));
                    }
                }
            }
            if mode == ScMode::Offloaded {
                let st = self.registry.get(id).expect("construct exists").clone();
                if let Some(req) = self.unit.schedule_next(&st, tick) {
                    meter.modelled.sc_ms += cost.invoke_ms;
                    let now = self.now(start_ms, meter);
                    let inv = self.faas.invoke(FunctionKind::ScSimulate, req.encode(), now, tick);
                    self.sc_calls.insert(inv, req.request_id);
                }
            }
        }
    }

    /// Issues storage reads and generation for missing chunks. Returns the
    /// chunks generated and loaded synchronously.
    fn schedule_terrain(&mut self, tick: u64, start_ms: f64, meter: &mut Meter) -> Vec<ChunkCoord> {
        let cost = self.config.cost.clone();
        let now_ms = self.now(start_ms, meter);
        let mut candidates = BTreeSet::new();
        for c in std::mem::take(&mut self.unrequested) {
            if self.world.is_loaded(&c) || self.ready.contains_key(&c) || self.reading.contains(&c) || self.dispatcher.is_open(&c) {
                continue;
            }
            let key = BlobKey::chunk(c);
            if self.store.contains(&key) {
                self.store.read_chunk(&key, now_ms);
                self.reading.insert(c);
            } else {
                candidates.insert(c);
            }
        }
        self.dispatcher.dispatch(&candidates, tick, |_| false);
        let mut loaded = Vec::new();
        match self.config.terrain_mode {
            GenExecMode::Offloaded => {
                let pending = self.dispatcher.pending_by_distance(&self.anchor_positions());
                for c in pending {
                    let payload = TerrainRequest { seed: self.config.world, coord: c }.encode();
                    meter.modelled.chunk_load_ms += cost.invoke_ms;
                    let inv = self.faas.invoke(FunctionKind::TerrainGenerate, payload, now_ms, tick);
                    self.dispatcher.mark_in_flight(&c);
                    self.gen_calls.insert(inv, c);
                }
            }
            GenExecMode::LocalSync => {
                let pending = self.dispatcher.pending_by_distance(&self.anchor_positions());
                for c in pending.into_iter().take(self.config.local_sync_gens_per_tick) {
                    let chunk = generate_chunk(&self.config.world, c);
                    meter.modelled.chunk_load_ms += cost.local_gen_ms + cost.chunk_load_ms;
                    let now = self.now(start_ms, meter);
                    self.chunk_generated(c, chunk, None, now);
                    if let Some(chunk) = self.ready.remove(&c) {
                        self.install(c, chunk, tick);
                        loaded.push(c);
                    }
                }
            }
            GenExecMode::LocalAsync => {
                let mut pending = self.dispatcher.pending_by_distance(&self.anchor_positions()).into_iter();
                for w in 0..self.async_free_at.len() {
                    if self.async_free_at[w] > now_ms {
                        continue;
                    }
                    let Some(c) = pending.next() else { break };
                    let done = now_ms + cost.local_gen_ms;
                    self.async_free_at[w] = done;
                    self.dispatcher.mark_in_flight(&c);
                    self.seq += 1;
                    self.async_done.insert((done.to_bits(), self.seq), c);
                }
            }
        }
        if self.anchors_moved {
            self.anchors_moved = false;
            let policy = &self.store.policy;
            if policy.enabled && policy.prefetch_margin_blocks > 0 && !self.world.avatars.is_empty() {
                let ring = prefetch_ring(&self.world, policy.prefetch_margin_blocks);
                self.store.prefetch(ring, now_ms);
            }
        }
        loaded
    }

    fn persist(&mut self, c: ChunkCoord, now_ms: f64) {
        let Some(chunk) = self.world.loaded.get_mut(&c) else { return };
        if !chunk.dirty {
            return;
        }
        chunk.dirty = false;
        let bytes = chunk.encode();
        if let Err(e) = self.store.write_chunk(&BlobKey::chunk(c), bytes, now_ms) {
            warn!("persisting {c:?} failed: {e}");
            self.meter_error("storage_write");
        }
    }

    fn unload_and_flush(&mut self, now_ms: f64) {
        let delay = self.config.unload_delay_ms;
        let due: Vec<ChunkCoord> =
            self.unneeded.iter().filter(|(_, &since)| now_ms - since >= delay).map(|(c, _)| *c).collect();
        for c in due {
            self.unneeded.remove(&c);
            if self.is_wanted(&c) {
                continue;
            }
            self.persist(c, now_ms);
            for id in self.registry.remove_in_chunk(c).removed {
                self.unit.forget(id);
            }
            self.world.loaded.remove(&c);
            self.encoded.remove(&c);
        }
        if self.store.flush_due(now_ms) {
            for c in self.world.dirty_chunks() {
                self.persist(c, now_ms);
            }
            match self.store.flush(now_ms) {
                Ok((n, _)) => debug!("flushed {n} chunks"),
                Err(e) => {
                    warn!("flush failed: {e}");
                    self.meter_error("storage_flush");
                }
            }
            let keep: BTreeSet<ChunkCoord> = self.wanted.keys().copied().collect();
            self.store.evict(now_ms, &keep);
        }
    }

    fn chunk_bytes(&mut self, c: ChunkCoord) -> Option<Arc<[u8]>> {
        if let Some(e) = self.encoded.get(&c) {
            return Some(e.clone());
        }
        let bytes: Arc<[u8]> = self.world.loaded.get(&c)?.encode().into();
        self.encoded.insert(c, bytes.clone());
        Some(bytes)
    }

    fn emit(
        &mut self,
        tick: u64,
        new_loads: &[ChunkCoord],
        changed: &BTreeMap<ChunkCoord, Vec<(BlockPos, Block)>>,
    ) -> usize {
        let view_r = chunk_radius(self.config.view_distance);
        let positions: Arc<[(PlayerId, BlockPos)]> = self.world.avatars.iter().map(|(i, p)| (*i, *p)).collect();
        let batches: Vec<(ChunkCoord, Arc<[(BlockPos, Block)]>)> =
            changed.iter().map(|(c, v)| (*c, Arc::from(v.as_slice()))).collect();
        let chat = std::mem::take(&mut self.chat);
        let mut messages = 0;
        let mut gone = Vec::new();
        let ids: Vec<PlayerId> = self.sessions.keys().copied().collect();
        for id in ids {
            let center = self.world.avatars[&id].chunk();
            let mut out: Vec<ServerMsg> = Vec::new();
            let (ready, old_center) = {
                let s = &self.sessions[&id];
                (s.ready, s.center)
            };
            if !ready {
                if !square(center, view_r).all(|c| self.world.is_loaded(&c)) {
                    continue;
                }
                let mut sent = HashSet::new();
                for c in square(center, view_r) {
                    if let Some(b) = self.chunk_bytes(c) {
                        out.push(ServerMsg::ChunkData(b));
                        sent.insert(c);
                    }
                }
                let s = self.sessions.get_mut(&id).expect("session");
                s.ready = true;
                s.center = Some(center);
                s.sent = sent;
            } else {
                let mut fresh: Vec<ChunkCoord> = Vec::new();
                if old_center != Some(center) {
                    let s = self.sessions.get_mut(&id).expect("session");
                    s.sent.retain(|c| in_square(c, &center, view_r));
                    s.center = Some(center);
                    fresh.extend(square(center, view_r));
                }
                fresh.extend(new_loads.iter().filter(|c| in_square(c, &center, view_r)));
                for c in fresh {
                    if self.sessions[&id].sent.contains(&c) {
                        continue;
                    }
                    if let Some(b) = self.chunk_bytes(c) {
                        out.push(ServerMsg::ChunkData(b));
                        self.sessions.get_mut(&id).expect("session").sent.insert(c);
                    }
                }
            }
            let s = &self.sessions[&id];
            for (c, batch) in &batches {
                if s.sent.contains(c) {
                    out.push(ServerMsg::BlockChange(batch.clone()));
                }
            }
            for (from, text) in &chat {
                out.push(ServerMsg::Chat { from: *from, text: text.clone() });
            }
            out.push(ServerMsg::AvatarPositions { tick, avatars: positions.clone() });
            messages += out.len();
            for m in out {
                if s.outbox.send(m).is_err() {
                    gone.push(id);
                    break;
                }
            }
        }
        for id in gone {
            self.disconnect_player(id);
        }
        messages
    }

    /// Moves every recorded series into `log`.
    pub fn drain_metrics(&mut self, log: &mut MetricsLog) {
        log.tick_samples.append(&mut self.samples);
        log.distance_series.append(&mut self.distance);
        log.invocations.extend(self.faas.take_records());
        log.efficiency.extend(self.unit.take_records());
        log.storage_reads.extend(self.store.take_log());
    }

    /// Applies connection events from the network front end.
    pub fn handle_net(&mut self, events: Vec<NetEvent>) {
        for ev in events {
            match ev {
                NetEvent::Opened(conn, tx) => {
                    self.connections.insert(conn, (tx, None));
                }
                NetEvent::Message(conn, ClientMsg::Join { name }) => {
                    let Some((tx, player)) = self.connections.get(&conn).cloned() else { continue };
                    if player.is_some() {
                        continue;
                    }
                    match self.connect_player(tx.clone()) {
                        Ok(id) => {
                            info!("{name} joined as player {id}");
                            self.connections.insert(conn, (tx, Some(id)));
                        }
                        Err(e) => {
                            let _ = tx.send(ServerMsg::Refused { reason: e.to_string() });
                        }
                    }
                }
                NetEvent::Message(conn, ClientMsg::Action(mut a)) => match self.connections.get(&conn) {
                    Some((_, Some(id))) => {
                        a.player_id = *id;
                        self.queue_action(a);
                    }
                    _ => self.meter_error("rejected_action"),
                },
                NetEvent::Message(conn, ClientMsg::Leave) | NetEvent::Closed(conn) => {
                    if let Some((_, Some(id))) = self.connections.remove(&conn) {
                        self.disconnect_player(id);
                    }
                }
            }
        }
    }

    /// Runs ticks on the real clock, calling `before` ahead of each with
    /// the tick's target start, until it returns false. Tick starts are
    /// aligned to budget boundaries; an overrun starts the next tick at once.
    pub fn run_realtime(&mut self, mut before: impl FnMut(&mut Server, f64) -> bool) {
        let budget = self.config.tick_budget_ms();
        let mut target = self.wall_now_ms();
        loop {
            sleep_until(self, target);
            if !before(self, target) {
                return;
            }
            let start = self.wall_now_ms();
            let sample = self.run_tick(start);
            let end = sample.start_ms + sample.wall_ms;
            target = (target + budget).max(end);
        }
    }

    /// Serves network clients on the real clock until `stop` is set.
    pub fn serve(&mut self, frontend: &Frontend, stop: &AtomicBool) {
        self.run_realtime(|s, _| {
            s.handle_net(frontend.drain());
            !stop.load(Ordering::Relaxed)
        });
    }
}

fn sleep_until(server: &Server, target_ms: f64) {
    loop {
        let left = target_ms - server.wall_now_ms();
        if left <= 0.0 {
            return;
        }
        if left > 1.0 {
            thread::sleep(Duration::from_secs_f64((left - 0.5) / 1e3));
        } else {
            thread::yield_now();
        }
    }
}

/// Runs `ticks` ticks on the virtual clock, calling `before` ahead of each.
pub fn run_virtual(server: &mut Server, ticks: u64, mut before: impl FnMut(&mut Server, f64)) {
    let mut start = server.next_start_ms;
    for _ in 0..ticks {
        before(server, start);
        let s = server.run_tick(start);
        start = server.next_start(&s);
    }
}
