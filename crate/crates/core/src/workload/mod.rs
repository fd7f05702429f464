//! Emulated players and experiment scenarios.
//!
//! A [`Scenario`] describes one experiment: how many bots join and when,
//! what they do, which constructs are deployed and how the server is
//! configured. Scenarios run in-process against a [`Server`] or over TCP
//! against a running one.

use std::f64::consts::TAU;
use std::io;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{MetricsLog, RateCard};
use crate::construct::{Bounds, ConstructTemplate};
use crate::server::net::Client;
use crate::server::protocol::MAX_SPEED;
use crate::server::{ActionKind, ClientMsg, ClockMode, PlayerAction, Server, ServerConfig, ServerError, ServerMsg};
use crate::settings::{self, SettingsError};
use crate::terrain::column_height;
use crate::world::{BlockPos, BlockType, PlayerId, CHUNK_WIDTH};

/// Distance to the far-away Move target of a star walker.
pub const STAR_DISTANCE: f64 = 1_000_000.0;
/// Maximum reach of a random Move, per axis.
pub const MOVE_REACH: i32 = 32;
/// Maximum reach of a random Break or Place, per axis.
pub const EDIT_REACH: i32 = 3;
pub const STAND_TICKS: u32 = 20;
pub const INVENTORY_SLOTS: u16 = 36;
/// Random edits keep this far from construct bounds.
pub const CONSTRUCT_MARGIN: i32 = 2;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error(transparent)]
    Settings(#[from] SettingsError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("scenario: {0}")]
    Invalid(String),
}

fn default_start_speed() -> u8 {
    1
}

fn default_step_s() -> f64 {
    200.0
}

fn default_max_speed() -> u8 {
    MAX_SPEED
}

fn default_radius() -> i32 {
    64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BehaviorSpec {
    /// Connects and stands still.
    #[default]
    Idle,
    /// Walks away from spawn in a straight line; bot `k` of `n` heads at
    /// angle `2πk/n`.
    StarWalk { speed: u8 },
    /// Star walk whose speed rises by one every `step_s` seconds of
    /// scenario time.
    StarWalkIncreasing {
        #[serde(default = "default_start_speed")]
        start_speed: u8,
        #[serde(default = "default_step_s")]
        step_s: f64,
        #[serde(default = "default_max_speed")]
        max_speed: u8,
    },
    /// Draws each next action from a fixed mix.
    RandomActions,
    /// Moves between random points within `radius` of spawn.
    BoundedMoveOnly {
        #[serde(default = "default_radius")]
        radius: i32,
    },
}

impl BehaviorSpec {
    pub fn validate(&self) -> Result<(), String> {
        let ok = |s: u8| (1..=MAX_SPEED).contains(&s);
        match *self {
            BehaviorSpec::StarWalk { speed } if !ok(speed) => Err(format!("speed {speed} out of range")),
            BehaviorSpec::StarWalkIncreasing { start_speed, step_s, max_speed } => {
                if !ok(start_speed) || !ok(max_speed) || start_speed > max_speed {
                    Err("speeds out of range".into())
                } else if step_s <= 0.0 {
                    Err("step_s must be positive".into())
                } else {
                    Ok(())
                }
            }
            BehaviorSpec::BoundedMoveOnly { radius } if radius <= 0 => Err("radius must be positive".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionClass {
    Move,
    BreakOrPlace,
    Stand,
    Chat,
    SetInventory,
}

/// Percent weights of the random action mix.
pub const ACTION_MIX: [(ActionClass, u32); 5] = [
    (ActionClass::Move, 40),
    (ActionClass::BreakOrPlace, 30),
    (ActionClass::Stand, 20),
    (ActionClass::Chat, 5),
    (ActionClass::SetInventory, 5),
];

pub fn draw_action_class(rng: &mut impl Rng) -> ActionClass {
    let mut u = rng.random_range(0..100u32);
    for (class, w) in ACTION_MIX {
        if u < w {
            return class;
        }
        u -= w;
    }
    unreachable!("weights sum to 100")
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Pending {
    Nothing,
    Moving(BlockPos),
    Until(u64),
}

/// What a bot sees of the world when it decides.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BotView {
    pub tick: u64,
    pub time_s: f64,
    pub pos: BlockPos,
}

/// One emulated player. It issues an action, waits for it to complete,
/// then issues the next.
#[derive(Clone, Debug)]
pub struct Bot {
    pub index: usize,
    pub total: usize,
    behavior: BehaviorSpec,
    rng: ChaCha8Rng,
    spawn: BlockPos,
    exclusions: Vec<Bounds>,
    pending: Pending,
    speed: u8,
}

impl Bot {
    pub fn new(index: usize, total: usize, behavior: BehaviorSpec, seed: u64, spawn: BlockPos) -> Self {
        Bot {
            index,
            total: total.max(1),
            behavior,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 1000 + index as u64)),
            spawn,
            exclusions: Vec::new(),
            pending: Pending::Nothing,
            speed: 0,
        }
    }

    /// Regions random edits must avoid.
    pub fn exclude(&mut self, bounds: impl IntoIterator<Item = Bounds>) {
        self.exclusions.extend(bounds.into_iter().map(|b| b.expanded(CONSTRUCT_MARGIN)));
    }

    fn star_target(&self) -> BlockPos {
        let angle = TAU * self.index as f64 / self.total as f64;
        self.spawn.offset((STAR_DISTANCE * angle.cos()).round() as i32, 0, (STAR_DISTANCE * angle.sin()).round() as i32)
    }

    fn done(&self, v: &BotView) -> bool {
        match self.pending {
            Pending::Nothing => true,
            Pending::Moving(t) => v.pos.x == t.x && v.pos.z == t.z,
            Pending::Until(t) => v.tick >= t,
        }
    }

    /// The next action to send, if any.
    pub fn next_action(&mut self, player_id: PlayerId, v: &BotView) -> Option<PlayerAction> {
        let kind = match self.behavior.clone() {
            BehaviorSpec::Idle => None,
            BehaviorSpec::StarWalk { speed } => self.star(speed),
            BehaviorSpec::StarWalkIncreasing { start_speed, step_s, max_speed } => {
                let rise = (v.time_s.max(0.0) / step_s).floor() as u64;
                let speed = (start_speed as u64 + rise).min(max_speed as u64) as u8;
                self.star(speed)
            }
            BehaviorSpec::BoundedMoveOnly { radius } => {
                if !self.done(v) {
                    return None;
                }
                let r = radius as f64;
                let (dx, dz) = loop {
                    let (x, z) = (self.rng.random_range(-r..=r), self.rng.random_range(-r..=r));
                    if x * x + z * z <= r * r {
                        break (x.round() as i32, z.round() as i32);
                    }
                };
                let target = self.spawn.offset(dx, 0, dz);
                let speed = self.rng.random_range(1..=MAX_SPEED);
                self.pending = Pending::Moving(target);
                Some(ActionKind::Move { target, speed })
            }
            BehaviorSpec::RandomActions => {
                if !self.done(v) {
                    return None;
                }
                Some(self.random_action(v))
            }
        }?;
        Some(PlayerAction { player_id, client_tick: v.tick, kind })
    }

    fn star(&mut self, speed: u8) -> Option<ActionKind> {
        if self.speed == speed {
            return None;
        }
        self.speed = speed;
        let target = self.star_target();
        self.pending = Pending::Moving(target);
        Some(ActionKind::Move { target, speed })
    }

    fn random_action(&mut self, v: &BotView) -> ActionKind {
        self.pending = Pending::Nothing;
        match draw_action_class(&mut self.rng) {
            ActionClass::Move => {
                let target = v.pos.offset(
                    self.rng.random_range(-MOVE_REACH..=MOVE_REACH),
                    0,
                    self.rng.random_range(-MOVE_REACH..=MOVE_REACH),
                );
                let speed = self.rng.random_range(1..=MAX_SPEED);
                self.pending = Pending::Moving(target);
                ActionKind::Move { target, speed }
            }
            ActionClass::BreakOrPlace => {
                let place = self.rng.random_bool(0.5);
                for _ in 0..16 {
                    let r = EDIT_REACH;
                    let pos = v.pos.offset(
                        self.rng.random_range(-r..=r),
                        self.rng.random_range(-r..=r),
                        self.rng.random_range(-r..=r),
                    );
                    if self.exclusions.iter().any(|b| b.contains(&pos)) {
                        continue;
                    }
                    return if place { ActionKind::Place { pos, kind: BlockType::Solid } } else { ActionKind::Break { pos } };
                }
                self.stand(v)
            }
            ActionClass::Stand => self.stand(v),
            ActionClass::Chat => ActionKind::Chat { text: format!("bot {} at tick {}", self.index, v.tick) },
            ActionClass::SetInventory => ActionKind::SetInventory { item: self.rng.random_range(0..INVENTORY_SLOTS) },
        }
    }

    fn stand(&mut self, v: &BotView) -> ActionKind {
        self.pending = Pending::Until(v.tick + STAND_TICKS as u64);
        ActionKind::Stand { ticks: STAND_TICKS }
    }
}

/// Deterministic child seed.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JoinSchedule {
    pub count: usize,
    /// Seconds between consecutive joins.
    pub interval_s: f64,
    pub first_s: f64,
}

impl Default for JoinSchedule {
    fn default() -> Self {
        JoinSchedule { count: 0, interval_s: 10.0, first_s: 0.0 }
    }
}

impl JoinSchedule {
    /// Scenario time at which bot `k` connects.
    pub fn join_time_s(&self, k: usize) -> f64 {
        self.first_s + k as f64 * self.interval_s
    }
}

/// Copies of one construct template laid out on a grid around spawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScFixture {
    pub count: usize,
    pub template: ConstructTemplate,
    #[serde(default = "default_spacing")]
    pub spacing_chunks: i32,
}

fn default_spacing() -> i32 {
    2
}

impl ScFixture {
    fn side(&self) -> i32 {
        (self.count as f64).sqrt().ceil() as i32
    }

    /// Minimum corners of every copy, in deployment order.
    pub fn origins(&self, config: &ServerConfig, spawn: BlockPos) -> Vec<BlockPos> {
        let g = self.side();
        let step = self.spacing_chunks * CHUNK_WIDTH;
        let (w, d) = self.template.footprint();
        let base_x = spawn.chunk().min_x() - (g / 2) * step + 1;
        let base_z = spawn.chunk().min_z() - (g / 2) * step + 1;
        (0..self.count as i32)
            .map(|i| {
                let (x, z) = (base_x + (i % g) * step, base_z + (i / g) * step);
                let y = (0..w)
                    .flat_map(|dx| (0..d).map(move |dz| (dx, dz)))
                    .map(|(dx, dz)| column_height(&config.world, x + dx, z + dz))
                    .max()
                    .unwrap_or(spawn.y);
                BlockPos::new(x, y, z)
            })
            .collect()
    }

    /// Block radius around spawn that covers every copy.
    pub fn radius_blocks(&self, config: &ServerConfig, spawn: BlockPos) -> i32 {
        let (w, d) = self.template.footprint();
        self.origins(config, spawn)
            .iter()
            .map(|o| {
                let xs = [o.x - spawn.x, o.x + w - 1 - spawn.x];
                let zs = [o.z - spawn.z, o.z + d - 1 - spawn.z];
                xs.iter().chain(&zs).map(|v| v.abs()).max().unwrap_or(0)
            })
            .max()
            .unwrap_or(0)
    }

    pub fn bounds(&self, config: &ServerConfig, spawn: BlockPos) -> Vec<Bounds> {
        let (w, d) = self.template.footprint();
        self.origins(config, spawn).into_iter().map(|o| Bounds::new(o, o.offset(w - 1, 0, d - 1))).collect()
    }

    pub fn deploy(&self, server: &mut Server) {
        let spawn = server.spawn();
        let blocks: Vec<_> =
            self.origins(&server.config, spawn).into_iter().flat_map(|o| self.template.placed(o)).collect();
        server.place_blocks(&blocks);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    pub duration_s: f64,
    /// Leading interval excluded from summary statistics.
    pub warmup_s: f64,
    pub repetitions: u32,
    pub seed: u64,
    pub players: JoinSchedule,
    pub behavior: BehaviorSpec,
    pub sc: Option<ScFixture>,
    pub rate_card: RateCard,
    pub server: ServerConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "scenario".into(),
            duration_s: 60.0,
            warmup_s: 30.0,
            repetitions: 1,
            seed: 0,
            players: JoinSchedule::default(),
            behavior: BehaviorSpec::default(),
            sc: None,
            rate_card: RateCard::default(),
            server: ServerConfig::default(),
        }
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, WorkloadError> {
        let s: Scenario = settings::load(Some(path))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.duration_s > 0.0) {
            return Err(WorkloadError::Invalid("duration_s must be positive".into()));
        }
        if self.warmup_s < 0.0 || self.players.interval_s < 0.0 {
            return Err(WorkloadError::Invalid("times must be non-negative".into()));
        }
        self.behavior.validate().map_err(WorkloadError::Invalid)?;
        self.server.validate().map_err(WorkloadError::Invalid)
    }

    pub fn seed_for(&self, repetition: u32) -> u64 {
        self.seed.wrapping_add(repetition as u64)
    }

    /// Server configuration of one repetition: seeds are derived from the
    /// scenario seed and the spawn area covers every deployed construct.
    pub fn server_config(&self, repetition: u32) -> ServerConfig {
        let seed = self.seed_for(repetition);
        let mut c = self.server.clone();
        c.seed = derive_seed(seed, 1);
        c.faas.emulator.seed = derive_seed(seed, 2);
        if let Some(fx) = &self.sc {
            let spawn = BlockPos::new(0, column_height(&c.world, 0, 0), 0);
            c.spawn_radius_blocks = c.spawn_radius_blocks.max(fx.radius_blocks(&c, spawn));
        }
        c
    }

    pub fn manifest(&self, repetition: u32) -> serde_json::Value {
        serde_json::json!({
            "scenario": self,
            "repetition": repetition,
            "seed": self.seed_for(repetition),
            "tick_budget_ms": self.server.tick_budget_ms(),
            "rate_card": self.rate_card,
        })
    }
}

/// Bots attached to an in-process server through channels.
pub struct LocalBots {
    schedule: JoinSchedule,
    behavior: BehaviorSpec,
    seed: u64,
    exclusions: Vec<Bounds>,
    joined: usize,
    bots: Vec<(Bot, PlayerId, Receiver<ServerMsg>)>,
    pub refused: usize,
}

impl LocalBots {
    pub fn new(schedule: JoinSchedule, behavior: BehaviorSpec, seed: u64, exclusions: Vec<Bounds>) -> Self {
        LocalBots { schedule, behavior, seed, exclusions, joined: 0, bots: Vec::new(), refused: 0 }
    }

    pub fn connected(&self) -> usize {
        self.bots.len()
    }

    /// Connects due bots, then lets every bot react to its latest update.
    pub fn step(&mut self, server: &mut Server, now_s: f64) {
        while self.joined < self.schedule.count && self.schedule.join_time_s(self.joined) <= now_s {
            let (tx, rx) = unbounded();
            match server.connect_player(tx) {
                Ok(id) => {
                    let mut bot =
                        Bot::new(self.joined, self.schedule.count, self.behavior.clone(), self.seed, server.spawn());
                    bot.exclude(self.exclusions.iter().copied());
                    self.bots.push((bot, id, rx));
                }
                Err(e) => {
                    warn!("bot {} refused: {e}", self.joined);
                    self.refused += 1;
                }
            }
            self.joined += 1;
        }
        for (bot, id, rx) in &mut self.bots {
            let mut view = None;
            for m in rx.try_iter() {
                if let ServerMsg::AvatarPositions { tick, avatars } = m {
                    if let Some((_, pos)) = avatars.iter().find(|(p, _)| p == id) {
                        view = Some(BotView { tick, time_s: now_s, pos: *pos });
                    }
                }
            }
            if let Some(v) = view {
                if let Some(a) = bot.next_action(*id, &v) {
                    server.queue_action(a);
                }
            }
        }
    }
}

pub struct RunOutput {
    pub log: MetricsLog,
    pub server: Server,
    pub refused: usize,
}

/// Runs one repetition in-process and returns its metrics.
pub fn run_scenario(sc: &Scenario, repetition: u32) -> Result<RunOutput, WorkloadError> {
    sc.validate()?;
    let config = sc.server_config(repetition);
    let mut server = Server::new(config)?;
    let mut exclusions = Vec::new();
    if let Some(fx) = &sc.sc {
        fx.deploy(&mut server);
        exclusions = fx.bounds(&server.config, server.spawn());
        info!("deployed {} constructs", server.registry.len());
    }
    let mut bots =
        LocalBots::new(sc.players.clone(), sc.behavior.clone(), derive_seed(sc.seed_for(repetition), 3), exclusions);
    let end_ms = sc.duration_s * 1e3;
    match server.config.clock {
        ClockMode::Virtual => loop {
            let start = server.next_start_ms();
            if start >= end_ms {
                break;
            }
            bots.step(&mut server, start / 1e3);
            server.run_tick(start);
        },
        ClockMode::RealTime => {
            let origin = server.wall_now_ms();
            server.run_realtime(|s, target| {
                let t = target - origin;
                if t >= end_ms {
                    return false;
                }
                bots.step(s, t / 1e3);
                true
            });
        }
    }
    let mut log = MetricsLog::default();
    server.drain_metrics(&mut log);
    if sc.server.clock == ClockMode::RealTime {
        let origin = log.tick_samples.first().map_or(0.0, |t| t.start_ms);
        for t in &mut log.tick_samples {
            t.start_ms -= origin;
        }
    }
    Ok(RunOutput { log, server, refused: bots.refused })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RemoteSummary {
    pub joined: usize,
    pub refused: usize,
    pub failed: usize,
    pub actions: usize,
}

/// Drives the scenario's bots over TCP against `target` on the real clock.
pub fn run_remote(sc: &Scenario, target: SocketAddr) -> Result<RemoteSummary, WorkloadError> {
    sc.validate()?;
    let origin = Instant::now();
    let duration = Duration::from_secs_f64(sc.duration_s);
    let joined = Arc::new(AtomicUsize::new(0));
    let refused = Arc::new(AtomicUsize::new(0));
    let actions = Arc::new(AtomicUsize::new(0));
    let mut handles = Vec::new();
    for k in 0..sc.players.count {
        let at = Duration::from_secs_f64(sc.players.join_time_s(k));
        if at >= duration {
            break;
        }
        if let Some(wait) = at.checked_sub(origin.elapsed()) {
            thread::sleep(wait);
        }
        let behavior = sc.behavior.clone();
        let (count, seed) = (sc.players.count, derive_seed(sc.seed, 3));
        let (joined, refused, actions) = (joined.clone(), refused.clone(), actions.clone());
        let (fixture, config) = (sc.sc.clone(), sc.server_config(0));
        handles.push(thread::spawn(move || -> io::Result<()> {
            let mut c = Client::connect(target)?;
            c.send(&ClientMsg::Join { name: format!("bot-{k}") })?;
            let (id, spawn) = match c.recv()? {
                Some(ServerMsg::Welcome { player_id, spawn, .. }) => (player_id, spawn),
                Some(ServerMsg::Refused { reason }) => {
                    warn!("bot {k} refused: {reason}");
                    refused.fetch_add(1, Ordering::Relaxed);
                    return Ok(());
                }
                other => return Err(io::Error::new(io::ErrorKind::InvalidData, format!("unexpected {other:?}"))),
            };
            joined.fetch_add(1, Ordering::Relaxed);
            let mut bot = Bot::new(k, count, behavior, seed, spawn);
            if let Some(fx) = fixture {
                bot.exclude(fx.bounds(&config, spawn));
            }
            while origin.elapsed() < duration {
                let Some(m) = c.recv()? else { break };
                if let ServerMsg::AvatarPositions { tick, avatars } = m {
                    let Some((_, pos)) = avatars.iter().find(|(p, _)| *p == id) else { continue };
                    let v = BotView { tick, time_s: origin.elapsed().as_secs_f64(), pos: *pos };
                    if let Some(a) = bot.next_action(id, &v) {
                        c.send(&ClientMsg::Action(a))?;
                        actions.fetch_add(1, Ordering::Relaxed);
                    }
                }
            }
            c.send(&ClientMsg::Leave)
        }));
    }
    let mut failed = 0;
    for h in handles {
        match h.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => {
                warn!("bot failed: {e}");
                failed += 1;
            }
            Err(_) => failed += 1,
        }
    }
    Ok(RemoteSummary {
        joined: joined.load(Ordering::Relaxed),
        refused: refused.load(Ordering::Relaxed),
        failed,
        actions: actions.load(Ordering::Relaxed),
    })
}

#[cfg(test)]
mod tests;
