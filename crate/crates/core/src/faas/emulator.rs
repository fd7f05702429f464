use std::collections::BTreeMap;
use std::thread;

use crossbeam_channel::{unbounded, Receiver, Sender};
use serde::{Deserialize, Serialize};

use super::latency::{LatencyModel, Sampler, WorkerCost};
use super::{handle, Completion, FaasError, FaasRuntime, FunctionKind, HandlerOutput, InvocationId, InvocationRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmulatorConfig {
    pub sc_latency: LatencyModel,
    pub terrain_latency: LatencyModel,
    pub cost: WorkerCost,
    pub seed: u64,
    /// Handler threads; 0 runs handlers inline when invoked.
    pub workers: usize,
}

impl Default for EmulatorConfig {
    fn default() -> Self {
        EmulatorConfig {
            sc_latency: LatencyModel::default(),
            terrain_latency: LatencyModel::default(),
            cost: WorkerCost::default(),
            seed: 0,
            workers: 0,
        }
    }
}

impl EmulatorConfig {
    pub fn latency(&self, f: FunctionKind) -> &LatencyModel {
        match f {
            FunctionKind::ScSimulate => &self.sc_latency,
            FunctionKind::TerrainGenerate => &self.terrain_latency,
        }
    }
}

struct Samplers {
    warm: Sampler,
    cold: Sampler,
}

#[derive(Default)]
struct Pool {
    /// Instance id to the time it becomes idle.
    busy_until: BTreeMap<u64, f64>,
    next: u64,
}

impl Pool {
    /// Claims the most recently released warm instance, deallocating any
    /// idle longer than `keep_warm_ms`. Returns the instance and whether it
    /// had to be created.
    fn claim(&mut self, now_ms: f64, keep_warm_ms: f64) -> (u64, bool) {
        self.busy_until.retain(|_, &mut t| t > now_ms || now_ms - t <= keep_warm_ms);
        let warm = self
            .busy_until
            .iter()
            .filter(|(_, &t)| t <= now_ms)
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&id, _)| id);
        let (id, cold) = match warm {
            Some(id) => (id, false),
            None => {
                self.next += 1;
                (self.next, true)
            }
        };
        self.busy_until.insert(id, f64::INFINITY);
        (id, cold)
    }
}

struct Waiting {
    function: FunctionKind,
    instance: u64,
    enqueue_tick: u64,
    enqueue_ms: f64,
    latency_ms: f64,
    was_cold: bool,
    payload_bytes: usize,
}

struct Job {
    id: InvocationId,
    function: FunctionKind,
    payload: Vec<u8>,
}

type Done = (InvocationId, Result<HandlerOutput, FaasError>);

struct Workers {
    jobs: Sender<Job>,
    done: Receiver<Done>,
}

/// Local serverless platform with warm-instance pools and injected latency.
///
/// Latency samples are drawn in invocation order from per-function seeded
/// streams, so a run with inline handlers replays exactly.
pub struct Emulator {
    cfg: EmulatorConfig,
    samplers: BTreeMap<FunctionKind, Samplers>,
    pools: BTreeMap<FunctionKind, Pool>,
    waiting: BTreeMap<InvocationId, Waiting>,
    pending: BTreeMap<(u64, InvocationId), Completion>,
    records: Vec<InvocationRecord>,
    workers: Option<Workers>,
    next_id: InvocationId,
}

fn time_key(ms: f64) -> u64 {
    // Non-negative finite floats order like their bit patterns.
    ms.max(0.0).to_bits()
}

impl Emulator {
    pub fn new(cfg: EmulatorConfig) -> Self {
        let samplers = FunctionKind::ALL
            .iter()
            .map(|&f| {
                let lat = cfg.latency(f);
                let base = cfg.seed ^ (f as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                (f, Samplers { warm: Sampler::new(lat.warm.clone(), base), cold: Sampler::new(lat.cold_extra.clone(), base ^ 0xC01D) })
            })
            .collect();
        let workers = (cfg.workers > 0).then(|| spawn_workers(cfg.workers, cfg.cost.clone()));
        Emulator {
            cfg,
            samplers,
            pools: BTreeMap::new(),
            waiting: BTreeMap::new(),
            pending: BTreeMap::new(),
            records: Vec::new(),
            workers,
            next_id: 1,
        }
    }

    pub fn config(&self) -> &EmulatorConfig {
        &self.cfg
    }

    /// Live instances per function, idle or busy.
    pub fn instances(&self, f: FunctionKind) -> usize {
        self.pools.get(&f).map_or(0, |p| p.busy_until.len())
    }

    fn finish(&mut self, id: InvocationId, out: Result<HandlerOutput, FaasError>) {
        let Some(w) = self.waiting.remove(&id) else { return };
        let worker_ms = out.as_ref().map_or(0.0, |o| o.worker_ms);
        let end_to_end_ms = w.latency_ms + worker_ms;
        let ready_ms = w.enqueue_ms + end_to_end_ms;
        if let Some(p) = self.pools.get_mut(&w.function) {
            p.busy_until.insert(w.instance, ready_ms);
        }
        let result = out.map(|o| o.reply);
        self.records.push(InvocationRecord {
            id,
            function: w.function,
            enqueue_tick: w.enqueue_tick,
            enqueue_ms: w.enqueue_ms,
            end_to_end_ms,
            worker_ms,
            was_cold: w.was_cold,
            payload_bytes: w.payload_bytes,
            reply_bytes: result.as_ref().map_or(0, Vec::len),
        });
        self.pending
            .insert((time_key(ready_ms), id), Completion { id, function: w.function, ready_ms, result });
    }

    fn collect_workers(&mut self, block: bool) {
        let Some(w) = &self.workers else { return };
        let mut done: Vec<Done> = w.done.try_iter().collect();
        if block && done.is_empty() && !self.waiting.is_empty() {
            if let Ok(d) = w.done.recv() {
                done.push(d);
            }
        }
        for (id, out) in done {
            self.finish(id, out);
        }
    }
}

fn spawn_workers(n: usize, cost: WorkerCost) -> Workers {
    let (jobs, job_rx) = unbounded::<Job>();
    let (done_tx, done) = unbounded::<Done>();
    for i in 0..n {
        let rx = job_rx.clone();
        let tx = done_tx.clone();
        let cost = cost.clone();
        thread::Builder::new()
            .name(format!("faas-worker-{i}"))
            .spawn(move || {
                for job in rx {
                    let out = handle(job.function, &job.payload, &cost);
                    if tx.send((job.id, out)).is_err() {
                        break;
                    }
                }
            })
            .expect("spawn faas worker");
    }
    Workers { jobs, done }
}

impl FaasRuntime for Emulator {
    fn invoke(&mut self, function: FunctionKind, payload: Vec<u8>, now_ms: f64, tick: u64) -> InvocationId {
        let id = self.next_id;
        self.next_id += 1;
        let keep_warm = self.cfg.latency(function).keep_warm_ms;
        let (instance, was_cold) = self.pools.entry(function).or_default().claim(now_ms, keep_warm);
        let s = self.samplers.get_mut(&function).expect("sampler per function");
        let mut latency_ms = s.warm.sample();
        if was_cold {
            latency_ms += s.cold.sample();
        }
        self.waiting.insert(
            id,
            Waiting { function, instance, enqueue_tick: tick, enqueue_ms: now_ms, latency_ms, was_cold, payload_bytes: payload.len() },
        );
        match &self.workers {
            Some(w) => {
                let _ = w.jobs.send(Job { id, function, payload });
            }
            None => {
                let out = handle(function, &payload, &self.cfg.cost);
                self.finish(id, out);
            }
        }
        id
    }

    fn poll(&mut self, now_ms: f64) -> Vec<Completion> {
        self.collect_workers(false);
        let later = self.pending.split_off(&(time_key(now_ms), InvocationId::MAX));
        let due = std::mem::replace(&mut self.pending, later);
        due.into_values().collect()
    }

    fn next_ready_ms(&self) -> Option<f64> {
        self.pending.values().next().map(|c| c.ready_ms)
    }

    fn in_flight(&self) -> usize {
        self.waiting.len() + self.pending.len()
    }

    fn take_records(&mut self) -> Vec<InvocationRecord> {
        let mut r = std::mem::take(&mut self.records);
        r.sort_by_key(|r| r.id);
        r
    }
}

impl Emulator {
    /// Waits for every threaded handler to finish; no-op inline.
    pub fn settle(&mut self) {
        while self.workers.is_some() && !self.waiting.is_empty() {
            self.collect_workers(true);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::latency::Distribution;
    use super::super::wire::TerrainRequest;
    use super::*;
    use crate::terrain::WorldSeed;
    use crate::world::{ChunkCoord, GenMode};

    fn terrain_payload(cx: i32) -> Vec<u8> {
        TerrainRequest { seed: WorldSeed::new(1, GenMode::Flat), coord: ChunkCoord::new(cx, 0) }.encode()
    }

    fn fixed(warm: f64, cold: f64, keep_warm_ms: f64, handler: f64) -> EmulatorConfig {
        let lat = LatencyModel { warm: Distribution::constant(warm), cold_extra: Distribution::constant(cold), keep_warm_ms };
        EmulatorConfig {
            sc_latency: lat.clone(),
            terrain_latency: lat,
            cost: WorkerCost { sc_fixed_ms: handler, sc_per_block_step_ms: 0.0, terrain_per_chunk_ms: handler },
            seed: 1,
            workers: 0,
        }
    }

    #[test]
    fn additive_latency() {
        let mut e = Emulator::new(fixed(5.0, 0.0, 1e9, 1.0));
        e.invoke(FunctionKind::TerrainGenerate, terrain_payload(0), 100.0, 2);
        assert!(e.poll(105.9).is_empty());
        let done = e.poll(106.0);
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].ready_ms, 106.0);
        let r = e.take_records();
        assert_eq!(r[0].end_to_end_ms, 6.0);
        assert!(r[0].end_to_end_ms >= r[0].worker_ms);
        assert_eq!(r[0].enqueue_tick, 2);
    }

    #[test]
    fn cold_start_after_idle() {
        let mut e = Emulator::new(fixed(5.0, 400.0, 1000.0, 1.0));
        let f = FunctionKind::TerrainGenerate;
        e.invoke(f, terrain_payload(0), 0.0, 0);
        e.invoke(f, terrain_payload(1), 500.0, 0);
        e.invoke(f, terrain_payload(2), 3000.0, 0);
        let r = e.take_records();
        assert_eq!(r.iter().map(|r| r.was_cold).collect::<Vec<_>>(), vec![true, false, true]);
        assert_eq!(r[0].end_to_end_ms, 406.0);
        assert_eq!(r[1].end_to_end_ms, 6.0);
    }

    #[test]
    fn concurrent_invocations_scale_out() {
        let mut e = Emulator::new(fixed(5.0, 100.0, 1e9, 1.0));
        for i in 0..10 {
            e.invoke(FunctionKind::TerrainGenerate, terrain_payload(i), 0.0, 0);
        }
        assert_eq!(e.instances(FunctionKind::TerrainGenerate), 10);
        assert_eq!(e.poll(1e6).len(), 10);
        for i in 0..10 {
            e.invoke(FunctionKind::TerrainGenerate, terrain_payload(i), 1000.0, 0);
        }
        assert!(e.take_records()[10..].iter().all(|r| !r.was_cold));
    }

    #[test]
    fn replies_arrive_in_time_order() {
        let mut cfg = fixed(0.0, 0.0, 1e9, 0.0);
        cfg.terrain_latency.warm = Distribution::Empirical { samples_ms: vec![30.0, 10.0, 20.0] };
        let mut e = Emulator::new(cfg);
        for i in 0..3 {
            e.invoke(FunctionKind::TerrainGenerate, terrain_payload(i), 0.0, 0);
        }
        assert_eq!(e.next_ready_ms(), Some(10.0));
        let times: Vec<f64> = e.poll(100.0).iter().map(|c| c.ready_ms).collect();
        assert_eq!(times, vec![10.0, 20.0, 30.0]);
    }

    #[test]
    fn seeded_runs_replay() {
        let run = || {
            let mut e = Emulator::new(EmulatorConfig { seed: 77, ..EmulatorConfig::default() });
            for i in 0..50 {
                e.invoke(FunctionKind::TerrainGenerate, terrain_payload(i), i as f64 * 700.0, i as u64);
            }
            e.poll(f64::MAX);
            e.take_records()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cold_fraction_vanishes_with_frequent_calls() {
        let frac = |gap: f64| {
            let mut e = Emulator::new(fixed(5.0, 400.0, 10_000.0, 1.0));
            for i in 0..200 {
                e.invoke(FunctionKind::TerrainGenerate, terrain_payload(0), i as f64 * gap, 0);
            }
            let r = e.take_records();
            r.iter().filter(|r| r.was_cold).count() as f64 / r.len() as f64
        };
        assert_eq!(frac(20_000.0), 1.0);
        assert!(frac(500.0) <= 0.01);
    }

    #[test]
    fn malformed_payload_completes_with_error() {
        let mut e = Emulator::new(fixed(1.0, 0.0, 1e9, 0.0));
        e.invoke(FunctionKind::ScSimulate, vec![1, 2, 3], 0.0, 0);
        let c = e.poll(10.0);
        assert!(matches!(c[0].result, Err(FaasError::Malformed(_))));
    }

    #[test]
    fn threaded_workers_match_inline() {
        let mut inline = Emulator::new(fixed(3.0, 0.0, 1e9, 2.0));
        let mut threaded = Emulator::new(EmulatorConfig { workers: 3, ..fixed(3.0, 0.0, 1e9, 2.0) });
        for i in 0..20 {
            inline.invoke(FunctionKind::TerrainGenerate, terrain_payload(i), 0.0, 0);
            threaded.invoke(FunctionKind::TerrainGenerate, terrain_payload(i), 0.0, 0);
        }
        threaded.settle();
        let mut a = inline.poll(1e9);
        let mut b = threaded.poll(1e9);
        a.sort_by_key(|c| c.id);
        b.sort_by_key(|c| c.id);
        assert_eq!(a, b);
    }
}
