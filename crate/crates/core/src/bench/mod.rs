//! Metrics aggregation, derived statistics and CSV output.
//!
//! Column schemas of the emitted files:
//!
//! * `tick_durations.csv`: tick, start_ms, duration_ms, actions_ms, sc_ms,
//!   chunk_load_ms, emit_ms, players, wall_ms
//! * `efficiency.csv`: invocation_id, construct_id, issued_tick,
//!   resolved_tick, start_tick, total_steps, duplicated_steps, efficiency,
//!   outcome
//! * `invocations.csv`: id, function, enqueue_tick, enqueue_ms,
//!   end_to_end_ms, worker_ms, was_cold, payload_bytes, reply_bytes
//! * `storage_latency.csv`: key, issued_ms, latency_ms, hit, kind
//! * `distance.csv`: tick, time_s, blocks
//!
//! `wall_ms` is the only column measured on the real clock.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::faas::InvocationRecord;
use crate::server::{Breakdown, DistanceSample, TickSample};
use crate::spec_exec::EfficiencyRecord;
use crate::storage::{ReadKind, StorageRead};

pub const TICK_FILE: &str = "tick_durations.csv";
pub const EFFICIENCY_FILE: &str = "efficiency.csv";
pub const INVOCATION_FILE: &str = "invocations.csv";
pub const STORAGE_FILE: &str = "storage_latency.csv";
pub const DISTANCE_FILE: &str = "distance.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub tick_samples: Vec<TickSample>,
    pub invocations: Vec<InvocationRecord>,
    pub efficiency: Vec<EfficiencyRecord>,
    pub storage_reads: Vec<StorageRead>,
    pub distance_series: Vec<DistanceSample>,
}

impl MetricsLog {
    /// Tick samples starting at or after `warmup_ms`.
    pub fn steady_ticks(&self, warmup_ms: f64) -> impl Iterator<Item = &TickSample> {
        self.tick_samples.iter().filter(move |s| s.start_ms >= warmup_ms)
    }

    /// Efficiency records of invocations issued at or after `warmup_tick`.
    pub fn steady_efficiency(&self, warmup_tick: u64) -> Vec<EfficiencyRecord> {
        self.efficiency.iter().filter(|r| r.issued_tick >= warmup_tick).cloned().collect()
    }

    /// Demand-read latencies issued at or after `warmup_ms`.
    pub fn demand_read_latencies(&self, warmup_ms: f64) -> Vec<f64> {
        self.storage_reads
            .iter()
            .filter(|r| r.kind == ReadKind::Demand && r.issued_ms >= warmup_ms)
            .map(|r| r.latency_ms)
            .collect()
    }
}

/// Nearest-rank percentile, `p` in (0, 100].
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(percentile_sorted(&v, p))
}

pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Tick durations grouped by the number of connected players.
pub fn group_by_players<'a>(samples: impl IntoIterator<Item = &'a TickSample>) -> BTreeMap<usize, Vec<f64>> {
    let mut g: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for s in samples {
        g.entry(s.players).or_default().push(s.duration_ms);
    }
    g
}

/// Fraction of samples strictly above `budget_ms`.
pub fn over_budget_fraction(durations: &[f64], budget_ms: f64) -> f64 {
    if durations.is_empty() {
        return 0.0;
    }
    durations.iter().filter(|&&d| d > budget_ms).count() as f64 / durations.len() as f64
}

/// Largest player count whose group has fewer than 5% of its tick
/// durations above the budget; 0 when no group qualifies.
pub fn max_supported_players(groups: &BTreeMap<usize, Vec<f64>>, budget_ms: f64) -> usize {
    groups
        .iter()
        .filter(|(_, d)| !d.is_empty() && over_budget_fraction(d, budget_ms) < 0.05)
        .map(|(&n, _)| n)
        .max()
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub group: u32,
    pub count: usize,
    pub p5: f64,
    pub median: f64,
    pub p95: f64,
    /// Fraction of invocations with efficiency exactly 1.
    pub full: f64,
}

pub fn efficiency_row(group: u32, records: &[EfficiencyRecord]) -> Option<EfficiencyRow> {
    if records.is_empty() {
        return None;
    }
    let mut e: Vec<f64> = records.iter().map(|r| r.efficiency).collect();
    e.sort_by(f64::total_cmp);
    Some(EfficiencyRow {
        group,
        count: e.len(),
        p5: percentile_sorted(&e, 5.0),
        median: percentile_sorted(&e, 50.0),
        p95: percentile_sorted(&e, 95.0),
        full: e.iter().filter(|&&x| x == 1.0).count() as f64 / e.len() as f64,
    })
}

/// One row per non-empty group (e.g. per tick lead or per step count).
pub fn efficiency_summary(groups: &BTreeMap<u32, Vec<EfficiencyRecord>>) -> Vec<EfficiencyRow> {
    groups.iter().filter_map(|(g, r)| efficiency_row(*g, r)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateCard {
    pub per_gb_second: f64,
    pub memory_gb: f64,
    pub per_request: f64,
}

impl Default for RateCard {
    fn default() -> Self {
        RateCard { per_gb_second: 0.000_016_666_7, memory_gb: 1.0, per_request: 0.000_000_2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub invocations: usize,
    pub invocation_seconds: f64,
    pub dollars: f64,
    pub dollars_per_hour: f64,
}

/// Billed cost of `invocations` over a run of `span_s` seconds. Handler
/// time is billed when known, end-to-end time otherwise.
pub fn cost_report(invocations: &[InvocationRecord], rate: &RateCard, span_s: f64) -> CostReport {
    let seconds: f64 = invocations
        .iter()
        .map(|r| if r.worker_ms > 0.0 { r.worker_ms } else { r.end_to_end_ms } / 1e3)
        .sum::<f64>()
        + 0.0;
    let dollars = seconds * rate.memory_gb * rate.per_gb_second + invocations.len() as f64 * rate.per_request;
    CostReport {
        invocations: invocations.len(),
        invocation_seconds: seconds,
        dollars,
        dollars_per_hour: if span_s > 0.0 { dollars * 3600.0 / span_s } else { 0.0 },
    }
}

/// Whether the reverse CDF of `a` lies at or left of that of `b` at every
/// listed percentile.
pub fn rcdf_left_of(a: &[f64], b: &[f64], percentiles: &[f64]) -> bool {
    percentiles.iter().all(|&p| match (percentile(a, p), percentile(b, p)) {
        (Some(x), Some(y)) => x <= y,
        _ => false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TickRow {
    tick: u64,
    start_ms: f64,
    duration_ms: f64,
    actions_ms: f64,
    sc_ms: f64,
    chunk_load_ms: f64,
    emit_ms: f64,
    players: usize,
    wall_ms: f64,
}

impl From<&TickSample> for TickRow {
    fn from(s: &TickSample) -> Self {
        TickRow {
            tick: s.tick,
            start_ms: s.start_ms,
            duration_ms: s.duration_ms,
            actions_ms: s.breakdown.actions_ms,
            sc_ms: s.breakdown.sc_ms,
            chunk_load_ms: s.breakdown.chunk_load_ms,
            emit_ms: s.breakdown.emit_ms,
            players: s.players,
            wall_ms: s.wall_ms,
        }
    }
}

impl From<TickRow> for TickSample {
    fn from(r: TickRow) -> Self {
        TickSample {
            tick: r.tick,
            start_ms: r.start_ms,
            duration_ms: r.duration_ms,
            breakdown: Breakdown {
                actions_ms: r.actions_ms,
                sc_ms: r.sc_ms,
                chunk_load_ms: r.chunk_load_ms,
                emit_ms: r.emit_ms,
            },
            players: r.players,
            wall_ms: r.wall_ms,
        }
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>, header: &[&str]) -> Result<(), BenchError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, BenchError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Writes one CSV file per series plus `manifest.json` into `dir`.
pub fn emit(log: &MetricsLog, dir: &Path, manifest: &serde_json::Value) -> Result<(), BenchError> {
    fs::create_dir_all(dir)?;
    write_csv(
        &dir.join(TICK_FILE),
        log.tick_samples.iter().map(TickRow::from),
        &["tick", "start_ms", "duration_ms", "actions_ms", "sc_ms", "chunk_load_ms", "emit_ms", "players", "wall_ms"],
    )?;
    write_csv(
        &dir.join(EFFICIENCY_FILE),
        &log.efficiency,
        &[
            "invocation_id",
            "construct_id",
            "issued_tick",
            "resolved_tick",
            "start_tick",
            "total_steps",
            "duplicated_steps",
            "efficiency",
            "outcome",
        ],
    )?;
    write_csv(
        &dir.join(INVOCATION_FILE),
        &log.invocations,
        &[
            "id",
            "function",
            "enqueue_tick",
            "enqueue_ms",
            "end_to_end_ms",
            "worker_ms",
            "was_cold",
            "payload_bytes",
            "reply_bytes",
        ],
    )?;
    write_csv(&dir.join(STORAGE_FILE), &log.storage_reads, &["key", "issued_ms", "latency_ms", "hit", "kind"])?;
    write_csv(&dir.join(DISTANCE_FILE), &log.distance_series, &["tick", "time_s", "blocks"])?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(MetricsLog, serde_json::Value), BenchError> {
    let ticks: Vec<TickRow> = read_csv(&dir.join(TICK_FILE))?;
    let log = MetricsLog {
        tick_samples: ticks.into_iter().map(TickSample::from).collect(),
        invocations: read_csv(&dir.join(INVOCATION_FILE))?,
        efficiency: read_csv(&dir.join(EFFICIENCY_FILE))?,
        storage_reads: read_csv(&dir.join(STORAGE_FILE))?,
        distance_series: read_csv(&dir.join(DISTANCE_FILE))?,
    };
    let manifest = match fs::read_to_string(dir.join(MANIFEST_FILE)) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => serde_json::Value::Null,
        Err(e) => return Err(e.into()),
    };
    Ok((log, manifest))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

/// Human-readable summary of one run directory.
pub fn report(dir: &Path) -> Result<String, BenchError> {
    let (log, manifest) = load(dir)?;
    let warmup_s = manifest.pointer("/scenario/warmup_s").and_then(|v| v.as_f64()).unwrap_or(0.0);
    let budget = manifest.pointer("/tick_budget_ms").and_then(|v| v.as_f64()).unwrap_or(50.0);
    let warmup_ms = warmup_s * 1e3;
    let mut out = String::new();
    let name = manifest.pointer("/scenario/name").and_then(|v| v.as_str()).unwrap_or("run");
    let _ = writeln!(out, "{name} ({})", dir.display());
    let _ = writeln!(out, "warm-up excluded: {warmup_s} s, tick budget {budget} ms");

    let steady: Vec<&TickSample> = log.steady_ticks(warmup_ms).collect();
    let d: Vec<f64> = steady.iter().map(|s| s.duration_ms).collect();
    let _ = writeln!(
        out,
        "ticks: {} (p50 {} ms, p95 {} ms, p99 {} ms, over budget {:.2}%)",
        d.len(),
        fmt_opt(percentile(&d, 50.0)),
        fmt_opt(percentile(&d, 95.0)),
        fmt_opt(percentile(&d, 99.0)),
        100.0 * over_budget_fraction(&d, budget)
    );
    let groups = group_by_players(steady.iter().copied());
    let _ = writeln!(out, "max supported players: {}", max_supported_players(&groups, budget));
    for (n, g) in &groups {
        let _ = writeln!(
            out,
            "  players {n:>4}: {:>6} ticks, p95 {:>8} ms, over budget {:.2}%",
            g.len(),
            fmt_opt(percentile(g, 95.0)),
            100.0 * over_budget_fraction(g, budget)
        );
    }

    let warmup_tick = steady.first().map_or(0, |s| s.tick);
    let eff = log.steady_efficiency(warmup_tick);
    match efficiency_row(0, &eff) {
        Some(r) => {
            let _ = writeln!(
                out,
                "efficiency: {} invocations, p5 {:.3}, median {:.3}, p95 {:.3}, at 1.00: {:.2}%",
                r.count,
                r.p5,
                r.median,
                r.p95,
                100.0 * r.full
            );
        }
        None => {
            let _ = writeln!(out, "efficiency: no offloaded invocations");
        }
    }

    let reads = log.demand_read_latencies(warmup_ms);
    let _ = writeln!(
        out,
        "storage demand reads: {} (p50 {} ms, p99 {} ms, p99.9 {} ms, max {} ms)",
        reads.len(),
        fmt_opt(percentile(&reads, 50.0)),
        fmt_opt(percentile(&reads, 99.0)),
        fmt_opt(percentile(&reads, 99.9)),
        fmt_opt(percentile(&reads, 100.0))
    );

    let dist: Vec<f64> =
        log.distance_series.iter().filter(|s| s.time_s >= warmup_s).map(|s| s.blocks as f64).collect();
    let _ = writeln!(
        out,
        "distance to closest unloaded chunk: min {} blocks, median {} blocks",
        fmt_opt(dist.iter().copied().reduce(f64::min)),
        fmt_opt(percentile(&dist, 50.0))
    );

    let span_s = log.tick_samples.last().map_or(0.0, |s| (s.start_ms + s.duration_ms) / 1e3);
    let rate: RateCard = manifest
        .pointer("/rate_card")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default();
    let cost = cost_report(&log.invocations, &rate, span_s);
    let _ = writeln!(
        out,
        "cost: {} invocations, {:.1} invocation-s, ${:.4} (${:.3}/hour)",
        cost.invocations, cost.invocation_seconds, cost.dollars, cost.dollars_per_hour
    );
    Ok(out)
}

#[cfg(test)]
mod tests;
