use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, LogNormal};
use serde::{Deserialize, Serialize};

/// A latency distribution in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Constant { ms: f64 },
    Lognormal { median_ms: f64, sigma: f64 },
    /// Lognormal body with probability `1 - tail_prob`, otherwise a uniform
    /// draw from `[tail_min_ms, tail_max_ms]`.
    TwoPiece {
        median_ms: f64,
        sigma: f64,
        tail_prob: f64,
        tail_min_ms: f64,
        tail_max_ms: f64,
    },
    /// Replays a recorded trace in order, starting at a seed-derived offset.
    Empirical { samples_ms: Vec<f64> },
}

impl Distribution {
    pub fn zero() -> Self {
        Distribution::Constant { ms: 0.0 }
    }

    pub fn constant(ms: f64) -> Self {
        Distribution::Constant { ms }
    }

    pub fn lognormal(median_ms: f64, sigma: f64) -> Self {
        Distribution::Lognormal { median_ms, sigma }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, cursor: &mut usize) -> f64 {
        let v = match self {
            Distribution::Constant { ms } => *ms,
            Distribution::Lognormal { median_ms, sigma } => lognormal(rng, *median_ms, *sigma),
            Distribution::TwoPiece { median_ms, sigma, tail_prob, tail_min_ms, tail_max_ms } => {
                if rng.random::<f64>() < *tail_prob {
                    rng.random_range(*tail_min_ms..=*tail_max_ms)
                } else {
                    lognormal(rng, *median_ms, *sigma)
                }
            }
            Distribution::Empirical { samples_ms } => {
                if samples_ms.is_empty() {
                    0.0
                } else {
                    let v = samples_ms[*cursor % samples_ms.len()];
                    *cursor += 1;
                    v
                }
            }
        };
        v.max(0.0)
    }

    pub fn mean_estimate(&self) -> f64 {
        match self {
            Distribution::Constant { ms } => *ms,
            Distribution::Lognormal { median_ms, sigma } => median_ms * (sigma * sigma / 2.0).exp(),
            Distribution::TwoPiece { median_ms, sigma, tail_prob, tail_min_ms, tail_max_ms } => {
                (1.0 - tail_prob) * median_ms * (sigma * sigma / 2.0).exp()
                    + tail_prob * (tail_min_ms + tail_max_ms) / 2.0
            }
            Distribution::Empirical { samples_ms } => {
                samples_ms.iter().sum::<f64>() / samples_ms.len().max(1) as f64
            }
        }
    }
}

fn lognormal(rng: &mut ChaCha8Rng, median_ms: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 || median_ms <= 0.0 {
        return median_ms.max(0.0);
    }
    LogNormal::new(median_ms.ln(), sigma)
        .map(|d| d.sample(rng))
        .unwrap_or(median_ms)
}

/// A distribution bound to its own seeded random stream.
#[derive(Clone, Debug)]
pub struct Sampler {
    dist: Distribution,
    rng: ChaCha8Rng,
    cursor: usize,
}

impl Sampler {
    pub fn new(dist: Distribution, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cursor = match &dist {
            Distribution::Empirical { samples_ms } if !samples_ms.is_empty() => {
                rng.random_range(0..samples_ms.len())
            }
            _ => 0,
        };
        Sampler { dist, rng, cursor }
    }

    pub fn sample(&mut self) -> f64 {
        self.dist.draw(&mut self.rng, &mut self.cursor)
    }

    pub fn distribution(&self) -> &Distribution {
        &self.dist
    }
}

/// Invocation latency of the emulated function platform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    /// Network and dispatch overhead of a warm invocation.
    pub warm: Distribution,
    /// Extra latency when a fresh instance must be provisioned.
    pub cold_extra: Distribution,
    /// Instances idle longer than this are deallocated.
    pub keep_warm_ms: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            warm: Distribution::lognormal(60.0, 0.4),
            cold_extra: Distribution::constant(400.0),
            keep_warm_ms: 120_000.0,
        }
    }
}

impl LatencyModel {
    pub fn zero() -> Self {
        LatencyModel {
            warm: Distribution::zero(),
            cold_extra: Distribution::zero(),
            keep_warm_ms: f64::INFINITY,
        }
    }
}

/// Modelled execution time of the function handlers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkerCost {
    pub sc_fixed_ms: f64,
    /// Per simulated step, per stateful block.
    pub sc_per_block_step_ms: f64,
    pub terrain_per_chunk_ms: f64,
}

impl Default for WorkerCost {
    fn default() -> Self {
        WorkerCost {
            sc_fixed_ms: 2.0,
            sc_per_block_step_ms: 0.004,
            terrain_per_chunk_ms: 50.0,
        }
    }
}

impl WorkerCost {
    pub fn zero() -> Self {
        WorkerCost { sc_fixed_ms: 0.0, sc_per_block_step_ms: 0.0, terrain_per_chunk_ms: 0.0 }
    }
}
