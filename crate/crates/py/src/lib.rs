//! Python bindings for the servo simulation core.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use servo_core::bench;
use servo_core::construct::{simulate_with_loop_detection, ConstructState, ConstructTemplate, Trajectory};
use servo_core::settings;
use servo_core::terrain::{self, WorldSeed};
use servo_core::workload::{run_scenario as run, Scenario};
use servo_core::world::{BlockType, ChunkCoord, GenMode};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn template(name: &str) -> PyResult<ConstructTemplate> {
    match name.to_ascii_lowercase().as_str() {
        "clock252" => Ok(ConstructTemplate::Clock252),
        "clock484" => Ok(ConstructTemplate::Clock484),
        _ => Err(value_err(format!("unknown template {name:?}"))),
    }
}

fn gen_mode(name: &str) -> PyResult<GenMode> {
    match name {
        "flat" => Ok(GenMode::Flat),
        "noise" => Ok(GenMode::Noise),
        _ => Err(value_err(format!("unknown generation mode {name:?}"))),
    }
}

/// A simulated construct built from a reference template.
#[pyclass(name = "Construct")]
struct PyConstruct {
    state: ConstructState,
}

#[pymethods]
impl PyConstruct {
    #[new]
    #[pyo3(signature = (template_name, x=0, y=4, z=0))]
    fn new(template_name: &str, x: i32, y: i32, z: i32) -> PyResult<Self> {
        let origin = servo_core::world::BlockPos::new(x, y, z);
        Ok(PyConstruct { state: template(template_name)?.state(1, origin) })
    }

    #[getter]
    fn active_blocks(&self) -> usize {
        self.state.active_blocks()
    }

    #[getter]
    fn volume(&self) -> usize {
        self.state.bounds.volume()
    }

    /// Digest of the current cells.
    fn state_hash(&self) -> u64 {
        self.state.hash().0
    }

    /// Advances the construct `n` steps.
    #[pyo3(signature = (n=1))]
    fn step(&mut self, n: usize) {
        for _ in 0..n {
            self.state.step_in_place();
        }
    }

    /// Hashes of the states after 1..=n steps.
    fn simulate(&self, n: usize) -> Vec<u64> {
        self.state.simulate(n).iter().map(|s| s.hash().0).collect()
    }

    /// Simulates up to `n` steps with loop detection.
    ///
    /// Returns a dict with `looped`, `prefix`, `period` and `stored_states`.
    fn detect_loop<'py>(&self, py: Python<'py>, n: usize) -> PyResult<Bound<'py, PyDict>> {
        let t = simulate_with_loop_detection(&self.state, n);
        let d = PyDict::new(py);
        d.set_item("stored_states", t.stored_states())?;
        match &t {
            Trajectory::States(s) => {
                d.set_item("looped", false)?;
                d.set_item("prefix", s.len())?;
                d.set_item("period", 0)?;
            }
            Trajectory::Loop(l) => {
                d.set_item("looped", true)?;
                d.set_item("prefix", l.prefix.len())?;
                d.set_item("period", l.period())?;
            }
        }
        Ok(d)
    }

    /// Wire encoding of the current state.
    fn encode(&self) -> Vec<u8> {
        self.state.encode()
    }
}

/// Terrain height of column (x, z).
#[pyfunction]
#[pyo3(signature = (seed, x, z, mode="noise"))]
fn column_height(seed: u64, x: i32, z: i32, mode: &str) -> PyResult<i32> {
    Ok(terrain::column_height(&WorldSeed::new(seed, gen_mode(mode)?), x, z))
}

/// Generates chunk (cx, cz) and returns its encoded bytes.
#[pyfunction]
#[pyo3(signature = (seed, cx, cz, mode="noise"))]
fn generate_chunk(seed: u64, cx: i32, cz: i32, mode: &str) -> PyResult<Vec<u8>> {
    let chunk = terrain::generate_chunk(&WorldSeed::new(seed, gen_mode(mode)?), ChunkCoord::new(cx, cz));
    Ok(chunk.encode())
}

/// Number of solid blocks in an encoded chunk.
#[pyfunction]
fn solid_blocks(encoded: &[u8]) -> PyResult<usize> {
    let chunk = servo_core::world::Chunk::decode(encoded).map_err(value_err)?;
    Ok(chunk.count(BlockType::Solid))
}

/// Nearest-rank percentile, or None for an empty list.
#[pyfunction]
fn percentile(values: Vec<f64>, p: f64) -> Option<f64> {
    bench::percentile(&values, p)
}

/// Largest player count whose ticks stay within budget often enough.
#[pyfunction]
#[pyo3(signature = (groups, budget_ms=50.0))]
fn max_supported_players(groups: BTreeMap<usize, Vec<f64>>, budget_ms: f64) -> usize {
    bench::max_supported_players(&groups, budget_ms)
}

/// Runs a scenario given as TOML text and returns a summary dict.
///
/// With `out_dir`, the metrics files are also written there.
#[pyfunction]
#[pyo3(signature = (scenario_toml, repetition=0, out_dir=None))]
fn run_scenario<'py>(
    py: Python<'py>,
    scenario_toml: &str,
    repetition: u32,
    out_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let sc: Scenario =
        settings::from_str_with(scenario_toml, "<python>", settings::ENV_PREFIX, std::env::vars()).map_err(value_err)?;
    sc.validate().map_err(value_err)?;
    let out = py.detach(|| run(&sc, repetition)).map_err(value_err)?;
    if let Some(dir) = &out_dir {
        bench::emit(&out.log, dir, &sc.manifest(repetition)).map_err(value_err)?;
    }
    let budget = sc.server.tick_budget_ms();
    let steady: Vec<_> = out.log.steady_ticks(sc.warmup_s * 1000.0).collect();
    let durations: Vec<f64> = steady.iter().map(|t| t.duration_ms).collect();
    let groups = bench::group_by_players(steady.iter().copied());
    let d = PyDict::new(py);
    d.set_item("ticks", out.log.tick_samples.len())?;
    d.set_item("players", out.server.players())?;
    d.set_item("refused", out.refused)?;
    d.set_item("median_tick_ms", bench::percentile(&durations, 50.0))?;
    d.set_item("p95_tick_ms", bench::percentile(&durations, 95.0))?;
    d.set_item("over_budget", bench::over_budget_fraction(&durations, budget))?;
    d.set_item("max_supported_players", bench::max_supported_players(&groups, budget))?;
    d.set_item("invocations", out.log.invocations.len())?;
    let warmup_tick = (sc.warmup_s * 1000.0 / budget) as u64;
    let eff = bench::efficiency_row(0, &out.log.steady_efficiency(warmup_tick));
    d.set_item("median_efficiency", eff.map(|r| r.median))?;
    Ok(d)
}

/// Text report for a directory written by `run_scenario` or the CLI.
#[pyfunction]
fn report(dir: PathBuf) -> PyResult<String> {
    bench::report(&dir).map_err(value_err)
}

#[pymodule]
fn servo_sim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConstruct>()?;
    m.add_function(wrap_pyfunction!(column_height, m)?)?;
    m.add_function(wrap_pyfunction!(generate_chunk, m)?)?;
    m.add_function(wrap_pyfunction!(solid_blocks, m)?)?;
    m.add_function(wrap_pyfunction!(percentile, m)?)?;
    m.add_function(wrap_pyfunction!(max_supported_players, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
