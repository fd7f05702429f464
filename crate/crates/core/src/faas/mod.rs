//! Function-as-a-service runtime: the two function handlers, a local
//! emulator with cold starts and injected latency, and an HTTP adapter.

mod emulator;
mod http;
mod latency;
pub mod wire;

pub use emulator::{Emulator, EmulatorConfig};
pub use http::{serve_functions, HttpRuntime};
pub use latency::{Distribution, LatencyModel, Sampler, WorkerCost};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spec_exec::{reply_for, simulate_request, simulated_steps, OffloadRequest};
use crate::terrain::generate_chunk;
use wire::{decode_frame, encode_frame, error_frame, TerrainRequest};

pub type InvocationId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum FunctionKind {
    ScSimulate = 1,
    TerrainGenerate = 2,
}

impl FunctionKind {
    pub const ALL: [FunctionKind; 2] = [FunctionKind::ScSimulate, FunctionKind::TerrainGenerate];

    pub fn from_tag(tag: u8) -> Result<Self, FaasError> {
        match tag {
            1 => Ok(FunctionKind::ScSimulate),
            2 => Ok(FunctionKind::TerrainGenerate),
            t => Err(FaasError::Malformed(format!("unknown function tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FunctionKind::ScSimulate => "sc_simulate",
            FunctionKind::TerrainGenerate => "terrain_generate",
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum FaasError {
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("remote function failed: {0}")]
    Remote(String),
    #[error("transport error: {0}")]
    Transport(String),
}

/// Reply bytes plus the modelled handler execution time.
#[derive(Clone, Debug, PartialEq)]
pub struct HandlerOutput {
    pub reply: Vec<u8>,
    pub worker_ms: f64,
}

pub fn sc_simulate_handler(payload: &[u8], cost: &WorkerCost) -> Result<HandlerOutput, FaasError> {
    let req = OffloadRequest::decode(payload).map_err(|e| FaasError::Malformed(e.to_string()))?;
    let trajectory = simulate_request(&req);
    let steps = simulated_steps(&trajectory, req.num_steps) as f64;
    let worker_ms = cost.sc_fixed_ms + cost.sc_per_block_step_ms * req.state.active_blocks() as f64 * steps;
    Ok(HandlerOutput { reply: reply_for(&req, trajectory, worker_ms).encode(), worker_ms })
}

pub fn terrain_generate_handler(payload: &[u8], cost: &WorkerCost) -> Result<HandlerOutput, FaasError> {
    let req = TerrainRequest::decode(payload)?;
    let chunk = generate_chunk(&req.seed, req.coord);
    Ok(HandlerOutput { reply: chunk.encode(), worker_ms: cost.terrain_per_chunk_ms })
}

pub fn handle(function: FunctionKind, payload: &[u8], cost: &WorkerCost) -> Result<HandlerOutput, FaasError> {
    match function {
        FunctionKind::ScSimulate => sc_simulate_handler(payload, cost),
        FunctionKind::TerrainGenerate => terrain_generate_handler(payload, cost),
    }
}

/// Frame-in, frame-out entry point shared by every transport.
pub fn handle_frame(frame: &[u8], cost: &WorkerCost) -> Vec<u8> {
    let run = || -> Result<Vec<u8>, FaasError> {
        let (tag, payload) = decode_frame(frame)?;
        let kind = FunctionKind::from_tag(tag)?;
        Ok(encode_frame(tag, &handle(kind, payload, cost)?.reply))
    };
    run().unwrap_or_else(|e| error_frame(&e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub id: InvocationId,
    pub function: FunctionKind,
    pub enqueue_tick: u64,
    pub enqueue_ms: f64,
    pub end_to_end_ms: f64,
    pub worker_ms: f64,
    pub was_cold: bool,
    pub payload_bytes: usize,
    pub reply_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub id: InvocationId,
    pub function: FunctionKind,
    /// Time at which the reply reached the caller.
    pub ready_ms: f64,
    pub result: Result<Vec<u8>, FaasError>,
}

/// A serverless platform as seen by the game server.
///
/// Times are milliseconds on the caller's clock; `poll` returns the
/// replies that have arrived by `now_ms`, ordered by arrival.
pub trait FaasRuntime: Send {
    fn invoke(&mut self, function: FunctionKind, payload: Vec<u8>, now_ms: f64, tick: u64) -> InvocationId;
    fn poll(&mut self, now_ms: f64) -> Vec<Completion>;
    /// Arrival time of the earliest reply still pending, when known.
    fn next_ready_ms(&self) -> Option<f64>;
    fn in_flight(&self) -> usize;
    fn take_records(&mut self) -> Vec<InvocationRecord>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construct::{ConstructState, ConstructTemplate, Trajectory};
    use crate::spec_exec::OffloadReply;
    use crate::terrain::WorldSeed;
    use crate::world::{BlockPos, ChunkCoord, GenMode};

    fn request(tpl: ConstructTemplate, n: u32, loops: bool) -> OffloadRequest {
        let state = tpl.state(5, BlockPos::new(0, 4, 0));
        OffloadRequest {
            request_id: 1,
            construct_id: 5,
            start_tick: 0,
            num_steps: n,
            logical_ts: 3,
            loop_detection: loops,
            state: ConstructState { logical_ts: 3, ..state },
        }
    }

    #[test]
    fn sc_handler_matches_local_simulation() {
        let req = request(ConstructTemplate::Clock484, 100, false);
        let out = sc_simulate_handler(&req.encode(), &WorkerCost::default()).unwrap();
        let reply = OffloadReply::decode(&out.reply).unwrap();
        assert_eq!((reply.logical_ts, reply.start_tick), (3, 0));
        let Trajectory::States(states) = reply.payload else { panic!("plain states expected") };
        let oracle = req.state.simulate(100);
        assert_eq!(states.len(), 100);
        for (a, b) in states.iter().zip(&oracle) {
            assert_eq!(a, &b.cells);
        }
    }

    #[test]
    fn loop_reply_is_smaller() {
        let cost = WorkerCost::default();
        let full = sc_simulate_handler(&request(ConstructTemplate::Clock252, 200, false).encode(), &cost).unwrap();
        let folded = sc_simulate_handler(&request(ConstructTemplate::Clock252, 200, true).encode(), &cost).unwrap();
        assert!(folded.reply.len() * 5 < full.reply.len(), "{} vs {}", folded.reply.len(), full.reply.len());
        assert!(folded.worker_ms < full.worker_ms);
    }

    #[test]
    fn handlers_are_pure() {
        let cost = WorkerCost::default();
        let f = wire::encode_frame(1, &request(ConstructTemplate::Clock252, 50, true).encode());
        assert_eq!(handle_frame(&f, &cost), handle_frame(&f, &cost));
        let t = TerrainRequest { seed: WorldSeed::new(8, GenMode::Noise), coord: ChunkCoord::new(2, -3) };
        let g = wire::encode_frame(2, &t.encode());
        let a = handle_frame(&g, &cost);
        assert_eq!(a, handle_frame(&g, &cost));
        let chunk = generate_chunk(&t.seed, t.coord).encode();
        assert_eq!(wire::reply_payload(&a).unwrap(), chunk);
    }

    #[test]
    fn malformed_payload_yields_error_frame() {
        let cost = WorkerCost::default();
        let reply = handle_frame(&wire::encode_frame(1, &[1, 2, 3]), &cost);
        assert!(matches!(wire::reply_payload(&reply), Err(FaasError::Remote(_))));
        let reply = handle_frame(&[0xAB], &cost);
        assert_eq!(reply[0], wire::ERROR_TAG);
    }
}
