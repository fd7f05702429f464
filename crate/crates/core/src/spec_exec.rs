//! Replicated speculative execution of constructs.
//!
//! Every construct is stepped locally each tick unless a validated remote
//! state for that tick is buffered. Remote invocations are issued ahead of
//! need by the configured tick lead. Replies computed from an outdated
//! logical timestamp are discarded, so offloading never changes what the
//! world observes.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::construct::{
    decode_bounds, decode_cells, encode_bounds, encode_cells, expand, simulate_with_loop_detection, Bounds, Cells,
    ConstructId, ConstructState, LoopDescriptor, Trajectory,
};
use crate::world::{CodecError, Reader};

pub type RequestId = u64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OffloadRequest {
    pub request_id: RequestId,
    pub construct_id: ConstructId,
    pub state: ConstructState,
    pub start_tick: u64,
    pub num_steps: u32,
    pub logical_ts: u64,
    pub loop_detection: bool,
}

impl OffloadRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 2 * self.state.cells.len());
        for v in [self.request_id, self.construct_id, self.start_tick, self.logical_ts] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.num_steps.to_le_bytes());
        out.push(self.loop_detection as u8);
        out.extend_from_slice(&self.state.encode());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let (request_id, construct_id, start_tick, logical_ts) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
        let num_steps = r.u32()?;
        let loop_detection = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(CodecError::Invalid(format!("bad flag {f}"))),
        };
        let (state, used) = ConstructState::decode(r.rest(), construct_id, logical_ts, start_tick)?;
        if used != r.rest().len() {
            return Err(CodecError::Invalid("trailing bytes after state".into()));
        }
        if num_steps == 0 {
            return Err(CodecError::Invalid("num_steps must be at least 1".into()));
        }
        Ok(OffloadRequest { request_id, construct_id, state, start_tick, num_steps, logical_ts, loop_detection })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OffloadReply {
    pub request_id: RequestId,
    pub construct_id: ConstructId,
    pub start_tick: u64,
    pub logical_ts: u64,
    pub bounds: Bounds,
    /// Index `k` is the state at tick `start_tick + 1 + k`.
    pub payload: Trajectory,
    pub worker_duration_ms: f64,
}

impl OffloadReply {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [self.request_id, self.construct_id, self.start_tick, self.logical_ts] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.worker_duration_ms.to_le_bytes());
        encode_bounds(&self.bounds, &mut out);
        match &self.payload {
            Trajectory::States(states) => {
                out.push(0);
                out.extend_from_slice(&(states.len() as u32).to_le_bytes());
                for s in states {
                    encode_cells(s, &mut out);
                }
            }
            Trajectory::Loop(d) => {
                out.push(1);
                out.extend_from_slice(&(d.prefix.len() as u32).to_le_bytes());
                out.extend_from_slice(&(d.cycle.len() as u32).to_le_bytes());
                for s in d.prefix.iter().chain(&d.cycle) {
                    encode_cells(s, &mut out);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let (request_id, construct_id, start_tick, logical_ts) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
        let worker_duration_ms = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let (bounds, n) = decode_bounds(r.rest())?;
        r.take(n)?;
        let volume = bounds.volume();
        let cells = |r: &mut Reader, count: usize| -> Result<Vec<Cells>, CodecError> {
            (0..count)
                .map(|_| {
                    let (c, used) = decode_cells(r.rest(), volume)?;
                    r.take(used)?;
                    Ok(c)
                })
                .collect()
        };
        let payload = match r.u8()? {
            0 => {
                let count = r.u32()? as usize;
                Trajectory::States(cells(&mut r, count)?)
            }
            1 => {
                let (p, c) = (r.u32()? as usize, r.u32()? as usize);
                if c == 0 {
                    return Err(CodecError::Invalid("empty cycle".into()));
                }
                let prefix = cells(&mut r, p)?;
                let cycle = cells(&mut r, c)?;
                Trajectory::Loop(LoopDescriptor { entry_index: prefix.len(), prefix, cycle })
            }
            k => return Err(CodecError::Invalid(format!("bad payload kind {k}"))),
        };
        if !r.rest().is_empty() {
            return Err(CodecError::Invalid("trailing bytes after payload".into()));
        }
        Ok(OffloadReply { request_id, construct_id, start_tick, logical_ts, bounds, payload, worker_duration_ms })
    }
}

/// The remote simulation itself; pure in its input.
pub fn simulate_request(req: &OffloadRequest) -> Trajectory {
    if req.loop_detection {
        simulate_with_loop_detection(&req.state, req.num_steps as usize)
    } else {
        Trajectory::States(req.state.simulate(req.num_steps as usize).into_iter().map(|s| s.cells).collect())
    }
}

/// Steps the function actually simulated to produce `t`.
pub fn simulated_steps(t: &Trajectory, requested: u32) -> u32 {
    match t {
        Trajectory::States(s) => s.len() as u32,
        Trajectory::Loop(d) => (d.stored_states() as u32 + 1).min(requested),
    }
}

pub fn reply_for(req: &OffloadRequest, payload: Trajectory, worker_duration_ms: f64) -> OffloadReply {
    OffloadReply {
        request_id: req.request_id,
        construct_id: req.construct_id,
        start_tick: req.start_tick,
        logical_ts: req.logical_ts,
        bounds: req.state.bounds,
        payload,
        worker_duration_ms,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OffloadPolicy {
    pub num_steps: u32,
    pub tick_lead: u32,
    pub loop_detection: bool,
    /// Issue a replacement request as soon as a modification invalidates
    /// the one in flight, instead of waiting for its reply.
    pub reinvoke_on_stale: bool,
}

impl Default for OffloadPolicy {
    fn default() -> Self {
        OffloadPolicy { num_steps: 100, tick_lead: 20, loop_detection: true, reinvoke_on_stale: true }
    }
}

impl OffloadPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_steps == 0 {
            return Err("num_steps must be at least 1".into());
        }
        if self.num_steps <= self.tick_lead {
            warn!("num_steps {} does not exceed tick_lead {}", self.num_steps, self.tick_lead);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Accepted,
    Stale,
    /// No reply before its whole range was simulated locally, or the
    /// invocation failed.
    Lost,
    /// The construct no longer exists.
    Dropped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRecord {
    pub invocation_id: RequestId,
    pub construct_id: ConstructId,
    pub issued_tick: u64,
    pub resolved_tick: u64,
    pub start_tick: u64,
    pub total_steps: u32,
    pub duplicated_steps: u32,
    pub efficiency: f64,
    pub outcome: Outcome,
}

impl EfficiencyRecord {
    fn new(inv: &InFlight, resolved_tick: u64, duplicated: u32, outcome: Outcome) -> Self {
        let total = inv.num_steps;
        let duplicated = duplicated.min(total);
        EfficiencyRecord {
            invocation_id: inv.id,
            construct_id: inv.construct_id,
            issued_tick: inv.issued_tick,
            resolved_tick,
            start_tick: inv.start_tick,
            total_steps: total,
            duplicated_steps: duplicated,
            efficiency: (total - duplicated) as f64 / total as f64,
            outcome,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AcceptResult {
    Accepted { accepted: u32, late: u32 },
    Stale,
    Late,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpecError {
    #[error("construct {0} no longer exists")]
    UnknownConstruct(ConstructId),
    #[error("no outstanding request {0}")]
    UnknownRequest(RequestId),
}

/// Where the state applied for a tick came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TickSource {
    Speculative,
    Local,
}

#[derive(Clone, Debug)]
struct InFlight {
    id: RequestId,
    construct_id: ConstructId,
    start_tick: u64,
    num_steps: u32,
    logical_ts: u64,
    issued_tick: u64,
    duplicated: u32,
}

impl InFlight {
    fn covers(&self, tick: u64) -> bool {
        tick > self.start_tick && tick <= self.start_tick + self.num_steps as u64
    }

    fn end_tick(&self) -> u64 {
        self.start_tick + self.num_steps as u64
    }
}

#[derive(Clone, Debug)]
struct CycleSegment {
    /// Tick of `desc.cycle[0]`.
    first_tick: u64,
    desc: Arc<LoopDescriptor>,
}

#[derive(Clone, Debug, Default)]
struct Track {
    logical_ts: u64,
    buffer: VecDeque<(u64, Cells)>,
    cycle: Option<CycleSegment>,
    /// The request whose results this construct is waiting for.
    current: Option<RequestId>,
}

impl Track {
    fn invalidate(&mut self) {
        self.buffer.clear();
        self.cycle = None;
    }

    fn take(&mut self, tick: u64) -> Option<Cells> {
        while let Some((t, _)) = self.buffer.front() {
            if *t >= tick {
                break;
            }
            self.buffer.pop_front();
        }
        if matches!(self.buffer.front(), Some((t, _)) if *t == tick) {
            return self.buffer.pop_front().map(|(_, c)| c);
        }
        let seg = self.cycle.as_ref()?;
        if tick < seg.first_tick {
            return None;
        }
        let k = ((tick - seg.first_tick) % seg.desc.period() as u64) as usize;
        Some(seg.desc.cycle[k].clone())
    }

    /// Buffered states after the current tick; `None` means unbounded.
    fn remaining(&self) -> Option<usize> {
        if self.cycle.is_some() {
            None
        } else {
            Some(self.buffer.len())
        }
    }
}

/// Per-server speculative execution bookkeeping.
#[derive(Clone, Debug)]
pub struct SpeculativeUnit {
    pub policy: OffloadPolicy,
    tracks: BTreeMap<ConstructId, Track>,
    outstanding: BTreeMap<RequestId, InFlight>,
    records: Vec<EfficiencyRecord>,
    next_request: RequestId,
    local_steps: u64,
    speculative_steps: u64,
}

impl SpeculativeUnit {
    pub fn new(policy: OffloadPolicy) -> Self {
        SpeculativeUnit {
            policy,
            tracks: BTreeMap::new(),
            outstanding: BTreeMap::new(),
            records: Vec::new(),
            next_request: 1,
            local_steps: 0,
            speculative_steps: 0,
        }
    }

    pub fn records(&self) -> &[EfficiencyRecord] {
        &self.records
    }

    pub fn take_records(&mut self) -> Vec<EfficiencyRecord> {
        std::mem::take(&mut self.records)
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding.len()
    }

    pub fn local_steps(&self) -> u64 {
        self.local_steps
    }

    pub fn speculative_steps(&self) -> u64 {
        self.speculative_steps
    }

    /// Buffered speculative states for a construct beyond its current tick.
    pub fn buffered(&self, id: ConstructId) -> Option<usize> {
        self.tracks.get(&id).and_then(Track::remaining)
    }

    fn track(&mut self, state: &ConstructState) -> &mut Track {
        let t = self
            .tracks
            .entry(state.id)
            .or_insert_with(|| Track { logical_ts: state.logical_ts, ..Track::default() });
        if state.logical_ts != t.logical_ts {
            debug!("construct {} modified (ts {} -> {})", state.id, t.logical_ts, state.logical_ts);
            t.invalidate();
            t.logical_ts = state.logical_ts;
        }
        t
    }

    /// Advances `state` to `world_tick`, from the buffer if possible.
    pub fn on_construct_tick(&mut self, state: &mut ConstructState, world_tick: u64) -> TickSource {
        let track = self.track(state);
        if let Some(cells) = track.take(world_tick) {
            state.cells = cells;
            state.base_tick = world_tick;
            self.speculative_steps += 1;
            return TickSource::Speculative;
        }
        let current = track.current;
        state.step_in_place();
        state.base_tick = world_tick;
        self.local_steps += 1;
        if let Some(inv) = current.and_then(|id| self.outstanding.get_mut(&id)) {
            if inv.logical_ts == state.logical_ts && inv.covers(world_tick) {
                inv.duplicated += 1;
            }
        }
        TickSource::Local
    }

    /// Issues the next request once the buffer has shrunk to the tick lead.
    pub fn schedule_next(&mut self, state: &ConstructState, world_tick: u64) -> Option<OffloadRequest> {
        let policy = self.policy.clone();
        let track = self.track(state);
        let remaining = track.remaining()?;
        if remaining > policy.tick_lead as usize {
            return None;
        }
        let start = match track.buffer.back() {
            Some((tick, cells)) => ConstructState { cells: cells.clone(), base_tick: *tick, ..state.clone() },
            None => state.clone(),
        };
        if let Some(id) = track.current {
            match self.outstanding.get(&id) {
                Some(inv) if inv.logical_ts == state.logical_ts => return None,
                Some(_) if !policy.reinvoke_on_stale => return None,
                _ => {}
            }
        }
        if !policy.reinvoke_on_stale && self.outstanding.values().any(|i| i.construct_id == state.id) {
            return None;
        }
        let id = self.next_request;
        self.next_request += 1;
        let req = OffloadRequest {
            request_id: id,
            construct_id: state.id,
            start_tick: start.base_tick,
            num_steps: policy.num_steps,
            logical_ts: state.logical_ts,
            loop_detection: policy.loop_detection,
            state: start,
        };
        let track = self.tracks.get_mut(&state.id).expect("track exists");
        track.current = Some(id);
        self.outstanding.insert(
            id,
            InFlight {
                id,
                construct_id: state.id,
                start_tick: req.start_tick,
                num_steps: req.num_steps,
                logical_ts: req.logical_ts,
                issued_tick: world_tick,
                duplicated: 0,
            },
        );
        Some(req)
    }

    /// Merges a reply; `current_tick` is the last tick whose state has been
    /// applied to the construct.
    pub fn accept_reply(&mut self, r: OffloadReply, current_tick: u64) -> Result<AcceptResult, SpecError> {
        let inv = self.outstanding.remove(&r.request_id).ok_or(SpecError::UnknownRequest(r.request_id))?;
        let Some(track) = self.tracks.get_mut(&r.construct_id) else {
            self.records.push(EfficiencyRecord::new(&inv, current_tick, inv.num_steps, Outcome::Dropped));
            debug!("reply {} for vanished construct {}", r.request_id, r.construct_id);
            return Err(SpecError::UnknownConstruct(r.construct_id));
        };
        if track.current == Some(inv.id) {
            track.current = None;
        }
        if r.logical_ts < track.logical_ts {
            self.records.push(EfficiencyRecord::new(&inv, current_tick, inv.num_steps, Outcome::Stale));
            return Ok(AcceptResult::Stale);
        }
        let n = inv.num_steps as u64;
        let late = current_tick.saturating_sub(inv.start_tick).min(n);
        self.records.push(EfficiencyRecord::new(&inv, current_tick, late as u32, Outcome::Accepted));
        let base = inv.start_tick + 1;
        match r.payload {
            Trajectory::States(states) => {
                for (k, cells) in states.into_iter().enumerate().take(n as usize) {
                    let tick = base + k as u64;
                    if tick > current_tick {
                        debug_assert!(track.buffer.back().is_none_or(|(t, _)| *t + 1 == tick));
                        track.buffer.push_back((tick, cells));
                    }
                }
            }
            Trajectory::Loop(desc) => {
                for (k, cells) in desc.prefix.iter().enumerate() {
                    let tick = base + k as u64;
                    if tick > current_tick {
                        track.buffer.push_back((tick, cells.clone()));
                    }
                }
                track.cycle = Some(CycleSegment { first_tick: base + desc.entry_index as u64, desc: Arc::new(desc) });
            }
        }
        if late >= n {
            return Ok(AcceptResult::Late);
        }
        Ok(AcceptResult::Accepted { accepted: (n - late) as u32, late: late as u32 })
    }

    /// Marks a request as failed, e.g. after a malformed reply.
    pub fn fail(&mut self, request_id: RequestId, current_tick: u64) -> Result<(), SpecError> {
        let inv = self.outstanding.remove(&request_id).ok_or(SpecError::UnknownRequest(request_id))?;
        if let Some(t) = self.tracks.get_mut(&inv.construct_id) {
            if t.current == Some(request_id) {
                t.current = None;
            }
        }
        self.records.push(EfficiencyRecord::new(&inv, current_tick, inv.num_steps, Outcome::Lost));
        Ok(())
    }

    /// Gives up on requests whose whole range is already in the past.
    pub fn expire(&mut self, current_tick: u64) -> usize {
        let expired: Vec<RequestId> = self
            .outstanding
            .values()
            .filter(|i| i.end_tick() < current_tick)
            .map(|i| i.id)
            .collect();
        for id in &expired {
            let _ = self.fail(*id, current_tick);
        }
        expired.len()
    }

    /// Forgets a construct that left the registry. Its outstanding requests
    /// resolve as dropped when they reply.
    pub fn forget(&mut self, id: ConstructId) {
        self.tracks.remove(&id);
    }

    pub fn tracked(&self) -> usize {
        self.tracks.len()
    }
}

/// Whether a reply's payload folds into a loop.
pub fn is_loop(r: &OffloadReply) -> bool {
    matches!(r.payload, Trajectory::Loop(_))
}

/// Cells of a reply at absolute tick `tick`, if covered.
pub fn reply_state_at(r: &OffloadReply, tick: u64) -> Option<&[crate::world::Block]> {
    let k = tick.checked_sub(r.start_tick + 1)? as usize;
    match &r.payload {
        Trajectory::States(s) => s.get(k).map(|c| &c[..]),
        Trajectory::Loop(d) => Some(expand(d, k)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construct::ConstructTemplate;
    use crate::world::{Block, BlockPos, BlockType};
    use proptest::prelude::*;

    fn clock() -> ConstructState {
        let blocks = vec![
            (BlockPos::new(0, 4, 0), Block::of(BlockType::Inverter)),
            (BlockPos::new(1, 4, 0), Block::of(BlockType::Wire)),
        ];
        ConstructState::from_blocks(7, &blocks, 0).unwrap()
    }

    fn respond(req: &OffloadRequest) -> OffloadReply {
        reply_for(req, simulate_request(req), 0.0)
    }

    fn policy(n: u32, lead: u32, loops: bool) -> OffloadPolicy {
        OffloadPolicy { num_steps: n, tick_lead: lead, loop_detection: loops, reinvoke_on_stale: true }
    }

    #[test]
    fn request_codec_round_trip() {
        let s = ConstructTemplate::Clock252.state(3, BlockPos::new(5, 4, -9));
        let req = OffloadRequest {
            request_id: 11,
            construct_id: 3,
            start_tick: 0,
            num_steps: 100,
            logical_ts: 4,
            loop_detection: true,
            state: ConstructState { logical_ts: 4, ..s },
        };
        assert_eq!(OffloadRequest::decode(&req.encode()).unwrap(), req);
        let bytes = req.encode();
        assert!(OffloadRequest::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn reply_codec_round_trip() {
        for loops in [false, true] {
            let req = OffloadRequest {
                request_id: 1,
                construct_id: 7,
                start_tick: 10,
                num_steps: 30,
                logical_ts: 2,
                loop_detection: loops,
                state: ConstructState { base_tick: 10, logical_ts: 2, ..clock() },
            };
            let rep = reply_for(&req, simulate_request(&req), 12.5);
            assert_eq!(is_loop(&rep), loops);
            assert_eq!(OffloadReply::decode(&rep.encode()).unwrap(), rep);
        }
    }

    #[test]
    fn single_step_equals_local_step() {
        let s = clock();
        let req = OffloadRequest {
            request_id: 1,
            construct_id: s.id,
            start_tick: 0,
            num_steps: 1,
            logical_ts: 0,
            loop_detection: true,
            state: s.clone(),
        };
        assert_eq!(reply_state_at(&respond(&req), 1).unwrap(), &s.step().cells[..]);
    }

    /// The worked example: 8 steps offloaded at tick 0, reply drained at the
    /// start of tick 6 after ticks 1..5 ran locally.
    #[test]
    fn worked_example_efficiency() {
        let mut unit = SpeculativeUnit::new(policy(8, 2, false));
        let mut s = clock();
        let req = unit.schedule_next(&s, 0).unwrap();
        assert_eq!(req.start_tick, 0);
        for t in 1..=5 {
            assert_eq!(unit.on_construct_tick(&mut s, t), TickSource::Local);
            assert!(unit.schedule_next(&s, t).is_none());
        }
        let res = unit.accept_reply(respond(&req), 5).unwrap();
        assert_eq!(res, AcceptResult::Accepted { accepted: 3, late: 5 });
        let rec = &unit.records()[0];
        assert_eq!((rec.total_steps, rec.duplicated_steps), (8, 5));
        assert_eq!(rec.efficiency, 0.375);

        assert_eq!(unit.on_construct_tick(&mut s, 6), TickSource::Speculative);
        let next = unit.schedule_next(&s, 6).expect("lead reached at tick 6");
        assert_eq!(next.start_tick, 8);
        assert_eq!(next.start_tick - 6, 2);
        assert_eq!(next.state.cells, clock().simulate(8)[7].cells);
    }

    #[test]
    fn timely_reply_is_fully_efficient() {
        let mut unit = SpeculativeUnit::new(policy(100, 20, false));
        let mut s = clock();
        let req = unit.schedule_next(&s, 0).unwrap();
        unit.accept_reply(respond(&req), 0).unwrap();
        assert_eq!(unit.records()[0].efficiency, 1.0);
        for t in 1..80 {
            assert_eq!(unit.on_construct_tick(&mut s, t), TickSource::Speculative);
            assert!(unit.schedule_next(&s, t).is_none(), "tick {t}");
        }
        unit.on_construct_tick(&mut s, 80);
        assert_eq!(unit.schedule_next(&s, 80).unwrap().start_tick, 100);
    }

    #[test]
    fn lead_zero_waits_for_exhaustion() {
        let mut unit = SpeculativeUnit::new(policy(10, 0, false));
        let mut s = clock();
        let req = unit.schedule_next(&s, 0).unwrap();
        unit.accept_reply(respond(&req), 0).unwrap();
        for t in 1..10 {
            unit.on_construct_tick(&mut s, t);
            assert!(unit.schedule_next(&s, t).is_none());
        }
        unit.on_construct_tick(&mut s, 10);
        assert_eq!(unit.schedule_next(&s, 10).unwrap().start_tick, 10);
    }

    #[test]
    fn lost_reply_is_zero_efficiency() {
        let mut unit = SpeculativeUnit::new(policy(5, 1, false));
        let mut s = clock();
        unit.schedule_next(&s, 0).unwrap();
        for t in 1..=6 {
            unit.expire(t);
            unit.on_construct_tick(&mut s, t);
        }
        assert_eq!(unit.records().len(), 1);
        assert_eq!(unit.records()[0].outcome, Outcome::Lost);
        assert_eq!(unit.records()[0].efficiency, 0.0);
        assert!(unit.schedule_next(&s, 6).is_some());
    }

    #[test]
    fn stale_reply_is_discarded() {
        let mut unit = SpeculativeUnit::new(policy(100, 20, false));
        let mut s = clock();
        let req = unit.schedule_next(&s, 0).unwrap();
        for t in 1..=50 {
            unit.on_construct_tick(&mut s, t);
        }
        // A player edit at tick 50 bumps the construct's timestamp.
        s.logical_ts += 1;
        s.cells[1] = Block::new(BlockType::Wire, 0);
        let before = s.clone();
        let reissued = unit.schedule_next(&s, 50).expect("re-invoked after modification");
        assert_eq!(reissued.logical_ts, 1);
        assert_eq!(reissued.state.cells, before.cells);
        assert_eq!(unit.accept_reply(respond(&req), 50).unwrap(), AcceptResult::Stale);
        assert_eq!(unit.on_construct_tick(&mut s, 51), TickSource::Local);
        assert_eq!(s.cells, before.step().cells);
        assert_eq!(unit.records()[0].outcome, Outcome::Stale);
    }

    #[test]
    fn stale_without_reinvoke_waits() {
        let mut unit = SpeculativeUnit::new(OffloadPolicy { reinvoke_on_stale: false, ..policy(100, 20, false) });
        let mut s = clock();
        let req = unit.schedule_next(&s, 0).unwrap();
        unit.on_construct_tick(&mut s, 1);
        s.logical_ts += 1;
        assert!(unit.schedule_next(&s, 1).is_none());
        unit.accept_reply(respond(&req), 1).unwrap();
        assert!(unit.schedule_next(&s, 1).is_some());
    }

    #[test]
    fn reply_arriving_mid_range_splits() {
        let mut unit = SpeculativeUnit::new(policy(100, 20, false));
        let mut s = clock();
        let req = unit.schedule_next(&s, 0).unwrap();
        for t in 1..=30 {
            unit.on_construct_tick(&mut s, t);
        }
        let res = unit.accept_reply(respond(&req), 30).unwrap();
        assert_eq!(res, AcceptResult::Accepted { accepted: 70, late: 30 });
        // Brute-force: the remaining ticks must match plain re-simulation.
        let oracle = clock().simulate(100);
        for t in 31..=100u64 {
            assert_eq!(unit.on_construct_tick(&mut s, t), TickSource::Speculative);
            assert_eq!(s.cells, oracle[t as usize - 1].cells);
        }
    }

    #[test]
    fn loop_reply_covers_future_without_reinvocation() {
        let mut unit = SpeculativeUnit::new(policy(50, 10, true));
        let mut s = clock();
        let req = unit.schedule_next(&s, 0).unwrap();
        unit.accept_reply(respond(&req), 0).unwrap();
        let oracle = clock().simulate(500);
        for t in 1..=500u64 {
            assert_eq!(unit.on_construct_tick(&mut s, t), TickSource::Speculative);
            assert_eq!(s.cells, oracle[t as usize - 1].cells);
            assert!(unit.schedule_next(&s, t).is_none());
        }
        assert_eq!(unit.local_steps(), 0);
    }

    #[test]
    fn reply_for_forgotten_construct() {
        let mut unit = SpeculativeUnit::new(policy(10, 2, false));
        let s = clock();
        let req = unit.schedule_next(&s, 0).unwrap();
        unit.forget(s.id);
        assert_eq!(unit.accept_reply(respond(&req), 3), Err(SpecError::UnknownConstruct(7)));
        assert_eq!(unit.records()[0].outcome, Outcome::Dropped);
    }

    #[test]
    fn zero_latency_efficiency_is_one() {
        let mut unit = SpeculativeUnit::new(policy(20, 1, false));
        let mut s = ConstructTemplate::Clock252.state(1, BlockPos::new(0, 4, 0));
        for t in 0..400u64 {
            if t > 0 {
                unit.on_construct_tick(&mut s, t);
            }
            if let Some(req) = unit.schedule_next(&s, t) {
                unit.accept_reply(respond(&req), t).unwrap();
            }
        }
        assert!(unit.records().len() >= 19);
        assert!(unit.records().iter().all(|r| r.efficiency == 1.0));
        assert_eq!(unit.local_steps(), 0);
    }

    #[derive(Clone, Debug)]
    enum Ev {
        Delay(u64),
        Edit(usize),
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Applied states equal pure local simulation under any delays,
        /// losses, reorderings and edits.
        #[test]
        fn offloading_is_transparent(
            events in proptest::collection::vec(
                prop_oneof![ (0u64..60).prop_map(Ev::Delay), (0usize..6).prop_map(Ev::Edit) ], 1..40),
            n in 1u32..30, lead in 0u32..12, loops in any::<bool>(), reinvoke in any::<bool>(),
        ) {
            let blocks = vec![
                (BlockPos::new(0, 4, 0), Block::of(BlockType::Inverter)),
                (BlockPos::new(1, 4, 0), Block::of(BlockType::Wire)),
                (BlockPos::new(2, 4, 0), Block::of(BlockType::Wire)),
                (BlockPos::new(2, 4, 1), Block::of(BlockType::Lamp)),
                (BlockPos::new(0, 4, 1), Block::of(BlockType::Inverter)),
                (BlockPos::new(1, 4, 1), Block::of(BlockType::Wire)),
            ];
            let mut s = ConstructState::from_blocks(1, &blocks, 0).unwrap();
            let mut local = s.clone();
            let mut unit = SpeculativeUnit::new(OffloadPolicy {
                num_steps: n, tick_lead: lead, loop_detection: loops, reinvoke_on_stale: reinvoke,
            });
            let mut pending: Vec<(u64, OffloadReply)> = Vec::new();
            let mut delays = events.iter().filter_map(|e| match e { Ev::Delay(d) => Some(*d), _ => None }).cycle();
            let edits: BTreeMap<u64, usize> = events.iter().enumerate()
                .filter_map(|(i, e)| match e { Ev::Edit(c) => Some((i as u64 * 7 + 3, *c)), _ => None })
                .collect();
            for t in 1..=300u64 {
                pending.sort_by_key(|(at, r)| (*at, r.request_id));
                let (due, rest): (Vec<_>, Vec<_>) = pending.into_iter().partition(|(at, _)| *at <= t);
                pending = rest;
                for (_, r) in due {
                    let _ = unit.accept_reply(r, t - 1);
                }
                unit.expire(t);
                if let Some(&c) = edits.get(&t) {
                    let kinds = [BlockType::Wire, BlockType::Inverter, BlockType::Lamp];
                    let k = kinds[c % 3];
                    s.cells[c] = Block::of(k);
                    s.logical_ts += 1;
                    local.cells[c] = Block::of(k);
                }
                unit.on_construct_tick(&mut s, t);
                local.step_in_place();
                prop_assert_eq!(&s.cells, &local.cells, "tick {}", t);
                if let Some(req) = unit.schedule_next(&s, t) {
                    let d = delays.next().unwrap_or(0);
                    pending.push((t + d, respond(&req)));
                }
            }
            for r in unit.records() {
                prop_assert!((0.0..=1.0).contains(&r.efficiency));
            }
        }
    }
}
