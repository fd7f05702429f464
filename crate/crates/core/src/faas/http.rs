//! Plain HTTP/1.1 transport for the function wire format.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use log::warn;

use super::latency::WorkerCost;
use super::wire::{encode_frame, from_envelope, reply_payload, to_envelope};
use super::{handle_frame, Completion, FaasError, FaasRuntime, FunctionKind, InvocationId, InvocationRecord};

#[derive(Clone, Debug, PartialEq, Eq)]
struct Endpoint {
    host: String,
    port: u16,
    path: String,
}

impl Endpoint {
    fn parse(url: &str) -> Result<Self, FaasError> {
        let rest = url
            .strip_prefix("http://")
            .ok_or_else(|| FaasError::Transport(format!("unsupported endpoint {url}")))?;
        let (authority, path) = match rest.find('/') {
            Some(i) => (&rest[..i], &rest[i..]),
            None => (rest, "/"),
        };
        let (host, port) = match authority.rsplit_once(':') {
            Some((h, p)) => (h, p.parse().map_err(|_| FaasError::Transport(format!("bad port in {url}")))?),
            None => (authority, 80),
        };
        Ok(Endpoint { host: host.to_string(), port, path: path.to_string() })
    }
}

fn post_json(ep: &Endpoint, body: &str, timeout: Duration) -> Result<String, FaasError> {
    let t = |e: io::Error| FaasError::Transport(e.to_string());
    let mut stream = TcpStream::connect((ep.host.as_str(), ep.port)).map_err(t)?;
    stream.set_read_timeout(Some(timeout)).map_err(t)?;
    write!(
        stream,
        "POST {} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        ep.path,
        ep.host,
        body.len(),
        body
    )
    .map_err(t)?;
    let mut reader = BufReader::new(stream);
    let (status, length) = read_head(&mut reader).map_err(t)?;
    let mut buf = Vec::new();
    match length {
        Some(n) => {
            buf.resize(n, 0);
            reader.read_exact(&mut buf).map_err(t)?;
        }
        None => {
            reader.read_to_end(&mut buf).map_err(t)?;
        }
    }
    let text = String::from_utf8(buf).map_err(|e| FaasError::Transport(e.to_string()))?;
    if status != 200 {
        return Err(FaasError::Transport(format!("status {status}: {text}")));
    }
    Ok(text)
}

/// Reads a start line and headers; returns the status code (or 0 for a
/// request) and the content length.
fn read_head(reader: &mut impl BufRead) -> io::Result<(u16, Option<usize>)> {
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let status = line.split_whitespace().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut length = None;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.trim().eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().ok();
            } else if k.trim().eq_ignore_ascii_case("transfer-encoding") {
                return Err(io::Error::new(io::ErrorKind::Unsupported, "chunked bodies are not supported"));
            }
        }
    }
    Ok((status, length))
}

type Done = (InvocationId, FunctionKind, f64, Result<Vec<u8>, FaasError>);

/// Invokes functions on a remote gateway. Each call runs on its own thread;
/// latency is measured, not modelled.
pub struct HttpRuntime {
    endpoint: Endpoint,
    timeout: Duration,
    tx: Sender<Done>,
    rx: Receiver<Done>,
    waiting: std::collections::BTreeMap<InvocationId, (u64, f64, usize)>,
    records: Vec<InvocationRecord>,
    next_id: InvocationId,
}

impl HttpRuntime {
    pub fn new(url: &str, timeout: Duration) -> Result<Self, FaasError> {
        let (tx, rx) = unbounded();
        Ok(HttpRuntime {
            endpoint: Endpoint::parse(url)?,
            timeout,
            tx,
            rx,
            waiting: Default::default(),
            records: Vec::new(),
            next_id: 1,
        })
    }

    /// Blocks until every outstanding call has returned.
    pub fn wait_all(&mut self, now_ms: impl Fn() -> f64) -> Vec<Completion> {
        let mut out = Vec::new();
        while !self.waiting.is_empty() {
            match self.rx.recv() {
                Ok(d) => out.push(self.complete(d)),
                Err(_) => break,
            }
        }
        out.extend(self.poll(now_ms()));
        out
    }

    fn complete(&mut self, (id, function, elapsed_ms, result): Done) -> Completion {
        let (tick, enqueue_ms, payload_bytes) = self.waiting.remove(&id).unwrap_or((0, 0.0, 0));
        self.records.push(InvocationRecord {
            id,
            function,
            enqueue_tick: tick,
            enqueue_ms,
            end_to_end_ms: elapsed_ms,
            worker_ms: 0.0,
            was_cold: false,
            payload_bytes,
            reply_bytes: result.as_ref().map_or(0, Vec::len),
        });
        Completion { id, function, ready_ms: enqueue_ms + elapsed_ms, result }
    }
}

impl FaasRuntime for HttpRuntime {
    fn invoke(&mut self, function: FunctionKind, payload: Vec<u8>, now_ms: f64, tick: u64) -> InvocationId {
        let id = self.next_id;
        self.next_id += 1;
        self.waiting.insert(id, (tick, now_ms, payload.len()));
        let (ep, timeout, tx) = (self.endpoint.clone(), self.timeout, self.tx.clone());
        thread::spawn(move || {
            let started = Instant::now();
            let result = to_envelope(&encode_frame(function as u8, &payload))
                .and_then(|body| post_json(&ep, &body, timeout))
                .and_then(|text| from_envelope(&text))
                .and_then(|frame| reply_payload(&frame));
            let _ = tx.send((id, function, started.elapsed().as_secs_f64() * 1e3, result));
        });
        id
    }

    fn poll(&mut self, _now_ms: f64) -> Vec<Completion> {
        let done: Vec<Done> = self.rx.try_iter().collect();
        let mut out: Vec<Completion> = done.into_iter().map(|d| self.complete(d)).collect();
        out.sort_by(|a, b| a.ready_ms.total_cmp(&b.ready_ms).then(a.id.cmp(&b.id)));
        out
    }

    fn next_ready_ms(&self) -> Option<f64> {
        None
    }

    fn in_flight(&self) -> usize {
        self.waiting.len()
    }

    fn take_records(&mut self) -> Vec<InvocationRecord> {
        let mut r = std::mem::take(&mut self.records);
        r.sort_by_key(|r| r.id);
        r
    }
}

fn serve_one(stream: TcpStream, cost: &WorkerCost) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let (_, length) = read_head(&mut reader)?;
    let mut body = vec![0; length.unwrap_or(0)];
    reader.read_exact(&mut body)?;
    let (status, reply) = match std::str::from_utf8(&body)
        .map_err(|e| FaasError::Malformed(e.to_string()))
        .and_then(from_envelope)
        .and_then(|frame| to_envelope(&handle_frame(&frame, cost)))
    {
        Ok(json) => ("200 OK", json),
        Err(e) => ("400 Bad Request", e.to_string()),
    };
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
        reply.len()
    )?;
    stream.flush()
}

/// Serves both functions over HTTP, one thread per connection. Stops after
/// `limit` connections when given.
pub fn serve_functions(listener: TcpListener, cost: WorkerCost, limit: Option<usize>) -> io::Result<()> {
    let mut handles = Vec::new();
    for (n, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let cost = cost.clone();
        handles.push(thread::spawn(move || {
            if let Err(e) = serve_one(stream, &cost) {
                warn!("function request failed: {e}");
            }
        }));
        if limit.is_some_and(|l| n + 1 >= l) {
            break;
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::wire::TerrainRequest;
    use super::*;
    use crate::terrain::{generate_chunk, WorldSeed};
    use crate::world::{ChunkCoord, GenMode};

    #[test]
    fn endpoint_parsing() {
        let e = Endpoint::parse("http://127.0.0.1:9000/fn").unwrap();
        assert_eq!((e.host.as_str(), e.port, e.path.as_str()), ("127.0.0.1", 9000, "/fn"));
        assert_eq!(Endpoint::parse("http://gw").unwrap().port, 80);
        assert!(Endpoint::parse("https://gw").is_err());
    }

    #[test]
    fn round_trip_through_local_gateway() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = thread::spawn(move || serve_functions(listener, WorkerCost::default(), Some(2)));
        let mut rt = HttpRuntime::new(&format!("http://{addr}/invoke"), Duration::from_secs(10)).unwrap();
        let req = TerrainRequest { seed: WorldSeed::new(5, GenMode::Noise), coord: ChunkCoord::new(1, 1) };
        rt.invoke(FunctionKind::TerrainGenerate, req.encode(), 0.0, 0);
        rt.invoke(FunctionKind::ScSimulate, vec![0; 3], 0.0, 0);
        let mut done = rt.wait_all(|| 0.0);
        done.sort_by_key(|c| c.id);
        assert_eq!(done[0].result.as_ref().unwrap(), &generate_chunk(&req.seed, req.coord).encode());
        assert!(matches!(done[1].result, Err(FaasError::Remote(_))));
        assert_eq!(rt.take_records().len(), 2);
        server.join().unwrap().unwrap();
    }
}
