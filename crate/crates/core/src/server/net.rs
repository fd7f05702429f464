//! TCP front end. Connection threads talk to the tick thread only through
//! channels that are drained at tick boundaries.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, Sender};
use log::{debug, warn};

use super::protocol::{read_client, read_server, write_client, write_server, ClientMsg, ServerMsg};

pub type ConnId = u64;

#[derive(Debug)]
pub enum NetEvent {
    Opened(ConnId, Sender<ServerMsg>),
    Message(ConnId, ClientMsg),
    Closed(ConnId),
}

pub struct Frontend {
    pub addr: SocketAddr,
    events: Receiver<NetEvent>,
    stop: Arc<AtomicBool>,
}

impl Frontend {
    /// Binds `addr` and accepts connections on a background thread.
    pub fn listen(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let (tx, rx) = unbounded();
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        thread::spawn(move || accept_loop(listener, tx, flag));
        Ok(Frontend { addr: local, events: rx, stop })
    }

    pub fn drain(&self) -> Vec<NetEvent> {
        self.events.try_iter().collect()
    }
}

impl Drop for Frontend {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<NetEvent>, stop: Arc<AtomicBool>) {
    let mut next: ConnId = 1;
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                debug!("connection {next} from {peer}");
                if let Err(e) = spawn_connection(next, stream, tx.clone()) {
                    warn!("connection {next} setup failed: {e}");
                }
                next += 1;
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn spawn_connection(id: ConnId, stream: TcpStream, events: Sender<NetEvent>) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let writer_stream = stream.try_clone()?;
    let (out_tx, out_rx) = unbounded::<ServerMsg>();
    let _ = events.send(NetEvent::Opened(id, out_tx));
    thread::spawn(move || {
        let mut w = BufWriter::new(writer_stream);
        while let Ok(first) = out_rx.recv() {
            let batch = std::iter::once(first).chain(out_rx.try_iter());
            let mut ok = true;
            for m in batch {
                if write_server(&mut w, &m).is_err() {
                    ok = false;
                    break;
                }
            }
            if !ok || w.flush().is_err() {
                break;
            }
        }
        if let Ok(s) = w.into_inner() {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
    });
    thread::spawn(move || {
        let mut r = BufReader::new(stream);
        loop {
            match read_client(&mut r) {
                Ok(Some(ClientMsg::Leave)) | Ok(None) => break,
                Ok(Some(m)) => {
                    if events.send(NetEvent::Message(id, m)).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    debug!("connection {id} closed: {e}");
                    break;
                }
            }
        }
        let _ = events.send(NetEvent::Closed(id));
    });
    Ok(())
}

/// Client side of the protocol, as used by bots.
pub struct Client {
    writer: BufWriter<TcpStream>,
    reader: BufReader<TcpStream>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Client { writer: BufWriter::new(stream.try_clone()?), reader: BufReader::new(stream) })
    }

    pub fn send(&mut self, m: &ClientMsg) -> io::Result<()> {
        write_client(&mut self.writer, m)?;
        self.writer.flush()
    }

    pub fn recv(&mut self) -> io::Result<Option<ServerMsg>> {
        read_server(&mut self.reader)
    }
}
