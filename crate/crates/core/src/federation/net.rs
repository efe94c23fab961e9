use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use log::{debug, info, warn};

use super::{
    read_message, write_message, Broadcast, ClientState, DecodeError, ErrorCode, FederationError, Hello, MergeSummary,
    Message, MissionReport, ReadError, Result, ServerState, DEFAULT_MAX_FRAME_LEN, PROTOCOL_VERSION,
};
use crate::embedder::ClassExamples;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub max_frame_len: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            max_frame_len: DEFAULT_MAX_FRAME_LEN,
        }
    }
}

enum Request {
    Merge(MissionReport, Sender<Result<MergeSummary>>),
    Broadcast(Sender<Broadcast>),
    Snapshot(Sender<ServerState>),
    Stop,
}

/// Running server. Dropping the handle without calling
/// [`ServerHandle::shutdown`] leaves the server running in the background.
pub struct ServerHandle {
    addr: SocketAddr,
    requests: Sender<Request>,
    stop: Arc<AtomicBool>,
    streams: Arc<Mutex<HashMap<u64, TcpStream>>>,
    acceptor: Option<JoinHandle<()>>,
    applier: Option<JoinHandle<ServerState>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Copy of the current state, taken between merges.
    pub fn snapshot(&self) -> ServerState {
        let (tx, rx) = mpsc::channel();
        self.requests.send(Request::Snapshot(tx)).expect("applier alive");
        rx.recv().expect("applier alive")
    }

    /// Stops accepting, closes open connections and returns the final state.
    pub fn shutdown(mut self) -> ServerState {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        for (_, s) in self.streams.lock().expect("stream list").drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
        let _ = self.requests.send(Request::Stop);
        self.applier.take().expect("applier").join().expect("applier panicked")
    }
}

/// Binds `addr` and serves `state` on background threads. Connections are
/// handled concurrently; merges are applied one at a time, in arrival order,
/// by a single applier thread.
pub fn serve<A: ToSocketAddrs>(addr: A, state: ServerState, config: ServeConfig) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let dim = state.dim();
    let (tx, rx) = mpsc::channel();
    let applier = thread::spawn(move || apply_loop(state, rx));
    let stop = Arc::new(AtomicBool::new(false));
    let streams = Arc::new(Mutex::new(HashMap::new()));
    let acceptor = {
        let (tx, stop, streams) = (tx.clone(), stop.clone(), streams.clone());
        thread::spawn(move || {
            for (id, conn) in (0u64..).zip(listener.incoming()) {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let stream = match conn {
                    Ok(s) => s,
                    Err(e) => {
                        warn!("accept failed: {e}");
                        continue;
                    }
                };
                if let Ok(clone) = stream.try_clone() {
                    streams.lock().expect("stream list").insert(id, clone);
                }
                let (tx, streams, max) = (tx.clone(), streams.clone(), config.max_frame_len);
                thread::spawn(move || {
                    let peer = stream.peer_addr().ok();
                    if let Err(e) = handle_connection(stream, dim, max, &tx) {
                        debug!("connection {peer:?} ended: {e}");
                    }
                    if let Some(s) = streams.lock().expect("stream list").remove(&id) {
                        let _ = s.shutdown(Shutdown::Both);
                    }
                });
            }
        })
    };
    info!("serving on {addr}");
    Ok(ServerHandle {
        addr,
        requests: tx,
        stop,
        streams,
        acceptor: Some(acceptor),
        applier: Some(applier),
    })
}

fn apply_loop(mut state: ServerState, rx: Receiver<Request>) -> ServerState {
    while let Ok(req) = rx.recv() {
        match req {
            Request::Merge(report, reply) => {
                let result = state.merge(&report);
                match &result {
                    Ok(s) if s.duplicate => info!("duplicate report {}/{}", s.client_id, s.mission_idx),
                    Ok(s) => info!(
                        "merged report {}/{}: {} new, {} updated",
                        s.client_id, s.mission_idx, s.inserted, s.updated
                    ),
                    Err(e) => warn!("rejected report {}/{}: {e}", report.client_id, report.mission_idx),
                }
                let _ = reply.send(result);
            }
            Request::Broadcast(reply) => {
                let _ = reply.send(state.make_broadcast());
            }
            Request::Snapshot(reply) => {
                let _ = reply.send(state.clone());
            }
            Request::Stop => break,
        }
    }
    state
}

fn handle_connection(stream: TcpStream, dim: usize, max: usize, tx: &Sender<Request>) -> Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut send = |msg: &Message| -> io::Result<()> {
        write_message(&mut writer, msg)?;
        writer.flush()
    };
    let mut greeted = false;
    loop {
        let msg = match read_message(&mut reader, max) {
            Ok(m) => m,
            Err(ReadError::Closed) => return Ok(()),
            Err(ReadError::Decode(e)) => {
                let code = match e {
                    DecodeError::TooLarge { .. } => ErrorCode::FrameTooLarge,
                    DecodeError::UnknownVersion(_) => ErrorCode::VersionMismatch,
                    _ => ErrorCode::Malformed,
                };
                send(&Message::error(code, format!("{}: {e}", e.reason_code())))?;
                return Err(ReadError::Decode(e).into());
            }
            Err(e) => return Err(e.into()),
        };
        match msg {
            Message::Hello(h) if !greeted => {
                if h.protocol_version != PROTOCOL_VERSION {
                    let text = format!("server speaks {PROTOCOL_VERSION}, client {}", h.protocol_version);
                    send(&Message::error(ErrorCode::VersionMismatch, text))?;
                    return Ok(());
                }
                if h.dim as usize != dim {
                    let text = format!("expected {dim}, got {}", h.dim);
                    send(&Message::error(ErrorCode::DimensionMismatch, text))?;
                    return Ok(());
                }
                greeted = true;
                send(&Message::Hello(Hello {
                    protocol_version: PROTOCOL_VERSION,
                    client_id: h.client_id,
                    dim: dim as u32,
                }))?;
            }
            Message::Report(report) if greeted => {
                let (rtx, rrx) = mpsc::channel();
                if tx.send(Request::Merge(report, rtx)).is_err() {
                    return Ok(());
                }
                match rrx.recv() {
                    Ok(Ok(summary)) => send(&Message::Ack(summary))?,
                    Ok(Err(e)) => send(&Message::error(e.wire_code(), e.to_string()))?,
                    Err(_) => return Ok(()),
                }
            }
            Message::SyncRequest { .. } if greeted => {
                let (rtx, rrx) = mpsc::channel();
                if tx.send(Request::Broadcast(rtx)).is_err() {
                    return Ok(());
                }
                match rrx.recv() {
                    Ok(b) => send(&Message::Broadcast(b))?,
                    Err(_) => return Ok(()),
                }
            }
            other => {
                let text = format!("{:?} not expected here", other.message_type());
                send(&Message::error(ErrorCode::UnexpectedMessage, text))?;
                return Ok(());
            }
        }
    }
}

/// Client end of one session.
pub struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    client_id: u32,
    max_frame_len: usize,
}

impl Connection {
    /// Connects and performs the HELLO exchange.
    pub fn connect<A: ToSocketAddrs>(addr: A, client_id: u32, dim: usize) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut conn = Connection {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            client_id,
            max_frame_len: DEFAULT_MAX_FRAME_LEN,
        };
        let hello = Message::Hello(Hello {
            protocol_version: PROTOCOL_VERSION,
            client_id,
            dim: dim as u32,
        });
        match conn.request(&hello)? {
            Message::Hello(_) => Ok(conn),
            other => Err(FederationError::Unexpected(other.message_type())),
        }
    }

    fn request(&mut self, msg: &Message) -> Result<Message> {
        write_message(&mut self.writer, msg)?;
        self.writer.flush()?;
        match read_message(&mut self.reader, self.max_frame_len)? {
            Message::Error(e) => Err(FederationError::Remote {
                code: e.code,
                message: e.message,
            }),
            m => Ok(m),
        }
    }

    pub fn report(&mut self, report: &MissionReport) -> Result<MergeSummary> {
        match self.request(&Message::Report(report.clone()))? {
            Message::Ack(s) => Ok(s),
            other => Err(FederationError::Unexpected(other.message_type())),
        }
    }

    pub fn sync(&mut self) -> Result<Broadcast> {
        let req = Message::SyncRequest {
            client_id: self.client_id,
        };
        match self.request(&req)? {
            Message::Broadcast(b) => Ok(b),
            other => Err(FederationError::Unexpected(other.message_type())),
        }
    }
}

/// Runs `missions` in order against the server at `addr`: learn, report,
/// then replace the local store with the server's broadcast.
pub fn run_client_session<A: ToSocketAddrs>(
    addr: A,
    client: &mut ClientState,
    missions: &[ClassExamples],
) -> Result<Vec<MergeSummary>> {
    let mut conn = Connection::connect(addr, client.client_id, client.dim())?;
    let mut summaries = Vec::with_capacity(missions.len());
    for data in missions {
        let report = client.learn(data)?;
        summaries.push(conn.report(&report)?);
        let broadcast = conn.sync()?;
        client.apply_broadcast(&broadcast)?;
    }
    Ok(summaries)
}
