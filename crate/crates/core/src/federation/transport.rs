//! Carriers for round messages. Both transports move encoded frames, so the
//! in-process path exercises the same codec as the TCP one.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::client::{LocalTrainer, TrainStats};
use super::wire::{decode, encode, read_message, write_message, Payload, RoundMessage};
use super::FederationError;

/// Per-(round, client) loss means, filled in by clients and drained by the
/// server. Kept off the wire on purpose.
#[derive(Debug, Clone, Default)]
pub struct StatsSink(Arc<Mutex<BTreeMap<(u32, u32), TrainStats>>>);

impl StatsSink {
    pub fn record(&self, round: u32, client: u32, stats: TrainStats) {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).insert((round, client), stats);
    }

    pub fn take(&self, round: u32, client: u32) -> Option<TrainStats> {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).remove(&(round, client))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TransportKind {
    #[default]
    #[serde(rename = "inproc")]
    InProc,
    #[serde(rename = "tcp")]
    Tcp,
}

impl FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inproc" => Ok(Self::InProc),
            "tcp" => Ok(Self::Tcp),
            other => Err(format!("unknown transport {other:?} (expected inproc or tcp)")),
        }
    }
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::InProc => "inproc",
            Self::Tcp => "tcp",
        })
    }
}

/// Server side of a transport.
pub trait ServerTransport: Send {
    fn broadcast(&mut self, msg: &RoundMessage) -> Result<(), FederationError>;

    /// Blocks until `expected` replies arrived, in arrival order.
    fn collect(&mut self, expected: usize) -> Result<Vec<RoundMessage>, FederationError>;

    /// Stops every client. A clean finish sends SHUTDOWN first; an aborted
    /// one tears the links down. Returns the first client-side error.
    fn finish(&mut self, clean: bool) -> Result<(), FederationError>;
}

/// Answers one message; `None` means shut down.
fn respond(
    trainer: &mut dyn LocalTrainer,
    msg: RoundMessage,
    stats: &StatsSink,
) -> Result<Option<RoundMessage>, FederationError> {
    match msg.payload {
        Payload::Broadcast { params, prototypes } => {
            let id = trainer.client_id();
            let up = catch_unwind(AssertUnwindSafe(|| trainer.train(msg.round, &params, &prototypes))).unwrap_or_else(
                |p| {
                    let reason = p
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| p.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "panic".into());
                    Err(FederationError::ClientFailure { client: id, reason })
                },
            )?;
            stats.record(msg.round, up.client_id, up.stats);
            Ok(Some(RoundMessage::update(
                msg.round,
                up.client_id,
                up.params,
                up.prototypes,
                up.dataset_size,
            )))
        }
        Payload::Shutdown => Ok(None),
        Payload::Update { .. } => Err(FederationError::Protocol("client received an UPDATE".into())),
    }
}

fn as_client_failure(client: u32, e: FederationError) -> FederationError {
    match e {
        FederationError::ClientFailure { .. } => e,
        other => FederationError::ClientFailure {
            client,
            reason: other.to_string(),
        },
    }
}

type Reply = (u32, Result<Vec<u8>, String>);

/// Clients on threads, frames over channels.
pub struct InProcTransport {
    to_clients: Vec<Sender<Vec<u8>>>,
    replies: Receiver<Reply>,
    handles: Vec<JoinHandle<()>>,
}

impl InProcTransport {
    pub fn spawn(trainers: Vec<Box<dyn LocalTrainer>>, stats: StatsSink) -> Self {
        let (reply_tx, replies) = channel::<Reply>();
        let mut to_clients = Vec::new();
        let mut handles = Vec::new();
        for mut trainer in trainers {
            let (tx, rx) = channel::<Vec<u8>>();
            to_clients.push(tx);
            let reply_tx = reply_tx.clone();
            let stats = stats.clone();
            handles.push(std::thread::spawn(move || {
                let id = trainer.client_id();
                while let Ok(frame) = rx.recv() {
                    let outcome = decode(&frame)
                        .map_err(FederationError::from)
                        .and_then(|m| respond(trainer.as_mut(), m, &stats))
                        .and_then(|r| r.map(|m| encode(&m)).transpose().map_err(FederationError::from));
                    match outcome {
                        Ok(Some(bytes)) => {
                            if reply_tx.send((id, Ok(bytes))).is_err() {
                                return;
                            }
                        }
                        Ok(None) => return,
                        Err(e) => {
                            let _ = reply_tx.send((id, Err(e.to_string())));
                            return;
                        }
                    }
                }
            }));
        }
        Self {
            to_clients,
            replies,
            handles,
        }
    }
}

impl ServerTransport for InProcTransport {
    fn broadcast(&mut self, msg: &RoundMessage) -> Result<(), FederationError> {
        let bytes = encode(msg)?;
        for tx in &self.to_clients {
            tx.send(bytes.clone())
                .map_err(|_| FederationError::Transport("client channel closed".into()))?;
        }
        Ok(())
    }

    fn collect(&mut self, expected: usize) -> Result<Vec<RoundMessage>, FederationError> {
        let mut out = Vec::with_capacity(expected);
        while out.len() < expected {
            let (client, reply) = self
                .replies
                .recv()
                .map_err(|_| FederationError::Transport("all clients disconnected".into()))?;
            let bytes = reply.map_err(|reason| FederationError::ClientFailure { client, reason })?;
            out.push(decode(&bytes)?);
        }
        Ok(out)
    }

    fn finish(&mut self, clean: bool) -> Result<(), FederationError> {
        if clean {
            if let Ok(bytes) = encode(&RoundMessage::shutdown(0)) {
                for tx in &self.to_clients {
                    let _ = tx.send(bytes.clone());
                }
            }
        }
        self.to_clients.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
        Ok(())
    }
}

/// Clients on threads, each connected to the server over loopback TCP.
pub struct TcpTransport {
    conns: Vec<(BufReader<TcpStream>, BufWriter<TcpStream>)>,
    handles: Vec<JoinHandle<Result<(), FederationError>>>,
    aborting: Arc<AtomicBool>,
    port: u16,
}

const ACCEPT_TIMEOUT: Duration = Duration::from_secs(30);

impl TcpTransport {
    /// Binds `127.0.0.1:port` (0 picks a free port) and connects every client.
    pub fn spawn(trainers: Vec<Box<dyn LocalTrainer>>, stats: StatsSink, port: u16) -> Result<Self, FederationError> {
        let io = |e: std::io::Error| FederationError::Transport(e.to_string());
        let listener = TcpListener::bind(("127.0.0.1", port)).map_err(io)?;
        let addr = listener.local_addr().map_err(io)?;
        let aborting = Arc::new(AtomicBool::new(false));
        let expected = trainers.len();
        let mut handles = Vec::new();
        for mut trainer in trainers {
            let stats = stats.clone();
            let aborting = Arc::clone(&aborting);
            handles.push(std::thread::spawn(move || {
                let id = trainer.client_id();
                let mut run = || -> Result<(), FederationError> {
                    let stream = TcpStream::connect(addr).map_err(|e| FederationError::Transport(e.to_string()))?;
                    stream.set_nodelay(true).ok();
                    let mut reader = BufReader::new(stream.try_clone().map_err(|e| FederationError::Transport(e.to_string()))?);
                    let mut writer = BufWriter::new(stream);
                    loop {
                        let msg = read_message(&mut reader)?;
                        match respond(trainer.as_mut(), msg, &stats)? {
                            Some(reply) => write_message(&mut writer, &reply)?,
                            None => return Ok(()),
                        }
                    }
                };
                match run() {
                    Err(_) if aborting.load(Ordering::SeqCst) => Ok(()),
                    other => other.map_err(|e| as_client_failure(id, e)),
                }
            }));
        }

        listener.set_nonblocking(true).map_err(io)?;
        let deadline = Instant::now() + ACCEPT_TIMEOUT;
        let mut conns = Vec::with_capacity(expected);
        while conns.len() < expected {
            match listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false).map_err(io)?;
                    stream.set_nodelay(true).ok();
                    let reader = BufReader::new(stream.try_clone().map_err(io)?);
                    conns.push((reader, BufWriter::new(stream)));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() > deadline || handles.iter().any(|h| h.is_finished()) {
                        aborting.store(true, Ordering::SeqCst);
                        for (r, _) in &conns {
                            let _ = r.get_ref().shutdown(Shutdown::Both);
                        }
                        for h in handles {
                            if let Ok(Err(e)) = h.join() {
                                return Err(e);
                            }
                        }
                        return Err(FederationError::Transport("clients failed to connect".into()));
                    }
                    std::thread::sleep(Duration::from_millis(1));
                }
                Err(e) => return Err(io(e)),
            }
        }
        Ok(Self {
            conns,
            handles,
            aborting,
            port: addr.port(),
        })
    }

    pub fn port(&self) -> u16 {
        self.port
    }
}

impl ServerTransport for TcpTransport {
    fn broadcast(&mut self, msg: &RoundMessage) -> Result<(), FederationError> {
        for (_, w) in &mut self.conns {
            write_message(w, msg)?;
        }
        Ok(())
    }

    fn collect(&mut self, expected: usize) -> Result<Vec<RoundMessage>, FederationError> {
        if expected != self.conns.len() {
            return Err(FederationError::Protocol(format!(
                "expected {expected} replies from {} connections",
                self.conns.len()
            )));
        }
        self.conns
            .iter_mut()
            .map(|(r, _)| read_message(r).map_err(FederationError::from))
            .collect()
    }

    fn finish(&mut self, clean: bool) -> Result<(), FederationError> {
        if clean {
            let shut = RoundMessage::shutdown(0);
            for (_, w) in &mut self.conns {
                let _ = write_message(w, &shut);
            }
        } else {
            self.aborting.store(true, Ordering::SeqCst);
            for (r, _) in &self.conns {
                let _ = r.get_ref().shutdown(Shutdown::Both);
            }
        }
        let mut first = None;
        for h in self.handles.drain(..) {
            match h.join() {
                Ok(Err(e)) if first.is_none() => first = Some(e),
                _ => {}
            }
        }
        self.conns.clear();
        first.map_or(Ok(()), Err)
    }
}
