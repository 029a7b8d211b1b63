//! Live transport: the node state machines behind TCP listeners.
//!
//! Every node listens on its own port. A frame is a big-endian `u32`
//! length followed by a canonical [`Frame`]. Peers push fire-and-forget
//! [`Frame::Peer`] messages over long-lived connections; API clients send
//! one [`Frame::Api`] per request and read one [`Frame::ApiReply`].
//!
//! Each node has one owner thread that holds its state and drains a
//! mailbox; connection threads only decode frames and forward them.

use std::collections::BTreeMap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use super::node::{expand, StorageNode, ValidatorNode};
use super::{Message, NodeId, Outgoing};
use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::crypto::Digest;
use crate::ledger::{append_block, write_chain_file};
use crate::service::{handle_api, ApiError, ApiRequest, ApiResponse, ApiTarget, Backend};

/// Largest frame accepted from the wire.
pub const MAX_FRAME_LEN: usize = 64 << 20;
const POLL_INTERVAL: Duration = Duration::from_millis(50);
const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Peer { from: NodeId, msg: Message },
    Api(ApiRequest),
    ApiReply(ApiResponse),
}

impl Canonical for Frame {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            Frame::Peer { from, msg } => enc.u8(0).u64(*from as u64).value(msg),
            Frame::Api(r) => enc.u8(1).value(r),
            Frame::ApiReply(r) => enc.u8(2).value(r),
        };
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(match dec.u8()? {
            0 => Frame::Peer {
                from: dec.u64()? as NodeId,
                msg: dec.value()?,
            },
            1 => Frame::Api(dec.value()?),
            2 => Frame::ApiReply(dec.value()?),
            tag => return Err(CodecError::InvalidTag { what: "frame", tag }),
        })
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    let body = frame.to_canonical_bytes();
    let len = u32::try_from(body.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Frame>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Frame::from_canonical_bytes(&body)
        .map(Some)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
}

/// Sends one API request to `addr` and waits for the reply.
pub fn call(addr: SocketAddr, req: ApiRequest, timeout: Duration) -> Result<ApiResponse, ApiError> {
    let transport = |e: io::Error| ApiError::Transport(format!("{addr}: {e}"));
    let stream = TcpStream::connect_timeout(&addr, timeout).map_err(transport)?;
    stream.set_read_timeout(Some(timeout)).map_err(transport)?;
    let mut w = BufWriter::new(stream.try_clone().map_err(transport)?);
    write_frame(&mut w, &Frame::Api(req)).map_err(transport)?;
    match read_frame(&mut BufReader::new(stream)).map_err(transport)? {
        Some(Frame::ApiReply(r)) => Ok(r),
        Some(other) => Err(ApiError::Protocol(format!("expected a reply, got {other:?}"))),
        None => Err(ApiError::Transport(format!("{addr}: connection closed"))),
    }
}

/// Talks to live nodes: redemptions to storage, the rest to a validator.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    pub validator: SocketAddr,
    pub storage: SocketAddr,
    pub timeout: Duration,
}

impl Backend for RemoteBackend {
    fn call(&mut self, req: ApiRequest) -> Result<ApiResponse, ApiError> {
        let addr = match req {
            ApiRequest::Redeem { .. } => self.storage,
            _ => self.validator,
        };
        call(addr, req, self.timeout)
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// A node's state, owned by its thread.
#[derive(Debug)]
pub enum LiveNode {
    Validator(Box<ValidatorNode>),
    Storage(Box<StorageNode>),
}

impl LiveNode {
    fn id(&self) -> NodeId {
        match self {
            LiveNode::Validator(v) => v.id(),
            LiveNode::Storage(s) => s.id(),
        }
    }

    fn name(&self) -> String {
        match self {
            LiveNode::Validator(v) => format!("validator-{}", v.id()),
            LiveNode::Storage(_) => "storage".into(),
        }
    }
}

enum Mail {
    Peer(NodeId, Message),
    Api(ApiRequest, Sender<ApiResponse>),
}

/// Options for [`spawn_node`].
pub struct LiveOptions {
    pub peers: BTreeMap<NodeId, SocketAddr>,
    pub validator_count: usize,
    /// Seconds since the epoch; replaceable for tests.
    pub clock: Arc<dyn Fn() -> u64 + Send + Sync>,
    /// Where a validator keeps its chain file.
    pub chain_file: Option<PathBuf>,
    /// Receives each trace line.
    pub log: Arc<dyn Fn(&str) + Send + Sync>,
}

/// A running node. Dropping the handle does not stop it; call
/// [`NodeHandle::stop`].
pub struct NodeHandle {
    pub addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    owner: Option<JoinHandle<LiveNode>>,
}

impl NodeHandle {
    /// Stops the node and returns its final state.
    pub fn stop(mut self) -> Option<LiveNode> {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, CONNECT_TIMEOUT);
        self.owner.take().and_then(|h| h.join().ok())
    }

    pub fn wait(mut self) -> Option<LiveNode> {
        self.owner.take().and_then(|h| h.join().ok())
    }
}

/// Starts a node on an already bound listener.
pub fn spawn_node(node: LiveNode, listener: TcpListener, options: LiveOptions) -> io::Result<NodeHandle> {
    let addr = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let (mail_tx, mail_rx) = mpsc::channel();
    {
        let shutdown = shutdown.clone();
        thread::spawn(move || accept_loop(listener, mail_tx, shutdown));
    }
    let owner = {
        let shutdown = shutdown.clone();
        thread::spawn(move || owner_loop(node, mail_rx, options, shutdown))
    };
    Ok(NodeHandle {
        addr,
        shutdown,
        owner: Some(owner),
    })
}

fn accept_loop(listener: TcpListener, mail: Sender<Mail>, shutdown: Arc<AtomicBool>) {
    for stream in listener.incoming() {
        if shutdown.load(Ordering::SeqCst) {
            return;
        }
        let Ok(stream) = stream else { continue };
        let mail = mail.clone();
        thread::spawn(move || serve_connection(stream, mail));
    }
}

fn serve_connection(stream: TcpStream, mail: Sender<Mail>) {
    let Ok(write_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(stream);
    let mut writer = BufWriter::new(write_half);
    while let Ok(Some(frame)) = read_frame(&mut reader) {
        match frame {
            Frame::Peer { from, msg } => {
                if mail.send(Mail::Peer(from, msg)).is_err() {
                    return;
                }
            }
            Frame::Api(req) => {
                let (tx, rx) = mpsc::channel();
                if mail.send(Mail::Api(req, tx)).is_err() {
                    return;
                }
                let Ok(resp) = rx.recv() else { return };
                if write_frame(&mut writer, &Frame::ApiReply(resp)).is_err() {
                    return;
                }
            }
            Frame::ApiReply(_) => return,
        }
    }
}

/// One outgoing connection per peer, fed by a channel.
struct PeerLink {
    tx: Sender<Message>,
}

impl PeerLink {
    fn spawn(me: NodeId, addr: SocketAddr) -> Self {
        let (tx, rx) = mpsc::channel::<Message>();
        thread::spawn(move || {
            let mut conn: Option<BufWriter<TcpStream>> = None;
            for msg in rx {
                if conn.is_none() {
                    conn = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT).ok().map(BufWriter::new);
                }
                let Some(w) = conn.as_mut() else { continue };
                if write_frame(w, &Frame::Peer { from: me, msg }).is_err() {
                    // Lost; retransmission covers it.
                    conn = None;
                }
            }
        });
        Self { tx }
    }
}

struct ChainPersistence {
    path: PathBuf,
    tip: Digest,
    len: usize,
}

impl ChainPersistence {
    fn sync(&mut self, v: &ValidatorNode) -> Result<(), String> {
        let chain = v.ledger().chain();
        if chain.last().map(|b| b.hash()) == Some(self.tip) && chain.len() == self.len {
            return Ok(());
        }
        let extends = self.len > 0 && chain.len() > self.len && chain[self.len - 1].hash() == self.tip;
        if extends {
            for b in &chain[self.len..] {
                append_block(&self.path, b).map_err(|e| e.to_string())?;
            }
        } else {
            write_chain_file(&self.path, chain).map_err(|e| e.to_string())?;
        }
        self.len = chain.len();
        self.tip = chain.last().expect("genesis").hash();
        Ok(())
    }
}

fn owner_loop(mut node: LiveNode, mail: Receiver<Mail>, options: LiveOptions, shutdown: Arc<AtomicBool>) -> LiveNode {
    let me = node.id();
    let name = node.name();
    let links: BTreeMap<NodeId, PeerLink> = options
        .peers
        .iter()
        .filter(|(id, _)| **id != me)
        .map(|(id, addr)| (*id, PeerLink::spawn(me, *addr)))
        .collect();
    let mut persistence = options.chain_file.clone().map(|path| ChainPersistence {
        path,
        tip: Digest([0; 32]),
        len: 0,
    });
    let send = |outs: Vec<Outgoing>| {
        for o in outs {
            for to in expand(o.to, me, options.validator_count) {
                if let Some(link) = links.get(&to) {
                    let _ = link.tx.send(o.msg.clone());
                }
            }
        }
    };
    let mut last_tick = 0;
    while !shutdown.load(Ordering::SeqCst) {
        let now = (options.clock)();
        let outs = match mail.recv_timeout(POLL_INTERVAL) {
            Ok(Mail::Peer(from, msg)) => match &mut node {
                LiveNode::Validator(v) => v.handle(from, msg, now),
                LiveNode::Storage(s) => s.handle(from, msg, now),
            },
            Ok(Mail::Api(req, reply)) => {
                let target = match &mut node {
                    LiveNode::Validator(v) => ApiTarget::Validator(v),
                    LiveNode::Storage(s) => ApiTarget::Storage(s),
                };
                let (resp, outs) = handle_api(target, req, now);
                let _ = reply.send(resp);
                outs
            }
            Err(RecvTimeoutError::Timeout) => Vec::new(),
            Err(RecvTimeoutError::Disconnected) => break,
        };
        send(outs);
        if now > last_tick {
            last_tick = now;
            let outs = match &mut node {
                LiveNode::Validator(v) => v.on_tick(now, true),
                LiveNode::Storage(s) => s.on_tick(now, true),
            };
            send(outs);
        }
        let events = match &mut node {
            LiveNode::Validator(v) => v.take_events(),
            LiveNode::Storage(s) => s.take_events(),
        };
        for e in events {
            (options.log)(&format!("{now} {name} {} {}", e.event, e.detail));
        }
        if let (Some(p), LiveNode::Validator(v)) = (persistence.as_mut(), &node) {
            if let Err(e) = p.sync(v) {
                (options.log)(&format!("{now} {name} persist_failed {e}"));
            }
        }
    }
    node
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{LinkToken, Nonce, Operation};

    #[test]
    fn frames_round_trip_over_a_buffer() {
        let frames = [
            Frame::Peer {
                from: 3,
                msg: Message::GetBlocks { from_height: 9 },
            },
            Frame::Api(ApiRequest::Redeem {
                token: LinkToken([1; 16]),
                nonce: Nonce([2; 16]),
                operation: Operation::Op4,
            }),
            Frame::ApiReply(ApiResponse::Payload(vec![1, 2, 3])),
        ];
        let mut buf = Vec::new();
        for f in &frames {
            write_frame(&mut buf, f).unwrap();
        }
        let mut r = &buf[..];
        for f in &frames {
            assert_eq!(read_frame(&mut r).unwrap().as_ref(), Some(f));
        }
        assert!(read_frame(&mut r).unwrap().is_none());
    }

    #[test]
    fn oversized_frame_is_refused() {
        let mut buf = ((MAX_FRAME_LEN + 1) as u32).to_be_bytes().to_vec();
        buf.extend_from_slice(&[0; 8]);
        assert!(read_frame(&mut &buf[..]).is_err());
    }
}
