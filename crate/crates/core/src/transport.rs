//! Message-passing transports: an in-process multi-rank hub (the default for
//! tests), a seeded delaying wrapper for deadlock trials, and a TCP socket
//! transport sharing the same frame layout.
//!
//! Wire framing (little-endian): header {u32 magic, u32 sender,
//! u32 cluster_id, u8 kind, u32 payload_len}, payload_len in bytes, payload
//! 8-byte floats in (a-major, kappa graded-lex) order.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::time::Duration;

pub const WIRE_MAGIC: u32 = 0x6866_6d31; // "hfm1"

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("peer {0} disconnected")]
    Disconnected(usize),
    #[error("bad frame: {0}")]
    BadFrame(String),
    #[error("destination rank {0} out of range")]
    BadRank(usize),
}

/// Payload-bearing message kinds. The first three carry FMM tensors keyed by
/// a temporal cluster; vector segments carry GMRES vector exchanges keyed by
/// a sequence number in the cluster field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    MomentsToParent,
    MomentsToInteraction,
    LocalsToChild,
    VectorSegment,
}

impl MessageKind {
    pub fn to_u8(self) -> u8 {
        match self {
            MessageKind::MomentsToParent => 0,
            MessageKind::MomentsToInteraction => 1,
            MessageKind::LocalsToChild => 2,
            MessageKind::VectorSegment => 3,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => MessageKind::MomentsToParent,
            1 => MessageKind::MomentsToInteraction,
            2 => MessageKind::LocalsToChild,
            3 => MessageKind::VectorSegment,
            _ => return None,
        })
    }

    /// Moments-carrying kinds are subject to the one-directional-flow check.
    pub fn carries_moments(self) -> bool {
        matches!(self, MessageKind::MomentsToParent | MessageKind::MomentsToInteraction)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: usize,
    pub dest: usize,
    pub cluster: u32,
    pub kind: MessageKind,
    pub payload: Vec<f64>,
}

impl Message {
    pub fn tag(&self) -> (usize, MessageKind) {
        (self.cluster as usize, self.kind)
    }

    /// Serializes header + payload in the wire layout.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + 8 * self.payload.len());
        out.extend_from_slice(&WIRE_MAGIC.to_le_bytes());
        out.extend_from_slice(&(self.sender as u32).to_le_bytes());
        out.extend_from_slice(&self.cluster.to_le_bytes());
        out.push(self.kind.to_u8());
        out.extend_from_slice(&((8 * self.payload.len()) as u32).to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Attempts to decode one frame from the front of `buf`; returns the
    /// message and the consumed byte count when a full frame is present.
    pub fn decode(buf: &[u8], dest: usize) -> Result<Option<(Message, usize)>, TransportError> {
        const HEADER: usize = 17;
        if buf.len() < HEADER {
            return Ok(None);
        }
        let magic = u32::from_le_bytes(buf[0..4].try_into().unwrap());
        if magic != WIRE_MAGIC {
            return Err(TransportError::BadFrame(format!("magic {magic:#x}")));
        }
        let sender = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        let cluster = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        let kind = MessageKind::from_u8(buf[12])
            .ok_or_else(|| TransportError::BadFrame(format!("kind {}", buf[12])))?;
        let payload_bytes = u32::from_le_bytes(buf[13..17].try_into().unwrap()) as usize;
        if payload_bytes % 8 != 0 {
            return Err(TransportError::BadFrame(format!("payload length {payload_bytes}")));
        }
        if buf.len() < HEADER + payload_bytes {
            return Ok(None);
        }
        let mut payload = Vec::with_capacity(payload_bytes / 8);
        for c in buf[HEADER..HEADER + payload_bytes].chunks_exact(8) {
            payload.push(f64::from_le_bytes(c.try_into().unwrap()));
        }
        Ok(Some((Message { sender, dest, cluster, kind, payload }, HEADER + payload_bytes)))
    }
}

/// Reliable, non-blocking, per-(sender, tag) ordered message passing between
/// a fixed set of ranks. Endpoints are internally synchronized; `send` never
/// blocks on the receiver and `poll` returns without waiting.
pub trait Transport: Send + Sync {
    fn rank(&self) -> usize;
    fn n_ranks(&self) -> usize;
    fn send(&self, msg: Message) -> Result<(), TransportError>;
    fn poll(&self) -> Result<Vec<Message>, TransportError>;
}

/// All inboxes of an in-process rank group.
#[derive(Debug)]
pub struct InProcHub {
    inboxes: Vec<Mutex<VecDeque<Message>>>,
}

impl InProcHub {
    /// Creates connected endpoints for `n_ranks` ranks.
    pub fn endpoints(n_ranks: usize) -> Vec<InProcTransport> {
        let hub = Arc::new(InProcHub {
            inboxes: (0..n_ranks).map(|_| Mutex::new(VecDeque::new())).collect(),
        });
        (0..n_ranks)
            .map(|rank| InProcTransport { hub: hub.clone(), rank })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct InProcTransport {
    hub: Arc<InProcHub>,
    rank: usize,
}

impl Transport for InProcTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn n_ranks(&self) -> usize {
        self.hub.inboxes.len()
    }

    fn send(&self, msg: Message) -> Result<(), TransportError> {
        let dest = msg.dest;
        self.hub
            .inboxes
            .get(dest)
            .ok_or(TransportError::BadRank(dest))?
            .lock()
            .unwrap()
            .push_back(msg);
        Ok(())
    }

    fn poll(&self) -> Result<Vec<Message>, TransportError> {
        let mut inbox = self.hub.inboxes[self.rank].lock().unwrap();
        Ok(inbox.drain(..).collect())
    }
}

/// Wraps a transport and holds back delivered messages for a seeded random
/// number of polls, preserving per-(sender, tag) order. Used by the deadlock
/// trials; delivery remains reliable and exactly-once.
pub struct DelayedTransport<T: Transport> {
    inner: T,
    state: Mutex<DelayState>,
    max_delay: u64,
}

struct DelayState {
    rng: u64,
    clock: u64,
    pending: Vec<(u64, Message)>,
}

impl<T: Transport> DelayedTransport<T> {
    pub fn new(inner: T, seed: u64, max_delay: u64) -> Self {
        DelayedTransport {
            inner,
            state: Mutex::new(DelayState { rng: seed ^ 0x9e37_79b9_7f4a_7c15, clock: 0, pending: Vec::new() }),
            max_delay,
        }
    }
}

fn next_u64(s: &mut u64) -> u64 {
    // splitmix64
    *s = s.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *s;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl<T: Transport> Transport for DelayedTransport<T> {
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    fn n_ranks(&self) -> usize {
        self.inner.n_ranks()
    }

    fn send(&self, msg: Message) -> Result<(), TransportError> {
        self.inner.send(msg)
    }

    fn poll(&self) -> Result<Vec<Message>, TransportError> {
        let fresh = self.inner.poll()?;
        let mut st = self.state.lock().unwrap();
        st.clock += 1;
        let clock = st.clock;
        let max_delay = self.max_delay;
        for msg in fresh {
            let delay = next_u64(&mut st.rng) % (max_delay + 1);
            st.pending.push((clock + delay, msg));
        }
        let mut out = Vec::new();
        // stable order: due messages in arrival order
        let mut i = 0;
        while i < st.pending.len() {
            if st.pending[i].0 <= clock {
                out.push(st.pending.remove(i).1);
            } else {
                i += 1;
            }
        }
        Ok(out)
    }
}

/// TCP full-mesh transport: rank r listens on `base_port + r` and connects
/// to every lower-numbered rank; frames use the shared wire layout.
pub struct TcpTransport {
    rank: usize,
    n_ranks: usize,
    state: Mutex<TcpState>,
}

struct TcpState {
    peers: Vec<Option<TcpStream>>,
    read_bufs: Vec<Vec<u8>>,
}

impl TcpTransport {
    /// Establishes the full mesh. All ranks must call this concurrently with
    /// the same host and base port.
    pub fn connect(host: &str, base_port: u16, rank: usize, n_ranks: usize) -> Result<Self, TransportError> {
        let listener = TcpListener::bind((host, base_port + rank as u16))?;
        let mut peers: Vec<Option<TcpStream>> = (0..n_ranks).map(|_| None).collect();
        // deterministic handshake: accept from lower ranks, dial higher ones
        let mut pending_accepts = rank;
        let mut to_dial: Vec<usize> = ((rank + 1)..n_ranks).collect();
        listener.set_nonblocking(true)?;
        let deadline = std::time::Instant::now() + Duration::from_secs(30);
        while pending_accepts > 0 || !to_dial.is_empty() {
            if std::time::Instant::now() > deadline {
                return Err(TransportError::BadFrame("mesh connect timeout".into()));
            }
            match listener.accept() {
                Ok((mut stream, _)) => {
                    stream.set_nodelay(true)?;
                    let mut hello = [0u8; 4];
                    stream.set_nonblocking(false)?;
                    stream.read_exact(&mut hello)?;
                    let peer = u32::from_le_bytes(hello) as usize;
                    stream.set_nonblocking(true)?;
                    peers[peer] = Some(stream);
                    pending_accepts -= 1;
                }
                Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {}
                Err(e) => return Err(e.into()),
            }
            to_dial.retain(|&peer| {
                match TcpStream::connect((host, base_port + peer as u16)) {
                    Ok(mut stream) => {
                        let _ = stream.set_nodelay(true);
                        if stream.write_all(&(rank as u32).to_le_bytes()).is_ok() {
                            let _ = stream.set_nonblocking(true);
                            peers[peer] = Some(stream);
                            false
                        } else {
                            true
                        }
                    }
                    Err(_) => true,
                }
            });
            std::thread::sleep(Duration::from_millis(1));
        }
        Ok(TcpTransport {
            rank,
            n_ranks,
            state: Mutex::new(TcpState {
                peers,
                read_bufs: vec![Vec::new(); n_ranks],
            }),
        })
    }
}

impl Transport for TcpTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn n_ranks(&self) -> usize {
        self.n_ranks
    }

    fn send(&self, msg: Message) -> Result<(), TransportError> {
        if msg.dest == self.rank {
            // loopback: queue locally via the read buffer
            let bytes = msg.encode();
            let mut st = self.state.lock().unwrap();
            let rank = self.rank;
            st.read_bufs[rank].extend_from_slice(&bytes);
            return Ok(());
        }
        let bytes = msg.encode();
        let mut st = self.state.lock().unwrap();
        let stream = st.peers[msg.dest].as_mut().ok_or(TransportError::Disconnected(msg.dest))?;
        stream.set_nonblocking(false)?;
        stream.write_all(&bytes)?;
        stream.set_nonblocking(true)?;
        Ok(())
    }

    fn poll(&self) -> Result<Vec<Message>, TransportError> {
        let mut st = self.state.lock().unwrap();
        let mut scratch = [0u8; 16 * 1024];
        for peer in 0..self.n_ranks {
            if peer == self.rank {
                continue;
            }
            loop {
                let stream = match st.peers[peer].as_mut() {
                    Some(s) => s,
                    None => break,
                };
                match stream.read(&mut scratch) {
                    Ok(0) => {
                        st.peers[peer] = None;
                        break;
                    }
                    Ok(n) => st.read_bufs[peer].extend_from_slice(&scratch[..n]),
                    Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => break,
                    Err(e) => return Err(e.into()),
                }
            }
        }
        let mut out = Vec::new();
        for peer in 0..self.n_ranks {
            loop {
                let parsed = Message::decode(&st.read_bufs[peer], self.rank)?;
                match parsed {
                    Some((msg, used)) => {
                        st.read_bufs[peer].drain(..used);
                        out.push(msg);
                    }
                    None => break,
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(sender: usize, dest: usize, cluster: u32, kind: MessageKind, payload: Vec<f64>) -> Message {
        Message { sender, dest, cluster, kind, payload }
    }

    #[test]
    fn inproc_send_then_poll() {
        let eps = InProcHub::endpoints(2);
        eps[0]
            .send(msg(0, 1, 7, MessageKind::MomentsToParent, vec![1.0, 2.0]))
            .unwrap();
        let got = eps[1].poll().unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].cluster, 7);
        assert_eq!(got[0].payload, vec![1.0, 2.0]);
        assert!(eps[1].poll().unwrap().is_empty());
    }

    #[test]
    fn inproc_order_per_sender() {
        let eps = InProcHub::endpoints(3);
        for i in 0..100u32 {
            eps[0].send(msg(0, 2, i, MessageKind::MomentsToInteraction, vec![])).unwrap();
            eps[1].send(msg(1, 2, 1000 + i, MessageKind::MomentsToInteraction, vec![])).unwrap();
        }
        let got = eps[2].poll().unwrap();
        let from0: Vec<u32> = got.iter().filter(|m| m.sender == 0).map(|m| m.cluster).collect();
        let from1: Vec<u32> = got.iter().filter(|m| m.sender == 1).map(|m| m.cluster).collect();
        assert_eq!(from0, (0..100).collect::<Vec<_>>());
        assert_eq!(from1, (1000..1100).collect::<Vec<_>>());
    }

    #[test]
    fn delayed_transport_delivers_exactly_once() {
        let eps = InProcHub::endpoints(2);
        let mut it = eps.into_iter();
        let a = it.next().unwrap();
        let b = DelayedTransport::new(it.next().unwrap(), 12345, 7);
        for i in 0..1000u32 {
            a.send(msg(0, 1, i, MessageKind::LocalsToChild, vec![i as f64])).unwrap();
        }
        let mut got = Vec::new();
        let mut spins = 0;
        while got.len() < 1000 && spins < 10_000 {
            got.extend(b.poll().unwrap());
            spins += 1;
        }
        assert_eq!(got.len(), 1000, "all messages delivered");
        let mut clusters: Vec<u32> = got.iter().map(|m| m.cluster).collect();
        clusters.sort_unstable();
        clusters.dedup();
        assert_eq!(clusters.len(), 1000, "exactly once");
    }

    #[test]
    fn delayed_transport_is_deterministic_per_seed() {
        let run = |seed: u64| -> Vec<u32> {
            let eps = InProcHub::endpoints(2);
            let mut it = eps.into_iter();
            let a = it.next().unwrap();
            let b = DelayedTransport::new(it.next().unwrap(), seed, 5);
            for i in 0..50u32 {
                a.send(msg(0, 1, i, MessageKind::VectorSegment, vec![])).unwrap();
            }
            let mut order = Vec::new();
            while order.len() < 50 {
                order.extend(b.poll().unwrap().iter().map(|m| m.cluster));
            }
            order
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8), "different seeds should shuffle differently");
    }

    #[test]
    fn frame_round_trip() {
        let m = msg(3, 1, 0xdead, MessageKind::LocalsToChild, vec![1.5, -2.25, 1e-300]);
        let bytes = m.encode();
        assert_eq!(bytes.len(), 17 + 24);
        let (decoded, used) = Message::decode(&bytes, 1).unwrap().unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(decoded, m);
        // partial frames decode to None
        assert!(Message::decode(&bytes[..10], 1).unwrap().is_none());
        assert!(Message::decode(&bytes[..20], 1).unwrap().is_none());
        // corrupted magic rejected
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(Message::decode(&bad, 1).is_err());
    }

    #[test]
    fn tcp_mesh_round_trip() {
        let n = 3;
        let base = 39120;
        let handles: Vec<_> = (0..n)
            .map(|rank| {
                std::thread::spawn(move || {
                    let t = TcpTransport::connect("127.0.0.1", base, rank, n).unwrap();
                    // every rank sends its rank id to every other
                    for dest in 0..n {
                        if dest != rank {
                            t.send(msg(rank, dest, rank as u32, MessageKind::MomentsToParent, vec![rank as f64]))
                                .unwrap();
                        }
                    }
                    let mut got = Vec::new();
                    let deadline = std::time::Instant::now() + Duration::from_secs(10);
                    while got.len() < n - 1 {
                        got.extend(t.poll().unwrap());
                        assert!(std::time::Instant::now() < deadline, "tcp mesh stalled");
                        std::thread::sleep(Duration::from_micros(200));
                    }
                    let mut senders: Vec<usize> = got.iter().map(|m| m.sender).collect();
                    senders.sort_unstable();
                    let expect: Vec<usize> = (0..n).filter(|&r| r != rank).collect();
                    assert_eq!(senders, expect);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
    }
}
