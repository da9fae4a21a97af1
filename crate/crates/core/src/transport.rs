//! Framed message delivery between ranks.
//!
//! Sessions form a star per master group: every rank except 0 has exactly
//! one parent, and talks only to its parent and its own children. A rank
//! with both (a sub-master) owns two [`Endpoint`]s: `up` towards its
//! parent and `down` towards its children.
//!
//! Both backends carry encoded frames, so the codec runs on every hop.
//! Each endpoint has one bounded inbox; a sender blocks while the
//! receiver's inbox is full (in-process) or the socket buffer is full (TCP).

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam::channel::{bounded, Receiver, Sender};
use thiserror::Error;

use crate::proto::{self, Message, ProtoError, WirePrecision, HEADER_LEN};
use crate::Rank;

pub const DEFAULT_INBOX_CAPACITY: usize = 64;
const CONNECT_RETRY: Duration = Duration::from_millis(20);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("rank {0} is not a peer of this endpoint")]
    UnknownPeer(Rank),
    #[error("peer {0} disconnected")]
    PeerDisconnected(Rank),
    #[error("send after shutdown")]
    Closed,
    #[error("undecodable frame from rank {from}: {source}")]
    Proto { from: Rank, source: ProtoError },
    #[error("rank {0} appears more than once in the session")]
    RankCollision(Rank),
    #[error("invalid session: {0}")]
    Session(String),
    #[error("timed out establishing the session")]
    Timeout,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    InProc,
    Tcp,
}

#[derive(Debug, PartialEq)]
pub enum Received {
    Message { from: Rank, msg: Message },
    /// `from` closed its side; nothing more will arrive from it.
    PeerClosed { from: Rank },
    /// Every peer has closed its side and the inbox is drained.
    EndOfSession,
}

/// An empty `bytes` is a hangup marker; real frames are never empty.
struct Packet {
    from: Rank,
    bytes: Vec<u8>,
}

const HANGUP_GRACE: Duration = Duration::from_millis(200);

enum Link {
    Chan(Sender<Packet>),
    Tcp(TcpStream),
}

impl Drop for Link {
    fn drop(&mut self) {
        if let Link::Tcp(s) = self {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

/// One rank's view of a star: blocking send to a peer, blocking receive
/// from any peer.
pub struct Endpoint {
    rank: Rank,
    backend: Backend,
    precision: WirePrecision,
    links: BTreeMap<Rank, Link>,
    inbox: Receiver<Packet>,
    closed: bool,
    sent: BTreeMap<Rank, u64>,
    received: BTreeMap<Rank, u64>,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint")
            .field("rank", &self.rank)
            .field("backend", &self.backend)
            .field("peers", &self.peers())
            .finish()
    }
}

impl Endpoint {
    fn new(rank: Rank, backend: Backend, precision: WirePrecision, inbox: Receiver<Packet>) -> Self {
        Self {
            rank,
            backend,
            precision,
            links: BTreeMap::new(),
            inbox,
            closed: false,
            sent: BTreeMap::new(),
            received: BTreeMap::new(),
        }
    }

    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn precision(&self) -> WirePrecision {
        self.precision
    }

    pub fn peers(&self) -> Vec<Rank> {
        self.links.keys().copied().collect()
    }

    pub fn sent_counts(&self) -> &BTreeMap<Rank, u64> {
        &self.sent
    }

    pub fn received_counts(&self) -> &BTreeMap<Rank, u64> {
        &self.received
    }

    pub fn send(&mut self, to: Rank, msg: &Message) -> Result<(), TransportError> {
        if self.closed {
            return Err(TransportError::Closed);
        }
        let link = self.links.get_mut(&to).ok_or(TransportError::UnknownPeer(to))?;
        let bytes = proto::encode(msg, self.precision);
        match link {
            Link::Chan(tx) => tx
                .send(Packet {
                    from: self.rank,
                    bytes,
                })
                .map_err(|_| TransportError::PeerDisconnected(to))?,
            Link::Tcp(stream) => stream
                .write_all(&bytes)
                .map_err(|_| TransportError::PeerDisconnected(to))?,
        }
        *self.sent.entry(to).or_default() += 1;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Received, TransportError> {
        match self.inbox.recv() {
            Ok(Packet { from, bytes }) if bytes.is_empty() => Ok(Received::PeerClosed { from }),
            Ok(Packet { from, bytes }) => {
                let msg = proto::decode(&bytes).map_err(|source| TransportError::Proto { from, source })?;
                *self.received.entry(from).or_default() += 1;
                Ok(Received::Message { from, msg })
            }
            Err(_) => Ok(Received::EndOfSession),
        }
    }

    /// Refuses further sends and releases the links so peers observe the
    /// end of the session.
    pub fn close(&mut self) {
        if self.closed {
            return;
        }
        self.closed = true;
        for (_, link) in std::mem::take(&mut self.links) {
            if let Link::Chan(tx) = &link {
                let _ = tx.send_timeout(
                    Packet {
                        from: self.rank,
                        bytes: Vec::new(),
                    },
                    HANGUP_GRACE,
                );
            }
        }
    }
}

impl Drop for Endpoint {
    fn drop(&mut self) {
        self.close();
    }
}

/// One rank of a session and the rank it reports to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeSpec {
    pub rank: Rank,
    pub parent: Option<Rank>,
}

#[derive(Debug, Clone)]
pub struct SessionSpec {
    pub backend: Backend,
    pub precision: WirePrecision,
    pub nodes: Vec<NodeSpec>,
    pub inbox_capacity: usize,
}

impl SessionSpec {
    pub fn new(backend: Backend, precision: WirePrecision, nodes: Vec<NodeSpec>) -> Self {
        Self {
            backend,
            precision,
            nodes,
            inbox_capacity: DEFAULT_INBOX_CAPACITY,
        }
    }

    /// Master 0 with workers `1..=workers`.
    pub fn flat(backend: Backend, precision: WirePrecision, workers: usize) -> Self {
        let mut nodes = vec![NodeSpec { rank: 0, parent: None }];
        nodes.extend((1..=workers as Rank).map(|r| NodeSpec {
            rank: r,
            parent: Some(0),
        }));
        Self::new(backend, precision, nodes)
    }

    /// Children of every rank that has any.
    pub fn children(&self) -> Result<BTreeMap<Rank, Vec<Rank>>, TransportError> {
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.rank) {
                return Err(TransportError::RankCollision(n.rank));
            }
        }
        if !seen.contains(&0) {
            return Err(TransportError::Session("rank 0 (top-level master) is missing".into()));
        }
        let parents: BTreeMap<Rank, Option<Rank>> = self.nodes.iter().map(|n| (n.rank, n.parent)).collect();
        let mut children: BTreeMap<Rank, Vec<Rank>> = BTreeMap::new();
        for n in &self.nodes {
            match (n.rank, n.parent) {
                (0, None) => {}
                (0, Some(_)) => {
                    return Err(TransportError::Session("rank 0 cannot have a parent".into()));
                }
                (r, None) => {
                    return Err(TransportError::Session(format!("rank {r} has no parent")));
                }
                (r, Some(p)) => {
                    if !parents.contains_key(&p) {
                        return Err(TransportError::Session(format!("rank {r} reports to unknown rank {p}")));
                    }
                    // walk up to 0 to rule out cycles
                    let mut cur = p;
                    for _ in 0..=self.nodes.len() {
                        if cur == 0 {
                            break;
                        }
                        cur = parents[&cur].unwrap_or(0);
                        if cur == r {
                            return Err(TransportError::Session(format!("cycle through rank {r}")));
                        }
                    }
                    children.entry(p).or_default().push(r);
                }
            }
        }
        Ok(children)
    }
}

/// The endpoints owned by one rank.
#[derive(Debug, Default)]
pub struct NodeLinks {
    pub up: Option<Endpoint>,
    pub down: Option<Endpoint>,
}

/// Wires up every rank of `spec` inside this process. With the TCP
/// backend, each master group listens on an ephemeral loopback port.
pub fn establish(spec: &SessionSpec) -> Result<BTreeMap<Rank, NodeLinks>, TransportError> {
    let children = spec.children()?;
    match spec.backend {
        Backend::InProc => Ok(establish_inproc(spec, &children)),
        Backend::Tcp => establish_tcp(spec, &children),
    }
}

fn establish_inproc(spec: &SessionSpec, children: &BTreeMap<Rank, Vec<Rank>>) -> BTreeMap<Rank, NodeLinks> {
    let mut nodes: BTreeMap<Rank, NodeLinks> = spec.nodes.iter().map(|n| (n.rank, NodeLinks::default())).collect();
    for (&parent, kids) in children {
        let (down_tx, down_rx) = bounded(spec.inbox_capacity);
        let mut down = Endpoint::new(parent, Backend::InProc, spec.precision, down_rx);
        for &kid in kids {
            let (up_tx, up_rx) = bounded(spec.inbox_capacity);
            let mut up = Endpoint::new(kid, Backend::InProc, spec.precision, up_rx);
            up.links.insert(parent, Link::Chan(down_tx.clone()));
            down.links.insert(kid, Link::Chan(up_tx));
            nodes.get_mut(&kid).unwrap().up = Some(up);
        }
        nodes.get_mut(&parent).unwrap().down = Some(down);
    }
    nodes
}

fn establish_tcp(
    spec: &SessionSpec,
    children: &BTreeMap<Rank, Vec<Rank>>,
) -> Result<BTreeMap<Rank, NodeLinks>, TransportError> {
    let timeout = Duration::from_secs(30);
    let mut listeners = BTreeMap::new();
    for &parent in children.keys() {
        let l = TcpListener::bind("127.0.0.1:0")?;
        listeners.insert(parent, l);
    }
    let addrs: BTreeMap<Rank, SocketAddr> = listeners
        .iter()
        .map(|(&r, l)| l.local_addr().map(|a| (r, a)))
        .collect::<Result<_, _>>()?;

    let mut nodes: BTreeMap<Rank, NodeLinks> = spec.nodes.iter().map(|n| (n.rank, NodeLinks::default())).collect();
    thread::scope(|s| -> Result<(), TransportError> {
        let acceptors: Vec<_> = listeners
            .into_iter()
            .map(|(parent, listener)| {
                let kids = children[&parent].clone();
                let (precision, cap) = (spec.precision, spec.inbox_capacity);
                s.spawn(move || accept_children(parent, listener, &kids, precision, cap, timeout).map(|ep| (parent, ep)))
            })
            .collect();
        for n in &spec.nodes {
            if let Some(p) = n.parent {
                let ep = tcp_connect(n.rank, p, addrs[&p], spec.precision, spec.inbox_capacity, timeout)?;
                nodes.get_mut(&n.rank).unwrap().up = Some(ep);
            }
        }
        for a in acceptors {
            let (parent, ep) = a.join().expect("acceptor thread panicked")?;
            nodes.get_mut(&parent).unwrap().down = Some(ep);
        }
        Ok(())
    })?;
    Ok(nodes)
}

fn spawn_reader(from: Rank, mut stream: TcpStream, tx: Sender<Packet>) {
    thread::spawn(move || loop {
        let mut header = [0u8; HEADER_LEN];
        if stream.read_exact(&mut header).is_err() {
            let _ = tx.send(Packet { from, bytes: Vec::new() });
            return;
        }
        let hdr = match proto::decode_header(&header) {
            Ok(h) => h,
            Err(_) => {
                // the stream is out of sync; hand the header over so the
                // receiver sees the decode error, then stop reading
                let _ = tx.send(Packet {
                    from,
                    bytes: header.to_vec(),
                });
                return;
            }
        };
        let mut bytes = header.to_vec();
        let mut payload = Vec::new();
        let got = (&mut stream).take(hdr.payload_len).read_to_end(&mut payload);
        bytes.extend_from_slice(&payload);
        let complete = matches!(got, Ok(n) if n as u64 == hdr.payload_len);
        if tx.send(Packet { from, bytes }).is_err() || !complete {
            return;
        }
    });
}

/// Accepts one connection per expected child on `listener`. Each child
/// opens with its rank as a little-endian `u32`.
pub fn accept_children(
    rank: Rank,
    listener: TcpListener,
    children: &[Rank],
    precision: WirePrecision,
    inbox_capacity: usize,
    timeout: Duration,
) -> Result<Endpoint, TransportError> {
    let (tx, rx) = bounded(inbox_capacity);
    let mut ep = Endpoint::new(rank, Backend::Tcp, precision, rx);
    let expected: BTreeSet<Rank> = children.iter().copied().collect();
    let deadline = Instant::now() + timeout;
    listener.set_nonblocking(true)?;
    while ep.links.len() < expected.len() {
        match listener.accept() {
            Ok((mut stream, _)) => {
                stream.set_nonblocking(false)?;
                let mut pre = [0u8; 4];
                stream.set_read_timeout(Some(timeout))?;
                stream.read_exact(&mut pre)?;
                stream.set_read_timeout(None)?;
                let child = Rank::from_le_bytes(pre);
                if !expected.contains(&child) {
                    return Err(TransportError::Session(format!("unexpected rank {child} connected to {rank}")));
                }
                if ep.links.contains_key(&child) {
                    return Err(TransportError::RankCollision(child));
                }
                stream.set_nodelay(true)?;
                spawn_reader(child, stream.try_clone()?, tx.clone());
                ep.links.insert(child, Link::Tcp(stream));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if Instant::now() > deadline {
                    return Err(TransportError::Timeout);
                }
                thread::sleep(Duration::from_millis(2));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(ep)
}

/// Binds `addr` and waits for every child to connect.
pub fn tcp_listen(
    rank: Rank,
    addr: SocketAddr,
    children: &[Rank],
    precision: WirePrecision,
    timeout: Duration,
) -> Result<Endpoint, TransportError> {
    let listener = TcpListener::bind(addr)?;
    accept_children(rank, listener, children, precision, DEFAULT_INBOX_CAPACITY, timeout)
}

/// Connects to the parent at `addr`, retrying until `timeout`.
pub fn tcp_connect(
    rank: Rank,
    parent: Rank,
    addr: SocketAddr,
    precision: WirePrecision,
    inbox_capacity: usize,
    timeout: Duration,
) -> Result<Endpoint, TransportError> {
    let deadline = Instant::now() + timeout;
    let mut stream = loop {
        match TcpStream::connect(addr) {
            Ok(s) => break s,
            Err(e) if Instant::now() < deadline => {
                let _ = e;
                thread::sleep(CONNECT_RETRY);
            }
            Err(_) => return Err(TransportError::Timeout),
        }
    };
    stream.set_nodelay(true)?;
    stream.write_all(&rank.to_le_bytes())?;
    let (tx, rx) = bounded(inbox_capacity);
    spawn_reader(parent, stream.try_clone()?, tx);
    let mut ep = Endpoint::new(rank, Backend::Tcp, precision, rx);
    ep.links.insert(parent, Link::Tcp(stream));
    Ok(ep)
}
