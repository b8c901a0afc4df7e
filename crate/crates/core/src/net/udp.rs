//! Best-effort UDP transport for running chain nodes as separate processes.
//!
//! Data datagrams carry an 8-byte envelope ahead of the wire frame:
//!
//! ```text
//! 0xD1 | protocol (0 netcraq, 1 baseline) | reply-to IPv4 (4) | reply-to port (2)
//! ```
//!
//! A zero reply-to means "answer the sender". Nodes forwarding a request
//! fill in the original client so the replying node can answer it directly.
//! Datagrams starting with `{` are JSON control messages.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::node::{Action, Addr, Node, NodeMetrics, RoleUpdate};
use crate::wire::{Frame, ProtocolKind};

const DATA_MAGIC: u8 = 0xD1;
const ENVELOPE_LEN: usize = 8;
const MAX_DATAGRAM: usize = 2048;
/// Client endpoints seen by a node get addresses from here up.
const EPHEMERAL_BASE: u32 = 0x8000_0000;

#[derive(Debug, thiserror::Error)]
pub enum UdpError {
    #[error("socket: {0}")]
    Io(#[from] io::Error),

    #[error("malformed datagram: {0}")]
    Malformed(String),

    #[error("only IPv4 endpoints are supported, got {0}")]
    NotIpv4(SocketAddr),

    #[error("no response within {0:?}")]
    Timeout(Duration),

    #[error("node refused control message: {0}")]
    Refused(String),
}

/// Control-plane messages, JSON encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlMsg {
    RoleUpdate(RoleUpdate),
    Ping { seq: u64 },
    Pong { seq: u64, id: Addr },
    Metrics,
    MetricsReply { id: Addr, metrics: NodeMetrics, malformed: u64 },
    Ok,
    Error { reason: String },
}

/// Maps chain node addresses to sockets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AddressBook {
    nodes: BTreeMap<Addr, SocketAddr>,
}

impl AddressBook {
    /// Node `i` of `endpoints` gets address `i + 1`.
    pub fn from_endpoints(endpoints: &[SocketAddr]) -> Self {
        Self {
            nodes: endpoints
                .iter()
                .enumerate()
                .map(|(i, s)| (Addr(i as u32 + 1), *s))
                .collect(),
        }
    }

    pub fn insert(&mut self, addr: Addr, sock: SocketAddr) {
        self.nodes.insert(addr, sock);
    }

    pub fn get(&self, addr: Addr) -> Option<SocketAddr> {
        self.nodes.get(&addr).copied()
    }
}

fn v4(sock: SocketAddr) -> Result<SocketAddrV4, UdpError> {
    match sock {
        SocketAddr::V4(s) => Ok(s),
        other => Err(UdpError::NotIpv4(other)),
    }
}

/// Prefixes `frame` with the data envelope.
pub fn encode_datagram(frame: &Frame, reply_to: Option<SocketAddr>) -> Result<Vec<u8>, UdpError> {
    let reply = match reply_to {
        Some(s) => v4(s)?,
        None => SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, 0),
    };
    let payload = frame
        .encode()
        .map_err(|e| UdpError::Malformed(e.to_string()))?;
    let mut out = Vec::with_capacity(ENVELOPE_LEN + payload.len());
    out.push(DATA_MAGIC);
    out.push(match frame.protocol() {
        ProtocolKind::Netcraq => 0,
        ProtocolKind::Baseline => 1,
    });
    out.extend_from_slice(&reply.ip().octets());
    out.extend_from_slice(&reply.port().to_be_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Splits a data datagram into its frame and reply-to address.
pub fn decode_datagram(bytes: &[u8]) -> Result<(Frame, Option<SocketAddr>), UdpError> {
    if bytes.len() < ENVELOPE_LEN || bytes[0] != DATA_MAGIC {
        return Err(UdpError::Malformed("missing data envelope".into()));
    }
    let protocol = match bytes[1] {
        0 => ProtocolKind::Netcraq,
        1 => ProtocolKind::Baseline,
        p => return Err(UdpError::Malformed(format!("unknown protocol byte {p}"))),
    };
    let ip = Ipv4Addr::new(bytes[2], bytes[3], bytes[4], bytes[5]);
    let port = u16::from_be_bytes([bytes[6], bytes[7]]);
    let reply = (port != 0).then(|| SocketAddr::V4(SocketAddrV4::new(ip, port)));
    let frame = Frame::decode(protocol, &bytes[ENVELOPE_LEN..])
        .map_err(|e| UdpError::Malformed(e.to_string()))?;
    Ok((frame, reply))
}

struct Server {
    socket: UdpSocket,
    node: Arc<Mutex<Node>>,
    book: AddressBook,
    clients: HashMap<SocketAddr, Addr>,
    client_socks: HashMap<Addr, SocketAddr>,
    malformed: Arc<AtomicU64>,
}

impl Server {
    fn client_addr(&mut self, sock: SocketAddr) -> Addr {
        if let Some(a) = self.clients.get(&sock) {
            return *a;
        }
        let a = Addr(EPHEMERAL_BASE + self.clients.len() as u32);
        self.clients.insert(sock, a);
        self.client_socks.insert(a, sock);
        a
    }

    fn serve_one(&mut self, buf: &[u8], src: SocketAddr) -> io::Result<()> {
        if buf.first() == Some(&b'{') {
            return self.control(buf, src);
        }
        let (frame, reply_to) = match decode_datagram(buf) {
            Ok(x) => x,
            Err(_) => {
                self.malformed.fetch_add(1, Ordering::Relaxed);
                return Ok(());
            }
        };
        let client_sock = reply_to.unwrap_or(src);
        let client = self.client_addr(client_sock);
        let (actions, members) = {
            let mut node = self.node.lock().expect("node lock");
            let actions = node.handle(&frame, client);
            (actions, node.ctx().multicast_members.clone())
        };
        for action in actions {
            let targets: Vec<(SocketAddr, Frame, Option<SocketAddr>)> = match action {
                Action::Send { dest, frame } => {
                    self.book.get(dest).map(|s| (s, frame, Some(client_sock))).into_iter().collect()
                }
                Action::Reply { client, frame } => self
                    .client_socks
                    .get(&client)
                    .map(|s| (*s, frame, None))
                    .into_iter()
                    .collect(),
                Action::Multicast { frame } => members
                    .iter()
                    .filter_map(|m| self.book.get(*m))
                    .map(|s| (s, frame.clone(), Some(client_sock)))
                    .collect(),
                Action::Drop { .. } => Vec::new(),
            };
            for (dest, frame, reply) in targets {
                if let Ok(bytes) = encode_datagram(&frame, reply) {
                    self.socket.send_to(&bytes, dest)?;
                }
            }
        }
        Ok(())
    }

    fn control(&mut self, buf: &[u8], src: SocketAddr) -> io::Result<()> {
        let reply = match serde_json::from_slice::<ControlMsg>(buf) {
            Ok(ControlMsg::RoleUpdate(u)) => match self.node.lock().expect("node lock").apply_role_update(u) {
                Ok(()) => ControlMsg::Ok,
                Err(e) => ControlMsg::Error { reason: e.to_string() },
            },
            Ok(ControlMsg::Ping { seq }) => ControlMsg::Pong {
                seq,
                id: self.node.lock().expect("node lock").addr(),
            },
            Ok(ControlMsg::Metrics) => {
                let node = self.node.lock().expect("node lock");
                ControlMsg::MetricsReply {
                    id: node.addr(),
                    metrics: node.metrics().clone(),
                    malformed: self.malformed.load(Ordering::Relaxed),
                }
            }
            Ok(other) => ControlMsg::Error {
                reason: format!("unexpected control message {other:?}"),
            },
            Err(e) => {
                self.malformed.fetch_add(1, Ordering::Relaxed);
                ControlMsg::Error { reason: e.to_string() }
            }
        };
        let bytes = serde_json::to_vec(&reply).expect("control messages serialise");
        self.socket.send_to(&bytes, src)?;
        Ok(())
    }
}

/// A node serving on a UDP socket from a background thread.
pub struct UdpNode {
    local: SocketAddr,
    node: Arc<Mutex<Node>>,
    stop: Arc<AtomicBool>,
    malformed: Arc<AtomicU64>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl UdpNode {
    /// Binds `bind` and starts serving `node`.
    pub fn spawn(node: Node, bind: SocketAddr, book: AddressBook) -> Result<Self, UdpError> {
        Self::serve(node, UdpSocket::bind(bind)?, book)
    }

    /// Starts serving `node` on an already bound socket.
    pub fn serve(node: Node, socket: UdpSocket, book: AddressBook) -> Result<Self, UdpError> {
        socket.set_read_timeout(Some(Duration::from_millis(50)))?;
        let local = socket.local_addr()?;
        let node = Arc::new(Mutex::new(node));
        let stop = Arc::new(AtomicBool::new(false));
        let malformed = Arc::new(AtomicU64::new(0));
        let mut server = Server {
            socket,
            node: Arc::clone(&node),
            book,
            clients: HashMap::new(),
            client_socks: HashMap::new(),
            malformed: Arc::clone(&malformed),
        };
        let stop_flag = Arc::clone(&stop);
        let thread = std::thread::spawn(move || {
            let mut buf = [0u8; MAX_DATAGRAM];
            while !stop_flag.load(Ordering::Relaxed) {
                match server.socket.recv_from(&mut buf) {
                    Ok((n, src)) => server.serve_one(&buf[..n], src)?,
                    Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                    Err(e) if e.kind() == io::ErrorKind::ConnectionReset => {}
                    Err(e) => return Err(e),
                }
            }
            Ok(())
        });
        Ok(Self {
            local,
            node,
            stop,
            malformed,
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    pub fn node(&self) -> Arc<Mutex<Node>> {
        Arc::clone(&self.node)
    }

    pub fn malformed(&self) -> u64 {
        self.malformed.load(Ordering::Relaxed)
    }

    /// Stops the serving thread and waits for it.
    pub fn stop(mut self) -> io::Result<()> {
        self.shutdown()
    }

    /// Blocks until the serving thread exits.
    pub fn wait(mut self) -> io::Result<()> {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }

    fn shutdown(&mut self) -> io::Result<()> {
        self.stop.store(true, Ordering::Relaxed);
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for UdpNode {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

/// Blocking request/response helper for clients and the controller.
pub struct UdpClient {
    socket: UdpSocket,
    timeout: Duration,
}

impl UdpClient {
    pub fn bind(bind: SocketAddr, timeout: Duration) -> Result<Self, UdpError> {
        let socket = UdpSocket::bind(bind)?;
        socket.set_read_timeout(Some(timeout))?;
        Ok(Self { socket, timeout })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, UdpError> {
        Ok(self.socket.local_addr()?)
    }

    /// Sends a request frame and waits for the first data reply.
    pub fn request(&self, dest: SocketAddr, frame: &Frame) -> Result<Frame, UdpError> {
        self.socket.send_to(&encode_datagram(frame, None)?, dest)?;
        let mut buf = [0u8; MAX_DATAGRAM];
        loop {
            let n = self.recv(&mut buf)?;
            if buf[0] != b'{' {
                return Ok(decode_datagram(&buf[..n])?.0);
            }
        }
    }

    pub fn control(&self, dest: SocketAddr, msg: &ControlMsg) -> Result<ControlMsg, UdpError> {
        let bytes = serde_json::to_vec(msg).map_err(|e| UdpError::Malformed(e.to_string()))?;
        self.socket.send_to(&bytes, dest)?;
        let mut buf = [0u8; MAX_DATAGRAM];
        loop {
            let n = self.recv(&mut buf)?;
            if buf[0] == b'{' {
                return serde_json::from_slice(&buf[..n]).map_err(|e| UdpError::Malformed(e.to_string()));
            }
        }
    }

    /// Installs a role update, failing if the node refuses it.
    pub fn install(&self, dest: SocketAddr, update: RoleUpdate) -> Result<(), UdpError> {
        match self.control(dest, &ControlMsg::RoleUpdate(update))? {
            ControlMsg::Ok => Ok(()),
            ControlMsg::Error { reason } => Err(UdpError::Refused(reason)),
            other => Err(UdpError::Malformed(format!("unexpected reply {other:?}"))),
        }
    }

    pub fn send_raw(&self, dest: SocketAddr, bytes: &[u8]) -> Result<(), UdpError> {
        self.socket.send_to(bytes, dest)?;
        Ok(())
    }

    fn recv(&self, buf: &mut [u8]) -> Result<usize, UdpError> {
        match self.socket.recv_from(buf) {
            Ok((0, _)) => Err(UdpError::Malformed("empty datagram".into())),
            Ok((n, _)) => Ok(n),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                Err(UdpError::Timeout(self.timeout))
            }
            Err(e) => Err(e.into()),
        }
    }
}
