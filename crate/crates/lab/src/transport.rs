//! Point-to-point byte transports between the workers of one run.
//!
//! Messages between a fixed pair of ranks arrive in send order; nothing is
//! promised across pairs. `send` never blocks on the receiver.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::error::TransportError;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// Frames larger than this are rejected on receive.
pub const MAX_FRAME: usize = 1 << 30;

pub trait Transport: Send {
    fn rank(&self) -> usize;
    fn size(&self) -> usize;
    fn send(&mut self, peer: usize, payload: Vec<u8>) -> Result<(), TransportError>;
    fn recv(&mut self, peer: usize) -> Result<Vec<u8>, TransportError>;
}

fn check_peer(peer: usize, size: usize) -> Result<(), TransportError> {
    if peer >= size {
        return Err(TransportError::BadPeer(peer));
    }
    Ok(())
}

fn recv_from(rx: &Receiver<Vec<u8>>, peer: usize, timeout: Duration) -> Result<Vec<u8>, TransportError> {
    rx.recv_timeout(timeout).map_err(|e| match e {
        RecvTimeoutError::Timeout => TransportError::Timeout { peer },
        RecvTimeoutError::Disconnected => TransportError::Disconnected { peer },
    })
}

/// Channel mesh between threads of one process.
pub struct InProcTransport {
    rank: usize,
    tx: Vec<Sender<Vec<u8>>>,
    rx: Vec<Receiver<Vec<u8>>>,
    timeout: Duration,
}

impl InProcTransport {
    /// One endpoint per rank, fully connected (including loopback).
    pub fn mesh(size: usize) -> Vec<Self> {
        Self::mesh_with_timeout(size, DEFAULT_TIMEOUT)
    }

    pub fn mesh_with_timeout(size: usize, timeout: Duration) -> Vec<Self> {
        // channel[src][dst]
        let mut senders: Vec<Vec<Sender<Vec<u8>>>> = (0..size).map(|_| Vec::with_capacity(size)).collect();
        let mut receivers: Vec<Vec<Option<Receiver<Vec<u8>>>>> =
            (0..size).map(|_| (0..size).map(|_| None).collect()).collect();
        for (src, row) in senders.iter_mut().enumerate() {
            for dst_rx in receivers.iter_mut() {
                let (tx, rx) = mpsc::channel();
                row.push(tx);
                dst_rx[src] = Some(rx);
            }
        }
        senders
            .into_iter()
            .zip(receivers)
            .enumerate()
            .map(|(rank, (tx, rx))| InProcTransport {
                rank,
                tx,
                rx: rx.into_iter().map(|r| r.expect("every pair wired")).collect(),
                timeout,
            })
            .collect()
    }
}

impl Transport for InProcTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.tx.len()
    }

    fn send(&mut self, peer: usize, payload: Vec<u8>) -> Result<(), TransportError> {
        check_peer(peer, self.size())?;
        if payload.is_empty() {
            return Err(TransportError::EmptyPayload);
        }
        self.tx[peer]
            .send(payload)
            .map_err(|_| TransportError::Disconnected { peer })
    }

    fn recv(&mut self, peer: usize) -> Result<Vec<u8>, TransportError> {
        check_peer(peer, self.size())?;
        recv_from(&self.rx[peer], peer, self.timeout)
    }
}

struct Link {
    outbox: Option<Sender<Vec<u8>>>,
    inbox: Receiver<Vec<u8>>,
    writer: Option<JoinHandle<()>>,
}

/// Full mesh of TCP connections, one per rank pair, with 4-byte
/// little-endian length framing. Each connection has a reader and a writer
/// thread so sends never wait for the peer.
pub struct TcpTransport {
    rank: usize,
    size: usize,
    links: Vec<Option<Link>>,
    loopback: VecDeque<Vec<u8>>,
    timeout: Duration,
}

impl TcpTransport {
    /// Bind `peers[rank]` and connect to every other address.
    pub fn connect(rank: usize, peers: &[SocketAddr], timeout: Duration) -> Result<Self, TransportError> {
        let addr = peers.get(rank).ok_or(TransportError::BadPeer(rank))?;
        let listener = TcpListener::bind(addr)?;
        Self::from_listener(rank, listener, peers, timeout)
    }

    /// Like [`Self::connect`] with an already bound listener, e.g. one on
    /// port 0 whose address was handed to the peers.
    ///
    /// Rank `i` dials every lower rank and accepts one connection from every
    /// higher rank; the dialer announces its rank as a u32 LE hello.
    pub fn from_listener(
        rank: usize,
        listener: TcpListener,
        peers: &[SocketAddr],
        timeout: Duration,
    ) -> Result<Self, TransportError> {
        let size = peers.len();
        check_peer(rank, size)?;
        let deadline = Instant::now() + timeout;
        let mut streams: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();

        for (peer, addr) in peers.iter().enumerate().take(rank) {
            let mut stream = dial(addr, deadline)?;
            stream.write_all(&(rank as u32).to_le_bytes())?;
            streams[peer] = Some(stream);
        }

        listener.set_nonblocking(true)?;
        let mut pending = size - rank - 1;
        while pending > 0 {
            match listener.accept() {
                Ok((mut stream, _)) => {
                    stream.set_nonblocking(false)?;
                    stream.set_read_timeout(Some(timeout))?;
                    let mut hello = [0u8; 4];
                    stream.read_exact(&mut hello)?;
                    stream.set_read_timeout(None)?;
                    let peer = u32::from_le_bytes(hello) as usize;
                    if peer <= rank || peer >= size || streams[peer].is_some() {
                        return Err(TransportError::Handshake(format!("unexpected hello from rank {peer}")));
                    }
                    streams[peer] = Some(stream);
                    pending -= 1;
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() > deadline {
                        return Err(TransportError::Handshake(format!("{pending} peers never connected")));
                    }
                    thread::sleep(Duration::from_millis(2));
                }
                Err(e) => return Err(e.into()),
            }
        }

        let links = streams
            .into_iter()
            .map(|s| s.map(spawn_link).transpose())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            rank,
            size,
            links,
            loopback: VecDeque::new(),
            timeout,
        })
    }

    fn link(&mut self, peer: usize) -> Result<&mut Link, TransportError> {
        check_peer(peer, self.size)?;
        self.links[peer].as_mut().ok_or(TransportError::BadPeer(peer))
    }
}

fn dial(addr: &SocketAddr, deadline: Instant) -> Result<TcpStream, TransportError> {
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() > deadline => return Err(e.into()),
            Err(_) => thread::sleep(Duration::from_millis(5)),
        }
    }
}

fn spawn_link(stream: TcpStream) -> Result<Link, TransportError> {
    stream.set_nodelay(true)?;
    let mut reader = stream.try_clone()?;
    let mut writer = stream;
    let (in_tx, inbox) = mpsc::channel::<Vec<u8>>();
    let (outbox, out_rx) = mpsc::channel::<Vec<u8>>();

    thread::spawn(move || {
        while let Ok(frame) = read_frame(&mut reader) {
            if in_tx.send(frame).is_err() {
                break;
            }
        }
    });
    let writer = thread::spawn(move || {
        for payload in out_rx {
            if write_frame(&mut writer, &payload).is_err() {
                break;
            }
        }
        let _ = writer.flush();
        let _ = writer.shutdown(Shutdown::Write);
    });
    Ok(Link {
        outbox: Some(outbox),
        inbox,
        writer: Some(writer),
    })
}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> Result<(), TransportError> {
    if payload.is_empty() {
        return Err(TransportError::EmptyPayload);
    }
    let len = u32::try_from(payload.len()).map_err(|_| TransportError::FrameTooLarge(payload.len()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(payload)?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<Vec<u8>, TransportError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len == 0 {
        return Err(TransportError::EmptyPayload);
    }
    if len > MAX_FRAME {
        return Err(TransportError::FrameTooLarge(len));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

impl Transport for TcpTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.size
    }

    fn send(&mut self, peer: usize, payload: Vec<u8>) -> Result<(), TransportError> {
        if payload.is_empty() {
            return Err(TransportError::EmptyPayload);
        }
        if peer == self.rank {
            self.loopback.push_back(payload);
            return Ok(());
        }
        let link = self.link(peer)?;
        link.outbox
            .as_ref()
            .expect("outbox lives until drop")
            .send(payload)
            .map_err(|_| TransportError::Disconnected { peer })
    }

    fn recv(&mut self, peer: usize) -> Result<Vec<u8>, TransportError> {
        if peer == self.rank {
            return self.loopback.pop_front().ok_or(TransportError::Timeout { peer });
        }
        let timeout = self.timeout;
        let link = self.link(peer)?;
        recv_from(&link.inbox, peer, timeout)
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        // flush queued frames before the process may exit
        for link in self.links.iter_mut().flatten() {
            link.outbox.take();
            if let Some(h) = link.writer.take() {
                let _ = h.join();
            }
        }
    }
}

/// Bind `n` listeners on 127.0.0.1 with OS-assigned ports.
pub fn local_listeners(n: usize) -> std::io::Result<(Vec<TcpListener>, Vec<SocketAddr>)> {
    let listeners = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<std::io::Result<Vec<_>>>()?;
    let addrs = listeners.iter().map(|l| l.local_addr()).collect::<std::io::Result<Vec<_>>>()?;
    Ok((listeners, addrs))
}
