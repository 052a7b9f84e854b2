//! Datagram transports: real UDP sockets and an in-process lossy link.
//!
//! The simulated link draws every loss and jitter decision from one seeded
//! RNG, so a run is reproducible as long as the caller's task schedule is.
//! Each (src, dst) pair is forwarded by one task, which keeps delivery in
//! send order for that pair.

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::net::UdpSocket;
use tokio::sync::mpsc;
use tokio::time::Instant;

use super::CoapError;

pub const DEFAULT_MTU: usize = 1152;
pub const DEFAULT_PORT: u16 = 5683;

#[derive(Clone, Debug, PartialEq)]
pub struct LinkConfig {
    pub loss_probability: f64,
    /// Fixed one-way latency.
    pub latency: Duration,
    /// Uniform extra latency in `[0, jitter]`.
    pub jitter: Duration,
    pub mtu: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            loss_probability: 0.0,
            latency: Duration::from_millis(20),
            jitter: Duration::ZERO,
            mtu: DEFAULT_MTU,
        }
    }
}

impl LinkConfig {
    pub fn lossy(loss_probability: f64) -> LinkConfig {
        LinkConfig {
            loss_probability,
            ..LinkConfig::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Datagram {
    pub src: SocketAddr,
    pub dst: SocketAddr,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fate {
    Delivered,
    Lost,
    Blocked,
    NoRoute,
}

/// One captured send attempt on the simulated link.
#[derive(Clone, Debug)]
pub struct CaptureRecord {
    /// Time since the network was created.
    pub at: Duration,
    pub src: SocketAddr,
    pub dst: SocketAddr,
    pub len: usize,
    pub fate: Fate,
}

struct NetInner {
    config: LinkConfig,
    rng: ChaCha8Rng,
    origin: Instant,
    nodes: HashMap<SocketAddr, mpsc::UnboundedSender<Datagram>>,
    pairs: HashMap<(SocketAddr, SocketAddr), mpsc::UnboundedSender<(Instant, Datagram)>>,
    blocked: HashSet<SocketAddr>,
    capture: Vec<CaptureRecord>,
}

/// Shared in-process network. Cheap to clone.
#[derive(Clone)]
pub struct SimNetwork {
    inner: Arc<Mutex<NetInner>>,
}

impl SimNetwork {
    pub fn new(config: LinkConfig, seed: u64) -> SimNetwork {
        SimNetwork {
            inner: Arc::new(Mutex::new(NetInner {
                config,
                rng: ChaCha8Rng::seed_from_u64(seed),
                origin: Instant::now(),
                nodes: HashMap::new(),
                pairs: HashMap::new(),
                blocked: HashSet::new(),
                capture: Vec::new(),
            })),
        }
    }

    /// Attach a node. Re-binding an address replaces the previous node, whose
    /// receiver then sees the channel closed.
    pub fn bind(&self, addr: SocketAddr) -> (TransportTx, TransportRx) {
        let (tx, rx) = mpsc::unbounded_channel();
        self.inner.lock().unwrap().nodes.insert(addr, tx);
        (
            TransportTx::Sim {
                net: self.clone(),
                local: addr,
            },
            TransportRx::Sim(rx),
        )
    }

    pub fn unbind(&self, addr: SocketAddr) {
        self.inner.lock().unwrap().nodes.remove(&addr);
    }

    pub fn set_config(&self, config: LinkConfig) {
        self.inner.lock().unwrap().config = config;
    }

    pub fn config(&self) -> LinkConfig {
        self.inner.lock().unwrap().config.clone()
    }

    /// Drop all traffic from and to `addr` until unblocked.
    pub fn block(&self, addr: SocketAddr) {
        self.inner.lock().unwrap().blocked.insert(addr);
    }

    pub fn unblock(&self, addr: SocketAddr) {
        self.inner.lock().unwrap().blocked.remove(&addr);
    }

    pub fn capture(&self) -> Vec<CaptureRecord> {
        self.inner.lock().unwrap().capture.clone()
    }

    pub fn clear_capture(&self) {
        self.inner.lock().unwrap().capture.clear();
    }

    pub fn elapsed(&self) -> Duration {
        self.inner.lock().unwrap().origin.elapsed()
    }

    fn send(&self, src: SocketAddr, dst: SocketAddr, bytes: Vec<u8>) -> Result<(), CoapError> {
        let mut inner = self.inner.lock().unwrap();
        if bytes.len() > inner.config.mtu {
            return Err(CoapError::Oversize(bytes.len()));
        }
        let at = inner.origin.elapsed();
        let len = bytes.len();
        let fate = if inner.blocked.contains(&src) || inner.blocked.contains(&dst) {
            Fate::Blocked
        } else if !inner.nodes.contains_key(&dst) {
            Fate::NoRoute
        } else {
            let p = inner.config.loss_probability;
            // one draw per datagram keeps the RNG stream independent of p
            let draw: f64 = inner.rng.random();
            if draw < p {
                Fate::Lost
            } else {
                Fate::Delivered
            }
        };
        inner.capture.push(CaptureRecord {
            at,
            src,
            dst,
            len,
            fate,
        });
        if fate != Fate::Delivered {
            return Ok(());
        }

        let jitter = if inner.config.jitter.is_zero() {
            Duration::ZERO
        } else {
            let j = inner.config.jitter.as_secs_f64();
            Duration::from_secs_f64(inner.rng.random_range(0.0..=j))
        };
        let delay = inner.config.latency + jitter;
        let dgram = Datagram { src, dst, bytes };
        if delay.is_zero() {
            if let Some(node) = inner.nodes.get(&dst) {
                let _ = node.send(dgram);
            }
            return Ok(());
        }

        let deliver_at = Instant::now() + delay;
        let pair = inner
            .pairs
            .entry((src, dst))
            .or_insert_with(|| {
                let (tx, mut rx) = mpsc::unbounded_channel::<(Instant, Datagram)>();
                let net = Arc::downgrade(&self.inner);
                tokio::spawn(async move {
                    while let Some((when, dgram)) = rx.recv().await {
                        tokio::time::sleep_until(when).await;
                        let Some(net) = net.upgrade() else { break };
                        let node = net.lock().unwrap().nodes.get(&dgram.dst).cloned();
                        if let Some(node) = node {
                            let _ = node.send(dgram);
                        }
                    }
                });
                tx
            })
            .clone();
        let _ = pair.send((deliver_at, dgram));
        Ok(())
    }
}

/// Sending half of a transport. Clone freely.
#[derive(Clone)]
pub enum TransportTx {
    Sim { net: SimNetwork, local: SocketAddr },
    Udp(Arc<UdpSocket>),
}

impl TransportTx {
    pub async fn send_to(&self, bytes: Vec<u8>, dst: SocketAddr) -> Result<(), CoapError> {
        match self {
            TransportTx::Sim { net, local } => net.send(*local, dst, bytes),
            TransportTx::Udp(sock) => sock
                .send_to(&bytes, dst)
                .await
                .map(|_| ())
                .map_err(|e| CoapError::Transport(e.to_string())),
        }
    }
}

/// Receiving half of a transport, owned by one endpoint loop.
pub enum TransportRx {
    Sim(mpsc::UnboundedReceiver<Datagram>),
    Udp(Arc<UdpSocket>),
}

impl TransportRx {
    /// Next datagram, `None` once the transport is gone.
    pub async fn recv(&mut self) -> Option<(Vec<u8>, SocketAddr)> {
        match self {
            TransportRx::Sim(rx) => rx.recv().await.map(|d| (d.bytes, d.src)),
            TransportRx::Udp(sock) => {
                let mut buf = vec![0u8; 2048];
                loop {
                    match sock.recv_from(&mut buf).await {
                        Ok((n, src)) => return Some((buf[..n].to_vec(), src)),
                        Err(e) => {
                            tracing::warn!("udp receive failed: {e}");
                            continue;
                        }
                    }
                }
            }
        }
    }
}

pub async fn bind_udp(addr: SocketAddr) -> Result<(TransportTx, TransportRx, SocketAddr), CoapError> {
    let sock = UdpSocket::bind(addr)
        .await
        .map_err(|e| CoapError::Transport(e.to_string()))?;
    let local = sock
        .local_addr()
        .map_err(|e| CoapError::Transport(e.to_string()))?;
    let sock = Arc::new(sock);
    Ok((TransportTx::Udp(sock.clone()), TransportRx::Udp(sock), local))
}
