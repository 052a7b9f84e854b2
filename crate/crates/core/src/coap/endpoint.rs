//! A CoAP endpoint: one receive task per socket, request dispatch through an
//! inbox channel, and blocking-style exchanges with retransmission.
//!
//! Responses are matched to requests by token, so a request may be answered
//! piggybacked on the ACK or later as a separate response. Incoming
//! confirmable and non-confirmable messages are deduplicated by
//! (peer, message id) for one exchange lifetime; a duplicate gets the cached
//! reply re-sent.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::sync::{mpsc, oneshot};
use tokio::task::AbortHandle;
use tokio::time::{timeout, Instant};

use super::link::{SimNetwork, TransportRx, TransportTx};
use super::message::{option, Code, CoapMessage, MessageType};
use super::{CoapError, TransmissionParams};

/// Counters for one confirmable transmission.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExchangeStats {
    /// Datagrams sent, first transmission included.
    pub transmissions: u32,
    /// Timeouts waited before each retransmission.
    pub intervals: Vec<Duration>,
}

/// A request delivered to the endpoint owner. Dropping it without responding
/// answers 5.00.
pub struct IncomingRequest {
    pub peer: SocketAddr,
    pub message: CoapMessage,
    responder: oneshot::Sender<CoapMessage>,
}

impl IncomingRequest {
    pub fn respond(self, response: CoapMessage) {
        let _ = self.responder.send(response);
    }

    /// Respond with a bare code.
    pub fn respond_code(self, code: Code) {
        let resp = CoapMessage::response_to(&self.message, code);
        self.respond(resp);
    }
}

#[derive(Debug)]
enum Event {
    Ack,
    Reset,
    Response(CoapMessage),
}

struct ObservationSink {
    peer: SocketAddr,
    tx: mpsc::UnboundedSender<CoapMessage>,
    last_seq: Option<u32>,
}

struct DedupEntry {
    reply: Option<Vec<u8>>,
}

struct State {
    rng: ChaCha8Rng,
    next_mid: u16,
    next_token: u32,
    acks: HashMap<(SocketAddr, u16), mpsc::UnboundedSender<Event>>,
    responses: HashMap<Vec<u8>, (SocketAddr, mpsc::UnboundedSender<Event>)>,
    observations: HashMap<Vec<u8>, ObservationSink>,
    dedup: HashMap<(SocketAddr, u16), DedupEntry>,
    dedup_order: VecDeque<(Instant, (SocketAddr, u16))>,
}

struct Inner {
    tx: TransportTx,
    local: SocketAddr,
    params: TransmissionParams,
    radio: AtomicBool,
    state: Mutex<State>,
    requests: mpsc::UnboundedSender<IncomingRequest>,
    task: Mutex<Option<AbortHandle>>,
}

#[derive(Clone)]
pub struct CoapEndpoint {
    inner: Arc<Inner>,
}

impl CoapEndpoint {
    /// Start an endpoint on an already-bound transport.
    pub fn start(
        tx: TransportTx,
        rx: TransportRx,
        local: SocketAddr,
        params: TransmissionParams,
        seed: u64,
    ) -> (CoapEndpoint, mpsc::UnboundedReceiver<IncomingRequest>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let next_mid = rng.random();
        let next_token = rng.random();
        let (req_tx, req_rx) = mpsc::unbounded_channel();
        let inner = Arc::new(Inner {
            tx,
            local,
            params,
            radio: AtomicBool::new(true),
            state: Mutex::new(State {
                rng,
                next_mid,
                next_token,
                acks: HashMap::new(),
                responses: HashMap::new(),
                observations: HashMap::new(),
                dedup: HashMap::new(),
                dedup_order: VecDeque::new(),
            }),
            requests: req_tx,
            task: Mutex::new(None),
        });
        let handle = tokio::spawn(receive_loop(inner.clone(), rx));
        *inner.task.lock().unwrap() = Some(handle.abort_handle());
        (CoapEndpoint { inner }, req_rx)
    }

    pub fn sim(
        net: &SimNetwork,
        addr: SocketAddr,
        params: TransmissionParams,
        seed: u64,
    ) -> (CoapEndpoint, mpsc::UnboundedReceiver<IncomingRequest>) {
        let (tx, rx) = net.bind(addr);
        CoapEndpoint::start(tx, rx, addr, params, seed)
    }

    pub async fn udp(
        bind: SocketAddr,
        params: TransmissionParams,
        seed: u64,
    ) -> Result<(CoapEndpoint, mpsc::UnboundedReceiver<IncomingRequest>), CoapError> {
        let (tx, rx, local) = super::link::bind_udp(bind).await?;
        Ok(CoapEndpoint::start(tx, rx, local, params, seed))
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.inner.local
    }

    pub fn params(&self) -> &TransmissionParams {
        &self.inner.params
    }

    /// Stop receiving and release the simulated address, if any.
    pub fn shutdown(&self) {
        if let Some(task) = self.inner.task.lock().unwrap().take() {
            task.abort();
        }
        if let TransportTx::Sim { net, local } = &self.inner.tx {
            net.unbind(*local);
        }
        let mut st = self.inner.state.lock().unwrap();
        st.acks.clear();
        st.responses.clear();
        st.observations.clear();
    }

    /// Radio off: nothing is sent and inbound datagrams are discarded.
    pub fn set_radio(&self, on: bool) {
        self.inner.radio.store(on, Ordering::SeqCst);
    }

    pub fn radio_on(&self) -> bool {
        self.inner.radio.load(Ordering::SeqCst)
    }

    pub fn new_token(&self) -> Vec<u8> {
        self.inner.new_token()
    }

    /// Send a request and wait for its response.
    pub async fn exchange(&self, peer: SocketAddr, request: CoapMessage) -> Result<CoapMessage, CoapError> {
        self.exchange_with_stats(peer, request).await.map(|(r, _)| r)
    }

    /// Like [`exchange`](Self::exchange) but also reports how many
    /// transmissions the confirmable request needed.
    pub async fn exchange_with_stats(
        &self,
        peer: SocketAddr,
        mut request: CoapMessage,
    ) -> Result<(CoapMessage, ExchangeStats), CoapError> {
        if request.token.is_empty() {
            request.token = self.inner.new_token();
        }
        request.message_id = self.inner.new_mid();
        let (ev_tx, mut ev_rx) = mpsc::unbounded_channel();
        let _guard = self.inner.register(peer, &request, ev_tx, true);
        let bytes = request.encode()?;
        let params = &self.inner.params;

        match request.msg_type {
            MessageType::Con => {
                let (outcome, stats) = self.inner.transmit_con(peer, &bytes, &mut ev_rx).await?;
                match outcome {
                    Event::Response(resp) => Ok((resp, stats)),
                    Event::Reset => Err(CoapError::Reset),
                    Event::Ack => {
                        // empty ACK: the response follows separately
                        match timeout(params.exchange_lifetime(), wait_response(&mut ev_rx)).await {
                            Ok(Some(Event::Response(resp))) => Ok((resp, stats)),
                            Ok(Some(Event::Reset)) => Err(CoapError::Reset),
                            Ok(_) => Err(CoapError::Closed),
                            Err(_) => Err(CoapError::Unreachable),
                        }
                    }
                }
            }
            MessageType::Non => {
                self.inner.send_raw(peer, bytes).await?;
                let stats = ExchangeStats {
                    transmissions: 1,
                    intervals: Vec::new(),
                };
                match timeout(params.max_transmit_wait(), wait_response(&mut ev_rx)).await {
                    Ok(Some(Event::Response(resp))) => Ok((resp, stats)),
                    Ok(Some(Event::Reset)) => Err(CoapError::Reset),
                    Ok(_) => Err(CoapError::Closed),
                    Err(_) => Err(CoapError::Unreachable),
                }
            }
            _ => Err(CoapError::Response(request.code)),
        }
    }

    /// Send a confirmable message that expects only an acknowledgement
    /// (notifications, separate responses). The token is left as given.
    pub async fn send_confirmable(&self, peer: SocketAddr, mut msg: CoapMessage) -> Result<ExchangeStats, CoapError> {
        msg.msg_type = MessageType::Con;
        msg.message_id = self.inner.new_mid();
        let (ev_tx, mut ev_rx) = mpsc::unbounded_channel();
        let _guard = self.inner.register(peer, &msg, ev_tx, false);
        let bytes = msg.encode()?;
        let (outcome, stats) = self.inner.transmit_con(peer, &bytes, &mut ev_rx).await?;
        match outcome {
            Event::Reset => Err(CoapError::Reset),
            _ => Ok(stats),
        }
    }

    /// Fire-and-forget non-confirmable message.
    pub async fn send_non(&self, peer: SocketAddr, mut msg: CoapMessage) -> Result<(), CoapError> {
        msg.msg_type = MessageType::Non;
        msg.message_id = self.inner.new_mid();
        let bytes = msg.encode()?;
        self.inner.send_raw(peer, bytes).await
    }

    /// Register an observation: GET with Observe=0. Returns the initial
    /// response and a stream of later notifications.
    pub async fn observe(&self, peer: SocketAddr, mut request: CoapMessage) -> Result<(CoapMessage, Observation), CoapError> {
        if request.token.is_empty() {
            request.token = self.inner.new_token();
        }
        request.set_uint_option(option::OBSERVE, 0);
        let token = request.token.clone();
        let (tx, rx) = mpsc::unbounded_channel();
        self.inner.state.lock().unwrap().observations.insert(
            token.clone(),
            ObservationSink {
                peer,
                tx,
                last_seq: None,
            },
        );
        let result = self.exchange(peer, request.clone()).await;
        let resp = match result {
            Ok(resp) if resp.code.is_success() && resp.observe().is_some() => resp,
            other => {
                self.inner.state.lock().unwrap().observations.remove(&token);
                return match other {
                    Ok(resp) if resp.code.is_success() => Err(CoapError::NotObservable),
                    Ok(resp) => Err(CoapError::Response(resp.code)),
                    Err(e) => Err(e),
                };
            }
        };
        if let Some(sink) = self.inner.state.lock().unwrap().observations.get_mut(&token) {
            sink.last_seq = resp.observe();
        }
        let mut cancel = request;
        cancel.token = token.clone();
        cancel.set_uint_option(option::OBSERVE, 1);
        Ok((
            resp,
            Observation {
                endpoint: self.clone(),
                peer,
                token,
                rx,
                cancel_request: cancel,
            },
        ))
    }
}

/// Observer side of an active observation.
pub struct Observation {
    endpoint: CoapEndpoint,
    peer: SocketAddr,
    token: Vec<u8>,
    rx: mpsc::UnboundedReceiver<CoapMessage>,
    cancel_request: CoapMessage,
}

impl Observation {
    pub async fn next(&mut self) -> Option<CoapMessage> {
        self.rx.recv().await
    }

    pub fn token(&self) -> &[u8] {
        &self.token
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    /// Stop local delivery and deregister at the notifier (best effort).
    pub async fn cancel(self) {
        let endpoint = self.endpoint.clone();
        let peer = self.peer;
        let request = self.cancel_request.clone();
        drop(self);
        let _ = endpoint.exchange(peer, request).await;
    }
}

impl Drop for Observation {
    // later notifications for this token are answered with RST
    fn drop(&mut self) {
        if let Ok(mut st) = self.endpoint.inner.state.lock() {
            st.observations.remove(&self.token);
        }
    }
}

async fn wait_response(rx: &mut mpsc::UnboundedReceiver<Event>) -> Option<Event> {
    loop {
        match rx.recv().await? {
            Event::Ack => continue,
            other => return Some(other),
        }
    }
}

/// Removes waiter registrations when an exchange finishes or is dropped.
struct PendingGuard {
    inner: Arc<Inner>,
    ack_key: (SocketAddr, u16),
    token: Option<Vec<u8>>,
}

impl Drop for PendingGuard {
    fn drop(&mut self) {
        let mut st = self.inner.state.lock().unwrap();
        st.acks.remove(&self.ack_key);
        if let Some(token) = &self.token {
            st.responses.remove(token);
        }
    }
}

/// RFC 7641 freshness: is `new` newer than `old` in 24-bit sequence space?
fn is_fresher(old: u32, new: u32) -> bool {
    const HALF: u32 = 1 << 23;
    (old < new && new - old < HALF) || (old > new && old - new > HALF)
}

impl Inner {
    fn new_mid(&self) -> u16 {
        let mut st = self.state.lock().unwrap();
        let mid = st.next_mid;
        st.next_mid = st.next_mid.wrapping_add(1);
        mid
    }

    fn new_token(&self) -> Vec<u8> {
        let mut st = self.state.lock().unwrap();
        let t = st.next_token;
        st.next_token = st.next_token.wrapping_add(1);
        t.to_be_bytes().to_vec()
    }

    fn register(
        self: &Arc<Self>,
        peer: SocketAddr,
        msg: &CoapMessage,
        tx: mpsc::UnboundedSender<Event>,
        expect_response: bool,
    ) -> PendingGuard {
        let mut st = self.state.lock().unwrap();
        let ack_key = (peer, msg.message_id);
        st.acks.insert(ack_key, tx.clone());
        let token = if expect_response {
            st.responses.insert(msg.token.clone(), (peer, tx));
            Some(msg.token.clone())
        } else {
            None
        };
        PendingGuard {
            inner: self.clone(),
            ack_key,
            token,
        }
    }

    async fn send_raw(&self, peer: SocketAddr, bytes: Vec<u8>) -> Result<(), CoapError> {
        if !self.radio.load(Ordering::SeqCst) {
            return Err(CoapError::Sleeping);
        }
        self.tx.send_to(bytes, peer).await
    }

    /// Retransmit with exponential backoff until an ACK, RST or response
    /// arrives, or give up after `max_retransmit` retransmissions.
    async fn transmit_con(
        &self,
        peer: SocketAddr,
        bytes: &[u8],
        events: &mut mpsc::UnboundedReceiver<Event>,
    ) -> Result<(Event, ExchangeStats), CoapError> {
        let mut wait = {
            let mut st = self.state.lock().unwrap();
            self.params.initial_timeout(&mut st.rng)
        };
        let mut stats = ExchangeStats::default();
        for attempt in 0..=self.params.max_retransmit {
            self.send_raw(peer, bytes.to_vec()).await?;
            stats.transmissions += 1;
            match timeout(wait, events.recv()).await {
                Ok(Some(ev)) => return Ok((ev, stats)),
                Ok(None) => return Err(CoapError::Closed),
                Err(_) => {
                    if attempt == self.params.max_retransmit {
                        break;
                    }
                    stats.intervals.push(wait);
                    wait *= 2;
                }
            }
        }
        Err(CoapError::Unreachable)
    }

    /// Returns true if the message was seen before (and re-answers it).
    async fn check_duplicate(&self, peer: SocketAddr, mid: u16) -> bool {
        let reply = {
            let mut st = self.state.lock().unwrap();
            let now = Instant::now();
            let lifetime = self.params.exchange_lifetime();
            while let Some((at, key)) = st.dedup_order.front().cloned() {
                if now.duration_since(at) < lifetime {
                    break;
                }
                st.dedup_order.pop_front();
                st.dedup.remove(&key);
            }
            match st.dedup.get(&(peer, mid)) {
                Some(entry) => Some(entry.reply.clone()),
                None => {
                    st.dedup.insert((peer, mid), DedupEntry { reply: None });
                    st.dedup_order.push_back((now, (peer, mid)));
                    None
                }
            }
        };
        match reply {
            Some(Some(bytes)) => {
                let _ = self.send_raw(peer, bytes).await;
                true
            }
            Some(None) => true,
            None => false,
        }
    }

    fn remember_reply(&self, peer: SocketAddr, mid: u16, bytes: &[u8]) {
        if let Some(entry) = self.state.lock().unwrap().dedup.get_mut(&(peer, mid)) {
            entry.reply = Some(bytes.to_vec());
        }
    }

    async fn reply_empty(&self, peer: SocketAddr, incoming: &CoapMessage, reset: bool) {
        let msg = if reset {
            CoapMessage::reset(incoming.message_id)
        } else {
            CoapMessage::empty_ack(incoming.message_id)
        };
        if let Ok(bytes) = msg.encode() {
            self.remember_reply(peer, incoming.message_id, &bytes);
            let _ = self.send_raw(peer, bytes).await;
        }
    }

    async fn handle(self: &Arc<Self>, msg: CoapMessage, peer: SocketAddr) {
        match msg.msg_type {
            MessageType::Ack | MessageType::Rst => {
                let waiter = self
                    .state
                    .lock()
                    .unwrap()
                    .acks
                    .get(&(peer, msg.message_id))
                    .cloned();
                if let Some(w) = waiter {
                    let ev = if msg.msg_type == MessageType::Rst {
                        Event::Reset
                    } else if msg.code.is_empty() {
                        Event::Ack
                    } else {
                        Event::Response(msg)
                    };
                    let _ = w.send(ev);
                }
            }
            MessageType::Con | MessageType::Non => {
                let con = msg.msg_type == MessageType::Con;
                if msg.code.is_empty() {
                    if con {
                        // CoAP ping
                        if let Ok(bytes) = CoapMessage::reset(msg.message_id).encode() {
                            let _ = self.send_raw(peer, bytes).await;
                        }
                    }
                    return;
                }
                if self.check_duplicate(peer, msg.message_id).await {
                    return;
                }
                if msg.code.is_request() {
                    self.dispatch_request(msg, peer, con).await;
                } else if msg.code.is_response() {
                    self.handle_response_message(msg, peer, con).await;
                } else if con {
                    self.reply_empty(peer, &msg, true).await;
                }
            }
        }
    }

    async fn handle_response_message(&self, msg: CoapMessage, peer: SocketAddr, con: bool) {
        enum Route {
            Exchange(mpsc::UnboundedSender<Event>),
            Notification(Option<mpsc::UnboundedSender<CoapMessage>>),
            Unknown,
        }
        let route = {
            let mut st = self.state.lock().unwrap();
            if let Some((p, w)) = st.responses.get(&msg.token) {
                if *p == peer {
                    Route::Exchange(w.clone())
                } else {
                    Route::Unknown
                }
            } else if let Some(sink) = st.observations.get_mut(&msg.token) {
                if sink.peer != peer {
                    Route::Unknown
                } else {
                    let seq = msg.observe();
                    let fresh = match (sink.last_seq, seq) {
                        (Some(old), Some(new)) => is_fresher(old, new),
                        _ => true,
                    };
                    if fresh {
                        if seq.is_some() {
                            sink.last_seq = seq;
                        }
                        Route::Notification(Some(sink.tx.clone()))
                    } else {
                        Route::Notification(None)
                    }
                }
            } else {
                Route::Unknown
            }
        };
        match route {
            Route::Exchange(w) => {
                if con {
                    self.reply_empty(peer, &msg, false).await;
                }
                let _ = w.send(Event::Response(msg));
            }
            Route::Notification(tx) => {
                if con {
                    self.reply_empty(peer, &msg, false).await;
                }
                if let Some(tx) = tx {
                    let _ = tx.send(msg);
                }
            }
            Route::Unknown => {
                // unknown token: reject so the sender drops any observation
                self.reply_empty(peer, &msg, true).await;
            }
        }
    }

    async fn dispatch_request(self: &Arc<Self>, msg: CoapMessage, peer: SocketAddr, con: bool) {
        let (resp_tx, mut resp_rx) = oneshot::channel();
        let request_token = msg.token.clone();
        let request_mid = msg.message_id;
        let incoming = IncomingRequest {
            peer,
            message: msg,
            responder: resp_tx,
        };
        if let Err(mpsc::error::SendError(req)) = self.requests.send(incoming) {
            let mut resp = CoapMessage::response_to(&req.message, Code::SERVICE_UNAVAILABLE);
            resp.msg_type = if con { MessageType::Ack } else { MessageType::Non };
            if !con {
                resp.message_id = self.new_mid();
            }
            if let Ok(bytes) = resp.encode() {
                self.remember_reply(peer, request_mid, &bytes);
                let _ = self.send_raw(peer, bytes).await;
            }
            return;
        }
        let inner = self.clone();
        tokio::spawn(async move {
            let mut separate = false;
            let response = if con {
                match timeout(inner.params.separate_response_after, &mut resp_rx).await {
                    Ok(r) => r.ok(),
                    Err(_) => {
                        separate = true;
                        if let Ok(bytes) = CoapMessage::empty_ack(request_mid).encode() {
                            inner.remember_reply(peer, request_mid, &bytes);
                            let _ = inner.send_raw(peer, bytes).await;
                        }
                        resp_rx.await.ok()
                    }
                }
            } else {
                resp_rx.await.ok()
            };
            let mut resp = response.unwrap_or_else(|| {
                let mut r = CoapMessage::new(MessageType::Ack, Code::INTERNAL_SERVER_ERROR);
                r.message_id = request_mid;
                r
            });
            resp.token = request_token;
            if separate {
                let endpoint = CoapEndpoint { inner };
                let _ = endpoint.send_confirmable(peer, resp).await;
            } else if con {
                resp.msg_type = MessageType::Ack;
                resp.message_id = request_mid;
                if let Ok(bytes) = resp.encode() {
                    inner.remember_reply(peer, request_mid, &bytes);
                    let _ = inner.send_raw(peer, bytes).await;
                }
            } else {
                resp.msg_type = MessageType::Non;
                resp.message_id = inner.new_mid();
                if let Ok(bytes) = resp.encode() {
                    let _ = inner.send_raw(peer, bytes).await;
                }
            }
        });
    }
}

async fn receive_loop(inner: Arc<Inner>, mut rx: TransportRx) {
    while let Some((bytes, peer)) = rx.recv().await {
        if !inner.radio.load(Ordering::SeqCst) {
            continue;
        }
        match CoapMessage::decode(&bytes) {
            Ok(msg) => inner.handle(msg, peer).await,
            Err(e) => tracing::debug!(%peer, "dropping undecodable datagram: {e}"),
        }
    }
}
