//! Device-side LwM2M engine.
//!
//! A [`Client`] owns the object store and runs one event loop over inbound
//! CoAP requests, calls from the device through a [`ClientHandle`], results
//! of its own outgoing exchanges, and timers (registration update, queue-mode
//! wake and sleep, notification rate limits).

pub mod fota;
pub mod queue;

use std::collections::BTreeMap;
use std::future::Future;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinSet;
use tokio::time::{sleep_until, Instant};

use crate::coap::block::block2_response;
use crate::coap::{
    block2_download, content_format, option, BlockOpt, Code, CoapEndpoint, CoapError, CoapMessage, CoapUri,
    IncomingRequest, MessageType, ObserveHandle, Observers, TransmissionParams, UriError,
};
use crate::lwm2m::defs::{device, security, server, DEVICE, FIRMWARE, SECURITY, SERVER};
use crate::lwm2m::{
    parse_path, senml_decode, senml_encode, ObjectStore, Path, ResourceValue, SenmlFormat, SenmlRecord, StoreError,
    ValueKind,
};
use crate::objects;
use crate::time::Clock;

pub use fota::{Fota, FotaResult, FotaState, MemoryPlatform, Platform};
pub use queue::{NotificationQueue, Queued, DEFAULT_QUEUE_CAPACITY};

/// Payload size above which reads switch to Block2 and notifications split.
pub const MAX_PAYLOAD: usize = 1024;
pub const DEFAULT_LIFETIME: u32 = 86_400;
pub const DEFAULT_WAKE_INTERVAL: Duration = Duration::from_secs(60);
pub const BOOTSTRAP_ATTEMPTS: u32 = 5;
const MAX_RETRY_DELAY: Duration = Duration::from_secs(64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BootstrapMode {
    /// Only when nothing was provisioned before.
    FirstBoot,
    EveryBoot,
}

#[derive(Clone, Debug)]
pub struct ClientConfig {
    pub endpoint_name: String,
    pub bootstrap_uri: Option<String>,
    pub bootstrap_mode: BootstrapMode,
    /// Factory server, used when no bootstrap server is configured.
    pub server_uri: String,
    pub lifetime: u32,
    pub queue_mode: bool,
    /// Sleep between wake windows.
    pub wake_interval: Duration,
    /// How long the device stays reachable after waking.
    pub awake_window: Duration,
    pub format: SenmlFormat,
    pub confirmable_notifications: bool,
    pub queue_capacity: usize,
    pub bootstrap_attempts: u32,
    /// How long to wait for bootstrap-finish after the request is accepted.
    pub bootstrap_timeout: Duration,
    /// Delay between acknowledging an update or reboot and going down.
    pub reboot_delay: Duration,
    pub params: TransmissionParams,
}

impl ClientConfig {
    pub fn new(endpoint_name: &str, server_uri: &str) -> ClientConfig {
        let params = TransmissionParams::default();
        ClientConfig {
            endpoint_name: endpoint_name.to_string(),
            bootstrap_uri: None,
            bootstrap_mode: BootstrapMode::FirstBoot,
            server_uri: server_uri.to_string(),
            lifetime: DEFAULT_LIFETIME,
            queue_mode: false,
            wake_interval: DEFAULT_WAKE_INTERVAL,
            awake_window: params.max_transmit_wait(),
            format: SenmlFormat::Cbor,
            confirmable_notifications: true,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            bootstrap_attempts: BOOTSTRAP_ATTEMPTS,
            bootstrap_timeout: params.max_transmit_wait(),
            reboot_delay: Duration::from_secs(2),
            params,
        }
    }

    /// Scale every protocol timer by `factor`, for desk-scale runs.
    pub fn scaled(mut self, factor: f64) -> ClientConfig {
        self.awake_window = self.awake_window.mul_f64(factor);
        self.wake_interval = self.wake_interval.mul_f64(factor);
        self.bootstrap_timeout = self.bootstrap_timeout.mul_f64(factor);
        self.lifetime = ((self.lifetime as f64 * factor).round() as u32).max(1);
        self
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.endpoint_name.is_empty() {
            return Err(ClientError::InvalidConfig("empty endpoint name".into()));
        }
        if self.lifetime == 0 {
            return Err(ClientError::InvalidConfig("lifetime must be positive".into()));
        }
        if self.server_uri.is_empty() && self.bootstrap_uri.is_none() {
            return Err(ClientError::InvalidConfig("no server or bootstrap URI".into()));
        }
        if self.queue_mode && (self.wake_interval.is_zero() || self.awake_window.is_zero()) {
            return Err(ClientError::InvalidConfig("queue mode needs wake interval and window".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClientError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Coap(#[from] CoapError),
    #[error(transparent)]
    Uri(#[from] UriError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("server answered {0}")]
    Rejected(Code),
    #[error("bootstrap failed after {0} attempts")]
    BootstrapFailed(u32),
    #[error("bootstrap timed out")]
    BootstrapTimeout,
    #[error("bootstrap provisioned no server")]
    NoServer,
    #[error("client stopped")]
    Closed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RegStatus {
    Unregistered,
    Bootstrapping,
    Registered,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegistrationState {
    pub status: RegStatus,
    /// Non-empty exactly when registered.
    pub location_path: String,
    /// Unix seconds of the last successful register or update.
    pub last_update: Option<f64>,
}

/// Snapshot of the client for observers outside the loop.
#[derive(Clone, Debug, Serialize)]
pub struct ClientStatus {
    pub registration: RegistrationState,
    pub server: Option<SocketAddr>,
    pub awake: bool,
    pub queued: usize,
    pub dropped: u64,
    pub notifications_sent: u64,
    pub registrations: u32,
    pub updates: u32,
    pub wakes: u32,
    pub fota_state: FotaState,
    pub fota_result: FotaResult,
    pub staged_bytes: usize,
    pub last_error: Option<String>,
}

impl Default for ClientStatus {
    fn default() -> ClientStatus {
        ClientStatus {
            registration: RegistrationState {
                status: RegStatus::Unregistered,
                location_path: String::new(),
                last_update: None,
            },
            server: None,
            awake: true,
            queued: 0,
            dropped: 0,
            notifications_sent: 0,
            registrations: 0,
            updates: 0,
            wakes: 0,
            fota_state: FotaState::Idle,
            fota_result: FotaResult::Initial,
            staged_bytes: 0,
            last_error: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClientExit {
    /// The device must restart (firmware update or remote reboot).
    Reboot,
    Shutdown,
}

type StoreFn = Box<dyn FnOnce(&mut ObjectStore) + Send>;

enum Command {
    Store(StoreFn),
    Notify(Path, Vec<SenmlRecord>),
    Stop { deregister: bool },
}

/// Cheap handle for talking to a running client.
#[derive(Clone)]
pub struct ClientHandle {
    tx: mpsc::UnboundedSender<Command>,
    status: Arc<Mutex<ClientStatus>>,
}

impl ClientHandle {
    /// Run `f` against the object store inside the client loop. Changes it
    /// makes are picked up for notification afterwards.
    pub async fn with_store<R, F>(&self, f: F) -> Result<R, ClientError>
    where
        F: FnOnce(&mut ObjectStore) -> R + Send + 'static,
        R: Send + 'static,
    {
        let (tx, rx) = oneshot::channel();
        self.tx
            .send(Command::Store(Box::new(move |s| {
                let _ = tx.send(f(s));
            })))
            .map_err(|_| ClientError::Closed)?;
        rx.await.map_err(|_| ClientError::Closed)
    }

    /// Notify observers of `path` with exactly these records, bypassing the
    /// rate limit.
    pub fn notify_records(&self, path: Path, records: Vec<SenmlRecord>) -> Result<(), ClientError> {
        self.tx
            .send(Command::Notify(path, records))
            .map_err(|_| ClientError::Closed)
    }

    pub fn stop(&self, deregister: bool) {
        let _ = self.tx.send(Command::Stop { deregister });
    }

    pub fn status(&self) -> ClientStatus {
        self.status.lock().unwrap().clone()
    }
}

enum Internal {
    Registered(Result<CoapMessage, CoapError>),
    Updated(Result<CoapMessage, CoapError>),
    Notified(Vec<Queued>, Result<(), CoapError>),
    Downloaded(Result<Vec<u8>, CoapError>),
}

struct Watch {
    last_sent: Option<Instant>,
    due: Option<Instant>,
}

pub struct Client {
    config: ClientConfig,
    endpoint: CoapEndpoint,
    requests: mpsc::UnboundedReceiver<IncomingRequest>,
    inbox: mpsc::UnboundedReceiver<Command>,
    shared: Arc<Mutex<ClientStatus>>,
    store: ObjectStore,
    platform: Box<dyn Platform>,
    clock: Clock,
    fota: Fota,
    observers: Observers,
    watches: BTreeMap<ObserveHandle, Watch>,
    queue: NotificationQueue,
    forced: Vec<(Path, Vec<SenmlRecord>)>,
    tasks: JoinSet<Internal>,
    inflight: usize,
    status: ClientStatus,
    server: Option<SocketAddr>,
    register_inflight: bool,
    update_inflight: bool,
    register_at: Option<Instant>,
    update_due: Option<Instant>,
    failures: u32,
    sleep_at: Option<Instant>,
    wake_at: Option<Instant>,
    reboot_at: Option<Instant>,
    confirm_pending: bool,
    deregister_on_stop: bool,
    exit: Option<ClientExit>,
}

impl Client {
    pub fn new(
        config: ClientConfig,
        endpoint: CoapEndpoint,
        requests: mpsc::UnboundedReceiver<IncomingRequest>,
        store: ObjectStore,
        platform: Box<dyn Platform>,
    ) -> Result<(Client, ClientHandle), ClientError> {
        config.validate()?;
        let (tx, inbox) = mpsc::unbounded_channel();
        let shared = Arc::new(Mutex::new(ClientStatus::default()));
        let (state, result) = platform.fota_status();
        let client = Client {
            queue: NotificationQueue::new(config.queue_capacity),
            config,
            endpoint,
            requests,
            inbox,
            shared: shared.clone(),
            store,
            platform,
            clock: Clock::system(),
            fota: Fota::new(state, result),
            observers: Observers::new(),
            watches: BTreeMap::new(),
            forced: Vec::new(),
            tasks: JoinSet::new(),
            inflight: 0,
            status: ClientStatus::default(),
            server: None,
            register_inflight: false,
            update_inflight: false,
            register_at: None,
            update_due: None,
            failures: 0,
            sleep_at: None,
            wake_at: None,
            reboot_at: None,
            confirm_pending: state == FotaState::Updating,
            deregister_on_stop: false,
            exit: None,
        };
        Ok((client, ClientHandle { tx, status: shared }))
    }

    /// Timestamps come from `clock` instead of the system clock.
    pub fn with_clock(mut self, clock: Clock) -> Client {
        self.clock = clock;
        self
    }

    pub async fn run(mut self) -> Result<ClientExit, ClientError> {
        self.prepare_store()?;
        let uri = match self.server_uri().await {
            Ok(uri) => uri,
            Err(e) => {
                self.status.last_error = Some(e.to_string());
                self.publish_status();
                return match self.exit {
                    Some(exit) => Ok(exit),
                    None => Err(e),
                };
            }
        };
        if let Some(exit) = self.exit {
            return Ok(exit);
        }
        let addr = CoapUri::parse(&uri)?.resolve().await?;
        self.server = Some(addr);
        self.status.server = Some(addr);
        self.start_register();
        self.publish_status();

        loop {
            let deadline = self.next_deadline();
            tokio::select! {
                Some(cmd) = self.inbox.recv() => self.apply(cmd),
                Some(req) = self.requests.recv() => self.handle_request(req),
                Some(done) = self.tasks.join_next(), if !self.tasks.is_empty() => {
                    if let Ok(ev) = done {
                        self.on_internal(ev);
                    }
                }
                _ = sleep_until(deadline) => self.on_timer(),
            }
            self.after_event();
            if let Some(exit) = self.exit {
                return Ok(self.finish(exit).await);
            }
        }
    }

    async fn finish(mut self, exit: ClientExit) -> ClientExit {
        if exit == ClientExit::Shutdown && self.status.registration.status == RegStatus::Registered {
            let deregister = self.deregister_on_stop;
            if deregister {
                if let Some(addr) = self.server {
                    self.endpoint.set_radio(true);
                    let req = CoapMessage::request(Code::DELETE, &self.status.registration.location_path);
                    let _ = self.endpoint.exchange(addr, req).await;
                }
            }
        }
        self.tasks.abort_all();
        self.status.registration = RegistrationState {
            status: RegStatus::Unregistered,
            location_path: String::new(),
            last_update: self.status.registration.last_update,
        };
        self.publish_status();
        exit
    }

    fn prepare_store(&mut self) -> Result<(), StoreError> {
        let binding = self.binding();
        let s = &mut self.store;
        for def in crate::lwm2m::standard_objects() {
            if s.object_def(def.id).is_none() {
                s.define(def);
            }
        }
        if !s.has_instance(DEVICE, 0) {
            s.create_instance(DEVICE, 0)?;
        }
        s.set(
            Path::resource(DEVICE, 0, device::FIRMWARE_VERSION),
            ResourceValue::String(self.platform.firmware_version()),
        )?;
        if !s.has_instance(SERVER, 0) {
            s.create_instance(SERVER, 0)?;
            s.set(Path::resource(SERVER, 0, server::SHORT_SERVER_ID), ResourceValue::Integer(1))?;
        }
        s.set(
            Path::resource(SERVER, 0, server::LIFETIME),
            ResourceValue::Integer(self.config.lifetime as i64),
        )?;
        s.set(
            Path::resource(SERVER, 0, server::BINDING),
            ResourceValue::String(binding.to_string()),
        )?;
        if !s.has_instance(FIRMWARE, 0) {
            s.create_instance(FIRMWARE, 0)?;
        }
        s.set(
            Path::resource(FIRMWARE, 0, crate::lwm2m::defs::firmware::DELIVERY_METHOD),
            ResourceValue::Integer(2),
        )?;
        self.fota.recover(&mut self.store, self.platform.as_mut());
        self.store.take_changes();
        Ok(())
    }

    fn binding(&self) -> &'static str {
        if self.config.queue_mode {
            "UQ"
        } else {
            "U"
        }
    }

    /// Run `fut` while still serving calls from the device.
    async fn pump<T>(&mut self, fut: impl Future<Output = T>) -> T {
        tokio::pin!(fut);
        loop {
            tokio::select! {
                out = &mut fut => return out,
                Some(cmd) = self.inbox.recv() => self.apply(cmd),
            }
        }
    }

    fn apply(&mut self, cmd: Command) {
        match cmd {
            Command::Store(f) => f(&mut self.store),
            Command::Notify(path, records) => self.forced.push((path, records)),
            Command::Stop { deregister } => {
                self.deregister_on_stop = deregister;
                self.exit = Some(ClientExit::Shutdown);
            }
        }
    }

    // ---- bootstrap ----

    async fn server_uri(&mut self) -> Result<String, ClientError> {
        let stored = self.platform.stored_server_uri();
        let Some(bs) = self.config.bootstrap_uri.clone() else {
            return Ok(self.config.server_uri.clone());
        };
        if self.config.bootstrap_mode == BootstrapMode::FirstBoot {
            if let Some(uri) = stored {
                return Ok(uri);
            }
        }
        let addr = CoapUri::parse(&bs)?.resolve().await?;
        let mut delay = Duration::from_secs(1);
        for attempt in 1..=self.config.bootstrap_attempts {
            self.status.registration.status = RegStatus::Bootstrapping;
            self.publish_status();
            match self.bootstrap_once(addr).await {
                Ok(uri) => {
                    self.platform.store_server_uri(&uri);
                    self.status.registration.status = RegStatus::Unregistered;
                    return Ok(uri);
                }
                Err(e) => {
                    tracing::debug!(attempt, error = %e, "bootstrap attempt failed");
                    self.status.last_error = Some(e.to_string());
                }
            }
            if self.exit.is_some() {
                return Err(ClientError::Closed);
            }
            if attempt < self.config.bootstrap_attempts {
                let until = Instant::now() + delay;
                self.pump(sleep_until(until)).await;
                delay = (delay * 2).min(MAX_RETRY_DELAY);
            }
        }
        self.status.registration.status = RegStatus::Unregistered;
        Err(ClientError::BootstrapFailed(self.config.bootstrap_attempts))
    }

    async fn bootstrap_once(&mut self, addr: SocketAddr) -> Result<String, ClientError> {
        let mut req = CoapMessage::request(Code::POST, "/bs");
        req.add_uri_query("ep", &self.config.endpoint_name);
        let ep = self.endpoint.clone();
        let resp = self.pump(async move { ep.exchange(addr, req).await }).await?;
        if !resp.code.is_success() {
            return Err(ClientError::Rejected(resp.code));
        }
        let deadline = Instant::now() + self.config.bootstrap_timeout;
        loop {
            tokio::select! {
                _ = sleep_until(deadline) => return Err(ClientError::BootstrapTimeout),
                Some(cmd) = self.inbox.recv() => {
                    self.apply(cmd);
                    if self.exit.is_some() {
                        return Err(ClientError::Closed);
                    }
                }
                Some(req) = self.requests.recv() => {
                    if self.handle_bootstrap_request(req) {
                        break;
                    }
                }
            }
        }
        self.store.take_changes();
        let lifetime = self
            .store
            .instances(SERVER)
            .into_iter()
            .find_map(|i| self.store.get_i64(&Path::resource(SERVER, i, server::LIFETIME)))
            .filter(|lt| *lt > 0);
        if let Some(lt) = lifetime {
            self.config.lifetime = lt as u32;
        }
        self.provisioned_server().ok_or(ClientError::NoServer)
    }

    fn provisioned_server(&self) -> Option<String> {
        self.store.instances(SECURITY).into_iter().find_map(|i| {
            let is_bs = matches!(
                self.store.get(&Path::resource(SECURITY, i, security::BOOTSTRAP_SERVER)),
                Some(ResourceValue::Boolean(true))
            );
            let uri = self.store.get_str(&Path::resource(SECURITY, i, security::SERVER_URI))?;
            (!is_bs && !uri.is_empty()).then(|| uri.to_string())
        })
    }

    /// Returns true on bootstrap-finish.
    fn handle_bootstrap_request(&mut self, req: IncomingRequest) -> bool {
        let msg = &req.message;
        let path = msg.uri_path();
        if msg.code == Code::POST && path == "/bs" {
            req.respond_code(Code::CHANGED);
            return true;
        }
        if msg.code == Code::DELETE {
            for obj in [SECURITY, SERVER] {
                for i in self.store.instances(obj) {
                    let _ = self.store.delete_instance(obj, i);
                }
            }
            req.respond_code(Code::DELETED);
            return false;
        }
        if msg.code == Code::GET && msg.uint_option(option::ACCEPT) == Some(content_format::LINK_FORMAT as u32) {
            let body = self.store.discover().into_bytes();
            let mut resp = CoapMessage::response_to(msg, Code::CONTENT).with_payload(body);
            resp.set_content_format(content_format::LINK_FORMAT);
            req.respond(resp);
            return false;
        }
        let code = match (msg.code, parse_path(&path)) {
            (Code::PUT | Code::POST, Ok(target)) if target.object == SECURITY || target.object == SERVER => {
                match decode_records(msg, self.config.format) {
                    Ok(records) => {
                        let ok = records.iter().all(|r| target.contains(&r.path))
                            && records
                                .iter()
                                .all(|r| self.store.provision(r.path, r.value.clone()).is_ok());
                        if ok {
                            Code::CHANGED
                        } else {
                            Code::BAD_REQUEST
                        }
                    }
                    Err(code) => code,
                }
            }
            (Code::GET, _) => Code::METHOD_NOT_ALLOWED,
            _ => Code::BAD_REQUEST,
        };
        req.respond_code(code);
        false
    }

    // ---- registration ----

    fn start_register(&mut self) {
        let Some(addr) = self.server else { return };
        if self.register_inflight {
            return;
        }
        self.register_inflight = true;
        self.register_at = None;
        // a fresh registration drops every observation of the old one
        self.observers.clear();
        self.watches.clear();
        let mut req = CoapMessage::request(Code::POST, "/rd");
        req.add_uri_query("ep", &self.config.endpoint_name);
        req.add_uri_query("lt", &self.config.lifetime.to_string());
        req.add_uri_query("lwm2m", "1.0");
        req.add_uri_query("b", self.binding());
        req.set_content_format(content_format::LINK_FORMAT);
        req.payload = self.store.discover().into_bytes();
        let ep = self.endpoint.clone();
        self.tasks
            .spawn(async move { Internal::Registered(ep.exchange(addr, req).await) });
    }

    fn start_update(&mut self) {
        let Some(addr) = self.server else { return };
        if self.update_inflight || self.register_inflight {
            return;
        }
        if self.status.registration.status != RegStatus::Registered {
            return self.start_register();
        }
        self.update_inflight = true;
        self.update_due = None;
        let req = CoapMessage::request(Code::POST, &self.status.registration.location_path);
        let ep = self.endpoint.clone();
        self.tasks
            .spawn(async move { Internal::Updated(ep.exchange(addr, req).await) });
    }

    fn half_lifetime(&self) -> Duration {
        Duration::from_secs_f64(self.config.lifetime as f64 / 2.0)
    }

    fn retry_delay(&mut self) -> Duration {
        self.failures += 1;
        let secs = 1u64 << self.failures.min(6);
        Duration::from_secs(secs).min(MAX_RETRY_DELAY)
    }

    fn on_registered(&mut self, res: Result<CoapMessage, CoapError>) {
        self.register_inflight = false;
        match res {
            Ok(resp) if resp.code == Code::CREATED && !resp.location_path().is_empty() => {
                self.failures = 0;
                self.status.registration = RegistrationState {
                    status: RegStatus::Registered,
                    location_path: resp.location_path(),
                    last_update: Some(self.clock.now()),
                };
                self.status.registrations += 1;
                self.update_due = Some(Instant::now() + self.half_lifetime());
                if self.confirm_pending {
                    self.confirm_pending = false;
                    self.fota.boot_confirmed(&mut self.store, self.platform.as_mut());
                }
                if self.config.queue_mode {
                    self.sleep_at = Some(Instant::now() + self.config.awake_window);
                }
                self.flush_queue();
            }
            Ok(resp) => {
                self.status.registration.status = RegStatus::Unregistered;
                self.status.last_error = Some(format!("registration rejected with {}", resp.code));
            }
            Err(e) => {
                self.status.last_error = Some(format!("registration failed: {e}"));
                let delay = self.retry_delay();
                self.register_at = Some(Instant::now() + delay);
                if self.config.queue_mode && self.sleep_at.is_none() {
                    self.sleep_at = Some(Instant::now() + self.config.awake_window);
                }
            }
        }
    }

    fn on_updated(&mut self, res: Result<CoapMessage, CoapError>) {
        self.update_inflight = false;
        match res {
            Ok(resp) if resp.code == Code::CHANGED => {
                self.failures = 0;
                self.status.registration.last_update = Some(self.clock.now());
                self.status.updates += 1;
                self.update_due = Some(Instant::now() + self.half_lifetime());
                self.flush_queue();
            }
            Ok(resp) if resp.code == Code::NOT_FOUND => {
                self.status.registration = RegistrationState {
                    status: RegStatus::Unregistered,
                    location_path: String::new(),
                    last_update: self.status.registration.last_update,
                };
                self.start_register();
            }
            Ok(resp) => {
                self.status.last_error = Some(format!("update rejected with {}", resp.code));
                let delay = self.retry_delay();
                self.update_due = Some(Instant::now() + delay);
            }
            Err(e) => {
                self.status.last_error = Some(format!("update failed: {e}"));
                let delay = self.retry_delay();
                self.update_due = Some(Instant::now() + delay);
            }
        }
    }

    fn on_internal(&mut self, ev: Internal) {
        match ev {
            Internal::Registered(res) => self.on_registered(res),
            Internal::Updated(res) => self.on_updated(res),
            Internal::Notified(items, res) => {
                self.inflight -= 1;
                match res {
                    Ok(()) => self.status.notifications_sent += 1,
                    Err(CoapError::Reset) => {
                        for it in &items {
                            self.cancel_observation(it.handle);
                        }
                    }
                    Err(_) => self.queue.requeue(items),
                }
            }
            Internal::Downloaded(res) => {
                self.inflight -= 1;
                match res {
                    Ok(body) => self.fota.complete(&body, &mut self.store, self.platform.as_mut()),
                    Err(e) => {
                        tracing::debug!(error = %e, "package download failed");
                        let result = match e {
                            CoapError::Response(c) if c == Code::NOT_FOUND => FotaResult::InvalidUri,
                            CoapError::BlockAborted(_) => FotaResult::IntegrityFailure,
                            _ => FotaResult::ConnectionLost,
                        };
                        self.fota.fail(result, &mut self.store, self.platform.as_mut());
                    }
                }
            }
        }
    }

    // ---- timers and queue mode ----

    fn awake(&self) -> bool {
        self.wake_at.is_none()
    }

    fn next_deadline(&self) -> Instant {
        let far = Instant::now() + Duration::from_secs(86_400 * 365);
        let mut t = far;
        let mut consider = |x: Option<Instant>| {
            if let Some(x) = x {
                t = t.min(x);
            }
        };
        consider(self.reboot_at);
        if self.awake() {
            if !self.update_inflight {
                consider(self.update_due);
            }
            consider(self.register_at);
            consider(self.sleep_at);
            for w in self.watches.values() {
                consider(w.due);
            }
        } else {
            consider(self.wake_at);
            // rate-limited changes are queued while asleep
            for w in self.watches.values() {
                consider(w.due);
            }
        }
        t
    }

    fn on_timer(&mut self) {
        let now = Instant::now();
        if self.reboot_at.is_some_and(|t| t <= now) {
            self.exit = Some(ClientExit::Reboot);
            return;
        }
        if !self.awake() {
            if self.wake_at.is_some_and(|t| t <= now) {
                self.wake();
            }
            return;
        }
        if self.register_at.is_some_and(|t| t <= now) {
            self.start_register();
        }
        if !self.update_inflight && self.update_due.is_some_and(|t| t <= now) {
            self.start_update();
        }
        if self.sleep_at.is_some_and(|t| t <= now) {
            self.try_sleep();
        }
    }

    fn busy(&self) -> bool {
        self.inflight > 0 || self.register_inflight || self.update_inflight || self.fota.state == FotaState::Downloading
    }

    fn try_sleep(&mut self) {
        if !self.config.queue_mode {
            self.sleep_at = None;
            return;
        }
        if self.busy() {
            // stay up until outstanding work settles
            self.sleep_at = Some(Instant::now() + self.config.params.ack_timeout);
            return;
        }
        self.endpoint.set_radio(false);
        self.sleep_at = None;
        let mut wake = Instant::now() + self.config.wake_interval;
        if let Some(due) = self.update_due {
            wake = wake.min(due.max(Instant::now()));
        }
        self.wake_at = Some(wake);
        self.status.awake = false;
        tracing::trace!(ep = %self.config.endpoint_name, "sleep");
    }

    fn wake(&mut self) {
        self.wake_at = None;
        self.endpoint.set_radio(true);
        self.status.awake = true;
        self.status.wakes += 1;
        self.sleep_at = Some(Instant::now() + self.config.awake_window);
        tracing::trace!(ep = %self.config.endpoint_name, "wake");
        if self.status.registration.status == RegStatus::Registered {
            self.start_update();
        } else {
            self.start_register();
        }
    }

    /// Keep the radio up a while after the server talks to us.
    fn extend_awake(&mut self) {
        if let Some(t) = self.sleep_at {
            self.sleep_at = Some(t.max(Instant::now() + self.config.awake_window));
        }
    }

    // ---- notifications ----

    fn can_send(&self) -> bool {
        self.awake() && self.status.registration.status == RegStatus::Registered && self.exit.is_none()
    }

    fn after_event(&mut self) {
        let now = Instant::now();
        let changes = self.store.take_changes();
        if !changes.is_empty() {
            let active: Vec<(ObserveHandle, Path)> = self
                .observers
                .active()
                .filter_map(|(h, e)| parse_path(&e.path).ok().map(|p| (h, p)))
                .collect();
            for (h, obs) in active {
                if !changes.iter().any(|c| obs.contains(c) || c.contains(&obs)) {
                    continue;
                }
                let w = self.watches.entry(h).or_insert(Watch {
                    last_sent: None,
                    due: None,
                });
                if w.due.is_none() {
                    let earliest = w
                        .last_sent
                        .map(|t| t + objects::notify_interval(&obs))
                        .unwrap_or(now);
                    w.due = Some(earliest.max(now));
                }
            }
        }
        for (path, records) in std::mem::take(&mut self.forced) {
            let targets: Vec<(ObserveHandle, Path)> = self
                .observers
                .active()
                .filter_map(|(h, e)| parse_path(&e.path).ok().map(|p| (h, p)))
                .filter(|(_, obs)| obs.contains(&path) || path.contains(obs))
                .collect();
            for (h, obs) in targets {
                let recs: Vec<SenmlRecord> = records.iter().filter(|r| obs.contains(&r.path)).cloned().collect();
                if !recs.is_empty() {
                    self.emit(Queued { handle: h, records: recs });
                }
            }
        }
        let due: Vec<ObserveHandle> = self
            .watches
            .iter()
            .filter(|(_, w)| w.due.is_some_and(|t| t <= now))
            .map(|(h, _)| *h)
            .collect();
        for h in due {
            if let Some(w) = self.watches.get_mut(&h) {
                w.due = None;
                w.last_sent = Some(now);
            }
            let Some(path) = self.observers.get(h).and_then(|e| parse_path(&e.path).ok()) else {
                self.watches.remove(&h);
                continue;
            };
            let t = self.clock.now_secs();
            match self.store.read(&path) {
                Ok(records) => {
                    let records = records.into_iter().map(|r| r.at(t)).collect();
                    self.emit(Queued { handle: h, records });
                }
                Err(_) => self.cancel_observation(h),
            }
        }
        self.publish_status();
    }

    fn emit(&mut self, item: Queued) {
        if self.can_send() {
            self.send_batch(item.handle, item.records);
        } else {
            self.queue.push(item);
        }
    }

    fn flush_queue(&mut self) {
        if !self.can_send() {
            return;
        }
        let mut grouped: BTreeMap<ObserveHandle, Vec<SenmlRecord>> = BTreeMap::new();
        for item in self.queue.drain() {
            grouped.entry(item.handle).or_default().extend(item.records);
        }
        for (h, records) in grouped {
            self.send_batch(h, records);
        }
    }

    fn send_batch(&mut self, handle: ObserveHandle, records: Vec<SenmlRecord>) {
        let Some(entry) = self.observers.get(handle) else { return };
        if entry.is_cancelled() {
            return;
        }
        let format = entry
            .content_format
            .and_then(SenmlFormat::from_content_format)
            .unwrap_or(self.config.format);
        for chunk in chunk_records(records, format) {
            let Ok(payload) = senml_encode(&chunk, format) else { continue };
            let ty = if self.config.confirmable_notifications {
                MessageType::Con
            } else {
                MessageType::Non
            };
            let mut msg = CoapMessage::new(ty, Code::CONTENT).with_payload(payload);
            msg.set_content_format(format.content_format());
            let Ok((peer, msg)) = self.observers.notify(handle, msg) else { return };
            let ep = self.endpoint.clone();
            let item = vec![Queued { handle, records: chunk }];
            self.inflight += 1;
            self.tasks.spawn(async move {
                let res = if ty == MessageType::Con {
                    ep.send_confirmable(peer, msg).await.map(|_| ())
                } else {
                    ep.send_non(peer, msg).await
                };
                Internal::Notified(item, res)
            });
        }
    }

    fn cancel_observation(&mut self, handle: ObserveHandle) {
        self.observers.cancel(handle);
        self.observers.prune();
        self.watches.remove(&handle);
    }

    fn publish_status(&mut self) {
        self.status.queued = self.queue.len();
        self.status.dropped = self.queue.dropped();
        self.status.fota_state = self.fota.state;
        self.status.fota_result = self.fota.result;
        self.status.staged_bytes = self.fota.staged_bytes;
        *self.shared.lock().unwrap() = self.status.clone();
    }

    // ---- inbound requests ----

    fn handle_request(&mut self, req: IncomingRequest) {
        self.extend_awake();
        let msg = &req.message;
        let Ok(path) = parse_path(&msg.uri_path()) else {
            return req.respond_code(Code::NOT_FOUND);
        };
        match msg.code {
            Code::GET => self.handle_read(req, path),
            Code::PUT | Code::POST if path == fota::PACKAGE => self.handle_push(req),
            Code::PUT | Code::POST if path == fota::PACKAGE_URI => self.handle_pull(req),
            // POST on a resource is always Execute; the store refuses 4.05
            // when the resource is not executable
            Code::POST if path.resource.is_some() => self.handle_execute(req, path),
            Code::PUT | Code::POST => self.handle_write(req, path),
            _ => req.respond_code(Code::METHOD_NOT_ALLOWED),
        }
    }

    fn response_format(&self, msg: &CoapMessage) -> Result<SenmlFormat, Code> {
        match msg.uint_option(option::ACCEPT) {
            None => Ok(self.config.format),
            Some(cf) => SenmlFormat::from_content_format(cf as u16).ok_or(Code::NOT_ACCEPTABLE),
        }
    }

    fn handle_read(&mut self, req: IncomingRequest, path: Path) {
        let msg = &req.message;
        if msg.uint_option(option::ACCEPT) == Some(content_format::LINK_FORMAT as u32) {
            let body = self
                .store
                .object_links()
                .iter()
                .filter(|p| path.contains(p) || p.contains(&path))
                .map(|p| format!("<{p}>"))
                .collect::<Vec<_>>()
                .join(",");
            let mut resp = CoapMessage::response_to(msg, Code::CONTENT).with_payload(body.into_bytes());
            resp.set_content_format(content_format::LINK_FORMAT);
            return req.respond(resp);
        }
        let format = match self.response_format(msg) {
            Ok(f) => f,
            Err(code) => return req.respond_code(code),
        };
        if msg.observe() == Some(1) {
            self.observers.cancel_token(req.peer, &msg.token);
            self.observers.prune();
        }
        let records = match self.store.read(&path) {
            Ok(r) => r,
            Err(e) => return req.respond_code(e.code()),
        };
        let payload = match senml_encode(&records, format) {
            Ok(p) => p,
            Err(_) => return req.respond_code(Code::INTERNAL_SERVER_ERROR),
        };
        if msg.observe() == Some(0) {
            let handle = self
                .observers
                .subscribe(req.peer, msg.token.clone(), &path.to_string(), Some(format.content_format()));
            self.watches.insert(
                handle,
                Watch {
                    last_sent: Some(Instant::now()),
                    due: None,
                },
            );
            if let Some(mut resp) = self.observers.initial_response(handle, msg) {
                resp.set_content_format(format.content_format());
                resp.payload = payload;
                return req.respond(resp);
            }
        }
        let mut resp = if payload.len() > MAX_PAYLOAD || BlockOpt::from_message(msg, option::BLOCK2).is_some() {
            match block2_response(msg, &payload, MAX_PAYLOAD) {
                Ok(r) => r,
                Err(_) => return req.respond_code(Code::BAD_OPTION),
            }
        } else {
            CoapMessage::response_to(msg, Code::CONTENT).with_payload(payload)
        };
        if resp.code == Code::CONTENT {
            resp.set_content_format(format.content_format());
        }
        req.respond(resp);
    }

    fn handle_write(&mut self, req: IncomingRequest, path: Path) {
        let msg = &req.message;
        let result = match msg.content_format() {
            Some(content_format::TEXT_PLAIN) => match text_value(&self.store, &path, &msg.payload) {
                Some(v) => self.store.write(path, v).map(|_| ()),
                None => Err(StoreError::BadRequest(path.to_string())),
            },
            _ => match decode_records(msg, self.config.format) {
                Ok(records) => self.store.write_records(&path, &records),
                Err(code) => return req.respond_code(code),
            },
        };
        match result {
            Ok(()) => req.respond_code(Code::CHANGED),
            Err(e) => req.respond_code(e.code()),
        }
    }

    fn handle_execute(&mut self, req: IncomingRequest, path: Path) {
        let args = String::from_utf8_lossy(&req.message.payload).to_string();
        if path == fota::UPDATE {
            if self.fota.update(&mut self.store, self.platform.as_mut()) {
                self.reboot_at = Some(Instant::now() + self.config.reboot_delay);
                return req.respond_code(Code::CHANGED);
            }
            return req.respond_code(Code::METHOD_NOT_ALLOWED);
        }
        if path == Path::resource(DEVICE, 0, device::REBOOT) {
            self.reboot_at = Some(Instant::now() + self.config.reboot_delay);
            return req.respond_code(Code::CHANGED);
        }
        if path == Path::resource(SERVER, 0, server::UPDATE_TRIGGER) {
            req.respond_code(Code::CHANGED);
            return self.start_update();
        }
        match self.store.execute(path, &args) {
            Ok(()) => req.respond_code(Code::CHANGED),
            Err(e) => req.respond_code(e.code()),
        }
    }

    fn handle_push(&mut self, req: IncomingRequest) {
        let msg = &req.message;
        let block = BlockOpt::from_message(msg, option::BLOCK1);
        let reply = self
            .fota
            .push(block, &msg.payload, &mut self.store, self.platform.as_mut());
        let resp = match reply {
            fota::PushReply::Continue(opt) => {
                let mut r = CoapMessage::response_to(msg, Code::CONTINUE);
                opt.write_to(&mut r, option::BLOCK1);
                r
            }
            fota::PushReply::Changed => {
                let mut r = CoapMessage::response_to(msg, Code::CHANGED);
                if let Some(opt) = block {
                    opt.write_to(&mut r, option::BLOCK1);
                }
                r
            }
            fota::PushReply::Incomplete => CoapMessage::response_to(msg, Code::REQUEST_ENTITY_INCOMPLETE),
            fota::PushReply::TooLarge => CoapMessage::response_to(msg, Code::REQUEST_ENTITY_TOO_LARGE),
            fota::PushReply::NotAllowed => CoapMessage::response_to(msg, Code::METHOD_NOT_ALLOWED),
        };
        req.respond(resp);
    }

    fn handle_pull(&mut self, req: IncomingRequest) {
        let msg = &req.message;
        let uri = match msg.content_format() {
            Some(content_format::TEXT_PLAIN) | None if !msg.payload.is_empty() && msg.payload[0] != b'[' => {
                String::from_utf8_lossy(&msg.payload).to_string()
            }
            None if msg.payload.is_empty() => String::new(),
            _ => match decode_records(msg, self.config.format) {
                Ok(records) => match records.first().map(|r| &r.value) {
                    Some(ResourceValue::String(s)) => s.clone(),
                    _ => return req.respond_code(Code::BAD_REQUEST),
                },
                Err(code) => return req.respond_code(code),
            },
        };
        match self.fota.pull(&uri, &mut self.store, self.platform.as_mut()) {
            fota::PullStart::Fetch(target) => {
                req.respond_code(Code::CHANGED);
                let ep = self.endpoint.clone();
                self.inflight += 1;
                self.tasks.spawn(async move {
                    let res = async {
                        let addr = target.resolve().await.map_err(|_| CoapError::Unreachable)?;
                        let template = CoapMessage::request(Code::GET, &target.path);
                        block2_download(&ep, addr, &template, crate::coap::block::DEFAULT_BLOCK_SIZE)
                            .await
                            .map(|(body, _)| body)
                    }
                    .await;
                    Internal::Downloaded(res)
                });
            }
            fota::PullStart::Reset | fota::PullStart::Rejected => req.respond_code(Code::CHANGED),
            fota::PullStart::NotAllowed => req.respond_code(Code::METHOD_NOT_ALLOWED),
        }
    }
}

fn decode_records(msg: &CoapMessage, default: SenmlFormat) -> Result<Vec<SenmlRecord>, Code> {
    let format = match msg.content_format() {
        None => default,
        Some(cf) => SenmlFormat::from_content_format(cf).ok_or(Code::UNSUPPORTED_CONTENT_FORMAT)?,
    };
    senml_decode(&msg.payload, format).map_err(|_| Code::BAD_REQUEST)
}

/// Parse a text/plain write according to the resource's declared kind.
fn text_value(store: &ObjectStore, path: &Path, payload: &[u8]) -> Option<ResourceValue> {
    let text = std::str::from_utf8(payload).ok()?.trim();
    let kind = store.resource_def(path)?.kind?;
    Some(match kind {
        ValueKind::String => ResourceValue::String(text.to_string()),
        ValueKind::Integer => ResourceValue::Integer(text.parse().ok()?),
        ValueKind::Float => ResourceValue::Float(text.parse().ok()?),
        ValueKind::Boolean => ResourceValue::Boolean(match text {
            "1" | "true" => true,
            "0" | "false" => false,
            _ => return None,
        }),
        ValueKind::Time => ResourceValue::Time(text.parse().ok()?),
        ValueKind::Opaque => return None,
    })
}

/// Split records into groups whose encoding stays within [`MAX_PAYLOAD`].
/// A single oversized record travels alone.
pub fn chunk_records(records: Vec<SenmlRecord>, format: SenmlFormat) -> Vec<Vec<SenmlRecord>> {
    let mut out = Vec::new();
    let mut cur: Vec<SenmlRecord> = Vec::new();
    for r in records {
        cur.push(r);
        let size = senml_encode(&cur, format).map(|b| b.len()).unwrap_or(0);
        if size > MAX_PAYLOAD && cur.len() > 1 {
            let last = cur.pop().unwrap();
            out.push(std::mem::replace(&mut cur, vec![last]));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

