//! LwM2M management server: registration directory, proxied device
//! operations, telemetry ingest, bootstrap provisioning, firmware rollouts
//! and the HTTP API.

pub mod api;
pub mod images;
pub mod registry;
pub mod rollout;
pub mod telemetry;

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::task::AbortHandle;
use tokio::time::{timeout, Instant};

use crate::coap::block::block2_response;
use crate::coap::{
    block2_download, content_format, option, Code, CoapEndpoint, CoapError, CoapMessage, IncomingRequest,
};
use crate::lwm2m::defs::{security, server as server_res, SECURITY, SERVER};
use crate::lwm2m::{parse_links, senml_decode, senml_encode, Path, ResourceValue, SenmlFormat, SenmlRecord};
use crate::time::Clock;

pub use images::{Image, ImageInfo, ImageStore};
pub use registry::{RegistrationRecord, Registry};
pub use rollout::{RolloutConfig, RolloutError, RolloutJob, RolloutMode, RolloutRequest, RolloutTarget, TargetStatus};
pub use telemetry::{Sample, TelemetryStore};

pub const MAILBOX_CAPACITY: usize = 32;
pub const DEFAULT_HTTP_PORT: u16 = 8080;
const READ_BLOCK_SIZE: usize = 1024;
const IMAGE_BLOCK_SIZE: usize = 512;

/// 8 hex digits of SHA-256, for file names.
pub fn short_hash(bytes: &[u8]) -> String {
    images::hex(&Sha256::digest(bytes)[..4])
}

#[derive(Clone, Debug)]
pub struct BootstrapConfig {
    /// URI provisioned into the client's security object.
    pub server_uri: String,
    pub lifetime: Option<u32>,
    pub accept_unknown: bool,
    pub known: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub data_dir: Option<PathBuf>,
    /// Paths observed on every device that advertises them.
    pub observe: Vec<Path>,
    pub format: SenmlFormat,
    /// How long a queue-mode device is assumed reachable after it talks.
    pub queue_awake_window: Duration,
    /// Longest a request waits for a sleeping device.
    pub queue_park_timeout: Duration,
    pub bootstrap: Option<BootstrapConfig>,
    /// Base URI devices use to fetch images, e.g. `coap://10.0.0.1:5683`.
    pub public_uri: Option<String>,
    pub rollout: RolloutConfig,
    pub api_token: Option<String>,
    pub compact_after: usize,
    pub clock: Clock,
}

impl Default for ServerConfig {
    fn default() -> ServerConfig {
        let wake = crate::client::DEFAULT_WAKE_INTERVAL;
        ServerConfig {
            data_dir: None,
            observe: default_observe(),
            format: SenmlFormat::Cbor,
            queue_awake_window: Duration::from_secs(45),
            queue_park_timeout: wake * 2,
            bootstrap: None,
            public_uri: None,
            rollout: RolloutConfig::default(),
            api_token: None,
            compact_after: telemetry::DEFAULT_COMPACT_AFTER,
            clock: Clock::system(),
        }
    }
}

impl ServerConfig {
    /// Scale every timer by `factor`, matching a scaled client.
    pub fn scaled(mut self, factor: f64) -> ServerConfig {
        self.queue_awake_window = self.queue_awake_window.mul_f64(factor);
        self.queue_park_timeout = self.queue_park_timeout.mul_f64(factor);
        self.rollout = self.rollout.scaled(factor);
        self
    }
}

pub fn default_observe() -> Vec<Path> {
    use crate::objects::*;
    vec![
        Path::object(PATTERN_DETECTOR),
        Path::instance(ANOMALY_DETECTOR, 0),
        Path::instance(CLASSIFIER, 0),
        Path::instance(ANOMALY_ANALYZER, 0),
        Path::instance(ML_MODEL, 0),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(String),
    #[error("device unreachable")]
    Unreachable,
    #[error("device did not wake in time")]
    Timeout,
    #[error("request mailbox full")]
    MailboxFull,
    #[error("device answered {0}")]
    Device(Code),
    #[error("bad payload: {0}")]
    BadPayload(String),
}

impl DeviceError {
    pub fn http_status(&self) -> u16 {
        match self {
            DeviceError::UnknownEndpoint(_) => 404,
            DeviceError::Unreachable | DeviceError::MailboxFull => 503,
            DeviceError::Timeout => 504,
            DeviceError::BadPayload(_) => 502,
            DeviceError::Device(c) => match (c.class, c.detail) {
                (4, 0) => 400,
                (4, 1) => 401,
                (4, 3) => 403,
                (4, 4) => 404,
                (4, 5) => 405,
                (4, 6) => 406,
                (4, 13) => 413,
                (4, 15) => 415,
                _ => 502,
            },
        }
    }
}

impl From<CoapError> for DeviceError {
    fn from(e: CoapError) -> DeviceError {
        match e {
            CoapError::Response(code) => DeviceError::Device(code),
            _ => DeviceError::Unreachable,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ServerEvent {
    Registered { endpoint: String },
    Updated { endpoint: String },
    Deregistered { endpoint: String },
    Sample { endpoint: String, path: String, t: f64, value: ResourceValue },
}

#[derive(Default)]
struct Session {
    awake_until: Option<Instant>,
    parked: Vec<oneshot::Sender<()>>,
    observations: Vec<AbortHandle>,
}

impl Session {
    fn stop(&mut self) {
        for h in self.observations.drain(..) {
            h.abort();
        }
        self.parked.clear();
    }

    fn wake(&mut self, until: Instant) {
        self.awake_until = Some(until);
        for p in self.parked.drain(..) {
            let _ = p.send(());
        }
    }
}

struct Inner {
    config: ServerConfig,
    endpoint: CoapEndpoint,
    registry: Mutex<Registry>,
    telemetry: Mutex<TelemetryStore>,
    images: Mutex<ImageStore>,
    rollouts: Mutex<BTreeMap<u64, RolloutJob>>,
    sessions: Mutex<HashMap<String, Session>>,
    events: broadcast::Sender<ServerEvent>,
    tasks: Mutex<Vec<AbortHandle>>,
}

#[derive(Clone)]
pub struct Server {
    inner: Arc<Inner>,
}

impl Server {
    /// Start serving CoAP on `endpoint`. Telemetry and images are replayed
    /// from `config.data_dir` when set.
    pub fn start(
        endpoint: CoapEndpoint,
        requests: mpsc::UnboundedReceiver<IncomingRequest>,
        config: ServerConfig,
    ) -> io::Result<Server> {
        let (telemetry, images) = match &config.data_dir {
            Some(dir) => {
                let mut t = TelemetryStore::open(&dir.join("telemetry"))?;
                t.set_compact_after(config.compact_after);
                (t, ImageStore::open(&dir.join("images"))?)
            }
            None => (TelemetryStore::in_memory(), ImageStore::in_memory()),
        };
        let (events, _) = broadcast::channel(1024);
        let server = Server {
            inner: Arc::new(Inner {
                config,
                endpoint,
                registry: Mutex::new(Registry::new()),
                telemetry: Mutex::new(telemetry),
                images: Mutex::new(images),
                rollouts: Mutex::new(BTreeMap::new()),
                sessions: Mutex::new(HashMap::new()),
                events,
                tasks: Mutex::new(Vec::new()),
            }),
        };
        let s = server.clone();
        let task = tokio::spawn(async move { s.serve(requests).await });
        server.track(task.abort_handle());
        Ok(server)
    }

    fn track(&self, handle: AbortHandle) {
        let mut tasks = self.inner.tasks.lock().unwrap();
        tasks.retain(|t| !t.is_finished());
        tasks.push(handle);
    }

    pub(crate) fn spawn<F>(&self, fut: F)
    where
        F: std::future::Future<Output = ()> + Send + 'static,
    {
        let h = tokio::spawn(fut);
        self.track(h.abort_handle());
    }

    /// Stop every task and release the CoAP endpoint.
    pub fn shutdown(&self) {
        for t in self.inner.tasks.lock().unwrap().drain(..) {
            t.abort();
        }
        for s in self.inner.sessions.lock().unwrap().values_mut() {
            s.stop();
        }
        self.inner.endpoint.shutdown();
    }

    pub fn config(&self) -> &ServerConfig {
        &self.inner.config
    }

    pub fn coap_addr(&self) -> SocketAddr {
        self.inner.endpoint.local_addr()
    }

    pub fn now(&self) -> f64 {
        self.inner.config.clock.now()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<ServerEvent> {
        self.inner.events.subscribe()
    }

    fn emit(&self, ev: ServerEvent) {
        let _ = self.inner.events.send(ev);
    }

    // ---- registry views ----

    pub fn devices(&self) -> Vec<RegistrationRecord> {
        let now = self.now();
        let mut reg = self.inner.registry.lock().unwrap();
        for dead in reg.purge(now) {
            self.drop_session(&dead.endpoint);
        }
        reg.list().into_iter().cloned().collect()
    }

    pub fn device(&self, endpoint: &str) -> Option<RegistrationRecord> {
        self.inner.registry.lock().unwrap().get(endpoint).cloned()
    }

    /// Registered now, or known from stored telemetry.
    pub fn knows(&self, endpoint: &str) -> bool {
        self.device(endpoint).is_some() || self.inner.telemetry.lock().unwrap().has_endpoint(endpoint)
    }

    pub fn history(&self, endpoint: &str, path: &str, from: Option<f64>, to: Option<f64>) -> Vec<Sample> {
        self.inner.telemetry.lock().unwrap().range(endpoint, path, from, to)
    }

    pub fn series_paths(&self, endpoint: &str) -> Vec<String> {
        self.inner.telemetry.lock().unwrap().paths(endpoint)
    }

    pub fn latest(&self, endpoint: &str, path: &str) -> Option<Sample> {
        self.inner.telemetry.lock().unwrap().latest(endpoint, path).cloned()
    }

    pub fn add_image(&self, name: &str, version: &str, bytes: Vec<u8>) -> io::Result<ImageInfo> {
        let now = self.now();
        self.inner.images.lock().unwrap().add(name, version, bytes, now)
    }

    pub fn image(&self, id: u64) -> Option<Image> {
        self.inner.images.lock().unwrap().get(id).cloned()
    }

    pub fn images(&self) -> Vec<ImageInfo> {
        self.inner.images.lock().unwrap().list()
    }

    /// Where devices fetch image `id` in pull mode.
    pub fn image_uri(&self, id: u64) -> String {
        let base = self
            .inner
            .config
            .public_uri
            .clone()
            .unwrap_or_else(|| format!("coap://{}", self.coap_addr()));
        format!("{}/fw/{id}", base.trim_end_matches('/'))
    }

    // ---- device operations ----

    /// Wait until `endpoint` can be reached and return its address.
    pub async fn reachable(&self, endpoint: &str) -> Result<SocketAddr, DeviceError> {
        loop {
            let rx = {
                let reg = self.inner.registry.lock().unwrap();
                let rec = reg
                    .get(endpoint)
                    .ok_or_else(|| DeviceError::UnknownEndpoint(endpoint.to_string()))?;
                if !rec.queue_mode {
                    return Ok(rec.peer);
                }
                let mut sessions = self.inner.sessions.lock().unwrap();
                let s = sessions.entry(endpoint.to_string()).or_default();
                if s.awake_until.is_some_and(|t| t > Instant::now()) {
                    return Ok(rec.peer);
                }
                if s.parked.len() >= MAILBOX_CAPACITY {
                    return Err(DeviceError::MailboxFull);
                }
                let (tx, rx) = oneshot::channel();
                s.parked.push(tx);
                rx
            };
            match timeout(self.inner.config.queue_park_timeout, rx).await {
                Err(_) => return Err(DeviceError::Timeout),
                Ok(Err(_)) => return Err(DeviceError::Unreachable),
                Ok(Ok(())) => continue,
            }
        }
    }

    fn saw_activity(&self, endpoint: &str) {
        let queue = self
            .inner
            .registry
            .lock()
            .unwrap()
            .get(endpoint)
            .is_some_and(|r| r.queue_mode);
        if queue {
            let until = Instant::now() + self.inner.config.queue_awake_window;
            if let Some(s) = self.inner.sessions.lock().unwrap().get_mut(endpoint) {
                s.awake_until = Some(s.awake_until.map_or(until, |t| t.max(until)));
            }
        }
    }

    /// Send one request to a device, parking it while the device sleeps.
    pub async fn request(&self, endpoint: &str, msg: CoapMessage) -> Result<CoapMessage, DeviceError> {
        let peer = self.reachable(endpoint).await?;
        let resp = self.inner.endpoint.exchange(peer, msg).await?;
        self.saw_activity(endpoint);
        Ok(resp)
    }

    pub async fn read(&self, endpoint: &str, path: &Path) -> Result<Vec<SenmlRecord>, DeviceError> {
        let format = self.inner.config.format;
        let peer = self.reachable(endpoint).await?;
        let mut template = CoapMessage::request(Code::GET, &path.to_string());
        template.set_uint_option(option::ACCEPT, format.content_format() as u32);
        let (body, _) = block2_download(&self.inner.endpoint, peer, &template, READ_BLOCK_SIZE).await?;
        self.saw_activity(endpoint);
        senml_decode(&body, format).map_err(|e| DeviceError::BadPayload(e.to_string()))
    }

    pub async fn write(&self, endpoint: &str, path: &Path, records: &[SenmlRecord]) -> Result<(), DeviceError> {
        let format = self.inner.config.format;
        let payload = senml_encode(records, format).map_err(|e| DeviceError::BadPayload(e.to_string()))?;
        let code = if path.resource.is_some() { Code::PUT } else { Code::POST };
        let mut msg = CoapMessage::request(code, &path.to_string()).with_payload(payload);
        msg.set_content_format(format.content_format());
        expect(self.request(endpoint, msg).await?, Code::CHANGED)
    }

    pub async fn write_value(&self, endpoint: &str, path: &Path, value: ResourceValue) -> Result<(), DeviceError> {
        self.write(endpoint, path, &[SenmlRecord::new(*path, value)]).await
    }

    pub async fn execute(&self, endpoint: &str, path: &Path, args: &str) -> Result<(), DeviceError> {
        let msg = CoapMessage::request(Code::POST, &path.to_string()).with_payload(args.as_bytes().to_vec());
        expect(self.request(endpoint, msg).await?, Code::CHANGED)
    }

    // ---- CoAP side ----

    async fn serve(self, mut requests: mpsc::UnboundedReceiver<IncomingRequest>) {
        while let Some(req) = requests.recv().await {
            self.handle(req);
        }
    }

    fn handle(&self, req: IncomingRequest) {
        let path = req.message.uri_path();
        let segs: Vec<&str> = path.trim_start_matches('/').split('/').collect();
        match (req.message.code, segs.as_slice()) {
            (Code::POST, ["rd"]) => self.on_register(req),
            (Code::POST, ["rd", _]) => self.on_update(req, &path),
            (Code::DELETE, ["rd", _]) => self.on_deregister(req, &path),
            (Code::POST, ["bs"]) => self.on_bootstrap(req),
            (Code::GET, ["fw", id]) => {
                let id = id.parse().unwrap_or(0);
                self.serve_image(req, id)
            }
            _ => req.respond_code(Code::NOT_FOUND),
        }
    }

    fn on_register(&self, req: IncomingRequest) {
        let q: HashMap<String, String> = req.message.uri_queries().into_iter().collect();
        let Some(ep) = q.get("ep").filter(|e| !e.is_empty()).cloned() else {
            return req.respond_code(Code::BAD_REQUEST);
        };
        let lifetime = match q.get("lt").map(|v| v.parse::<u32>()) {
            None => crate::client::DEFAULT_LIFETIME,
            Some(Ok(lt)) if lt > 0 => lt,
            _ => return req.respond_code(Code::BAD_REQUEST),
        };
        let binding = q.get("b").cloned().unwrap_or_else(|| "U".into());
        let objects = links(&req.message.payload);
        let now = self.now();
        let (location, old) = self.inner.registry.lock().unwrap().register(
            registry::Registration {
                endpoint: ep.clone(),
                lifetime,
                binding,
                objects,
                peer: req.peer,
            },
            now,
        );
        if old.is_some() {
            tracing::debug!(endpoint = %ep, "re-registration replaces previous location");
        }
        let mut resp = CoapMessage::response_to(&req.message, Code::CREATED);
        resp.set_location_path(&location);
        req.respond(resp);
        {
            let mut sessions = self.inner.sessions.lock().unwrap();
            let s = sessions.entry(ep.clone()).or_default();
            for h in s.observations.drain(..) {
                h.abort();
            }
            s.wake(Instant::now() + self.inner.config.queue_awake_window);
        }
        tracing::info!(endpoint = %ep, %location, "registered");
        self.emit(ServerEvent::Registered { endpoint: ep.clone() });
        self.start_observations(&ep);
    }

    fn on_update(&self, req: IncomingRequest, location: &str) {
        let q: HashMap<String, String> = req.message.uri_queries().into_iter().collect();
        let lifetime = q.get("lt").and_then(|v| v.parse().ok()).filter(|lt| *lt > 0);
        let objects = (!req.message.payload.is_empty()).then(|| links(&req.message.payload));
        let now = self.now();
        let ep = {
            let mut reg = self.inner.registry.lock().unwrap();
            reg.update(location, now, lifetime, objects, req.peer)
                .map(|r| r.endpoint.clone())
        };
        let Some(ep) = ep else {
            return req.respond_code(Code::NOT_FOUND);
        };
        req.respond_code(Code::CHANGED);
        if let Some(s) = self.inner.sessions.lock().unwrap().get_mut(&ep) {
            s.wake(Instant::now() + self.inner.config.queue_awake_window);
        }
        self.emit(ServerEvent::Updated { endpoint: ep });
    }

    fn on_deregister(&self, req: IncomingRequest, location: &str) {
        let rec = self.inner.registry.lock().unwrap().deregister(location);
        let Some(rec) = rec else {
            return req.respond_code(Code::NOT_FOUND);
        };
        req.respond_code(Code::DELETED);
        self.drop_session(&rec.endpoint);
        self.emit(ServerEvent::Deregistered { endpoint: rec.endpoint });
    }

    fn drop_session(&self, endpoint: &str) {
        if let Some(mut s) = self.inner.sessions.lock().unwrap().remove(endpoint) {
            s.stop();
        }
    }

    fn start_observations(&self, endpoint: &str) {
        let Some(rec) = self.device(endpoint) else { return };
        for path in &self.inner.config.observe {
            let p = path.to_string();
            let advertised = rec
                .objects
                .iter()
                .any(|o| *o == p || o.starts_with(&format!("{p}/")) || p.starts_with(&format!("{o}/")));
            if !advertised {
                continue;
            }
            let server = self.clone();
            let ep = endpoint.to_string();
            let path = *path;
            let peer = rec.peer;
            let h = tokio::spawn(async move { server.observe_loop(ep, path, peer).await });
            if let Some(s) = self.inner.sessions.lock().unwrap().get_mut(endpoint) {
                s.observations.push(h.abort_handle());
            }
        }
    }

    async fn observe_loop(self, endpoint: String, path: Path, peer: SocketAddr) {
        let mut req = CoapMessage::request(Code::GET, &path.to_string());
        req.set_uint_option(option::ACCEPT, self.inner.config.format.content_format() as u32);
        let (first, mut obs) = match self.inner.endpoint.observe(peer, req).await {
            Ok(x) => x,
            Err(e) => {
                tracing::debug!(%endpoint, %path, error = %e, "observe failed");
                return;
            }
        };
        self.ingest(&endpoint, &first);
        while let Some(n) = obs.next().await {
            self.saw_activity(&endpoint);
            self.ingest(&endpoint, &n);
        }
    }

    fn ingest(&self, endpoint: &str, msg: &CoapMessage) {
        let Some(format) = msg.content_format().and_then(SenmlFormat::from_content_format) else {
            return;
        };
        let records = match senml_decode(&msg.payload, format) {
            Ok(r) => r,
            Err(e) => {
                tracing::debug!(%endpoint, error = %e, "undecodable notification");
                return;
            }
        };
        let now = self.now();
        let mut stored = Vec::with_capacity(records.len());
        {
            let mut tel = self.inner.telemetry.lock().unwrap();
            for r in records {
                let path = r.path.to_string();
                let t = r.time.map(|t| t as f64).unwrap_or(now);
                match tel.append(endpoint, &path, t, r.value.clone()) {
                    Ok(t) => stored.push((path, t, r.value)),
                    Err(e) => tracing::warn!(%endpoint, error = %e, "telemetry write failed"),
                }
            }
        }
        for (path, t, value) in stored {
            self.emit(ServerEvent::Sample {
                endpoint: endpoint.to_string(),
                path,
                t,
                value,
            });
        }
    }

    fn serve_image(&self, req: IncomingRequest, id: u64) {
        let Some(image) = self.image(id) else {
            return req.respond_code(Code::NOT_FOUND);
        };
        match block2_response(&req.message, &image.bytes, IMAGE_BLOCK_SIZE) {
            Ok(mut resp) => {
                if resp.code == Code::CONTENT {
                    resp.set_content_format(content_format::OCTET_STREAM);
                }
                req.respond(resp)
            }
            Err(_) => req.respond_code(Code::BAD_OPTION),
        }
    }

    fn on_bootstrap(&self, req: IncomingRequest) {
        let Some(bs) = self.inner.config.bootstrap.clone() else {
            return req.respond_code(Code::NOT_FOUND);
        };
        let Some(ep) = req
            .message
            .uri_queries()
            .into_iter()
            .find(|(k, _)| k == "ep")
            .map(|(_, v)| v)
            .filter(|v| !v.is_empty())
        else {
            return req.respond_code(Code::BAD_REQUEST);
        };
        if !bs.accept_unknown && !bs.known.contains(&ep) {
            tracing::info!(endpoint = %ep, "bootstrap refused for unknown endpoint");
            return req.respond_code(Code::FORBIDDEN);
        }
        let peer = req.peer;
        req.respond_code(Code::CHANGED);
        let server = self.clone();
        self.spawn(async move {
            if let Err(e) = server.provision(peer, &bs).await {
                tracing::debug!(endpoint = %ep, error = %e, "bootstrap provisioning failed");
            }
        });
    }

    async fn provision(&self, peer: SocketAddr, bs: &BootstrapConfig) -> Result<(), CoapError> {
        let format = self.inner.config.format;
        let sec = vec![
            SenmlRecord::new(
                Path::resource(SECURITY, 0, security::SERVER_URI),
                ResourceValue::String(bs.server_uri.clone()),
            ),
            SenmlRecord::new(
                Path::resource(SECURITY, 0, security::BOOTSTRAP_SERVER),
                ResourceValue::Boolean(false),
            ),
            SenmlRecord::new(Path::resource(SECURITY, 0, security::SHORT_SERVER_ID), ResourceValue::Integer(1)),
        ];
        let mut srv = vec![SenmlRecord::new(
            Path::resource(SERVER, 0, server_res::SHORT_SERVER_ID),
            ResourceValue::Integer(1),
        )];
        if let Some(lt) = bs.lifetime {
            srv.push(SenmlRecord::new(
                Path::resource(SERVER, 0, server_res::LIFETIME),
                ResourceValue::Integer(lt as i64),
            ));
        }
        let ep = &self.inner.endpoint;
        ep.exchange(peer, CoapMessage::request(Code::DELETE, "/0")).await?;
        for (path, records) in [("/0/0", sec), ("/1/0", srv)] {
            let payload = senml_encode(&records, format).expect("provisioning records encode");
            let mut msg = CoapMessage::request(Code::PUT, path).with_payload(payload);
            msg.set_content_format(format.content_format());
            let resp = ep.exchange(peer, msg).await?;
            if !resp.code.is_success() {
                return Err(CoapError::Response(resp.code));
            }
        }
        ep.exchange(peer, CoapMessage::request(Code::POST, "/bs")).await?;
        Ok(())
    }
}

fn expect(resp: CoapMessage, code: Code) -> Result<(), DeviceError> {
    if resp.code == code || resp.code.is_success() {
        Ok(())
    } else {
        Err(DeviceError::Device(resp.code))
    }
}

fn links(payload: &[u8]) -> Vec<String> {
    parse_links(&String::from_utf8_lossy(payload))
        .iter()
        .map(|p| p.to_string())
        .collect()
}
