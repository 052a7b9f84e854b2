//! Scenario harness: the four-phase case study and a multi-device soak.
//!
//! Run on a paused tokio clock the simulated link makes every run
//! reproducible; the harness drives the server through its HTTP router
//! in-process.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use tokio::time::{sleep, Instant};
use tower::ServiceExt;

use super::device::{DeviceCounters, DeviceSpec, SimDevice, Tick};
use super::firmware::{FW1_SIZE, FW2_SIZE};
use super::motion::Pattern;
use super::{build_firmware, plot, train_model, Link};
use crate::client::ClientConfig;
use crate::coap::{Fate, LinkConfig, SimNetwork, TransmissionParams};
use crate::ml::{section_sizes, ModelBundle, SampleWindow, SectionSizes};
use crate::server::{api, RolloutMode, Server, ServerConfig};
use crate::time::Clock;

/// Unix time the simulated clock starts at.
pub const SIM_EPOCH: f64 = 1_700_000_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkMode {
    Sim,
    Udp,
}

#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub devices: usize,
    pub seed: u64,
    /// Loss probability of the simulated link.
    pub loss: f64,
    pub link: LinkMode,
    /// Seed of the simulated link; defaults to `seed`.
    pub link_seed: Option<u64>,
    /// Training windows per class.
    pub train_windows: usize,
    /// Windows per pattern in phases 1 and 2.
    pub phase_windows: usize,
    /// Evaluation windows after the update, spread over all patterns.
    pub eval_windows: usize,
    pub rollout_mode: RolloutMode,
    pub queue_mode: bool,
    /// Multiplies every protocol and loop timer.
    pub time_scale: f64,
    pub soak_duration: Duration,
    /// Plot files go here.
    pub out_dir: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> ScenarioConfig {
        ScenarioConfig {
            devices: 1,
            seed: 1,
            loss: 0.0,
            link: LinkMode::Sim,
            link_seed: None,
            train_windows: 120,
            phase_windows: 30,
            eval_windows: 200,
            rollout_mode: RolloutMode::Push,
            queue_mode: false,
            time_scale: 1.0,
            soak_duration: Duration::from_secs(6 * 3600),
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub id: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct PhaseReport {
    pub phase: u8,
    pub title: String,
    pub passed: bool,
    /// First failing check.
    pub failed_step: Option<String>,
    pub checks: Vec<Check>,
    pub sim_seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Footprint {
    pub firmware_v1: usize,
    pub firmware_v2: usize,
    pub model_v1: SectionSizes,
    pub model_v2: Option<SectionSizes>,
    pub blocks_v2_512: usize,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct LinkStats {
    pub datagrams: usize,
    pub lost: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct DeviceSummary {
    pub endpoint: String,
    pub ticks: usize,
    pub counters: DeviceCounters,
    pub model: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub loss: f64,
    pub link: LinkMode,
    pub devices: usize,
    pub passed: bool,
    pub phases: Vec<PhaseReport>,
    pub footprint: Option<Footprint>,
    pub metrics: BTreeMap<String, f64>,
    pub plots: Vec<String>,
    pub link_stats: Option<LinkStats>,
    pub fleet: Vec<DeviceSummary>,
    pub sim_seconds: f64,
    pub wall_seconds: f64,
}

impl ScenarioReport {
    /// One line per check, for terminals.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for p in &self.phases {
            out.push_str(&format!(
                "phase {} {}: {}\n",
                p.phase,
                p.title,
                if p.passed { "ok" } else { "FAILED" }
            ));
            for c in &p.checks {
                out.push_str(&format!("  [{}] {} {}\n", if c.passed { "ok" } else { "!!" }, c.id, c.detail));
            }
        }
        out.push_str(&format!(
            "{}: {} ({:.1} s simulated, {:.1} s wall)\n",
            self.scenario,
            if self.passed { "passed" } else { "failed" },
            self.sim_seconds,
            self.wall_seconds
        ));
        out
    }
}

struct Phase {
    n: u8,
    title: &'static str,
    checks: Vec<Check>,
    started: Instant,
}

impl Phase {
    fn new(n: u8, title: &'static str) -> Phase {
        Phase {
            n,
            title,
            checks: Vec::new(),
            started: Instant::now(),
        }
    }

    fn check(&mut self, id: &str, passed: bool, detail: impl Into<String>) -> bool {
        let detail = detail.into();
        if !passed {
            tracing::warn!(step = id, %detail, "check failed");
        }
        self.checks.push(Check {
            id: id.to_string(),
            passed,
            detail,
        });
        passed
    }

    fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn finish(self) -> PhaseReport {
        PhaseReport {
            phase: self.n,
            title: self.title.to_string(),
            passed: self.passed(),
            failed_step: self.checks.iter().find(|c| !c.passed).map(|c| c.id.clone()),
            checks: self.checks,
            sim_seconds: self.started.elapsed().as_secs_f64(),
        }
    }
}

/// Talks to the server through its HTTP router without a socket.
#[derive(Clone)]
struct Api {
    router: Router,
}

impl Api {
    async fn call(&self, method: Method, uri: &str, body: Vec<u8>) -> (StatusCode, Value) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(Body::from(body))
            .expect("request");
        let resp = self.router.clone().oneshot(req).await.expect("infallible router");
        let status = resp.status();
        let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap_or_default();
        (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
    }

    async fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.call(Method::GET, uri, Vec::new()).await
    }

    /// GET with a few retries, for reads that cross a lossy link.
    async fn get_ok(&self, uri: &str) -> Result<Value, String> {
        let mut last = String::new();
        for _ in 0..4 {
            let (status, v) = self.get(uri).await;
            if status == StatusCode::OK {
                return Ok(v);
            }
            last = format!("{status} {v}");
            sleep(Duration::from_secs(2)).await;
        }
        Err(last)
    }

    async fn resource(&self, ep: &str, path: &str) -> Result<Value, String> {
        self.get_ok(&format!("/api/devices/{ep}/resources/{path}")).await
    }
}

struct Fleet {
    link: Link,
    net: Option<SimNetwork>,
    server: Server,
    api: Api,
    devices: Vec<SimDevice>,
    clock: Clock,
    scale: f64,
}

fn scaled(d: Duration, scale: f64) -> Duration {
    d.mul_f64(scale)
}

fn device_addr(i: usize) -> SocketAddr {
    SocketAddr::from(([10, 1, (i >> 8) as u8, (i & 0xff) as u8], 5683))
}

impl Fleet {
    async fn start(cfg: &ScenarioConfig, server_config: ServerConfig) -> Result<Fleet, String> {
        let clock = Clock::starting_at(SIM_EPOCH);
        let (link, net, server_bind) = match cfg.link {
            LinkMode::Sim => {
                let net = SimNetwork::new(LinkConfig::lossy(cfg.loss), cfg.link_seed.unwrap_or(cfg.seed));
                (Link::Sim(net.clone()), Some(net), SocketAddr::from(([10, 0, 0, 1], 5683)))
            }
            LinkMode::Udp => (Link::Udp, None, SocketAddr::from(([127, 0, 0, 1], 0))),
        };
        let (ep, rx) = link
            .endpoint(server_bind, TransmissionParams::default(), cfg.seed)
            .await
            .map_err(|e| e.to_string())?;
        let server = Server::start(
            ep,
            rx,
            ServerConfig {
                clock,
                ..server_config.scaled(cfg.time_scale)
            },
        )
        .map_err(|e| e.to_string())?;
        Ok(Fleet {
            link,
            net,
            api: Api {
                router: api::router(server.clone()),
            },
            server,
            devices: Vec::new(),
            clock,
            scale: cfg.time_scale,
        })
    }

    fn add_device(&mut self, mut spec: DeviceSpec, image: &[u8]) -> SimDevice {
        spec.window_period = scaled(spec.window_period, self.scale);
        spec.confirm_timeout = scaled(spec.confirm_timeout, self.scale);
        spec.boot_delay = scaled(spec.boot_delay, self.scale);
        spec.client = spec.client.scaled(self.scale);
        let dev = SimDevice::new(spec, image);
        tokio::spawn(dev.clone().run(self.link.clone(), self.clock));
        self.devices.push(dev.clone());
        dev
    }

    fn server_uri(&self) -> String {
        format!("coap://{}", self.server.coap_addr())
    }

    fn window_period(&self) -> Duration {
        self.devices
            .first()
            .map(|d| d.spec.window_period)
            .unwrap_or(Duration::from_secs(3))
    }

    async fn wait_registered(&self, limit: Duration) -> bool {
        let end = Instant::now() + limit;
        loop {
            if self.devices.iter().all(|d| self.server.device(d.name()).is_some()) {
                return true;
            }
            if Instant::now() >= end {
                return false;
            }
            sleep(Duration::from_millis(200)).await;
        }
    }

    /// Run every device on `pattern` for `windows` more windows.
    async fn run_pattern(&self, pattern: Pattern, windows: usize) {
        let targets: Vec<usize> = self
            .devices
            .iter()
            .map(|d| {
                d.set_pattern(pattern);
                d.tick_count() + windows
            })
            .collect();
        let step = self.window_period();
        // a generous bound: reboots or stalls must not hang the harness
        let end = Instant::now() + step * (windows as u32 * 4 + 20);
        while Instant::now() < end {
            if self.devices.iter().zip(&targets).all(|(d, t)| d.tick_count() >= *t) {
                return;
            }
            sleep(step / 2).await;
        }
    }

    fn link_stats(&self) -> Option<LinkStats> {
        let net = self.net.as_ref()?;
        let cap = net.capture();
        Some(LinkStats {
            datagrams: cap.len(),
            lost: cap.iter().filter(|r| r.fate == Fate::Lost).count(),
            bytes: cap.iter().map(|r| r.len).sum(),
        })
    }

    fn summaries(&self) -> Vec<DeviceSummary> {
        self.devices
            .iter()
            .map(|d| DeviceSummary {
                endpoint: d.name().to_string(),
                ticks: d.tick_count(),
                counters: d.counters(),
                model: d.model().map(|m| m.config.name),
            })
            .collect()
    }

    fn stop(&self) {
        for d in &self.devices {
            d.stop();
        }
        self.server.shutdown();
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn value_str(v: &Value) -> Option<&str> {
    v.get("value")?.get("value")?.as_str()
}

/// Detection counters per /33650 instance from a read of the object.
fn pattern_counters(v: &Value) -> BTreeMap<u16, i64> {
    let mut out = BTreeMap::new();
    for r in v.get("records").and_then(Value::as_array).into_iter().flatten() {
        let path = r.get("path").and_then(Value::as_str).unwrap_or("");
        let segs: Vec<&str> = path.trim_start_matches('/').split('/').collect();
        if let [_, inst, "1"] = segs.as_slice() {
            if let (Ok(i), Some(n)) = (inst.parse(), r.get("value").and_then(|x| x.get("value")).and_then(Value::as_i64)) {
                out.insert(i, n);
            }
        }
    }
    out
}

fn same_window(a: &SampleWindow, b: &SampleWindow) -> bool {
    a.samples.len() == b.samples.len()
        && a
            .samples
            .iter()
            .zip(&b.samples)
            .all(|(x, y)| x.iter().zip(y).all(|(p, q)| (*p as f32) == (*q as f32)))
}

fn window_from_json(v: &Value) -> Option<SampleWindow> {
    let samples = v
        .get("samples")?
        .as_array()?
        .iter()
        .map(|s| {
            let a = s.as_array()?;
            Some([a.first()?.as_f64()?, a.get(1)?.as_f64()?, a.get(2)?.as_f64()?])
        })
        .collect::<Option<Vec<_>>>()?;
    Some(SampleWindow {
        samples,
        rate_hz: v.get("rate_hz")?.as_u64()? as u16,
    })
}

const PHASE1_PATTERNS: [Pattern; 3] = [Pattern::Idle, Pattern::Circle, Pattern::ShakeX];

/// The case study: deploy a three-class model, watch anomalies rise on an
/// unknown movement, fetch the captured window, then ship a four-class
/// model over the air.
pub async fn run_phases(cfg: &ScenarioConfig) -> ScenarioReport {
    let wall = std::time::Instant::now();
    let sim_start = Instant::now();
    let mut report = ScenarioReport {
        scenario: "phases".into(),
        seed: cfg.seed,
        loss: cfg.loss,
        link: cfg.link,
        devices: cfg.devices,
        passed: false,
        phases: Vec::new(),
        footprint: None,
        metrics: BTreeMap::new(),
        plots: Vec::new(),
        link_stats: None,
        fleet: Vec::new(),
        sim_seconds: 0.0,
        wall_seconds: 0.0,
    };
    let fleet = match Fleet::start(cfg, ServerConfig::default()).await {
        Ok(f) => f,
        Err(e) => {
            let mut p = Phase::new(1, "deploy MODEL1");
            p.check("1.setup", false, e);
            report.phases.push(p.finish());
            return report;
        }
    };
    let mut fleet = fleet;
    let passed = phases(cfg, &mut fleet, &mut report).await;
    report.passed = passed && report.phases.len() == 4;
    report.link_stats = fleet.link_stats();
    report.fleet = fleet.summaries();
    fleet.stop();
    report.sim_seconds = sim_start.elapsed().as_secs_f64();
    report.wall_seconds = wall.elapsed().as_secs_f64();
    report
}

async fn phases(cfg: &ScenarioConfig, fleet: &mut Fleet, report: &mut ScenarioReport) -> bool {
    // ---- phase 1 ----
    let mut p = Phase::new(1, "deploy MODEL1");
    let model1 = match train_model(&PHASE1_PATTERNS, cfg.train_windows, "MODEL1", "1.0.0", cfg.seed) {
        Ok(m) => m,
        Err(e) => {
            p.check("1.train", false, e.to_string());
            report.phases.push(p.finish());
            return false;
        }
    };
    p.check("1.train", model1.config.class_names.len() == 3, "3 classes");
    let fw1 = match build_firmware(&model1, "1.0.0", FW1_SIZE) {
        Ok(f) => f,
        Err(e) => {
            p.check("1.firmware", false, e);
            report.phases.push(p.finish());
            return false;
        }
    };
    p.check("1.firmware", fw1.len() == FW1_SIZE, format!("{} bytes", fw1.len()));
    let sizes1 = section_sizes(&model1.encode().unwrap_or_default()).ok();
    let uri = fleet.server_uri();
    for i in 0..cfg.devices {
        let mut client = ClientConfig::new(&format!("tinyml-{:03}", i + 1), &uri);
        client.queue_mode = cfg.queue_mode;
        let addr = match cfg.link {
            LinkMode::Sim => device_addr(i + 1),
            LinkMode::Udp => SocketAddr::from(([127, 0, 0, 1], 0)),
        };
        let spec = DeviceSpec::new(client, addr, cfg.seed.wrapping_add(17 * (i as u64 + 1)));
        fleet.add_device(spec, &fw1);
    }
    let ok = fleet.wait_registered(scaled(Duration::from_secs(300), fleet.scale)).await;
    p.check("1.register", ok, format!("{} devices", fleet.devices.len()));
    if !ok {
        report.phases.push(p.finish());
        return false;
    }
    for d in &fleet.devices {
        let name = fleet.api.resource(d.name(), "33654/0/0").await;
        let got = name.as_ref().ok().and_then(value_str).map(str::to_string);
        p.check(
            "1.model-name",
            got.as_deref() == Some("MODEL1"),
            format!("{}: {:?}", d.name(), got.or(name.err())),
        );
    }
    let start1 = fleet.devices.iter().map(|d| d.tick_count()).collect::<Vec<_>>();
    for pat in PHASE1_PATTERNS {
        fleet.run_pattern(pat, cfg.phase_windows).await;
    }
    let mut anomaly_counts = BTreeMap::new();
    let mut phase1_scores = Vec::new();
    for (d, s) in fleet.devices.iter().zip(&start1) {
        let ticks = d.ticks();
        let logged = ticks.len();
        phase1_scores.extend(ticks[*s..].iter().map(|t| t.score));
        match fleet.api.resource(d.name(), "33650").await {
            Ok(v) => {
                let counters = pattern_counters(&v);
                let total: i64 = counters.values().sum();
                let all_classes = (0..3).all(|c| counters.get(&c).is_some_and(|n| *n > 0));
                p.check(
                    "1.pattern-counters",
                    all_classes && total >= logged as i64,
                    format!("{}: {counters:?}, {logged} windows", d.name()),
                );
            }
            Err(e) => {
                p.check("1.pattern-counters", false, e);
            }
        }
        let a = fleet.api.resource(d.name(), "33651/0/0").await.ok();
        anomaly_counts.insert(d.name().to_string(), a.as_ref().and_then(|v| v.get("value")?.get("value")?.as_i64()).unwrap_or(0));
    }
    let mean1 = mean(phase1_scores.iter().copied());
    report.metrics.insert("phase1_mean_score".into(), mean1);
    let accuracy1 = {
        let ticks: Vec<Tick> = fleet
            .devices
            .iter()
            .zip(&start1)
            .flat_map(|(d, s)| d.ticks().split_off(*s))
            .collect();
        ticks.iter().filter(|t| t.correct()).count() as f64 / ticks.len().max(1) as f64
    };
    report.metrics.insert("phase1_accuracy".into(), accuracy1);
    let passed = p.passed();
    report.phases.push(p.finish());
    if !passed {
        return false;
    }

    // ---- phase 2 ----
    let mut p = Phase::new(2, "anomalous movement");
    let start2 = fleet.devices.iter().map(|d| d.tick_count()).collect::<Vec<_>>();
    fleet.run_pattern(Pattern::UpDownZ, cfg.phase_windows).await;
    fleet.devices.iter().for_each(|d| d.set_pattern(Pattern::Idle));
    let mut phase2_scores = Vec::new();
    for (d, s) in fleet.devices.iter().zip(&start2) {
        let ticks = d.ticks();
        phase2_scores.extend(ticks[*s..].iter().filter(|t| t.pattern == Pattern::UpDownZ).map(|t| t.score));
        let before = anomaly_counts.get(d.name()).copied().unwrap_or(0);
        let now = fleet
            .api
            .resource(d.name(), "33651/0/0")
            .await
            .ok()
            .and_then(|v| v.get("value")?.get("value")?.as_i64());
        p.check(
            "2.anomaly-counter",
            now.is_some_and(|n| n > before),
            format!("{}: {before} -> {now:?}", d.name()),
        );
    }
    let mean2 = mean(phase2_scores.iter().copied());
    report.metrics.insert("phase2_mean_score".into(), mean2);
    p.check("2.score-rise", mean2 > mean1, format!("{mean2:.3} > {mean1:.3}"));
    let passed = p.passed();
    report.phases.push(p.finish());
    if !passed {
        return false;
    }

    // ---- phase 3 ----
    let mut p = Phase::new(3, "captured window");
    for d in &fleet.devices {
        let caps = fleet
            .api
            .get_ok(&format!("/api/devices/{}/anomaly-captures?live=true", d.name()))
            .await;
        let latest = caps
            .as_ref()
            .ok()
            .and_then(|v| v.get("captures")?.as_array()?.last().cloned());
        let Some(window) = latest.as_ref().and_then(window_from_json) else {
            p.check("3.capture", false, format!("{}: {:?}", d.name(), caps.err()));
            continue;
        };
        p.check("3.capture-length", window.samples.len() == 32, format!("{} samples", window.samples.len()));
        let ticks = d.ticks();
        let origin = ticks.iter().find(|t| same_window(&t.window, &window));
        p.check(
            "3.capture-ground-truth",
            origin.is_some_and(|t| t.pattern == Pattern::UpDownZ),
            format!("{}: {:?}", d.name(), origin.map(|t| t.pattern)),
        );
        let boot = ticks.last().map(|t| t.boot).unwrap_or(0);
        let argmax = ticks
            .iter()
            .filter(|t| t.boot == boot)
            .max_by(|a, b| a.score.total_cmp(&b.score));
        p.check(
            "3.capture-is-max",
            argmax.is_some_and(|t| same_window(&t.window, &window)),
            format!("max score {:?}", argmax.map(|t| t.score)),
        );
        if let Some(dir) = &cfg.out_dir {
            let title = format!(
                "{} captured window, score {:.2}",
                d.name(),
                origin.map(|t| t.score).unwrap_or(f64::NAN)
            );
            match plot::write_plot(dir, &format!("capture-{}", d.name()), &window, &title) {
                Ok(paths) => report.plots.extend(paths),
                Err(e) => {
                    p.check("3.plot", false, e.to_string());
                }
            }
        }
    }
    let passed = p.passed();
    report.phases.push(p.finish());
    if !passed {
        return false;
    }

    // ---- phase 4 ----
    let mut p = Phase::new(4, "deploy MODEL2 over the air");
    let model2 = match train_model(&Pattern::ALL, cfg.train_windows, "MODEL2", "2.0.0", cfg.seed.wrapping_add(1)) {
        Ok(m) => m,
        Err(e) => {
            p.check("4.train", false, e.to_string());
            report.phases.push(p.finish());
            return false;
        }
    };
    p.check("4.classes", model2.config.class_names.len() == 4, "4 classes");
    let fw2 = match build_firmware(&model2, "2.0.0", FW2_SIZE) {
        Ok(f) => f,
        Err(e) => {
            p.check("4.firmware", false, e);
            report.phases.push(p.finish());
            return false;
        }
    };
    p.check("4.firmware-size", fw2.len() == FW2_SIZE && fw2.len() > fw1.len(), format!("{} bytes", fw2.len()));
    report.footprint = Some(Footprint {
        firmware_v1: fw1.len(),
        firmware_v2: fw2.len(),
        model_v1: sizes1.unwrap_or(SectionSizes {
            forest: 0,
            kmeans: 0,
            scaler: 0,
            config: 0,
            total: 0,
        }),
        model_v2: model2.encode().ok().and_then(|b| section_sizes(&b).ok()),
        blocks_v2_512: fw2.len().div_ceil(512),
    });
    let (status, image) = fleet
        .api
        .call(Method::POST, "/api/images?name=tinyml-fw&version=2.0.0", fw2.clone())
        .await;
    let image_id = image.get("id").and_then(Value::as_u64);
    if !p.check("4.upload", status == StatusCode::CREATED && image_id.is_some(), format!("{status}")) {
        report.phases.push(p.finish());
        return false;
    }
    let targets: Vec<String> = fleet.devices.iter().map(|d| d.name().to_string()).collect();
    let body = json!({ "image_id": image_id, "mode": cfg.rollout_mode, "targets": targets });
    let (status, job) = fleet
        .api
        .call(Method::POST, "/api/rollouts", serde_json::to_vec(&body).unwrap_or_default())
        .await;
    let job_id = job.get("id").and_then(Value::as_u64);
    if !p.check("4.rollout-start", status == StatusCode::CREATED && job_id.is_some(), format!("{status} {job}")) {
        report.phases.push(p.finish());
        return false;
    }
    let rollout_started = Instant::now();
    let deadline = Instant::now() + scaled(Duration::from_secs(4 * 3600), fleet.scale);
    let job = loop {
        let (_, job) = fleet.api.get(&format!("/api/rollouts/{}", job_id.unwrap_or(0))).await;
        if job.get("done").and_then(Value::as_bool) == Some(true) || Instant::now() >= deadline {
            break job;
        }
        sleep(scaled(Duration::from_secs(2), fleet.scale)).await;
    };
    report
        .metrics
        .insert("rollout_seconds".into(), rollout_started.elapsed().as_secs_f64());
    let statuses: Vec<String> = job
        .get("targets")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
        .map(|t| t.get("status").and_then(Value::as_str).unwrap_or("?").to_string())
        .collect();
    p.check(
        "4.rollout-updated",
        statuses.len() == fleet.devices.len() && statuses.iter().all(|s| s == "updated"),
        format!("{statuses:?}"),
    );
    let ok = fleet.wait_registered(scaled(Duration::from_secs(300), fleet.scale)).await;
    p.check("4.re-register", ok, "");
    for d in &fleet.devices {
        let name = fleet.api.resource(d.name(), "33654/0/0").await;
        let got = name.as_ref().ok().and_then(value_str).map(str::to_string);
        p.check(
            "4.model-name",
            got.as_deref() == Some("MODEL2"),
            format!("{}: {:?}", d.name(), got.or(name.err())),
        );
        let version = fleet.api.resource(d.name(), "3/0/3").await.ok();
        p.check(
            "4.firmware-version",
            version.as_ref().and_then(value_str) == Some("2.0.0"),
            format!("{:?}", version.as_ref().and_then(value_str)),
        );
    }
    let start4: Vec<usize> = fleet.devices.iter().map(|d| d.tick_count()).collect();
    let per = cfg.eval_windows.div_ceil(Pattern::ALL.len());
    for pat in Pattern::ALL {
        fleet.run_pattern(pat, per).await;
    }
    let eval: Vec<Tick> = fleet
        .devices
        .iter()
        .zip(&start4)
        .flat_map(|(d, s)| {
            let mut t = d.ticks().split_off(*s);
            // windows scored by the new model only
            t.retain(|t| t.model == "MODEL2");
            t
        })
        .collect();
    let accuracy = eval.iter().filter(|t| t.correct()).count() as f64 / eval.len().max(1) as f64;
    report.metrics.insert("phase4_accuracy".into(), accuracy);
    p.check(
        "4.accuracy",
        eval.len() >= cfg.eval_windows && accuracy >= 0.9,
        format!("{accuracy:.3} over {} windows", eval.len()),
    );
    let threshold = model2.kmeans.threshold;
    let updown = mean(eval.iter().filter(|t| t.pattern == Pattern::UpDownZ).map(|t| t.score));
    report.metrics.insert("phase4_updown_mean_score".into(), updown);
    report.metrics.insert("phase4_threshold".into(), threshold);
    p.check(
        "4.updown-under-threshold",
        updown < threshold,
        format!("{updown:.3} < {threshold:.3}"),
    );
    let passed = p.passed();
    report.phases.push(p.finish());
    passed
}

/// Many devices, random movements, a lossy link and queue mode on every
/// other device, run for `soak_duration` of simulated time.
pub async fn run_soak(cfg: &ScenarioConfig) -> ScenarioReport {
    let wall = std::time::Instant::now();
    let sim_start = Instant::now();
    let mut report = ScenarioReport {
        scenario: "soak".into(),
        seed: cfg.seed,
        loss: cfg.loss,
        link: cfg.link,
        devices: cfg.devices,
        passed: false,
        phases: Vec::new(),
        footprint: None,
        metrics: BTreeMap::new(),
        plots: Vec::new(),
        link_stats: None,
        fleet: Vec::new(),
        sim_seconds: 0.0,
        wall_seconds: 0.0,
    };
    let mut p = Phase::new(1, "soak");
    let mut fleet = match Fleet::start(cfg, ServerConfig::default()).await {
        Ok(f) => f,
        Err(e) => {
            p.check("soak.setup", false, e);
            report.phases.push(p.finish());
            return report;
        }
    };
    let model = match train_model(&Pattern::ALL, cfg.train_windows, "MODEL2", "2.0.0", cfg.seed) {
        Ok(m) => m,
        Err(e) => {
            p.check("soak.train", false, e.to_string());
            report.phases.push(p.finish());
            return report;
        }
    };
    let fw = build_firmware(&model, "2.0.0", FW2_SIZE).unwrap_or_default();
    let uri = fleet.server_uri();
    for i in 0..cfg.devices {
        let mut client = ClientConfig::new(&format!("soak-{:03}", i + 1), &uri);
        client.queue_mode = cfg.queue_mode || i % 2 == 1;
        client.lifetime = 3600;
        let addr = match cfg.link {
            LinkMode::Sim => device_addr(i + 1),
            LinkMode::Udp => SocketAddr::from(([127, 0, 0, 1], 0)),
        };
        let mut spec = DeviceSpec::new(client, addr, cfg.seed.wrapping_add(31 * (i as u64 + 1)));
        spec.analysis_period = Some(3600);
        fleet.add_device(spec, &fw);
    }
    let ok = fleet.wait_registered(scaled(Duration::from_secs(600), fleet.scale)).await;
    p.check("soak.register", ok, format!("{} devices", cfg.devices));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x50a4);
    let end = Instant::now() + scaled(cfg.soak_duration, fleet.scale);
    while Instant::now() < end {
        for d in &fleet.devices {
            d.set_pattern(Pattern::ALL[rng.random_range(0..Pattern::ALL.len())]);
        }
        let dwell = Duration::from_secs(rng.random_range(60..600));
        sleep(scaled(dwell, fleet.scale).min(end.saturating_duration_since(Instant::now()))).await;
    }
    for d in &fleet.devices {
        d.set_paused(true);
    }
    // let queued data drain over one more wake cycle
    sleep(scaled(Duration::from_secs(300), fleet.scale)).await;

    let ok = fleet.wait_registered(scaled(Duration::from_secs(600), fleet.scale)).await;
    p.check("soak.registered-at-end", ok, "");
    let mut total_ticks = 0usize;
    let mut correct = 0usize;
    for d in &fleet.devices {
        let ticks = d.ticks();
        total_ticks += ticks.len();
        correct += ticks.iter().filter(|t| t.correct()).count();
        let counters = d.counters();
        p.check(
            "soak.no-pipeline-errors",
            counters.pipeline_errors == 0,
            format!("{}: {}", d.name(), counters.pipeline_errors),
        );
        let hist = fleet.server.history(d.name(), "/33652/0/1", None, None);
        p.check(
            "soak.telemetry",
            !hist.is_empty() && hist.windows(2).all(|w| w[0].t <= w[1].t),
            format!("{}: {} samples", d.name(), hist.len()),
        );
        if let Some(h) = d.client() {
            let st = h.status();
            p.check(
                "soak.queue-bounded",
                st.queued <= crate::client::DEFAULT_QUEUE_CAPACITY,
                format!("{}: queued {}, dropped {}", d.name(), st.queued, st.dropped),
            );
            report
                .metrics
                .insert(format!("{}.updates", d.name()), st.updates as f64);
            report
                .metrics
                .insert(format!("{}.notifications", d.name()), st.notifications_sent as f64);
        }
        // every classified window is counted exactly once on the device
        let sum = match d.client() {
            Some(h) => h
                .with_store(|s| {
                    s.instances(crate::objects::PATTERN_DETECTOR)
                        .into_iter()
                        .filter_map(|i| s.get_i64(&crate::lwm2m::Path::resource(crate::objects::PATTERN_DETECTOR, i, 1)))
                        .sum::<i64>()
                })
                .await
                .ok(),
            None => None,
        };
        let this_boot = ticks.iter().filter(|t| Some(t.boot) == ticks.last().map(|l| l.boot)).count();
        p.check(
            "soak.counter-sum",
            sum == Some(this_boot as i64),
            format!("{}: {sum:?} vs {this_boot}", d.name()),
        );
    }
    report.metrics.insert("windows".into(), total_ticks as f64);
    report
        .metrics
        .insert("accuracy".into(), correct as f64 / total_ticks.max(1) as f64);
    report.passed = p.passed();
    report.phases.push(p.finish());
    report.link_stats = fleet.link_stats();
    report.fleet = fleet.summaries();
    fleet.stop();
    report.sim_seconds = sim_start.elapsed().as_secs_f64();
    report.wall_seconds = wall.elapsed().as_secs_f64();
    report
}

/// Model trained exactly as the phase scenario trains MODEL1.
pub fn phase1_model(cfg: &ScenarioConfig) -> Result<ModelBundle, crate::ml::MlError> {
    train_model(&PHASE1_PATTERNS, cfg.train_windows, "MODEL1", "1.0.0", cfg.seed)
}
