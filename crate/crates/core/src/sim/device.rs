//! One simulated device: bootloader, inference loop and LwM2M client,
//! rebooting into whatever the flash holds whenever the client asks.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Serialize;
use tokio::sync::watch;
use tokio::time::{interval, sleep, MissedTickBehavior};

use super::firmware::FirmwareImage;
use super::flash::{BootError, Flash, FlashPlatform};
use super::motion::{MotionGenerator, Pattern};
use super::Link;
use crate::client::{Client, ClientConfig, ClientExit, ClientHandle};
use crate::lwm2m::{ObjectStore, Path};
use crate::ml::{model_blob_decode, ModelBundle, Pipeline, SampleWindow};
use crate::objects::{self, Analyzer};
use crate::time::Clock;

#[derive(Clone, Debug)]
pub struct DeviceSpec {
    pub client: ClientConfig,
    pub addr: SocketAddr,
    /// Time covered by one window; the loop runs once per window.
    pub window_period: Duration,
    /// Reboot if a freshly swapped image is still unconfirmed after this.
    pub confirm_timeout: Duration,
    pub boot_delay: Duration,
    /// Overrides the analysis period of /33653, seconds.
    pub analysis_period: Option<i64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DeviceSpec {
    pub fn new(client: ClientConfig, addr: SocketAddr, seed: u64) -> DeviceSpec {
        DeviceSpec {
            client,
            addr,
            window_period: Duration::from_millis(3200),
            confirm_timeout: Duration::from_secs(300),
            boot_delay: Duration::from_secs(1),
            analysis_period: None,
            noise_sigma: super::motion::DEFAULT_NOISE,
            seed,
        }
    }
}

/// One loop iteration as seen by the harness.
#[derive(Clone, Debug, Serialize)]
pub struct Tick {
    /// Unix seconds.
    pub t: f64,
    pub boot: u32,
    pub model: String,
    pub pattern: Pattern,
    pub class: usize,
    pub class_name: String,
    pub score: f64,
    pub threshold: f64,
    pub anomalous: bool,
    #[serde(skip)]
    pub window: SampleWindow,
}

impl Tick {
    /// Whether the prediction names the pattern that was generated.
    pub fn correct(&self) -> bool {
        self.class_name == self.pattern.label()
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct DeviceCounters {
    pub boots: u32,
    pub power_cuts: u32,
    pub swaps: u32,
    pub reverts: u32,
    pub refused: u32,
    pub watchdog_reboots: u32,
    pub pipeline_errors: u32,
    pub client_errors: u32,
}

struct Shared {
    pattern: Mutex<Pattern>,
    ticks: Mutex<Vec<Tick>>,
    counters: Mutex<DeviceCounters>,
    client: Mutex<Option<ClientHandle>>,
    model: Mutex<Option<ModelBundle>>,
    /// Set to stop ticking without stopping the client.
    paused: Mutex<bool>,
}

/// Handle on a running simulated device.
#[derive(Clone)]
pub struct SimDevice {
    pub spec: DeviceSpec,
    pub flash: Arc<Mutex<Flash>>,
    shared: Arc<Shared>,
    stop: watch::Sender<bool>,
}

impl SimDevice {
    pub fn new(spec: DeviceSpec, factory_image: &[u8]) -> SimDevice {
        SimDevice {
            spec,
            flash: Flash::new(factory_image).shared(),
            shared: Arc::new(Shared {
                pattern: Mutex::new(Pattern::Idle),
                ticks: Mutex::new(Vec::new()),
                counters: Mutex::new(DeviceCounters::default()),
                client: Mutex::new(None),
                model: Mutex::new(None),
                paused: Mutex::new(false),
            }),
            stop: watch::channel(false).0,
        }
    }

    pub fn name(&self) -> &str {
        &self.spec.client.endpoint_name
    }

    pub fn set_pattern(&self, p: Pattern) {
        *self.shared.pattern.lock().unwrap() = p;
    }

    pub fn pattern(&self) -> Pattern {
        *self.shared.pattern.lock().unwrap()
    }

    pub fn set_paused(&self, paused: bool) {
        *self.shared.paused.lock().unwrap() = paused;
    }

    pub fn ticks(&self) -> Vec<Tick> {
        self.shared.ticks.lock().unwrap().clone()
    }

    pub fn tick_count(&self) -> usize {
        self.shared.ticks.lock().unwrap().len()
    }

    pub fn counters(&self) -> DeviceCounters {
        self.shared.counters.lock().unwrap().clone()
    }

    pub fn client(&self) -> Option<ClientHandle> {
        self.shared.client.lock().unwrap().clone()
    }

    /// Model of the running firmware.
    pub fn model(&self) -> Option<ModelBundle> {
        self.shared.model.lock().unwrap().clone()
    }

    pub fn stop(&self) {
        let _ = self.stop.send(true);
        if let Some(c) = self.client() {
            c.stop(false);
        }
    }

    /// Boot and run until stopped.
    pub async fn run(self, link: Link, clock: Clock) {
        let mut stop = self.stop.subscribe();
        let mut generator = MotionGenerator::new(self.pattern(), self.spec.noise_sigma, self.spec.seed);
        let mut boot_no = 0u32;
        loop {
            if *stop.borrow() {
                return;
            }
            boot_no += 1;
            let booted = self.flash.lock().unwrap().boot();
            let report = match booted {
                Ok(r) => r,
                Err(BootError::PowerCut) => {
                    self.shared.counters.lock().unwrap().power_cuts += 1;
                    sleep(self.spec.boot_delay).await;
                    continue;
                }
                Err(e) => {
                    tracing::error!(device = self.name(), error = %e, "device cannot boot");
                    return;
                }
            };
            {
                let mut c = self.shared.counters.lock().unwrap();
                c.boots += 1;
                c.swaps += report.swapped as u32;
                c.reverts += report.reverted as u32;
                c.refused += report.refused as u32;
            }
            let image = report.image.expect("booted image");
            match self.run_image(&link, clock, &image, boot_no, &mut generator, &mut stop).await {
                Some(ClientExit::Reboot) => {
                    sleep(self.spec.boot_delay).await;
                }
                Some(ClientExit::Shutdown) | None => return,
            }
        }
    }

    fn build_store(&self, bundle: &ModelBundle) -> ObjectStore {
        let mut store = ObjectStore::new();
        let names = bundle.config.class_names.clone();
        objects::install(&mut store, &names, bundle.kmeans.threshold).expect("object registry");
        objects::report_model(&mut store, &bundle.config.name, &bundle.config.version).expect("model object");
        if let Some(p) = self.spec.analysis_period {
            let _ = store.set(objects::ANALYSIS_PERIOD, crate::lwm2m::ResourceValue::Integer(p));
        }
        store.take_changes();
        store
    }

    async fn run_image(
        &self,
        link: &Link,
        clock: Clock,
        image: &FirmwareImage,
        boot_no: u32,
        generator: &mut MotionGenerator,
        stop: &mut watch::Receiver<bool>,
    ) -> Option<ClientExit> {
        let bundle = match model_blob_decode(&image.model_blob) {
            Ok(b) => b,
            Err(e) => {
                tracing::error!(device = self.name(), error = %e, "firmware carries no usable model");
                return None;
            }
        };
        *self.shared.model.lock().unwrap() = Some(bundle.clone());
        let store = self.build_store(&bundle);
        let seed = self.spec.seed.wrapping_mul(31).wrapping_add(boot_no as u64);
        let (endpoint, requests) = match link.endpoint(self.spec.addr, self.spec.client.params.clone(), seed).await {
            Ok(x) => x,
            Err(e) => {
                tracing::error!(device = self.name(), error = %e, "cannot bind");
                return None;
            }
        };
        let platform = Box::new(FlashPlatform::new(self.flash.clone()));
        let (client, handle) = match Client::new(self.spec.client.clone(), endpoint.clone(), requests, store, platform) {
            Ok(x) => x,
            Err(e) => {
                tracing::error!(device = self.name(), error = %e, "bad client config");
                return None;
            }
        };
        *self.shared.client.lock().unwrap() = Some(handle.clone());
        let mut client_task = tokio::spawn(client.with_clock(clock).run());
        let mut pipeline = Pipeline::new(bundle.clone(), seed);
        let analyzer = Arc::new(Mutex::new(Analyzer::new(clock.now_secs())));
        let mut ticker = interval(self.spec.window_period);
        ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
        ticker.tick().await;
        let watchdog = sleep(self.spec.confirm_timeout);
        tokio::pin!(watchdog);
        let mut watchdog_armed = !self.flash.lock().unwrap().confirmed();

        let exit = loop {
            tokio::select! {
                res = &mut client_task => {
                    break match res {
                        Ok(Ok(exit)) => Some(exit),
                        Ok(Err(e)) => {
                            tracing::warn!(device = self.name(), error = %e, "client stopped");
                            self.shared.counters.lock().unwrap().client_errors += 1;
                            // a device whose client gave up restarts
                            Some(ClientExit::Reboot)
                        }
                        Err(_) => None,
                    };
                }
                _ = stop.changed() => {
                    handle.stop(false);
                }
                _ = &mut watchdog, if watchdog_armed => {
                    watchdog_armed = false;
                    if !self.flash.lock().unwrap().confirmed() {
                        tracing::warn!(device = self.name(), "image not confirmed in time, rebooting");
                        self.shared.counters.lock().unwrap().watchdog_reboots += 1;
                        client_task.abort();
                        break Some(ClientExit::Reboot);
                    }
                }
                _ = ticker.tick() => {
                    if *self.shared.paused.lock().unwrap() {
                        continue;
                    }
                    self.tick(&handle, &mut pipeline, generator, &analyzer, clock, boot_no).await;
                }
            }
        };
        *self.shared.client.lock().unwrap() = None;
        endpoint.shutdown();
        exit
    }

    async fn tick(
        &self,
        handle: &ClientHandle,
        pipeline: &mut Pipeline,
        generator: &mut MotionGenerator,
        analyzer: &Arc<Mutex<Analyzer>>,
        clock: Clock,
        boot_no: u32,
    ) {
        let pattern = self.pattern();
        generator.pattern = pattern;
        let window = generator.generate_window();
        let inf = match pipeline.process(&window) {
            Ok(inf) => inf,
            Err(e) => {
                tracing::debug!(device = self.name(), error = %e, "pipeline error");
                self.shared.counters.lock().unwrap().pipeline_errors += 1;
                return;
            }
        };
        let now = clock.now_secs();
        let analyzer = analyzer.clone();
        let (w, probs, class, score) = (window.clone(), inf.probabilities.clone(), inf.class, inf.score);
        let res = handle
            .with_store(move |s| {
                let anomalous = objects::publish_classification(s, &probs, class, score, now)?;
                let threshold = s.get_f64(&objects::THRESHOLD).unwrap_or(f64::INFINITY);
                let closed = analyzer.lock().unwrap().update(s, &w, score, now)?;
                Ok::<_, crate::lwm2m::StoreError>((anomalous, threshold, closed))
            })
            .await;
        let Ok(Ok((anomalous, threshold, closed))) = res else {
            self.shared.counters.lock().unwrap().pipeline_errors += 1;
            return;
        };
        if let Some(records) = closed {
            let _ = handle.notify_records(Path::instance(objects::ANOMALY_ANALYZER, 0), records);
        }
        let bundle = &pipeline.bundle;
        self.shared.ticks.lock().unwrap().push(Tick {
            t: clock.now(),
            boot: boot_no,
            model: bundle.config.name.clone(),
            pattern,
            class,
            class_name: bundle
                .config
                .class_names
                .get(class)
                .cloned()
                .unwrap_or_else(|| objects::class_name(class)),
            score,
            threshold,
            anomalous,
            window,
        });
    }
}
