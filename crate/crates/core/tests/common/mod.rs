#![allow(dead_code)]

use std::net::SocketAddr;

use tinyreach::client::{Client, ClientConfig, ClientError, ClientExit, ClientHandle, MemoryPlatform, Platform};
use tinyreach::coap::{CoapEndpoint, LinkConfig, SimNetwork, TransmissionParams};
use tinyreach::lwm2m::ObjectStore;
use tinyreach::objects;
use tinyreach::server::{Server, ServerConfig};
use tinyreach::time::Clock;
use tokio::task::JoinHandle;

pub const EPOCH: f64 = 1_700_000_000.0;

pub fn server_addr() -> SocketAddr {
    "10.0.0.1:5683".parse().unwrap()
}

pub fn device_addr(n: u8) -> SocketAddr {
    format!("10.0.1.{n}:5683").parse().unwrap()
}

pub fn network(loss: f64, seed: u64) -> SimNetwork {
    SimNetwork::new(LinkConfig::lossy(loss), seed)
}

pub fn start_server(net: &SimNetwork, config: ServerConfig) -> Server {
    let (ep, rx) = CoapEndpoint::sim(net, server_addr(), TransmissionParams::default(), 1);
    Server::start(
        ep,
        rx,
        ServerConfig {
            clock: Clock::starting_at(EPOCH),
            ..config
        },
    )
    .unwrap()
}

pub fn server_uri() -> String {
    format!("coap://{}", server_addr())
}

/// Store with the TinyML objects of a three-class model.
pub fn tinyml_store() -> ObjectStore {
    let mut store = ObjectStore::new();
    let names: Vec<String> = ["idle", "circle", "shake-x"].iter().map(|s| s.to_string()).collect();
    objects::install(&mut store, &names, 2.0).unwrap();
    objects::report_model(&mut store, "MODEL1", "1.0.0").unwrap();
    store
}

pub struct Device {
    pub handle: ClientHandle,
    pub task: JoinHandle<Result<ClientExit, ClientError>>,
    pub endpoint: CoapEndpoint,
}

pub fn start_client(net: &SimNetwork, n: u8, config: ClientConfig) -> Device {
    start_client_with(net, n, config, tinyml_store(), Box::new(MemoryPlatform::new("1.0.0")))
}

pub fn start_client_with(
    net: &SimNetwork,
    n: u8,
    config: ClientConfig,
    store: ObjectStore,
    platform: Box<dyn Platform>,
) -> Device {
    let (ep, rx) = CoapEndpoint::sim(net, device_addr(n), config.params.clone(), 100 + n as u64);
    let (client, handle) = Client::new(config, ep.clone(), rx, store, platform).unwrap();
    let client = client.with_clock(Clock::starting_at(EPOCH));
    Device {
        handle,
        task: tokio::spawn(client.run()),
        endpoint: ep,
    }
}

/// Poll `f` every 100 ms of simulated time until it holds or `limit` passes.
pub async fn wait_for(limit: std::time::Duration, mut f: impl FnMut() -> bool) -> bool {
    let end = tokio::time::Instant::now() + limit;
    while tokio::time::Instant::now() < end {
        if f() {
            return true;
        }
        tokio::time::sleep(std::time::Duration::from_millis(100)).await;
    }
    f()
}

/// A full simulated device booting `image`, on `device_addr(n)`.
pub fn start_sim_device(net: &SimNetwork, n: u8, config: ClientConfig, image: &[u8]) -> tinyreach::sim::SimDevice {
    let spec = tinyreach::sim::DeviceSpec::new(config, device_addr(n), 500 + n as u64);
    let dev = tinyreach::sim::SimDevice::new(spec, image);
    tokio::spawn(dev.clone().run(tinyreach::sim::Link::Sim(net.clone()), Clock::starting_at(EPOCH)));
    dev
}

pub fn firmware_v1() -> Vec<u8> {
    tinyreach::sim::factory_firmware(60, 1).unwrap()
}

pub fn firmware_v2() -> Vec<u8> {
    let model = tinyreach::sim::train_model(&tinyreach::sim::Pattern::ALL, 60, "MODEL2", "2.0.0", 2).unwrap();
    tinyreach::sim::build_firmware(&model, "2.0.0", tinyreach::sim::FW2_SIZE).unwrap()
}

/// One in-process HTTP call; returns status and raw body.
pub async fn call(
    router: &axum::Router,
    method: axum::http::Method,
    uri: &str,
    body: impl Into<axum::body::Body>,
) -> (axum::http::StatusCode, Vec<u8>) {
    use http_body_util::BodyExt;
    use tower::ServiceExt;
    let req = axum::http::Request::builder().method(method).uri(uri).body(body.into()).unwrap();
    let resp = router.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

pub async fn get_json(router: &axum::Router, uri: &str) -> (axum::http::StatusCode, serde_json::Value) {
    let (s, b) = call(router, axum::http::Method::GET, uri, axum::body::Body::empty()).await;
    (s, serde_json::from_slice(&b).unwrap_or(serde_json::Value::Null))
}
