mod common;

use std::time::Duration;

use common::*;
use tinyreach::client::{ClientConfig, ClientExit};
use tinyreach::client::RegStatus;
use tinyreach::coap::{Fate, LinkConfig};
use tinyreach::lwm2m::ResourceValue;
use tinyreach::objects;
use tinyreach::server::{BootstrapConfig, DeviceError, ServerConfig};
use tokio::time::{sleep, Instant};

fn registered(d: &Device) -> bool {
    d.handle.status().registration.status == RegStatus::Registered
}

#[tokio::test(start_paused = true)]
async fn register_read_write_execute_deregister() {
    let net = network(0.0, 1);
    let server = start_server(&net, ServerConfig::default());
    let dev = start_client(&net, 1, ClientConfig::new("dev-1", &server_uri()));
    assert!(wait_for(Duration::from_secs(10), || server.device("dev-1").is_some()).await);
    assert!(wait_for(Duration::from_secs(5), || registered(&dev)).await);

    let rec = server.device("dev-1").unwrap();
    assert_eq!(rec.lifetime, 86_400);
    assert!(rec.objects.iter().any(|o| o == "/33654/0"), "{:?}", rec.objects);
    assert!(rec.objects.iter().any(|o| o == "/5/0"));
    assert!(rec.location.starts_with("/rd/"));

    let name = server.read("dev-1", &objects::MODEL_NAME).await.unwrap();
    assert_eq!(name[0].value, ResourceValue::String("MODEL1".into()));

    server
        .write_value("dev-1", &objects::THRESHOLD, ResourceValue::Float(3.5))
        .await
        .unwrap();
    let t = dev.handle.with_store(|s| s.get_f64(&objects::THRESHOLD)).await.unwrap();
    assert_eq!(t, Some(3.5));

    dev.handle
        .with_store(|s| s.set(objects::ANOMALY_COUNTER, ResourceValue::Integer(7)).map(|_| ()))
        .await
        .unwrap()
        .unwrap();
    server.execute("dev-1", &objects::ANOMALY_RESET, "").await.unwrap();
    let c = dev.handle.with_store(|s| s.get_i64(&objects::ANOMALY_COUNTER)).await.unwrap();
    assert_eq!(c, Some(0));

    match server.write_value("dev-1", &objects::MODEL_NAME, ResourceValue::String("x".into())).await {
        Err(DeviceError::Device(code)) => assert_eq!(code.to_string(), "4.05"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        server.read("nobody", &objects::MODEL_NAME).await,
        Err(DeviceError::UnknownEndpoint(_))
    ));

    dev.handle.stop(true);
    assert_eq!(dev.task.await.unwrap().unwrap(), ClientExit::Shutdown);
    assert!(server.device("dev-1").is_none());
    assert!(server.knows("dev-1"));
}

#[tokio::test(start_paused = true)]
async fn update_sent_at_half_lifetime() {
    let net = network(0.0, 2);
    let server = start_server(&net, ServerConfig::default());
    let mut events = server.subscribe();
    let dev = start_client(&net, 1, ClientConfig::new("dev-1", &server_uri()));
    assert!(wait_for(Duration::from_secs(10), || registered(&dev)).await);
    let registered_at = Instant::now();
    loop {
        if let tinyreach::server::ServerEvent::Updated { endpoint } = events.recv().await.unwrap() {
            assert_eq!(endpoint, "dev-1");
            break;
        }
    }
    let after = registered_at.elapsed().as_secs_f64();
    assert!((after - 43_200.0).abs() < 5.0, "update after {after} s");
    assert!(wait_for(Duration::from_secs(5), || dev.handle.status().updates == 1).await);
}

#[tokio::test(start_paused = true)]
async fn notifications_reach_telemetry() {
    let net = network(0.0, 3);
    let server = start_server(&net, ServerConfig::default());
    let dev = start_client(&net, 1, ClientConfig::new("dev-1", &server_uri()));
    assert!(wait_for(Duration::from_secs(10), || registered(&dev)).await);
    // observations are established right after registration
    sleep(Duration::from_secs(2)).await;
    for i in 1..=3 {
        dev.handle
            .with_store(move |s| s.set(objects::LATEST_ANOMALY_SCORE, ResourceValue::Float(i as f64)).map(|_| ()))
            .await
            .unwrap()
            .unwrap();
        sleep(Duration::from_secs(1)).await;
    }
    let hist = server.history("dev-1", "/33651/0/1", None, None);
    let values: Vec<f64> = hist.iter().filter_map(|s| s.value.as_f64()).collect();
    assert!(values.ends_with(&[1.0, 2.0, 3.0]), "{values:?}");
    assert!(hist.windows(2).all(|w| w[0].t <= w[1].t));
}

/// Intervals of simulated time (relative to `origin`) in which the client
/// reported itself asleep.
async fn sample_sleep(dev: &Device, origin: Instant, total: Duration) -> Vec<(Duration, Duration)> {
    let mut out = Vec::new();
    let mut start = None;
    let end = Instant::now() + total;
    while Instant::now() < end {
        let awake = dev.handle.status().awake;
        let at = origin.elapsed();
        match (awake, start) {
            (false, None) => start = Some(at),
            (true, Some(s)) => {
                out.push((s, at));
                start = None;
            }
            _ => {}
        }
        sleep(Duration::from_millis(50)).await;
    }
    out
}

/// The server's awake estimate must not outlast the device's window.
fn queue_server() -> ServerConfig {
    ServerConfig {
        queue_awake_window: Duration::from_secs(8),
        ..ServerConfig::default()
    }
}

fn queue_config() -> ClientConfig {
    let mut cfg = ClientConfig::new("sleepy", &server_uri());
    cfg.queue_mode = true;
    cfg.wake_interval = Duration::from_secs(60);
    cfg.awake_window = Duration::from_secs(10);
    cfg
}

#[tokio::test(start_paused = true)]
async fn queue_mode_is_silent_while_asleep() {
    let net = network(0.0, 4);
    let origin = Instant::now();
    let server = start_server(&net, queue_server());
    let dev = start_client(&net, 1, queue_config());
    assert!(wait_for(Duration::from_secs(10), || registered(&dev)).await);
    for i in 0..20 {
        let h = dev.handle.clone();
        tokio::spawn(async move {
            sleep(Duration::from_secs(7 * i)).await;
            let _ = h
                .with_store(move |s| s.set(objects::LATEST_ANOMALY_SCORE, ResourceValue::Float(i as f64)).map(|_| ()))
                .await;
        });
    }
    let asleep = sample_sleep(&dev, origin, Duration::from_secs(300)).await;
    assert!(asleep.len() >= 3, "{asleep:?}");
    let client = device_addr(1);
    let mut in_sleep = 0;
    for rec in net.capture().iter().filter(|r| r.src == client) {
        // 50 ms sampling granularity
        if asleep
            .iter()
            .any(|(a, b)| rec.at > *a + Duration::from_millis(60) && rec.at + Duration::from_millis(60) < *b)
        {
            in_sleep += 1;
        }
    }
    assert_eq!(in_sleep, 0);
    assert!(dev.handle.status().wakes >= 3);
    assert!(server.device("sleepy").unwrap().queue_mode);
}

#[tokio::test(start_paused = true)]
async fn parked_read_answered_within_one_wake_interval() {
    let net = network(0.0, 5);
    let server = start_server(&net, queue_server());
    let dev = start_client(&net, 1, queue_config());
    assert!(wait_for(Duration::from_secs(10), || registered(&dev)).await);
    assert!(wait_for(Duration::from_secs(60), || !dev.handle.status().awake).await);
    sleep(Duration::from_secs(5)).await;
    assert!(!dev.handle.status().awake);
    let asked = Instant::now();
    let name = server.read("sleepy", &objects::MODEL_NAME).await.unwrap();
    assert_eq!(name[0].value, ResourceValue::String("MODEL1".into()));
    assert!(asked.elapsed() <= Duration::from_secs(60), "{:?}", asked.elapsed());
}

#[tokio::test(start_paused = true)]
async fn changes_while_asleep_are_batched_on_wake() {
    let net = network(0.0, 6);
    let server = start_server(&net, queue_server());
    let dev = start_client(&net, 1, queue_config());
    assert!(wait_for(Duration::from_secs(10), || registered(&dev)).await);
    assert!(wait_for(Duration::from_secs(60), || !dev.handle.status().awake).await);
    let before = server.history("sleepy", "/33651/0/1", None, None).len();
    let asleep_from = server.now().floor();
    for i in 0..10 {
        dev.handle
            .with_store(move |s| s.set(objects::LATEST_ANOMALY_SCORE, ResourceValue::Float(10.0 + i as f64)).map(|_| ()))
            .await
            .unwrap()
            .unwrap();
        sleep(Duration::from_secs(2)).await;
    }
    assert!(!dev.handle.status().awake);
    assert_eq!(dev.handle.status().queued, 10);
    assert_eq!(server.history("sleepy", "/33651/0/1", None, None).len(), before);
    assert!(wait_for(Duration::from_secs(60), || dev.handle.status().queued == 0).await);
    sleep(Duration::from_secs(2)).await;
    let hist = server.history("sleepy", "/33651/0/1", Some(asleep_from), None);
    let values: Vec<f64> = hist.iter().filter_map(|s| s.value.as_f64()).collect();
    assert_eq!(values, (0..10).map(|i| 10.0 + i as f64).collect::<Vec<_>>());
    // record times are when the change happened, not when it was flushed
    assert!(hist[9].t - hist[0].t >= 17.0);
}

#[tokio::test(start_paused = true)]
async fn bootstrap_under_loss() {
    let net = network(0.3, 7);
    let server = start_server(
        &net,
        ServerConfig {
            bootstrap: Some(BootstrapConfig {
                server_uri: server_uri(),
                lifetime: Some(600),
                accept_unknown: true,
                known: Vec::new(),
            }),
            ..ServerConfig::default()
        },
    );
    let mut cfg = ClientConfig::new("boot-1", "");
    cfg.bootstrap_uri = Some(server_uri());
    let dev = start_client(&net, 1, cfg);
    assert!(wait_for(Duration::from_secs(1200), || server.device("boot-1").is_some()).await);
    assert_eq!(server.device("boot-1").unwrap().lifetime, 600);
    assert!(net.capture().iter().any(|r| r.fate == Fate::Lost));
    drop(dev);
}

#[tokio::test(start_paused = true)]
async fn bootstrap_rejects_unknown_endpoint() {
    let net = network(0.0, 8);
    let _server = start_server(
        &net,
        ServerConfig {
            bootstrap: Some(BootstrapConfig {
                server_uri: server_uri(),
                lifetime: None,
                accept_unknown: false,
                known: vec!["other".into()],
            }),
            ..ServerConfig::default()
        },
    );
    let mut cfg = ClientConfig::new("stranger", "");
    cfg.bootstrap_uri = Some(server_uri());
    let dev = start_client(&net, 1, cfg);
    let res = tokio::time::timeout(Duration::from_secs(3600), dev.task).await.unwrap().unwrap();
    assert!(res.is_err(), "{res:?}");
}

#[tokio::test(start_paused = true)]
async fn unknown_location_update_triggers_reregister() {
    let net = network(0.0, 9);
    let server = start_server(&net, ServerConfig::default());
    let mut cfg = ClientConfig::new("dev-1", &server_uri());
    cfg.lifetime = 120;
    let dev = start_client(&net, 1, cfg);
    assert!(wait_for(Duration::from_secs(10), || registered(&dev)).await);
    server.shutdown();
    net.unbind(server_addr());
    let server = start_server(&net, ServerConfig::default());
    assert!(server.device("dev-1").is_none());
    assert!(wait_for(Duration::from_secs(200), || server.device("dev-1").is_some()).await);
    assert!(dev.handle.status().registrations >= 2);
}

#[tokio::test(start_paused = true)]
async fn unreachable_device_reports_unreachable() {
    let net = network(0.0, 10);
    let server = start_server(&net, ServerConfig::default());
    let dev = start_client(&net, 1, ClientConfig::new("dev-1", &server_uri()));
    assert!(wait_for(Duration::from_secs(10), || registered(&dev)).await);
    net.block(device_addr(1));
    let started = Instant::now();
    let r = server.read("dev-1", &objects::MODEL_NAME).await;
    assert!(matches!(r, Err(DeviceError::Unreachable)), "{r:?}");
    assert!(started.elapsed() <= Duration::from_secs(93));
    net.set_config(LinkConfig::default());
}
