mod common;

use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use common::*;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tinyreach::client::ClientConfig;
use tinyreach::objects;
use tinyreach::server::{api, Server, ServerConfig};
use tinyreach::sim::{Pattern, SimDevice};
use tower::ServiceExt;

async fn running_device(server: &Server, net: &tinyreach::coap::SimNetwork) -> SimDevice {
    let dev = start_sim_device(net, 1, ClientConfig::new("api-dev", &server_uri()), &firmware_v1());
    assert!(wait_for(Duration::from_secs(120), || server.device("api-dev").is_some()).await);
    dev
}

#[tokio::test(start_paused = true)]
async fn http_surface_and_status_codes() {
    let net = network(0.0, 21);
    let server = start_server(&net, ServerConfig::default());
    let router = api::router(server.clone());
    let dev = running_device(&server, &net).await;
    dev.set_pattern(Pattern::UpDownZ);
    tokio::time::sleep(Duration::from_secs(60)).await;

    // list and detail
    let (s, v) = get_json(&router, "/api/devices").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v[0]["endpoint"], "api-dev");
    assert_eq!(v[0]["status"], "online");
    let (s, v) = get_json(&router, "/api/devices/api-dev").await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["latest"].as_object().unwrap().contains_key(&objects::ANOMALY_COUNTER.to_string()));
    let (s, v) = get_json(&router, "/api/devices/nobody").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v["error"].is_string());

    // read
    let (s, v) = get_json(&router, "/api/devices/api-dev/resources/33654/0/0").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["value"], json!({"type": "string", "value": "MODEL1"}));
    let (s, v) = get_json(&router, "/api/devices/api-dev/resources/33650").await;
    assert_eq!(s, StatusCode::OK);
    let names: Vec<&str> = v["records"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["path"].as_str().unwrap().ends_with("/0"))
        .map(|r| r["value"]["value"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["idle", "circle", "shake-x"]);
    let (s, v) = get_json(&router, "/api/devices/api-dev/resources/4242/0/0").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["coap_code"], "4.04");
    let (s, _) = get_json(&router, "/api/devices/api-dev/resources/not/a/path").await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    // write
    let uri = "/api/devices/api-dev/resources/33651/0/2";
    let (s, _) = call(&router, Method::PUT, uri, r#"{"value": 7.5}"#).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (_, v) = get_json(&router, uri).await;
    assert_eq!(v["value"]["value"], 7.5);
    let (s, _) = call(&router, Method::PUT, uri, r#"{"type": "float", "value": 3.25}"#).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, _) = call(&router, Method::PUT, uri, "not json").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&router, Method::PUT, uri, r#"{"value": "high"}"#).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = call(&router, Method::PUT, "/api/devices/api-dev/resources/33654/0/0", r#"{"value": "X"}"#).await;
    assert_eq!(s, StatusCode::METHOD_NOT_ALLOWED);
    assert_eq!(serde_json::from_slice::<Value>(&v).unwrap()["coap_code"], "4.05");

    // execute
    let (s, _) = call(&router, Method::POST, "/api/devices/api-dev/execute/33651/0/3", Body::empty()).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (_, v) = get_json(&router, "/api/devices/api-dev/resources/33651/0/0").await;
    assert!(v["value"]["value"].as_i64().unwrap() <= 1);
    let (s, _) = call(&router, Method::POST, "/api/devices/api-dev/execute/33654/0/0", Body::empty()).await;
    assert_eq!(s, StatusCode::METHOD_NOT_ALLOWED);

    // history
    let (s, v) = get_json(&router, "/api/devices/api-dev/history/33651/0/1").await;
    assert_eq!(s, StatusCode::OK);
    let samples = v["samples"].as_array().unwrap();
    assert!(samples.len() > 5);
    let mid = samples[samples.len() / 2]["t"].as_f64().unwrap();
    let (_, v) = get_json(&router, &format!("/api/devices/api-dev/history/33651/0/1?from={mid}")).await;
    let later = v["samples"].as_array().unwrap();
    assert!(!later.is_empty() && later.len() < samples.len());
    assert!(later.iter().all(|s| s["t"].as_f64().unwrap() >= mid));
    let (s, _) = get_json(&router, "/api/devices/nobody/history/33651/0/1").await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    // captures
    let (s, v) = get_json(&router, "/api/devices/api-dev/anomaly-captures?live=true").await;
    assert_eq!(s, StatusCode::OK);
    let live = v["captures"].as_array().unwrap().last().unwrap().clone();
    assert_eq!(live["live"], true);
    assert_eq!(live["samples"].as_array().unwrap().len(), 32);
    assert_eq!(live["rate_hz"], 10);

    // images and rollouts
    let (s, _) = call(&router, Method::POST, "/api/images?version=2.0.0", vec![1u8; 16]).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, b) = call(&router, Method::POST, "/api/images?name=fw&version=2.0.0", firmware_v2()).await;
    assert_eq!(s, StatusCode::CREATED);
    let image: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(image["size"], 399_554);
    let (_, v) = get_json(&router, "/api/images").await;
    assert_eq!(v.as_array().unwrap().len(), 1);

    let body = |image_id: &Value, targets: Value| json!({"image_id": image_id, "mode": "push", "targets": targets}).to_string();
    let (s, _) = call(&router, Method::POST, "/api/rollouts", body(&json!(99), json!(["api-dev"]))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&router, Method::POST, "/api/rollouts", body(&image["id"], json!([]))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&router, Method::POST, "/api/rollouts", body(&image["id"], json!(["nobody"]))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&router, Method::POST, "/api/rollouts", "{").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, b) = call(&router, Method::POST, "/api/rollouts", body(&image["id"], json!(["api-dev"]))).await;
    assert_eq!(s, StatusCode::CREATED);
    let job: Value = serde_json::from_slice(&b).unwrap();
    let (s, _) = call(&router, Method::POST, "/api/rollouts", body(&image["id"], json!(["api-dev"]))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let id = job["id"].as_u64().unwrap();
    server.wait_rollout(id).await.unwrap();
    let (s, v) = get_json(&router, &format!("/api/rollouts/{id}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["targets"][0]["status"], "updated");
    assert_eq!(v["bytes_transferred"], 399_554);
    let (s, _) = get_json(&router, "/api/rollouts/77").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (_, v) = get_json(&router, "/api/rollouts").await;
    assert_eq!(v.as_array().unwrap().len(), 1);
    assert!(wait_for(Duration::from_secs(60), || server.device("api-dev").is_some()).await);
    let (_, v) = get_json(&router, "/api/devices/api-dev/resources/33654/0/0").await;
    assert_eq!(v["value"]["value"], "MODEL2");

    // object definitions
    let (s, v) = get_json(&router, "/api/objects").await;
    assert_eq!(s, StatusCode::OK);
    let ids: Vec<i64> = v["objects"].as_array().unwrap().iter().filter_map(|o| o["id"].as_i64()).collect();
    for id in [33650, 33651, 33652, 33653, 33654] {
        assert!(ids.contains(&id), "{ids:?}");
    }
    dev.stop();
}

#[tokio::test(start_paused = true)]
async fn token_cors_and_events() {
    let net = network(0.0, 22);
    let server = start_server(
        &net,
        ServerConfig {
            api_token: Some("s3cret".into()),
            ..ServerConfig::default()
        },
    );
    let router = api::router(server.clone());
    let (s, _) = get_json(&router, "/api/devices").await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = get_json(&router, "/api/devices?token=wrong").await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = get_json(&router, "/api/devices?token=s3cret").await;
    assert_eq!(s, StatusCode::OK);
    let req = Request::get("/api/devices")
        .header(header::AUTHORIZATION, "Bearer s3cret")
        .body(Body::empty())
        .unwrap();
    let resp = router.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");

    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/api/devices")
        .body(Body::empty())
        .unwrap();
    let resp = router.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::NO_CONTENT);
    assert!(resp.headers().contains_key(header::ACCESS_CONTROL_ALLOW_METHODS));

    let req = Request::get("/api/events?token=s3cret").body(Body::empty()).unwrap();
    let resp = router.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()[header::CONTENT_TYPE], "text/event-stream");
    let mut body = resp.into_body();
    let dev = running_device(&server, &net).await;
    let frame = tokio::time::timeout(Duration::from_secs(30), body.frame())
        .await
        .unwrap()
        .unwrap()
        .unwrap();
    let text = String::from_utf8(frame.into_data().unwrap().to_vec()).unwrap();
    assert!(text.contains("data:") && text.contains("registered"), "{text}");
    dev.stop();
}

#[tokio::test(start_paused = true)]
async fn telemetry_survives_restart_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let net = network(0.0, 23);
    let config = || ServerConfig {
        data_dir: Some(dir.path().to_path_buf()),
        ..ServerConfig::default()
    };
    let server = start_server(&net, config());
    let dev = running_device(&server, &net).await;
    dev.set_pattern(Pattern::Circle);
    tokio::time::sleep(Duration::from_secs(90)).await;
    dev.stop();
    tokio::time::sleep(Duration::from_secs(5)).await;

    let paths = server.series_paths("api-dev");
    assert!(paths.len() >= 5, "{paths:?}");
    let router = api::router(server.clone());
    let mut before = Vec::new();
    for p in &paths {
        let (s, b) = call(&router, Method::GET, &format!("/api/devices/api-dev/history{p}"), Body::empty()).await;
        assert_eq!(s, StatusCode::OK);
        before.push(b);
    }
    let (_, images_before) = call(&router, Method::GET, "/api/images", Body::empty()).await;
    server.shutdown();
    drop(router);
    tokio::time::sleep(Duration::from_secs(1)).await;

    let server = start_server(&net, config());
    let router = api::router(server.clone());
    assert_eq!(server.series_paths("api-dev"), paths);
    for (p, b) in paths.iter().zip(&before) {
        let (s, after) = call(&router, Method::GET, &format!("/api/devices/api-dev/history{p}"), Body::empty()).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(&after, b, "{p}");
    }
    let (_, images_after) = call(&router, Method::GET, "/api/images", Body::empty()).await;
    assert_eq!(images_after, images_before);
    server.shutdown();
}
