//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Every numeric claim is checked against an oracle written here, not
//! against the library's own helpers.

mod common;

use std::collections::BTreeMap;
use std::future::Future;
use std::net::SocketAddr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, StatusCode};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tinyreach::client::fota::{self, Fota, FotaState};
use tinyreach::client::{ClientConfig, FotaResult, RegStatus};
use tinyreach::coap::block::block2_response;
use tinyreach::coap::{
    block1_upload, block2_download, option, Block1Assembler, Block1Outcome, BlockOpt, Code, CoapEndpoint, CoapError,
    CoapMessage, LinkConfig, MessageType, SimNetwork, TransmissionParams,
};
use tinyreach::lwm2m::defs::FIRMWARE;
use tinyreach::lwm2m::{senml_decode, senml_encode, standard_objects, ObjectStore, Path, ResourceValue, SenmlFormat, SenmlRecord};
use tinyreach::ml::blob::{decode_forest, decode_kmeans, encode_forest, encode_kmeans};
use tinyreach::ml::{ForestModel, KMeansModel, Node, Reservoir, Tree, FEATURES};
use tinyreach::objects;
use tinyreach::server::{api, RolloutMode, RolloutRequest, ServerConfig, TargetStatus};
use tinyreach::sim::flash::SWAP_STEPS;
use tinyreach::sim::scenario::{run_phases, ScenarioConfig};
use tinyreach::sim::{build_firmware, train_model, BootError, Flash, FlashPlatform, Pattern, FW1_SIZE, FW2_SIZE};
use tokio::time::{sleep, Instant};

type Outcome = Result<String, String>;

fn paused<F: Future<Output = Outcome>>(f: F) -> Outcome {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .start_paused(true)
        .build()
        .unwrap()
        .block_on(f)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("four-phase integration", four_phase),
        ("footprint constants", footprint),
        ("ml oracles", ml_oracles),
        ("reservoir uniformity", reservoir_uniformity),
        ("protocol", protocol),
        ("fota safety", fota_safety),
        ("queue mode", queue_mode),
        ("http api", http_api),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, f) in criteria {
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- phases

fn four_phase() -> Outcome {
    let mut details = Vec::new();
    for (seed, loss) in [(7u64, 0.0), (11, 0.1)] {
        let cfg = ScenarioConfig {
            seed,
            loss,
            ..ScenarioConfig::default()
        };
        let wall = std::time::Instant::now();
        let report = paused(async {
            let r = run_phases(&cfg).await;
            Ok(serde_json::to_string(&r).unwrap())
        })?;
        let wall = wall.elapsed().as_secs_f64();
        let r: Value = serde_json::from_str(&report).unwrap();
        ensure(r["passed"] == true, || format!("seed {seed} loss {loss}: scenario failed: {report}"))?;
        let checks: BTreeMap<String, bool> = r["phases"]
            .as_array()
            .unwrap()
            .iter()
            .flat_map(|p| p["checks"].as_array().unwrap().iter())
            .map(|c| (c["id"].as_str().unwrap().to_string(), c["passed"].as_bool().unwrap()))
            .collect();
        for id in [
            "1.model-name",
            "2.score-rise",
            "3.capture-ground-truth",
            "4.model-name",
            "4.accuracy",
        ] {
            ensure(checks.get(id) == Some(&true), || format!("seed {seed} loss {loss}: check {id} missing or failed"))?;
        }
        let acc = r["metrics"]["phase4_accuracy"].as_f64().unwrap();
        ensure(acc >= 0.9, || format!("accuracy {acc}"))?;
        ensure(wall < 60.0, || format!("seed {seed} loss {loss}: took {wall:.1} s"))?;
        details.push(format!("loss {loss}: accuracy {acc:.3} in {wall:.1} s"));
    }
    Ok(details.join(", "))
}

// ---------------------------------------------------------------- footprint

/// Model blob carried by a firmware image, read straight from the bytes.
fn firmware_blob(fw: &[u8]) -> &[u8] {
    assert_eq!(&fw[..4], b"TFW1");
    let total = u32::from_le_bytes(fw[4..8].try_into().unwrap()) as usize;
    assert_eq!(total, fw.len());
    let vlen = u16::from_le_bytes([fw[8], fw[9]]) as usize;
    let at = 10 + vlen;
    let blen = u32::from_le_bytes(fw[at..at + 4].try_into().unwrap()) as usize;
    &fw[at + 4..at + 4 + blen]
}

/// Section id to payload bytes, from the blob's own table.
fn blob_sections(blob: &[u8]) -> BTreeMap<u32, &[u8]> {
    assert_eq!(&blob[..4], b"FML1");
    let count = u16::from_le_bytes([blob[6], blob[7]]) as usize;
    (0..count)
        .map(|i| {
            let e = &blob[8 + 12 * i..20 + 12 * i];
            let word = |k: usize| u32::from_le_bytes(e[4 * k..4 * k + 4].try_into().unwrap());
            let (off, len) = (word(1) as usize, word(2) as usize);
            (word(0), &blob[off..off + len])
        })
        .collect()
}

fn within_2x(x: usize, reference: usize) -> bool {
    2 * x >= reference && x <= 2 * reference
}

fn footprint() -> Outcome {
    let mut details = Vec::new();
    for seed in [7u64, 11, 42] {
        let m1 = train_model(&[Pattern::Idle, Pattern::Circle, Pattern::ShakeX], 120, "MODEL1", "1.0.0", seed)
            .map_err(|e| e.to_string())?;
        let m2 = train_model(&Pattern::ALL, 120, "MODEL2", "2.0.0", seed + 1).map_err(|e| e.to_string())?;
        let fw1 = build_firmware(&m1, "1.0.0", FW1_SIZE)?;
        let fw2 = build_firmware(&m2, "2.0.0", FW2_SIZE)?;
        ensure(fw1.len() == 396_984 && fw2.len() == 399_554, || {
            format!("firmware sizes {} {}", fw1.len(), fw2.len())
        })?;
        for (fw, reference_forest, classes) in [(&fw1, 11_294, 3), (&fw2, 12_574, 4)] {
            let s = blob_sections(firmware_blob(fw));
            let (forest, kmeans, scaler) = (s[&1].len(), s[&2].len(), s[&3].len());
            ensure(kmeans == 16 * FEATURES * 4 + 4 && kmeans == 772, || format!("kmeans {kmeans}"))?;
            ensure(scaler == 2 * FEATURES * 4 && scaler == 96, || format!("scaler {scaler}"))?;
            ensure(within_2x(kmeans, 848) && within_2x(scaler, 108), || "kmeans/scaler vs reference".into())?;
            ensure(forest <= 16 * 1024 && within_2x(forest, reference_forest), || {
                format!("{classes}-class forest {forest} bytes vs {reference_forest}")
            })?;
            ensure(u16::from_le_bytes([s[&1][0], s[&1][1]]) == classes, || "forest class count".into())?;
            if seed == 7 {
                details.push(format!("{classes}-class forest {forest} B"));
            }
        }
    }
    Ok(format!("firmware 396984/399554 B, kmeans 772 B, scaler 96 B, {}", details.join(", ")))
}

// ---------------------------------------------------------------- ml

enum OTree {
    Leaf(u8),
    Split(u8, f32, Box<OTree>, Box<OTree>),
}

fn grid(rng: &mut ChaCha8Rng) -> f32 {
    rng.random_range(-16i32..=16) as f32 * 0.25
}

fn random_tree(rng: &mut ChaCha8Rng, depth: usize, classes: u8) -> OTree {
    if depth == 0 || rng.random_bool(0.25) {
        return OTree::Leaf(rng.random_range(0..classes));
    }
    OTree::Split(
        rng.random_range(0..FEATURES as u8),
        grid(rng),
        Box::new(random_tree(rng, depth - 1, classes)),
        Box::new(random_tree(rng, depth - 1, classes)),
    )
}

fn walk(t: &OTree, v: &[f64]) -> u8 {
    match t {
        OTree::Leaf(c) => *c,
        OTree::Split(f, th, l, r) => {
            if v[*f as usize] <= *th as f64 {
                walk(l, v)
            } else {
                walk(r, v)
            }
        }
    }
}

fn flatten(t: &OTree, out: &mut Vec<Node>) {
    match t {
        OTree::Leaf(c) => out.push(Node::Leaf { class: *c }),
        OTree::Split(f, th, l, r) => {
            let at = out.len();
            out.push(Node::Leaf { class: 0 });
            flatten(l, out);
            let right = out.len() as u16;
            flatten(r, out);
            out[at] = Node::Split {
                feature: *f,
                threshold: *th,
                right,
            };
        }
    }
}

/// Vote fractions and lowest-id argmax from per-tree predictions.
fn tally(preds: &[u8], classes: usize) -> (Vec<f64>, usize) {
    let mut votes = vec![0usize; classes];
    for &p in preds {
        votes[p as usize] += 1;
    }
    let best = (0..classes).fold(0, |b, i| if votes[i] > votes[b] { i } else { b });
    (votes.iter().map(|&v| v as f64 / preds.len() as f64).collect(), best)
}

/// Walk the serialized forest section directly.
fn walk_bytes(section: &[u8], v: &[f64]) -> Vec<u8> {
    let n_trees = u16::from_le_bytes([section[2], section[3]]) as usize;
    let mut at = 4;
    let mut preds = Vec::new();
    for _ in 0..n_trees {
        let n = u16::from_le_bytes([section[at], section[at + 1]]) as usize;
        let nodes = &section[at + 2..at + 2 + 8 * n];
        let mut i = 0;
        loop {
            let rec = &nodes[8 * i..8 * i + 8];
            if rec[0] == 0xFF {
                preds.push(rec[1]);
                break;
            }
            let th = f32::from_le_bytes(rec[4..8].try_into().unwrap());
            i = if v[rec[0] as usize] <= th as f64 {
                i + 1
            } else {
                u16::from_le_bytes([rec[2], rec[3]]) as usize
            };
        }
        at += 2 + 8 * n;
    }
    preds
}

fn random_vector(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..FEATURES)
        .map(|_| if rng.random_bool(0.3) { grid(rng) as f64 } else { rng.random_range(-4.5..4.5) })
        .collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

fn ml_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut forest_cases = 0;
    for _ in 0..250 {
        let classes = rng.random_range(2..=6u8);
        let trees: Vec<OTree> = (0..rng.random_range(1..=16)).map(|_| random_tree(&mut rng, 7, classes)).collect();
        let model = ForestModel {
            trees: trees
                .iter()
                .map(|t| {
                    let mut nodes = Vec::new();
                    flatten(t, &mut nodes);
                    Tree { nodes }
                })
                .collect(),
            n_classes: classes as usize,
        };
        let section = encode_forest(&model).map_err(|e| e.to_string())?;
        let decoded = decode_forest(&section).map_err(|e| e.to_string())?;
        for _ in 0..4 {
            let v = random_vector(&mut rng);
            let preds: Vec<u8> = trees.iter().map(|t| walk(t, &v)).collect();
            let expect = tally(&preds, classes as usize);
            ensure(walk_bytes(&section, &v) == preds, || "serialized walk disagrees".into())?;
            for got in [model.infer(&v), decoded.infer(&v)] {
                let (probs, class) = got.map_err(|e| e.to_string())?;
                ensure(class == expect.1, || format!("class {class} vs {}", expect.1))?;
                ensure(probs.iter().zip(&expect.0).all(|(a, b)| close(*a, *b)), || {
                    format!("{probs:?} vs {:?}", expect.0)
                })?;
            }
            forest_cases += 1;
        }
    }

    let mut km_cases = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=16);
        let centroids: Vec<[f64; FEATURES]> = (0..k)
            .map(|_| std::array::from_fn(|_| rng.random_range(-6.0f32..6.0) as f64))
            .collect();
        let model = KMeansModel {
            centroids: centroids.clone(),
            threshold: rng.random_range(0.5f32..5.0) as f64,
        };
        let decoded = decode_kmeans(&encode_kmeans(&model)).map_err(|e| e.to_string())?;
        let v = random_vector(&mut rng);
        let mut best = f64::INFINITY;
        for c in &centroids {
            let d: f64 = c.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            best = best.min(d);
        }
        for m in [&model, &decoded] {
            let got = m.anomaly_score(&v).map_err(|e| e.to_string())?;
            ensure(close(got, best), || format!("score {got} vs {best}"))?;
        }
        km_cases += 1;
    }
    Ok(format!("{forest_cases} forest cases, {km_cases} k-means cases, exact to 1e-9"))
}

// ---------------------------------------------------------------- reservoir

fn reservoir_uniformity() -> Outcome {
    const K: usize = 64;
    const N: usize = 10_000;
    const BINS: usize = 8;
    let chi = ChiSquared::new((BINS - 1) as f64).unwrap();
    let mut good = 0;
    for trial in 0..200u64 {
        let mut r = Reservoir::new(K, 9000 + trial);
        for i in 0..N {
            r.add(i);
        }
        let items = r.items();
        ensure(items.len() == K, || format!("{} items", items.len()))?;
        let mut counts = [0usize; BINS];
        for &i in items {
            counts[i * BINS / N] += 1;
        }
        let expected = K as f64 / BINS as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        if 1.0 - chi.cdf(stat) > 0.01 {
            good += 1;
        }
    }
    ensure(good >= 190, || format!("{good}/200 trials with p > 0.01"))?;
    Ok(format!("{good}/200 trials with p > 0.01"))
}

// ---------------------------------------------------------------- protocol

fn random_message(rng: &mut ChaCha8Rng) -> CoapMessage {
    let types = [MessageType::Con, MessageType::Non, MessageType::Ack, MessageType::Rst];
    let code = match rng.random_range(0..3) {
        0 => Code::new(0, rng.random_range(1..=4)),
        1 => Code::new(2, rng.random_range(1..=5)),
        _ => Code::new(rng.random_range(4..=5), rng.random_range(0..=15)),
    };
    let mut m = CoapMessage::new(types[rng.random_range(0..4)], code);
    m.message_id = rng.random();
    m.token = (0..rng.random_range(0..=8)).map(|_| rng.random()).collect();
    let mut numbers: Vec<u16> = (0..rng.random_range(0..8))
        .map(|_| match rng.random_range(0..3) {
            0 => rng.random_range(1..15),
            1 => rng.random_range(15..300),
            _ => rng.random_range(300..=65000),
        })
        .collect();
    numbers.sort();
    for n in numbers {
        let len = match rng.random_range(0..4) {
            0 => 0,
            1 => rng.random_range(1..13),
            2 => rng.random_range(13..269),
            _ => rng.random_range(269..600),
        };
        m.add_option(n, (0..len).map(|_| rng.random()).collect());
    }
    if rng.random_bool(0.7) {
        m.payload = (0..rng.random_range(1..700)).map(|_| rng.random()).collect();
    }
    m
}

fn random_records(rng: &mut ChaCha8Rng) -> Vec<SenmlRecord> {
    let n = rng.random_range(1..12);
    let objs = [33650u16, 33651, 33652, 33653, 33654, 5, 3];
    let t0 = rng.random_bool(0.5).then(|| rng.random_range(0..2_000_000_000i64));
    (0..n)
        .map(|k| {
            let (o, i, r) = (objs[rng.random_range(0..objs.len())], rng.random_range(0..3), rng.random_range(0..8));
            let path = if rng.random_bool(0.3) {
                Path::resource_instance(o, i, r, rng.random_range(0..4))
            } else {
                Path::resource(o, i, r)
            };
            let value = match rng.random_range(0..5) {
                0 => ResourceValue::Integer(rng.random()),
                1 => ResourceValue::Float(rng.random_range(-1e9..1e9)),
                2 => ResourceValue::String(
                    (0..rng.random_range(0..20))
                        .map(|_| char::from(rng.random_range(b' '..=b'~')))
                        .collect(),
                ),
                3 => ResourceValue::Boolean(rng.random()),
                _ => ResourceValue::Opaque((0..rng.random_range(0..64)).map(|_| rng.random()).collect()),
            };
            let mut rec = SenmlRecord::new(path, value);
            rec.time = t0.map(|t| t + (k as i64 * 7) % 11);
            rec
        })
        .collect()
}

fn addr(n: u8) -> SocketAddr {
    SocketAddr::from(([10, 9, 0, n], 5683))
}

fn spawn_echo(mut reqs: tokio::sync::mpsc::UnboundedReceiver<tinyreach::coap::IncomingRequest>) {
    tokio::spawn(async move {
        while let Some(req) = reqs.recv().await {
            let resp = CoapMessage::response_to(&req.message, Code::CONTENT).with_payload(req.message.payload.clone());
            req.respond(resp);
        }
    });
}

/// Transmission counts over lossy exchanges; index 5 counts give-ups.
async fn retransmission_histogram(exchanges: usize) -> [usize; 6] {
    let net = SimNetwork::new(LinkConfig::lossy(0.5), 77);
    let (client, _c) = CoapEndpoint::sim(&net, addr(1), TransmissionParams::default(), 1);
    let (_server, reqs) = CoapEndpoint::sim(&net, addr(2), TransmissionParams::default(), 2);
    spawn_echo(reqs);
    let mut hist = [0usize; 6];
    for i in 0..exchanges {
        let req = CoapMessage::request(Code::GET, "/echo").with_payload(vec![i as u8]);
        match client.exchange_with_stats(addr(2), req).await {
            Ok((_, stats)) => hist[stats.transmissions as usize - 1] += 1,
            Err(CoapError::Unreachable) => hist[5] += 1,
            Err(e) => panic!("exchange {i}: {e}"),
        }
    }
    hist
}

async fn block_round_trip(payload: Vec<u8>, size: usize, loss: f64, seed: u64) -> Result<(u32, u32), String> {
    let net = SimNetwork::new(LinkConfig::lossy(loss), seed);
    let (client, _c) = CoapEndpoint::sim(&net, addr(1), TransmissionParams::default(), seed);
    let (_server, mut reqs) = CoapEndpoint::sim(&net, addr(2), TransmissionParams::default(), seed + 1);
    let uploaded = Arc::new(Mutex::new(None::<Vec<u8>>));
    let sink = uploaded.clone();
    let served = payload.clone();
    tokio::spawn(async move {
        let mut asm = Block1Assembler::new(1 << 20);
        while let Some(req) = reqs.recv().await {
            let m = &req.message;
            if m.code == Code::GET {
                let resp = block2_response(m, &served, size).unwrap();
                req.respond(resp);
                continue;
            }
            let opt = BlockOpt::from_message(m, option::BLOCK1).unwrap();
            let resp = match asm.accept(opt, &m.payload) {
                Block1Outcome::Continue(o) => {
                    let mut r = CoapMessage::response_to(m, Code::CONTINUE);
                    o.write_to(&mut r, option::BLOCK1);
                    r
                }
                Block1Outcome::Complete(body) => {
                    *sink.lock().unwrap() = Some(body);
                    CoapMessage::response_to(m, Code::CHANGED)
                }
                Block1Outcome::Incomplete => CoapMessage::response_to(m, Code::REQUEST_ENTITY_INCOMPLETE),
                Block1Outcome::TooLarge => CoapMessage::response_to(m, Code::REQUEST_ENTITY_TOO_LARGE),
            };
            req.respond(resp);
        }
    });
    let up = block1_upload(&client, addr(2), &CoapMessage::request(Code::PUT, "/5/0/0"), &payload, size)
        .await
        .map_err(|e| format!("upload of {} bytes: {e}", payload.len()))?;
    let got = uploaded.lock().unwrap().take().ok_or("upload never completed")?;
    ensure(got == payload, || format!("block1 body differs ({} bytes)", payload.len()))?;
    let (down, blocks) = block2_download(&client, addr(2), &CoapMessage::request(Code::GET, "/fw"), size)
        .await
        .map_err(|e| format!("download of {} bytes: {e}", payload.len()))?;
    ensure(down == payload, || format!("block2 body differs ({} bytes)", payload.len()))?;
    Ok((up.blocks, blocks))
}

fn protocol() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..2000 {
        let m = random_message(&mut rng);
        let bytes = m.encode().map_err(|e| format!("encode {i}: {e}"))?;
        let back = CoapMessage::decode(&bytes).map_err(|e| format!("decode {i}: {e}"))?;
        ensure(back == m, || format!("message {i} changed in round trip"))?;
        ensure(back.encode().unwrap() == bytes, || format!("message {i} re-encodes differently"))?;
    }
    for i in 0..1000 {
        let recs = random_records(&mut rng);
        for f in [SenmlFormat::Json, SenmlFormat::Cbor] {
            let bytes = senml_encode(&recs, f).map_err(|e| e.to_string())?;
            let back = senml_decode(&bytes, f).map_err(|e| format!("{f:?} pack {i}: {e}"))?;
            ensure(back == recs, || format!("{f:?} pack {i} changed in round trip"))?;
        }
    }

    const EXCHANGES: usize = 2000;
    let hist = paused(async { Ok(format!("{:?}", retransmission_histogram(EXCHANGES).await)) })?;
    let hist: Vec<usize> = serde_json::from_str(&hist).unwrap();
    // one attempt succeeds when both the request and the reply survive
    let q: f64 = 0.5 * 0.5;
    let mut expected: Vec<f64> = (0..5).map(|k| (1.0 - q).powi(k) * q).collect();
    expected.push((1.0 - q).powi(5));
    for (k, (&obs, &p)) in hist.iter().zip(&expected).enumerate() {
        let mean = EXCHANGES as f64 * p;
        let sigma = (EXCHANGES as f64 * p * (1.0 - p)).sqrt();
        ensure((obs as f64 - mean).abs() <= 3.0 * sigma, || {
            format!("transmission bin {}: {obs} vs {mean:.1} +/- {:.1}; {hist:?}", k + 1, 3.0 * sigma)
        })?;
    }

    let mut cases = vec![(vec![7u8; 1], 512), (vec![1; 512], 512), (vec![2; 513], 512), (vec![3; 4096], 16)];
    for _ in 0..6 {
        let len = rng.random_range(1..60_000);
        let size = 16 << rng.random_range(0..7);
        cases.push(((0..len).map(|_| rng.random()).collect(), size));
    }
    let fw: Vec<u8> = (0..399_554).map(|_| rng.random()).collect();
    let blocks = paused(async move {
        for (i, (p, size)) in cases.into_iter().enumerate() {
            block_round_trip(p, size, 0.0, 40 + i as u64).await?;
        }
        let (up, down) = block_round_trip(fw.clone(), 512, 0.0, 60).await?;
        ensure(up == 781 && down == 781, || format!("{up}/{down} blocks for 399554 bytes"))?;
        let (up, down) = block_round_trip(fw, 512, 0.1, 61).await?;
        ensure(up == 781 && down == 781, || format!("{up}/{down} blocks at 10% loss"))?;
        Ok(format!("{up}"))
    })?;
    Ok(format!(
        "2000 CoAP + 1000x2 SenML round trips, transmissions {hist:?} vs geometric, 399554 bytes in {blocks} blocks both ways"
    ))
}

// ---------------------------------------------------------------- fota

/// The image at the start of `slot` when its trailing SHA-256 matches.
fn valid_image(slot: &[u8]) -> Option<&[u8]> {
    let total = u32::from_le_bytes(slot.get(4..8)?.try_into().ok()?) as usize;
    if total < 46 || total > slot.len() {
        return None;
    }
    let (body, digest) = slot[..total].split_at(total - 32);
    (Sha256::digest(body).as_slice() == digest).then_some(&slot[..total])
}

fn boot_until_up(flash: &mut Flash, cuts: &mut Vec<usize>) -> Result<tinyreach::sim::BootReport, String> {
    for _ in 0..16 {
        if let Some(n) = cuts.pop() {
            flash.inject_power_cut(n);
        }
        match flash.boot() {
            Ok(r) => return Ok(r),
            Err(BootError::PowerCut) => continue,
            Err(e) => return Err(e.to_string()),
        }
    }
    Err("device never came up".into())
}

fn fota_safety() -> Outcome {
    let fw1 = firmware_v1();
    let fw2 = firmware_v2();
    ensure(valid_image(&fw1).is_some() && valid_image(&fw2).is_some(), || "reference images invalid".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5150);
    let mut cuts_total = 0;
    let mut reverted = 0;
    for trial in 0..100 {
        let mut flash = Flash::new(&fw1);
        flash.write_staging(&fw2).map_err(|e| format!("{e:?}"))?;
        flash.request_swap().map_err(|e| format!("{e:?}"))?;
        let mut cuts: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(0..SWAP_STEPS)).collect();
        cuts_total += cuts.len();
        let r = boot_until_up(&mut flash, &mut cuts)?;
        ensure(r.swapped, || format!("trial {trial}: no swap"))?;
        ensure(valid_image(flash.slot(0)) == Some(&fw2[..]), || format!("trial {trial}: slot 0 is not the new image"))?;
        ensure(valid_image(flash.slot(1)) == Some(&fw1[..]), || format!("trial {trial}: old image lost"))?;
        if trial % 2 == 0 {
            flash.confirm();
            let r = flash.boot().map_err(|e| e.to_string())?;
            ensure(!r.reverted && valid_image(flash.slot(0)) == Some(&fw2[..]), || {
                format!("trial {trial}: confirmed image reverted")
            })?;
        } else {
            // never confirmed: the next boot must go back, even through cuts
            let mut cuts: Vec<usize> = (0..rng.random_range(0..=2)).map(|_| rng.random_range(0..SWAP_STEPS)).collect();
            cuts_total += cuts.len();
            let r = boot_until_up(&mut flash, &mut cuts)?;
            ensure(r.reverted, || format!("trial {trial}: unconfirmed image kept"))?;
            ensure(valid_image(flash.slot(0)) == Some(&fw1[..]) && flash.confirmed(), || {
                format!("trial {trial}: rollback did not restore the old image")
            })?;
            reverted += 1;
        }
    }

    let mut bad = 0;
    for trial in 0..100 {
        let mut pkg = fw2.clone();
        let at = rng.random_range(8..pkg.len());
        pkg[at] ^= rng.random_range(1..=255u8);
        ensure(valid_image(&pkg).is_none(), || format!("trial {trial}: corruption not detected by oracle"))?;
        let flash = Flash::new(&fw1).shared();
        let mut platform = FlashPlatform::new(flash.clone());
        let mut store = ObjectStore::with_defs(standard_objects());
        store.create_instance(FIRMWARE, 0).unwrap();
        let mut fota = Fota::new(FotaState::Idle, FotaResult::Initial);
        let size = [64, 256, 512, 1024][trial % 4];
        let n = pkg.len().div_ceil(size);
        for num in 0..n {
            let chunk = &pkg[num * size..((num + 1) * size).min(pkg.len())];
            let opt = BlockOpt::new(num as u32, num + 1 < n, size).unwrap();
            fota.push(Some(opt), chunk, &mut store, &mut platform);
        }
        ensure(store.get(&fota::RESULT) == Some(&ResourceValue::Integer(5)), || {
            format!("trial {trial}: result {:?}", store.get(&fota::RESULT))
        })?;
        ensure(store.get(&fota::STATE) == Some(&ResourceValue::Integer(0)), || format!("trial {trial}: state"))?;
        let mut flash = flash.lock().unwrap();
        ensure(!flash.pending_swap(), || format!("trial {trial}: swap requested"))?;
        let r = flash.boot().map_err(|e| e.to_string())?;
        ensure(!r.swapped && valid_image(flash.slot(0)) == Some(&fw1[..]), || format!("trial {trial}: image changed"))?;
        bad += 1;
    }

    let e2e = paused(async move {
        let net = network(0.0, 9);
        let server = start_server(&net, ServerConfig::default());
        let dev = start_sim_device(&net, 1, ClientConfig::new("fota-block", &server_uri()), &fw1);
        ensure(wait_for(Duration::from_secs(120), || server.device("fota-block").is_some()).await, || {
            "device did not register".into()
        })?;
        let image = server.add_image("fw", "2.0.0", fw2).unwrap();
        let job = server
            .start_rollout(RolloutRequest {
                image_id: image.id,
                mode: RolloutMode::Push,
                targets: vec!["fota-block".into()],
            })
            .unwrap();
        let flash = dev.flash.clone();
        ensure(wait_for(Duration::from_secs(3600), || flash.lock().unwrap().pending_swap()).await, || {
            "swap never requested".into()
        })?;
        net.block(device_addr(1));
        ensure(wait_for(Duration::from_secs(1200), || dev.counters().reverts == 1).await, || "no revert".into())?;
        net.unblock(device_addr(1));
        let job = server.wait_rollout(job.id).await.unwrap();
        ensure(job.targets[0].status == TargetStatus::Failed(8), || format!("{:?}", job.targets[0].status))?;
        ensure(valid_image(flash.lock().unwrap().slot(0)) == Some(&fw1[..]), || "old image not active".into())?;
        Ok("rollout over a blocked link reports 8".to_string())
    })?;
    Ok(format!(
        "100 swaps through {cuts_total} power cuts always boot a valid image, {reverted} unconfirmed swaps rolled back, \
         {bad}/100 corrupt packages give result 5 without swap, {e2e}"
    ))
}

// ---------------------------------------------------------------- queue mode

fn queue_server() -> ServerConfig {
    ServerConfig {
        queue_awake_window: Duration::from_secs(8),
        ..ServerConfig::default()
    }
}

fn queue_client() -> ClientConfig {
    let mut cfg = ClientConfig::new("sleepy", &server_uri());
    cfg.queue_mode = true;
    cfg.wake_interval = Duration::from_secs(60);
    cfg.awake_window = Duration::from_secs(10);
    cfg
}

fn queue_mode() -> Outcome {
    paused(async {
        let net = network(0.0, 4);
        let origin = Instant::now();
        let _server = start_server(&net, queue_server());
        let dev = start_client(&net, 1, queue_client());
        let registered = || dev.handle.status().registration.status == RegStatus::Registered;
        ensure(wait_for(Duration::from_secs(10), registered).await, || "no registration".into())?;
        for i in 0..20u32 {
            let h = dev.handle.clone();
            tokio::spawn(async move {
                sleep(Duration::from_secs(7 * i as u64)).await;
                let _ = h
                    .with_store(move |s| s.set(objects::LATEST_ANOMALY_SCORE, ResourceValue::Float(i as f64)).map(|_| ()))
                    .await;
            });
        }
        // sleep intervals as the client reports them, sampled every 50 ms
        let mut asleep = Vec::new();
        let mut start = None;
        let end = Instant::now() + Duration::from_secs(300);
        while Instant::now() < end {
            let at = origin.elapsed();
            match (dev.handle.status().awake, start) {
                (false, None) => start = Some(at),
                (true, Some(s)) => {
                    asleep.push((s, at));
                    start = None;
                }
                _ => {}
            }
            sleep(Duration::from_millis(50)).await;
        }
        ensure(asleep.len() >= 3, || format!("{asleep:?}"))?;
        let margin = Duration::from_millis(60);
        let client = device_addr(1);
        let sent = net.capture().iter().filter(|r| r.src == client).count();
        let in_sleep = net
            .capture()
            .iter()
            .filter(|r| r.src == client && asleep.iter().any(|(a, b)| r.at > *a + margin && r.at + margin < *b))
            .count();
        ensure(in_sleep == 0, || format!("{in_sleep} datagrams while asleep"))?;

        let net = network(0.0, 5);
        let server = start_server(&net, queue_server());
        let dev = start_client(&net, 1, queue_client());
        let registered = || dev.handle.status().registration.status == RegStatus::Registered;
        ensure(wait_for(Duration::from_secs(10), registered).await, || "no registration".into())?;
        ensure(wait_for(Duration::from_secs(60), || !dev.handle.status().awake).await, || "never slept".into())?;
        sleep(Duration::from_secs(5)).await;
        ensure(!dev.handle.status().awake, || "awake too early".into())?;
        let asked = Instant::now();
        let name = server.read("sleepy", &objects::MODEL_NAME).await.map_err(|e| e.to_string())?;
        let waited = asked.elapsed();
        ensure(name[0].value == ResourceValue::String("MODEL1".into()), || format!("{name:?}"))?;
        ensure(waited <= Duration::from_secs(60), || format!("parked read took {waited:?}"))?;
        Ok(format!(
            "{} sleep intervals, 0 of {sent} client datagrams inside them, parked read answered after {:.1} s",
            asleep.len(),
            waited.as_secs_f64()
        ))
    })
}

// ---------------------------------------------------------------- api

fn http_api() -> Outcome {
    paused(async {
        let dir = tempfile::tempdir().unwrap();
        let net = network(0.0, 21);
        let config = || ServerConfig {
            data_dir: Some(dir.path().to_path_buf()),
            ..ServerConfig::default()
        };
        let server = start_server(&net, config());
        let router = api::router(server.clone());
        let dev = start_sim_device(&net, 1, ClientConfig::new("api-dev", &server_uri()), &firmware_v1());
        ensure(wait_for(Duration::from_secs(120), || server.device("api-dev").is_some()).await, || {
            "device did not register".into()
        })?;
        dev.set_pattern(Pattern::UpDownZ);
        sleep(Duration::from_secs(60)).await;

        let mut seen = Vec::new();
        let mut expect = |what: &str, got: StatusCode, want: StatusCode| {
            seen.push(format!("{what} {}", want.as_u16()));
            ensure(got == want, || format!("{what}: {got} instead of {want}"))
        };
        let (s, v) = get_json(&router, "/api/devices").await;
        expect("list", s, StatusCode::OK)?;
        ensure(v[0]["endpoint"] == "api-dev", || format!("{v}"))?;
        let (s, _) = get_json(&router, "/api/devices/nobody").await;
        expect("unknown device", s, StatusCode::NOT_FOUND)?;
        let (s, v) = get_json(&router, "/api/devices/api-dev/resources/33654/0/0").await;
        expect("read", s, StatusCode::OK)?;
        ensure(v["value"] == json!({"type": "string", "value": "MODEL1"}), || format!("{v}"))?;
        let (s, v) = get_json(&router, "/api/devices/api-dev/resources/4242/0/0").await;
        expect("read missing", s, StatusCode::NOT_FOUND)?;
        ensure(v["coap_code"] == "4.04", || format!("{v}"))?;
        let uri = "/api/devices/api-dev/resources/33651/0/2";
        let (s, _) = call(&router, Method::PUT, uri, r#"{"value": 7.5}"#).await;
        expect("write", s, StatusCode::NO_CONTENT)?;
        let (_, v) = get_json(&router, uri).await;
        ensure(v["value"]["value"] == 7.5, || format!("threshold after write {v}"))?;
        let (s, _) = call(&router, Method::PUT, uri, r#"{"value": "high"}"#).await;
        expect("write wrong type", s, StatusCode::BAD_REQUEST)?;
        let (s, _) = call(&router, Method::PUT, "/api/devices/api-dev/resources/33654/0/0", r#"{"value": "X"}"#).await;
        expect("write read-only", s, StatusCode::METHOD_NOT_ALLOWED)?;
        let (s, _) = call(&router, Method::POST, "/api/devices/api-dev/execute/33651/0/3", Body::empty()).await;
        expect("execute", s, StatusCode::NO_CONTENT)?;
        let (s, _) = call(&router, Method::POST, "/api/devices/api-dev/execute/33654/0/0", Body::empty()).await;
        expect("execute non-executable", s, StatusCode::METHOD_NOT_ALLOWED)?;
        let (s, v) = get_json(&router, "/api/devices/api-dev/history/33651/0/1").await;
        expect("history", s, StatusCode::OK)?;
        ensure(v["samples"].as_array().is_some_and(|a| a.len() > 5), || format!("{v}"))?;
        let (s, v) = get_json(&router, "/api/devices/api-dev/anomaly-captures?live=true").await;
        expect("captures", s, StatusCode::OK)?;
        let live = v["captures"].as_array().and_then(|a| a.last()).cloned().unwrap_or_default();
        ensure(live["samples"].as_array().map(Vec::len) == Some(32), || format!("{live}"))?;
        let (s, b) = call(&router, Method::POST, "/api/images?name=fw&version=2.0.0", firmware_v2()).await;
        expect("upload image", s, StatusCode::CREATED)?;
        let image: Value = serde_json::from_slice(&b).unwrap();
        let body = |targets: Value| json!({"image_id": image["id"], "mode": "push", "targets": targets}).to_string();
        let (s, _) = call(&router, Method::POST, "/api/rollouts", body(json!([]))).await;
        expect("rollout without targets", s, StatusCode::BAD_REQUEST)?;
        let (s, b) = call(&router, Method::POST, "/api/rollouts", body(json!(["api-dev"]))).await;
        expect("rollout", s, StatusCode::CREATED)?;
        let id = serde_json::from_slice::<Value>(&b).unwrap()["id"].as_u64().unwrap();
        let (s, _) = call(&router, Method::POST, "/api/rollouts", body(json!(["api-dev"]))).await;
        expect("duplicate rollout", s, StatusCode::CONFLICT)?;
        server.wait_rollout(id).await.ok_or("rollout vanished")?;
        let (s, v) = get_json(&router, &format!("/api/rollouts/{id}")).await;
        expect("rollout status", s, StatusCode::OK)?;
        ensure(v["targets"][0]["status"] == "updated", || format!("{v}"))?;
        ensure(
            wait_for(Duration::from_secs(120), || dev.model().is_some_and(|m| m.config.name == "MODEL2")).await,
            || "device not on MODEL2".into(),
        )?;
        sleep(Duration::from_secs(30)).await;
        dev.stop();
        sleep(Duration::from_secs(5)).await;

        let paths = server.series_paths("api-dev");
        let mut before = Vec::new();
        for p in &paths {
            before.push(call(&router, Method::GET, &format!("/api/devices/api-dev/history{p}"), Body::empty()).await.1);
        }
        server.shutdown();
        drop(router);
        sleep(Duration::from_secs(1)).await;
        let server = start_server(&net, config());
        let router = api::router(server.clone());
        ensure(server.series_paths("api-dev") == paths, || "series list changed".into())?;
        for (p, b) in paths.iter().zip(&before) {
            let (_, after) = call(&router, Method::GET, &format!("/api/devices/api-dev/history{p}"), Body::empty()).await;
            ensure(&after == b, || format!("history of {p} changed across restart"))?;
        }
        server.shutdown();
        Ok(format!("{}; {} series identical after restart", seen.join(", "), paths.len()))
    })
}
