use std::ffi::CStr;
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use tinyreach::ml::{extract_features, model_blob_decode, SampleWindow};
use tinyreach::sim::{factory_firmware, FirmwareImage, MotionGenerator, Pattern};
use tinyreach_ffi::*;

fn firmware() -> Vec<u8> {
    factory_firmware(60, 1).unwrap()
}

fn flat(w: &SampleWindow) -> Vec<f64> {
    w.samples.iter().flatten().copied().collect()
}

unsafe fn text(p: *const std::ffi::c_char) -> String {
    assert!(!p.is_null());
    CStr::from_ptr(p).to_str().unwrap().to_string()
}

fn load(image: &[u8]) -> *mut TrModel {
    let mut model = ptr::null_mut();
    let s = unsafe { tr_model_load_firmware(image.as_ptr(), image.len(), 1, &mut model) };
    assert_eq!(s, TrStatus::Ok);
    model
}

#[test]
fn verify_accepts_only_intact_images() {
    let mut fw = firmware();
    unsafe {
        assert!(tr_firmware_verify(fw.as_ptr(), fw.len()));
        fw[500] ^= 1;
        assert!(!tr_firmware_verify(fw.as_ptr(), fw.len()));
        assert!(!tr_firmware_verify(ptr::null(), 10));
        assert_eq!(text(tr_version()), env!("CARGO_PKG_VERSION"));
    }
}

#[test]
fn model_metadata() {
    let fw = firmware();
    let model = load(&fw);
    unsafe {
        assert_eq!(text(tr_model_name(model)), "MODEL1");
        assert_eq!(text(tr_model_version(model)), "1.0.0");
        assert_eq!(tr_model_class_count(model), 3);
        let names: Vec<String> = (0..3).map(|i| text(tr_model_class_name(model, i))).collect();
        assert_eq!(names, ["idle", "circle", "shake-x"]);
        assert!(tr_model_class_name(model, 3).is_null());
        assert!(tr_model_threshold(model) > 0.0);
        assert!(tr_model_name(ptr::null()).is_null());
        assert_eq!(tr_model_class_count(ptr::null()), 0);
        tr_model_free(model);
        tr_model_free(ptr::null_mut());
    }
}

#[test]
fn process_matches_the_library_path() {
    let fw = firmware();
    let (image, _) = FirmwareImage::parse(&fw).unwrap();
    let bundle = model_blob_decode(&image.model_blob).unwrap();
    let model = load(&fw);
    let mut correct = 0;
    for (k, p) in [Pattern::Idle, Pattern::Circle, Pattern::ShakeX].into_iter().enumerate() {
        let mut g = MotionGenerator::new(p, 0.3, 40 + k as u64);
        for _ in 0..20 {
            let w = g.generate_window();
            let samples = flat(&w);
            let mut features = [0.0; TR_FEATURES];
            let mut probs = [f64::NAN; 8];
            let mut out = TrInference::default();
            unsafe {
                assert_eq!(tr_extract_features(samples.as_ptr(), w.len(), w.rate_hz, features.as_mut_ptr()), TrStatus::Ok);
                let s = tr_model_process(model, samples.as_ptr(), w.len(), w.rate_hz, probs.as_mut_ptr(), probs.len(), &mut out);
                assert_eq!(s, TrStatus::Ok);
            }
            let raw = extract_features(&w).unwrap();
            assert_eq!(features, raw);
            let scaled = bundle.scaler.apply(&raw);
            let (want_probs, want_class) = bundle.forest.infer(&scaled).unwrap();
            assert_eq!(out.class_index as usize, want_class);
            assert_eq!(out.n_classes, 3);
            assert_eq!(&probs[..3], &want_probs[..]);
            assert!(probs[3].is_nan());
            assert_eq!(out.score, bundle.kmeans.score(&scaled));
            assert_eq!(out.anomalous, out.score > out.threshold);
            correct += (want_class == k) as usize;
        }
    }
    assert!(correct >= 54, "{correct}/60");
    unsafe { tr_model_free(model) };
}

#[test]
fn retrain_waits_for_a_full_sample() {
    let fw = firmware();
    let model = load(&fw);
    let mut g = MotionGenerator::new(Pattern::Idle, 0.3, 3);
    let mut out = TrInference::default();
    unsafe {
        assert_eq!(tr_model_retrain(model), TrStatus::NotReady);
        assert!(text(tr_last_error_message()).contains("reservoir"));
        for _ in 0..64 {
            let w = g.generate_window();
            let samples = flat(&w);
            let s = tr_model_process(model, samples.as_ptr(), w.len(), w.rate_hz, ptr::null_mut(), 0, &mut out);
            assert_eq!(s, TrStatus::Ok);
        }
        assert_eq!(tr_model_retrain(model), TrStatus::Ok);
        assert!(tr_model_threshold(model).is_finite());
        tr_model_free(model);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let fw = firmware();
    let (image, _) = FirmwareImage::parse(&fw).unwrap();
    let mut model = ptr::null_mut();
    let mut features = [0.0; TR_FEATURES];
    unsafe {
        let blob = &image.model_blob;
        assert_eq!(tr_model_load(blob.as_ptr(), 20, 1, &mut model), TrStatus::Corrupt);
        assert!(model.is_null());
        assert!(!text(tr_last_error_message()).is_empty());
        assert_eq!(tr_model_load(b"nope".as_ptr(), 4, 1, &mut model), TrStatus::Corrupt);
        assert_eq!(tr_model_load(ptr::null(), 0, 1, &mut model), TrStatus::NullPointer);
        assert_eq!(tr_model_load_firmware(fw.as_ptr(), fw.len() - 1, 1, &mut model), TrStatus::Corrupt);
        assert_eq!(tr_extract_features([0.0; 3].as_ptr(), 0, 10, features.as_mut_ptr()), TrStatus::InvalidArgument);
        assert_eq!(text(tr_last_error_message()), "empty window");
        assert_eq!(tr_extract_features(ptr::null(), 4, 10, features.as_mut_ptr()), TrStatus::NullPointer);
        let mut out = TrInference::default();
        let s = tr_model_process(ptr::null_mut(), [0.0; 3].as_ptr(), 1, 10, ptr::null_mut(), 0, &mut out);
        assert_eq!(s, TrStatus::NullPointer);
        assert_eq!(tr_model_retrain(ptr::null_mut()), TrStatus::NullPointer);
    }
}

#[test]
fn reservoir_handle() {
    let mut r = ptr::null_mut();
    unsafe {
        assert_eq!(tr_reservoir_new(0, 2, 1, &mut r), TrStatus::InvalidArgument);
        assert_eq!(tr_reservoir_new(4, 2, 1, &mut r), TrStatus::Ok);
        let mut slot = 0i64;
        for i in 0..4 {
            let row = [i as f64, -(i as f64)];
            assert_eq!(tr_reservoir_add(r, row.as_ptr(), &mut slot), TrStatus::Ok);
            assert_eq!(slot, i);
        }
        let mut kept = 0;
        for i in 4..1000 {
            let row = [i as f64, -(i as f64)];
            assert_eq!(tr_reservoir_add(r, row.as_ptr(), &mut slot), TrStatus::Ok);
            assert!((-1..4).contains(&slot));
            kept += (slot >= 0) as usize;
        }
        // each later row is kept with probability 4/n
        assert!((5..40).contains(&kept), "{kept}");
        assert_eq!(tr_reservoir_len(r), 4);
        assert_eq!(tr_reservoir_seen(r), 1000);
        let mut row = [0.0; 2];
        for i in 0..4 {
            assert_eq!(tr_reservoir_get(r, i, row.as_mut_ptr()), TrStatus::Ok);
            assert_eq!(row[0], -row[1]);
        }
        assert_eq!(tr_reservoir_get(r, 4, row.as_mut_ptr()), TrStatus::InvalidArgument);
        assert_eq!(tr_reservoir_add(r, row.as_ptr(), ptr::null_mut()), TrStatus::Ok);
        tr_reservoir_free(r);
        assert_eq!(tr_reservoir_len(ptr::null()), 0);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/tinyreach.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 18, "{exports:?}");
    for name in exports {
        assert!(header.contains(&format!(" {name}(")) || header.contains(&format!("*{name}(")), "{name} missing");
    }
    for item in ["typedef struct TrModel TrModel;", "typedef struct TrReservoir TrReservoir;", "TR_STATUS_CORRUPT = 3", "#define TR_FEATURES 12"] {
        assert!(header.contains(item), "{item}");
    }
}

fn static_lib() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let deps = exe.parent()?;
    [deps.parent()?.join("libtinyreach_ffi.a"), deps.join("libtinyreach_ffi.a")]
        .into_iter()
        .find(|p| p.exists())
}

#[test]
fn c_program_links_against_the_header() {
    let Some(lib) = static_lib() else {
        panic!("static library not found next to {:?}", std::env::current_exe());
    };
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("fw.bin");
    std::fs::write(&image, firmware()).unwrap();
    let exe = dir.path().join("smoke");
    let manifest = env!("CARGO_MANIFEST_DIR");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(format!("{manifest}/tests/c/smoke.c"))
        .arg(format!("-I{manifest}/include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .expect("C compiler");
    assert!(status.success());
    let out = Command::new(&exe).arg(&image).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("MODEL1 1.0.0 idle "), "{stdout}");
}
