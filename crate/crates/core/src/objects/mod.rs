//! The five TinyML objects and the store updates that feed them from the
//! inference pipeline.
//!
//! Resource layouts come from `objects.json`, shipped next to the crate and
//! served by the management API.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Duration;

use serde::Deserialize;

use crate::lwm2m::{ObjectDef, ObjectStore, Path, ResourceValue, SenmlRecord, StoreError};
use crate::ml::SampleWindow;

pub const OBJECTS_JSON: &str = include_str!("../../objects.json");

pub const ML_MODEL: u16 = 33654;
pub const PATTERN_DETECTOR: u16 = 33650;
pub const ANOMALY_DETECTOR: u16 = 33651;
pub const CLASSIFIER: u16 = 33652;
pub const ANOMALY_ANALYZER: u16 = 33653;

pub const TINYML_OBJECTS: [u16; 5] = [ML_MODEL, PATTERN_DETECTOR, ANOMALY_DETECTOR, CLASSIFIER, ANOMALY_ANALYZER];

pub const MODEL_NAME: Path = Path::resource(ML_MODEL, 0, 0);
pub const MODEL_VERSION: Path = Path::resource(ML_MODEL, 0, 1);

pub const ANOMALY_COUNTER: Path = Path::resource(ANOMALY_DETECTOR, 0, 0);
pub const LATEST_ANOMALY_SCORE: Path = Path::resource(ANOMALY_DETECTOR, 0, 1);
pub const THRESHOLD: Path = Path::resource(ANOMALY_DETECTOR, 0, 2);
pub const ANOMALY_RESET: Path = Path::resource(ANOMALY_DETECTOR, 0, 3);

pub const CLASS_PROBABILITIES: Path = Path::resource(CLASSIFIER, 0, 0);
pub const CLASSIFIER_SCORE: Path = Path::resource(CLASSIFIER, 0, 1);
pub const CLASSIFIER_TIMESTAMP: Path = Path::resource(CLASSIFIER, 0, 2);

pub const MAX_ANOMALY_SCORE: Path = Path::resource(ANOMALY_ANALYZER, 0, 0);
pub const CAPTURED_WINDOW: Path = Path::resource(ANOMALY_ANALYZER, 0, 1);
pub const ANALYSIS_PERIOD: Path = Path::resource(ANOMALY_ANALYZER, 0, 2);
pub const ANALYZER_RESET: Path = Path::resource(ANOMALY_ANALYZER, 0, 3);

pub const PATTERN_NAME: u16 = 0;
pub const DETECTION_COUNTER: u16 = 1;
pub const LAST_DETECTED: u16 = 2;
pub const RESET_COUNTER: u16 = 3;

pub const DEFAULT_ANALYSIS_PERIOD: i64 = 86_400;
/// Minimum spacing of /33652 notifications.
pub const CLASSIFIER_NOTIFY_INTERVAL: Duration = Duration::from_secs(1);

#[derive(Deserialize)]
struct RegistryFile {
    objects: Vec<ObjectDef>,
}

/// Definitions of the five TinyML objects.
pub fn registry() -> &'static [ObjectDef] {
    static DEFS: OnceLock<Vec<ObjectDef>> = OnceLock::new();
    DEFS.get_or_init(|| {
        let file: RegistryFile = serde_json::from_str(OBJECTS_JSON).expect("objects.json is valid");
        file.objects
    })
}

/// Standard objects plus the TinyML ones.
pub fn all_definitions() -> Vec<ObjectDef> {
    let mut defs = crate::lwm2m::standard_objects();
    defs.extend(registry().iter().cloned());
    defs
}

/// Minimum interval between notifications for an observed path.
pub fn notify_interval(path: &Path) -> Duration {
    if path.object == CLASSIFIER {
        CLASSIFIER_NOTIFY_INTERVAL
    } else {
        Duration::ZERO
    }
}

pub fn class_name(id: usize) -> String {
    format!("class-{id}")
}

fn pattern(instance: u16, res: u16) -> Path {
    Path::resource(PATTERN_DETECTOR, instance, res)
}

fn ensure_pattern(store: &mut ObjectStore, class: u16, name: &str) -> Result<(), StoreError> {
    if !store.has_instance(PATTERN_DETECTOR, class) {
        store.create_instance(PATTERN_DETECTOR, class)?;
        store.set(pattern(class, PATTERN_NAME), ResourceValue::String(name.to_string()))?;
        store.set(pattern(class, DETECTION_COUNTER), ResourceValue::Integer(0))?;
    }
    Ok(())
}

/// Create the TinyML object instances and their execute handlers.
pub fn install(store: &mut ObjectStore, class_names: &[String], threshold: f64) -> Result<(), StoreError> {
    for def in registry() {
        if store.object_def(def.id).is_none() {
            store.define(def.clone());
        }
    }
    for obj in [ML_MODEL, ANOMALY_DETECTOR, CLASSIFIER, ANOMALY_ANALYZER] {
        store.create_instance(obj, 0)?;
    }
    for (i, name) in class_names.iter().enumerate() {
        ensure_pattern(store, i as u16, name)?;
    }
    init_value(store, ANOMALY_COUNTER, ResourceValue::Integer(0))?;
    init_value(store, LATEST_ANOMALY_SCORE, ResourceValue::Float(0.0))?;
    init_value(store, THRESHOLD, ResourceValue::Float(threshold))?;
    init_value(store, CLASSIFIER_SCORE, ResourceValue::Float(0.0))?;
    init_value(store, CLASSIFIER_TIMESTAMP, ResourceValue::Time(0))?;
    init_value(store, MAX_ANOMALY_SCORE, ResourceValue::Float(0.0))?;
    init_value(store, ANALYSIS_PERIOD, ResourceValue::Integer(DEFAULT_ANALYSIS_PERIOD))?;

    store.on_execute(
        Path::resource(PATTERN_DETECTOR, 0, RESET_COUNTER),
        Box::new(|st, p, _| {
            st.set(pattern(p.instance.unwrap_or_default(), DETECTION_COUNTER), ResourceValue::Integer(0))
                .map(|_| ())
        }),
    );
    store.on_execute(
        ANOMALY_RESET,
        Box::new(|st, _, _| {
            st.set(ANOMALY_COUNTER, ResourceValue::Integer(0))?;
            st.set(LATEST_ANOMALY_SCORE, ResourceValue::Float(0.0))?;
            Ok(())
        }),
    );
    store.on_execute(
        ANALYZER_RESET,
        Box::new(|st, _, _| {
            st.set(MAX_ANOMALY_SCORE, ResourceValue::Float(0.0))?;
            st.unset(CAPTURED_WINDOW);
            Ok(())
        }),
    );
    Ok(())
}

fn init_value(store: &mut ObjectStore, path: Path, value: ResourceValue) -> Result<(), StoreError> {
    if store.get(&path).is_none() {
        store.set(path, value)?;
    }
    Ok(())
}

/// Set /33654 to the running model. Returns whether anything changed.
pub fn report_model(store: &mut ObjectStore, name: &str, version: &str) -> Result<bool, StoreError> {
    let a = store.set(MODEL_NAME, ResourceValue::String(name.to_string()))?;
    let b = store.set(MODEL_VERSION, ResourceValue::String(version.to_string()))?;
    Ok(a || b)
}

/// Record one classified window. Returns true when the score exceeded the
/// threshold in force at that moment.
pub fn publish_classification(
    store: &mut ObjectStore,
    probabilities: &[f64],
    class: usize,
    score: f64,
    now: i64,
) -> Result<bool, StoreError> {
    let probs: BTreeMap<u16, ResourceValue> = probabilities
        .iter()
        .enumerate()
        .map(|(i, p)| (i as u16, ResourceValue::Float(*p)))
        .collect();
    store.set_multi(CLASS_PROBABILITIES, probs)?;
    store.set(CLASSIFIER_SCORE, ResourceValue::Float(score))?;
    store.set(CLASSIFIER_TIMESTAMP, ResourceValue::Time(now))?;

    let class = class as u16;
    ensure_pattern(store, class, &class_name(class as usize))?;
    let count = store.get_i64(&pattern(class, DETECTION_COUNTER)).unwrap_or(0);
    store.set(pattern(class, DETECTION_COUNTER), ResourceValue::Integer(count + 1))?;
    store.set(pattern(class, LAST_DETECTED), ResourceValue::Time(now))?;

    let threshold = store.get_f64(&THRESHOLD).unwrap_or(f64::INFINITY);
    let anomalous = score > threshold;
    if anomalous {
        let n = store.get_i64(&ANOMALY_COUNTER).unwrap_or(0);
        store.set(ANOMALY_COUNTER, ResourceValue::Integer(n + 1))?;
        store.set(LATEST_ANOMALY_SCORE, ResourceValue::Float(score))?;
    }
    Ok(anomalous)
}

/// Per-device analysis-period bookkeeping for /33653.
#[derive(Clone, Debug)]
pub struct Analyzer {
    period_start: i64,
}

impl Analyzer {
    /// Periods are anchored at `boot_time`.
    pub fn new(boot_time: i64) -> Analyzer {
        Analyzer {
            period_start: boot_time,
        }
    }

    pub fn period_start(&self) -> i64 {
        self.period_start
    }

    /// Close the period if it has elapsed. Returns the closing values,
    /// which the caller notifies before they are cleared.
    pub fn roll_over(&mut self, store: &mut ObjectStore, now: i64) -> Result<Option<Vec<SenmlRecord>>, StoreError> {
        let period = store.get_i64(&ANALYSIS_PERIOD).unwrap_or(DEFAULT_ANALYSIS_PERIOD).max(1);
        if now < self.period_start + period {
            return Ok(None);
        }
        let closing = store.read(&Path::instance(ANOMALY_ANALYZER, 0))?;
        let elapsed = (now - self.period_start) / period;
        self.period_start += elapsed * period;
        store.set(MAX_ANOMALY_SCORE, ResourceValue::Float(0.0))?;
        store.unset(CAPTURED_WINDOW);
        Ok(Some(closing))
    }

    /// Keep the window with the highest score of the current period.
    /// Returns the closing values if this call rolled the period over.
    pub fn update(
        &mut self,
        store: &mut ObjectStore,
        window: &SampleWindow,
        score: f64,
        now: i64,
    ) -> Result<Option<Vec<SenmlRecord>>, StoreError> {
        let closed = self.roll_over(store, now)?;
        let max = store.get_f64(&MAX_ANOMALY_SCORE).unwrap_or(0.0);
        if score > max || store.get(&CAPTURED_WINDOW).is_none() {
            store.set(MAX_ANOMALY_SCORE, ResourceValue::Float(score))?;
            store.set(CAPTURED_WINDOW, ResourceValue::Opaque(window.to_bytes()))?;
        }
        Ok(closed)
    }
}

/// Decode a /33653/0/1 capture.
pub fn decode_capture(bytes: &[u8]) -> Result<SampleWindow, crate::ml::MlError> {
    SampleWindow::from_bytes(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn device_store() -> ObjectStore {
        let mut s = ObjectStore::with_defs(all_definitions());
        let names = vec!["idle".to_string(), "circle".to_string(), "shake".to_string()];
        install(&mut s, &names, 2.0).unwrap();
        report_model(&mut s, "MODEL1", "1.0.0").unwrap();
        s
    }

    fn window(v: f64) -> SampleWindow {
        SampleWindow::new(vec![[v, 0.0, 9.81]; 32])
    }

    #[test]
    fn registry_has_the_five_objects() {
        let ids: Vec<u16> = registry().iter().map(|o| o.id).collect();
        assert_eq!(ids, [33654, 33650, 33651, 33652, 33653]);
        for o in registry() {
            o.validate().unwrap();
        }
    }

    #[test]
    fn detection_counter_counts() {
        let mut s = device_store();
        for t in 0..3 {
            publish_classification(&mut s, &[0.1, 0.8, 0.1], 1, 0.5, t).unwrap();
        }
        assert_eq!(s.get_i64(&Path::resource(33650, 1, 1)), Some(3));
        assert_eq!(s.get_i64(&Path::resource(33650, 0, 1)), Some(0));
    }

    #[test]
    fn anomaly_above_threshold() {
        let mut s = device_store();
        assert!(publish_classification(&mut s, &[1.0, 0.0, 0.0], 0, 5.0, 1).unwrap());
        assert_eq!(s.get_i64(&ANOMALY_COUNTER), Some(1));
        assert_eq!(s.get_f64(&LATEST_ANOMALY_SCORE), Some(5.0));
        assert!(!publish_classification(&mut s, &[1.0, 0.0, 0.0], 0, 1.0, 2).unwrap());
        assert_eq!(s.get_i64(&ANOMALY_COUNTER), Some(1));
        assert_eq!(s.get_f64(&CLASSIFIER_SCORE), Some(1.0));
    }

    #[test]
    fn probabilities_read_back() {
        let mut s = device_store();
        let probs = [0.25, 0.5, 0.25];
        publish_classification(&mut s, &probs, 1, 0.0, 1).unwrap();
        let recs = s.read(&CLASS_PROBABILITIES).unwrap();
        let back: Vec<f64> = recs.iter().map(|r| r.value.as_f64().unwrap()).collect();
        assert_eq!(back, probs);
    }

    #[test]
    fn unknown_class_creates_instance() {
        let mut s = device_store();
        publish_classification(&mut s, &[0.0, 0.0, 0.0, 1.0], 3, 0.0, 1).unwrap();
        assert_eq!(s.get_str(&Path::resource(33650, 3, 0)), Some("class-3"));
    }

    #[test]
    fn analyzer_keeps_running_max() {
        let mut s = device_store();
        let mut a = Analyzer::new(0);
        for (t, score) in [1.0, 3.0, 2.0].into_iter().enumerate() {
            a.update(&mut s, &window(score), score, t as i64).unwrap();
        }
        assert_eq!(s.get_f64(&MAX_ANOMALY_SCORE), Some(3.0));
        let captured = decode_capture(s.get(&CAPTURED_WINDOW).unwrap().as_bytes().unwrap()).unwrap();
        let expected: Vec<[f64; 3]> = window(3.0).samples.iter().map(|s| s.map(|x| x as f32 as f64)).collect();
        assert_eq!(captured.samples, expected);
        assert_eq!(captured.samples.len(), 32);
    }

    #[test]
    fn analyzer_rollover_reports_then_resets() {
        let mut s = device_store();
        s.write(ANALYSIS_PERIOD, ResourceValue::Integer(10)).unwrap();
        let mut a = Analyzer::new(100);
        a.update(&mut s, &window(4.0), 4.0, 105).unwrap();
        let closed = a.roll_over(&mut s, 111).unwrap().expect("period closed");
        let max = closed.iter().find(|r| r.path == MAX_ANOMALY_SCORE).unwrap();
        assert_eq!(max.value, ResourceValue::Float(4.0));
        assert_eq!(s.get_f64(&MAX_ANOMALY_SCORE), Some(0.0));
        assert!(s.get(&CAPTURED_WINDOW).is_none());
        assert_eq!(a.period_start(), 110);
        assert!(a.roll_over(&mut s, 115).unwrap().is_none());
    }

    #[test]
    fn report_model_detects_changes() {
        let mut s = device_store();
        assert!(!report_model(&mut s, "MODEL1", "1.0.0").unwrap());
        assert!(report_model(&mut s, "MODEL2", "2.0.0").unwrap());
    }

    #[test]
    fn reset_handlers() {
        let mut s = device_store();
        publish_classification(&mut s, &[0.0, 1.0, 0.0], 1, 9.0, 1).unwrap();
        s.execute(Path::resource(33650, 1, 3), "").unwrap();
        s.execute(ANOMALY_RESET, "").unwrap();
        assert_eq!(s.get_i64(&Path::resource(33650, 1, 1)), Some(0));
        assert_eq!(s.get_i64(&ANOMALY_COUNTER), Some(0));
    }
}
