//! Labelled sample streams and offline training of a full model bundle.

use std::io::Read;

use super::blob::{ModelBundle, ModelConfig};
use super::features::{extract_features, FeatureVector, SampleWindow};
use super::forest::{forest_train, ForestParams};
use super::kmeans::{kmeans_train, DEFAULT_K};
use super::scaler::Scaler;
use super::MlError;

#[derive(Clone, Debug, PartialEq)]
pub struct LabelledWindow {
    pub label: usize,
    pub window: SampleWindow,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub windows: Vec<LabelledWindow>,
}

impl Dataset {
    pub fn class_id(&mut self, name: &str) -> usize {
        match self.class_names.iter().position(|n| n == name) {
            Some(i) => i,
            None => {
                self.class_names.push(name.to_string());
                self.class_names.len() - 1
            }
        }
    }

    pub fn push(&mut self, label: &str, window: SampleWindow) {
        let label = self.class_id(label);
        self.windows.push(LabelledWindow { label, window });
    }

    /// Read `label,ax,ay,az` rows. Runs of equal labels are cut into
    /// windows of `window` samples; a short tail of each run is dropped. A
    /// header row is skipped when present.
    pub fn from_csv(reader: impl Read, window: usize) -> Result<Dataset, MlError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let mut ds = Dataset::default();
        let mut run_label: Option<String> = None;
        let mut run: Vec<[f64; 3]> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| MlError::Csv(e.to_string()))?;
            if rec.len() != 4 {
                return Err(MlError::Csv(format!("row {}: expected 4 fields, got {}", line + 1, rec.len())));
            }
            let parsed: Result<Vec<f64>, _> = (1..4).map(|i| rec[i].parse::<f64>()).collect();
            let xyz = match parsed {
                Ok(v) => [v[0], v[1], v[2]],
                Err(_) if line == 0 => continue,
                Err(e) => return Err(MlError::Csv(format!("row {}: {e}", line + 1))),
            };
            let label = &rec[0];
            if run_label.as_deref() != Some(label) {
                run.clear();
                run_label = Some(label.to_string());
            }
            run.push(xyz);
            if run.len() == window {
                ds.push(label, SampleWindow::new(std::mem::take(&mut run)));
            }
        }
        Ok(ds)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,ax,ay,az\n");
        for w in &self.windows {
            for s in &w.window.samples {
                out.push_str(&format!("{},{},{},{}\n", self.class_names[w.label], s[0], s[1], s[2]));
            }
        }
        out
    }

    pub fn features(&self) -> Result<(Vec<FeatureVector>, Vec<usize>), MlError> {
        let mut x = Vec::with_capacity(self.windows.len());
        let mut y = Vec::with_capacity(self.windows.len());
        for w in &self.windows {
            x.push(extract_features(&w.window)?);
            y.push(w.label);
        }
        Ok((x, y))
    }
}

/// Scaler, forest and anomaly detector trained on one dataset.
pub fn train_bundle(ds: &Dataset, name: &str, version: &str, seed: u64) -> Result<ModelBundle, MlError> {
    let (raw, y) = ds.features()?;
    let scaler = Scaler::fit(&raw)?.quantized();
    let x: Vec<FeatureVector> = raw.iter().map(|v| scaler.apply(v)).collect();
    let forest = forest_train(&x, &y, ForestParams::default(), seed)?;
    let kmeans = kmeans_train(&x, DEFAULT_K, seed.wrapping_add(1))?;
    if kmeans.reduced_k {
        tracing::warn!(samples = x.len(), "fewer samples than clusters, k reduced");
    }
    let names: Vec<&str> = ds.class_names.iter().map(String::as_str).collect();
    let mut config = ModelConfig::new(name, version, &names);
    if let Some(w) = ds.windows.first() {
        config.window = w.window.len() as u16;
        config.rate_hz = w.window.rate_hz;
    }
    Ok(ModelBundle::new(config, &scaler, forest, kmeans.model))
}
