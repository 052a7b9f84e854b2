//! The per-window inference path and on-device retraining.

use super::blob::ModelBundle;
use super::features::{extract_features, FeatureVector, SampleWindow};
use super::kmeans::{kmeans_warm_start, KMeansModel};
use super::reservoir::{Reservoir, DEFAULT_CAPACITY};
use super::MlError;

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub features: FeatureVector,
    pub probabilities: Vec<f64>,
    pub class: usize,
    pub score: f64,
}

/// Warm-started k-means on the reservoir contents. The reservoir must be
/// full.
pub fn on_device_retrain(buf: &Reservoir<FeatureVector>, model: &KMeansModel) -> Result<KMeansModel, MlError> {
    if !buf.is_full() {
        return Err(MlError::ReservoirNotFull {
            have: buf.items().len(),
            need: buf.capacity(),
        });
    }
    Ok(kmeans_warm_start(buf.items(), model)?.model)
}

pub struct Pipeline {
    pub bundle: ModelBundle,
    /// Scaled feature vectors seen so far.
    pub reservoir: Reservoir<FeatureVector>,
}

impl Pipeline {
    pub fn new(bundle: ModelBundle, seed: u64) -> Pipeline {
        Pipeline {
            bundle,
            reservoir: Reservoir::new(DEFAULT_CAPACITY, seed),
        }
    }

    pub fn process(&mut self, window: &SampleWindow) -> Result<Inference, MlError> {
        let raw = extract_features(window)?;
        let scaled = self.bundle.scaler.apply(&raw);
        let (probabilities, class) = self.bundle.forest.infer(&scaled)?;
        let score = self.bundle.kmeans.score(&scaled);
        self.reservoir.add(scaled);
        Ok(Inference {
            features: raw,
            probabilities,
            class,
            score,
        })
    }

    /// Retrain the anomaly detector from the reservoir and install it.
    pub fn retrain(&mut self) -> Result<&KMeansModel, MlError> {
        self.bundle.kmeans = on_device_retrain(&self.reservoir, &self.bundle.kmeans)?;
        Ok(&self.bundle.kmeans)
    }
}
