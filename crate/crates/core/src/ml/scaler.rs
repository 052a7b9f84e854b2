use super::features::{FeatureVector, FEATURES};
use super::MlError;

/// Per-feature standardisation.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub mean: [f64; FEATURES],
    pub scale: [f64; FEATURES],
}

impl Scaler {
    pub fn identity() -> Scaler {
        Scaler {
            mean: [0.0; FEATURES],
            scale: [1.0; FEATURES],
        }
    }

    /// Mean and population standard deviation; zero deviation maps to 1.
    pub fn fit(vectors: &[FeatureVector]) -> Result<Scaler, MlError> {
        if vectors.is_empty() {
            return Err(MlError::EmptyTrainingSet);
        }
        let n = vectors.len() as f64;
        let mut mean = [0.0; FEATURES];
        for v in vectors {
            for i in 0..FEATURES {
                mean[i] += v[i];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut scale = [0.0; FEATURES];
        for v in vectors {
            for i in 0..FEATURES {
                scale[i] += (v[i] - mean[i]).powi(2);
            }
        }
        for s in scale.iter_mut() {
            *s = (*s / n).sqrt();
            if *s == 0.0 || !s.is_finite() {
                *s = 1.0;
            }
        }
        Ok(Scaler { mean, scale })
    }

    pub fn apply(&self, v: &FeatureVector) -> FeatureVector {
        let mut out = [0.0; FEATURES];
        for i in 0..FEATURES {
            out[i] = (v[i] - self.mean[i]) / self.scale[i];
        }
        out
    }

    /// The same scaler with every parameter rounded to f32, as stored in a
    /// model blob. A scale that rounds to zero becomes 1.
    pub fn quantized(&self) -> Scaler {
        let q = |x: f64| x as f32 as f64;
        let mut out = Scaler {
            mean: self.mean.map(q),
            scale: self.scale.map(q),
        };
        for s in out.scale.iter_mut() {
            if *s == 0.0 || !s.is_finite() {
                *s = 1.0;
            }
        }
        out
    }
}
