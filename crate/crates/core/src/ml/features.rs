//! DSP front end: per-axis min, max, RMS and mean crossings of one
//! accelerometer window.

use super::MlError;

pub const AXES: usize = 3;
pub const FEATURES_PER_AXIS: usize = 4;
pub const FEATURES: usize = AXES * FEATURES_PER_AXIS;
pub const DEFAULT_WINDOW: usize = 32;
pub const DEFAULT_RATE_HZ: u16 = 10;

pub type FeatureVector = [f64; FEATURES];

/// `W` consecutive (x, y, z) samples in m/s².
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWindow {
    pub samples: Vec<[f64; AXES]>,
    pub rate_hz: u16,
}

impl SampleWindow {
    pub fn new(samples: Vec<[f64; AXES]>) -> SampleWindow {
        SampleWindow {
            samples,
            rate_hz: DEFAULT_RATE_HZ,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn axis(&self, axis: usize) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(move |s| s[axis])
    }

    /// Little-endian wire form: sample count (u16), rate (u16), then
    /// x, y, z as f32 for every sample.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.samples.len() * 12);
        out.extend_from_slice(&(self.samples.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.rate_hz.to_le_bytes());
        for s in &self.samples {
            for v in s {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SampleWindow, MlError> {
        if bytes.len() < 4 {
            return Err(MlError::Truncated("window header"));
        }
        let n = u16::from_le_bytes([bytes[0], bytes[1]]) as usize;
        let rate_hz = u16::from_le_bytes([bytes[2], bytes[3]]);
        let body = &bytes[4..];
        if body.len() != n * 12 {
            return Err(MlError::Truncated("window samples"));
        }
        let samples = body
            .chunks_exact(12)
            .map(|c| {
                let f = |i: usize| f32::from_le_bytes([c[i], c[i + 1], c[i + 2], c[i + 3]]) as f64;
                [f(0), f(4), f(8)]
            })
            .collect();
        Ok(SampleWindow { samples, rate_hz })
    }
}

/// Sign changes of `x - mean` between consecutive samples; zero counts as
/// positive.
pub fn mean_crossings(xs: &[f64]) -> usize {
    if xs.is_empty() {
        return 0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.windows(2)
        .filter(|w| (w[0] - mean >= 0.0) != (w[1] - mean >= 0.0))
        .count()
}

pub fn rms(xs: &[f64]) -> f64 {
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn extract_features(window: &SampleWindow) -> Result<FeatureVector, MlError> {
    if window.is_empty() {
        return Err(MlError::EmptyWindow);
    }
    let mut out = [0.0; FEATURES];
    for axis in 0..AXES {
        let xs: Vec<f64> = window.axis(axis).collect();
        let base = axis * FEATURES_PER_AXIS;
        out[base] = xs.iter().copied().fold(f64::INFINITY, f64::min);
        out[base + 1] = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out[base + 2] = rms(&xs);
        out[base + 3] = mean_crossings(&xs) as f64;
    }
    Ok(out)
}
