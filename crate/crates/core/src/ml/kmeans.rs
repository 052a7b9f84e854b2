//! k-means anomaly detector: distance to the nearest centroid, flagged above
//! a percentile threshold of the training scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::features::{FeatureVector, FEATURES};
use super::MlError;

pub const DEFAULT_K: usize = 16;
pub const MAX_ITER: usize = 100;
pub const TOLERANCE: f64 = 1e-6;
pub const THRESHOLD_PERCENTILE: f64 = 99.0;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansModel {
    pub centroids: Vec<FeatureVector>,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub model: KMeansModel,
    pub iterations: usize,
    /// Set when fewer samples than clusters were supplied.
    pub reduced_k: bool,
}

fn dist2(a: &FeatureVector, b: &FeatureVector) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn q32(x: f64) -> f64 {
    x as f32 as f64
}

/// Smallest f32 not below `x`.
fn ceil_f32(x: f64) -> f64 {
    let f = x as f32;
    if (f as f64) >= x {
        f as f64
    } else {
        f.next_up() as f64
    }
}

impl KMeansModel {
    pub fn score(&self, v: &FeatureVector) -> f64 {
        self.centroids
            .iter()
            .map(|c| dist2(c, v))
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }

    pub fn anomaly_score(&self, v: &[f64]) -> Result<f64, MlError> {
        let v: &FeatureVector = v
            .try_into()
            .map_err(|_| MlError::Dimension { expected: FEATURES, got: v.len() })?;
        Ok(self.score(v))
    }

    pub fn is_anomaly(&self, v: &FeatureVector) -> bool {
        self.score(v) > self.threshold
    }

    pub fn nearest(&self, v: &FeatureVector) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.centroids.iter().enumerate() {
            let d = dist2(c, v);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Nearest-rank percentile of `scores`.
pub fn percentile(scores: &[f64], p: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * s.len() as f64).ceil().max(1.0) as usize;
    s[rank.min(s.len()) - 1]
}

fn plus_plus_init(data: &[FeatureVector], k: usize, rng: &mut ChaCha8Rng) -> Vec<FeatureVector> {
    let n = data.len();
    let pick = |rng: &mut ChaCha8Rng| ((rng.random::<f64>() * n as f64) as usize).min(n - 1);
    let mut centroids = vec![data[pick(rng)]];
    let mut d2: Vec<f64> = data.iter().map(|v| dist2(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            data[pick(rng)]
        } else {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            data[chosen]
        };
        for (d, v) in d2.iter_mut().zip(data) {
            *d = d.min(dist2(v, &next));
        }
        centroids.push(next);
    }
    centroids
}

fn lloyd(data: &[FeatureVector], mut centroids: Vec<FeatureVector>) -> (Vec<FeatureVector>, usize) {
    let k = centroids.len();
    let mut iterations = 0;
    for _ in 0..MAX_ITER {
        iterations += 1;
        let mut sums = vec![[0.0; FEATURES]; k];
        let mut counts = vec![0usize; k];
        let model = KMeansModel {
            centroids: centroids.clone(),
            threshold: 0.0,
        };
        for v in data {
            let c = model.nearest(v);
            counts[c] += 1;
            for f in 0..FEATURES {
                sums[c][f] += v[f];
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                // empty cluster keeps its position
                continue;
            }
            let next: FeatureVector = std::array::from_fn(|f| sums[c][f] / counts[c] as f64);
            shift = shift.max(dist2(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        if shift < TOLERANCE {
            break;
        }
    }
    (centroids, iterations)
}

fn finish(data: &[FeatureVector], centroids: Vec<FeatureVector>, iterations: usize, reduced_k: bool) -> KMeansFit {
    let mut model = KMeansModel {
        centroids: centroids.into_iter().map(|c| c.map(q32)).collect(),
        threshold: 0.0,
    };
    let scores: Vec<f64> = data.iter().map(|v| model.score(v)).collect();
    model.threshold = ceil_f32(percentile(&scores, THRESHOLD_PERCENTILE));
    KMeansFit {
        model,
        iterations,
        reduced_k,
    }
}

/// k-means++ seeding followed by Lloyd iterations. Centroids and threshold
/// are rounded to f32 for storage.
pub fn kmeans_train(data: &[FeatureVector], k: usize, seed: u64) -> Result<KMeansFit, MlError> {
    if data.is_empty() {
        return Err(MlError::EmptyTrainingSet);
    }
    if k == 0 {
        return Err(MlError::InvalidParameter("k must be positive"));
    }
    let reduced_k = data.len() < k;
    let k = k.min(data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = plus_plus_init(data, k, &mut rng);
    let (centroids, iterations) = lloyd(data, init);
    Ok(finish(data, centroids, iterations, reduced_k))
}

/// Lloyd iterations started from existing centroids.
pub fn kmeans_warm_start(data: &[FeatureVector], previous: &KMeansModel) -> Result<KMeansFit, MlError> {
    if data.is_empty() {
        return Err(MlError::EmptyTrainingSet);
    }
    let (centroids, iterations) = lloyd(data, previous.centroids.clone());
    Ok(finish(data, centroids, iterations, false))
}
