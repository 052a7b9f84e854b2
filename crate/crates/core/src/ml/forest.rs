//! Bagged CART random forest.
//!
//! Trees are stored in pre-order: a split's left child is the next node and
//! its right child is addressed explicitly. Thresholds are rounded to f32 at
//! training time, so a model survives the blob format unchanged.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::features::{FeatureVector, FEATURES};
use super::MlError;

pub const DEFAULT_TREES: usize = 100;
pub const DEFAULT_DEPTH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Node {
    /// Go left when `v[feature] <= threshold`.
    Split {
        feature: u8,
        threshold: f32,
        right: u16,
    },
    Leaf {
        class: u8,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(class: u8) -> Tree {
        Tree {
            nodes: vec![Node::Leaf { class }],
        }
    }

    pub fn predict(&self, v: &FeatureVector) -> u8 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { class } => return class,
                Node::Split {
                    feature,
                    threshold,
                    right,
                } => {
                    i = if v[feature as usize] <= threshold as f64 {
                        i + 1
                    } else {
                        right as usize
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { right, .. } => 1 + walk(nodes, i + 1).max(walk(nodes, right as usize)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub n_classes: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ForestParams {
    pub trees: usize,
    pub max_depth: usize,
    /// Features tried per split.
    pub mtry: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            trees: DEFAULT_TREES,
            max_depth: DEFAULT_DEPTH,
            mtry: (FEATURES as f64).sqrt() as usize,
        }
    }
}

impl ForestModel {
    pub fn vote(&self, v: &FeatureVector) -> Vec<u32> {
        let mut votes = vec![0u32; self.n_classes];
        for t in &self.trees {
            votes[t.predict(v) as usize] += 1;
        }
        votes
    }

    /// Vote fractions and the winning class (lowest id on ties).
    pub fn infer(&self, v: &[f64]) -> Result<(Vec<f64>, usize), MlError> {
        let v: &FeatureVector = v
            .try_into()
            .map_err(|_| MlError::Dimension { expected: FEATURES, got: v.len() })?;
        let votes = self.vote(v);
        let n = self.trees.len() as f64;
        let probs: Vec<f64> = votes.iter().map(|&c| c as f64 / n).collect();
        let class = argmax_votes(&votes);
        Ok((probs, class))
    }

    pub fn predict(&self, v: &FeatureVector) -> usize {
        argmax_votes(&self.vote(v))
    }

    pub fn node_count(&self) -> usize {
        self.trees.iter().map(|t| t.nodes.len()).sum()
    }
}

fn argmax_votes(votes: &[u32]) -> usize {
    let mut best = 0;
    for (i, &c) in votes.iter().enumerate() {
        if c > votes[best] {
            best = i;
        }
    }
    best
}

fn gini(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

fn majority(counts: &[usize]) -> u8 {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best as u8
}

struct Builder<'a> {
    x: &'a [FeatureVector],
    y: &'a [usize],
    n_classes: usize,
    params: ForestParams,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &i in idx {
            c[self.y[i]] += 1;
        }
        c
    }

    fn best_split(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Option<(u8, f32)> {
        let parent = self.counts(idx);
        let mut best: Option<(f64, u8, f32)> = None;
        let features = sample(rng, FEATURES, self.params.mtry.clamp(1, FEATURES));
        for f in features.iter() {
            let mut vals: Vec<(f64, usize)> = idx.iter().map(|&i| (self.x[i][f], self.y[i])).collect();
            vals.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = vec![0usize; self.n_classes];
            let mut k = 0;
            while k < vals.len() {
                let v = vals[k].0;
                while k < vals.len() && vals[k].0 == v {
                    left[vals[k].1] += 1;
                    k += 1;
                }
                if k == vals.len() {
                    break;
                }
                let thr = ((v + vals[k].0) / 2.0) as f32;
                // rounding can push the threshold onto a neighbour value
                let n_left = vals.partition_point(|p| p.0 <= thr as f64);
                if n_left == 0 || n_left == vals.len() {
                    continue;
                }
                let (l, r) = if n_left == k {
                    let r: Vec<usize> = parent.iter().zip(&left).map(|(p, l)| p - l).collect();
                    (left.clone(), r)
                } else {
                    let mut l = vec![0; self.n_classes];
                    for p in &vals[..n_left] {
                        l[p.1] += 1;
                    }
                    let r = parent.iter().zip(&l).map(|(p, l)| p - l).collect();
                    (l, r)
                };
                let n = vals.len() as f64;
                let score = n_left as f64 / n * gini(&l, n_left) + (vals.len() - n_left) as f64 / n * gini(&r, vals.len() - n_left);
                if best.is_none_or(|b| score < b.0) {
                    best = Some((score, f as u8, thr));
                }
            }
        }
        let (score, f, thr) = best?;
        (score < gini(&parent, idx.len())).then_some((f, thr))
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) {
        let counts = self.counts(&idx);
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let split = if pure || depth >= self.params.max_depth {
            None
        } else {
            self.best_split(&idx, rng)
        };
        let Some((feature, threshold)) = split else {
            self.nodes.push(Node::Leaf { class: majority(&counts) });
            return;
        };
        let me = self.nodes.len();
        self.nodes.push(Node::Split {
            feature,
            threshold,
            right: 0,
        });
        let (l, r): (Vec<usize>, Vec<usize>) = idx
            .into_iter()
            .partition(|&i| self.x[i][feature as usize] <= threshold as f64);
        self.grow(l, depth + 1, rng);
        let right_at = self.nodes.len() as u16;
        if let Node::Split { right, .. } = &mut self.nodes[me] {
            *right = right_at;
        }
        self.grow(r, depth + 1, rng);
    }
}

/// Train a forest on labelled vectors. Labels must be `0..n_classes`.
pub fn forest_train(x: &[FeatureVector], y: &[usize], params: ForestParams, seed: u64) -> Result<ForestModel, MlError> {
    if x.len() != y.len() {
        return Err(MlError::Dimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.is_empty() {
        return Err(MlError::EmptyTrainingSet);
    }
    let n_classes = y.iter().max().map_or(0, |m| m + 1);
    let present = (0..n_classes).filter(|c| y.contains(c)).count();
    if present < 2 {
        return Err(MlError::SingleClass);
    }
    if n_classes > u8::MAX as usize {
        return Err(MlError::TooManyClasses(n_classes));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trees = Vec::with_capacity(params.trees);
    for _ in 0..params.trees {
        let idx: Vec<usize> = (0..x.len()).map(|_| rng.random_range(0..x.len())).collect();
        let mut b = Builder {
            x,
            y,
            n_classes,
            params,
            nodes: Vec::new(),
        };
        b.grow(idx, 0, &mut rng);
        trees.push(Tree { nodes: b.nodes });
    }
    Ok(ForestModel { trees, n_classes })
}
