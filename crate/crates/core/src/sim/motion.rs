//! Synthetic accelerometer.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ml::features::{DEFAULT_RATE_HZ, DEFAULT_WINDOW};
use crate::ml::SampleWindow;

pub const GRAVITY: f64 = 9.81;
pub const DEFAULT_NOISE: f64 = 0.3;

const CIRCLE_HZ: f64 = 1.0;
const CIRCLE_AMPLITUDE: f64 = 3.0;
const SHAKE_HZ: f64 = 3.0;
const SHAKE_AMPLITUDE: f64 = 6.0;
const UPDOWN_HZ: f64 = 2.0;
const UPDOWN_AMPLITUDE: f64 = 8.0;
/// Relative per-window spread of amplitude and tempo.
pub const DEFAULT_VARIABILITY: f64 = 0.3;
/// Largest tilt of the device away from upright, radians.
const MAX_TILT: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    Idle,
    Circle,
    ShakeX,
    UpDownZ,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::Idle, Pattern::Circle, Pattern::ShakeX, Pattern::UpDownZ];

    /// Class label used in training data.
    pub fn label(self) -> &'static str {
        match self {
            Pattern::Idle => "idle",
            Pattern::Circle => "circle",
            Pattern::ShakeX => "shake-x",
            Pattern::UpDownZ => "up-down-z",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Pattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Pattern, String> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.label() == s)
            .ok_or_else(|| format!("unknown pattern {s}"))
    }
}

/// Square-ish wave: a sine pushed towards ±1.
fn squarish(phase: f64) -> f64 {
    (3.0 * phase.sin()).tanh()
}

/// Deterministic motion source. Time runs on across windows and pattern
/// changes, so consecutive windows start at different phases. Each window
/// draws its own amplitude, tempo and tilt within `variability`.
pub struct MotionGenerator {
    pub pattern: Pattern,
    pub noise_sigma: f64,
    pub variability: f64,
    pub rate_hz: u16,
    pub window: usize,
    t: f64,
    amplitude: f64,
    tempo: f64,
    gravity: [f64; 3],
    rng: ChaCha8Rng,
}

impl MotionGenerator {
    /// A generator with `noise_sigma` of 0 is also free of per-window
    /// variation, so its output is exact.
    pub fn new(pattern: Pattern, noise_sigma: f64, seed: u64) -> MotionGenerator {
        MotionGenerator {
            pattern,
            noise_sigma,
            variability: if noise_sigma > 0.0 { DEFAULT_VARIABILITY } else { 0.0 },
            rate_hz: DEFAULT_RATE_HZ,
            window: DEFAULT_WINDOW,
            t: 0.0,
            amplitude: 1.0,
            tempo: 1.0,
            gravity: [0.0, 0.0, GRAVITY],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn draw_window_shape(&mut self) {
        let v = self.variability;
        if v <= 0.0 {
            return;
        }
        self.amplitude = 1.0 + self.rng.random_range(-v..=v);
        self.tempo = 1.0 + self.rng.random_range(-v / 2.0..=v / 2.0);
        let tilt = MAX_TILT * v / DEFAULT_VARIABILITY;
        let (a, b) = (self.rng.random_range(-tilt..=tilt), self.rng.random_range(-tilt..=tilt));
        self.gravity = [GRAVITY * a.sin(), GRAVITY * b.sin() * a.cos(), GRAVITY * a.cos() * b.cos()];
    }

    fn sample(&mut self) -> [f64; 3] {
        let t = self.t;
        let [gx, gy, gz] = self.gravity;
        let a = self.amplitude;
        let clean = match self.pattern {
            Pattern::Idle => [gx, gy, gz],
            Pattern::Circle => {
                let p = TAU * CIRCLE_HZ * t;
                [gx + a * CIRCLE_AMPLITUDE * p.sin(), gy + a * CIRCLE_AMPLITUDE * p.cos(), gz]
            }
            Pattern::ShakeX => [gx + a * SHAKE_AMPLITUDE * squarish(TAU * SHAKE_HZ * t), gy, gz],
            Pattern::UpDownZ => [gx, gy, gz + a * UPDOWN_AMPLITUDE * squarish(TAU * UPDOWN_HZ * t)],
        };
        if self.noise_sigma <= 0.0 {
            return clean;
        }
        let noise = Normal::new(0.0, self.noise_sigma).expect("finite sigma");
        let mut out = clean;
        for v in &mut out {
            *v += noise.sample(&mut self.rng);
        }
        out
    }

    pub fn generate_window(&mut self) -> SampleWindow {
        self.draw_window_shape();
        let dt = self.tempo / self.rate_hz as f64;
        let samples = (0..self.window)
            .map(|_| {
                let s = self.sample();
                self.t += dt;
                s
            })
            .collect();
        SampleWindow {
            samples,
            rate_hz: self.rate_hz,
        }
    }
}
