//! Wall-clock view over the tokio clock. Under a paused runtime the clock is
//! simulated, so every timestamp in a simulation run is reproducible.

use tokio::time::Instant;

#[derive(Clone, Copy, Debug)]
pub struct Clock {
    origin: Instant,
    base_unix: f64,
}

impl Clock {
    /// Clock whose zero is `base_unix` seconds at the moment of creation.
    pub fn starting_at(base_unix: f64) -> Clock {
        Clock {
            origin: Instant::now(),
            base_unix,
        }
    }

    /// Clock tracking the system time.
    pub fn system() -> Clock {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        Clock::starting_at(now)
    }

    /// Seconds since the Unix epoch.
    pub fn now(&self) -> f64 {
        self.base_unix + self.origin.elapsed().as_secs_f64()
    }

    pub fn now_secs(&self) -> i64 {
        self.now().floor() as i64
    }

    pub fn elapsed(&self) -> std::time::Duration {
        self.origin.elapsed()
    }
}
