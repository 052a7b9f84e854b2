use std::time::Duration;

use rand::Rng;

/// CoAP reliability parameters for confirmable messages.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionParams {
    pub ack_timeout: Duration,
    pub ack_random_factor: f64,
    pub max_retransmit: u32,
    /// How long a request handler may take before an empty ACK is sent and
    /// the response follows as a separate message.
    pub separate_response_after: Duration,
}

impl Default for TransmissionParams {
    fn default() -> Self {
        TransmissionParams {
            ack_timeout: Duration::from_secs(2),
            ack_random_factor: 1.5,
            max_retransmit: 4,
            separate_response_after: Duration::from_secs(1),
        }
    }
}

impl TransmissionParams {
    /// Initial retransmission timeout, uniform in
    /// `[ack_timeout, ack_timeout * ack_random_factor]`.
    pub fn initial_timeout<R: Rng + ?Sized>(&self, rng: &mut R) -> Duration {
        let lo = self.ack_timeout.as_secs_f64();
        let hi = lo * self.ack_random_factor;
        if hi <= lo {
            return self.ack_timeout;
        }
        Duration::from_secs_f64(rng.random_range(lo..=hi))
    }

    /// Time from the first transmission to the last retransmission.
    pub fn max_transmit_span(&self) -> Duration {
        self.ack_timeout
            .mul_f64(((1u64 << self.max_retransmit) - 1) as f64 * self.ack_random_factor)
    }

    /// Time from the first transmission until the sender gives up waiting
    /// for an acknowledgement (93 s with defaults).
    pub fn max_transmit_wait(&self) -> Duration {
        self.ack_timeout
            .mul_f64(((1u64 << (self.max_retransmit + 1)) - 1) as f64 * self.ack_random_factor)
    }

    /// How long a message id stays in the deduplication cache.
    pub fn exchange_lifetime(&self) -> Duration {
        // MAX_LATENCY 100 s twice, plus PROCESSING_DELAY = ack_timeout
        self.max_transmit_span() + Duration::from_secs(200) + self.ack_timeout
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn derived_timeouts() {
        let p = TransmissionParams::default();
        assert_eq!(p.max_transmit_span(), Duration::from_secs(45));
        assert_eq!(p.max_transmit_wait(), Duration::from_secs(93));
        assert_eq!(p.exchange_lifetime(), Duration::from_secs(247));
    }

    #[test]
    fn initial_timeout_in_range() {
        let p = TransmissionParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let t = p.initial_timeout(&mut rng);
            assert!(t >= Duration::from_secs(2) && t <= Duration::from_secs(3));
        }
    }
}
