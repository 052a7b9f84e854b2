use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_CAPACITY: usize = 64;

/// Uniform fixed-size sample of a stream (Algorithm R).
#[derive(Clone, Debug)]
pub struct Reservoir<T> {
    capacity: usize,
    items: Vec<T>,
    seen: u64,
    rng: ChaCha8Rng,
}

impl<T> Reservoir<T> {
    pub fn new(capacity: usize, seed: u64) -> Reservoir<T> {
        Reservoir {
            capacity,
            items: Vec::with_capacity(capacity),
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Returns the slot the item landed in, if it was kept.
    pub fn add(&mut self, item: T) -> Option<usize> {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(item);
            return Some(self.items.len() - 1);
        }
        let j = self.rng.random_range(0..self.seen);
        if j < self.capacity as u64 {
            self.items[j as usize] = item;
            Some(j as usize)
        } else {
            None
        }
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.items.len() == self.capacity
    }

    pub fn clear(&mut self) {
        self.items.clear();
        self.seen = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_first_k() {
        let mut r = Reservoir::new(8, 1);
        for i in 0..8 {
            assert_eq!(r.add(i), Some(i));
        }
        assert_eq!(r.items(), &[0, 1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn never_exceeds_capacity() {
        let mut r = Reservoir::new(64, 2);
        for i in 0..10_000 {
            r.add(i);
            assert_eq!(r.items().len(), (i + 1).min(64));
        }
        assert_eq!(r.seen(), 10_000);
        assert!(r.is_full());
    }
}
