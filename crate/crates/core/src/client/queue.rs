use std::collections::VecDeque;

use crate::coap::ObserveHandle;
use crate::lwm2m::SenmlRecord;

pub const DEFAULT_QUEUE_CAPACITY: usize = 256;

/// Records for one observation, waiting for the radio.
#[derive(Clone, Debug, PartialEq)]
pub struct Queued {
    pub handle: ObserveHandle,
    pub records: Vec<SenmlRecord>,
}

/// Bounded FIFO of pending notifications. When full, the oldest entry is
/// dropped and counted.
#[derive(Debug)]
pub struct NotificationQueue {
    capacity: usize,
    items: VecDeque<Queued>,
    dropped: u64,
}

impl NotificationQueue {
    pub fn new(capacity: usize) -> NotificationQueue {
        NotificationQueue {
            capacity: capacity.max(1),
            items: VecDeque::new(),
            dropped: 0,
        }
    }

    pub fn push(&mut self, item: Queued) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
            self.dropped += 1;
        }
        self.items.push_back(item);
    }

    /// Put items back at the front after a failed flush, keeping their order.
    pub fn requeue(&mut self, items: Vec<Queued>) {
        for item in items.into_iter().rev() {
            if self.items.len() == self.capacity {
                self.dropped += 1;
                continue;
            }
            self.items.push_front(item);
        }
    }

    pub fn drain(&mut self) -> Vec<Queued> {
        self.items.drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}
