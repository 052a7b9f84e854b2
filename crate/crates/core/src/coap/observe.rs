//! Notifier side of CoAP observe: who is watching what, and the sequence
//! numbers stamped on each notification.

use std::collections::BTreeMap;
use std::net::SocketAddr;

use thiserror::Error;

use super::message::{option, Code, CoapMessage, MessageType};

const SEQ_MASK: u32 = 0x00FF_FFFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum NotifyError {
    #[error("observation was cancelled")]
    Cancelled,
    #[error("unknown observation")]
    Unknown,
}

pub type ObserveHandle = u64;

#[derive(Clone, Debug)]
pub struct ObserverEntry {
    pub peer: SocketAddr,
    pub token: Vec<u8>,
    pub path: String,
    pub content_format: Option<u16>,
    next_seq: u32,
    cancelled: bool,
}

impl ObserverEntry {
    pub fn is_cancelled(&self) -> bool {
        self.cancelled
    }

    /// Sequence number the next notification will carry.
    pub fn next_seq(&self) -> u32 {
        self.next_seq
    }
}

#[derive(Default, Debug)]
pub struct Observers {
    next_id: ObserveHandle,
    entries: BTreeMap<ObserveHandle, ObserverEntry>,
}

impl Observers {
    pub fn new() -> Observers {
        Observers::default()
    }

    /// Record an observe registration. A repeat registration from the same
    /// peer with the same token replaces the earlier one.
    pub fn subscribe(&mut self, peer: SocketAddr, token: Vec<u8>, path: &str, content_format: Option<u16>) -> ObserveHandle {
        self.entries.retain(|_, e| !(e.peer == peer && e.token == token));
        self.next_id += 1;
        let id = self.next_id;
        self.entries.insert(
            id,
            ObserverEntry {
                peer,
                token,
                path: path.to_string(),
                content_format,
                // sequence 1 is the initial response
                next_seq: 2,
                cancelled: false,
            },
        );
        id
    }

    /// Build the initial response headers for a fresh observation.
    pub fn initial_response(&self, handle: ObserveHandle, request: &CoapMessage) -> Option<CoapMessage> {
        let _ = self.entries.get(&handle)?;
        let mut resp = CoapMessage::response_to(request, Code::CONTENT);
        resp.set_uint_option(option::OBSERVE, 1);
        Some(resp)
    }

    pub fn cancel(&mut self, handle: ObserveHandle) {
        if let Some(e) = self.entries.get_mut(&handle) {
            e.cancelled = true;
        }
    }

    /// Cancel by the (peer, token) pair, as carried by a deregistering GET or
    /// a RST answering a notification.
    pub fn cancel_token(&mut self, peer: SocketAddr, token: &[u8]) -> bool {
        let mut found = false;
        for e in self.entries.values_mut() {
            if e.peer == peer && e.token == token {
                e.cancelled = true;
                found = true;
            }
        }
        found
    }

    /// Forget cancelled entries.
    pub fn prune(&mut self) {
        self.entries.retain(|_, e| !e.cancelled);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn get(&self, handle: ObserveHandle) -> Option<&ObserverEntry> {
        self.entries.get(&handle)
    }

    pub fn active(&self) -> impl Iterator<Item = (ObserveHandle, &ObserverEntry)> {
        self.entries
            .iter()
            .filter(|(_, e)| !e.cancelled)
            .map(|(id, e)| (*id, e))
    }

    /// Prepare the next notification for `handle`: token and a strictly
    /// increasing Observe value are filled in, the rest comes from `msg`.
    pub fn notify(&mut self, handle: ObserveHandle, mut msg: CoapMessage) -> Result<(SocketAddr, CoapMessage), NotifyError> {
        let entry = self.entries.get_mut(&handle).ok_or(NotifyError::Unknown)?;
        if entry.cancelled {
            return Err(NotifyError::Cancelled);
        }
        let seq = entry.next_seq & SEQ_MASK;
        entry.next_seq = entry.next_seq.wrapping_add(1);
        msg.token = entry.token.clone();
        msg.set_uint_option(option::OBSERVE, seq);
        if msg.code.is_empty() {
            msg.code = Code::CONTENT;
        }
        if msg.msg_type == MessageType::Ack {
            msg.msg_type = MessageType::Non;
        }
        Ok((entry.peer, msg))
    }
}
