use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;

use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegistrationRecord {
    pub endpoint: String,
    pub location: String,
    pub lifetime: u32,
    pub binding: String,
    pub objects: Vec<String>,
    pub registered_at: f64,
    pub last_update: f64,
    pub queue_mode: bool,
    pub peer: SocketAddr,
}

impl RegistrationRecord {
    pub fn expires_at(&self) -> f64 {
        self.last_update + self.lifetime as f64
    }

    pub fn is_stale(&self, now: f64) -> bool {
        now > self.expires_at()
    }

    pub fn advertises(&self, path: &str) -> bool {
        self.objects.iter().any(|o| o == path || path.starts_with(&format!("{o}/")))
    }
}

/// Live registrations, addressable by location and endpoint name.
#[derive(Debug, Default)]
pub struct Registry {
    next: u64,
    by_location: BTreeMap<String, RegistrationRecord>,
    by_endpoint: HashMap<String, String>,
}

pub struct Registration {
    pub endpoint: String,
    pub lifetime: u32,
    pub binding: String,
    pub objects: Vec<String>,
    pub peer: SocketAddr,
}

impl Registry {
    pub fn new() -> Registry {
        Registry::default()
    }

    /// Add a registration and return its location. A previous registration
    /// of the same endpoint is dropped and returned.
    pub fn register(&mut self, reg: Registration, now: f64) -> (String, Option<RegistrationRecord>) {
        let old = self
            .by_endpoint
            .remove(&reg.endpoint)
            .and_then(|loc| self.by_location.remove(&loc));
        self.next += 1;
        let location = format!("/rd/{}", self.next);
        let queue_mode = reg.binding.contains('Q');
        self.by_endpoint.insert(reg.endpoint.clone(), location.clone());
        self.by_location.insert(
            location.clone(),
            RegistrationRecord {
                endpoint: reg.endpoint,
                location: location.clone(),
                lifetime: reg.lifetime,
                binding: reg.binding,
                objects: reg.objects,
                registered_at: now,
                last_update: now,
                queue_mode,
                peer: reg.peer,
            },
        );
        (location, old)
    }

    pub fn update(
        &mut self,
        location: &str,
        now: f64,
        lifetime: Option<u32>,
        objects: Option<Vec<String>>,
        peer: SocketAddr,
    ) -> Option<&RegistrationRecord> {
        let rec = self.by_location.get_mut(location)?;
        rec.last_update = now;
        rec.peer = peer;
        if let Some(lt) = lifetime {
            rec.lifetime = lt;
        }
        if let Some(objs) = objects {
            rec.objects = objs;
        }
        Some(rec)
    }

    pub fn deregister(&mut self, location: &str) -> Option<RegistrationRecord> {
        let rec = self.by_location.remove(location)?;
        self.by_endpoint.remove(&rec.endpoint);
        Some(rec)
    }

    pub fn get(&self, endpoint: &str) -> Option<&RegistrationRecord> {
        self.by_location.get(self.by_endpoint.get(endpoint)?)
    }

    pub fn by_location(&self, location: &str) -> Option<&RegistrationRecord> {
        self.by_location.get(location)
    }

    pub fn list(&self) -> Vec<&RegistrationRecord> {
        let mut v: Vec<_> = self.by_location.values().collect();
        v.sort_by(|a, b| a.endpoint.cmp(&b.endpoint));
        v
    }

    /// Drop records that expired more than one further lifetime ago.
    pub fn purge(&mut self, now: f64) -> Vec<RegistrationRecord> {
        let dead: Vec<String> = self
            .by_location
            .values()
            .filter(|r| now > r.expires_at() + r.lifetime as f64)
            .map(|r| r.location.clone())
            .collect();
        dead.iter().filter_map(|l| self.deregister(l)).collect()
    }
}
