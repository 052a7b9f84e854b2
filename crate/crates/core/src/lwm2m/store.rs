//! In-memory object store with definition-checked reads, writes and executes.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use super::defs::{ObjectDef, ResourceDef};
use super::path::Path;
use super::senml::SenmlRecord;
use super::value::ResourceValue;
use crate::coap::Code;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("method not allowed: {0}")]
    MethodNotAllowed(String),
    #[error("bad request: {0}")]
    BadRequest(String),
}

impl StoreError {
    pub fn code(&self) -> Code {
        match self {
            StoreError::NotFound(_) => Code::NOT_FOUND,
            StoreError::MethodNotAllowed(_) => Code::METHOD_NOT_ALLOWED,
            StoreError::BadRequest(_) => Code::BAD_REQUEST,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Slot {
    Single(ResourceValue),
    Multi(BTreeMap<u16, ResourceValue>),
}

pub type ExecHandler = Box<dyn FnMut(&mut ObjectStore, Path, &str) -> Result<(), StoreError> + Send>;

type Instance = BTreeMap<u16, Slot>;

#[derive(Default)]
pub struct ObjectStore {
    defs: BTreeMap<u16, ObjectDef>,
    data: BTreeMap<u16, BTreeMap<u16, Instance>>,
    handlers: HashMap<Path, ExecHandler>,
    changed: BTreeSet<Path>,
}

impl std::fmt::Debug for ObjectStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ObjectStore")
            .field("objects", &self.defs.keys().collect::<Vec<_>>())
            .field("data", &self.data)
            .finish()
    }
}

fn not_found(p: &Path) -> StoreError {
    StoreError::NotFound(p.to_string())
}

impl ObjectStore {
    pub fn new() -> ObjectStore {
        ObjectStore::default()
    }

    pub fn with_defs(defs: impl IntoIterator<Item = ObjectDef>) -> ObjectStore {
        let mut store = ObjectStore::new();
        for d in defs {
            store.define(d);
        }
        store
    }

    pub fn define(&mut self, def: ObjectDef) {
        self.defs.insert(def.id, def);
    }

    pub fn object_def(&self, object: u16) -> Option<&ObjectDef> {
        self.defs.get(&object)
    }

    pub fn resource_def(&self, path: &Path) -> Option<&ResourceDef> {
        self.defs.get(&path.object)?.resource(path.resource?)
    }

    pub fn create_instance(&mut self, object: u16, instance: u16) -> Result<(), StoreError> {
        let def = self
            .defs
            .get(&object)
            .ok_or_else(|| not_found(&Path::object(object)))?;
        let insts = self.data.entry(object).or_default();
        if insts.contains_key(&instance) {
            return Ok(());
        }
        if !def.multi_instance && !insts.is_empty() {
            return Err(StoreError::BadRequest(format!("/{object} is single-instance")));
        }
        insts.insert(instance, Instance::new());
        self.changed.insert(Path::instance(object, instance));
        Ok(())
    }

    pub fn delete_instance(&mut self, object: u16, instance: u16) -> Result<(), StoreError> {
        let insts = self
            .data
            .get_mut(&object)
            .ok_or_else(|| not_found(&Path::instance(object, instance)))?;
        insts
            .remove(&instance)
            .ok_or_else(|| not_found(&Path::instance(object, instance)))?;
        if insts.is_empty() {
            self.data.remove(&object);
        }
        Ok(())
    }

    pub fn has_instance(&self, object: u16, instance: u16) -> bool {
        self.data.get(&object).is_some_and(|i| i.contains_key(&instance))
    }

    pub fn instances(&self, object: u16) -> Vec<u16> {
        self.data
            .get(&object)
            .map(|i| i.keys().copied().collect())
            .unwrap_or_default()
    }

    /// Local (device-side) update. Only the value kind is checked, not the
    /// remote operation mask. Returns whether the stored value changed.
    pub fn set(&mut self, path: Path, value: ResourceValue) -> Result<bool, StoreError> {
        let (Some(inst), Some(res)) = (path.instance, path.resource) else {
            return Err(StoreError::BadRequest(format!("{path} is not a resource")));
        };
        let def = self.resource_def(&path).ok_or_else(|| not_found(&path))?;
        let Some(kind) = def.kind else {
            return Err(StoreError::MethodNotAllowed(format!("{path} is executable")));
        };
        let multi = def.multi_instance;
        let value = value
            .coerce(kind)
            .ok_or_else(|| StoreError::BadRequest(format!("{path} expects {kind:?}")))?;
        let instance = self
            .data
            .get_mut(&path.object)
            .and_then(|o| o.get_mut(&inst))
            .ok_or_else(|| not_found(&Path::instance(path.object, inst)))?;
        let changed = match (multi, path.resource_instance) {
            (false, None) => {
                let new = Slot::Single(value);
                let changed = instance.get(&res) != Some(&new);
                instance.insert(res, new);
                changed
            }
            (true, Some(ri)) => {
                let slot = instance.entry(res).or_insert_with(|| Slot::Multi(BTreeMap::new()));
                let Slot::Multi(map) = slot else {
                    unreachable!("multi-instance resource stored as single");
                };
                map.insert(ri, value.clone()) != Some(value)
            }
            (false, Some(_)) => {
                return Err(StoreError::BadRequest(format!("{path}: resource is single-instance")))
            }
            (true, None) => {
                return Err(StoreError::BadRequest(format!("{path}: resource instance id required")))
            }
        };
        if changed {
            self.changed.insert(path);
        }
        Ok(changed)
    }

    /// Replace every instance of a multi-instance resource at once.
    pub fn set_multi(&mut self, path: Path, values: BTreeMap<u16, ResourceValue>) -> Result<bool, StoreError> {
        let resource = path.resource_path().ok_or_else(|| StoreError::BadRequest(path.to_string()))?;
        let def = self.resource_def(&resource).ok_or_else(|| not_found(&resource))?;
        if !def.multi_instance {
            return Err(StoreError::BadRequest(format!("{resource}: resource is single-instance")));
        }
        let kind = def.kind.ok_or_else(|| StoreError::MethodNotAllowed(resource.to_string()))?;
        let mut coerced = BTreeMap::new();
        for (ri, v) in values {
            let v = v
                .coerce(kind)
                .ok_or_else(|| StoreError::BadRequest(format!("{resource}/{ri} expects {kind:?}")))?;
            coerced.insert(ri, v);
        }
        let instance = self
            .data
            .get_mut(&resource.object)
            .and_then(|o| o.get_mut(&resource.instance.unwrap_or_default()))
            .ok_or_else(|| not_found(&resource))?;
        let new = Slot::Multi(coerced);
        let rid = resource.resource.unwrap_or_default();
        let changed = instance.get(&rid) != Some(&new);
        instance.insert(rid, new);
        if changed {
            self.changed.insert(resource);
        }
        Ok(changed)
    }

    /// Drop a resource value, e.g. when a capture buffer is cleared.
    pub fn unset(&mut self, path: Path) -> bool {
        let (Some(inst), Some(res)) = (path.instance, path.resource) else {
            return false;
        };
        let removed = self
            .data
            .get_mut(&path.object)
            .and_then(|o| o.get_mut(&inst))
            .and_then(|i| i.remove(&res))
            .is_some();
        if removed {
            self.changed.insert(path);
        }
        removed
    }

    /// Single value at a resource or resource-instance path.
    pub fn get(&self, path: &Path) -> Option<&ResourceValue> {
        let slot = self.data.get(&path.object)?.get(&path.instance?)?.get(&path.resource?)?;
        match (slot, path.resource_instance) {
            (Slot::Single(v), None) => Some(v),
            (Slot::Multi(m), Some(ri)) => m.get(&ri),
            _ => None,
        }
    }

    pub fn get_multi(&self, path: &Path) -> Option<&BTreeMap<u16, ResourceValue>> {
        match self.data.get(&path.object)?.get(&path.instance?)?.get(&path.resource?)? {
            Slot::Multi(m) => Some(m),
            Slot::Single(_) => None,
        }
    }

    pub fn get_f64(&self, path: &Path) -> Option<f64> {
        self.get(path).and_then(ResourceValue::as_f64)
    }

    pub fn get_i64(&self, path: &Path) -> Option<i64> {
        self.get(path).and_then(ResourceValue::as_i64)
    }

    pub fn get_str(&self, path: &Path) -> Option<&str> {
        self.get(path).and_then(ResourceValue::as_str)
    }

    fn collect(&self, path: &Path, remote: bool) -> Result<Vec<SenmlRecord>, StoreError> {
        let def = self.defs.get(&path.object).ok_or_else(|| not_found(path))?;
        let insts = self.data.get(&path.object);
        if let Some(res) = path.resource {
            let rdef = def.resource(res).ok_or_else(|| not_found(path))?;
            if remote && !rdef.ops.read {
                return Err(StoreError::MethodNotAllowed(path.to_string()));
            }
        }
        let mut out = Vec::new();
        let inst_iter: Vec<(&u16, &Instance)> = match (insts, path.instance) {
            (None, None) => Vec::new(),
            (None, Some(_)) => return Err(not_found(path)),
            (Some(m), None) => m.iter().collect(),
            (Some(m), Some(i)) => vec![(m.get_key_value(&i).ok_or_else(|| not_found(path))?)],
        };
        for (&iid, inst) in inst_iter {
            for (&rid, slot) in inst {
                if path.resource.is_some_and(|r| r != rid) {
                    continue;
                }
                let readable = def.resource(rid).is_some_and(|d| d.ops.read);
                if remote && !readable {
                    continue;
                }
                match slot {
                    Slot::Single(v) => {
                        if path.resource_instance.is_none() {
                            out.push(SenmlRecord::new(Path::resource(path.object, iid, rid), v.clone()));
                        }
                    }
                    Slot::Multi(m) => {
                        for (&ri, v) in m {
                            if path.resource_instance.is_some_and(|want| want != ri) {
                                continue;
                            }
                            out.push(SenmlRecord::new(
                                Path::resource_instance(path.object, iid, rid, ri),
                                v.clone(),
                            ));
                        }
                    }
                }
            }
        }
        if out.is_empty() && path.resource.is_some() {
            return Err(not_found(path));
        }
        Ok(out)
    }

    /// Remote read. Object and instance paths return every readable
    /// descendant.
    pub fn read(&self, path: &Path) -> Result<Vec<SenmlRecord>, StoreError> {
        self.collect(path, true)
    }

    /// Local snapshot, ignoring the operation mask.
    pub fn snapshot(&self, path: &Path) -> Result<Vec<SenmlRecord>, StoreError> {
        self.collect(path, false)
    }

    /// Remote write of one value.
    pub fn write(&mut self, path: Path, value: ResourceValue) -> Result<bool, StoreError> {
        let def = self.resource_def(&path).ok_or_else(|| not_found(&path))?;
        if !def.ops.write {
            return Err(StoreError::MethodNotAllowed(path.to_string()));
        }
        if path.instance.is_some_and(|i| !self.has_instance(path.object, i)) {
            return Err(not_found(&path));
        }
        self.set(path, value)
    }

    /// Remote write of a SenML pack addressed at or below `target`. All
    /// records are checked before anything is stored.
    pub fn write_records(&mut self, target: &Path, records: &[SenmlRecord]) -> Result<(), StoreError> {
        for r in records {
            if !target.contains(&r.path) {
                return Err(StoreError::BadRequest(format!("{} outside {target}", r.path)));
            }
            let def = self.resource_def(&r.path).ok_or_else(|| not_found(&r.path))?;
            if !def.ops.write {
                return Err(StoreError::MethodNotAllowed(r.path.to_string()));
            }
            let kind = def.kind.ok_or_else(|| StoreError::MethodNotAllowed(r.path.to_string()))?;
            if r.value.clone().coerce(kind).is_none() {
                return Err(StoreError::BadRequest(format!("{} expects {kind:?}", r.path)));
            }
            let inst = r.path.instance.unwrap_or_default();
            if !self.has_instance(r.path.object, inst) {
                return Err(not_found(&Path::instance(r.path.object, inst)));
            }
        }
        for r in records {
            self.set(r.path, r.value.clone())?;
        }
        Ok(())
    }

    /// Bootstrap-style write: creates the instance if needed and ignores
    /// the operation mask.
    pub fn provision(&mut self, path: Path, value: ResourceValue) -> Result<bool, StoreError> {
        let inst = path.instance.ok_or_else(|| StoreError::BadRequest(path.to_string()))?;
        self.create_instance(path.object, inst)?;
        self.set(path, value)
    }

    pub fn on_execute(&mut self, path: Path, handler: ExecHandler) {
        self.handlers.insert(path, handler);
    }

    pub fn execute(&mut self, path: Path, args: &str) -> Result<(), StoreError> {
        let def = self.resource_def(&path).ok_or_else(|| not_found(&path))?;
        if !def.ops.execute || path.resource_instance.is_some() {
            return Err(StoreError::MethodNotAllowed(path.to_string()));
        }
        if !path.instance.is_some_and(|i| self.has_instance(path.object, i)) {
            return Err(not_found(&path));
        }
        let key = Path::resource(path.object, 0, path.resource.unwrap_or_default());
        let mut handler = self
            .handlers
            .remove(&path)
            .map(|h| (path, h))
            .or_else(|| self.handlers.remove(&key).map(|h| (key, h)))
            .ok_or_else(|| StoreError::NotFound(format!("{path} has no handler")))?;
        let result = (handler.1)(self, path, args);
        self.handlers.entry(handler.0).or_insert(handler.1);
        result
    }

    /// Paths changed since the last call.
    pub fn take_changes(&mut self) -> Vec<Path> {
        std::mem::take(&mut self.changed).into_iter().collect()
    }

    /// Object instances to advertise on registration, ascending. The
    /// security object is never listed.
    pub fn object_links(&self) -> Vec<Path> {
        self.data
            .iter()
            .filter(|(o, _)| **o != super::defs::SECURITY)
            .flat_map(|(o, insts)| insts.keys().map(move |i| Path::instance(*o, *i)))
            .collect()
    }

    /// CoRE link format listing of every instance.
    pub fn discover(&self) -> String {
        self.object_links()
            .iter()
            .map(|p| format!("<{p}>"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Parse a CoRE link-format registration payload back into object paths.
pub fn parse_links(text: &str) -> Vec<Path> {
    text.split(',')
        .filter_map(|entry| {
            let entry = entry.trim();
            let inner = entry.strip_prefix('<')?;
            let end = inner.find('>')?;
            inner[..end].parse().ok()
        })
        .collect()
}
