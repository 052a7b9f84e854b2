use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PathError {
    #[error("path must start with '/': {0:?}")]
    NoLeadingSlash(String),
    #[error("non-numeric path segment {0:?}")]
    NonNumeric(String),
    #[error("too many path segments in {0:?}")]
    TooDeep(String),
    #[error("empty path")]
    Empty,
}

/// Address of an object, instance, resource or resource instance:
/// `/obj[/inst[/res[/res-inst]]]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Path {
    pub object: u16,
    pub instance: Option<u16>,
    pub resource: Option<u16>,
    pub resource_instance: Option<u16>,
}

impl Path {
    pub const fn object(object: u16) -> Path {
        Path {
            object,
            instance: None,
            resource: None,
            resource_instance: None,
        }
    }

    pub const fn instance(object: u16, instance: u16) -> Path {
        Path {
            object,
            instance: Some(instance),
            resource: None,
            resource_instance: None,
        }
    }

    pub const fn resource(object: u16, instance: u16, resource: u16) -> Path {
        Path {
            object,
            instance: Some(instance),
            resource: Some(resource),
            resource_instance: None,
        }
    }

    pub const fn resource_instance(object: u16, instance: u16, resource: u16, ri: u16) -> Path {
        Path {
            object,
            instance: Some(instance),
            resource: Some(resource),
            resource_instance: Some(ri),
        }
    }

    pub fn segments(&self) -> Vec<u16> {
        [Some(self.object), self.instance, self.resource, self.resource_instance]
            .into_iter()
            .map_while(|s| s)
            .collect()
    }

    pub fn from_segments(segs: &[u16]) -> Option<Path> {
        match *segs {
            [o] => Some(Path::object(o)),
            [o, i] => Some(Path::instance(o, i)),
            [o, i, r] => Some(Path::resource(o, i, r)),
            [o, i, r, ri] => Some(Path::resource_instance(o, i, r, ri)),
            _ => None,
        }
    }

    pub fn depth(&self) -> usize {
        self.segments().len()
    }

    /// True if `other` is this path or lies below it.
    pub fn contains(&self, other: &Path) -> bool {
        let mine = self.segments();
        let theirs = other.segments();
        theirs.len() >= mine.len() && theirs[..mine.len()] == mine[..]
    }

    /// The enclosing resource path of a resource-instance path.
    pub fn resource_path(&self) -> Option<Path> {
        Some(Path::resource(self.object, self.instance?, self.resource?))
    }
}

pub fn parse_path(text: &str) -> Result<Path, PathError> {
    let rest = text
        .strip_prefix('/')
        .ok_or_else(|| PathError::NoLeadingSlash(text.to_string()))?;
    if rest.is_empty() {
        return Err(PathError::Empty);
    }
    let mut segs = Vec::with_capacity(4);
    for seg in rest.split('/') {
        let id: u16 = seg
            .parse()
            .map_err(|_| PathError::NonNumeric(seg.to_string()))?;
        segs.push(id);
    }
    Path::from_segments(&segs).ok_or_else(|| PathError::TooDeep(text.to_string()))
}

pub fn format_path(path: &Path) -> String {
    path.to_string()
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for seg in self.segments() {
            write!(f, "/{seg}")?;
        }
        Ok(())
    }
}

impl FromStr for Path {
    type Err = PathError;

    fn from_str(s: &str) -> Result<Path, PathError> {
        parse_path(s)
    }
}

impl Serialize for Path {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Path {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Path, D::Error> {
        let s = String::deserialize(d)?;
        parse_path(&s).map_err(serde::de::Error::custom)
    }
}
