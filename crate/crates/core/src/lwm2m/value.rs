use std::fmt;

use serde::{Deserialize, Serialize};

/// Declared type of a resource.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Integer,
    Float,
    String,
    Boolean,
    Opaque,
    Time,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum ResourceValue {
    Integer(i64),
    Float(f64),
    String(String),
    Boolean(bool),
    Opaque(Vec<u8>),
    /// Unix seconds.
    Time(i64),
}

impl ResourceValue {
    pub fn kind(&self) -> ValueKind {
        match self {
            ResourceValue::Integer(_) => ValueKind::Integer,
            ResourceValue::Float(_) => ValueKind::Float,
            ResourceValue::String(_) => ValueKind::String,
            ResourceValue::Boolean(_) => ValueKind::Boolean,
            ResourceValue::Opaque(_) => ValueKind::Opaque,
            ResourceValue::Time(_) => ValueKind::Time,
        }
    }

    /// Convert to `kind` where the wire format cannot tell the kinds apart
    /// (numbers in SenML). Returns `None` if the value does not fit.
    pub fn coerce(self, kind: ValueKind) -> Option<ResourceValue> {
        match (self, kind) {
            (v, k) if v.kind() == k => Some(v),
            (ResourceValue::Integer(i), ValueKind::Float) => Some(ResourceValue::Float(i as f64)),
            (ResourceValue::Integer(i), ValueKind::Time) => Some(ResourceValue::Time(i)),
            (ResourceValue::Time(t), ValueKind::Integer) => Some(ResourceValue::Integer(t)),
            (ResourceValue::Float(f), ValueKind::Integer | ValueKind::Time)
                if f.fract() == 0.0 && f.abs() < 9.0e15 =>
            {
                let i = f as i64;
                Some(if kind == ValueKind::Time {
                    ResourceValue::Time(i)
                } else {
                    ResourceValue::Integer(i)
                })
            }
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ResourceValue::Integer(i) | ResourceValue::Time(i) => Some(*i as f64),
            ResourceValue::Float(f) => Some(*f),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            ResourceValue::Integer(i) | ResourceValue::Time(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ResourceValue::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            ResourceValue::Opaque(b) => Some(b),
            _ => None,
        }
    }
}

impl fmt::Display for ResourceValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResourceValue::Integer(i) | ResourceValue::Time(i) => write!(f, "{i}"),
            ResourceValue::Float(x) => write!(f, "{x}"),
            ResourceValue::String(s) => write!(f, "{s}"),
            ResourceValue::Boolean(b) => write!(f, "{b}"),
            ResourceValue::Opaque(b) => write!(f, "<{} bytes>", b.len()),
        }
    }
}
