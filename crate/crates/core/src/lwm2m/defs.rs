//! Object and resource definitions, plus the standard objects every client
//! carries (/0 Security, /1 Server, /3 Device, /5 Firmware Update).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::value::ValueKind;

/// Allowed remote operations on a resource.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Ops {
    pub read: bool,
    pub write: bool,
    pub execute: bool,
}

impl Ops {
    pub const R: Ops = Ops {
        read: true,
        write: false,
        execute: false,
    };
    pub const W: Ops = Ops {
        read: false,
        write: true,
        execute: false,
    };
    pub const RW: Ops = Ops {
        read: true,
        write: true,
        execute: false,
    };
    pub const E: Ops = Ops {
        read: false,
        write: false,
        execute: true,
    };
}

impl fmt::Display for Ops {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.read {
            f.write_str("R")?;
        }
        if self.write {
            f.write_str("W")?;
        }
        if self.execute {
            f.write_str("E")?;
        }
        Ok(())
    }
}

impl FromStr for Ops {
    type Err = String;

    fn from_str(s: &str) -> Result<Ops, String> {
        let mut ops = Ops::default();
        for c in s.chars() {
            match c {
                'R' => ops.read = true,
                'W' => ops.write = true,
                'E' => ops.execute = true,
                _ => return Err(format!("unknown operation {c:?} in {s:?}")),
            }
        }
        Ok(ops)
    }
}

impl Serialize for Ops {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Ops {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Ops, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceDef {
    pub id: u16,
    pub name: String,
    pub ops: Ops,
    /// `None` for executable resources.
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ValueKind>,
    #[serde(default)]
    pub multi_instance: bool,
    #[serde(default)]
    pub mandatory: bool,
}

impl ResourceDef {
    pub fn new(id: u16, name: &str, ops: Ops, kind: ValueKind) -> ResourceDef {
        ResourceDef {
            id,
            name: name.to_string(),
            ops,
            kind: Some(kind),
            multi_instance: false,
            mandatory: true,
        }
    }

    pub fn exec(id: u16, name: &str) -> ResourceDef {
        ResourceDef {
            id,
            name: name.to_string(),
            ops: Ops::E,
            kind: None,
            multi_instance: false,
            mandatory: false,
        }
    }

    pub fn multi(mut self) -> ResourceDef {
        self.multi_instance = true;
        self
    }

    pub fn optional(mut self) -> ResourceDef {
        self.mandatory = false;
        self
    }

    /// Check the definition's own consistency.
    pub fn validate(&self) -> Result<(), String> {
        match (self.ops.execute, self.kind) {
            (true, Some(_)) => Err(format!("executable resource {} carries a value kind", self.id)),
            (false, None) => Err(format!("resource {} has no value kind", self.id)),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectDef {
    pub id: u16,
    pub name: String,
    #[serde(default)]
    pub multi_instance: bool,
    #[serde(default)]
    pub mandatory: bool,
    pub resources: Vec<ResourceDef>,
}

impl ObjectDef {
    pub fn resource(&self, id: u16) -> Option<&ResourceDef> {
        self.resources.iter().find(|r| r.id == id)
    }

    pub fn validate(&self) -> Result<(), String> {
        for (i, r) in self.resources.iter().enumerate() {
            r.validate().map_err(|e| format!("/{}: {e}", self.id))?;
            if self.resources[..i].iter().any(|o| o.id == r.id) {
                return Err(format!("/{}: duplicate resource id {}", self.id, r.id));
            }
        }
        Ok(())
    }
}

pub const SECURITY: u16 = 0;
pub const SERVER: u16 = 1;
pub const DEVICE: u16 = 3;
pub const FIRMWARE: u16 = 5;

pub mod security {
    pub const SERVER_URI: u16 = 0;
    pub const BOOTSTRAP_SERVER: u16 = 1;
    pub const SHORT_SERVER_ID: u16 = 10;
}

pub mod server {
    pub const SHORT_SERVER_ID: u16 = 0;
    pub const LIFETIME: u16 = 1;
    pub const BINDING: u16 = 7;
    pub const UPDATE_TRIGGER: u16 = 8;
}

pub mod device {
    pub const MANUFACTURER: u16 = 0;
    pub const MODEL_NUMBER: u16 = 1;
    pub const FIRMWARE_VERSION: u16 = 3;
    pub const REBOOT: u16 = 4;
    pub const CURRENT_TIME: u16 = 13;
}

pub mod firmware {
    pub const PACKAGE: u16 = 0;
    pub const PACKAGE_URI: u16 = 1;
    pub const UPDATE: u16 = 2;
    pub const STATE: u16 = 3;
    pub const RESULT: u16 = 5;
    pub const PKG_NAME: u16 = 6;
    pub const PKG_VERSION: u16 = 7;
    pub const DELIVERY_METHOD: u16 = 9;
}

pub fn standard_objects() -> Vec<ObjectDef> {
    use ValueKind::*;
    vec![
        ObjectDef {
            id: SECURITY,
            name: "LwM2M Security".into(),
            multi_instance: true,
            mandatory: true,
            resources: vec![
                ResourceDef::new(security::SERVER_URI, "LwM2M Server URI", Ops::RW, String),
                ResourceDef::new(security::BOOTSTRAP_SERVER, "Bootstrap-Server", Ops::RW, Boolean),
                ResourceDef::new(security::SHORT_SERVER_ID, "Short Server ID", Ops::RW, Integer).optional(),
            ],
        },
        ObjectDef {
            id: SERVER,
            name: "LwM2M Server".into(),
            multi_instance: true,
            mandatory: true,
            resources: vec![
                ResourceDef::new(server::SHORT_SERVER_ID, "Short Server ID", Ops::R, Integer),
                ResourceDef::new(server::LIFETIME, "Lifetime", Ops::RW, Integer),
                ResourceDef::new(server::BINDING, "Binding", Ops::RW, String),
                ResourceDef::exec(server::UPDATE_TRIGGER, "Registration Update Trigger"),
            ],
        },
        ObjectDef {
            id: DEVICE,
            name: "Device".into(),
            multi_instance: false,
            mandatory: true,
            resources: vec![
                ResourceDef::new(device::MANUFACTURER, "Manufacturer", Ops::R, String).optional(),
                ResourceDef::new(device::MODEL_NUMBER, "Model Number", Ops::R, String).optional(),
                ResourceDef::new(device::FIRMWARE_VERSION, "Firmware Version", Ops::R, String).optional(),
                ResourceDef::exec(device::REBOOT, "Reboot"),
                ResourceDef::new(device::CURRENT_TIME, "Current Time", Ops::RW, Time).optional(),
            ],
        },
        ObjectDef {
            id: FIRMWARE,
            name: "Firmware Update".into(),
            multi_instance: false,
            mandatory: false,
            resources: vec![
                ResourceDef::new(firmware::PACKAGE, "Package", Ops::W, Opaque),
                ResourceDef::new(firmware::PACKAGE_URI, "Package URI", Ops::RW, String),
                ResourceDef::exec(firmware::UPDATE, "Update"),
                ResourceDef::new(firmware::STATE, "State", Ops::R, Integer),
                ResourceDef::new(firmware::RESULT, "Update Result", Ops::R, Integer),
                ResourceDef::new(firmware::PKG_NAME, "PkgName", Ops::R, String).optional(),
                ResourceDef::new(firmware::PKG_VERSION, "PkgVersion", Ops::R, String).optional(),
                ResourceDef::new(firmware::DELIVERY_METHOD, "Firmware Update Delivery Method", Ops::R, Integer),
            ],
        },
    ]
}
