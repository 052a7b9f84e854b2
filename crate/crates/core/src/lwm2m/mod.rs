//! LwM2M data model: paths, typed values, object definitions, the object
//! store, and SenML JSON/CBOR payloads.

pub mod defs;
pub mod path;
pub mod senml;
pub mod store;
pub mod value;

pub use defs::{standard_objects, ObjectDef, Ops, ResourceDef};
pub use path::{format_path, parse_path, Path, PathError};
pub use senml::{senml_decode, senml_encode, SenmlError, SenmlFormat, SenmlRecord};
pub use store::{parse_links, ExecHandler, ObjectStore, Slot, StoreError};
pub use value::{ResourceValue, ValueKind};
