//! LwM2M device management and network connectivity for TinyML devices.
//!
//! The crate is organised bottom-up:
//!
//! - [`coap`]: CoAP codec, reliable exchanges, observe, block-wise transfer,
//!   and the UDP / simulated-link transports.
//! - [`lwm2m`]: object model, paths, SenML JSON/CBOR codecs, object store.
//! - [`ml`]: the on-device pipeline (features, scaler, random forest, k-means
//!   anomaly scoring, reservoir sampling) and the compact model blob.
//! - [`objects`]: the five TinyML objects and how pipeline outputs land in them.
//! - [`client`]: device-side protocol engine (bootstrap, registration, queue
//!   mode, observe, firmware update).
//! - [`server`]: management server with registry, telemetry, rollouts and the
//!   HTTP API.
//! - [`sim`]: simulated device (dual-slot flash, motion generator, device loop)
//!   and the four-phase scenario harness.

pub mod client;
pub mod coap;
pub mod lwm2m;
pub mod ml;
pub mod objects;
pub mod server;
pub mod sim;
pub mod time;
