//! Simulated device fleet: firmware images, dual-slot flash, motion data,
//! the device loop and the case-study scenarios.

pub mod device;
pub mod firmware;
pub mod flash;
pub mod motion;
pub mod plot;
pub mod scenario;

use std::net::SocketAddr;

use tokio::sync::mpsc;

use crate::coap::{CoapEndpoint, CoapError, IncomingRequest, SimNetwork, TransmissionParams};
use crate::ml::{train_bundle, Dataset, MlError, ModelBundle};

pub use device::{DeviceSpec, SimDevice, Tick};
pub use firmware::{FirmwareImage, FW1_SIZE, FW2_SIZE};
pub use flash::{BootError, BootReport, Flash, FlashPlatform, SLOT_SIZE};
pub use motion::{MotionGenerator, Pattern};
pub use scenario::{run_phases, run_soak, ScenarioConfig, ScenarioReport};

/// Where endpoints live: the in-process lossy link or real UDP sockets.
#[derive(Clone)]
pub enum Link {
    Sim(SimNetwork),
    Udp,
}

impl Link {
    pub async fn endpoint(
        &self,
        addr: SocketAddr,
        params: TransmissionParams,
        seed: u64,
    ) -> Result<(CoapEndpoint, mpsc::UnboundedReceiver<IncomingRequest>), CoapError> {
        match self {
            Link::Sim(net) => Ok(CoapEndpoint::sim(net, addr, params, seed)),
            Link::Udp => CoapEndpoint::udp(addr, params, seed).await,
        }
    }
}

/// `per_class` labelled windows of every pattern, in pattern order.
pub fn generate_dataset(patterns: &[Pattern], per_class: usize, noise_sigma: f64, seed: u64) -> Dataset {
    let mut ds = Dataset::default();
    for (i, p) in patterns.iter().enumerate() {
        let mut g = MotionGenerator::new(*p, noise_sigma, seed.wrapping_add(1000 * i as u64));
        for _ in 0..per_class {
            ds.push(p.label(), g.generate_window());
        }
    }
    ds
}

pub fn train_model(
    patterns: &[Pattern],
    per_class: usize,
    name: &str,
    version: &str,
    seed: u64,
) -> Result<ModelBundle, MlError> {
    let ds = generate_dataset(patterns, per_class, motion::DEFAULT_NOISE, seed);
    train_bundle(&ds, name, version, seed)
}

/// Firmware image carrying `bundle`, padded to `size`.
pub fn build_firmware(bundle: &ModelBundle, version: &str, size: usize) -> Result<Vec<u8>, String> {
    let blob = bundle.encode().map_err(|e| e.to_string())?;
    FirmwareImage::new(version, blob).build(size).map_err(|e| e.to_string())
}

/// Factory firmware: the three-class MODEL1 image every device ships with.
pub fn factory_firmware(per_class: usize, seed: u64) -> Result<Vec<u8>, String> {
    let model = train_model(
        &[Pattern::Idle, Pattern::Circle, Pattern::ShakeX],
        per_class,
        "MODEL1",
        "1.0.0",
        seed,
    )
    .map_err(|e| e.to_string())?;
    build_firmware(&model, "1.0.0", FW1_SIZE)
}
