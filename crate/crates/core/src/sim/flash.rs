//! Dual-slot flash and an MCUboot-style bootloader.
//!
//! Slot 0 holds the running image, slot 1 the staged one. A swap exchanges
//! the slots sector by sector through a scratch sector, recording progress
//! after every write, so a swap cut short by a power loss resumes on the
//! next boot. A swapped-in image runs in test mode until confirmed; booting
//! it again unconfirmed swaps the old image back.

use std::sync::{Arc, Mutex};

use thiserror::Error;

use super::firmware::{FirmwareError, FirmwareImage};
use crate::client::{FotaResult, FotaState, Platform};

pub const SLOT_SIZE: usize = 480 * 1024;
pub const SECTOR_SIZE: usize = 4096;
pub const SECTORS: usize = SLOT_SIZE / SECTOR_SIZE;
/// Writes per sector: slot 0 to scratch, slot 1 to slot 0, scratch to slot 1.
pub const SWAP_STEPS: usize = SECTORS * 3;

const ERASED: u8 = 0xff;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BootError {
    #[error("power lost during swap")]
    PowerCut,
    #[error("no bootable image: {0}")]
    NoImage(FirmwareError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct SwapProgress {
    step: usize,
    revert: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BootReport {
    pub image: Option<FirmwareImage>,
    /// A staged image was swapped in and runs unconfirmed.
    pub swapped: bool,
    /// An unconfirmed image was swapped back out.
    pub reverted: bool,
    /// The staged image failed verification and was not swapped in.
    pub refused: bool,
}

#[derive(Clone, Debug)]
pub struct Flash {
    slots: [Vec<u8>; 2],
    scratch: Vec<u8>,
    pending_swap: bool,
    confirmed: bool,
    swap: Option<SwapProgress>,
    cut_after: Option<usize>,
    writes: u64,
    boots: u32,
    fota: (FotaState, FotaResult),
    server_uri: Option<String>,
}

impl Flash {
    /// Flash with `image` in slot 0, confirmed.
    pub fn new(image: &[u8]) -> Flash {
        let mut slot0 = image.to_vec();
        slot0.resize(SLOT_SIZE, ERASED);
        Flash {
            slots: [slot0, vec![ERASED; SLOT_SIZE]],
            scratch: vec![ERASED; SECTOR_SIZE],
            pending_swap: false,
            confirmed: true,
            swap: None,
            cut_after: None,
            writes: 0,
            boots: 0,
            fota: (FotaState::Idle, FotaResult::Initial),
            server_uri: None,
        }
    }

    pub fn shared(self) -> Arc<Mutex<Flash>> {
        Arc::new(Mutex::new(self))
    }

    pub fn slot(&self, n: usize) -> &[u8] {
        &self.slots[n]
    }

    pub fn pending_swap(&self) -> bool {
        self.pending_swap
    }

    pub fn confirmed(&self) -> bool {
        self.confirmed
    }

    pub fn swap_in_progress(&self) -> bool {
        self.swap.is_some()
    }

    pub fn boots(&self) -> u32 {
        self.boots
    }

    /// Sector writes performed so far.
    pub fn writes(&self) -> u64 {
        self.writes
    }

    pub fn active_image(&self) -> Result<FirmwareImage, FirmwareError> {
        FirmwareImage::parse(&self.slots[0]).map(|(img, _)| img)
    }

    pub fn staged_image(&self) -> Result<FirmwareImage, FirmwareError> {
        FirmwareImage::parse(&self.slots[1]).map(|(img, _)| img)
    }

    /// Lose power after `writes` more sector writes.
    pub fn inject_power_cut(&mut self, writes: usize) {
        self.cut_after = Some(writes);
    }

    /// Write a package to slot 1. It must be a valid image that fits.
    pub fn write_staging(&mut self, package: &[u8]) -> Result<(), FotaResult> {
        if package.len() > SLOT_SIZE {
            return Err(FotaResult::NotEnoughFlash);
        }
        if self.swap.is_some() || !self.confirmed {
            return Err(FotaResult::UpdateFailed);
        }
        self.pending_swap = false;
        let slot = &mut self.slots[1];
        slot[..package.len()].copy_from_slice(package);
        slot[package.len()..].fill(ERASED);
        match FirmwareImage::parse(slot) {
            Ok(_) => Ok(()),
            Err(_) => Err(FotaResult::IntegrityFailure),
        }
    }

    /// Overwrite part of slot 1 without any check.
    pub fn corrupt_staging(&mut self, offset: usize, bytes: &[u8]) {
        self.slots[1][offset..offset + bytes.len()].copy_from_slice(bytes);
    }

    pub fn erase_staging(&mut self) {
        if self.swap.is_none() && self.confirmed {
            self.pending_swap = false;
            self.slots[1].fill(ERASED);
        }
    }

    pub fn request_swap(&mut self) -> Result<(), FotaResult> {
        if FirmwareImage::parse(&self.slots[1]).is_err() {
            return Err(FotaResult::IntegrityFailure);
        }
        self.pending_swap = true;
        Ok(())
    }

    pub fn confirm(&mut self) {
        self.confirmed = true;
    }

    fn write_step(&mut self, step: usize) -> Result<(), BootError> {
        let sector = step / 3;
        let r = sector * SECTOR_SIZE..(sector + 1) * SECTOR_SIZE;
        match step % 3 {
            0 => self.scratch.copy_from_slice(&self.slots[0][r]),
            1 => {
                let (a, b) = self.slots.split_at_mut(1);
                a[0][r.clone()].copy_from_slice(&b[0][r]);
            }
            _ => self.slots[1][r].copy_from_slice(&self.scratch),
        }
        self.writes += 1;
        // the data is written but the progress record is not
        match self.cut_after {
            Some(0) => {
                self.cut_after = None;
                Err(BootError::PowerCut)
            }
            Some(n) => {
                self.cut_after = Some(n - 1);
                Ok(())
            }
            None => Ok(()),
        }
    }

    fn run_swap(&mut self) -> Result<(), BootError> {
        while let Some(p) = self.swap {
            if p.step == SWAP_STEPS {
                self.swap = None;
                if p.revert {
                    self.confirmed = true;
                    self.fota = (FotaState::Idle, FotaResult::UpdateFailed);
                } else {
                    self.confirmed = false;
                }
                break;
            }
            self.write_step(p.step)?;
            self.swap = Some(SwapProgress { step: p.step + 1, ..p });
        }
        Ok(())
    }

    /// Run the bootloader.
    pub fn boot(&mut self) -> Result<BootReport, BootError> {
        self.boots += 1;
        let mut report = BootReport::default();
        if let Some(p) = self.swap {
            self.run_swap()?;
            report.swapped = !p.revert;
            report.reverted = p.revert;
        } else if self.pending_swap {
            self.pending_swap = false;
            if FirmwareImage::parse(&self.slots[1]).is_ok() {
                self.swap = Some(SwapProgress { step: 0, revert: false });
                self.run_swap()?;
                report.swapped = true;
            } else {
                self.fota = (FotaState::Idle, FotaResult::IntegrityFailure);
                report.refused = true;
            }
        } else if !self.confirmed {
            self.swap = Some(SwapProgress { step: 0, revert: true });
            self.run_swap()?;
            report.reverted = true;
        }
        let image = self.active_image().map_err(BootError::NoImage)?;
        report.image = Some(image);
        Ok(report)
    }
}

/// The client's view of a shared flash.
pub struct FlashPlatform {
    pub flash: Arc<Mutex<Flash>>,
}

impl FlashPlatform {
    pub fn new(flash: Arc<Mutex<Flash>>) -> FlashPlatform {
        FlashPlatform { flash }
    }
}

impl Platform for FlashPlatform {
    fn firmware_version(&self) -> String {
        self.flash
            .lock()
            .unwrap()
            .active_image()
            .map(|i| i.version)
            .unwrap_or_default()
    }

    fn stage(&mut self, package: &[u8]) -> Result<(), FotaResult> {
        self.flash.lock().unwrap().write_staging(package)
    }

    fn discard_staged(&mut self) {
        self.flash.lock().unwrap().erase_staging();
    }

    fn schedule_update(&mut self) -> Result<(), FotaResult> {
        self.flash.lock().unwrap().request_swap()
    }

    fn confirm(&mut self) {
        self.flash.lock().unwrap().confirm();
    }

    fn fota_status(&self) -> (FotaState, FotaResult) {
        self.flash.lock().unwrap().fota
    }

    fn save_fota_status(&mut self, state: FotaState, result: FotaResult) {
        self.flash.lock().unwrap().fota = (state, result);
    }

    fn stored_server_uri(&self) -> Option<String> {
        self.flash.lock().unwrap().server_uri.clone()
    }

    fn store_server_uri(&mut self, uri: &str) {
        self.flash.lock().unwrap().server_uri = Some(uri.to_string());
    }
}
