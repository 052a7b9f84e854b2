//! Firmware-update object (/5) state machine and the platform hooks it
//! drives.

use sha2::{Digest, Sha256};

use crate::coap::{Block1Assembler, Block1Outcome, BlockOpt, CoapUri, UriError};
use crate::lwm2m::defs::{firmware, FIRMWARE};
use crate::lwm2m::{ObjectStore, Path, ResourceValue, StoreError};

/// Largest package the client accepts.
pub const MAX_PACKAGE: usize = 480 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum FotaState {
    Idle = 0,
    Downloading = 1,
    Downloaded = 2,
    Updating = 3,
}

impl FotaState {
    pub fn from_code(code: i64) -> Option<FotaState> {
        Some(match code {
            0 => FotaState::Idle,
            1 => FotaState::Downloading,
            2 => FotaState::Downloaded,
            3 => FotaState::Updating,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum FotaResult {
    Initial = 0,
    Success = 1,
    NotEnoughFlash = 2,
    OutOfRam = 3,
    ConnectionLost = 4,
    IntegrityFailure = 5,
    UnsupportedType = 6,
    InvalidUri = 7,
    UpdateFailed = 8,
    UnsupportedProtocol = 9,
}

impl FotaResult {
    pub fn from_code(code: i64) -> Option<FotaResult> {
        use FotaResult::*;
        Some(match code {
            0 => Initial,
            1 => Success,
            2 => NotEnoughFlash,
            3 => OutOfRam,
            4 => ConnectionLost,
            5 => IntegrityFailure,
            6 => UnsupportedType,
            7 => InvalidUri,
            8 => UpdateFailed,
            9 => UnsupportedProtocol,
            _ => return None,
        })
    }
}

/// What the device underneath the client provides: a staging area for
/// firmware, a bootloader to hand it to, and a little persistent storage.
pub trait Platform: Send + 'static {
    /// Version string of the running firmware.
    fn firmware_version(&self) -> String;
    /// Verify `package` and write it to the staging slot.
    fn stage(&mut self, package: &[u8]) -> Result<(), FotaResult>;
    fn discard_staged(&mut self);
    /// Ask the bootloader to swap in the staged image on the next boot.
    fn schedule_update(&mut self) -> Result<(), FotaResult>;
    /// Mark the running image as good.
    fn confirm(&mut self);
    /// FOTA state and result as left by the previous run and the bootloader.
    fn fota_status(&self) -> (FotaState, FotaResult);
    fn save_fota_status(&mut self, state: FotaState, result: FotaResult);
    fn stored_server_uri(&self) -> Option<String>;
    fn store_server_uri(&mut self, uri: &str);
}

/// Platform without a bootloader, for tests and bare clients. Staged
/// packages are kept in memory; `verify` decides whether they pass.
pub struct MemoryPlatform {
    pub version: String,
    pub staged: Option<Vec<u8>>,
    pub update_scheduled: bool,
    pub confirmed: bool,
    pub status: (FotaState, FotaResult),
    pub server_uri: Option<String>,
    pub verify: fn(&[u8]) -> bool,
}

impl MemoryPlatform {
    pub fn new(version: &str) -> MemoryPlatform {
        MemoryPlatform {
            version: version.to_string(),
            staged: None,
            update_scheduled: false,
            confirmed: true,
            status: (FotaState::Idle, FotaResult::Initial),
            server_uri: None,
            verify: |_| true,
        }
    }
}

impl Platform for MemoryPlatform {
    fn firmware_version(&self) -> String {
        self.version.clone()
    }

    fn stage(&mut self, package: &[u8]) -> Result<(), FotaResult> {
        if !(self.verify)(package) {
            return Err(FotaResult::IntegrityFailure);
        }
        self.staged = Some(package.to_vec());
        Ok(())
    }

    fn discard_staged(&mut self) {
        self.staged = None;
        self.update_scheduled = false;
    }

    fn schedule_update(&mut self) -> Result<(), FotaResult> {
        if self.staged.is_none() {
            return Err(FotaResult::UpdateFailed);
        }
        self.update_scheduled = true;
        Ok(())
    }

    fn confirm(&mut self) {
        self.confirmed = true;
    }

    fn fota_status(&self) -> (FotaState, FotaResult) {
        self.status
    }

    fn save_fota_status(&mut self, state: FotaState, result: FotaResult) {
        self.status = (state, result);
    }

    fn stored_server_uri(&self) -> Option<String> {
        self.server_uri.clone()
    }

    fn store_server_uri(&mut self, uri: &str) {
        self.server_uri = Some(uri.to_string());
    }
}

pub const STATE: Path = Path::resource(FIRMWARE, 0, firmware::STATE);
pub const RESULT: Path = Path::resource(FIRMWARE, 0, firmware::RESULT);
pub const PACKAGE: Path = Path::resource(FIRMWARE, 0, firmware::PACKAGE);
pub const PACKAGE_URI: Path = Path::resource(FIRMWARE, 0, firmware::PACKAGE_URI);
pub const UPDATE: Path = Path::resource(FIRMWARE, 0, firmware::UPDATE);

/// Reply owed to a Block1 write of the package.
#[derive(Debug, PartialEq, Eq)]
pub enum PushReply {
    Continue(BlockOpt),
    Changed,
    Incomplete,
    TooLarge,
    NotAllowed,
}

/// Outcome of a Package URI write.
#[derive(Debug, PartialEq, Eq)]
pub enum PullStart {
    Fetch(CoapUri),
    Reset,
    Rejected,
    NotAllowed,
}

/// The /5 object as seen by the client loop.
#[derive(Debug)]
pub struct Fota {
    pub state: FotaState,
    pub result: FotaResult,
    pub staged_bytes: usize,
    pub staged_digest: Option<[u8; 32]>,
    assembler: Block1Assembler,
}

impl Fota {
    pub fn new(state: FotaState, result: FotaResult) -> Fota {
        Fota {
            state,
            result,
            staged_bytes: 0,
            staged_digest: None,
            assembler: Block1Assembler::new(MAX_PACKAGE),
        }
    }

    pub fn publish(&self, store: &mut ObjectStore) -> Result<(), StoreError> {
        store.set(STATE, ResourceValue::Integer(self.state as i64))?;
        store.set(RESULT, ResourceValue::Integer(self.result as i64))?;
        Ok(())
    }

    fn enter(&mut self, state: FotaState, result: FotaResult, store: &mut ObjectStore, platform: &mut dyn Platform) {
        self.state = state;
        self.result = result;
        platform.save_fota_status(state, result);
        let _ = self.publish(store);
    }

    pub fn fail(&mut self, result: FotaResult, store: &mut ObjectStore, platform: &mut dyn Platform) {
        self.assembler.reset();
        self.staged_bytes = 0;
        self.staged_digest = None;
        platform.discard_staged();
        self.enter(FotaState::Idle, result, store, platform);
    }

    fn reset(&mut self, store: &mut ObjectStore, platform: &mut dyn Platform) {
        self.fail(FotaResult::Initial, store, platform);
    }

    fn begin_download(&mut self, store: &mut ObjectStore, platform: &mut dyn Platform) {
        self.staged_bytes = 0;
        self.staged_digest = None;
        platform.discard_staged();
        self.enter(FotaState::Downloading, FotaResult::Initial, store, platform);
    }

    /// Hand a complete package to the platform.
    pub fn complete(&mut self, package: &[u8], store: &mut ObjectStore, platform: &mut dyn Platform) {
        self.assembler.reset();
        if self.state != FotaState::Downloading {
            return;
        }
        if package.is_empty() {
            return self.reset(store, platform);
        }
        match platform.stage(package) {
            Ok(()) => {
                self.staged_bytes = package.len();
                self.staged_digest = Some(Sha256::digest(package).into());
                self.enter(FotaState::Downloaded, FotaResult::Initial, store, platform);
            }
            Err(result) => self.fail(result, store, platform),
        }
    }

    /// One write to /5/0/0. `block` is None for a write without Block1.
    pub fn push(
        &mut self,
        block: Option<BlockOpt>,
        payload: &[u8],
        store: &mut ObjectStore,
        platform: &mut dyn Platform,
    ) -> PushReply {
        if self.state == FotaState::Updating {
            return PushReply::NotAllowed;
        }
        let Some(opt) = block else {
            if payload.is_empty() {
                self.reset(store, platform);
                return PushReply::Changed;
            }
            if payload.len() > MAX_PACKAGE {
                self.fail(FotaResult::NotEnoughFlash, store, platform);
                return PushReply::TooLarge;
            }
            self.begin_download(store, platform);
            self.complete(payload, store, platform);
            return PushReply::Changed;
        };
        if opt.num == 0 {
            self.begin_download(store, platform);
        } else if self.state != FotaState::Downloading {
            return PushReply::Incomplete;
        }
        match self.assembler.accept(opt, payload) {
            Block1Outcome::Continue(o) => PushReply::Continue(o),
            Block1Outcome::Complete(body) => {
                self.complete(&body, store, platform);
                PushReply::Changed
            }
            Block1Outcome::Incomplete => PushReply::Incomplete,
            Block1Outcome::TooLarge => {
                self.fail(FotaResult::NotEnoughFlash, store, platform);
                PushReply::TooLarge
            }
        }
    }

    /// A write to /5/0/1.
    pub fn pull(&mut self, uri: &str, store: &mut ObjectStore, platform: &mut dyn Platform) -> PullStart {
        if uri.is_empty() {
            if self.state == FotaState::Updating {
                return PullStart::NotAllowed;
            }
            self.reset(store, platform);
            return PullStart::Reset;
        }
        if self.state != FotaState::Idle {
            return PullStart::NotAllowed;
        }
        let _ = store.set(PACKAGE_URI, ResourceValue::String(uri.to_string()));
        match CoapUri::parse(uri) {
            Ok(u) => {
                self.begin_download(store, platform);
                PullStart::Fetch(u)
            }
            Err(UriError::UnsupportedScheme(_)) => {
                self.fail(FotaResult::UnsupportedProtocol, store, platform);
                PullStart::Rejected
            }
            Err(_) => {
                self.fail(FotaResult::InvalidUri, store, platform);
                PullStart::Rejected
            }
        }
    }

    /// Execute on /5/0/2. Returns false when there is nothing to install.
    pub fn update(&mut self, store: &mut ObjectStore, platform: &mut dyn Platform) -> bool {
        if self.state != FotaState::Downloaded {
            return false;
        }
        match platform.schedule_update() {
            Ok(()) => {
                self.enter(FotaState::Updating, FotaResult::Initial, store, platform);
                true
            }
            Err(result) => {
                self.fail(result, store, platform);
                false
            }
        }
    }

    /// Called once the first registration after boot succeeds.
    pub fn boot_confirmed(&mut self, store: &mut ObjectStore, platform: &mut dyn Platform) {
        if self.state == FotaState::Updating {
            platform.confirm();
            self.enter(FotaState::Idle, FotaResult::Success, store, platform);
        }
    }

    /// State left over from before a reboot that cannot continue now.
    pub fn recover(&mut self, store: &mut ObjectStore, platform: &mut dyn Platform) {
        match self.state {
            FotaState::Downloading | FotaState::Downloaded => self.fail(FotaResult::ConnectionLost, store, platform),
            _ => {
                let _ = self.publish(store);
            }
        }
    }
}
