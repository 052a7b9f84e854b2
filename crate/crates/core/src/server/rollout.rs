//! Firmware rollout jobs: transfer (push or pull), stage check, update,
//! and confirmation after the device comes back.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::time::{sleep, Instant};

use super::{DeviceError, Image, Server};
use crate::client::fota::{PACKAGE, PACKAGE_URI, RESULT, STATE, UPDATE};
use crate::client::{FotaResult, FotaState};
use crate::coap::{block1_upload, content_format, Code, CoapMessage};
use crate::lwm2m::defs::FIRMWARE;
use crate::lwm2m::{Path, ResourceValue};

#[derive(Clone, Debug)]
pub struct RolloutConfig {
    pub block_size: usize,
    /// Extra attempts after a transport failure.
    pub retries: u32,
    pub retry_delay: Duration,
    pub poll_interval: Duration,
    /// Longest wait for a pull download to finish.
    pub stage_timeout: Duration,
    /// Longest wait for the device to come back after the update.
    pub reboot_timeout: Duration,
}

impl Default for RolloutConfig {
    fn default() -> RolloutConfig {
        RolloutConfig {
            block_size: 512,
            retries: 3,
            retry_delay: Duration::from_secs(5),
            poll_interval: Duration::from_secs(1),
            stage_timeout: Duration::from_secs(3600),
            reboot_timeout: Duration::from_secs(600),
        }
    }
}

impl RolloutConfig {
    pub fn scaled(mut self, factor: f64) -> RolloutConfig {
        self.retry_delay = self.retry_delay.mul_f64(factor);
        self.stage_timeout = self.stage_timeout.mul_f64(factor);
        self.reboot_timeout = self.reboot_timeout.mul_f64(factor);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutMode {
    Push,
    Pull,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "result", rename_all = "lowercase")]
pub enum TargetStatus {
    Pending,
    Transferring,
    Staged,
    Updated,
    /// Carries the /5/0/5 result code.
    Failed(u8),
}

impl TargetStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, TargetStatus::Updated | TargetStatus::Failed(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RolloutTarget {
    pub endpoint: String,
    #[serde(flatten)]
    pub status: TargetStatus,
    /// Image bytes staged on the device.
    pub bytes: usize,
    pub attempts: u32,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RolloutJob {
    pub id: u64,
    pub image_id: u64,
    pub mode: RolloutMode,
    pub targets: Vec<RolloutTarget>,
    pub created_at: f64,
    pub finished_at: Option<f64>,
    /// Sum of staged bytes over targets that ended Updated.
    pub bytes_transferred: usize,
    pub duration_secs: Option<f64>,
    pub done: bool,
}

#[derive(Clone, Debug, Deserialize)]
pub struct RolloutRequest {
    pub image_id: u64,
    pub mode: RolloutMode,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RolloutError {
    #[error("unknown image {0}")]
    UnknownImage(u64),
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(String),
    #[error("no targets")]
    NoTargets,
    #[error("{0} already has a rollout in progress")]
    Conflict(String),
}

enum Failure {
    /// The device reported this /5/0/5 result.
    Result(u8),
    Transport(String),
}

impl From<DeviceError> for Failure {
    fn from(e: DeviceError) -> Failure {
        Failure::Transport(e.to_string())
    }
}

impl Server {
    pub fn start_rollout(&self, req: RolloutRequest) -> Result<RolloutJob, RolloutError> {
        let image = self.image(req.image_id).ok_or(RolloutError::UnknownImage(req.image_id))?;
        if req.targets.is_empty() {
            return Err(RolloutError::NoTargets);
        }
        for t in &req.targets {
            if self.device(t).is_none() {
                return Err(RolloutError::UnknownEndpoint(t.clone()));
            }
        }
        let job = {
            let mut jobs = self.inner.rollouts.lock().unwrap();
            for j in jobs.values().filter(|j| !j.done) {
                if let Some(t) = j
                    .targets
                    .iter()
                    .find(|t| !t.status.is_terminal() && req.targets.contains(&t.endpoint))
                {
                    return Err(RolloutError::Conflict(t.endpoint.clone()));
                }
            }
            let id = jobs.keys().next_back().copied().unwrap_or(0) + 1;
            let mut targets: Vec<RolloutTarget> = Vec::new();
            for ep in &req.targets {
                if targets.iter().any(|t| &t.endpoint == ep) {
                    continue;
                }
                targets.push(RolloutTarget {
                    endpoint: ep.clone(),
                    status: TargetStatus::Pending,
                    bytes: 0,
                    attempts: 0,
                    error: None,
                });
            }
            let job = RolloutJob {
                id,
                image_id: req.image_id,
                mode: req.mode,
                targets,
                created_at: self.now(),
                finished_at: None,
                bytes_transferred: 0,
                duration_secs: None,
                done: false,
            };
            jobs.insert(id, job.clone());
            job
        };
        for (idx, t) in job.targets.iter().enumerate() {
            let server = self.clone();
            let image = image.clone();
            let ep = t.endpoint.clone();
            let (id, mode) = (job.id, job.mode);
            self.spawn(async move { server.drive_target(id, idx, ep, image, mode).await });
        }
        tracing::info!(job = job.id, image = req.image_id, targets = job.targets.len(), "rollout started");
        Ok(job)
    }

    pub fn rollout(&self, id: u64) -> Option<RolloutJob> {
        self.inner.rollouts.lock().unwrap().get(&id).cloned()
    }

    pub fn rollouts(&self) -> Vec<RolloutJob> {
        self.inner.rollouts.lock().unwrap().values().cloned().collect()
    }

    /// Poll until the job is done.
    pub async fn wait_rollout(&self, id: u64) -> Option<RolloutJob> {
        loop {
            let job = self.rollout(id)?;
            if job.done {
                return Some(job);
            }
            sleep(Duration::from_millis(200)).await;
        }
    }

    fn update_target(&self, id: u64, idx: usize, f: impl FnOnce(&mut RolloutTarget)) {
        let now = self.now();
        let mut jobs = self.inner.rollouts.lock().unwrap();
        let Some(job) = jobs.get_mut(&id) else { return };
        f(&mut job.targets[idx]);
        if job.targets.iter().all(|t| t.status.is_terminal()) && !job.done {
            job.done = true;
            job.finished_at = Some(now);
            job.duration_secs = Some(now - job.created_at);
            job.bytes_transferred = job
                .targets
                .iter()
                .filter(|t| t.status == TargetStatus::Updated)
                .map(|t| t.bytes)
                .sum();
            tracing::info!(job = id, bytes = job.bytes_transferred, "rollout finished");
        }
    }

    async fn drive_target(self, id: u64, idx: usize, ep: String, image: Image, mode: RolloutMode) {
        let cfg = self.inner.config.rollout.clone();
        let mut attempt = 0;
        let staged = loop {
            attempt += 1;
            self.update_target(id, idx, |t| {
                t.status = TargetStatus::Transferring;
                t.attempts = attempt;
            });
            match self.transfer(&ep, &image, mode).await {
                Ok(()) => break Ok(()),
                Err(Failure::Result(r)) => break Err((r, None)),
                Err(Failure::Transport(msg)) if attempt <= cfg.retries => {
                    tracing::debug!(endpoint = %ep, attempt, error = %msg, "transfer failed, retrying");
                    self.update_target(id, idx, |t| t.error = Some(msg));
                    sleep(cfg.retry_delay).await;
                }
                Err(Failure::Transport(msg)) => break Err((FotaResult::ConnectionLost as u8, Some(msg))),
            }
        };
        if let Err((code, msg)) = staged {
            return self.update_target(id, idx, |t| {
                t.status = TargetStatus::Failed(code);
                if msg.is_some() {
                    t.error = msg;
                }
            });
        }
        let size = image.bytes.len();
        self.update_target(id, idx, |t| {
            t.status = TargetStatus::Staged;
            t.bytes = size;
            t.error = None;
        });
        let status = self.install(&ep).await;
        self.update_target(id, idx, |t| match status {
            Ok(()) => t.status = TargetStatus::Updated,
            Err(Failure::Result(r)) => t.status = TargetStatus::Failed(r),
            Err(Failure::Transport(msg)) => {
                t.status = TargetStatus::Failed(FotaResult::UpdateFailed as u8);
                t.error = Some(msg);
            }
        });
    }

    async fn fota_status(&self, ep: &str) -> Result<(i64, i64), DeviceError> {
        let records = self.read(ep, &Path::instance(FIRMWARE, 0)).await?;
        let get = |p| {
            records
                .iter()
                .find(|r| r.path == p)
                .and_then(|r| r.value.as_i64())
                .ok_or_else(|| DeviceError::BadPayload(format!("missing {p}")))
        };
        Ok((get(STATE)?, get(RESULT)?))
    }

    async fn transfer(&self, ep: &str, image: &Image, mode: RolloutMode) -> Result<(), Failure> {
        let cfg = &self.inner.config.rollout;
        let (state, _) = self.fota_status(ep).await?;
        if state == FotaState::Updating as i64 {
            return Err(Failure::Transport("device is already updating".into()));
        }
        if state != FotaState::Idle as i64 {
            self.write_value(ep, &PACKAGE_URI, ResourceValue::String(String::new()))
                .await?;
        }
        match mode {
            RolloutMode::Push => {
                let peer = self.reachable(ep).await?;
                let mut template = CoapMessage::request(Code::PUT, &PACKAGE.to_string());
                template.set_content_format(content_format::OCTET_STREAM);
                let res = block1_upload(&self.inner.endpoint, peer, &template, &image.bytes, cfg.block_size).await;
                match res {
                    Ok(_) => {}
                    Err(crate::coap::CoapError::Response(c)) if c == Code::REQUEST_ENTITY_TOO_LARGE => {
                        return Err(Failure::Result(FotaResult::NotEnoughFlash as u8))
                    }
                    // the final acknowledgement may be all that was lost
                    Err(e) if !matches!(self.fota_status(ep).await, Ok((s, _)) if s == FotaState::Downloaded as i64) => {
                        return Err(Failure::Transport(e.to_string()))
                    }
                    Err(_) => {}
                }
            }
            RolloutMode::Pull => {
                let uri = self.image_uri(image.info.id);
                self.write_value(ep, &PACKAGE_URI, ResourceValue::String(uri)).await?;
            }
        }
        let deadline = Instant::now() + cfg.stage_timeout;
        loop {
            let (state, result) = match self.fota_status(ep).await {
                Ok(s) => s,
                Err(DeviceError::Unreachable | DeviceError::Timeout) if Instant::now() < deadline => {
                    sleep(cfg.poll_interval).await;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            match FotaState::from_code(state) {
                Some(FotaState::Downloaded) => return Ok(()),
                Some(FotaState::Idle) if result != 0 => return Err(Failure::Result(result as u8)),
                Some(FotaState::Idle) => return Err(Failure::Transport("download was reset".into())),
                _ => {}
            }
            if Instant::now() >= deadline {
                return Err(Failure::Transport("download did not finish in time".into()));
            }
            sleep(cfg.poll_interval).await;
        }
    }

    /// Execute Update, wait for the device to register again, then read the
    /// outcome it reports.
    async fn install(&self, ep: &str) -> Result<(), Failure> {
        let cfg = self.inner.config.rollout.clone();
        let before = self.device(ep).map(|r| r.location);
        match self.execute(ep, &UPDATE, "").await {
            Ok(()) => {}
            // the reply may have been lost across the reboot
            Err(DeviceError::Unreachable | DeviceError::Timeout) => {}
            Err(DeviceError::Device(c)) if c == Code::METHOD_NOT_ALLOWED => {}
            Err(e) => return Err(e.into()),
        }
        let deadline = Instant::now() + cfg.reboot_timeout;
        loop {
            let now_loc = self.device(ep).map(|r| r.location);
            if now_loc.is_some() && now_loc != before {
                break;
            }
            if Instant::now() >= deadline {
                return Err(Failure::Transport("device did not come back".into()));
            }
            sleep(cfg.poll_interval).await;
        }
        loop {
            let (state, result) = match self.fota_status(ep).await {
                Ok(s) => s,
                Err(e) if Instant::now() < deadline => {
                    tracing::debug!(endpoint = %ep, error = %e, "status read after update failed");
                    sleep(cfg.poll_interval).await;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            if state == FotaState::Updating as i64 && Instant::now() < deadline {
                sleep(cfg.poll_interval).await;
                continue;
            }
            return if result == FotaResult::Success as i64 {
                Ok(())
            } else if result == 0 {
                Err(Failure::Result(FotaResult::UpdateFailed as u8))
            } else {
                Err(Failure::Result(result as u8))
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_json_shape() {
        let t = RolloutTarget {
            endpoint: "a".into(),
            status: TargetStatus::Failed(5),
            bytes: 0,
            attempts: 1,
            error: None,
        };
        let v = serde_json::to_value(&t).unwrap();
        assert_eq!(v["status"], "failed");
        assert_eq!(v["result"], 5);
        let t = RolloutTarget {
            status: TargetStatus::Updated,
            ..t
        };
        let v = serde_json::to_value(&t).unwrap();
        assert_eq!(v["status"], "updated");
        assert!(v.get("result").is_none());
    }
}
