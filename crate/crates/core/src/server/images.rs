use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub name: String,
    pub version: String,
    pub size: usize,
    pub sha256: String,
    pub uploaded_at: f64,
}

#[derive(Clone, Debug)]
pub struct Image {
    pub info: ImageInfo,
    pub bytes: Arc<Vec<u8>>,
}

/// Firmware images known to the server, optionally persisted as
/// `<id>.bin` plus `<id>.json`.
#[derive(Debug, Default)]
pub struct ImageStore {
    dir: Option<PathBuf>,
    next: u64,
    images: BTreeMap<u64, Image>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl ImageStore {
    pub fn in_memory() -> ImageStore {
        ImageStore::default()
    }

    pub fn open(dir: &FsPath) -> io::Result<ImageStore> {
        fs::create_dir_all(dir)?;
        let mut store = ImageStore {
            dir: Some(dir.to_path_buf()),
            ..ImageStore::default()
        };
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            if p.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let Ok(info) = serde_json::from_slice::<ImageInfo>(&fs::read(&p)?) else { continue };
            let Ok(bytes) = fs::read(p.with_extension("bin")) else { continue };
            if hex(&Sha256::digest(&bytes)) != info.sha256 {
                tracing::warn!(id = info.id, "stored image digest mismatch, skipped");
                continue;
            }
            store.next = store.next.max(info.id);
            store.images.insert(
                info.id,
                Image {
                    info,
                    bytes: Arc::new(bytes),
                },
            );
        }
        Ok(store)
    }

    pub fn add(&mut self, name: &str, version: &str, bytes: Vec<u8>, now: f64) -> io::Result<ImageInfo> {
        self.next += 1;
        let info = ImageInfo {
            id: self.next,
            name: name.to_string(),
            version: version.to_string(),
            size: bytes.len(),
            sha256: hex(&Sha256::digest(&bytes)),
            uploaded_at: now,
        };
        if let Some(dir) = &self.dir {
            fs::write(dir.join(format!("{}.bin", info.id)), &bytes)?;
            fs::write(dir.join(format!("{}.json", info.id)), serde_json::to_vec_pretty(&info)?)?;
        }
        self.images.insert(
            info.id,
            Image {
                info: info.clone(),
                bytes: Arc::new(bytes),
            },
        );
        Ok(info)
    }

    pub fn get(&self, id: u64) -> Option<&Image> {
        self.images.get(&id)
    }

    pub fn list(&self) -> Vec<ImageInfo> {
        self.images.values().map(|i| i.info.clone()).collect()
    }
}
