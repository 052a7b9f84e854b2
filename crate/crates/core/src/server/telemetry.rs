//! Telemetry series with an append-only newline-delimited JSON log per
//! series. Each file starts with a header line naming the endpoint and
//! path; every following line is one sample.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path as FsPath, PathBuf};

use serde::{Deserialize, Serialize};

use crate::lwm2m::ResourceValue;

pub const DEFAULT_COMPACT_AFTER: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Unix seconds.
    pub t: f64,
    pub value: ResourceValue,
}

#[derive(Serialize, Deserialize)]
struct Header {
    endpoint: String,
    path: String,
}

#[derive(Debug, Default)]
struct Series {
    samples: Vec<Sample>,
    since_compact: usize,
    file: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TelemetryStore {
    dir: Option<PathBuf>,
    series: BTreeMap<String, BTreeMap<String, Series>>,
    compact_after: usize,
}

fn file_name(endpoint: &str, path: &str) -> PathBuf {
    let ep: String = endpoint
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '~' })
        .collect();
    let p = path.trim_start_matches('/').replace('/', "_");
    // the hash keeps sanitised names apart
    let tag = crate::server::short_hash(endpoint.as_bytes());
    PathBuf::from(format!("{ep}.{tag}")).join(format!("{p}.ndjson"))
}

impl TelemetryStore {
    pub fn in_memory() -> TelemetryStore {
        TelemetryStore {
            dir: None,
            series: BTreeMap::new(),
            compact_after: DEFAULT_COMPACT_AFTER,
        }
    }

    /// Open (and replay) the log under `dir`.
    pub fn open(dir: &FsPath) -> io::Result<TelemetryStore> {
        fs::create_dir_all(dir)?;
        let mut store = TelemetryStore {
            dir: Some(dir.to_path_buf()),
            series: BTreeMap::new(),
            compact_after: DEFAULT_COMPACT_AFTER,
        };
        let mut files = Vec::new();
        for ep_dir in fs::read_dir(dir)? {
            let ep_dir = ep_dir?.path();
            if !ep_dir.is_dir() {
                continue;
            }
            for f in fs::read_dir(&ep_dir)? {
                let f = f?.path();
                if f.extension().is_some_and(|e| e == "ndjson") {
                    files.push(f);
                }
            }
        }
        files.sort();
        for f in files {
            store.replay(&f)?;
        }
        Ok(store)
    }

    fn replay(&mut self, file: &FsPath) -> io::Result<()> {
        let mut lines = BufReader::new(File::open(file)?).lines();
        let Some(Ok(first)) = lines.next() else { return Ok(()) };
        let Ok(header) = serde_json::from_str::<Header>(&first) else {
            tracing::warn!(file = %file.display(), "telemetry file without header skipped");
            return Ok(());
        };
        let mut samples = Vec::new();
        let mut damaged = false;
        for line in lines {
            match line.ok().and_then(|l| serde_json::from_str::<Sample>(&l).ok()) {
                Some(s) => samples.push(s),
                None => damaged = true,
            }
        }
        let series = self
            .series
            .entry(header.endpoint.clone())
            .or_default()
            .entry(header.path.clone())
            .or_default();
        series.samples = samples;
        series.file = Some(file.to_path_buf());
        if damaged {
            self.compact(&header.endpoint, &header.path)?;
        }
        Ok(())
    }

    pub fn set_compact_after(&mut self, n: usize) {
        self.compact_after = n.max(1);
    }

    /// Append a sample. Times never go backwards within a series; an older
    /// timestamp is clamped to the latest one. Returns the stored time.
    pub fn append(&mut self, endpoint: &str, path: &str, t: f64, value: ResourceValue) -> io::Result<f64> {
        let dir = self.dir.clone();
        let series = self
            .series
            .entry(endpoint.to_string())
            .or_default()
            .entry(path.to_string())
            .or_default();
        let t = series.samples.last().map_or(t, |last| t.max(last.t));
        let sample = Sample { t, value };
        if let Some(dir) = dir {
            let file = match &series.file {
                Some(f) => f.clone(),
                None => {
                    let f = dir.join(file_name(endpoint, path));
                    fs::create_dir_all(f.parent().unwrap())?;
                    let mut out = File::create(&f)?;
                    let header = Header {
                        endpoint: endpoint.to_string(),
                        path: path.to_string(),
                    };
                    writeln!(out, "{}", serde_json::to_string(&header)?)?;
                    series.file = Some(f.clone());
                    f
                }
            };
            let mut out = OpenOptions::new().append(true).open(&file)?;
            writeln!(out, "{}", serde_json::to_string(&sample)?)?;
            out.flush()?;
        }
        series.samples.push(sample);
        series.since_compact += 1;
        if series.since_compact >= self.compact_after {
            self.compact(endpoint, path)?;
        }
        Ok(t)
    }

    /// Rewrite a series file from memory, atomically.
    pub fn compact(&mut self, endpoint: &str, path: &str) -> io::Result<()> {
        let Some(series) = self.series.get_mut(endpoint).and_then(|m| m.get_mut(path)) else {
            return Ok(());
        };
        series.since_compact = 0;
        let Some(file) = series.file.clone() else { return Ok(()) };
        let tmp = file.with_extension("ndjson.tmp");
        {
            let mut out = io::BufWriter::new(File::create(&tmp)?);
            let header = Header {
                endpoint: endpoint.to_string(),
                path: path.to_string(),
            };
            writeln!(out, "{}", serde_json::to_string(&header)?)?;
            for s in &series.samples {
                writeln!(out, "{}", serde_json::to_string(s)?)?;
            }
            out.flush()?;
        }
        fs::rename(tmp, file)
    }

    /// Samples with `from <= t <= to`.
    pub fn range(&self, endpoint: &str, path: &str, from: Option<f64>, to: Option<f64>) -> Vec<Sample> {
        let Some(series) = self.series.get(endpoint).and_then(|m| m.get(path)) else {
            return Vec::new();
        };
        series
            .samples
            .iter()
            .filter(|s| from.is_none_or(|f| s.t >= f) && to.is_none_or(|t| s.t <= t))
            .cloned()
            .collect()
    }

    pub fn latest(&self, endpoint: &str, path: &str) -> Option<&Sample> {
        self.series.get(endpoint)?.get(path)?.samples.last()
    }

    pub fn has_endpoint(&self, endpoint: &str) -> bool {
        self.series.contains_key(endpoint)
    }

    pub fn endpoints(&self) -> Vec<String> {
        self.series.keys().cloned().collect()
    }

    pub fn paths(&self, endpoint: &str) -> Vec<String> {
        self.series
            .get(endpoint)
            .map(|m| m.keys().cloned().collect())
            .unwrap_or_default()
    }
}
