//! Compact little-endian model container.
//!
//! Layout: magic `FML1`, format version (u16), section count (u16), then one
//! 12-byte table entry per section (id, offset, length as u32) followed by
//! the section bodies. See `docs/model-blob.md` for the byte-level format.

use super::features::{FEATURES, DEFAULT_RATE_HZ, DEFAULT_WINDOW};
use super::forest::{ForestModel, Node, Tree};
use super::kmeans::KMeansModel;
use super::scaler::Scaler;
use super::MlError;

pub const MAGIC: &[u8; 4] = b"FML1";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 8;
pub const TABLE_ENTRY_LEN: usize = 12;
pub const NODE_LEN: usize = 8;
pub const LEAF_TAG: u8 = 0xFF;

pub const SECTION_FOREST: u32 = 1;
pub const SECTION_KMEANS: u32 = 2;
pub const SECTION_SCALER: u32 = 3;
pub const SECTION_CONFIG: u32 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub version: String,
    pub window: u16,
    pub rate_hz: u16,
    pub class_names: Vec<String>,
}

impl ModelConfig {
    pub fn new(name: &str, version: &str, class_names: &[&str]) -> ModelConfig {
        ModelConfig {
            name: name.to_string(),
            version: version.to_string(),
            window: DEFAULT_WINDOW as u16,
            rate_hz: DEFAULT_RATE_HZ,
            class_names: class_names.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Everything a device needs to run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub scaler: Scaler,
    pub forest: ForestModel,
    pub kmeans: KMeansModel,
}

impl ModelBundle {
    /// Bundle the parts, rounding the scaler to its stored precision.
    pub fn new(config: ModelConfig, scaler: &Scaler, forest: ForestModel, kmeans: KMeansModel) -> ModelBundle {
        ModelBundle {
            config,
            scaler: scaler.quantized(),
            forest,
            kmeans,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, MlError> {
        model_blob_encode(self)
    }

    pub fn decode(bytes: &[u8]) -> Result<ModelBundle, MlError> {
        model_blob_decode(bytes)
    }
}

/// Byte sizes of each section of an encoded blob.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct SectionSizes {
    pub forest: usize,
    pub kmeans: usize,
    pub scaler: usize,
    pub config: usize,
    pub total: usize,
}

fn put_f32(out: &mut Vec<u8>, x: f64) {
    out.extend_from_slice(&(x as f32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), MlError> {
    let len = u8::try_from(s.len()).map_err(|_| MlError::InvalidParameter("string longer than 255 bytes"))?;
    out.push(len);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_forest(forest: &ForestModel) -> Result<Vec<u8>, MlError> {
    let mut out = Vec::with_capacity(4 + forest.node_count() * NODE_LEN + forest.trees.len() * 2);
    out.extend_from_slice(&(forest.n_classes as u16).to_le_bytes());
    out.extend_from_slice(&(forest.trees.len() as u16).to_le_bytes());
    for t in &forest.trees {
        let n = u16::try_from(t.nodes.len()).map_err(|_| MlError::InvalidParameter("tree too large"))?;
        out.extend_from_slice(&n.to_le_bytes());
        for node in &t.nodes {
            match *node {
                Node::Split {
                    feature,
                    threshold,
                    right,
                } => {
                    out.push(feature);
                    out.push(0);
                    out.extend_from_slice(&right.to_le_bytes());
                    out.extend_from_slice(&threshold.to_le_bytes());
                }
                Node::Leaf { class } => {
                    out.push(LEAF_TAG);
                    out.push(class);
                    out.extend_from_slice(&[0; 6]);
                }
            }
        }
    }
    Ok(out)
}

pub fn encode_kmeans(km: &KMeansModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(km.centroids.len() * FEATURES * 4 + 4);
    for c in &km.centroids {
        for &x in c {
            put_f32(&mut out, x);
        }
    }
    put_f32(&mut out, km.threshold);
    out
}

pub fn encode_scaler(s: &Scaler) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEATURES * 8);
    for &m in &s.mean {
        put_f32(&mut out, m);
    }
    for &x in &s.scale {
        put_f32(&mut out, x);
    }
    out
}

pub fn encode_config(c: &ModelConfig) -> Result<Vec<u8>, MlError> {
    let mut out = Vec::new();
    out.extend_from_slice(&c.window.to_le_bytes());
    out.extend_from_slice(&c.rate_hz.to_le_bytes());
    put_str(&mut out, &c.name)?;
    put_str(&mut out, &c.version)?;
    let n = u8::try_from(c.class_names.len()).map_err(|_| MlError::TooManyClasses(c.class_names.len()))?;
    out.push(n);
    for name in &c.class_names {
        put_str(&mut out, name)?;
    }
    Ok(out)
}

pub fn model_blob_encode(bundle: &ModelBundle) -> Result<Vec<u8>, MlError> {
    let sections = [
        (SECTION_FOREST, encode_forest(&bundle.forest)?),
        (SECTION_KMEANS, encode_kmeans(&bundle.kmeans)),
        (SECTION_SCALER, encode_scaler(&bundle.scaler)),
        (SECTION_CONFIG, encode_config(&bundle.config)?),
    ];
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u16).to_le_bytes());
    let mut offset = HEADER_LEN + sections.len() * TABLE_ENTRY_LEN;
    for (id, body) in &sections {
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(&(offset as u32).to_le_bytes());
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        offset += body.len();
    }
    for (_, body) in &sections {
        out.extend_from_slice(body);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Reader<'a> {
        Reader { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MlError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(MlError::Truncated(self.what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, MlError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, MlError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, MlError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32, MlError> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String, MlError> {
        let n = self.u8()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| MlError::Corrupt("string is not UTF-8"))
    }

    fn done(&self) -> Result<(), MlError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(MlError::Corrupt("trailing bytes in section"))
        }
    }
}

pub fn decode_forest(bytes: &[u8]) -> Result<ForestModel, MlError> {
    let mut r = Reader::new(bytes, "forest section");
    let n_classes = r.u16()? as usize;
    let n_trees = r.u16()? as usize;
    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        let n = r.u16()? as usize;
        if n == 0 {
            return Err(MlError::Corrupt("empty tree"));
        }
        let mut nodes = Vec::with_capacity(n);
        for i in 0..n {
            let rec = r.take(NODE_LEN)?;
            let node = if rec[0] == LEAF_TAG {
                if rec[1] as usize >= n_classes {
                    return Err(MlError::Corrupt("leaf class out of range"));
                }
                Node::Leaf { class: rec[1] }
            } else {
                let right = u16::from_le_bytes([rec[2], rec[3]]);
                if rec[0] as usize >= FEATURES || (right as usize) <= i + 1 || right as usize >= n {
                    return Err(MlError::Corrupt("bad split node"));
                }
                Node::Split {
                    feature: rec[0],
                    threshold: f32::from_le_bytes([rec[4], rec[5], rec[6], rec[7]]),
                    right,
                }
            };
            nodes.push(node);
        }
        trees.push(Tree { nodes });
    }
    r.done()?;
    Ok(ForestModel { trees, n_classes })
}

pub fn decode_kmeans(bytes: &[u8]) -> Result<KMeansModel, MlError> {
    let row = FEATURES * 4;
    if bytes.len() < 4 || (bytes.len() - 4) % row != 0 {
        return Err(MlError::Truncated("kmeans section"));
    }
    let k = (bytes.len() - 4) / row;
    let mut r = Reader::new(bytes, "kmeans section");
    let mut centroids = Vec::with_capacity(k);
    for _ in 0..k {
        let mut c = [0.0; FEATURES];
        for x in c.iter_mut() {
            *x = r.f32()? as f64;
        }
        centroids.push(c);
    }
    let threshold = r.f32()? as f64;
    Ok(KMeansModel { centroids, threshold })
}

pub fn decode_scaler(bytes: &[u8]) -> Result<Scaler, MlError> {
    let mut r = Reader::new(bytes, "scaler section");
    let mut s = Scaler::identity();
    for m in s.mean.iter_mut() {
        *m = r.f32()? as f64;
    }
    for x in s.scale.iter_mut() {
        *x = r.f32()? as f64;
    }
    r.done()?;
    Ok(s)
}

pub fn decode_config(bytes: &[u8]) -> Result<ModelConfig, MlError> {
    let mut r = Reader::new(bytes, "config section");
    let window = r.u16()?;
    let rate_hz = r.u16()?;
    let name = r.string()?;
    let version = r.string()?;
    let n = r.u8()?;
    let class_names = (0..n).map(|_| r.string()).collect::<Result<_, _>>()?;
    r.done()?;
    Ok(ModelConfig {
        name,
        version,
        window,
        rate_hz,
        class_names,
    })
}

fn section_table(bytes: &[u8]) -> Result<Vec<(u32, &[u8])>, MlError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(MlError::BadMagic);
    }
    let mut r = Reader::new(bytes, "header");
    r.take(4)?;
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(MlError::UnsupportedVersion(version));
    }
    let count = r.u16()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.u32()?;
        let off = r.u32()? as usize;
        let len = r.u32()? as usize;
        let body = off
            .checked_add(len)
            .and_then(|end| bytes.get(off..end))
            .ok_or(MlError::Truncated("section body"))?;
        out.push((id, body));
    }
    Ok(out)
}

pub fn section_sizes(bytes: &[u8]) -> Result<SectionSizes, MlError> {
    let table = section_table(bytes)?;
    let len = |id| table.iter().find(|(i, _)| *i == id).map_or(0, |(_, b)| b.len());
    Ok(SectionSizes {
        forest: len(SECTION_FOREST),
        kmeans: len(SECTION_KMEANS),
        scaler: len(SECTION_SCALER),
        config: len(SECTION_CONFIG),
        total: bytes.len(),
    })
}

pub fn model_blob_decode(bytes: &[u8]) -> Result<ModelBundle, MlError> {
    let table = section_table(bytes)?;
    let find = |id: u32, what: &'static str| {
        table
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, b)| *b)
            .ok_or(MlError::MissingSection(what))
    };
    let forest = decode_forest(find(SECTION_FOREST, "forest")?)?;
    let kmeans = decode_kmeans(find(SECTION_KMEANS, "kmeans")?)?;
    let scaler = decode_scaler(find(SECTION_SCALER, "scaler")?)?;
    let config = decode_config(find(SECTION_CONFIG, "config")?)?;
    Ok(ModelBundle {
        config,
        scaler,
        forest,
        kmeans,
    })
}
