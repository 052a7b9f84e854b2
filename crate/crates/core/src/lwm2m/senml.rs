//! SenML packs in JSON and CBOR.
//!
//! Records share a base name (`bn`) equal to the longest common path prefix,
//! cut at the instance level, and carry the rest of the path in `n`. When
//! every record is timestamped the first time becomes the base time (`bt`)
//! and the others are relative to it.

use base64::engine::general_purpose::{URL_SAFE, URL_SAFE_NO_PAD};
use base64::Engine;
use ciborium::value::{Integer, Value as Cbor};
use serde::Serialize;
use serde_json::Value as Json;
use thiserror::Error;

use super::path::{parse_path, Path};
use super::value::ResourceValue;
use crate::coap::content_format;

/// Opaque values larger than this do not travel inside SenML.
pub const MAX_OPAQUE: usize = 64 * 1024;

const LABEL_BN: i64 = -2;
const LABEL_BT: i64 = -3;
const LABEL_N: i64 = 0;
const LABEL_V: i64 = 2;
const LABEL_VS: i64 = 3;
const LABEL_VB: i64 = 4;
const LABEL_T: i64 = 6;
const LABEL_VD: i64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SenmlFormat {
    Json,
    Cbor,
}

impl SenmlFormat {
    pub fn content_format(self) -> u16 {
        match self {
            SenmlFormat::Json => content_format::SENML_JSON,
            SenmlFormat::Cbor => content_format::SENML_CBOR,
        }
    }

    pub fn from_content_format(cf: u16) -> Option<SenmlFormat> {
        match cf {
            content_format::SENML_JSON => Some(SenmlFormat::Json),
            content_format::SENML_CBOR => Some(SenmlFormat::Cbor),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SenmlError {
    #[error("empty pack")]
    Empty,
    #[error("malformed: {0}")]
    Malformed(String),
    #[error("opaque value of {0} bytes exceeds the 64 KiB limit")]
    OpaqueTooLarge(usize),
    #[error("record without a value at {0}")]
    MissingValue(String),
}

fn malformed(msg: impl Into<String>) -> SenmlError {
    SenmlError::Malformed(msg.into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SenmlRecord {
    pub path: Path,
    pub value: ResourceValue,
    /// Unix seconds.
    pub time: Option<i64>,
}

impl SenmlRecord {
    pub fn new(path: Path, value: ResourceValue) -> SenmlRecord {
        SenmlRecord {
            path,
            value,
            time: None,
        }
    }

    pub fn at(mut self, time: i64) -> SenmlRecord {
        self.time = Some(time);
        self
    }
}

#[derive(Serialize, Default)]
struct JsonRecord<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    bn: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bt: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    v: Option<JsonNumber>,
    #[serde(skip_serializing_if = "Option::is_none")]
    vs: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    vb: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    vd: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    t: Option<i64>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum JsonNumber {
    Int(i64),
    Float(f64),
}

/// Shared naming/time layout for both encodings.
struct Layout {
    base_name: Option<String>,
    names: Vec<String>,
    base_time: Option<i64>,
}

fn layout(records: &[SenmlRecord]) -> Layout {
    let segs: Vec<Vec<u16>> = records.iter().map(|r| r.path.segments()).collect();
    let min_len = segs.iter().map(Vec::len).min().unwrap_or(0);
    let mut common = 0;
    'outer: while common < 2 && common + 1 < min_len {
        let seg = segs[0][common];
        for s in &segs[1..] {
            if s[common] != seg {
                break 'outer;
            }
        }
        common += 1;
    }
    let join = |s: &[u16]| s.iter().map(u16::to_string).collect::<Vec<_>>().join("/");
    let (base_name, names) = if common == 0 {
        (None, records.iter().map(|r| r.path.to_string()).collect())
    } else {
        (
            Some(format!("/{}/", join(&segs[0][..common]))),
            segs.iter().map(|s| join(&s[common..])).collect(),
        )
    };
    let base_time = if records.iter().all(|r| r.time.is_some()) {
        records[0].time
    } else {
        None
    };
    Layout {
        base_name,
        names,
        base_time,
    }
}

fn check(records: &[SenmlRecord]) -> Result<(), SenmlError> {
    if records.is_empty() {
        return Err(SenmlError::Empty);
    }
    for r in records {
        if let ResourceValue::Opaque(b) = &r.value {
            if b.len() > MAX_OPAQUE {
                return Err(SenmlError::OpaqueTooLarge(b.len()));
            }
        }
    }
    Ok(())
}

pub fn senml_encode(records: &[SenmlRecord], format: SenmlFormat) -> Result<Vec<u8>, SenmlError> {
    check(records)?;
    match format {
        SenmlFormat::Json => encode_json(records),
        SenmlFormat::Cbor => encode_cbor(records),
    }
}

pub fn senml_decode(bytes: &[u8], format: SenmlFormat) -> Result<Vec<SenmlRecord>, SenmlError> {
    match format {
        SenmlFormat::Json => decode_json(bytes),
        SenmlFormat::Cbor => decode_cbor(bytes),
    }
}

fn rel_time(layout: &Layout, rec: &SenmlRecord) -> Option<i64> {
    match (layout.base_time, rec.time) {
        (Some(bt), Some(t)) => Some(t - bt).filter(|d| *d != 0),
        (None, t) => t,
        (Some(_), None) => None,
    }
}

fn encode_json(records: &[SenmlRecord]) -> Result<Vec<u8>, SenmlError> {
    let lay = layout(records);
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let mut jr = JsonRecord {
            n: Some(lay.names[i].clone()),
            t: rel_time(&lay, rec),
            ..JsonRecord::default()
        };
        if i == 0 {
            jr.bn = lay.base_name.clone();
            jr.bt = lay.base_time;
        }
        match &rec.value {
            ResourceValue::Integer(v) | ResourceValue::Time(v) => jr.v = Some(JsonNumber::Int(*v)),
            ResourceValue::Float(v) => {
                if !v.is_finite() {
                    return Err(malformed("non-finite float cannot be encoded in JSON"));
                }
                jr.v = Some(JsonNumber::Float(*v))
            }
            ResourceValue::String(s) => jr.vs = Some(s),
            ResourceValue::Boolean(b) => jr.vb = Some(*b),
            ResourceValue::Opaque(b) => jr.vd = Some(URL_SAFE_NO_PAD.encode(b)),
        }
        out.push(jr);
    }
    serde_json::to_vec(&out).map_err(|e| malformed(e.to_string()))
}

fn encode_cbor(records: &[SenmlRecord]) -> Result<Vec<u8>, SenmlError> {
    let lay = layout(records);
    let int = |i: i64| Cbor::Integer(Integer::from(i));
    let mut arr = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let mut map: Vec<(Cbor, Cbor)> = Vec::with_capacity(4);
        if i == 0 {
            if let Some(bn) = &lay.base_name {
                map.push((int(LABEL_BN), Cbor::Text(bn.clone())));
            }
            if let Some(bt) = lay.base_time {
                map.push((int(LABEL_BT), int(bt)));
            }
        }
        map.push((int(LABEL_N), Cbor::Text(lay.names[i].clone())));
        let (label, value) = match &rec.value {
            ResourceValue::Integer(v) | ResourceValue::Time(v) => (LABEL_V, int(*v)),
            ResourceValue::Float(v) => (LABEL_V, Cbor::Float(*v)),
            ResourceValue::String(s) => (LABEL_VS, Cbor::Text(s.clone())),
            ResourceValue::Boolean(b) => (LABEL_VB, Cbor::Bool(*b)),
            ResourceValue::Opaque(b) => (LABEL_VD, Cbor::Bytes(b.clone())),
        };
        map.push((int(label), value));
        if let Some(t) = rel_time(&lay, rec) {
            map.push((int(LABEL_T), int(t)));
        }
        arr.push(Cbor::Map(map));
    }
    let mut out = Vec::new();
    ciborium::ser::into_writer(&Cbor::Array(arr), &mut out).map_err(|e| malformed(e.to_string()))?;
    Ok(out)
}

/// Fields of one record after label lookup, before base resolution.
#[derive(Default)]
struct RawRecord {
    bn: Option<String>,
    bt: Option<i64>,
    n: Option<String>,
    value: Option<ResourceValue>,
    t: Option<i64>,
}

fn resolve(raws: Vec<RawRecord>) -> Result<Vec<SenmlRecord>, SenmlError> {
    let mut base_name = String::new();
    let mut base_time: Option<i64> = None;
    let mut out = Vec::with_capacity(raws.len());
    for raw in raws {
        if let Some(bn) = raw.bn {
            base_name = bn;
        }
        if let Some(bt) = raw.bt {
            base_time = Some(bt);
        }
        let name = format!("{}{}", base_name, raw.n.unwrap_or_default());
        let path = parse_path(&name).map_err(|e| malformed(e.to_string()))?;
        let value = raw.value.ok_or(SenmlError::MissingValue(name))?;
        let time = match (base_time, raw.t) {
            (Some(bt), t) => Some(bt + t.unwrap_or(0)),
            (None, t) => t,
        };
        out.push(SenmlRecord { path, value, time });
    }
    Ok(out)
}

fn json_time(v: &Json) -> Result<i64, SenmlError> {
    if let Some(i) = v.as_i64() {
        return Ok(i);
    }
    v.as_f64()
        .filter(|f| f.is_finite())
        .map(|f| f.round() as i64)
        .ok_or_else(|| malformed("time is not a number"))
}

fn decode_json(bytes: &[u8]) -> Result<Vec<SenmlRecord>, SenmlError> {
    let doc: Json = serde_json::from_slice(bytes).map_err(|e| malformed(e.to_string()))?;
    let items = doc.as_array().ok_or_else(|| malformed("pack is not an array"))?;
    let mut raws = Vec::with_capacity(items.len());
    for item in items {
        let obj = item.as_object().ok_or_else(|| malformed("record is not an object"))?;
        let mut raw = RawRecord::default();
        for (key, val) in obj {
            match key.as_str() {
                "bn" => raw.bn = Some(val.as_str().ok_or_else(|| malformed("bn"))?.to_string()),
                "bt" => raw.bt = Some(json_time(val)?),
                "n" => raw.n = Some(val.as_str().ok_or_else(|| malformed("n"))?.to_string()),
                "t" => raw.t = Some(json_time(val)?),
                "v" => {
                    let num = val.as_number().ok_or_else(|| malformed("v"))?;
                    raw.value = Some(if let Some(i) = num.as_i64() {
                        ResourceValue::Integer(i)
                    } else if num.is_f64() {
                        ResourceValue::Float(num.as_f64().unwrap_or(f64::NAN))
                    } else {
                        return Err(malformed("integer out of range"));
                    });
                }
                "vs" => {
                    raw.value = Some(ResourceValue::String(
                        val.as_str().ok_or_else(|| malformed("vs"))?.to_string(),
                    ))
                }
                "vb" => raw.value = Some(ResourceValue::Boolean(val.as_bool().ok_or_else(|| malformed("vb"))?)),
                "vd" => {
                    let s = val.as_str().ok_or_else(|| malformed("vd"))?;
                    let data = URL_SAFE_NO_PAD
                        .decode(s)
                        .or_else(|_| URL_SAFE.decode(s))
                        .map_err(|e| malformed(format!("vd: {e}")))?;
                    raw.value = Some(ResourceValue::Opaque(data));
                }
                _ => {}
            }
        }
        raws.push(raw);
    }
    resolve(raws)
}

fn cbor_int(v: &Cbor) -> Option<i64> {
    match v {
        Cbor::Integer(i) => i64::try_from(*i).ok(),
        _ => None,
    }
}

fn cbor_time(v: &Cbor) -> Result<i64, SenmlError> {
    match v {
        Cbor::Integer(_) => cbor_int(v).ok_or_else(|| malformed("time out of range")),
        Cbor::Float(f) if f.is_finite() => Ok(f.round() as i64),
        _ => Err(malformed("time is not a number")),
    }
}

fn decode_cbor(bytes: &[u8]) -> Result<Vec<SenmlRecord>, SenmlError> {
    let doc: Cbor = ciborium::de::from_reader(bytes).map_err(|e| malformed(e.to_string()))?;
    let Cbor::Array(items) = doc else {
        return Err(malformed("pack is not an array"));
    };
    let mut raws = Vec::with_capacity(items.len());
    for item in items {
        let Cbor::Map(entries) = item else {
            return Err(malformed("record is not a map"));
        };
        let mut raw = RawRecord::default();
        for (key, val) in entries {
            let Some(label) = cbor_int(&key) else {
                continue;
            };
            match label {
                LABEL_BN => match val {
                    Cbor::Text(s) => raw.bn = Some(s),
                    _ => return Err(malformed("bn")),
                },
                LABEL_BT => raw.bt = Some(cbor_time(&val)?),
                LABEL_N => match val {
                    Cbor::Text(s) => raw.n = Some(s),
                    _ => return Err(malformed("n")),
                },
                LABEL_T => raw.t = Some(cbor_time(&val)?),
                LABEL_V => {
                    raw.value = Some(match val {
                        Cbor::Integer(i) => {
                            ResourceValue::Integer(i64::try_from(i).map_err(|_| malformed("integer out of range"))?)
                        }
                        Cbor::Float(f) => ResourceValue::Float(f),
                        _ => return Err(malformed("v")),
                    })
                }
                LABEL_VS => match val {
                    Cbor::Text(s) => raw.value = Some(ResourceValue::String(s)),
                    _ => return Err(malformed("vs")),
                },
                LABEL_VB => match val {
                    Cbor::Bool(b) => raw.value = Some(ResourceValue::Boolean(b)),
                    _ => return Err(malformed("vb")),
                },
                LABEL_VD => match val {
                    Cbor::Bytes(b) => raw.value = Some(ResourceValue::Opaque(b)),
                    _ => return Err(malformed("vd")),
                },
                _ => {}
            }
        }
        raws.push(raw);
    }
    resolve(raws)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn model_name_json_layout() {
        let recs = [SenmlRecord::new(
            Path::resource(33654, 0, 0),
            ResourceValue::String("MODEL1".into()),
        )];
        let json = senml_encode(&recs, SenmlFormat::Json).unwrap();
        assert_eq!(
            String::from_utf8(json).unwrap(),
            r#"[{"bn":"/33654/0/","n":"0","vs":"MODEL1"}]"#
        );
    }

    #[test]
    fn base_name_cut_at_instance() {
        let recs = [
            SenmlRecord::new(Path::resource(33651, 0, 0), ResourceValue::Integer(4)),
            SenmlRecord::new(Path::resource(33651, 0, 1), ResourceValue::Float(2.5)),
            SenmlRecord::new(Path::resource_instance(33652, 0, 0, 1), ResourceValue::Float(0.25)),
        ];
        let json = String::from_utf8(senml_encode(&recs, SenmlFormat::Json).unwrap()).unwrap();
        assert!(json.starts_with(r#"[{"n":"/33651/0/0","v":4}"#), "{json}");
        let same_object = &recs[..2];
        let json = String::from_utf8(senml_encode(same_object, SenmlFormat::Json).unwrap()).unwrap();
        assert_eq!(json, r#"[{"bn":"/33651/0/","n":"0","v":4},{"n":"1","v":2.5}]"#);
    }

    #[test]
    fn timestamps_relative_to_base_time() {
        let recs = [
            SenmlRecord::new(Path::resource(33651, 0, 1), ResourceValue::Float(1.0)).at(1000),
            SenmlRecord::new(Path::resource(33651, 0, 1), ResourceValue::Float(2.0)).at(1003),
        ];
        let json = String::from_utf8(senml_encode(&recs, SenmlFormat::Json).unwrap()).unwrap();
        assert_eq!(
            json,
            r#"[{"bn":"/33651/0/","bt":1000,"n":"1","v":1.0},{"n":"1","v":2.0,"t":3}]"#
        );
        for f in [SenmlFormat::Json, SenmlFormat::Cbor] {
            assert_eq!(senml_decode(&senml_encode(&recs, f).unwrap(), f).unwrap(), recs);
        }
    }

    #[test]
    fn unknown_json_fields_ignored() {
        let doc = br#"[{"bn":"/33651/0/","n":"1","v":3.5,"ux":"whatever"}]"#;
        let recs = senml_decode(doc, SenmlFormat::Json).unwrap();
        assert_eq!(
            recs,
            vec![SenmlRecord::new(Path::resource(33651, 0, 1), ResourceValue::Float(3.5))]
        );
    }

    #[test]
    fn malformed_inputs() {
        let recs = [SenmlRecord::new(Path::resource(1, 0, 1), ResourceValue::Integer(86400))];
        let cbor = senml_encode(&recs, SenmlFormat::Cbor).unwrap();
        let cut = &cbor[..cbor.len() - 2];
        assert!(matches!(senml_decode(cut, SenmlFormat::Cbor), Err(SenmlError::Malformed(_))));
        assert!(matches!(senml_decode(b"{", SenmlFormat::Json), Err(SenmlError::Malformed(_))));
        assert!(matches!(senml_decode(b"{}", SenmlFormat::Json), Err(SenmlError::Malformed(_))));
        assert!(matches!(
            senml_decode(br#"[{"n":"/1/0/1"}]"#, SenmlFormat::Json),
            Err(SenmlError::MissingValue(_))
        ));
        assert!(matches!(
            senml_decode(br#"[{"n":"/x/0/1","v":1}]"#, SenmlFormat::Json),
            Err(SenmlError::Malformed(_))
        ));
        assert_eq!(senml_encode(&[], SenmlFormat::Json), Err(SenmlError::Empty));
    }

    #[test]
    fn opaque_cap() {
        let big = [SenmlRecord::new(
            Path::resource(33653, 0, 1),
            ResourceValue::Opaque(vec![0; MAX_OPAQUE + 1]),
        )];
        assert_eq!(
            senml_encode(&big, SenmlFormat::Cbor),
            Err(SenmlError::OpaqueTooLarge(MAX_OPAQUE + 1))
        );
    }

    #[test]
    fn opaque_is_base64url_in_json() {
        let recs = [SenmlRecord::new(
            Path::resource(33653, 0, 1),
            ResourceValue::Opaque(vec![0xFB, 0xFF, 0x00]),
        )];
        let json = String::from_utf8(senml_encode(&recs, SenmlFormat::Json).unwrap()).unwrap();
        assert!(json.contains(r#""vd":"-_8A""#), "{json}");
    }

    fn arb_value() -> impl Strategy<Value = ResourceValue> {
        prop_oneof![
            any::<i64>().prop_map(ResourceValue::Integer),
            (-1e12f64..1e12).prop_map(ResourceValue::Float),
            "[a-zA-Z0-9 _.-]{0,24}".prop_map(ResourceValue::String),
            any::<bool>().prop_map(ResourceValue::Boolean),
            proptest::collection::vec(any::<u8>(), 0..64).prop_map(ResourceValue::Opaque),
        ]
    }

    pub(crate) fn arb_records() -> impl Strategy<Value = Vec<SenmlRecord>> {
        let rec = (
            prop_oneof![Just(33650u16), Just(33651), Just(33652), Just(5)],
            0u16..3,
            0u16..6,
            proptest::option::of(0u16..4),
            arb_value(),
        )
            .prop_map(|(o, i, r, ri, v)| {
                let path = match ri {
                    Some(ri) => Path::resource_instance(o, i, r, ri),
                    None => Path::resource(o, i, r),
                };
                SenmlRecord::new(path, v)
            });
        (
            proptest::collection::vec(rec, 1..12),
            proptest::option::of(0i64..2_000_000_000),
        )
            .prop_map(|(mut recs, t0)| {
                if let Some(t0) = t0 {
                    for (k, r) in recs.iter_mut().enumerate() {
                        r.time = Some(t0 + (k as i64 * 7) % 11);
                    }
                }
                recs
            })
    }

    proptest! {
        #[test]
        fn round_trip_both_formats(recs in arb_records()) {
            for f in [SenmlFormat::Json, SenmlFormat::Cbor] {
                let bytes = senml_encode(&recs, f).unwrap();
                prop_assert_eq!(senml_decode(&bytes, f).unwrap(), recs.clone());
            }
        }

        #[test]
        fn formats_agree(recs in arb_records()) {
            let j = senml_decode(&senml_encode(&recs, SenmlFormat::Json).unwrap(), SenmlFormat::Json).unwrap();
            let c = senml_decode(&senml_encode(&recs, SenmlFormat::Cbor).unwrap(), SenmlFormat::Cbor).unwrap();
            prop_assert_eq!(j, c);
        }

        #[test]
        fn cbor_smaller_for_numeric_packs(
            vals in proptest::collection::vec(prop_oneof![
                any::<i32>().prop_map(|i| ResourceValue::Integer(i as i64)),
                (-1e6f64..1e6).prop_map(ResourceValue::Float),
            ], 4..20),
        ) {
            let recs: Vec<SenmlRecord> = vals
                .into_iter()
                .enumerate()
                .map(|(k, v)| SenmlRecord::new(Path::resource(33652, 0, k as u16), v))
                .collect();
            let j = senml_encode(&recs, SenmlFormat::Json).unwrap();
            let c = senml_encode(&recs, SenmlFormat::Cbor).unwrap();
            prop_assert!(c.len() < j.len(), "cbor {} json {}", c.len(), j.len());
        }
    }
}
