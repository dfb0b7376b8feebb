use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use super::tree::{Tensor, TensorDType, WeightTree};
use super::{GraftError, LineageEvent, Result};

pub const MAGIC: &[u8; 8] = b"WTREE\0\0\0";
pub const VERSION: u16 = 1;
const PREFIX: usize = 8 + 2 + 4;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: TensorDType,
    shape: Vec<usize>,
    byte_offset: usize,
    byte_length: usize,
}

/// Header object, rejecting repeated keys instead of letting the last win.
struct Header {
    entries: Vec<(String, Entry)>,
    lineage: Vec<LineageEvent>,
}

impl<'de> Deserialize<'de> for Header {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Header;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object of tensor entries")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Header, A::Error> {
                let mut seen = std::collections::HashSet::new();
                let mut entries = Vec::new();
                let mut lineage = None;
                while let Some(key) = map.next_key::<String>()? {
                    if !seen.insert(key.clone()) {
                        return Err(serde::de::Error::custom(format!("duplicate name {key:?}")));
                    }
                    if key == "lineage" {
                        lineage = Some(map.next_value()?);
                    } else {
                        entries.push((key, map.next_value()?));
                    }
                }
                Ok(Header { entries, lineage: lineage.unwrap_or_default() })
            }
        }
        d.deserialize_map(V)
    }
}

pub fn to_bytes(t: &WeightTree) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    let mut blob = Vec::new();
    for (name, tensor) in t.leaves() {
        let e = Entry {
            dtype: tensor.dtype(),
            shape: tensor.shape().to_vec(),
            byte_offset: blob.len(),
            byte_length: tensor.bytes().len(),
        };
        blob.extend_from_slice(tensor.bytes());
        header.insert(name, serde_json::to_value(e).expect("entry serializes"));
    }
    if !t.lineage.is_empty() {
        header.insert("lineage".into(), serde_json::to_value(&t.lineage).expect("lineage serializes"));
    }
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<WeightTree> {
    let bad = |m: String| GraftError::Malformed(m);
    if bytes.len() < PREFIX || &bytes[..8] != MAGIC {
        return Err(bad("missing archive magic".into()));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != VERSION {
        return Err(bad(format!("unsupported archive version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let hend = PREFIX.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("header runs past end of file".into()))?;
    let text = std::str::from_utf8(&bytes[PREFIX..hend]).map_err(|e| bad(format!("header is not UTF-8: {e}")))?;
    let header: Header = serde_json::from_str(text).map_err(|e| bad(format!("header: {e}")))?;
    let blob = &bytes[hend..];

    let mut spans: Vec<(usize, usize, &str)> = Vec::new();
    let mut t = WeightTree::new();
    for (name, e) in &header.entries {
        let numel = e.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if numel.and_then(|n| n.checked_mul(e.dtype.size())) != Some(e.byte_length) {
            return Err(bad(format!("{name:?}: byte_length does not match shape and dtype")));
        }
        let end = e.byte_offset.checked_add(e.byte_length).filter(|&x| x <= blob.len());
        let end = end.ok_or_else(|| bad(format!("{name:?}: data out of bounds")))?;
        spans.push((e.byte_offset, end, name));
        let tensor = Tensor::from_bytes(e.dtype, e.shape.clone(), blob[e.byte_offset..end].to_vec())?;
        t.insert(name, tensor)?;
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(bad(format!("{:?} overlaps {:?}", w[0].2, w[1].2)));
        }
    }
    t.lineage = header.lineage;
    Ok(t)
}

pub fn save_archive(t: &WeightTree, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(t)).map_err(|source| GraftError::Io { path: path.to_path_buf(), source })
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<WeightTree> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| GraftError::Io { path: path.to_path_buf(), source })?;
    from_bytes(&bytes)
}

/// SHA-256 of the serialized archive.
pub fn archive_hash(t: &WeightTree) -> String {
    format!("{:x}", Sha256::digest(to_bytes(t)))
}
