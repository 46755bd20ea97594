//! Named-tensor container: the on-disk format for model weights, the feature
//! extractor and checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a JSON header, then raw
//! tensor data as little-endian f32 in header order. The header carries a
//! format version, an arbitrary JSON `config` snapshot, an optional JSON
//! `state` section (used by checkpoints), and per-tensor dtype/shape/offset.
//! Keys are sorted maps throughout, so serialization is byte-deterministic.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}

/// In-memory named-tensor store with a config snapshot and optional state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    pub config: serde_json::Value,
    pub state: Option<serde_json::Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct HeaderTensor {
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    state: Option<serde_json::Value>,
    tensors: BTreeMap<String, HeaderTensor>,
}

impl TensorStore {
    pub fn new(config: serde_json::Value) -> Self {
        TensorStore {
            config,
            state: None,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::load(format!("container is missing tensor {name}")))
    }

    /// Fails unless the store holds exactly `names`, no more and no fewer.
    pub fn expect_exact(&self, names: &[String]) -> Result<()> {
        for n in names {
            if !self.tensors.contains_key(n) {
                return Err(Error::load(format!("container is missing tensor {n}")));
            }
        }
        if self.tensors.len() != names.len() {
            let expected: std::collections::BTreeSet<_> = names.iter().collect();
            let extra = self
                .tensors
                .keys()
                .find(|k| !expected.contains(k))
                .expect("count mismatch implies an extra key");
            return Err(Error::load(format!("container has unexpected tensor {extra}")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            tensors.insert(
                name.clone(),
                HeaderTensor {
                    dtype: "f32".to_string(),
                    shape: t.shape.clone(),
                    offset,
                    len: t.data.len() as u64,
                },
            );
            offset += (t.data.len() * 4) as u64;
        }
        let header = Header {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            state: self.state.clone(),
            tensors,
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset as usize);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::load(format!("corrupt container: {msg}"));
        if bytes.len() < 8 {
            return Err(corrupt("shorter than the length prefix"));
        }
        let hlen = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + hlen {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[8..8 + hlen])
            .map_err(|e| corrupt(&format!("bad header json ({e})")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::load(format!(
                "container version {} is not supported (expected {FORMAT_VERSION})",
                header.version
            )));
        }
        let data = &bytes[8 + hlen..];
        let mut tensors = BTreeMap::new();
        for (name, ht) in header.tensors {
            if ht.dtype != "f32" {
                return Err(Error::load(format!(
                    "tensor {name}: unsupported dtype {}",
                    ht.dtype
                )));
            }
            let count: usize = ht.shape.iter().product();
            if count as u64 != ht.len {
                return Err(corrupt(&format!("tensor {name}: shape/len disagree")));
            }
            let start = ht.offset as usize;
            let end = start + count * 4;
            if end > data.len() {
                return Err(corrupt(&format!("tensor {name}: data out of range")));
            }
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(
                name,
                Tensor {
                    shape: ht.shape,
                    data: values,
                },
            );
        }
        Ok(TensorStore {
            config: header.config,
            state: header.state,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Load(msg) => Error::load(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Compares two JSON config snapshots field by field, naming the first
/// mismatch. Used when loading weights into a live model.
pub fn check_config_matches(expected: &serde_json::Value, found: &serde_json::Value) -> Result<()> {
    fn walk(path: &str, a: &serde_json::Value, b: &serde_json::Value) -> Result<()> {
        match (a, b) {
            (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) => {
                for (k, va) in ma {
                    let sub = if path.is_empty() {
                        k.clone()
                    } else {
                        format!("{path}.{k}")
                    };
                    match mb.get(k) {
                        Some(vb) => walk(&sub, va, vb)?,
                        None => {
                            return Err(Error::load(format!("config field {sub} is missing")))
                        }
                    }
                }
                Ok(())
            }
            _ if a == b => Ok(()),
            _ => Err(Error::load(format!(
                "config field {path} disagrees: expected {a}, found {b}"
            ))),
        }
    }
    walk("", expected, found)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorStore {
        let mut s = TensorStore::new(serde_json::json!({"blocks": 4, "features": 16}));
        s.insert("a.weight", Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, 3.25, 9.0, -0.125]));
        s.insert("a.bias", Tensor::new(vec![3], vec![0.5, 0.25, -1.0]));
        s.state = Some(serde_json::json!({"iteration": 7}));
        s
    }

    #[test]
    fn roundtrip_is_bit_exact_and_idempotent() {
        let s = sample();
        let b1 = s.to_bytes();
        let s2 = TensorStore::from_bytes(&b1).unwrap();
        assert_eq!(s, s2);
        let b2 = s2.to_bytes();
        assert_eq!(b1, b2);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let s = sample();
        s.save(&path).unwrap();
        let s2 = TensorStore::load(&path).unwrap();
        assert_eq!(s, s2);
    }

    #[test]
    fn missing_tensor_is_named() {
        let s = sample();
        let err = s.get("b.weight").unwrap_err().to_string();
        assert!(err.contains("b.weight"), "{err}");
        let err = s
            .expect_exact(&["a.weight".into(), "a.bias".into(), "c.gamma".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("c.gamma"), "{err}");
    }

    #[test]
    fn extra_tensor_is_rejected() {
        let s = sample();
        let err = s.expect_exact(&["a.weight".into()]).unwrap_err().to_string();
        assert!(err.contains("a.bias"), "{err}");
    }

    #[test]
    fn corrupt_and_mismatched_inputs_error() {
        let s = sample();
        let mut bytes = s.to_bytes();
        assert!(TensorStore::from_bytes(&bytes[..4]).is_err());
        bytes.truncate(bytes.len() - 3);
        assert!(TensorStore::from_bytes(&bytes).is_err());

        let mut wrong = s.clone();
        wrong.config = serde_json::json!({"blocks": 5, "features": 16});
        let err = check_config_matches(&s.config, &wrong.config)
            .unwrap_err()
            .to_string();
        assert!(err.contains("blocks"), "{err}");
    }

    #[test]
    fn version_gate() {
        let bytes = sample().to_bytes();
        let hlen = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let mut json: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        json["version"] = serde_json::json!(99);
        let hb = serde_json::to_vec(&json).unwrap();
        let mut patched = Vec::new();
        patched.extend_from_slice(&(hb.len() as u64).to_le_bytes());
        patched.extend_from_slice(&hb);
        patched.extend_from_slice(&bytes[8 + hlen..]);
        let err = TensorStore::from_bytes(&patched).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
