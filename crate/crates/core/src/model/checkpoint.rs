use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LFDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: NetworkConfig,
    iteration: u64,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Network parameters plus arbitrary named tensors (optimizer moments) and
/// free-form metadata.
///
/// Layout: 8-byte magic, little-endian `u64` header length, JSON header,
/// little-endian `f32` blob addressed by the header's tensor index.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub iteration: u64,
    pub extra: Vec<(String, Vec<f32>)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(network: Network, iteration: u64) -> Self {
        Self {
            network,
            iteration,
            extra: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn extra(&self, name: &str) -> Option<&[f32]> {
        self.extra
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blob: Vec<f32> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: blob.len(),
                len: data.len(),
            });
            blob.extend_from_slice(data);
        };
        for (name, p) in self.network.params() {
            push(format!("param/{name}"), p.shape.clone(), &p.value);
        }
        for (name, data) in &self.extra {
            push(format!("extra/{name}"), vec![data.len()], data);
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.network.config().clone(),
            iteration: self.iteration,
            meta: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::malformed(FORMAT, "bad magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let blob_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::malformed(FORMAT, "truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..blob_start])?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::malformed(
                FORMAT,
                format!("unsupported version {}", header.version),
            ));
        }
        let blob = &bytes[blob_start..];
        if !blob.len().is_multiple_of(4) {
            return Err(Error::malformed(FORMAT, "blob length not a multiple of 4"));
        }
        let floats: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let slice = |e: &TensorEntry| -> Result<&[f32]> {
            e.offset
                .checked_add(e.len)
                .filter(|&end| end <= floats.len())
                .map(|end| &floats[e.offset..end])
                .ok_or_else(|| Error::malformed(FORMAT, format!("tensor {} out of range", e.name)))
        };

        let mut network = Network::new(header.config.clone(), 0)?;
        let mut seen = 0;
        for (name, p) in network.params_mut() {
            let key = format!("param/{name}");
            let entry = header
                .tensors
                .iter()
                .find(|e| e.name == key)
                .ok_or_else(|| Error::malformed(FORMAT, format!("missing tensor {key}")))?;
            if entry.shape != p.shape {
                return Err(Error::malformed(
                    FORMAT,
                    format!("tensor {key} has shape {:?}, expected {:?}", entry.shape, p.shape),
                ));
            }
            p.value.copy_from_slice(slice(entry)?);
            seen += 1;
        }
        let mut extra = Vec::new();
        for e in &header.tensors {
            if let Some(name) = e.name.strip_prefix("extra/") {
                extra.push((name.to_string(), slice(e)?.to_vec()));
            } else if !e.name.starts_with("param/") {
                return Err(Error::malformed(FORMAT, format!("unknown tensor {}", e.name)));
            }
        }
        if seen + extra.len() != header.tensors.len() {
            return Err(Error::malformed(FORMAT, "unexpected parameter tensors"));
        }
        Ok(Self {
            network,
            iteration: header.iteration,
            extra,
            meta: header.meta,
        })
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_network;

    fn cfg() -> NetworkConfig {
        NetworkConfig {
            scale_features: [2, 3, 4, 5],
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let mut ck = Checkpoint::new(build_network(cfg(), 3).unwrap(), 42);
        ck.extra.push(("adam_m".into(), vec![1.0, -2.5, 3.25]));
        ck.meta = serde_json::json!({"rng": [1, 2, 3]});
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.extra("adam_m"), Some(&[1.0, -2.5, 3.25][..]));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ck = Checkpoint::new(build_network(cfg(), 3).unwrap(), 0);
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
