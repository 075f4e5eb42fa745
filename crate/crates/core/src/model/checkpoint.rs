//! Named-tensor container and its on-disk format.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"LCMP" | u32 version = 1 | u64 header_length | header (UTF-8 JSON) | payload
//! ```
//!
//! The JSON header is `{"config": ModelConfig, "tensors": [{name, dtype, shape,
//! byte_offset, byte_length}], "activation_bits"?: u8}`. `byte_offset` counts
//! from the first payload byte, i.e. the byte right after the header. Tensors
//! are written in name order, back to back, as raw `f32` values.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, TensorRole};
use crate::error::{LabError, ParseError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LCMP";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
    /// When set, forward passes fake-quantize linear-layer inputs per token at
    /// this bit-width (weight-activation quantization mode).
    activation_bits: Option<u8>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = config.tensor_specs();
        for (name, shape, _) in &specs {
            match tensors.get(name) {
                None => return Err(LabError::Checkpoint(format!("missing tensor {name:?}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(LabError::Checkpoint(format!(
                        "tensor {name:?} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if tensors.len() != specs.len() {
            let extra: Vec<_> = tensors
                .keys()
                .filter(|k| !specs.iter().any(|(n, _, _)| n == *k))
                .collect();
            return Err(LabError::Checkpoint(format!("unexpected tensors {extra:?}")));
        }
        Ok(Checkpoint {
            config,
            tensors,
            activation_bits: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| LabError::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn activation_bits(&self) -> Option<u8> {
        self.activation_bits
    }

    pub fn with_activation_bits(mut self, bits: Option<u8>) -> Self {
        self.activation_bits = bits;
        self
    }

    /// Returns a copy with `f` applied to every tensor of the given roles.
    /// Replacement tensors must keep their shape.
    pub fn map_tensors<F>(&self, roles: &[TensorRole], mut f: F) -> Result<Checkpoint>
    where
        F: FnMut(&str, &Tensor) -> Result<Tensor>,
    {
        let mut tensors = self.tensors.clone();
        for (name, _, role) in self.config.tensor_specs() {
            if !roles.contains(&role) {
                continue;
            }
            let new = f(&name, &self.tensors[&name])?;
            if new.shape() != self.tensors[&name].shape() {
                return Err(LabError::Checkpoint(format!(
                    "transform changed the shape of {name:?}"
                )));
            }
            tensors.insert(name, new);
        }
        Ok(Checkpoint {
            config: self.config.clone(),
            tensors,
            activation_bits: self.activation_bits,
        })
    }

    /// Bitwise equality of config, runtime flags and every tensor.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.config == other.config
            && self.activation_bits == other.activation_bits
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let len = 4 * t.numel() as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                byte_offset: offset,
                byte_length: len,
            });
            offset += len;
        }
        let header = Header {
            config: self.config.clone(),
            tensors: entries,
            activation_bits: self.activation_bits,
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + header_bytes.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let available = bytes.len() as u64;
        if bytes.len() < PREAMBLE {
            // Still report a wrong magic first when we can see it.
            if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                return Err(ParseError::BadMagic {
                    found: bytes[..4].try_into().unwrap(),
                }
                .into());
            }
            return Err(ParseError::Truncated {
                needed: PREAMBLE as u64,
                available,
            }
            .into());
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(ParseError::BadMagic { found: magic }.into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(ParseError::Version {
                found: version,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = (PREAMBLE as u64).checked_add(header_len).ok_or(ParseError::Truncated {
            needed: u64::MAX,
            available,
        })?;
        if header_end > available {
            return Err(ParseError::Truncated {
                needed: header_end,
                available,
            }
            .into());
        }
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end as usize])
            .map_err(|e| ParseError::Header(e.to_string()))?;
        let payload = &bytes[header_end as usize..];
        let payload_len = payload.len() as u64;

        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            if entry.dtype != "f32" {
                return Err(ParseError::Inconsistent {
                    name: entry.name,
                    reason: format!("unsupported dtype {:?}", entry.dtype),
                }
                .into());
            }
            let numel = entry
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
            if numel.and_then(|n| n.checked_mul(4)) != Some(entry.byte_length) {
                return Err(ParseError::Inconsistent {
                    name: entry.name,
                    reason: format!(
                        "byte_length {} does not match shape {:?}",
                        entry.byte_length, entry.shape
                    ),
                }
                .into());
            }
            let end = entry.byte_offset.checked_add(entry.byte_length);
            match end {
                Some(end) if end <= payload_len => {}
                _ => {
                    return Err(ParseError::OutOfBounds {
                        name: entry.name,
                        start: entry.byte_offset,
                        end: end.unwrap_or(u64::MAX),
                        payload: payload_len,
                    }
                    .into())
                }
            }
            let raw = &payload[entry.byte_offset as usize..(entry.byte_offset + entry.byte_length) as usize];
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(entry.shape, data).map_err(|e| ParseError::Inconsistent {
                name: entry.name.clone(),
                reason: e.to_string(),
            })?;
            if tensors.insert(entry.name.clone(), tensor).is_some() {
                return Err(ParseError::Inconsistent {
                    name: entry.name,
                    reason: "duplicate directory entry".into(),
                }
                .into());
            }
        }
        Ok(Checkpoint::new(header.config, tensors)?.with_activation_bits(header.activation_bits))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation_bits: Option<u8>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| LabError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate::gen_toy_model;

    fn tiny() -> Checkpoint {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            d_ff: 12,
            vocab_size: 16,
            rope_theta: 10000.0,
            max_context: 32,
        };
        gen_toy_model(&cfg, 3)
    }

    fn header_len(bytes: &[u8]) -> usize {
        u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = tiny().with_activation_bits(Some(8));
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert!(c.bit_eq(&back));
    }

    #[test]
    fn corrupted_magic() {
        let mut b = tiny().to_bytes();
        b[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&b),
            Err(LabError::Parse(ParseError::BadMagic { .. }))
        ));
    }

    #[test]
    fn version_mismatch() {
        let mut b = tiny().to_bytes();
        b[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&b),
            Err(LabError::Parse(ParseError::Version { found: 2, .. }))
        ));
    }

    #[test]
    fn truncated_file() {
        let b = tiny().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&b[..10]),
            Err(LabError::Parse(ParseError::Truncated { .. }))
        ));
        let h = header_len(&b);
        assert!(matches!(
            Checkpoint::from_bytes(&b[..PREAMBLE + h / 2]),
            Err(LabError::Parse(ParseError::Truncated { .. }))
        ));
        // Header intact, payload cut short.
        assert!(matches!(
            Checkpoint::from_bytes(&b[..b.len() - 4]),
            Err(LabError::Parse(ParseError::OutOfBounds { .. }))
        ));
    }

    #[test]
    fn tensor_beyond_file_is_bounds_error() {
        let c = tiny();
        let b = c.to_bytes();
        let h = header_len(&b);
        let mut header: serde_json::Value = serde_json::from_slice(&b[PREAMBLE..PREAMBLE + h]).unwrap();
        header["tensors"][0]["byte_offset"] = serde_json::json!(1u64 << 40);
        let hb = serde_json::to_vec(&header).unwrap();
        let mut out = b[..8].to_vec();
        out.extend_from_slice(&(hb.len() as u64).to_le_bytes());
        out.extend_from_slice(&hb);
        out.extend_from_slice(&b[PREAMBLE + h..]);
        assert!(matches!(
            Checkpoint::from_bytes(&out),
            Err(LabError::Parse(ParseError::OutOfBounds { .. }))
        ));
    }

    #[test]
    fn shape_length_disagreement() {
        let b = tiny().to_bytes();
        let h = header_len(&b);
        let mut header: serde_json::Value = serde_json::from_slice(&b[PREAMBLE..PREAMBLE + h]).unwrap();
        header["tensors"][0]["byte_length"] = serde_json::json!(4);
        let hb = serde_json::to_vec(&header).unwrap();
        let mut out = b[..8].to_vec();
        out.extend_from_slice(&(hb.len() as u64).to_le_bytes());
        out.extend_from_slice(&hb);
        out.extend_from_slice(&b[PREAMBLE + h..]);
        assert!(matches!(
            Checkpoint::from_bytes(&out),
            Err(LabError::Parse(ParseError::Inconsistent { .. }))
        ));
    }

    #[test]
    fn missing_tensor_rejected() {
        let c = tiny();
        let mut t = c.tensors().clone();
        t.remove("output");
        assert!(matches!(
            Checkpoint::new(c.config().clone(), t),
            Err(LabError::Checkpoint(_))
        ));
    }
}
