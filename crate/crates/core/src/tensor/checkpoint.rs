//! Checkpoint files.
//!
//! Layout: an 8-byte little-endian header length `h`, then `h` bytes of JSON
//! header, then the data section of concatenated little-endian `f32` arrays.
//! The header maps each tensor name to its shape and byte offset inside the
//! data section; `meta` carries free-form JSON (model config, step, ...).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Parameterized, Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "edgespotter-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub tensors: BTreeMap<String, TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_params<T: Scalar, M: Parameterized<T>>(model: &M) -> Self {
        let mut tensors = BTreeMap::new();
        model.visit(&mut |p| {
            tensors.insert(p.name.clone(), p.value.cast::<f32>());
        });
        Self {
            tensors,
            meta: serde_json::Value::Null,
        }
    }

    /// Copies stored tensors into `model`, requiring every parameter to be present
    /// with a matching shape.
    pub fn apply_to<T: Scalar, M: Parameterized<T>>(&self, model: &mut M) -> Result<()> {
        let mut err = None;
        model.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(&p.name) {
                None => {
                    err = Some(Error::CheckpointMismatch {
                        name: p.name.clone(),
                        message: "missing from checkpoint".into(),
                    })
                }
                Some(t) if t.shape() != p.value.shape() => {
                    err = Some(Error::CheckpointMismatch {
                        name: p.name.clone(),
                        message: format!(
                            "checkpoint shape {:?} vs model shape {:?}",
                            t.shape(),
                            p.value.shape()
                        ),
                    })
                }
                Some(t) => p.value = t.cast(),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.insert(
                name.clone(),
                TensorEntry {
                    shape: t.shape().to_vec(),
                    offset,
                },
            );
            offset += 4 * t.len() as u64;
        }
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: 1,
            message,
        };
        if bytes.len() < 8 {
            return Err(bad("checkpoint shorter than its length prefix".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let data_start = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {header_len} exceeds file size")))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[8..data_start])
            .map_err(|e| bad(format!("bad header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(bad(format!(
                "unknown checkpoint format `{}`",
                header.format
            )));
        }
        let data = &bytes[data_start..];
        let mut tensors = BTreeMap::new();
        for (name, entry) in header.tensors {
            let len: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * len;
            if end > data.len() {
                return Err(bad(format!("tensor `{name}` runs past end of data")));
            }
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, Tensor::new(&entry.shape, values)?);
        }
        Ok(Self {
            tensors,
            meta: header.meta,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            a in proptest::collection::vec(proptest::num::f32::ANY, 0..40),
            b in proptest::collection::vec(proptest::num::f32::NORMAL, 1..10),
        ) {
            let mut ckpt = Checkpoint::default();
            ckpt.tensors.insert("a".into(), Tensor::from_vec(&[a.len()], a.clone()));
            ckpt.tensors.insert("layer.b".into(), Tensor::from_vec(&[1, b.len()], b.clone()));
            ckpt.meta = serde_json::json!({"step": 3});
            let bytes = ckpt.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(&back.meta, &ckpt.meta);
            let got: Vec<u32> = back.tensors["a"].data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(back.tensors["layer.b"].data(), &b[..]);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn header_lists_offsets() {
        let mut ckpt = Checkpoint::default();
        ckpt.tensors
            .insert("x".into(), Tensor::from_vec(&[2], vec![1.0f32, 2.0]));
        ckpt.tensors
            .insert("y".into(), Tensor::from_vec(&[3], vec![3.0f32, 4.0, 5.0]));
        let bytes = ckpt.to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header.tensors["x"].offset, 0);
        assert_eq!(header.tensors["y"].offset, 8);
        assert_eq!(bytes.len(), 8 + hlen + 20);
        let y0 = f32::from_le_bytes(bytes[8 + hlen + 8..8 + hlen + 12].try_into().unwrap());
        assert_eq!(y0, 3.0);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut ckpt = Checkpoint::default();
        ckpt.tensors
            .insert("x".into(), Tensor::from_vec(&[4], vec![1.0f32; 4]));
        let bytes = ckpt.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2], Path::new("t")).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..4], Path::new("t")).is_err());
    }
}
