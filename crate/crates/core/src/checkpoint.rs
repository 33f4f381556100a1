//! Single-file checkpoint: a JSON manifest followed by little-endian `f32`
//! tensor blobs.
//!
//! Layout:
//!
//! ```text
//! b"ARGBCKPT" | u64 LE manifest length | manifest JSON | blob region
//! ```
//!
//! The manifest lists every tensor with its name, shape and byte offset
//! relative to the start of the blob region. Writing and reading are exact
//! at the bit level.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use argb_nn::{Adam, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ArgbError, Result};
use crate::io::ensure_parent;
use crate::model::{ArgbModel, BatchNorm, Conv, ExpertNet, LinearDecoder, RouterNet, EMBED_DIM};

const MAGIC: &[u8; 8] = b"ARGBCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u32,
    /// Free-form description of what the file holds (`"argb-autoencoder"`, `"restorer"`).
    pub kind: String,
    pub header: Value,
    pub tensors: Vec<TensorEntry>,
}

/// Named tensors plus a JSON header, in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    pub header: Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl TensorFile {
    pub fn new(kind: &str, header: Value) -> Self {
        Self {
            kind: kind.to_string(),
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn take(&mut self, name: &str) -> Result<Tensor<f32>> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| ArgbError::Checkpoint(format!("tensor `{name}` missing")))?;
        Ok(self.tensors.remove(i).1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let bytes = (t.len() * 4) as u64;
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape(),
                    offset,
                    bytes,
                };
                offset += bytes;
                e
            })
            .collect();
        let manifest = Manifest {
            version: FORMAT_VERSION,
            kind: self.kind.clone(),
            header: self.header.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| ArgbError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not an aRGB checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| ArgbError::Checkpoint(format!("manifest: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(ArgbError::Checkpoint(format!(
                "unsupported format version {}",
                manifest.version
            )));
        }
        let blobs = &bytes[16 + len..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.bytes as usize != n * 4 {
                return Err(ArgbError::Checkpoint(format!("size mismatch for `{}`", e.name)));
            }
            let raw = blobs
                .get(e.offset as usize..(e.offset + e.bytes) as usize)
                .ok_or_else(|| ArgbError::Checkpoint(format!("blob for `{}` out of range", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape, data)));
        }
        Ok(Self {
            kind: manifest.kind,
            header: manifest.header,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| ArgbError::missing(path, e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

/// Optimizer state stored alongside the model for resumable training.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor<f32>, Tensor<f32>)>,
}

impl OptimizerState {
    pub fn from_adam(adam: &Adam<f32>) -> Self {
        Self {
            step: adam.step_count(),
            moments: adam.moments().clone(),
        }
    }
}

/// A saved aRGB autoencoder.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ArgbModel<f32>,
    /// Training metadata: config, step counter, RNG state, loss summary.
    pub metadata: Value,
    pub optimizer: Option<OptimizerState>,
}

pub const AUTOENCODER_KIND: &str = "argb-autoencoder";

impl Checkpoint {
    pub fn new(model: ArgbModel<f32>) -> Self {
        Self {
            model,
            metadata: Value::Null,
            optimizer: None,
        }
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let header = serde_json::json!({
            "num_experts": self.model.num_experts(),
            "embedding_dim": EMBED_DIM,
            "optimizer_step": self.optimizer.as_ref().map(|o| o.step),
            "metadata": self.metadata,
        });
        let mut f = TensorFile::new(AUTOENCODER_KIND, header);
        for (name, t) in self.model.named_params() {
            f.push(name, (**t).clone());
        }
        for (name, t) in self.model.named_buffers() {
            f.push(name, t.clone());
        }
        if let Some(o) = &self.optimizer {
            for (name, (m, v)) in &o.moments {
                f.push(format!("adam.m.{name}"), m.clone());
                f.push(format!("adam.v.{name}"), v.clone());
            }
        }
        f
    }

    pub fn from_tensor_file(mut f: TensorFile) -> Result<Self> {
        if f.kind != AUTOENCODER_KIND {
            return Err(ArgbError::Checkpoint(format!(
                "expected {AUTOENCODER_KIND}, found {}",
                f.kind
            )));
        }
        let k = f.header["num_experts"]
            .as_u64()
            .ok_or_else(|| ArgbError::Checkpoint("header lacks num_experts".into()))? as usize;
        let c = f.header["embedding_dim"].as_u64().unwrap_or(EMBED_DIM as u64) as usize;
        if c != EMBED_DIM {
            return Err(ArgbError::Checkpoint(format!("embedding_dim {c} unsupported")));
        }
        let mut model = skeleton(k);
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let t = f.take(&name)?;
            let slot = model.param_mut(&name).expect("skeleton has every named param");
            if slot.shape() != t.shape() {
                return Err(ArgbError::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = std::sync::Arc::new(t);
        }
        let buffers: Vec<String> = model.named_buffers().into_iter().map(|(n, _)| n).collect();
        for name in buffers {
            let t = f.take(&name)?;
            *model.buffer_mut(&name).expect("skeleton has every buffer") = t;
        }
        let optimizer = match f.header["optimizer_step"].as_u64() {
            Some(step) => {
                let mut moments = BTreeMap::new();
                let names: Vec<String> = f
                    .tensors
                    .iter()
                    .filter_map(|(n, _)| n.strip_prefix("adam.m.").map(str::to_string))
                    .collect();
                for name in names {
                    let m = f.take(&format!("adam.m.{name}"))?;
                    let v = f.take(&format!("adam.v.{name}"))?;
                    moments.insert(name, (m, v));
                }
                Some(OptimizerState { step, moments })
            }
            None => None,
        };
        Ok(Self {
            model,
            metadata: f.header["metadata"].clone(),
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(TensorFile::load(path)?)
    }
}

/// A zero-initialised model with the architecture for `k` experts.
fn skeleton(k: usize) -> ArgbModel<f32> {
    let zero_conv = |cin: usize, cout: usize, kernel: usize, bias: bool| Conv {
        weight: std::sync::Arc::new(Tensor::zeros([cout, cin, kernel, kernel])),
        bias: bias.then(|| std::sync::Arc::new(Tensor::zeros([1, cout, 1, 1]))),
        pad: (kernel - 1) / 2,
    };
    ArgbModel {
        router: RouterNet {
            convs: vec![
                zero_conv(3, 64, 3, true),
                zero_conv(64, 128, 3, true),
                zero_conv(128, 256, 3, true),
                zero_conv(256, 512, 1, true),
                zero_conv(512, k, 1, true),
            ],
            norms: vec![BatchNorm::new(128), BatchNorm::new(256), BatchNorm::new(512)],
        },
        experts: (0..k)
            .map(|_| ExpertNet {
                convs: vec![
                    zero_conv(3, 32, 3, true),
                    zero_conv(32, 64, 3, true),
                    zero_conv(64, 128, 3, true),
                    zero_conv(128, EMBED_DIM, 3, true),
                ],
            })
            .collect(),
        decoder: LinearDecoder {
            convs: vec![
                zero_conv(EMBED_DIM, 64, 1, false),
                zero_conv(64, 32, 1, false),
                zero_conv(32, 3, 1, true),
            ],
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let model = ArgbModel::<f32>::init(2, &mut rng).unwrap();
        let mut ck = Checkpoint::new(model);
        ck.metadata = serde_json::json!({"step": 7});
        let bytes = ck.to_tensor_file().to_bytes().unwrap();
        let back = Checkpoint::from_tensor_file(TensorFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.model.param_hash(), ck.model.param_hash());
        assert_eq!(back.metadata, ck.metadata);
        assert_eq!(back.to_tensor_file().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corrupt_files() {
        assert!(TensorFile::from_bytes(b"nonsense").is_err());
        let mut f = TensorFile::new("x", Value::Null);
        f.push("a", Tensor::full([1, 1, 2, 2], 1.5));
        let mut bytes = f.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(TensorFile::from_bytes(&bytes).is_err());
    }
}
