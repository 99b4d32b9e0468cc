//! Checkpoint container.
//!
//! Layout: the 8-byte magic `MSWACKPT`, the header length as a little-endian
//! u64, a JSON header, then every tensor as little-endian f32 in header order.
//! Tensor `offset`s count bytes from the start of the blob section. Optimizer
//! moments are stored as `adam.m.<param>` and `adam.v.<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::BatchSampler;
use super::train::TrainConfig;
use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::AdamW;
use crate::rng::StreamState;

const MAGIC: &[u8; 8] = b"MSWACKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    train: Option<TrainConfig>,
    step: usize,
    optimizer_step: usize,
    rng: Option<StreamState>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: usize,
    pub optimizer_step: usize,
    pub rng: Option<StreamState>,
    /// `(name, shape, values)` in storage order.
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    /// Snapshot of a model and, when training, its optimizer and sampler.
    pub fn capture(model: &Model, training: Option<(TrainConfig, &AdamW, &BatchSampler)>, step: usize) -> Self {
        let narrow = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec(), narrow(p.tensor.data())))
            .collect();
        let (mut train, mut rng, mut optimizer_step) = (None, None, 0);
        if let Some((cfg, adam, sampler)) = training {
            for (kind, moments) in [("m", &adam.first_moments), ("v", &adam.second_moments)] {
                for (p, m) in model.params().iter().zip(moments) {
                    tensors.push((format!("adam.{kind}.{}", p.name), p.tensor.shape().to_vec(), narrow(m)));
                }
            }
            train = Some(cfg);
            rng = Some(StreamState::capture(cfg.seed, sampler.rng()));
            optimizer_step = adam.step;
        }
        Checkpoint { config: model.config().clone(), train, step, optimizer_step, rng, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, shape, values)| {
                let e = TensorEntry { name: name.clone(), shape: shape.clone(), offset, len: values.len() };
                offset += 4 * values.len();
                e
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            model: self.config.clone(),
            train: self.train,
            step: self.step,
            optimizer_step: self.optimizer_step,
            rng: self.rng,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, values) in &self.tensors {
            values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let blob_start =
            16usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..blob_start]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
        }
        let blobs = &bytes[blob_start..];
        let tensors = header
            .tensors
            .into_iter()
            .map(|e| {
                let end = e.offset + 4 * e.len;
                if end > blobs.len() || e.shape.iter().product::<usize>() != e.len {
                    return Err(Error::Checkpoint(format!("tensor `{}` is truncated or misshapen", e.name)));
                }
                let values = blobs[e.offset..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Ok((e.name, e.shape, values))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            config: header.model,
            train: header.train,
            step: header.step,
            optimizer_step: header.optimizer_step,
            rng: header.rng,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    fn tensor(&self, name: &str) -> Option<Vec<f64>> {
        self.tensors.iter().find(|t| t.0 == name).map(|t| t.2.iter().map(|&x| f64::from(x)).collect())
    }

    pub fn model(&self) -> Result<Model> {
        let names: Vec<String> = Model::new(self.config.clone())?.params().iter().map(|p| p.name.clone()).collect();
        let named = names
            .into_iter()
            .map(|name| {
                let data = self.tensor(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
                Ok((name, data))
            })
            .collect::<Result<Vec<_>>>()?;
        Model::from_parts(self.config.clone(), named)
    }

    pub fn optimizer(&self, model: &Model) -> Result<AdamW> {
        let cfg = self.train.ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
        let mut adam = AdamW::new(cfg.optimizer(), model.params());
        adam.step = self.optimizer_step;
        for (i, p) in model.params().iter().enumerate() {
            let fetch = |kind: &str| {
                let name = format!("adam.{kind}.{}", p.name);
                self.tensor(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
            };
            adam.first_moments[i] = fetch("m")?;
            adam.second_moments[i] = fetch("v")?;
        }
        Ok(adam)
    }
}
