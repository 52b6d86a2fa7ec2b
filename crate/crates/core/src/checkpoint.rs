//! Binary checkpoints: magic, a length-prefixed JSON header, then raw
//! little-endian `f64` payloads for parameters and optimizer moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{BaselineConfig, LstmForecaster};
use crate::dataio::NormStats;
use crate::error::{GcaError, Result};
use crate::model::{GcaModel, ModelConfig};
use crate::nn::{Adam, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::Forecaster;

const MAGIC: &[u8; 8] = b"GCACKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "lowercase")]
pub enum ModelSpec {
    Gca(ModelConfig),
    Lstm(BaselineConfig),
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> Result<Forecaster> {
        Ok(match self {
            ModelSpec::Gca(cfg) => Forecaster::Gca(GcaModel::new(cfg.clone(), seed)?),
            ModelSpec::Lstm(cfg) => Forecaster::Lstm(LstmForecaster::new(cfg.clone(), seed)?),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub optimizer: Adam,
    pub epoch: usize,
    pub norm_source: Option<NormStats>,
    pub norm_target: Option<NormStats>,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct ParamShape {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    spec: ModelSpec,
    config_hash: String,
    epoch: usize,
    norm_source: Option<NormStats>,
    norm_target: Option<NormStats>,
    params: Vec<ParamShape>,
    optimizer: OptimizerHeader,
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            spec: self.spec.clone(),
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            norm_source: self.norm_source.clone(),
            norm_target: self.norm_target.clone(),
            params: self
                .store
                .params()
                .iter()
                .map(|p| ParamShape {
                    name: p.name.clone(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                })
                .collect(),
            optimizer: OptimizerHeader {
                learning_rate: self.optimizer.learning_rate,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: self.optimizer.eps,
                step: self.optimizer.step,
            },
        };
        let json = serde_json::to_vec(&header)?;
        let scalars = self.store.num_scalars();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 3 * 8 * scalars);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = self
            .store
            .params()
            .iter()
            .map(|p| &p.value)
            .chain(&self.optimizer.m)
            .chain(&self.optimizer.v);
        for t in tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| GcaError::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut len_bytes = [0u8; 8];
        len_bytes.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let body = &bytes[MAGIC.len() + 8..];
        if body.len() < header_len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])?;
        if header.format_version != FORMAT_VERSION {
            return Err(GcaError::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let mut payload = body[header_len..].chunks_exact(8).map(|c| {
            let mut b = [0u8; 8];
            b.copy_from_slice(c);
            f64::from_le_bytes(b)
        });
        let scalars: usize = header.params.iter().map(|p| p.rows * p.cols).sum();
        if body.len() - header_len != 3 * 8 * scalars {
            return Err(bad("payload size does not match header"));
        }
        let mut read = |shape: &ParamShape| {
            let data: Vec<f64> = payload.by_ref().take(shape.rows * shape.cols).collect();
            Tensor::from_vec(shape.rows, shape.cols, data)
        };
        let values: Vec<Tensor> = header.params.iter().map(&mut read).collect();
        let m: Vec<Tensor> = header.params.iter().map(&mut read).collect();
        let v: Vec<Tensor> = header.params.iter().map(&mut read).collect();

        let mut store = header.spec.build(0)?.store().clone();
        if store.len() != values.len() {
            return Err(bad("parameter count does not match the model spec"));
        }
        for ((param, shape), value) in store
            .params_mut()
            .iter_mut()
            .zip(&header.params)
            .zip(values)
        {
            if param.name != shape.name || param.value.shape() != value.shape() {
                return Err(GcaError::Checkpoint(format!(
                    "parameter `{}` does not match the model spec",
                    shape.name
                )));
            }
            param.value = value;
        }
        let o = header.optimizer;
        Ok(Checkpoint {
            spec: header.spec,
            store,
            optimizer: Adam {
                learning_rate: o.learning_rate,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                step: o.step,
                m,
                v,
            },
            epoch: header.epoch,
            norm_source: header.norm_source,
            norm_target: header.norm_target,
            config_hash: header.config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| GcaError::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| GcaError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| GcaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| GcaError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Model with the stored parameters.
    pub fn restore(&self) -> Result<Forecaster> {
        let mut model = self.spec.build(0)?;
        *model.store_mut() = self.store.clone();
        Ok(model)
    }
}
