//! Binary checkpoint: magic, format version, a JSON header with the
//! experiment config and tensor index, then raw little-endian tensor data.
//!
//! Serialization is canonical, so loading and saving again reproduces the
//! file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::write_atomic;
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::gallery::Reader;
use crate::nn::{DType, Float, ParamKind, Tensor};

const MAGIC: &[u8; 8] = b"CYPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TensorKind {
    Weight,
    WeightNoDecay,
    Buffer,
}

impl From<ParamKind> for TensorKind {
    fn from(k: ParamKind) -> Self {
        match k {
            ParamKind::Weight { decay: true } => TensorKind::Weight,
            ParamKind::Weight { decay: false } => TensorKind::WeightNoDecay,
            ParamKind::Buffer => TensorKind::Buffer,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
    /// Values widened to f64; exact for f32 checkpoints.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub dtype: DType,
    pub best_val_loss: f64,
    pub epoch: usize,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorIndex {
    name: String,
    shape: Vec<usize>,
    kind: TensorKind,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ExperimentConfig,
    dtype: DType,
    best_val_loss: f64,
    epoch: usize,
    tensors: Vec<TensorIndex>,
}

impl Checkpoint {
    pub fn from_model<T: Float>(
        model: &DualEncoder<T>,
        config: &ExperimentConfig,
        best_val_loss: f64,
        epoch: usize,
    ) -> Self {
        let mut config = config.clone();
        config.train.encoder = model.config.clone();
        config.train.dtype = T::DTYPE;
        let tensors = model
            .store
            .entries()
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                kind: e.kind.into(),
                data: e.value.data().iter().map(|v| v.f64()).collect(),
            })
            .collect();
        Checkpoint {
            config,
            dtype: T::DTYPE,
            best_val_loss,
            epoch,
            tensors,
        }
    }

    /// Rebuilds the model described by the stored encoder config and fills in
    /// every tensor by name.
    pub fn model<T: Float>(&self) -> Result<DualEncoder<T>> {
        let mut model = DualEncoder::<T>::new(&self.config.train.encoder, 0)?;
        if model.store.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors but the configured model has {}",
                self.tensors.len(),
                model.store.len()
            )));
        }
        for t in &self.tensors {
            let id = model.store.id(&t.name).ok_or_else(|| {
                Error::Checkpoint(format!(
                    "tensor `{}` does not exist in the configured model",
                    t.name
                ))
            })?;
            let expected = model.store.get(id).shape().to_vec();
            if expected != t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?} but the configured model expects {:?}",
                    t.name, t.shape, expected
                )));
            }
            *model.store.get_mut(id) =
                Tensor::from_vec(&t.shape, t.data.iter().map(|&v| T::of(v)).collect());
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if !self.best_val_loss.is_finite() {
            return Err(Error::Checkpoint(format!(
                "best validation loss {} is not finite",
                self.best_val_loss
            )));
        }
        let header = Header {
            config: self.config.clone(),
            dtype: self.dtype,
            best_val_loss: self.best_val_loss,
            epoch: self.epoch,
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorIndex {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    kind: t.kind,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(
            json.len()
                + 16
                + self
                    .tensors
                    .iter()
                    .map(|t| t.data.len() * self.dtype.size())
                    .sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` data does not match its shape",
                    t.name
                )));
            }
            for &v in &t.data {
                match self.dtype {
                    DType::F32 => (v as f32).to_le_bytes_into(&mut out),
                    DType::F64 => v.to_le_bytes_into(&mut out),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint(
                "not a cytopair checkpoint (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version > CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let size = header.dtype.size();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            let raw = r.take(n * size)?;
            let data = raw
                .chunks_exact(size)
                .map(|c| match header.dtype {
                    DType::F32 => f32::from_le_slice(c) as f64,
                    DType::F64 => f64::from_le_slice(c),
                })
                .collect();
            tensors.push(NamedTensor {
                name: t.name,
                shape: t.shape,
                kind: t.kind,
                data,
            });
        }
        if !r.finished() {
            return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
        }
        Ok(Checkpoint {
            config: header.config,
            dtype: header.dtype,
            best_val_loss: header.best_val_loss,
            epoch: header.epoch,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
