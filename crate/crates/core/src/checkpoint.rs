//! Binary checkpoint: magic, JSON header, then raw little-endian tensors in
//! the header's order and dtype.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamSet};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LPHCKPT1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    model: ModelConfig,
    step: u64,
    epoch: usize,
    val_loss: Option<f64>,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
}

/// A trained model with its position in training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    /// Optimizer steps taken.
    pub step: u64,
    /// Epoch the parameters were taken from (0 = before training).
    pub epoch: usize,
    pub val_loss: Option<f64>,
    pub optimizer: Option<Adam<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let mut tensors: Vec<TensorEntry> = params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let mut payload: Vec<&Tensor<T>> = params.tensors().iter().collect();
        let optimizer = self.optimizer.as_ref().map(|adam| {
            let (m, v) = adam.moments();
            for (prefix, moments) in [("adam.m", m), ("adam.v", v)] {
                for (n, t) in params.names().iter().zip(moments) {
                    tensors.push(TensorEntry {
                        name: format!("{prefix}.{n}"),
                        shape: t.shape().to_vec(),
                    });
                    payload.push(t);
                }
            }
            OptimizerHeader {
                config: *adam.config(),
                step: adam.step_count(),
            }
        });
        let header = Header {
            dtype: T::DTYPE.to_string(),
            model: self.model.config().clone(),
            step: self.step,
            epoch: self.epoch,
            val_loss: self.val_loss.filter(|v| v.is_finite()),
            tensors,
            optimizer,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in payload {
            for &x in t.data() {
                if T::DTYPE == "f32" {
                    out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&x.as_f64().to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Data(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(corrupt(&format!("unknown dtype {other}"))),
        };
        let mut cursor = &bytes[16 + len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let need = n * width;
            if cursor.len() < need {
                return Err(corrupt(&format!("truncated tensor {}", entry.name)));
            }
            let data: Vec<T> = cursor[..need]
                .chunks_exact(width)
                .map(|c| match width {
                    4 => T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                    _ => T::lit(f64::from_le_bytes(c.try_into().unwrap())),
                })
                .collect();
            cursor = &cursor[need..];
            tensors.push(Tensor::new(&entry.shape, data)?);
        }
        if !cursor.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        let n_params = if header.optimizer.is_some() {
            if tensors.len() % 3 != 0 {
                return Err(corrupt("optimizer state incomplete"));
            }
            tensors.len() / 3
        } else {
            tensors.len()
        };
        let mut rest = tensors.split_off(n_params);
        let mut params = ParamSet::new();
        for (entry, t) in header.tensors.iter().zip(tensors) {
            params.push(entry.name.clone(), t);
        }
        let model = Model::from_params(header.model, params)?;
        let optimizer = match header.optimizer {
            Some(opt) => {
                let v = rest.split_off(n_params);
                Some(Adam::from_state(opt.config, model.params(), opt.step, rest, v)?)
            }
            None => None,
        };
        Ok(Self {
            model,
            step: header.step,
            epoch: header.epoch,
            val_loss: header.val_loss,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Identity of the stored model, see [`Model::fingerprint`].
    pub fn model_id(&self) -> String {
        self.model.fingerprint()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_size: 16,
            latent_dim: 32,
            motion_dim: 2,
            encoder_channels: vec![2, 4],
            decoder_channels: vec![4, 2],
            decoder_base: 4,
            velocity_cap: 8.0,
            seed: 5,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Model::<f32>::new(small_config()).unwrap();
        let mut adam = Adam::new(AdamConfig::with_learning_rate(1e-3), model.params());
        let mut params = model.params().clone();
        let grads: Vec<_> = params.tensors().iter().map(|t| t.map(|_| 0.25f32)).collect();
        adam.update(&mut params, &grads).unwrap();
        let ckpt = Checkpoint {
            model: Model::from_params(small_config(), params).unwrap(),
            step: 1,
            epoch: 3,
            val_loss: Some(-12.5),
            optimizer: Some(adam),
        };
        let back = Checkpoint::<f32>::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.model_id(), ckpt.model_id());
    }

    #[test]
    fn rejects_corruption() {
        let model = Model::<f64>::new(small_config()).unwrap();
        let ckpt = Checkpoint {
            model,
            step: 0,
            epoch: 0,
            val_loss: None,
            optimizer: None,
        };
        let bytes = ckpt.to_bytes().unwrap();
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f64>::from_bytes(&bad).is_err());
        assert_eq!(Checkpoint::<f64>::from_bytes(&bytes).unwrap(), ckpt);
    }
}
