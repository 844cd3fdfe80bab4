//! Training state in the blob container: every parameter under
//! `param.<name>`, Adam moments under `adam.m.<name>` / `adam.v.<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use zslab_core::encoder::Encoder;
use zslab_core::optim::Adam;

use crate::config::RunConfig;
use crate::error::{FormatError, LabError, Result};
use crate::format::{decode_blob_file, encode_blob_file, read_file, write_file, Blob};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerHeader {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

/// Divergence-guard bookkeeping carried across resumes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuardState {
    pub initial_total: Option<f64>,
    pub consecutive_over: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    config: RunConfig,
    config_hash: String,
    epoch: usize,
    step: u64,
    guard: GuardState,
    optimizer: OptimizerHeader,
}

pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: u64,
    pub guard: GuardState,
    pub encoder: Encoder,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let store = self.encoder.store();
        let mut blobs: Vec<Blob> = store.iter().map(|p| Blob::from_tensor(format!("param.{}", p.name()), p.value())).collect();
        for p in store.iter().filter(|p| p.is_trainable()) {
            let (m, v) = self.optimizer.moments(p.id());
            let shape = p.value().shape().to_vec();
            blobs.push(Blob { name: format!("adam.m.{}", p.name()), shape: shape.clone(), data: m.to_vec() });
            blobs.push(Blob { name: format!("adam.v.{}", p.name()), shape, data: v.to_vec() });
        }
        let header = Header {
            kind: "checkpoint".into(),
            config: self.config.clone(),
            config_hash: self.config.hash(),
            epoch: self.epoch,
            step: self.step,
            guard: self.guard,
            optimizer: OptimizerHeader {
                lr: self.optimizer.lr,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: self.optimizer.eps,
                step: self.optimizer.step_count(),
            },
        };
        encode_blob_file(&header, &blobs)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Checkpoint, FormatError> {
        let (header, blobs): (Header, Vec<Blob>) = decode_blob_file(bytes)?;
        let bad = |m: String| FormatError::new(0, m);
        if header.kind != "checkpoint" {
            return Err(bad(format!("expected a checkpoint, found {}", header.kind)));
        }
        if header.config_hash != header.config.hash() {
            return Err(bad("config hash does not match the embedded config".into()));
        }
        header.config.validate().map_err(|e| bad(e.to_string()))?;
        let mut encoder =
            Encoder::build(header.config.encoder.clone(), header.config.train.model_seed).map_err(|e| bad(e.to_string()))?;
        let mut by_name: BTreeMap<String, Blob> = blobs.into_iter().map(|b| (b.name.clone(), b)).collect();
        let params: Vec<_> = encoder.store().iter().map(|p| (p.id(), p.name().to_string(), p.value().shape().to_vec(), p.is_trainable())).collect();
        let mut optimizer = Adam::new(encoder.store(), header.optimizer.lr);
        optimizer.beta1 = header.optimizer.beta1;
        optimizer.beta2 = header.optimizer.beta2;
        optimizer.eps = header.optimizer.eps;
        optimizer.set_step_count(header.optimizer.step);
        let mut take = |name: String, shape: &[usize]| -> std::result::Result<Vec<f64>, FormatError> {
            let b = by_name.remove(&name).ok_or_else(|| bad(format!("missing blob `{}`", name)))?;
            if b.shape != shape {
                return Err(bad(format!("blob `{}` has shape {:?}, expected {:?}", name, b.shape, shape)));
            }
            Ok(b.data)
        };
        for (id, name, shape, trainable) in params {
            let value = take(format!("param.{}", name), &shape)?;
            encoder.store_mut().set_value(id, &value).map_err(|e| bad(e.to_string()))?;
            if trainable {
                let m = take(format!("adam.m.{}", name), &shape)?;
                let v = take(format!("adam.v.{}", name), &shape)?;
                optimizer.restore_moments(id, &m, &v).map_err(|e| bad(e.to_string()))?;
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(bad(format!("unexpected blob `{}`", extra)));
        }
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            step: header.step,
            guard: header.guard,
            encoder,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&read_file(path)?).map_err(|e| LabError::format(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::resolve_value;

    #[test]
    fn round_trip_is_bit_exact() {
        let config = resolve_value(
            serde_json::json!({"dataset": {"image_size": 12}, "encoder": {"image_size": 12, "patch_size": 4, "embed_dim": 8, "depth": 1, "mlp_dim": 8, "feature_dim": 4}, "train": {"shuffle_grid": 2}}),
            None,
        )
        .unwrap();
        let mut encoder = Encoder::build(config.encoder.clone(), 3).unwrap();
        let id = encoder.trainable_parameters()[0];
        let n = encoder.store().get(id).value().len();
        encoder.store_mut().set_value(id, &vec![0.25; n]).unwrap();
        let mut optimizer = Adam::new(encoder.store(), 1e-3);
        optimizer.restore_moments(id, &vec![1e-7; n], &vec![3e-9; n]).unwrap();
        optimizer.set_step_count(7);
        let mut config = config;
        config.train.model_seed = 3;
        let ck = Checkpoint { config, epoch: 2, step: 22, guard: GuardState { initial_total: Some(1.5), consecutive_over: 1 }, encoder, optimizer };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.optimizer, ck.optimizer);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }
}
