//! Checkpoints: a JSON manifest next to a little-endian f64 payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LabelStats;
use crate::error::{MedcError, Result};
use crate::model::MedcModel;
use crate::sampling::ExpertKind;
use crate::tensor::Tensor;
use crate::training::{AdamState, LossRecord, TrainConfig, Trainer};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertMeta {
    pub kind: ExpertKind,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload in f64 values.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub version: u32,
    pub seed: u64,
    pub epoch: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub train: TrainConfig,
    pub experts: Vec<ExpertMeta>,
    pub label_stats: LabelStats,
    pub adam_t: u64,
    pub history: Vec<LossRecord>,
    pub payload: String,
    pub payload_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub values: Vec<f64>,
}

pub(crate) fn from_trainer(t: &Trainer) -> Checkpoint {
    let mut tensors = Vec::new();
    let mut values = Vec::new();
    let mut push = |name: String, tensor: &Tensor| {
        tensors.push(TensorEntry {
            name,
            shape: tensor.shape().to_vec(),
            offset: values.len(),
            len: tensor.len(),
        });
        values.extend_from_slice(tensor.data());
    };
    for p in t.model.params.iter() {
        push(p.name.clone(), &p.tensor);
    }
    for (p, m) in t.model.params.iter().zip(&t.adam.m) {
        push(format!("adam.m.{}", p.name), m);
    }
    for (p, v) in t.model.params.iter().zip(&t.adam.v) {
        push(format!("adam.v.{}", p.name), v);
    }
    Checkpoint {
        meta: CheckpointMeta {
            version: CHECKPOINT_VERSION,
            seed: t.seed,
            epoch: t.epoch,
            num_classes: t.model.num_classes,
            input_dim: t.model.input_dim,
            train: t.cfg.clone(),
            experts: t
                .model
                .experts
                .iter()
                .map(|h| ExpertMeta {
                    kind: h.kind,
                    gamma: h.gamma.clone(),
                })
                .collect(),
            label_stats: t.stats.clone(),
            adam_t: t.adam.t,
            history: t.history.clone(),
            payload: String::new(),
            payload_sha256: String::new(),
            tensors,
        },
        values,
    }
}

fn payload_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    /// Writes `path` (JSON) and a `.bin` payload beside it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bin = payload_path(path);
        let bytes = payload_bytes(&self.values);
        let mut meta = self.meta.clone();
        meta.payload = bin
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        meta.payload_sha256 = sha256_hex(&bytes);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| MedcError::io(dir, e))?;
        }
        fs::write(&bin, &bytes).map_err(|e| MedcError::io(&bin, e))?;
        let json = serde_json::to_string_pretty(&meta)?;
        fs::write(path, json).map_err(|e| MedcError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MedcError::io(path, e))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| MedcError::Checkpoint(format!("{}: {e}", path.display())))?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(MedcError::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                meta.version
            )));
        }
        let bin = path.with_file_name(&meta.payload);
        let bytes = fs::read(&bin).map_err(|e| MedcError::io(&bin, e))?;
        if sha256_hex(&bytes) != meta.payload_sha256 {
            return Err(MedcError::Checkpoint(format!("payload {} does not match its digest", bin.display())));
        }
        if bytes.len() % 8 != 0 {
            return Err(MedcError::Checkpoint(format!("payload length {} is not a multiple of 8", bytes.len())));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        for e in &meta.tensors {
            if e.offset + e.len > values.len() || crate::tensor::numel(&e.shape) != e.len {
                return Err(MedcError::Checkpoint(format!("tensor {} lies outside the payload", e.name)));
            }
        }
        Ok(Self { meta, values })
    }

    fn tensor(&self, name: &str) -> Option<(&TensorEntry, &[f64])> {
        let e = self.meta.tensors.iter().find(|e| e.name == name)?;
        Some((e, &self.values[e.offset..e.offset + e.len]))
    }

    fn fill(&self, name: &str, target: &mut Tensor) -> Result<()> {
        let (e, vals) = self
            .tensor(name)
            .ok_or_else(|| MedcError::Checkpoint(format!("missing tensor {name}")))?;
        if e.shape != target.shape() {
            return Err(MedcError::Checkpoint(format!(
                "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                e.shape,
                target.shape()
            )));
        }
        target.data_mut().copy_from_slice(vals);
        Ok(())
    }

    /// Rebuilds the model and optimizer state.
    pub fn restore(&self) -> Result<(MedcModel, AdamState)> {
        let meta = &self.meta;
        let experts: Vec<(ExpertKind, Vec<f64>)> = meta.experts.iter().map(|e| (e.kind, e.gamma.clone())).collect();
        let mut model = MedcModel::new(meta.train.model.clone(), meta.input_dim, meta.num_classes, &experts, meta.seed)?;
        let expected = model.params.len() * 3;
        if meta.tensors.len() != expected {
            return Err(MedcError::Checkpoint(format!(
                "checkpoint holds {} tensors, model needs {expected}",
                meta.tensors.len()
            )));
        }
        let mut adam = AdamState::new(&model.params);
        for (i, p) in model.params.iter_mut().enumerate() {
            self.fill(&p.name, &mut p.tensor)?;
            self.fill(&format!("adam.m.{}", p.name), &mut adam.m[i])?;
            self.fill(&format!("adam.v.{}", p.name), &mut adam.v[i])?;
        }
        adam.t = meta.adam_t;
        Ok((model, adam))
    }

    pub fn model(&self) -> Result<MedcModel> {
        Ok(self.restore()?.0)
    }
}

pub fn load_model(path: &Path) -> Result<(MedcModel, CheckpointMeta)> {
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.model()?;
    Ok((model, ckpt.meta))
}
