//! Checkpoint container.
//!
//! ```text
//! "CALMCKPT" | version u32 | meta_len u64 | meta JSON (meta_len bytes)
//!            | one embedding-store record per tensor, f64 payloads
//! ```
//!
//! The first record is the frozen anchor base; the rest follow the order of
//! `meta.params`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::config::RunConfig;
use crate::error::{CalmError, Result};
use crate::model::CalmHead;
use crate::retrieval::RetrievalMetrics;
use crate::rng::{self, Stream};
use crate::store::{self, Dtype};
use crate::tensor::{ParamStore, Tensor};

pub const CKPT_MAGIC: &[u8; 8] = b"CALMCKPT";
pub const CKPT_VERSION: u32 = 1;

/// One evaluation in the metric history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    pub split: String,
    pub metrics: RetrievalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub step: usize,
    pub epoch: usize,
    pub history: Vec<EvalRecord>,
    pub params: Vec<ParamMeta>,
    pub init: String,
    pub labels: Vec<String>,
    pub template: String,
    pub frames_per_video: usize,
    pub data_checksum: String,
}

pub const INIT_DESCRIPTION: &str = "adapters identity, positional offsets zero, VAE weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with zero biases, seeded from the init stream";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub anchor_base: Tensor,
    pub params: Vec<Tensor>,
}

pub struct CheckpointState<'a> {
    pub config: &'a RunConfig,
    pub head: &'a CalmHead,
    pub store: &'a ParamStore,
    pub step: usize,
    pub epoch: usize,
    pub history: &'a [EvalRecord],
    pub frames_per_video: usize,
    pub data_checksum: &'a str,
}

pub fn encode_checkpoint(state: &CheckpointState<'_>) -> Result<Vec<u8>> {
    let params: Vec<ParamMeta> = state
        .store
        .iter()
        .map(|(name, t)| ParamMeta {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            trainable: t.requires_grad(),
        })
        .collect();
    let meta = CheckpointMeta {
        config: state.config.clone(),
        step: state.step,
        epoch: state.epoch,
        history: state.history.to_vec(),
        params,
        init: INIT_DESCRIPTION.into(),
        labels: state.head.labels.clone(),
        template: state.head.template.clone(),
        frames_per_video: state.frames_per_video,
        data_checksum: state.data_checksum.to_string(),
    };
    let meta_bytes = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.extend(store::encode_store(&state.head.anchor_base, Dtype::F64)?);
    for (_, t) in state.store.iter() {
        out.extend(store::encode_store(t, Dtype::F64)?);
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, state: &CheckpointState<'_>) -> Result<()> {
    store::write_atomic(path, &encode_checkpoint(state)?)
}

fn corrupt(message: impl Into<String>) -> CalmError {
    CalmError::format("checkpoint", message.into())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..8] != CKPT_MAGIC {
        return Err(corrupt("missing CALMCKPT header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let meta_end = usize::try_from(meta_len)
        .ok()
        .and_then(|l| l.checked_add(20))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("metadata length exceeds file"))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&bytes[20..meta_end]).map_err(|e| corrupt(format!("metadata: {e}")))?;

    let mut at = meta_end;
    let (anchor_base, used) = store::decode_store_prefix(&bytes[at..])?;
    at += used;
    let mut params = Vec::with_capacity(meta.params.len());
    for p in &meta.params {
        let (mut t, used) = store::decode_store_prefix(&bytes[at..])?;
        at += used;
        if t.shape() != p.shape.as_slice() {
            return Err(corrupt(format!(
                "{} has shape {:?}, metadata says {:?}",
                p.name,
                t.shape(),
                p.shape
            )));
        }
        t.set_requires_grad(p.trainable);
        params.push(t);
    }
    if at != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - at)));
    }
    Ok(Checkpoint {
        meta,
        anchor_base,
        params,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| CalmError::io(path, e))?;
    decode_checkpoint(&bytes)
}

impl Checkpoint {
    /// Rebuilds the head and its parameters.
    pub fn restore(&self) -> Result<(ParamStore, CalmHead)> {
        let anchors = AnchorSet::new(
            self.anchor_base.clone(),
            self.meta.labels.clone(),
            self.meta.template.clone(),
        )?;
        let mut init_rng = rng::stream(self.meta.config.seed, Stream::Init);
        let (mut store, head) = CalmHead::init(self.meta.config.model.clone(), &anchors, &mut init_rng)?;
        if store.len() != self.params.len() {
            return Err(corrupt(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (meta, tensor) in self.meta.params.iter().zip(&self.params) {
            let id = store
                .id_of(&meta.name)
                .ok_or_else(|| corrupt(format!("unknown parameter {}", meta.name)))?;
            let slot = store.get_mut(id);
            if slot.shape() != tensor.shape() {
                return Err(corrupt(format!("{} shape mismatch", meta.name)));
            }
            *slot = tensor.clone();
        }
        Ok((store, head))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use crate::trainer::{evaluate, prepare_corpus, train, LAST_CKPT};

    #[test]
    fn restored_head_scores_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(
            &path,
            r#"{"output_dir": "out", "synthetic": {"n_classes": 3, "samples_per_class": 6, "dim": 5,
                "frames": 2, "imbalance_keep": 2, "n_anchors": 3},
                "model": {"latent_dim": 3, "hidden": 5}, "optim": {"batch_size": 4, "epochs": 2, "lr": 0.01}}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        let corpus = prepare_corpus(&cfg).unwrap();
        let run = cfg.output_dir.join("run");
        let out = train(&cfg, &corpus, Some(&run), &[]).unwrap();

        let ckpt = load_checkpoint(&run.join(LAST_CKPT)).unwrap();
        assert_eq!(ckpt.meta.step, out.steps);
        assert_eq!(ckpt.meta.history, out.history);
        let (store, head) = ckpt.restore().unwrap();
        for ((na, a), (nb, b)) in store.iter().zip(out.store.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(
            evaluate(&head, &store, &corpus, Split::Test).unwrap(),
            evaluate(&out.head, &out.store, &corpus, Split::Test).unwrap()
        );
    }

    #[test]
    fn corrupt_files_rejected() {
        assert!(decode_checkpoint(b"CALMCKPT").is_err());
        let mut bytes = CKPT_MAGIC.to_vec();
        bytes.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode_checkpoint(&bytes), Err(CalmError::Format { .. })));
    }
}
