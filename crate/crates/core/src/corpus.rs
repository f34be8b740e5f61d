//! JSON manifest tying embedding stores together, and the loaded corpus.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchors::{AnchorSet, DEFAULT_TEMPLATE};
use crate::error::{CalmError, Result};
use crate::model::Batch;
use crate::store;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Store paths are relative to the manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub ids: Vec<String>,
    pub video_store: PathBuf,
    pub text_store: PathBuf,
    /// When present the video store holds `ids.len() * T` frame rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames_per_video: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_store: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default)]
    pub split: SplitIds,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CalmError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CalmError::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        store::write_atomic(path.as_ref(), self.to_json().as_bytes())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = CalmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CalmError::config("split", format!("unknown split {other:?}"))),
        }
    }
}

/// Paired embeddings loaded from a manifest and cross-validated.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub ids: Vec<String>,
    /// `(N·T) × D`.
    pub frames: Tensor,
    /// `N × D`.
    pub text: Tensor,
    pub frames_per_video: usize,
    pub anchors: Option<AnchorSet>,
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
    /// SHA-256 over the raw bytes of every store, in a fixed order.
    pub checksum: String,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CalmError::io(path, e))
}

fn mismatch(message: String) -> CalmError {
    CalmError::format("manifest", message)
}

impl Corpus {
    /// Loads the manifest and its stores. `anchor_override` replaces the
    /// manifest's anchor store when given.
    pub fn load(manifest_path: impl AsRef<Path>, anchor_override: Option<&Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = Manifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut hasher = Sha256::new();

        let video_bytes = read_bytes(&resolve(base, &manifest.video_store))?;
        let text_bytes = read_bytes(&resolve(base, &manifest.text_store))?;
        hasher.update(&video_bytes);
        hasher.update(&text_bytes);
        let frames = store::decode_store(&video_bytes)?;
        let text = store::decode_store(&text_bytes)?;

        let n = manifest.ids.len();
        let t = manifest.frames_per_video.unwrap_or(1);
        if t == 0 {
            return Err(mismatch("frames_per_video must be >= 1".into()));
        }
        if text.rows() != n {
            return Err(mismatch(format!("text store has {} rows for {n} ids", text.rows())));
        }
        if frames.rows() != n * t {
            return Err(mismatch(format!(
                "video store has {} rows, expected {n} ids x {t} frames",
                frames.rows()
            )));
        }
        if frames.cols() != text.cols() {
            return Err(mismatch(format!(
                "video dim {} differs from text dim {}",
                frames.cols(),
                text.cols()
            )));
        }

        let mut index = HashMap::with_capacity(n);
        for (i, id) in manifest.ids.iter().enumerate() {
            if index.insert(id.as_str(), i).is_some() {
                return Err(mismatch(format!("duplicate id {id:?}")));
            }
        }
        let lookup = |ids: &[String], name: &str| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| {
                    index
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| mismatch(format!("{name} split references unknown id {id:?}")))
                })
                .collect()
        };
        let train = lookup(&manifest.split.train, "train")?;
        let val = lookup(&manifest.split.val, "val")?;
        let test = lookup(&manifest.split.test, "test")?;
        let mut seen = HashSet::new();
        for &i in train.iter().chain(&val).chain(&test) {
            if !seen.insert(i) {
                return Err(mismatch(format!("id {:?} appears in more than one split", manifest.ids[i])));
            }
        }

        let anchor_path = anchor_override
            .map(Path::to_path_buf)
            .or_else(|| manifest.anchor_store.as_ref().map(|p| resolve(base, p)));
        let anchors = match anchor_path {
            Some(p) => {
                let bytes = read_bytes(&p)?;
                hasher.update(&bytes);
                let base_emb = store::decode_store(&bytes)?;
                if base_emb.cols() != text.cols() {
                    return Err(mismatch(format!(
                        "anchor dim {} differs from embedding dim {}",
                        base_emb.cols(),
                        text.cols()
                    )));
                }
                let labels = match &manifest.labels {
                    Some(l) if l.len() == base_emb.rows() => l.clone(),
                    Some(l) => {
                        return Err(mismatch(format!(
                            "{} labels for {} anchor rows",
                            l.len(),
                            base_emb.rows()
                        )))
                    }
                    None => (0..base_emb.rows()).map(|i| format!("anchor_{i}")).collect(),
                };
                let template = manifest.template.clone().unwrap_or_else(|| DEFAULT_TEMPLATE.into());
                Some(AnchorSet::new(base_emb, labels, template)?)
            }
            None => None,
        };

        Ok(Self {
            ids: manifest.ids,
            frames,
            text,
            frames_per_video: t,
            anchors,
            train,
            val,
            test,
            checksum: hex::encode(hasher.finalize()),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.text.cols()
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Gathers samples `indices` into a batch, in order.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let t = self.frames_per_video;
        let frame_rows: Vec<usize> = indices.iter().flat_map(|&i| (i * t)..(i * t + t)).collect();
        Batch::new(
            self.frames.select_rows(&frame_rows)?,
            self.text.select_rows(indices)?,
            t,
        )
    }
}
