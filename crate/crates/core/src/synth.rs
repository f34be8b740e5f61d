//! Synthetic paired video/text embeddings with a tunable information
//! imbalance between the modalities.
//!
//! Every class has a centre `mu_c ~ N(0, I_D)`. Sample `i` of class `c` has
//! content `x_i = mu_c + s * n_i`, where `s` is `instance_spread`. Its video
//! is `T` frames of `x_i + N(0, sigma_v^2)`; its caption keeps only the first
//! `m` axes of `x_i` and adds `N(0, sigma_s^2)` on every axis. With small `m`
//! many videos share nearly the same caption signal.
//!
//! Anchors are jittered class centres, so a caption's anchor distribution
//! says something about its class, as a label prompt would.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchors::DEFAULT_TEMPLATE;
use crate::corpus::{Manifest, SplitIds};
use crate::error::{CalmError, Result};
use crate::rng::{self, Stream};
use crate::store;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub frames: usize,
    pub video_noise: f64,
    pub text_noise: f64,
    /// Number of leading axes of the sample content the caption retains.
    pub imbalance_keep: usize,
    /// Spread of per-sample content around its class centre.
    pub instance_spread: f64,
    pub n_anchors: usize,
    /// Anchor `k` is the centre of class `k mod n_classes` plus this much
    /// Gaussian jitter, so anchors carry class semantics the way label
    /// prompts do.
    pub anchor_jitter: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            samples_per_class: 32,
            dim: 16,
            frames: 4,
            video_noise: 0.2,
            text_noise: 0.2,
            imbalance_keep: 4,
            instance_spread: 1.0,
            n_anchors: 8,
            anchor_jitter: 0.25,
            val_fraction: 0.15,
            test_fraction: 0.15,
        }
    }
}

impl SyntheticConfig {
    /// Low-noise, no-imbalance variant.
    pub fn easy() -> Self {
        let d = Self::default();
        Self {
            video_noise: 0.05,
            text_noise: 0.05,
            imbalance_keep: d.dim,
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("synthetic.n_classes", self.n_classes),
            ("synthetic.samples_per_class", self.samples_per_class),
            ("synthetic.dim", self.dim),
            ("synthetic.frames", self.frames),
            ("synthetic.n_anchors", self.n_anchors),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(CalmError::config(key, "must be >= 1"));
            }
        }
        if self.imbalance_keep == 0 || self.imbalance_keep > self.dim {
            return Err(CalmError::config(
                "synthetic.imbalance_keep",
                format!(
                    "imbalance_keep must lie in 1..={} (dim), got {}",
                    self.dim, self.imbalance_keep
                ),
            ));
        }
        for (key, v) in [
            ("synthetic.video_noise", self.video_noise),
            ("synthetic.text_noise", self.text_noise),
            ("synthetic.instance_spread", self.instance_spread),
            ("synthetic.anchor_jitter", self.anchor_jitter),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(CalmError::config(key, "must be finite and >= 0"));
            }
        }
        for (key, v) in [
            ("synthetic.val_fraction", self.val_fraction),
            ("synthetic.test_fraction", self.test_fraction),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(CalmError::config(key, "must lie in [0, 1)"));
            }
        }
        if self.val_fraction + self.test_fraction >= 1.0 {
            return Err(CalmError::config(
                "synthetic.val_fraction",
                "val and test fractions must leave training samples",
            ));
        }
        Ok(())
    }
}

/// In-memory synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub ids: Vec<String>,
    pub classes: Vec<usize>,
    pub frames: Tensor,
    pub text: Tensor,
    pub anchors: Tensor,
    pub labels: Vec<String>,
    pub split: SplitIds,
}

/// Generates the corpus for `(cfg, seed)`; identical inputs give identical
/// values.
pub fn synthesize(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticData> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut data_rng = rng::stream(seed, Stream::Data);
    let centres: Vec<Vec<f64>> = (0..cfg.n_classes).map(|_| rng::normals(&mut data_rng, d)).collect();

    let n = cfg.n_classes * cfg.samples_per_class;
    let mut ids = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    let mut frames = Vec::with_capacity(n * cfg.frames * d);
    let mut text = Vec::with_capacity(n * d);
    for (c, centre) in centres.iter().enumerate() {
        for s in 0..cfg.samples_per_class {
            ids.push(format!("c{c:03}_s{s:04}"));
            classes.push(c);
            let content: Vec<f64> = centre
                .iter()
                .zip(rng::normals(&mut data_rng, d))
                .map(|(m, e)| m + cfg.instance_spread * e)
                .collect();
            for _ in 0..cfg.frames {
                let noise = rng::normals(&mut data_rng, d);
                frames.extend(content.iter().zip(noise).map(|(x, e)| x + cfg.video_noise * e));
            }
            let noise = rng::normals(&mut data_rng, d);
            text.extend(content.iter().zip(noise).enumerate().map(|(axis, (x, e))| {
                let kept = if axis < cfg.imbalance_keep { *x } else { 0.0 };
                kept + cfg.text_noise * e
            }));
        }
    }

    let mut split = SplitIds::default();
    let mut split_rng = rng::stream(seed, Stream::Shuffle);
    let spc = cfg.samples_per_class;
    let n_val = (spc as f64 * cfg.val_fraction).round() as usize;
    let n_test = (spc as f64 * cfg.test_fraction).round() as usize;
    let n_val = n_val.min(spc.saturating_sub(1));
    let n_test = n_test.min(spc - 1 - n_val);
    for c in 0..cfg.n_classes {
        let perm = rng::permutation(&mut split_rng, spc);
        for (rank, s) in perm.into_iter().enumerate() {
            let id = ids[c * spc + s].clone();
            if rank < n_val {
                split.val.push(id);
            } else if rank < n_val + n_test {
                split.test.push(id);
            } else {
                split.train.push(id);
            }
        }
    }
    for list in [&mut split.train, &mut split.val, &mut split.test] {
        list.sort();
    }

    let mut anchor_rng = rng::stream(seed, Stream::Anchors);
    let mut anchor_rows = Vec::with_capacity(cfg.n_anchors * d);
    for k in 0..cfg.n_anchors {
        let jitter = rng::normals(&mut anchor_rng, d);
        let centre = &centres[k % cfg.n_classes];
        anchor_rows.extend(centre.iter().zip(jitter).map(|(m, e)| m + cfg.anchor_jitter * e));
    }
    let anchors = Tensor::matrix(cfg.n_anchors, d, anchor_rows)?;
    let labels = (0..cfg.n_anchors).map(|k| format!("concept {k:03}")).collect();

    Ok(SyntheticData {
        ids,
        classes,
        frames: Tensor::matrix(n * cfg.frames, d, frames)?,
        text: Tensor::matrix(n, d, text)?,
        anchors,
        labels,
        split,
    })
}

pub const VIDEO_FILE: &str = "video.bin";
pub const TEXT_FILE: &str = "text.bin";
pub const ANCHOR_FILE: &str = "anchors.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Files written by [`generate_synthetic`] with their SHA-256 digests.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SyntheticOutput {
    pub manifest: PathBuf,
    pub checksums: Vec<(String, String)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes stores and manifest for `(cfg, seed)` into `out_dir`, which must
/// exist.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64, out_dir: &Path) -> Result<SyntheticOutput> {
    let data = synthesize(cfg, seed)?;
    let manifest = Manifest {
        ids: data.ids.clone(),
        video_store: VIDEO_FILE.into(),
        text_store: TEXT_FILE.into(),
        frames_per_video: Some(cfg.frames),
        anchor_store: Some(ANCHOR_FILE.into()),
        labels: Some(data.labels.clone()),
        template: Some(DEFAULT_TEMPLATE.into()),
        split: data.split.clone(),
    };
    let files = [
        (VIDEO_FILE, store::encode_store(&data.frames, store::Dtype::F32)?),
        (TEXT_FILE, store::encode_store(&data.text, store::Dtype::F32)?),
        (ANCHOR_FILE, store::encode_store(&data.anchors, store::Dtype::F32)?),
        (MANIFEST_FILE, manifest.to_json().into_bytes()),
    ];
    let mut checksums = Vec::with_capacity(files.len());
    for (name, bytes) in &files {
        store::write_atomic(&out_dir.join(name), bytes)?;
        checksums.push((name.to_string(), sha256_hex(bytes)));
    }
    Ok(SyntheticOutput {
        manifest: out_dir.join(MANIFEST_FILE),
        checksums,
    })
}

/// True when `dir` is missing or empty.
pub fn dir_is_empty(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_none()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(true),
        Err(e) => Err(CalmError::io(dir, e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn imbalance_keep_bounded_by_dim() {
        let cfg = SyntheticConfig {
            imbalance_keep: 17,
            ..SyntheticConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("imbalance_keep"));
    }

    #[test]
    fn noiseless_text_equals_frame_mean() {
        let cfg = SyntheticConfig {
            video_noise: 0.0,
            text_noise: 0.0,
            instance_spread: 0.0,
            imbalance_keep: 16,
            ..SyntheticConfig::default()
        };
        let data = synthesize(&cfg, 3).unwrap();
        for i in 0..data.ids.len() {
            let frames: Vec<&[f64]> = (0..cfg.frames).map(|t| data.frames.row(i * cfg.frames + t)).collect();
            for (axis, &v) in data.text.row(i).iter().enumerate() {
                let mean = frames.iter().map(|f| f[axis]).sum::<f64>() / cfg.frames as f64;
                assert!((mean - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn caption_keeps_only_leading_axes() {
        let cfg = SyntheticConfig {
            text_noise: 0.0,
            imbalance_keep: 3,
            ..SyntheticConfig::default()
        };
        let data = synthesize(&cfg, 0).unwrap();
        for i in 0..data.ids.len() {
            assert!(data.text.row(i)[3..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn splits_partition_ids() {
        let data = synthesize(&SyntheticConfig::default(), 0).unwrap();
        let s = &data.split;
        assert_eq!(s.val.len(), 8 * 5);
        assert_eq!(s.test.len(), 8 * 5);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), data.ids.len());
        let mut all: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), data.ids.len());
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SyntheticConfig::default();
        assert_eq!(synthesize(&cfg, 5).unwrap(), synthesize(&cfg, 5).unwrap());
        assert_ne!(synthesize(&cfg, 5).unwrap().text, synthesize(&cfg, 6).unwrap().text);
    }
}
