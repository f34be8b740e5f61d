//! Class anchors and the per-modality probability distributions over them.
//!
//! A video is summarized by the mean of its frame features, a caption by its
//! sentence-level feature. Each is compared to every anchor by cosine
//! similarity and the temperature-scaled similarities are pushed through a
//! softmax.

use serde::{Deserialize, Serialize};

use crate::error::{CalmError, Result};
use crate::tape::{Tape, Var, MIN_NORM};
use crate::tensor::Tensor;

pub const DEFAULT_TEMPLATE: &str = "The content of {label}";

/// Frozen anchor embeddings plus their learnable per-anchor offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    base: Tensor,
    positional: Tensor,
    labels: Vec<String>,
    template: String,
}

impl AnchorSet {
    /// Anchors with zero positional offsets.
    pub fn new(base: Tensor, labels: Vec<String>, template: impl Into<String>) -> Result<Self> {
        let (k, d) = base.dims2()?;
        let positional = Tensor::zeros(&[k, d]).with_grad();
        Self::with_positional(base, positional, labels, template)
    }

    pub fn with_positional(
        base: Tensor,
        positional: Tensor,
        labels: Vec<String>,
        template: impl Into<String>,
    ) -> Result<Self> {
        let (k, _) = base.dims2()?;
        if base.shape().len() != 2 || k == 0 {
            return Err(CalmError::EmptyInput("anchor set needs at least one anchor"));
        }
        if positional.shape() != base.shape() {
            return Err(CalmError::Dimension {
                op: "anchor positional",
                lhs: base.shape().to_vec(),
                rhs: positional.shape().to_vec(),
            });
        }
        if labels.len() != k {
            return Err(CalmError::Contract(format!(
                "{} labels for {k} anchors",
                labels.len()
            )));
        }
        let mut base = base;
        base.set_requires_grad(false);
        Ok(Self {
            base,
            positional,
            labels,
            template: template.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.base.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.base.cols()
    }

    pub fn base(&self) -> &Tensor {
        &self.base
    }

    pub fn positional(&self) -> &Tensor {
        &self.positional
    }

    pub fn positional_mut(&mut self) -> &mut Tensor {
        &mut self.positional
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    /// Effective anchors: `base + positional`.
    pub fn effective(&self) -> Tensor {
        let data = self
            .base
            .data()
            .iter()
            .zip(self.positional.data())
            .map(|(b, p)| b + p)
            .collect();
        Tensor::new(self.base.shape().to_vec(), data).expect("same shape")
    }

    /// Reorders anchors (and labels) so that new row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let labels = perm.iter().map(|&i| self.labels[i].clone()).collect();
        let mut positional = self.positional.select_rows(perm)?;
        positional.set_requires_grad(self.positional.requires_grad());
        Self::with_positional(self.base.select_rows(perm)?, positional, labels, self.template.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Text,
}

/// Probability vector over the `K` anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorDistribution {
    probs: Tensor,
    modality: Modality,
}

impl AnchorDistribution {
    /// Validates non-negativity and unit mass (within 1e-9).
    pub fn new(probs: Vec<f64>, modality: Modality) -> Result<Self> {
        if probs.is_empty() {
            return Err(CalmError::EmptyInput("anchor distribution"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CalmError::NumericDomain(
                "distribution entries must be finite and non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CalmError::NumericDomain(format!(
                "distribution sums to {total}"
            )));
        }
        Ok(Self {
            probs: Tensor::vector(probs),
            modality,
        })
    }

    pub fn probs(&self) -> &[f64] {
        self.probs.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.probs.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entropy(&self) -> f64 {
        entropy(self.probs())
    }
}

/// Shannon entropy in nats; zero entries contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Softmax temperature applied to anchor similarities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    tau: f64,
    learnable: bool,
}

impl Temperature {
    pub fn new(tau: f64, learnable: bool) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(CalmError::Contract(format!(
                "temperature must be positive and finite, got {tau}"
            )));
        }
        Ok(Self { tau, learnable })
    }

    pub fn fixed(tau: f64) -> Result<Self> {
        Self::new(tau, false)
    }

    pub fn value(&self) -> f64 {
        self.tau
    }

    pub fn learnable(&self) -> bool {
        self.learnable
    }
}

/// Per-frame features of one video and their fused summary.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    frames: Tensor,
    fused: Tensor,
}

impl VideoFeatures {
    pub fn new(frames: Tensor) -> Result<Self> {
        let fused = fuse_frames(&frames)?;
        Ok(Self { frames, fused })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn fused(&self) -> &Tensor {
        &self.fused
    }
}

/// Sentence-level feature of one caption.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    cls: Tensor,
}

impl TextFeatures {
    pub fn new(cls: Vec<f64>) -> Result<Self> {
        if cls.is_empty() {
            return Err(CalmError::EmptyInput("text feature"));
        }
        if cls.iter().any(|v| !v.is_finite()) {
            return Err(CalmError::NumericDomain("text feature is not finite".into()));
        }
        let norm = cls.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < MIN_NORM {
            return Err(CalmError::DegenerateVector {
                op: "text feature",
                row: 0,
                norm,
            });
        }
        Ok(Self {
            cls: Tensor::vector(cls),
        })
    }

    pub fn cls(&self) -> &Tensor {
        &self.cls
    }
}

/// Mean of the frame rows, as a length-`D` vector.
pub fn fuse_frames(frames: &Tensor) -> Result<Tensor> {
    let (t, d) = frames.dims2()?;
    if t == 0 {
        return Err(CalmError::EmptyInput("fuse_frames needs at least one frame"));
    }
    let tape = Tape::new();
    let fused = tape.constant(frames.clone()).mean_rows()?.value();
    Tensor::new(vec![d], fused.into_data())
}

/// `softmax(tau * cos(features, anchors))` row-wise, on the tape.
pub fn anchor_distribution_var<'t>(
    features: &Var<'t>,
    anchors: &Var<'t>,
    tau: &Var<'t>,
) -> Result<Var<'t>> {
    let tau_value = tau.item();
    if !(tau_value > 0.0) {
        return Err(CalmError::NumericDomain(format!(
            "temperature must stay positive, got {tau_value}"
        )));
    }
    features.cosine_rows(anchors)?.scale_by(tau)?.softmax_rows()
}

fn distribution(feature: &Tensor, anchors: &AnchorSet, t: &Temperature, modality: Modality) -> Result<AnchorDistribution> {
    if feature.cols() != anchors.dim() {
        return Err(CalmError::Dimension {
            op: "anchor distribution",
            lhs: feature.shape().to_vec(),
            rhs: anchors.base().shape().to_vec(),
        });
    }
    let tape = Tape::new();
    let f = tape.constant(feature.clone());
    let p = tape.constant(anchors.effective());
    let tau = tape.scalar(t.value());
    let probs = anchor_distribution_var(&f, &p, &tau)?.value().into_data();
    AnchorDistribution::new(probs, modality)
}

/// Inter-modal distribution of a video over the anchors.
pub fn video_anchor_distribution(
    video: &VideoFeatures,
    anchors: &AnchorSet,
    t: &Temperature,
) -> Result<AnchorDistribution> {
    distribution(video.fused(), anchors, t, Modality::Video)
}

/// Intra-modal distribution of a caption over the anchors.
pub fn text_anchor_distribution(
    text: &TextFeatures,
    anchors: &AnchorSet,
    t: &Temperature,
) -> Result<AnchorDistribution> {
    distribution(text.cls(), anchors, t, Modality::Text)
}
