//! Training objective: VAE terms, contrastive task loss, and the
//! discriminative alignment losses used for ablation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorDistribution;
use crate::cvae::PROB_FLOOR;
use crate::error::{CalmError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How the anchor distributions are tied together.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// VAE reconstruction plus weighted KL.
    #[default]
    Calm,
    /// `KL(S_p || V_p)`.
    KlDiv,
    /// `-sum S_p log V_p`.
    CrossEntropy,
    /// Mean squared difference between `V_p` and `S_p`.
    Mse,
    /// Task loss only; anchors unused.
    Baseline,
}

impl LossMode {
    pub const ALL: [LossMode; 5] = [
        LossMode::Baseline,
        LossMode::KlDiv,
        LossMode::CrossEntropy,
        LossMode::Mse,
        LossMode::Calm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Calm => "calm",
            LossMode::KlDiv => "kl_div",
            LossMode::CrossEntropy => "cross_entropy",
            LossMode::Mse => "mse",
            LossMode::Baseline => "baseline",
        }
    }

    pub fn uses_anchors(self) -> bool {
        self != LossMode::Baseline
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = CalmError;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| CalmError::config("loss.mode", format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight on the KL term.
    pub alpha: f64,
    pub mode: LossMode,
    /// Multiplier on cosine logits in the contrastive task loss.
    pub task_temperature: f64,
    /// Treat `S_p` as a fixed label in the alignment term.
    pub block_target: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            mode: LossMode::Calm,
            task_temperature: 1.0 / 0.07,
            block_target: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(CalmError::config("loss.alpha", "must be finite and >= 0"));
        }
        if !(self.task_temperature > 0.0) || !self.task_temperature.is_finite() {
            return Err(CalmError::config("loss.task_temperature", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Symmetric InfoNCE over a batch of paired features; row `i` of each is a
/// positive pair, every other row a negative.
pub fn task_loss_var<'t>(video: &Var<'t>, text: &Var<'t>, temperature: f64) -> Result<Var<'t>> {
    let b = video.value().rows();
    if b == 0 || text.value().rows() == 0 {
        return Err(CalmError::EmptyInput("task loss needs a non-empty batch"));
    }
    if text.value().rows() != b {
        return Err(CalmError::Dimension {
            op: "task_loss",
            lhs: video.shape(),
            rhs: text.shape(),
        });
    }
    let tape = video.tape();
    let eye = identity(b);
    let logits = text.cosine_rows(video)?.scale(temperature);
    let eye = tape.constant(eye);
    let t2v = logits.log_softmax_rows()?.mul(&eye)?.sum();
    let v2t = logits.transpose()?.log_softmax_rows()?.mul(&eye)?.sum();
    Ok(t2v.add(&v2t)?.scale(-0.5 / b as f64))
}

fn identity(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
    }
    Tensor::matrix(n, n, data).expect("square")
}

/// Batch-mean discriminative alignment between `B × K` distributions.
/// `Calm` and `Baseline` are handled by the caller.
pub fn discriminative_loss_var<'t>(
    vp: &Var<'t>,
    sp: &Var<'t>,
    mode: LossMode,
    block_target: bool,
) -> Result<Var<'t>> {
    let tape = vp.tape();
    let (b, k) = vp.value().dims2()?;
    let sp = if block_target { sp.detach() } else { *sp };
    let rows = b.max(1) as f64;
    match mode {
        LossMode::KlDiv => {
            let diff = sp.log_floor(PROB_FLOOR).sub(&vp.log_floor(PROB_FLOOR))?;
            Ok(sp.mul(&diff)?.sum().scale(1.0 / rows))
        }
        LossMode::CrossEntropy => Ok(sp.mul(&vp.log_floor(PROB_FLOOR))?.sum().scale(-1.0 / rows)),
        LossMode::Mse => Ok(vp.sub(&sp)?.square()?.sum().scale(1.0 / (rows * k as f64))),
        LossMode::Baseline => Ok(tape.scalar(0.0)),
        LossMode::Calm => Err(CalmError::Contract(
            "calm alignment comes from the VAE, not a discriminative loss".into(),
        )),
    }
}

/// Values of the alignment losses for one pair of distributions.
pub fn alignment_loss(
    vp: &AnchorDistribution,
    sp: &AnchorDistribution,
    cvae_out: Option<(f64, f64)>,
    mode: LossMode,
    alpha: f64,
) -> Result<f64> {
    if vp.len() != sp.len() {
        return Err(CalmError::Dimension {
            op: "alignment_loss",
            lhs: vec![vp.len()],
            rhs: vec![sp.len()],
        });
    }
    if mode == LossMode::Calm {
        let (rec, kl) = cvae_out.ok_or_else(|| {
            CalmError::Contract("calm mode requires the VAE output".into())
        })?;
        return Ok(rec + alpha * kl);
    }
    let tape = Tape::new();
    let v = tape.constant(Tensor::matrix(1, vp.len(), vp.probs().to_vec())?);
    let s = tape.constant(Tensor::matrix(1, sp.len(), sp.probs().to_vec())?);
    Ok(discriminative_loss_var(&v, &s, mode, true)?.item())
}

/// Contrastive task loss on plain tensors.
pub fn task_loss(video: &Tensor, text: &Tensor, temperature: f64) -> Result<f64> {
    let tape = Tape::new();
    let v = tape.constant(video.clone());
    let t = tape.constant(text.clone());
    Ok(task_loss_var(&v, &t, temperature)?.item())
}

/// Per-term values of one evaluation of the total loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub task: f64,
    pub rec: f64,
    /// Unweighted KL; the objective adds `alpha * kl`.
    pub kl: f64,
    pub weighted_kl: f64,
    pub discriminative: f64,
}

impl LossReport {
    /// Additive components; they sum to `total`.
    pub fn components(&self) -> [f64; 4] {
        [self.task, self.rec, self.weighted_kl, self.discriminative]
    }
}
