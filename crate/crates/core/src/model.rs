//! The full alignment head: feature adapters, anchors, VAE, and the total
//! loss over a batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{anchor_distribution_var, AnchorSet, Temperature};
use crate::cvae::{cvae_forward_var, Activation, CvaeDims, CvaeNoise, CvaeParams};
use crate::error::{CalmError, Result};
use crate::objective::{discriminative_loss_var, task_loss_var, LossConfig, LossMode, LossReport};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Latent size of the VAE.
    pub latent_dim: usize,
    /// Hidden width of the VAE encoder and decoder.
    pub hidden: usize,
    /// Anchor softmax temperature.
    pub tau: f64,
    pub learn_tau: bool,
    pub dropout: f64,
    pub activation: Activation,
    /// Trainable affine maps applied to video and text features before
    /// anything else; they stand in for fine-tuning the upstream encoders.
    pub adapters: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 256,
            hidden: 128,
            tau: 5.0,
            learn_tau: false,
            dropout: 0.1,
            activation: Activation::Tanh,
            adapters: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(CalmError::config("model.latent_dim", "must be >= 1"));
        }
        if self.hidden == 0 {
            return Err(CalmError::config("model.hidden", "must be >= 1"));
        }
        Temperature::new(self.tau, self.learn_tau)
            .map_err(|e| CalmError::config("model.tau", e.to_string()))?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CalmError::config("model.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// A batch of paired samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `(B·T) × D`, frames of one video in consecutive rows.
    pub frames: Tensor,
    /// `B × D`.
    pub text: Tensor,
    pub frames_per_video: usize,
}

impl Batch {
    pub fn new(frames: Tensor, text: Tensor, frames_per_video: usize) -> Result<Self> {
        let (fr, fd) = frames.dims2()?;
        let (tr, td) = text.dims2()?;
        if frames_per_video == 0 {
            return Err(CalmError::EmptyInput("frames_per_video must be >= 1"));
        }
        if fd != td || fr != tr * frames_per_video {
            return Err(CalmError::Dimension {
                op: "batch",
                lhs: frames.shape().to_vec(),
                rhs: text.shape().to_vec(),
            });
        }
        Ok(Self {
            frames,
            text,
            frames_per_video,
        })
    }

    pub fn len(&self) -> usize {
        self.text.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adapter {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Parameter handles and frozen state of the head.
#[derive(Clone, Debug, PartialEq)]
pub struct CalmHead {
    pub config: ModelConfig,
    pub anchor_base: Tensor,
    pub labels: Vec<String>,
    pub template: String,
    pub positional: ParamId,
    pub tau: ParamId,
    pub video_adapter: Option<Adapter>,
    pub text_adapter: Option<Adapter>,
    pub cvae: CvaeParams,
}

/// Tape nodes produced by one forward pass.
pub struct Forward<'t> {
    pub video: Var<'t>,
    pub text: Var<'t>,
    pub vp: Option<Var<'t>>,
    pub sp: Option<Var<'t>>,
    pub loss: Var<'t>,
    pub report: LossReport,
}

fn identity_adapter(store: &mut ParamStore, name: &str, dim: usize) -> Adapter {
    let mut w = vec![0.0; dim * dim];
    for i in 0..dim {
        w[i * dim + i] = 1.0;
    }
    Adapter {
        weight: store.add(
            format!("{name}.weight"),
            Tensor::matrix(dim, dim, w).expect("square").with_grad(),
        ),
        bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, dim]).with_grad()),
    }
}

impl CalmHead {
    /// Registers every parameter in a fresh store. Adapters start at the
    /// identity, positional offsets at zero, VAE weights uniform in
    /// `±1/sqrt(fan_in)` with zero biases.
    pub fn init<R: Rng + ?Sized>(
        config: ModelConfig,
        anchors: &AnchorSet,
        rng: &mut R,
    ) -> Result<(ParamStore, Self)> {
        config.validate()?;
        let (k, dim) = anchors.base().dims2()?;
        let mut store = ParamStore::new();
        let mut positional = anchors.positional().clone();
        positional.set_requires_grad(true);
        let positional = store.add("anchors.positional", positional);
        let mut tau = Tensor::scalar(config.tau);
        tau.set_requires_grad(config.learn_tau);
        let tau = store.add("anchors.tau", tau);
        let (video_adapter, text_adapter) = if config.adapters {
            (
                Some(identity_adapter(&mut store, "adapter.video", dim)),
                Some(identity_adapter(&mut store, "adapter.text", dim)),
            )
        } else {
            (None, None)
        };
        let cvae = CvaeParams::init(
            &mut store,
            CvaeDims {
                anchors: k,
                hidden: config.hidden,
                latent: config.latent_dim,
            },
            config.activation,
            config.dropout,
            rng,
        )?;
        let head = Self {
            config,
            anchor_base: anchors.base().detached(),
            labels: anchors.labels().to_vec(),
            template: anchors.template().to_string(),
            positional,
            tau,
            video_adapter,
            text_adapter,
            cvae,
        };
        Ok((store, head))
    }

    pub fn num_anchors(&self) -> usize {
        self.anchor_base.rows()
    }

    pub fn dim(&self) -> usize {
        self.anchor_base.cols()
    }

    /// Current anchors, including learned offsets.
    pub fn anchor_set(&self, store: &ParamStore) -> Result<AnchorSet> {
        AnchorSet::with_positional(
            self.anchor_base.clone(),
            store.get(self.positional).clone(),
            self.labels.clone(),
            self.template.clone(),
        )
    }

    pub fn temperature(&self, store: &ParamStore) -> Result<Temperature> {
        Temperature::new(store.get(self.tau).item(), self.config.learn_tau)
    }

    fn adapt<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, adapter: Option<Adapter>) -> Result<Var<'t>> {
        match adapter {
            Some(a) => x
                .matmul(&tape.param(store, a.weight))?
                .add_row(&tape.param(store, a.bias)),
            None => Ok(x),
        }
    }

    /// Fused, adapted video features (`B × D`) and adapted text features.
    pub fn embed<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        frames: Var<'t>,
        text: Var<'t>,
        frames_per_video: usize,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let fused = frames.group_mean_rows(frames_per_video)?;
        let video = self.adapt(tape, store, fused, self.video_adapter)?;
        let text = self.adapt(tape, store, text, self.text_adapter)?;
        Ok((video, text))
    }

    /// Anchor matrix `base + positional` on the tape.
    pub fn anchors_var<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<Var<'t>> {
        let base = tape.constant(self.anchor_base.clone());
        base.add(&tape.param(store, self.positional))
    }

    /// Total loss of a batch. `noise` is consulted only in `Calm` mode.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        batch: &Batch,
        noise: &CvaeNoise,
        loss: &LossConfig,
    ) -> Result<Forward<'t>> {
        if batch.is_empty() {
            return Err(CalmError::EmptyInput("empty batch"));
        }
        let frames = tape.constant(batch.frames.clone());
        let text_in = tape.constant(batch.text.clone());
        let (video, text) = self.embed(tape, store, frames, text_in, batch.frames_per_video)?;
        let task = task_loss_var(&video, &text, loss.task_temperature)?;
        let mut report = LossReport {
            task: task.item(),
            ..LossReport::default()
        };

        if !loss.mode.uses_anchors() {
            report.total = report.task;
            return Ok(Forward {
                video,
                text,
                vp: None,
                sp: None,
                loss: task,
                report,
            });
        }

        let anchors = self.anchors_var(tape, store)?;
        let tau = tape.param(store, self.tau);
        let vp = anchor_distribution_var(&video, &anchors, &tau)?;
        let sp = anchor_distribution_var(&text, &anchors, &tau)?;

        let align = match loss.mode {
            LossMode::Calm => {
                let out = cvae_forward_var(tape, store, &self.cvae, &vp, &sp, noise, loss.block_target)?;
                report.rec = out.rec_loss.item();
                report.kl = out.kl_loss.item();
                let weighted = out.kl_loss.scale(loss.alpha);
                report.weighted_kl = weighted.item();
                out.rec_loss.add(&weighted)?
            }
            mode => {
                let d = discriminative_loss_var(&vp, &sp, mode, loss.block_target)?;
                report.discriminative = d.item();
                d
            }
        };
        let total = task.add(&align)?;
        report.total = total.item();
        if !report.total.is_finite() {
            return Err(CalmError::NumericDomain(format!("loss is {}", report.total)));
        }
        Ok(Forward {
            video,
            text,
            vp: Some(vp),
            sp: Some(sp),
            loss: total,
            report,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::DEFAULT_TEMPLATE;
    use crate::rng::{self, Stream};

    fn setup(mode_cfg: ModelConfig) -> (ParamStore, CalmHead, Batch) {
        let mut r = rng::stream(3, Stream::Data);
        let k = 5;
        let dim = 6;
        let base = Tensor::matrix(k, dim, rng::normals(&mut r, k * dim)).unwrap();
        let labels = (0..k).map(|i| format!("l{i}")).collect();
        let anchors = AnchorSet::new(base, labels, DEFAULT_TEMPLATE).unwrap();
        let (store, head) = CalmHead::init(mode_cfg, &anchors, &mut rng::stream(3, Stream::Init)).unwrap();
        let frames = Tensor::matrix(4 * 3, dim, rng::normals(&mut r, 12 * dim)).unwrap();
        let text = Tensor::matrix(4, dim, rng::normals(&mut r, 4 * dim)).unwrap();
        (store, head, Batch::new(frames, text, 3).unwrap())
    }

    fn small() -> ModelConfig {
        ModelConfig {
            latent_dim: 3,
            hidden: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn baseline_equals_task_loss() {
        let (store, head, batch) = setup(small());
        let tape = Tape::new();
        let cfg = LossConfig {
            mode: LossMode::Baseline,
            ..LossConfig::default()
        };
        let noise = CvaeNoise::deterministic(batch.len(), &head.cvae);
        let f = head.forward(&tape, &store, &batch, &noise, &cfg).unwrap();
        assert_eq!(f.report.total, f.report.task);
        assert!(f.vp.is_none());
    }

    #[test]
    fn report_components_sum_to_total() {
        let (store, head, batch) = setup(small());
        let noise = CvaeNoise::sample(
            &mut rng::stream(1, Stream::Epsilon),
            &mut rng::stream(1, Stream::Dropout),
            batch.len(),
            &head.cvae,
        );
        for mode in LossMode::ALL {
            let tape = Tape::new();
            let cfg = LossConfig {
                mode,
                ..LossConfig::default()
            };
            let f = head.forward(&tape, &store, &batch, &noise, &cfg).unwrap();
            let sum: f64 = f.report.components().iter().sum();
            assert!((sum - f.report.total).abs() <= 1e-10, "{mode}");
            assert!(f.report.total >= 0.0);
        }
    }

    #[test]
    fn alpha_zero_drops_kl() {
        let (store, head, batch) = setup(small());
        let noise = CvaeNoise::deterministic(batch.len(), &head.cvae);
        let tape = Tape::new();
        let cfg = LossConfig {
            alpha: 0.0,
            ..LossConfig::default()
        };
        let f = head.forward(&tape, &store, &batch, &noise, &cfg).unwrap();
        assert_eq!(f.report.total, f.report.task + f.report.rec);
        assert!(f.report.kl > 0.0);
    }

    #[test]
    fn batch_validates_shapes() {
        let frames = Tensor::zeros(&[6, 2]);
        assert!(Batch::new(frames.clone(), Tensor::zeros(&[2, 2]), 3).is_ok());
        assert!(Batch::new(frames.clone(), Tensor::zeros(&[3, 2]), 3).is_err());
        assert!(Batch::new(frames, Tensor::zeros(&[2, 3]), 3).is_err());
    }
}
