//! Cross-modal probabilistic VAE over anchor distributions.
//!
//! The encoder maps a video-anchor distribution to a diagonal Gaussian
//! posterior, a latent is drawn with the reparameterization trick, and the
//! decoder maps it back to a distribution over the same anchors, which is
//! scored against the text-anchor distribution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorDistribution, Modality};
use crate::error::{CalmError, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Floor applied to every probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply<'t>(self, x: &Var<'t>) -> Var<'t> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvaeDims {
    pub anchors: usize,
    pub hidden: usize,
    pub latent: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Registers a `fan_in × fan_out` layer with weights drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` and zero bias.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::matrix(fan_in, fan_out, w).expect("sized").with_grad(),
        );
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::zeros(&[1, fan_out]).with_grad(),
        );
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        x.matmul(&w)?.add_row(&b)
    }
}

/// Parameter handles of the encoder (`K → H → 2·d`) and decoder (`d → H → K`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CvaeParams {
    pub dims: CvaeDims,
    pub activation: Activation,
    pub dropout: f64,
    pub enc_hidden: Linear,
    pub enc_mu: Linear,
    pub enc_logvar: Linear,
    pub dec_hidden: Linear,
    pub dec_out: Linear,
}

impl CvaeParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dims: CvaeDims,
        activation: Activation,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.anchors == 0 || dims.hidden == 0 || dims.latent == 0 {
            return Err(CalmError::config("model", "cvae dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(CalmError::config("model.dropout", "must lie in [0, 1)"));
        }
        Ok(Self {
            dims,
            activation,
            dropout,
            enc_hidden: Linear::init(store, "cvae.enc_hidden", dims.anchors, dims.hidden, rng),
            enc_mu: Linear::init(store, "cvae.enc_mu", dims.hidden, dims.latent, rng),
            enc_logvar: Linear::init(store, "cvae.enc_logvar", dims.hidden, dims.latent, rng),
            dec_hidden: Linear::init(store, "cvae.dec_hidden", dims.latent, dims.hidden, rng),
            dec_out: Linear::init(store, "cvae.dec_out", dims.hidden, dims.anchors, rng),
        })
    }

    /// Fresh store holding only this VAE.
    pub fn standalone(dims: CvaeDims, activation: Activation, dropout: f64, seed: u64) -> Result<(ParamStore, Self)> {
        let mut store = ParamStore::new();
        let mut init = rng::stream(seed, rng::Stream::Init);
        let params = Self::init(&mut store, dims, activation, dropout, &mut init)?;
        Ok((store, params))
    }

    pub fn param_ids(&self) -> [ParamId; 10] {
        let l = [self.enc_hidden, self.enc_mu, self.enc_logvar, self.dec_hidden, self.dec_out];
        let mut out = [l[0].weight; 10];
        for (i, layer) in l.iter().enumerate() {
            out[2 * i] = layer.weight;
            out[2 * i + 1] = layer.bias;
        }
        out
    }
}

/// Inverted-dropout masks for one forward pass. Entries are `0` or
/// `1/(1-p)`; `None` disables dropout for that network.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMasks {
    pub encoder: Option<Tensor>,
    pub decoder: Option<Tensor>,
}

impl DropoutMasks {
    pub fn none() -> Self {
        Self {
            encoder: None,
            decoder: None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, batch: usize, hidden: usize, rate: f64) -> Self {
        if rate <= 0.0 {
            return Self::none();
        }
        let keep = 1.0 / (1.0 - rate);
        let mut draw = || {
            let data = (0..batch * hidden)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect();
            Tensor::matrix(batch, hidden, data).expect("sized")
        };
        let encoder = draw();
        let decoder = draw();
        Self {
            encoder: Some(encoder),
            decoder: Some(decoder),
        }
    }
}

/// Randomness consumed by one forward pass, fixed up front so a pass can be
/// replayed exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct CvaeNoise {
    pub eps: Tensor,
    pub masks: DropoutMasks,
}

impl CvaeNoise {
    /// Training-mode noise: standard-normal `eps` and fresh dropout masks.
    pub fn sample<E: Rng + ?Sized, D: Rng + ?Sized>(
        eps_rng: &mut E,
        dropout_rng: &mut D,
        batch: usize,
        params: &CvaeParams,
    ) -> Self {
        let eps = Tensor::matrix(batch, params.dims.latent, rng::normals(eps_rng, batch * params.dims.latent))
            .expect("sized");
        let masks = DropoutMasks::sample(dropout_rng, batch, params.dims.hidden, params.dropout);
        Self { eps, masks }
    }

    /// Deterministic noise: `eps = 0` (latent equals the posterior mean) and
    /// no dropout.
    pub fn deterministic(batch: usize, params: &CvaeParams) -> Self {
        Self {
            eps: Tensor::zeros(&[batch, params.dims.latent]),
            masks: DropoutMasks::none(),
        }
    }
}

fn masked<'t>(tape: &'t Tape, x: Var<'t>, mask: Option<&Tensor>) -> Result<Var<'t>> {
    match mask {
        Some(m) => x.mul(&tape.constant(m.clone())),
        None => Ok(x),
    }
}

fn check_finite(v: &Var<'_>, what: &str) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(CalmError::NumericDomain(format!("{what} produced non-finite activations")))
    }
}

/// Posterior parameters `(mu, logvar)` for a `B × K` batch of distributions.
pub fn encode_var<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    params: &CvaeParams,
    vp: &Var<'t>,
    masks: &DropoutMasks,
) -> Result<(Var<'t>, Var<'t>)> {
    let h = params.activation.apply(&params.enc_hidden.forward(tape, store, vp)?);
    let h = masked(tape, h, masks.encoder.as_ref())?;
    let mu = params.enc_mu.forward(tape, store, &h)?;
    let logvar = params.enc_logvar.forward(tape, store, &h)?;
    check_finite(&mu, "encoder")?;
    check_finite(&logvar, "encoder")?;
    Ok((mu, logvar))
}

/// `z = mu + exp(logvar / 2) * eps`.
pub fn reparameterize_var<'t>(mu: &Var<'t>, logvar: &Var<'t>, eps: &Var<'t>) -> Result<Var<'t>> {
    let sigma = logvar.scale(0.5).exp();
    mu.add(&sigma.mul(eps)?)
}

/// Reconstructed distributions (`B × K`) from latents (`B × d`).
pub fn decode_var<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    params: &CvaeParams,
    z: &Var<'t>,
    masks: &DropoutMasks,
) -> Result<Var<'t>> {
    let h = params.activation.apply(&params.dec_hidden.forward(tape, store, z)?);
    let h = masked(tape, h, masks.decoder.as_ref())?;
    let logits = params.dec_out.forward(tape, store, &h)?;
    check_finite(&logits, "decoder")?;
    logits.softmax_rows()
}

/// Batch-mean cross-entropy `-sum_k target_k log max(recon_k, floor)`.
pub fn rec_loss_var<'t>(target: &Var<'t>, recon: &Var<'t>) -> Result<Var<'t>> {
    let rows = target.value().rows().max(1);
    Ok(target
        .mul(&recon.log_floor(PROB_FLOOR))?
        .sum()
        .scale(-1.0 / rows as f64))
}

/// Batch-mean closed-form `KL(N(mu, exp(logvar)) || N(0, I))`.
pub fn kl_loss_var<'t>(mu: &Var<'t>, logvar: &Var<'t>) -> Result<Var<'t>> {
    let rows = mu.value().rows().max(1);
    let inner = mu.square()?.add(&logvar.exp())?.sub(logvar)?.add_scalar(-1.0);
    Ok(inner.sum().scale(0.5 / rows as f64))
}

/// Output of one VAE pass on the tape.
pub struct CvaeVars<'t> {
    pub mu: Var<'t>,
    pub logvar: Var<'t>,
    pub z: Var<'t>,
    pub recon: Var<'t>,
    pub rec_loss: Var<'t>,
    pub kl_loss: Var<'t>,
}

/// Encode, sample, decode and score against `target`. When `block_target`
/// is set the target is treated as a fixed label.
pub fn cvae_forward_var<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    params: &CvaeParams,
    vp: &Var<'t>,
    target: &Var<'t>,
    noise: &CvaeNoise,
    block_target: bool,
) -> Result<CvaeVars<'t>> {
    let (mu, logvar) = encode_var(tape, store, params, vp, &noise.masks)?;
    let eps = tape.constant(noise.eps.clone());
    let z = reparameterize_var(&mu, &logvar, &eps)?;
    let recon = decode_var(tape, store, params, &z, &noise.masks)?;
    let target = if block_target { target.detach() } else { *target };
    let rec_loss = rec_loss_var(&target, &recon)?;
    let kl_loss = kl_loss_var(&mu, &logvar)?;
    Ok(CvaeVars {
        mu,
        logvar,
        z,
        recon,
        rec_loss,
        kl_loss,
    })
}

/// A drawn latent and the quantities it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub eps: Tensor,
    pub z: Tensor,
}

/// Decoder output for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    probs: Tensor,
}

impl Reconstruction {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let d = AnchorDistribution::new(probs, Modality::Text)?;
        Ok(Self {
            probs: d.tensor().clone(),
        })
    }

    pub fn probs(&self) -> &[f64] {
        self.probs.data()
    }
}

fn row_input(vp: &AnchorDistribution, params: &CvaeParams) -> Result<Tensor> {
    if vp.len() != params.dims.anchors {
        return Err(CalmError::Dimension {
            op: "cvae input",
            lhs: vec![vp.len()],
            rhs: vec![params.dims.anchors],
        });
    }
    Tensor::matrix(1, vp.len(), vp.probs().to_vec())
}

/// Posterior `(mu, logvar)` for one distribution, dropout disabled.
pub fn encode(vp: &AnchorDistribution, store: &ParamStore, params: &CvaeParams) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let x = tape.constant(row_input(vp, params)?);
    let (mu, logvar) = encode_var(&tape, store, params, &x, &DropoutMasks::none())?;
    Ok((flat(mu.value()), flat(logvar.value())))
}

fn flat(t: Tensor) -> Tensor {
    Tensor::vector(t.into_data())
}

/// Draws `eps ~ N(0, I)` from `rng` and forms the latent.
pub fn reparameterize<R: Rng + ?Sized>(mu: &Tensor, logvar: &Tensor, rng: &mut R) -> Result<LatentSample> {
    let eps = Tensor::new(mu.shape().to_vec(), rng::normals(rng, mu.numel()))?;
    reparameterize_with(mu, logvar, eps)
}

/// Forms the latent from a caller-supplied `eps`.
pub fn reparameterize_with(mu: &Tensor, logvar: &Tensor, eps: Tensor) -> Result<LatentSample> {
    if mu.shape() != logvar.shape() || mu.shape() != eps.shape() {
        return Err(CalmError::Dimension {
            op: "reparameterize",
            lhs: mu.shape().to_vec(),
            rhs: logvar.shape().to_vec(),
        });
    }
    let tape = Tape::new();
    let z = reparameterize_var(
        &tape.constant(mu.clone()),
        &tape.constant(logvar.clone()),
        &tape.constant(eps.clone()),
    )?
    .value();
    Ok(LatentSample {
        mu: mu.clone(),
        logvar: logvar.clone(),
        eps,
        z,
    })
}

/// Decoded distribution for one latent, dropout disabled.
pub fn decode(z: &Tensor, store: &ParamStore, params: &CvaeParams) -> Result<Reconstruction> {
    if z.numel() != params.dims.latent {
        return Err(CalmError::Dimension {
            op: "decode",
            lhs: z.shape().to_vec(),
            rhs: vec![params.dims.latent],
        });
    }
    let tape = Tape::new();
    let zv = tape.constant(Tensor::matrix(1, z.numel(), z.data().to_vec())?);
    let recon = decode_var(&tape, store, params, &zv, &DropoutMasks::none())?;
    Reconstruction::new(recon.value().into_data())
}

/// Cross-entropy of `recon` under `target`.
pub fn rec_loss(target: &AnchorDistribution, recon: &Reconstruction) -> Result<f64> {
    rec_loss_probs(target.probs(), recon.probs())
}

pub fn rec_loss_probs(target: &[f64], recon: &[f64]) -> Result<f64> {
    if target.len() != recon.len() {
        return Err(CalmError::Dimension {
            op: "rec_loss",
            lhs: vec![target.len()],
            rhs: vec![recon.len()],
        });
    }
    Ok(-target
        .iter()
        .zip(recon)
        .map(|(t, r)| t * r.max(PROB_FLOOR).ln())
        .sum::<f64>())
}

/// `0.5 * sum(mu^2 + exp(logvar) - logvar - 1)`.
pub fn kl_loss(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(CalmError::Dimension {
            op: "kl_loss",
            lhs: vec![mu.len()],
            rhs: vec![logvar.len()],
        });
    }
    Ok(0.5
        * mu.iter()
            .zip(logvar)
            .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
            .sum::<f64>())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeOutput {
    pub rec_loss: f64,
    pub kl_loss: f64,
    pub recon: Reconstruction,
    pub latent: LatentSample,
}

/// One VAE pass for a single `(V_p, S_p)` pair using the given noise.
pub fn cvae_forward(
    vp: &AnchorDistribution,
    sp: &AnchorDistribution,
    store: &ParamStore,
    params: &CvaeParams,
    noise: &CvaeNoise,
) -> Result<CvaeOutput> {
    if sp.len() != params.dims.anchors {
        return Err(CalmError::Dimension {
            op: "cvae target",
            lhs: vec![sp.len()],
            rhs: vec![params.dims.anchors],
        });
    }
    let tape = Tape::new();
    let x = tape.constant(row_input(vp, params)?);
    let target = tape.constant(Tensor::matrix(1, sp.len(), sp.probs().to_vec())?);
    let out = cvae_forward_var(&tape, store, params, &x, &target, noise, true)?;
    Ok(CvaeOutput {
        rec_loss: out.rec_loss.item(),
        kl_loss: out.kl_loss.item(),
        recon: Reconstruction::new(out.recon.value().into_data())?,
        latent: LatentSample {
            mu: flat(out.mu.value()),
            logvar: flat(out.logvar.value()),
            eps: flat(noise.eps.clone()),
            z: flat(out.z.value()),
        },
    })
}
