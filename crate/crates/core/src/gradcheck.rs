//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use crate::anchors::{AnchorSet, DEFAULT_TEMPLATE};
use crate::config::GradcheckConfig;
use crate::cvae::CvaeNoise;
use crate::error::{CalmError, Result};
use crate::model::{Batch, CalmHead, ModelConfig};
use crate::objective::LossConfig;
use crate::rng::{self, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamStore, Tensor};

/// Worst relative error for one parameter tensor.
#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// `|g_ad - g_fd| / max(1, |g_fd|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn eval_scalar<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let v = f(&tape, store)?.item();
    if !v.is_finite() {
        return Err(CalmError::NumericDomain(format!(
            "objective evaluated to {v} during finite differencing"
        )));
    }
    Ok(v)
}

/// Compares backward gradients of `f` against central differences with step
/// `h` for every parameter in `store` that requires a gradient. `f` must be
/// deterministic: any noise it uses has to be fixed outside the closure.
pub fn check_store<F>(store: &ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(CalmError::Contract(format!("step must be positive, got {h}")));
    }
    let mut work = store.clone();
    work.zero_grad();
    {
        let tape = Tape::new();
        let root = f(&tape, &work)?;
        if !root.item().is_finite() {
            return Err(CalmError::NumericDomain("objective is not finite".into()));
        }
        tape.backward_into(root, &mut work)?;
    }

    let mut report = GradCheckReport {
        step: h,
        params: Vec::new(),
        max_rel_error: 0.0,
    };
    let ids: Vec<_> = work.ids().collect();
    for id in ids {
        if !work.get(id).requires_grad() {
            continue;
        }
        let analytic = work.get(id).grad().map(<[f64]>::to_vec).unwrap_or_default();
        let mut worst: f64 = 0.0;
        for i in 0..analytic.len() {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval_scalar(&f, &work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval_scalar(&f, &work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.params.push(ParamCheck {
            name: work.name(id).to_string(),
            numel: analytic.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

/// Slice form of [`check_store`]: `f` receives one tape node per tensor in
/// `params`, in order. Tensors without `requires_grad` are held fixed and
/// left out of the report.
pub fn finite_diff_check<F>(params: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = params
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("p{i}"), t.clone()))
        .collect();
    check_store(&store, h, |tape, s| {
        let vars: Vec<_> = ids.iter().map(|&id| tape.param(s, id)).collect();
        f(tape, &vars)
    })
}

/// Checks the complete head loss on a small random problem shaped by `gc`.
/// The temperature is made learnable so it is covered too; dropout masks
/// and latent noise are drawn once and held fixed. A detached target has no
/// finite-difference counterpart, so the target is always left attached
/// here regardless of `loss.block_target`.
pub fn check_head_loss(gc: &GradcheckConfig, loss: &LossConfig, seed: u64) -> Result<GradCheckReport> {
    let mut data = rng::stream(seed, Stream::Check);
    let base = Tensor::matrix(gc.k, gc.dim, rng::normals(&mut data, gc.k * gc.dim))?;
    let labels = (0..gc.k).map(|i| format!("anchor_{i}")).collect();
    let mut anchors = AnchorSet::new(base, labels, DEFAULT_TEMPLATE)?;
    // Nonzero offsets so the positional gradient is exercised away from
    // its starting point.
    let offsets = rng::normals(&mut data, gc.k * gc.dim).into_iter().map(|v| 0.1 * v).collect();
    *anchors.positional_mut() = Tensor::matrix(gc.k, gc.dim, offsets)?.with_grad();
    let frames = Tensor::matrix(
        gc.batch * gc.frames,
        gc.dim,
        rng::normals(&mut data, gc.batch * gc.frames * gc.dim),
    )?;
    let text = Tensor::matrix(gc.batch, gc.dim, rng::normals(&mut data, gc.batch * gc.dim))?;
    let batch = Batch::new(frames, text, gc.frames)?;

    let model = ModelConfig {
        latent_dim: gc.latent,
        hidden: gc.hidden,
        learn_tau: true,
        ..ModelConfig::default()
    };
    let mut init = rng::stream(seed, Stream::Init);
    let (store, head) = CalmHead::init(model, &anchors, &mut init)?;
    let noise = CvaeNoise::sample(
        &mut rng::stream(seed, Stream::Epsilon),
        &mut rng::stream(seed, Stream::Dropout),
        gc.batch,
        &head.cvae,
    );
    let loss = LossConfig {
        block_target: false,
        ..loss.clone()
    };
    check_store(&store, gc.step, |tape, s| {
        Ok(head.forward(tape, s, &batch, &noise, &loss)?.loss)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_rows(&[[0.5, -1.5], [2.0, 3.0]]).unwrap().with_grad();
        let report = finite_diff_check(&[x], 1e-5, |_, v| {
            Ok(v[0].square()?.sum().scale(0.5).add_scalar(1.0))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-9, "{report:?}");
    }

    #[test]
    fn frozen_params_are_excluded() {
        let a = Tensor::vector(vec![1.0, 2.0]).with_grad();
        let b = Tensor::vector(vec![3.0, 4.0]);
        let report = finite_diff_check(&[a, b], 1e-5, |_, v| Ok(v[0].mul(&v[1])?.sum())).unwrap();
        assert_eq!(report.params.len(), 1);
        assert_eq!(report.params[0].name, "p0");
    }

    #[test]
    fn non_positive_step_rejected() {
        let a = Tensor::vector(vec![1.0]).with_grad();
        assert!(finite_diff_check(&[a], 0.0, |_, v| Ok(v[0].sum())).is_err());
    }

    #[test]
    fn non_finite_objective_rejected() {
        let a = Tensor::vector(vec![800.0]).with_grad();
        let err = finite_diff_check(&[a], 1e-5, |_, v| Ok(v[0].exp().sum())).unwrap_err();
        assert!(matches!(err, CalmError::NumericDomain(_)));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // detach on one factor makes backward see half of the true gradient
        let a = Tensor::vector(vec![1.0, -2.0]).with_grad();
        let report =
            finite_diff_check(&[a], 1e-5, |_, v| Ok(v[0].detach().mul(&v[0])?.sum())).unwrap();
        assert!(report.max_rel_error > 0.5);
    }

    #[test]
    fn head_loss_passes_every_mode() {
        let gc = GradcheckConfig::default();
        for mode in crate::objective::LossMode::ALL {
            let loss = LossConfig {
                mode,
                ..LossConfig::default()
            };
            let r = check_head_loss(&gc, &loss, 0).unwrap();
            assert!(r.passes(1e-5), "{mode}: {}", r.max_rel_error);
        }
    }

}
