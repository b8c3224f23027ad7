//! Adversarial, classification, reconstruction and penalty objectives. All
//! reductions are batch means.

use crate::error::{Error, Result};
use crate::model::Discriminator;
use crate::tensor::{backward, grad_enabled, no_grad, Float, Tensor};

fn check_scores<T: Float>(s: &Tensor<T>, what: &str) -> Result<()> {
    if s.rank() != 1 {
        return Err(Error::InvalidArgument(format!("{what} scores must be (N), got {:?}", s.shape())));
    }
    Ok(())
}

/// `mean(fake) - mean(real)`.
pub fn d_adv_loss<T: Float>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<Tensor<T>> {
    check_scores(real, "real")?;
    check_scores(fake, "fake")?;
    if real.shape() != fake.shape() {
        return Err(Error::ShapeMismatch { op: "d_adv_loss", lhs: real.shape().to_vec(), rhs: fake.shape().to_vec() });
    }
    fake.mean_all().sub(&real.mean_all())
}

/// `-mean(fake)`.
pub fn g_adv_loss<T: Float>(fake: &Tensor<T>) -> Result<Tensor<T>> {
    check_scores(fake, "fake")?;
    Ok(fake.mean_all().neg())
}

/// Per-label sigmoid cross-entropy averaged over samples and domains.
pub fn cls_loss<T: Float>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::InvalidShape(logits.shape().to_vec(), "logits must be (N, n)"));
    }
    logits.bce_with_logits(targets)
}

pub fn cycle_loss<T: Float>(x: &Tensor<T>, x_cycle: &Tensor<T>) -> Result<Tensor<T>> {
    x.l1_mean(x_cycle)
}

pub fn identity_loss<T: Float>(x: &Tensor<T>, x_identity: &Tensor<T>) -> Result<Tensor<T>> {
    x.l1_mean(x_identity)
}

/// `eps * real + (1 - eps) * fake` per sample, as a fresh differentiable leaf.
/// Neither endpoint receives gradient through it.
pub fn interpolate<T: Float>(real: &Tensor<T>, fake: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if real.shape() != fake.shape() {
        return Err(Error::ShapeMismatch { op: "interpolate", lhs: real.shape().to_vec(), rhs: fake.shape().to_vec() });
    }
    if eps.rank() != 1 || eps.shape()[0] != real.shape()[0] {
        return Err(Error::InvalidShape(eps.shape().to_vec(), "eps must hold one value per sample"));
    }
    if eps.to_f64_vec().iter().any(|e| !(0.0..=1.0).contains(e)) {
        return Err(Error::InvalidArgument("interpolation weights must lie in [0, 1]".into()));
    }
    let mixed = no_grad(|| -> Result<Tensor<T>> {
        let e = eps.sample_broadcast(real.shape())?;
        let one_minus = e.neg().add_scalar(1.0);
        e.mul(real)?.add(&one_minus.mul(fake)?)
    })?;
    Ok(mixed.into_leaf(true))
}

/// Penalty for an arbitrary critic `d` mapping `(N, ...)` to per-sample scores.
/// Returns `mean_i (||grad_x d(x)_i||_2 - 1)^2` at the interpolates; the result
/// stays differentiable wrt whatever `d` closes over.
pub fn gradient_penalty_with<T, F>(d: F, real: &Tensor<T>, fake: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>>
where
    T: Float,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    if !grad_enabled() {
        return Err(Error::InvalidArgument(
            "gradient penalty needs graph recording (called inside no_grad)".into(),
        ));
    }
    let x_hat = interpolate(real, fake, eps)?;
    let scores = d(&x_hat)?;
    let grads = backward(&scores.sum_all(), &[&x_hat], true)?;
    let g = grads.get_or_zeros(&x_hat);
    let dev = g.norm_per_sample().add_scalar(-1.0);
    Ok(dev.mul(&dev)?.mean_all())
}

pub fn gradient_penalty<T: Float>(
    d: &Discriminator<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    gradient_penalty_with(|x| d.adv(x), real, fake, eps)
}

/// Objective weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub gp: f64,
    pub cyc: f64,
    pub id: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 10.0, gp: 10.0, cyc: 10.0, id: 10.0 }
    }
}

pub fn total_d_loss<T: Float>(adv: &Tensor<T>, cls: &Tensor<T>, gp: &Tensor<T>, w: &LossWeights) -> Result<Tensor<T>> {
    adv.add(&cls.scale(w.cls))?.add(&gp.scale(w.gp))
}

pub fn total_g_loss<T: Float>(
    adv: &Tensor<T>,
    cls: &Tensor<T>,
    cyc: &Tensor<T>,
    id: &Tensor<T>,
    w: &LossWeights,
) -> Result<Tensor<T>> {
    adv.add(&cls.scale(w.cls))?.add(&cyc.scale(w.cyc))?.add(&id.scale(w.id))
}
