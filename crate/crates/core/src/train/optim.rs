//! Adam with bias correction and the linear-decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Float, GradMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Float = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self { m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0 }
    }
}

/// One Adam update of `param` in place of a new leaf tensor.
pub fn adam_step<T: Float>(
    param: &Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<Tensor<T>> {
    if grad.shape() != param.shape() || state.m.len() != param.numel() {
        return Err(Error::ShapeMismatch { op: "adam_step", lhs: param.shape().to_vec(), rhs: grad.shape().to_vec() });
    }
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be non-negative")));
    }
    if let Some(i) = grad.data().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient element {i} is {}", grad.data()[i].as_f64())));
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let mut out = Vec::with_capacity(param.numel());
    for (((p, g), m), v) in param.data().iter().zip(grad.data()).zip(&mut state.m).zip(&mut state.v) {
        let g = g.as_f64();
        let mn = b1 * m.as_f64() + (1.0 - b1) * g;
        let vn = b2 * v.as_f64() + (1.0 - b2) * g * g;
        *m = T::of(mn);
        *v = T::of(vn);
        let m_hat = mn / c1;
        let v_hat = vn / c2;
        out.push(T::of(p.as_f64() - lr * m_hat / (v_hat.sqrt() + cfg.eps)));
    }
    Ok(Tensor::from_vec(out, param.shape())?.into_leaf(true))
}

/// Adam over every parameter of one module, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T: Float = f32> {
    pub config: AdamConfig,
    pub names: Vec<String>,
    pub states: Vec<AdamState<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new<M: Module<T>>(module: &M, config: AdamConfig) -> Self {
        let params = module.named_parameters();
        Self {
            config,
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            states: params.iter().map(|(_, p)| AdamState::new(p.numel())).collect(),
        }
    }

    /// Updates every parameter of `module` that has an entry in `grads`.
    pub fn step<M: Module<T>>(&mut self, module: &mut M, grads: &GradMap<T>, lr: f64) -> Result<()> {
        let mut index = 0;
        let mut failure = None;
        module.visit_mut("", &mut |name, p| {
            if failure.is_some() {
                return;
            }
            let i = index;
            index += 1;
            if self.names.get(i) != Some(&name) {
                failure = Some(Error::InvalidArgument(format!("optimizer state does not match parameter {name}")));
                return;
            }
            let Some(g) = grads.get(p) else { return };
            match adam_step(p, g, &mut self.states[i], lr, &self.config) {
                Ok(updated) => *p = updated,
                Err(Error::NonFinite(msg)) => failure = Some(Error::NonFinite(format!("{name}: {msg}"))),
                Err(e) => failure = Some(e),
            }
        });
        match failure {
            Some(e) => Err(e),
            None if index != self.names.len() => {
                Err(Error::InvalidArgument("optimizer state does not match module".into()))
            }
            None => Ok(()),
        }
    }
}

/// Constant `lr0` before `decay_start`, then linear to 0 at `total`.
pub fn lr_at(epoch: f64, lr0: f64, decay_start: f64, total: f64) -> f64 {
    if epoch < decay_start {
        lr0
    } else if epoch >= total {
        0.0
    } else {
        lr0 * ((total - epoch) / (total - decay_start))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let p = Tensor::<f64>::from_f64(&[0.0], &[1]).unwrap();
        let g = Tensor::<f64>::from_f64(&[1.0], &[1]).unwrap();
        let mut s = AdamState::new(1);
        let q = adam_step(&p, &g, &mut s, 1e-4, &AdamConfig::default()).unwrap();
        assert!((q.data()[0] + 1e-4 / (1.0 + 1e-8)).abs() < 1e-18);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = Tensor::<f64>::from_f64(&[0.3, -2.0], &[2]).unwrap();
        let g = Tensor::<f64>::zeros(&[2]).unwrap();
        let mut s = AdamState::new(2);
        for _ in 0..50 {
            p = adam_step(&p, &g, &mut s, 1e-3, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.data(), &[0.3, -2.0]);
    }

    #[test]
    fn rejects_nan_gradient() {
        let p = Tensor::<f64>::zeros(&[2]).unwrap();
        let g = Tensor::<f64>::from_f64(&[1.0, f64::NAN], &[2]).unwrap();
        let err = adam_step(&p, &g, &mut AdamState::new(2), 1e-3, &AdamConfig::default());
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn schedule_points() {
        assert_eq!(lr_at(5.0, 1e-4, 10.0, 20.0), 1e-4);
        assert_eq!(lr_at(10.0, 1e-4, 10.0, 20.0), 1e-4);
        assert_eq!(lr_at(15.0, 1e-4, 10.0, 20.0), 5e-5);
        assert_eq!(lr_at(20.0, 1e-4, 10.0, 20.0), 0.0);
    }
}
