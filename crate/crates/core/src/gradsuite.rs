//! Finite-difference verification of every differentiable building block,
//! in double precision.

use crate::error::Result;
use crate::model::blend;
use crate::nn::{self, ConvSpec, ResidualBlock, Module, IN_EPS, LEAKY_SLOPE};
use crate::rng::SatRng;
use crate::tensor::{backward, finite_diff_gradient, finite_diff_gradient_recorded, max_rel_error, FillKind, Tensor};
use crate::train::losses::{
    cls_loss, cycle_loss, d_adv_loss, g_adv_loss, gradient_penalty_with, identity_loss,
};

pub const FIRST_ORDER_TOL: f64 = 1e-4;
pub const PENALTY_TOL: f64 = 1e-3;
const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub op: &'static str,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

type Check = fn(u64) -> Result<f64>;

const CHECKS: &[(&str, Check, f64)] = &[
    ("conv2d", check_conv2d, FIRST_ORDER_TOL),
    ("conv_transpose2d", check_conv_transpose2d, FIRST_ORDER_TOL),
    ("instance_norm", check_instance_norm, FIRST_ORDER_TOL),
    ("relu", check_relu, FIRST_ORDER_TOL),
    ("leaky_relu", check_leaky_relu, FIRST_ORDER_TOL),
    ("tanh", check_tanh, FIRST_ORDER_TOL),
    ("sigmoid", check_sigmoid, FIRST_ORDER_TOL),
    ("residual_block", check_residual_block, FIRST_ORDER_TOL),
    ("blend", check_blend, FIRST_ORDER_TOL),
    ("cls_loss", check_cls_loss, FIRST_ORDER_TOL),
    ("cycle_loss", check_cycle_loss, FIRST_ORDER_TOL),
    ("identity_loss", check_identity_loss, FIRST_ORDER_TOL),
    ("d_adv_loss", check_d_adv_loss, FIRST_ORDER_TOL),
    ("g_adv_loss", check_g_adv_loss, FIRST_ORDER_TOL),
    ("gradient_penalty", check_gradient_penalty, PENALTY_TOL),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _, _)| *n).collect()
}

/// Runs every check whose name contains `filter` (all when `None`).
pub fn run_gradcheck(seed: u64, filter: Option<&str>) -> Result<Vec<CheckResult>> {
    let root = SatRng::new(seed);
    CHECKS
        .iter()
        .enumerate()
        .filter(|(_, (name, _, _))| filter.is_none_or(|f| name.contains(f)))
        .map(|(i, (op, check, threshold))| {
            Ok(CheckResult { op, max_rel_err: check(root.fork(i as u64).key())?, threshold: *threshold })
        })
        .collect()
}

struct Inputs {
    rng: SatRng,
}

impl Inputs {
    fn new(seed: u64) -> Self {
        Self { rng: SatRng::new(seed) }
    }

    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<f64>> {
        let tag = self.rng.below(usize::MAX) as u64;
        let seed = self.rng.fork(tag).key();
        Tensor::create(shape, FillKind::Uniform { lo, hi, seed })
    }

    /// Values in `[-1, -margin] u [margin, 1]`, clear of activation kinks.
    fn away_from_zero(&mut self, shape: &[usize], margin: f64) -> Result<Tensor<f64>> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let mag = self.rng.uniform(margin, 1.0);
                if self.rng.bernoulli(0.5) { mag } else { -mag }
            })
            .collect();
        Tensor::from_vec(data, shape)
    }
}

/// Max relative error between reverse-mode and central-difference gradients
/// of `f` with respect to each of `inputs`, others held fixed.
fn compare<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach().into_leaf(true)).collect();
    let loss = f(&leaves)?;
    let refs: Vec<&Tensor<f64>> = leaves.iter().collect();
    let grads = backward(&loss, &refs, false)?;
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let fd = finite_diff_gradient(
            |v| {
                let mut args = inputs.to_vec();
                args[i] = v.clone();
                f(&args)
            },
            &inputs[i],
            STEP,
        )?;
        worst = worst.max(max_rel_error(&grads.get_or_zeros(&leaves[i]), &fd));
    }
    Ok(worst)
}

/// Contracts `y` with a fixed random tensor so every output element matters.
fn project(y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let r = Tensor::create(y.shape(), FillKind::Uniform { lo: -1.0, hi: 1.0, seed })?;
    Ok(y.mul(&r)?.sum_all())
}

fn check_conv2d(seed: u64) -> Result<f64> {
    let mut r = Inputs::new(seed);
    let spec = ConvSpec::new(3, 4, 2, 1)?;
    let x = r.uniform(&[2, 3, 6, 6], -1.0, 1.0)?;
    let w = r.uniform(&[4, 3, 3, 3], -0.5, 0.5)?;
    let b = r.uniform(&[4], -0.5, 0.5)?;
    compare(&[x, w, b], |a| project(&nn::conv2d(&a[0], &a[1], Some(&a[2]), &spec)?, seed))
}

fn check_conv_transpose2d(seed: u64) -> Result<f64> {
    let mut r = Inputs::new(seed);
    let spec = ConvSpec::new(4, 3, 2, 1)?;
    let x = r.uniform(&[2, 4, 3, 3], -1.0, 1.0)?;
    let w = r.uniform(&[4, 3, 4, 4], -0.5, 0.5)?;
    let b = r.uniform(&[3], -0.5, 0.5)?;
    compare(&[x, w, b], |a| project(&nn::conv_transpose2d(&a[0], &a[1], Some(&a[2]), &spec)?, seed))
}

fn check_instance_norm(seed: u64) -> Result<f64> {
    let mut r = Inputs::new(seed);
    let x = r.uniform(&[2, 3, 4, 4], -1.0, 1.0)?;
    let g = r.uniform(&[3], 0.5, 1.5)?;
    let b = r.uniform(&[3], -0.5, 0.5)?;
    compare(&[x, g, b], |a| project(&nn::instance_norm(&a[0], &a[1], &a[2], IN_EPS)?, seed))
}

fn check_activation(seed: u64, kind: nn::Activation) -> Result<f64> {
    let x = Inputs::new(seed).away_from_zero(&[2, 3, 4, 4], 0.01)?;
    compare(&[x], |a| project(&nn::activation(kind, &a[0]), seed))
}

fn check_relu(seed: u64) -> Result<f64> {
    check_activation(seed, nn::Activation::Relu)
}

fn check_leaky_relu(seed: u64) -> Result<f64> {
    check_activation(seed, nn::Activation::LeakyRelu(LEAKY_SLOPE))
}

fn check_tanh(seed: u64) -> Result<f64> {
    check_activation(seed, nn::Activation::Tanh)
}

fn check_sigmoid(seed: u64) -> Result<f64> {
    check_activation(seed, nn::Activation::Sigmoid)
}

fn check_residual_block(seed: u64) -> Result<f64> {
    let mut r = Inputs::new(seed);
    let block = ResidualBlock::<f64>::new(3, seed)?;
    let mut inputs = vec![r.uniform(&[2, 3, 5, 5], -1.0, 1.0)?];
    inputs.extend(block.parameters());
    compare(&inputs, |a| {
        let mut b = block.clone();
        let mut i = 1;
        b.visit_mut("", &mut |_, p| {
            *p = a[i].clone();
            i += 1;
        });
        project(&b.forward(&a[0])?, seed)
    })
}

fn check_blend(seed: u64) -> Result<f64> {
    let mut r = Inputs::new(seed);
    let x = r.uniform(&[2, 3, 4, 4], -1.0, 1.0)?;
    let y = r.uniform(&[2, 3, 4, 4], -1.0, 1.0)?;
    let m = r.uniform(&[2, 1, 4, 4], 0.05, 0.95)?;
    compare(&[x, y, m], |a| project(&blend(&a[0], &a[1], &a[2])?, seed))
}

fn check_cls_loss(seed: u64) -> Result<f64> {
    let mut r = Inputs::new(seed);
    let z = r.uniform(&[4, 3], -4.0, 4.0)?;
    let t = r.uniform(&[4, 3], 0.0, 1.0)?;
    compare(&[z], |a| cls_loss(&a[0], &t))
}

fn check_l1(seed: u64, f: fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>) -> Result<f64> {
    let mut r = Inputs::new(seed);
    let x = r.uniform(&[2, 3, 4, 4], -1.0, 1.0)?;
    let gap = r.away_from_zero(&[2, 3, 4, 4], 0.01)?;
    let y = x.add(&gap)?;
    compare(&[x, y], |a| f(&a[0], &a[1]))
}

fn check_cycle_loss(seed: u64) -> Result<f64> {
    check_l1(seed, cycle_loss)
}

fn check_identity_loss(seed: u64) -> Result<f64> {
    check_l1(seed, identity_loss)
}

fn check_d_adv_loss(seed: u64) -> Result<f64> {
    let mut r = Inputs::new(seed);
    let real = r.uniform(&[5], -2.0, 2.0)?;
    let fake = r.uniform(&[5], -2.0, 2.0)?;
    compare(&[real, fake], |a| d_adv_loss(&a[0], &a[1]))
}

fn check_g_adv_loss(seed: u64) -> Result<f64> {
    let fake = Inputs::new(seed).uniform(&[5], -2.0, 2.0)?;
    compare(&[fake], |a| g_adv_loss(&a[0]))
}

/// Penalty of a two-layer convolutional critic, differentiated with respect
/// to the critic's parameters through the inner input-gradient.
fn check_gradient_penalty(seed: u64) -> Result<f64> {
    let mut r = Inputs::new(seed);
    let real = r.uniform(&[2, 3, 6, 6], -1.0, 1.0)?;
    let fake = r.uniform(&[2, 3, 6, 6], -1.0, 1.0)?;
    let eps = r.uniform(&[2], 0.0, 1.0)?;
    let params = vec![
        r.uniform(&[4, 3, 3, 3], -0.5, 0.5)?,
        r.uniform(&[4], -0.1, 0.1)?,
        r.uniform(&[1, 4, 3, 3], -0.5, 0.5)?,
        r.uniform(&[1], -0.1, 0.1)?,
    ];
    let s1 = ConvSpec::new(3, 4, 2, 1)?;
    let s2 = ConvSpec::new(3, 1, 1, 1)?;
    let penalty = |p: &[Tensor<f64>]| {
        gradient_penalty_with(
            |x| {
                let h = nn::conv2d(x, &p[0], Some(&p[1]), &s1)?.leaky_relu(0.2);
                let n = h.shape()[0];
                nn::conv2d(&h, &p[2], Some(&p[3]), &s2)?.mean_spatial()?.reshape(&[n])
            },
            &real,
            &fake,
            &eps,
        )
    };
    let leaves: Vec<_> = params.iter().map(|t| t.detach().into_leaf(true)).collect();
    let loss = penalty(&leaves)?;
    let refs: Vec<_> = leaves.iter().collect();
    let grads = backward(&loss, &refs, false)?;
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let fd = finite_diff_gradient_recorded(
            |v| {
                let mut args = params.clone();
                args[i] = v.clone();
                penalty(&args)
            },
            &params[i],
            STEP,
        )?;
        worst = worst.max(max_rel_error(&grads.get_or_zeros(&leaves[i]), &fd));
    }
    Ok(worst)
}

/// Penalty of the linear critic `D(x) = sum(x)` on `(n, 3, h, w)` inputs
/// together with its closed form `(sqrt(k) - 1)^2`, `k = 3hw`.
pub fn linear_penalty_case(n: usize, h: usize, w: usize, seed: u64) -> Result<(f64, f64)> {
    let mut r = Inputs::new(seed);
    let shape = [n, 3, h, w];
    let real = r.uniform(&shape, -1.0, 1.0)?;
    let fake = r.uniform(&shape, -1.0, 1.0)?;
    let eps = r.uniform(&[n], 0.0, 1.0)?;
    let got = gradient_penalty_with(|x| Ok(x.sum_per_sample()), &real, &fake, &eps)?.item()?;
    let k = (3 * h * w) as f64;
    Ok((got, (k.sqrt() - 1.0).powi(2)))
}
