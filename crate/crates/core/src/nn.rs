//! Layer primitives: convolution, transposed convolution, instance
//! normalisation, activations and residual blocks.

use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::SatRng;
use crate::tensor::{Float, Tensor};

/// Instance-norm epsilon.
pub const IN_EPS: f64 = 1e-5;
/// Default leaky-relu slope.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Kernel size, filter count, stride and padding; displayed as `k7n64s1p3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub filters: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, filters: usize, stride: usize, padding: usize) -> Result<Self> {
        if kernel == 0 || filters == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv spec needs k, n, s >= 1 (got k{kernel}n{filters}s{stride})"
            )));
        }
        Ok(Self { kernel, filters, stride, padding })
    }
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}n{}s{}p{}", self.kernel, self.filters, self.stride, self.padding)
    }
}

impl FromStr for ConvSpec {
    type Err = Error;

    /// Parses `k{k}n{n}s{s}` with an optional `p{p}` suffix (padding 0).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed conv spec {s:?}"));
        let mut fields = [None; 4];
        let mut rest = s;
        for (slot, tag) in fields.iter_mut().zip(['k', 'n', 's', 'p']) {
            let Some(tail) = rest.strip_prefix(tag) else {
                if tag == 'p' {
                    break;
                }
                return Err(bad());
            };
            let end = tail.find(|c: char| !c.is_ascii_digit()).unwrap_or(tail.len());
            *slot = Some(tail[..end].parse::<usize>().map_err(|_| bad())?);
            rest = &tail[end..];
        }
        if !rest.is_empty() {
            return Err(bad());
        }
        let [Some(k), Some(n), Some(st), p] = fields else {
            return Err(bad());
        };
        ConvSpec::new(k, n, st, p.unwrap_or(0))
    }
}

/// Anything that owns named trainable tensors.
pub trait Module<T: Float> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    /// Hash of every parameter name and bit pattern.
    fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.visit("", &mut |name, t| {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.to_f64_vec() {
                v.to_bits().hash(&mut h);
            }
        });
        h.finish()
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Float>(self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Relu => x.relu(),
            Activation::LeakyRelu(a) => x.leaky_relu(a),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

pub fn activation<T: Float>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    kind.apply(x)
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Float> {
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Float> Conv2d<T> {
    /// Xavier-initialised weight `(n, in_ch, k, k)`; zero bias when requested.
    pub fn new(in_ch: usize, spec: ConvSpec, bias: bool, seed: u64) -> Result<Self> {
        let k = spec.kernel;
        let weight = Tensor::xavier(
            in_ch * k * k,
            spec.filters * k * k,
            &[spec.filters, in_ch, k, k],
            seed,
        )?
        .into_leaf(true);
        let bias = if bias {
            Some(Tensor::zeros(&[spec.filters])?.into_leaf(true))
        } else {
            None
        };
        Ok(Self { spec, weight, bias })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, self.bias.as_ref(), &self.spec)
    }
}

pub fn conv2d<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let y = x.conv2d(weight, spec.stride, spec.padding)?;
    match bias {
        Some(b) => y.add_channel_bias(b),
        None => Ok(y),
    }
}

impl<T: Float> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Transposed convolution. The weight is stored as `(in_ch, n, k, k)`, the
/// layout of the convolution it is the adjoint of.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T: Float> {
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Float> ConvTranspose2d<T> {
    pub fn new(in_ch: usize, spec: ConvSpec, bias: bool, seed: u64) -> Result<Self> {
        let k = spec.kernel;
        let weight = Tensor::xavier(
            in_ch * k * k,
            spec.filters * k * k,
            &[in_ch, spec.filters, k, k],
            seed,
        )?
        .into_leaf(true);
        let bias = if bias {
            Some(Tensor::zeros(&[spec.filters])?.into_leaf(true))
        } else {
            None
        };
        Ok(Self { spec, weight, bias })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv_transpose2d(x, &self.weight, self.bias.as_ref(), &self.spec)
    }
}

pub fn conv_transpose2d<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let y = x.conv_transpose2d(weight, spec.stride, spec.padding, None)?;
    match bias {
        Some(b) => y.add_channel_bias(b),
        None => Ok(y),
    }
}

impl<T: Float> Module<T> for ConvTranspose2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Per-(sample, channel) standardisation over H x W with biased variance,
/// followed by a per-channel affine map.
pub fn instance_norm<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (_, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "instance_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let mean = x.mean_spatial()?.replicate_spatial(h, w)?;
    let centered = x.sub(&mean)?;
    let var = centered.mul(&centered)?.mean_spatial()?;
    let inv_std = var.add_scalar(eps).powf(-0.5).replicate_spatial(h, w)?;
    centered.mul(&inv_std)?.channel_affine(gamma, beta)
}

#[derive(Clone, Debug)]
pub struct InstanceNorm<T: Float> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Float> InstanceNorm<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::ones(&[channels])?.into_leaf(true),
            beta: Tensor::zeros(&[channels])?.into_leaf(true),
            eps: IN_EPS,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        instance_norm(x, &self.gamma, &self.beta, self.eps)
    }
}

impl<T: Float> Module<T> for InstanceNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// `x + IN(conv(relu(IN(conv(x)))))` with two k3 s1 p1 convolutions.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T: Float> {
    pub conv1: Conv2d<T>,
    pub norm1: InstanceNorm<T>,
    pub conv2: Conv2d<T>,
    pub norm2: InstanceNorm<T>,
}

impl<T: Float> ResidualBlock<T> {
    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        let rng = SatRng::new(seed);
        let spec = ConvSpec::new(3, channels, 1, 1)?;
        Ok(Self {
            conv1: Conv2d::new(channels, spec, false, rng.fork(0).key())?,
            norm1: InstanceNorm::new(channels)?,
            conv2: Conv2d::new(channels, spec, false, rng.fork(1).key())?,
            norm2: InstanceNorm::new(channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.conv1.in_channels() {
            return Err(Error::ShapeMismatch {
                op: "residual_block",
                lhs: x.shape().to_vec(),
                rhs: self.conv1.weight.shape().to_vec(),
            });
        }
        let h = self.norm1.forward(&self.conv1.forward(x)?)?.relu();
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        x.add(&h)
    }
}

pub fn residual_block<T: Float>(x: &Tensor<T>, params: &ResidualBlock<T>) -> Result<Tensor<T>> {
    params.forward(x)
}

impl<T: Float> Module<T> for ResidualBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, finite_diff_gradient, max_rel_error, FillKind};

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::create(shape, FillKind::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap()
    }

    #[test]
    fn spec_parsing() {
        let s: ConvSpec = "k7n64s1".parse().unwrap();
        assert_eq!(s, ConvSpec { kernel: 7, filters: 64, stride: 1, padding: 0 });
        let s: ConvSpec = "k4n128s2p1".parse().unwrap();
        assert_eq!(s.to_string(), "k4n128s2p1");
        for bad in ["", "k7", "n64s1", "k0n1s1", "k3n4s1x", "k3n4s0"] {
            assert!(bad.parse::<ConvSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn instance_norm_constant_input_yields_beta() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 3], 4.2).unwrap();
        let g = Tensor::ones(&[2]).unwrap();
        let b = Tensor::full(&[2], 0.3).unwrap();
        let y = instance_norm(&x, &g, &b, IN_EPS).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn instance_norm_two_point() {
        let x = Tensor::<f64>::from_f64(&[1.0, 3.0], &[1, 1, 1, 2]).unwrap();
        let g = Tensor::ones(&[1]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = instance_norm(&x, &g, &b, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn instance_norm_gradients() {
        let x = rand(&[2, 3, 4, 4], 1).into_leaf(true);
        let gamma = rand(&[3], 2).into_leaf(true);
        let beta = rand(&[3], 3).into_leaf(true);
        let w = rand(&[2, 3, 4, 4], 4);
        let loss = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
            Ok(instance_norm(x, g, b, IN_EPS)?.mul(&w)?.sum_all())
        };
        let l = loss(&x, &gamma, &beta).unwrap();
        let grads = backward(&l, &[&x, &gamma, &beta], false).unwrap();
        let fx = finite_diff_gradient(|v| loss(v, &gamma, &beta), &x, 1e-5).unwrap();
        let fg = finite_diff_gradient(|v| loss(&x, v, &beta), &gamma, 1e-5).unwrap();
        let fb = finite_diff_gradient(|v| loss(&x, &gamma, v), &beta, 1e-5).unwrap();
        assert!(max_rel_error(grads.get(&x).unwrap(), &fx) < 1e-4);
        assert!(max_rel_error(grads.get(&gamma).unwrap(), &fg) < 1e-4);
        assert!(max_rel_error(grads.get(&beta).unwrap(), &fb) < 1e-4);
    }

    #[test]
    fn zero_branch_residual_is_identity() {
        let mut block = ResidualBlock::<f64>::new(3, 5).unwrap();
        block.visit_mut("", &mut |name, t| {
            if name.ends_with("weight") {
                *t = Tensor::zeros(t.shape()).unwrap().into_leaf(true);
            }
        });
        let x = rand(&[2, 3, 5, 5], 6).into_leaf(true);
        let y = block.forward(&x).unwrap();
        assert_eq!(y.data(), x.data());
        let up = rand(&[2, 3, 5, 5], 7);
        let g = backward(&y.mul(&up).unwrap().sum_all(), &[&x], false).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), up.data());
    }

    #[test]
    fn residual_shapes_and_channel_check() {
        let block = ResidualBlock::<f64>::new(4, 1).unwrap();
        let x = rand(&[1, 4, 6, 6], 2);
        assert_eq!(block.forward(&x).unwrap().shape(), x.shape());
        assert!(block.forward(&rand(&[1, 3, 6, 6], 3)).is_err());
        assert_eq!(block.named_parameters().len(), 6);
    }

    #[test]
    fn layer_parameter_naming() {
        let c = Conv2d::<f32>::new(3, ConvSpec::new(3, 8, 1, 1).unwrap(), true, 1).unwrap();
        let names: Vec<_> = c.named_parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["weight", "bias"]);
        assert!(c.bias.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        let t = ConvTranspose2d::<f32>::new(8, ConvSpec::new(4, 4, 2, 1).unwrap(), false, 1).unwrap();
        assert_eq!(t.weight.shape(), &[8, 4, 4, 4]);
        let x = Tensor::<f32>::zeros(&[1, 8, 5, 5]).unwrap();
        assert_eq!(t.forward(&x).unwrap().shape(), &[1, 4, 10, 10]);
    }
}
