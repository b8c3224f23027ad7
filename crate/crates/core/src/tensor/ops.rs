//! Elementwise, reduction and layout operations.
//!
//! Backward rules are expressed with these same operations so that they can
//! be recorded when a graph of gradients is requested.

use super::{Float, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn map<T: Float>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Vec<T> {
    x.data().iter().map(|&v| f(v)).collect()
}

fn zip<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn rank4<T: Float>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    x.dims4().map_err(|_| Error::ShapeMismatch {
        op,
        lhs: x.shape().to_vec(),
        rhs: vec![],
    })
}

fn constant<T: Float>(data: Vec<T>, shape: &[usize]) -> Tensor<T> {
    Tensor::from_vec(data, shape).expect("shape derived from an existing tensor")
}

impl<T: Float> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        Ok(Tensor::record(
            "add",
            zip(self, other, |a, b| a + b),
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |g, _| Ok(vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        Ok(Tensor::record(
            "sub",
            zip(self, other, |a, b| a - b),
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |g, _| Ok(vec![Some(g.clone()), Some(g.neg())]),
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::record(
            "mul",
            zip(self, other, |a, b| a * b),
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            move |g, needs| {
                Ok(vec![
                    if needs[0] { Some(g.mul(&b)?) } else { None },
                    if needs[1] { Some(g.mul(&a)?) } else { None },
                ])
            },
        ))
    }

    pub fn neg(&self) -> Tensor<T> {
        Tensor::record(
            "neg",
            map(self, |v| -v),
            self.shape().to_vec(),
            vec![self.clone()],
            |g, _| Ok(vec![Some(g.neg())]),
        )
    }

    pub fn scale(&self, s: f64) -> Tensor<T> {
        let st = T::of(s);
        Tensor::record(
            "scale",
            map(self, |v| v * st),
            self.shape().to_vec(),
            vec![self.clone()],
            move |g, _| Ok(vec![Some(g.scale(s))]),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<T> {
        let st = T::of(s);
        Tensor::record(
            "add_scalar",
            map(self, |v| v + st),
            self.shape().to_vec(),
            vec![self.clone()],
            |g, _| Ok(vec![Some(g.clone())]),
        )
    }

    /// `|x|`, with subgradient 0 at 0.
    pub fn abs(&self) -> Tensor<T> {
        let x = self.clone();
        Tensor::record(
            "abs",
            map(self, |v| v.abs()),
            self.shape().to_vec(),
            vec![self.clone()],
            move |g, _| {
                let sign = constant(
                    map(&x, |v| {
                        if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    }),
                    x.shape(),
                );
                Ok(vec![Some(g.mul(&sign)?)])
            },
        )
    }

    pub fn powf(&self, p: f64) -> Tensor<T> {
        let pt = T::of(p);
        let x = self.clone();
        Tensor::record(
            "powf",
            map(self, |v| v.powf(pt)),
            self.shape().to_vec(),
            vec![self.clone()],
            move |g, _| Ok(vec![Some(g.mul(&x.powf(p - 1.0))?.scale(p))]),
        )
    }

    /// `1/x`, defined as 0 where `x == 0`.
    pub fn recip_or_zero(&self) -> Tensor<T> {
        let x = self.clone();
        Tensor::record(
            "recip_or_zero",
            map(self, |v| if v == T::zero() { T::zero() } else { v.recip() }),
            self.shape().to_vec(),
            vec![self.clone()],
            move |g, _| {
                let r = x.recip_or_zero();
                Ok(vec![Some(g.mul(&r.mul(&r)?)?.neg())])
            },
        )
    }

    /// relu'(0) = 0.
    pub fn relu(&self) -> Tensor<T> {
        self.leaky_relu(0.0)
    }

    /// Leaky rectifier with slope `alpha` for `x <= 0`; derivative at 0 is `alpha`.
    pub fn leaky_relu(&self, alpha: f64) -> Tensor<T> {
        let a = T::of(alpha);
        let x = self.clone();
        Tensor::record(
            if alpha == 0.0 { "relu" } else { "leaky_relu" },
            map(self, |v| if v > T::zero() { v } else { v * a }),
            self.shape().to_vec(),
            vec![self.clone()],
            move |g, _| {
                let mask = constant(
                    map(&x, |v| if v > T::zero() { T::one() } else { a }),
                    x.shape(),
                );
                Ok(vec![Some(g.mul(&mask)?)])
            },
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        let x = self.clone();
        Tensor::record(
            "tanh",
            map(self, |v| v.tanh()),
            self.shape().to_vec(),
            vec![self.clone()],
            move |g, _| {
                let y = x.tanh();
                let d = y.mul(&y)?.neg().add_scalar(1.0);
                Ok(vec![Some(g.mul(&d)?)])
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let x = self.clone();
        Tensor::record(
            "sigmoid",
            map(self, sigmoid),
            self.shape().to_vec(),
            vec![self.clone()],
            move |g, _| {
                let y = x.sigmoid();
                let d = y.mul(&y.neg().add_scalar(1.0))?;
                Ok(vec![Some(g.mul(&d)?)])
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let orig = self.shape().to_vec();
        Ok(Tensor::record(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            move |g, _| Ok(vec![Some(g.reshape(&orig)?)]),
        ))
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let shape = self.shape().to_vec();
        Tensor::record(
            "sum_all",
            vec![self.data().iter().copied().sum()],
            vec![1],
            vec![self.clone()],
            move |g, _| Ok(vec![Some(g.expand_scalar(&shape)?)]),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Broadcast a single-element tensor to `shape`.
    pub fn expand_scalar(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let v = self.item()?;
        let n: usize = shape.iter().product();
        let own = self.shape().to_vec();
        Ok(Tensor::record(
            "expand_scalar",
            vec![v; n],
            shape.to_vec(),
            vec![self.clone()],
            move |g, _| Ok(vec![Some(g.sum_all().reshape(&own)?)]),
        ))
    }

    /// Multiply every element by the single-element tensor `s`.
    pub fn scale_by(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        let sv = s.item()?;
        let (x, st) = (self.clone(), s.clone());
        Ok(Tensor::record(
            "scale_by",
            map(self, |v| v * sv),
            self.shape().to_vec(),
            vec![self.clone(), s.clone()],
            move |g, needs| {
                Ok(vec![
                    if needs[0] { Some(g.scale_by(&st)?) } else { None },
                    if needs[1] {
                        Some(g.mul(&x)?.sum_all().reshape(st.shape())?)
                    } else {
                        None
                    },
                ])
            },
        ))
    }

    /// `(N, C)` -> `(N, C, h, w)`, constant over each spatial map.
    pub fn replicate_spatial(&self, h: usize, w: usize) -> Result<Tensor<T>> {
        let &[n, c] = self.shape() else {
            return Err(Error::InvalidShape(self.shape().to_vec(), "expected (N, n)"));
        };
        if h == 0 || w == 0 {
            return Err(Error::InvalidShape(vec![n, c, h, w], "extents must be positive"));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c * hw);
        for &v in self.data() {
            out.extend(std::iter::repeat_n(v, hw));
        }
        Ok(Tensor::record(
            "replicate_spatial",
            out,
            vec![n, c, h, w],
            vec![self.clone()],
            |g, _| Ok(vec![Some(g.sum_spatial()?)]),
        ))
    }

    /// `(N, C, H, W)` -> `(N, C)`.
    pub fn sum_spatial(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = rank4("sum_spatial", self)?;
        let out = self
            .data()
            .chunks_exact(h * w)
            .map(|ch| ch.iter().copied().sum())
            .collect();
        Ok(Tensor::record(
            "sum_spatial",
            out,
            vec![n, c],
            vec![self.clone()],
            move |g, _| Ok(vec![Some(g.replicate_spatial(h, w)?)]),
        ))
    }

    pub fn mean_spatial(&self) -> Result<Tensor<T>> {
        let (_, _, h, w) = rank4("mean_spatial", self)?;
        Ok(self.sum_spatial()?.scale(1.0 / (h * w) as f64))
    }

    /// `(C)` -> `(n, C, h, w)`.
    pub fn channel_broadcast(&self, n: usize, h: usize, w: usize) -> Result<Tensor<T>> {
        let &[c] = self.shape() else {
            return Err(Error::InvalidShape(self.shape().to_vec(), "expected (C)"));
        };
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c * hw);
        for _ in 0..n {
            for &v in self.data() {
                out.extend(std::iter::repeat_n(v, hw));
            }
        }
        Ok(Tensor::record(
            "channel_broadcast",
            out,
            vec![n, c, h, w],
            vec![self.clone()],
            |g, _| Ok(vec![Some(g.sum_nhw()?)]),
        ))
    }

    /// `(N, C, H, W)` -> `(C)`.
    pub fn sum_nhw(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = rank4("sum_nhw", self)?;
        let mut out = vec![T::zero(); c];
        for (i, ch) in self.data().chunks_exact(h * w).enumerate() {
            out[i % c] += ch.iter().copied().sum();
        }
        Ok(Tensor::record(
            "sum_nhw",
            out,
            vec![c],
            vec![self.clone()],
            move |g, _| Ok(vec![Some(g.channel_broadcast(n, h, w)?)]),
        ))
    }

    /// Per-channel affine map `x * scale[c] + shift[c]`.
    pub fn channel_affine(&self, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, _, h, w) = rank4("channel_affine", self)?;
        self.mul(&scale.channel_broadcast(n, h, w)?)?
            .add(&shift.channel_broadcast(n, h, w)?)
    }

    pub fn add_channel_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, _, h, w) = rank4("add_channel_bias", self)?;
        self.add(&bias.channel_broadcast(n, h, w)?)
    }

    /// `(N, 1, H, W)` -> `(N, k, H, W)`.
    pub fn repeat_channels(&self, k: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = rank4("repeat_channels", self)?;
        if c != 1 || k == 0 {
            return Err(Error::InvalidShape(self.shape().to_vec(), "expected one channel"));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * k * hw);
        for plane in self.data().chunks_exact(hw) {
            for _ in 0..k {
                out.extend_from_slice(plane);
            }
        }
        Ok(Tensor::record(
            "repeat_channels",
            out,
            vec![n, k, h, w],
            vec![self.clone()],
            |g, _| Ok(vec![Some(g.sum_channels()?)]),
        ))
    }

    /// `(N, C, H, W)` -> `(N, 1, H, W)`.
    pub fn sum_channels(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = rank4("sum_channels", self)?;
        let hw = h * w;
        let mut out = vec![T::zero(); n * hw];
        for (s, sample) in self.data().chunks_exact(c * hw).enumerate() {
            let dst = &mut out[s * hw..(s + 1) * hw];
            for plane in sample.chunks_exact(hw) {
                for (d, &v) in dst.iter_mut().zip(plane) {
                    *d += v;
                }
            }
        }
        Ok(Tensor::record(
            "sum_channels",
            out,
            vec![n, 1, h, w],
            vec![self.clone()],
            move |g, _| Ok(vec![Some(g.repeat_channels(c)?)]),
        ))
    }

    /// Depth-wise concatenation; `self`'s channels come first.
    pub fn concat_channels(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, ca, h, w) = rank4("concat_channels", self)?;
        let (nb, cb, hb, wb) = rank4("concat_channels", other)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&self.data()[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&other.data()[s * cb * hw..(s + 1) * cb * hw]);
        }
        Ok(Tensor::record(
            "concat_channels",
            out,
            vec![n, ca + cb, h, w],
            vec![self.clone(), other.clone()],
            move |g, needs| {
                Ok(vec![
                    if needs[0] { Some(g.narrow_channels(0, ca)?) } else { None },
                    if needs[1] { Some(g.narrow_channels(ca, cb)?) } else { None },
                ])
            },
        ))
    }

    /// Channels `start..start + len`.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = rank4("narrow_channels", self)?;
        if len == 0 || start + len > c {
            return Err(Error::InvalidArgument(format!(
                "channel range {start}..{} out of 0..{c}",
                start + len
            )));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            let base = s * c * hw;
            out.extend_from_slice(&self.data()[base + start * hw..base + (start + len) * hw]);
        }
        let after = c - start - len;
        Ok(Tensor::record(
            "narrow_channels",
            out,
            vec![n, len, h, w],
            vec![self.clone()],
            move |g, _| Ok(vec![Some(g.pad_channels(start, after)?)]),
        ))
    }

    /// Zero channels before and after; adjoint of [`Tensor::narrow_channels`].
    pub fn pad_channels(&self, before: usize, after: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = rank4("pad_channels", self)?;
        let hw = h * w;
        let total = before + c + after;
        let mut out = vec![T::zero(); n * total * hw];
        for s in 0..n {
            let dst = s * total * hw + before * hw;
            out[dst..dst + c * hw].copy_from_slice(&self.data()[s * c * hw..(s + 1) * c * hw]);
        }
        Ok(Tensor::record(
            "pad_channels",
            out,
            vec![n, total, h, w],
            vec![self.clone()],
            move |g, _| Ok(vec![Some(g.narrow_channels(before, c)?)]),
        ))
    }

    /// `(N)` -> `shape` with `shape[0] == N`, constant within each sample.
    pub fn sample_broadcast(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let &[n] = self.shape() else {
            return Err(Error::InvalidShape(self.shape().to_vec(), "expected (N)"));
        };
        if shape.first() != Some(&n) {
            return Err(Error::ShapeMismatch {
                op: "sample_broadcast",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let per: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(n * per);
        for &v in self.data() {
            out.extend(std::iter::repeat_n(v, per));
        }
        Ok(Tensor::record(
            "sample_broadcast",
            out,
            shape.to_vec(),
            vec![self.clone()],
            |g, _| Ok(vec![Some(g.sum_per_sample())]),
        ))
    }

    /// Sum over every axis but the first: `(N, ...)` -> `(N)`.
    pub fn sum_per_sample(&self) -> Tensor<T> {
        let n = self.shape()[0];
        let per = self.numel() / n;
        let shape = self.shape().to_vec();
        Tensor::record(
            "sum_per_sample",
            self.data()
                .chunks_exact(per)
                .map(|s| s.iter().copied().sum())
                .collect(),
            vec![n],
            vec![self.clone()],
            move |g, _| Ok(vec![Some(g.sample_broadcast(&shape)?)]),
        )
    }

    /// Euclidean norm of each sample: `(N, ...)` -> `(N)`. The gradient at a
    /// zero sample is taken as 0.
    pub fn norm_per_sample(&self) -> Tensor<T> {
        let n = self.shape()[0];
        let per = self.numel() / n;
        let x = self.clone();
        Tensor::record(
            "norm_per_sample",
            self.data()
                .chunks_exact(per)
                .map(|s| s.iter().map(|&v| v * v).sum::<T>().sqrt())
                .collect(),
            vec![n],
            vec![self.clone()],
            move |g, _| {
                let inv = x.norm_per_sample().recip_or_zero();
                Ok(vec![Some(
                    x.mul(&g.mul(&inv)?.sample_broadcast(x.shape())?)?,
                )])
            },
        )
    }

    /// Mean of `|self - other|` over all elements.
    pub fn l1_mean(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.sub(other)?.abs().mean_all())
    }

    /// Mean binary cross-entropy of logits `self` against `targets` in
    /// `[0, 1]`, using `max(z, 0) - z t + ln(1 + e^{-|z|})`. Targets are
    /// treated as constants.
    pub fn bce_with_logits(&self, targets: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("bce_with_logits", self, targets)?;
        if let Some(bad) = targets
            .data()
            .iter()
            .find(|&&t| !(t >= T::zero() && t <= T::one()))
        {
            return Err(Error::InvalidArgument(format!(
                "classification target {bad} outside [0, 1]"
            )));
        }
        let n = self.numel();
        let total: f64 = self
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| {
                let (z, t) = (z.as_f64(), t.as_f64());
                z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let z = self.clone();
        let t = targets.detach();
        Ok(Tensor::record(
            "bce_with_logits",
            vec![T::of(total / n as f64)],
            vec![1],
            vec![self.clone()],
            move |g, _| {
                let d = z.sigmoid().sub(&t)?.scale(1.0 / n as f64);
                Ok(vec![Some(d.scale_by(g)?)])
            },
        ))
    }

    /// Mirror the width axis of an `(N, C, H, W)` tensor (constant op).
    pub fn flip_width(&self) -> Result<Tensor<T>> {
        let (_, _, _, w) = rank4("flip_width", self)?;
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data().chunks_exact(w) {
            out.extend(row.iter().rev());
        }
        Tensor::from_vec(out, self.shape())
    }
}

pub(crate) fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
