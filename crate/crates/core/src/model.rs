//! Domain vectors, the attention generator and the multi-task discriminator.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, ConvSpec, ConvTranspose2d, InstanceNorm, Module, ResidualBlock, LEAKY_SLOPE};
use crate::rng::SatRng;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VectorKind {
    Label,
    Action,
}

impl VectorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VectorKind::Label => "label",
            VectorKind::Action => "action",
        }
    }
}

impl fmt::Display for VectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InjectPhase {
    Raw,
    Latent,
}

/// One of the four (vector kind, injection phase) combinations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Variant {
    pub kind: VectorKind,
    pub phase: InjectPhase,
}

impl Variant {
    pub const LR: Variant = Variant { kind: VectorKind::Label, phase: InjectPhase::Raw };
    pub const LL: Variant = Variant { kind: VectorKind::Label, phase: InjectPhase::Latent };
    pub const AR: Variant = Variant { kind: VectorKind::Action, phase: InjectPhase::Raw };
    pub const AL: Variant = Variant { kind: VectorKind::Action, phase: InjectPhase::Latent };
    pub const ALL: [Variant; 4] = [Self::LR, Self::LL, Self::AR, Self::AL];

    pub fn code(self) -> &'static str {
        match (self.kind, self.phase) {
            (VectorKind::Label, InjectPhase::Raw) => "lr",
            (VectorKind::Label, InjectPhase::Latent) => "ll",
            (VectorKind::Action, InjectPhase::Raw) => "ar",
            (VectorKind::Action, InjectPhase::Latent) => "al",
        }
    }
}

impl Default for Variant {
    fn default() -> Self {
        Self::AL
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts `al` or `sat-al` (any case).
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let code = lower.strip_prefix("sat-").unwrap_or(&lower);
        Self::ALL
            .into_iter()
            .find(|v| v.code() == code)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?} (expected lr, ll, ar or al)")))
    }
}

/// Per-domain attribute presence `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVector(pub Vec<f64>);

/// Per-domain edit `a = c_t - c_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionVector(pub Vec<f64>);

impl LabelVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

impl ActionVector {
    pub fn zero(n: usize) -> Self {
        ActionVector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

pub fn action_from_labels(c_t: &LabelVector, c_s: &LabelVector) -> Result<ActionVector> {
    if c_t.len() != c_s.len() {
        return Err(Error::InvalidArgument(format!(
            "label lengths differ: {} vs {}",
            c_t.len(),
            c_s.len()
        )));
    }
    Ok(ActionVector(c_t.0.iter().zip(&c_s.0).map(|(t, s)| t - s).collect()))
}

pub fn reverse_action(a: &ActionVector) -> ActionVector {
    ActionVector(a.0.iter().map(|v| -v).collect())
}

/// A batch of conditioning vectors, `(N, n)`, tagged with its kind.
#[derive(Clone, Debug)]
pub struct Condition<T: Float = f32> {
    pub kind: VectorKind,
    pub values: Tensor<T>,
}

impl<T: Float> Condition<T> {
    pub fn new(kind: VectorKind, values: Tensor<T>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::InvalidShape(values.shape().to_vec(), "condition must be (N, n)"));
        }
        Ok(Self { kind, values })
    }

    pub fn labels(values: Tensor<T>) -> Result<Self> {
        Self::new(VectorKind::Label, values)
    }

    pub fn actions(values: Tensor<T>) -> Result<Self> {
        Self::new(VectorKind::Action, values)
    }

    pub fn from_rows(kind: VectorKind, rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument("condition rows differ in length".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(kind, Tensor::from_f64(&flat, &[rows.len(), n])?)
    }

    /// Same vector for every sample in a batch of `n_samples`.
    pub fn repeat(kind: VectorKind, v: &[f64], n_samples: usize) -> Result<Self> {
        Self::from_rows(kind, &vec![v.to_vec(); n_samples])
    }

    /// `a_t = c_t - c_s` row-wise.
    pub fn action_between(c_t: &Tensor<T>, c_s: &Tensor<T>) -> Result<Self> {
        Self::actions(c_t.sub(c_s)?)
    }

    pub fn reversed(&self) -> Self {
        Self { kind: self.kind, values: self.values.neg() }
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Architecture hyperparameters shared by G and D.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub image_size: usize,
    pub base_filters: usize,
    pub n_resblocks: usize,
    pub n_domains: usize,
    /// Stride-2 layers in D; `None` picks `min(6, log2(image_size))`.
    pub d_layers: Option<usize>,
}

impl ArchConfig {
    pub fn desk() -> Self {
        Self { image_size: 32, base_filters: 16, n_resblocks: 2, n_domains: 3, d_layers: None }
    }

    pub fn full_scale() -> Self {
        Self { image_size: 128, base_filters: 64, n_resblocks: 6, n_domains: 7, d_layers: None }
    }

    pub fn latent_channels(&self) -> usize {
        4 * self.base_filters
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn d_depth(&self) -> usize {
        self.d_layers
            .unwrap_or_else(|| (self.image_size.max(1).ilog2() as usize).min(6))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.image_size < 4 || !self.image_size.is_multiple_of(4) {
            return bad(format!("image size {} must be a positive multiple of 4", self.image_size));
        }
        if self.base_filters == 0 || self.n_domains == 0 {
            return bad("base_filters and n_domains must be positive".into());
        }
        let depth = self.d_depth();
        if depth == 0 {
            return bad("discriminator needs at least one layer".into());
        }
        let mut s = self.image_size;
        for layer in 0..depth {
            if s < 2 {
                return bad(format!(
                    "discriminator spatial size collapses below 1 at layer {} for image size {}",
                    layer + 1,
                    self.image_size
                ));
            }
            s /= 2;
        }
        Ok(())
    }

    pub fn d_final_size(&self) -> usize {
        self.image_size >> self.d_depth()
    }
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Concatenates the spatially replicated vectors `(N, n)` onto `x`. `expected`
/// is the channel count `x` must have at this injection point.
pub fn inject_vector<T: Float>(x: &Tensor<T>, v: &Tensor<T>, expected: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if c != expected {
        return Err(Error::InvalidArgument(format!(
            "injection point expects {expected} channels, tensor has {c}"
        )));
    }
    if v.rank() != 2 || v.shape()[0] != n {
        return Err(Error::ShapeMismatch { op: "inject_vector", lhs: x.shape().to_vec(), rhs: v.shape().to_vec() });
    }
    x.concat_channels(&v.replicate_spatial(h, w)?)
}

#[derive(Clone, Debug)]
struct ConvNorm<T: Float> {
    conv: Conv2d<T>,
    norm: InstanceNorm<T>,
}

impl<T: Float> ConvNorm<T> {
    fn new(in_ch: usize, spec: ConvSpec, seed: u64) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(in_ch, spec, false, seed)?, norm: InstanceNorm::new(spec.filters)? })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu())
    }
}

impl<T: Float> Module<T> for ConvNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

#[derive(Clone, Debug)]
struct UpNorm<T: Float> {
    conv: ConvTranspose2d<T>,
    norm: InstanceNorm<T>,
}

impl<T: Float> UpNorm<T> {
    fn new(in_ch: usize, spec: ConvSpec, seed: u64) -> Result<Self> {
        Ok(Self { conv: ConvTranspose2d::new(in_ch, spec, false, seed)?, norm: InstanceNorm::new(spec.filters)? })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu())
    }
}

impl<T: Float> Module<T> for UpNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Encoder, residual blocks and decoder. Output is `(N, F, H, W)`.
#[derive(Clone, Debug)]
pub struct Backbone<T: Float = f32> {
    arch: ArchConfig,
    phase: InjectPhase,
    stem: ConvNorm<T>,
    down: [ConvNorm<T>; 2],
    /// Un-normalized 1x1 conv + relu bringing `4F + n` channels back to `4F`
    /// after latent injection.
    fuse: Option<Conv2d<T>>,
    blocks: Vec<ResidualBlock<T>>,
    up: [UpNorm<T>; 2],
}

impl<T: Float> Backbone<T> {
    pub fn new(arch: ArchConfig, phase: InjectPhase, seed: u64) -> Result<Self> {
        arch.validate()?;
        let rng = SatRng::new(seed);
        let f = arch.base_filters;
        let n = arch.n_domains;
        let stem_in = match phase {
            InjectPhase::Raw => 3 + n,
            InjectPhase::Latent => 3,
        };
        let fuse = match phase {
            InjectPhase::Raw => None,
            InjectPhase::Latent => Some(Conv2d::new(4 * f + n, ConvSpec::new(1, 4 * f, 1, 0)?, true, rng.fork(4).key())?),
        };
        Ok(Self {
            arch,
            phase,
            stem: ConvNorm::new(stem_in, ConvSpec::new(7, f, 1, 3)?, rng.fork(1).key())?,
            down: [
                ConvNorm::new(f, ConvSpec::new(4, 2 * f, 2, 1)?, rng.fork(2).key())?,
                ConvNorm::new(2 * f, ConvSpec::new(4, 4 * f, 2, 1)?, rng.fork(3).key())?,
            ],
            fuse,
            blocks: (0..arch.n_resblocks)
                .map(|i| ResidualBlock::new(4 * f, rng.fork(100 + i as u64).key()))
                .collect::<Result<_>>()?,
            up: [
                UpNorm::new(4 * f, ConvSpec::new(4, 2 * f, 2, 1)?, rng.fork(5).key())?,
                UpNorm::new(2 * f, ConvSpec::new(4, f, 2, 1)?, rng.fork(6).key())?,
            ],
        })
    }

    /// Encoder output before any latent injection, `(N, 4F, H/4, W/4)`.
    pub fn encode(&self, x: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        let h = match self.phase {
            InjectPhase::Raw => inject_vector(x, v, 3)?,
            InjectPhase::Latent => x.clone(),
        };
        let h = self.stem.forward(&h)?;
        let h = self.down[0].forward(&h)?;
        self.down[1].forward(&h)
    }

    pub fn forward(&self, x: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, hh, ww) = x.dims4()?;
        if hh != self.arch.image_size || ww != self.arch.image_size {
            return Err(Error::InvalidArgument(format!(
                "expected {0}x{0} input, got {hh}x{ww}",
                self.arch.image_size
            )));
        }
        if v.rank() != 2 || v.shape()[1] != self.arch.n_domains {
            return Err(Error::InvalidArgument(format!(
                "conditioning vector must have {} entries, got shape {:?}",
                self.arch.n_domains,
                v.shape()
            )));
        }
        let mut h = self.encode(x, v)?;
        if let Some(fuse) = &self.fuse {
            h = fuse.forward(&inject_vector(&h, v, self.arch.latent_channels())?)?.relu();
        }
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        let h = self.up[0].forward(&h)?;
        self.up[1].forward(&h)
    }
}

impl<T: Float> Module<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, d) in self.down.iter().enumerate() {
            d.visit(&join(prefix, &format!("down{i}")), f);
        }
        if let Some(fuse) = &self.fuse {
            fuse.visit(&join(prefix, "fuse"), f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("res{i}")), f);
        }
        for (i, u) in self.up.iter().enumerate() {
            u.visit(&join(prefix, &format!("up{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, d) in self.down.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("down{i}")), f);
        }
        if let Some(fuse) = &mut self.fuse {
            fuse.visit_mut(&join(prefix, "fuse"), f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("res{i}")), f);
        }
        for (i, u) in self.up.iter_mut().enumerate() {
            u.visit_mut(&join(prefix, &format!("up{i}")), f);
        }
    }
}

/// `y = M * y' + (1 - M) * x` with the single-channel mask repeated over RGB.
pub fn blend<T: Float>(x: &Tensor<T>, y_prime: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if y_prime.shape() != x.shape() || mask.shape() != [n, 1, h, w] {
        return Err(Error::ShapeMismatch { op: "blend", lhs: x.shape().to_vec(), rhs: mask.shape().to_vec() });
    }
    let m = mask.repeat_channels(c)?;
    let keep = m.neg().add_scalar(1.0);
    m.mul(y_prime)?.add(&keep.mul(x)?)
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput<T: Float = f32> {
    pub y: Tensor<T>,
    pub y_prime: Tensor<T>,
    pub mask: Tensor<T>,
}

/// Translation network and attention network with independent backbones.
#[derive(Clone, Debug)]
pub struct Generator<T: Float = f32> {
    pub arch: ArchConfig,
    pub variant: Variant,
    tn: Backbone<T>,
    tn_head: Conv2d<T>,
    an: Backbone<T>,
    an_head: Conv2d<T>,
}

impl<T: Float> Generator<T> {
    pub fn new(arch: ArchConfig, variant: Variant, seed: u64) -> Result<Self> {
        let rng = SatRng::new(seed);
        let f = arch.base_filters;
        Ok(Self {
            arch,
            variant,
            tn: Backbone::new(arch, variant.phase, rng.fork(1).key())?,
            tn_head: Conv2d::new(f, ConvSpec::new(7, 3, 1, 3)?, true, rng.fork(2).key())?,
            an: Backbone::new(arch, variant.phase, rng.fork(3).key())?,
            an_head: Conv2d::new(f, ConvSpec::new(7, 1, 1, 3)?, true, rng.fork(4).key())?,
        })
    }

    fn check(&self, x: &Tensor<T>, cond: &Condition<T>) -> Result<()> {
        if cond.kind != self.variant.kind {
            return Err(Error::VectorKind { expected: self.variant.kind.as_str(), got: cond.kind.as_str() });
        }
        let (n, c, _, _) = x.dims4()?;
        if c != 3 || cond.batch() != n {
            return Err(Error::ShapeMismatch {
                op: "generator",
                lhs: x.shape().to_vec(),
                rhs: cond.values.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Raw translation `y'` in (-1, 1).
    pub fn translation_net(&self, x: &Tensor<T>, cond: &Condition<T>) -> Result<Tensor<T>> {
        self.check(x, cond)?;
        Ok(self.tn_head.forward(&self.tn.forward(x, &cond.values)?)?.tanh())
    }

    /// Attention mask `M` in (0, 1), shape `(N, 1, H, W)`.
    pub fn attention_net(&self, x: &Tensor<T>, cond: &Condition<T>) -> Result<Tensor<T>> {
        self.check(x, cond)?;
        Ok(self.an_head.forward(&self.an.forward(x, &cond.values)?)?.sigmoid())
    }

    pub fn forward(&self, x: &Tensor<T>, cond: &Condition<T>) -> Result<GeneratorOutput<T>> {
        let y_prime = self.translation_net(x, cond)?;
        let mask = self.attention_net(x, cond)?;
        let y = blend(x, &y_prime, &mask)?;
        Ok(GeneratorOutput { y, y_prime, mask })
    }

    pub fn tn_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.tn.visit("tn", &mut |n, t| out.push((n, t.clone())));
        self.tn_head.visit("tn_head", &mut |n, t| out.push((n, t.clone())));
        out
    }

    pub fn an_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.an.visit("an", &mut |n, t| out.push((n, t.clone())));
        self.an_head.visit("an_head", &mut |n, t| out.push((n, t.clone())));
        out
    }
}

impl<T: Float> Module<T> for Generator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.tn.visit(&join(prefix, "tn"), f);
        self.tn_head.visit(&join(prefix, "tn_head"), f);
        self.an.visit(&join(prefix, "an"), f);
        self.an_head.visit(&join(prefix, "an_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.tn.visit_mut(&join(prefix, "tn"), f);
        self.tn_head.visit_mut(&join(prefix, "tn_head"), f);
        self.an.visit_mut(&join(prefix, "an"), f);
        self.an_head.visit_mut(&join(prefix, "an_head"), f);
    }
}

/// Stride-2 leaky-relu stack with a patch critic head and a global classifier.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Float = f32> {
    pub arch: ArchConfig,
    pub slope: f64,
    layers: Vec<Conv2d<T>>,
    adv_head: Conv2d<T>,
    cls_head: Conv2d<T>,
}

impl<T: Float> Discriminator<T> {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let rng = SatRng::new(seed);
        let mut layers = Vec::new();
        let mut in_ch = 3;
        for i in 0..arch.d_depth() {
            let out = arch.base_filters << i;
            layers.push(Conv2d::new(in_ch, ConvSpec::new(4, out, 2, 1)?, true, rng.fork(i as u64).key())?);
            in_ch = out;
        }
        let k = arch.d_final_size();
        Ok(Self {
            arch,
            slope: LEAKY_SLOPE,
            layers,
            adv_head: Conv2d::new(in_ch, ConvSpec::new(3, 1, 1, 1)?, true, rng.fork(100).key())?,
            cls_head: Conv2d::new(in_ch, ConvSpec::new(k, arch.n_domains, 1, 0)?, true, rng.fork(101).key())?,
        })
    }

    /// Shared trunk output.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != self.arch.image_size || w != self.arch.image_size {
            return Err(Error::InvalidArgument(format!(
                "discriminator expects (N,3,{0},{0}), got {1:?}",
                self.arch.image_size,
                x.shape()
            )));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?.leaky_relu(self.slope);
        }
        Ok(h)
    }

    /// Per-sample critic score `(N)`.
    pub fn adv(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.adv_from_features(&self.features(x)?)
    }

    fn adv_from_features(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let n = h.shape()[0];
        self.adv_head.forward(h)?.mean_spatial()?.reshape(&[n])
    }

    /// Returns `(adv_scores (N), cls_logits (N, n))`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let h = self.features(x)?;
        let n = h.shape()[0];
        let adv = self.adv_from_features(&h)?;
        let cls = self.cls_head.forward(&h)?.reshape(&[n, self.arch.n_domains])?;
        Ok((adv, cls))
    }
}

impl<T: Float> Module<T> for Discriminator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("conv{i}")), f);
        }
        self.adv_head.visit(&join(prefix, "adv_head"), f);
        self.cls_head.visit(&join(prefix, "cls_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
        self.adv_head.visit_mut(&join(prefix, "adv_head"), f);
        self.cls_head.visit_mut(&join(prefix, "cls_head"), f);
    }
}
