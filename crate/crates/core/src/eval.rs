//! Attribute classifier used as an automatic judge of translations.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{union_region, BatchSchedule, Dataset};
use crate::error::{Error, Result};
use crate::model::{Condition, Generator, VectorKind};
use crate::nn::{join, Conv2d, ConvSpec, Module, LEAKY_SLOPE};
use crate::rng::SatRng;
use crate::tensor::{backward, no_grad, Tensor};
use crate::train::checkpoint::{load_module, module_tensors};
use crate::train::{cls_loss, Adam, AdamConfig, Checkpoint, NamedTensor};

pub const CLASSIFIER_GATE: f64 = 0.98;
const PREFIX: &str = "C.";
const ACCURACY_KEY: &str = "meta.heldout_accuracy";
const EVAL_BATCH: usize = 32;

/// Three stride-2 convolutions, global average pooling and a linear head.
#[derive(Clone, Debug)]
pub struct EvalClassifier {
    convs: Vec<Conv2d<f32>>,
    head: Conv2d<f32>,
    /// Held-out accuracy measured when training finished.
    pub heldout_accuracy: f64,
}

impl EvalClassifier {
    pub fn new(n_domains: usize, seed: u64) -> Result<Self> {
        let rng = SatRng::new(seed);
        let widths = [3, 16, 32, 64];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(w[0], ConvSpec::new(3, w[1], 2, 1)?, true, rng.fork(i as u64).key()))
            .collect::<Result<_>>()?;
        let head = Conv2d::new(64, ConvSpec::new(1, n_domains, 1, 0)?, true, rng.fork(9).key())?;
        Ok(Self { convs, head, heldout_accuracy: 0.0 })
    }

    pub fn n_domains(&self) -> usize {
        self.head.spec.filters
    }

    /// Logits `(N, n)`.
    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h)?.leaky_relu(LEAKY_SLOPE);
        }
        let (n, ch, _, _) = h.dims4()?;
        let pooled = h.mean_spatial()?.reshape(&[n, ch, 1, 1])?;
        self.head.forward(&pooled)?.reshape(&[n, self.n_domains()])
    }

    /// Thresholded predictions, row-major `(N, n)`.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<bool>> {
        let z = no_grad(|| self.logits(x))?;
        Ok(z.data().iter().map(|&v| v > 0.0).collect())
    }

    /// Per-domain accuracy on `data`.
    pub fn accuracy(&self, data: &Dataset) -> Result<Vec<f64>> {
        let n = self.n_domains();
        let mut correct = vec![0usize; n];
        for idx in (0..data.len()).collect::<Vec<_>>().chunks(EVAL_BATCH) {
            let b = data.batch(idx, &[])?;
            let pred = self.predict(&b.images)?;
            for (k, (p, l)) in pred.iter().zip(b.labels.data()).enumerate() {
                if *p == (*l > 0.5) {
                    correct[k % n] += 1;
                }
            }
        }
        Ok(correct.iter().map(|&c| c as f64 / data.len() as f64).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = module_tensors(self, PREFIX);
        tensors.push(NamedTensor { name: ACCURACY_KEY.into(), shape: vec![1], data: vec![self.heldout_accuracy as f32] });
        Checkpoint { iteration: 0, tensors, moments: None }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let head = ckpt
            .tensor(&format!("{PREFIX}head.weight"))
            .ok_or_else(|| Error::Checkpoint("not a classifier checkpoint".into()))?;
        let mut c = Self::new(head.shape[0], 0)?;
        load_module(&mut c, PREFIX, ckpt)?;
        c.heldout_accuracy = ckpt.tensor(ACCURACY_KEY).map_or(0.0, |t| t.data[0] as f64);
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn passes_gate(&self) -> bool {
        self.heldout_accuracy >= CLASSIFIER_GATE
    }
}

impl Module<f32> for EvalClassifier {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<f32>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<f32>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierTraining {
    pub batch_size: usize,
    pub lr: f64,
    /// Maximum optimisation steps.
    pub max_steps: u64,
    /// Held-out accuracy is checked every this many steps.
    pub check_every: u64,
    /// Fraction of the data held out for the gate.
    pub holdout: f64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        Self { batch_size: 32, lr: 1e-3, max_steps: 4000, check_every: 250, holdout: 0.2 }
    }
}

/// Trains until the minimum per-domain held-out accuracy reaches the gate.
/// Returns the classifier and its held-out per-domain accuracies, or
/// [`Error::ClassifierGate`] if the step budget runs out first.
pub fn classifier_train(data: &Dataset, seed: u64, opts: &ClassifierTraining) -> Result<(EvalClassifier, Vec<f64>)> {
    let (clf, acc) = classifier_fit(data, seed, opts)?;
    if !clf.passes_gate() {
        return Err(Error::ClassifierGate { target: CLASSIFIER_GATE, best: clf.heldout_accuracy });
    }
    Ok((clf, acc))
}

/// Same as [`classifier_train`] but returns the final model even when it
/// misses the gate.
pub fn classifier_fit(data: &Dataset, seed: u64, opts: &ClassifierTraining) -> Result<(EvalClassifier, Vec<f64>)> {
    let n_test = ((data.len() as f64) * opts.holdout).round() as usize;
    let (train, test) = data.split(data.len() - n_test.max(1))?;
    let rng = SatRng::new(seed);
    let mut clf = EvalClassifier::new(data.n_domains(), rng.fork(1).key())?;
    let mut opt = Adam::new(&clf, AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 });
    let schedule = BatchSchedule::new(train.len(), opts.batch_size, rng.fork(2).key())?;
    let mut acc = vec![0.0; data.n_domains()];
    for step in 0..opts.max_steps {
        let batch = schedule.batch(&train, step, true)?;
        let loss = cls_loss(&clf.logits(&batch.images)?, &batch.labels)?;
        let params = clf.parameters();
        let refs: Vec<_> = params.iter().collect();
        let grads = backward(&loss, &refs, false)?;
        opt.step(&mut clf, &grads, opts.lr)?;
        if (step + 1) % opts.check_every == 0 || step + 1 == opts.max_steps {
            acc = clf.accuracy(&test)?;
            clf.heldout_accuracy = acc.iter().copied().fold(f64::INFINITY, f64::min);
            if clf.passes_gate() {
                break;
            }
        }
    }
    Ok((clf, acc))
}

/// A set of attributes to toggle. An empty set is the identity operation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EditOp {
    pub name: String,
    pub attrs: Vec<usize>,
}

impl EditOp {
    /// Parses concatenated domain names such as `A0A2`; `ID` is the identity.
    pub fn parse(s: &str, domains: &[String]) -> Result<Self> {
        let name = s.trim();
        if name.eq_ignore_ascii_case("id") || name.eq_ignore_ascii_case("none") {
            return Ok(Self { name: "ID".into(), attrs: vec![] });
        }
        let mut rest = name;
        let mut attrs = Vec::new();
        while !rest.is_empty() {
            let (i, d) = domains
                .iter()
                .enumerate()
                .filter(|(_, d)| rest.starts_with(d.as_str()))
                .max_by_key(|(_, d)| d.len())
                .ok_or_else(|| Error::InvalidArgument(format!("cannot parse operation {name:?}")))?;
            if attrs.contains(&i) {
                return Err(Error::InvalidArgument(format!("operation {name:?} repeats {d}")));
            }
            attrs.push(i);
            rest = &rest[d.len()..];
        }
        if attrs.is_empty() {
            return Err(Error::InvalidArgument("empty operation".into()));
        }
        Ok(Self { name: name.to_string(), attrs })
    }

    pub fn parse_list(s: &str, domains: &[String]) -> Result<Vec<Self>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(|p| Self::parse(p, domains)).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.attrs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub op: EditOp,
    /// Edit success rate, or preservation rate for the identity operation.
    pub accuracy: f64,
    /// Share of squared residual outside the edited attributes' regions.
    pub outside_energy: f64,
    /// Mean attention mask value; lower means sparser attention.
    pub mask_mean: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    /// Mean absolute difference between inputs and identity translations.
    pub identity_l1: f64,
    /// Exact-match rate of the classifier on untranslated test images.
    pub classifier_accuracy: f64,
}

pub const EVAL_COLUMNS: [&str; 7] =
    ["op", "kind", "accuracy", "outside_energy", "identity_l1", "samples", "mask_mean"];

impl EvalTable {
    pub fn to_tsv(&self) -> String {
        let mut s = EVAL_COLUMNS.join("\t");
        s.push('\n');
        for r in &self.rows {
            let kind = if r.op.is_identity() { "preservation" } else { "edit" };
            let _ = writeln!(
                s,
                "{}\t{kind}\t{:.4}\t{:.4}\t{:.4}\t{}\t{:.4}",
                r.op.name, r.accuracy, r.outside_energy, self.identity_l1, r.samples, r.mask_mean
            );
        }
        s
    }

    /// Mean accuracy over single-attribute operations.
    pub fn single_domain_accuracy(&self) -> Option<f64> {
        let single: Vec<_> = self.rows.iter().filter(|r| r.op.attrs.len() == 1).collect();
        (!single.is_empty()).then(|| single.iter().map(|r| r.accuracy).sum::<f64>() / single.len() as f64)
    }

    /// Mean outside-region energy share over single-attribute operations.
    pub fn single_domain_outside_energy(&self) -> Option<f64> {
        let single: Vec<_> = self.rows.iter().filter(|r| r.op.attrs.len() == 1).collect();
        (!single.is_empty()).then(|| single.iter().map(|r| r.outside_energy).sum::<f64>() / single.len() as f64)
    }
}

fn condition_for(kind: VectorKind, c_s: &Tensor<f32>, c_t: &Tensor<f32>) -> Result<Condition<f32>> {
    match kind {
        VectorKind::Label => Condition::labels(c_t.clone()),
        VectorKind::Action => Condition::action_between(c_t, c_s),
    }
}

/// Translates every test image under every operation and judges the result
/// with `classifier`. An edit succeeds when all predicted labels equal the
/// target labels; for the identity operation this is the preservation rate.
pub fn translation_accuracy(
    generator: &Generator<f32>,
    classifier: &EvalClassifier,
    test: &Dataset,
    ops: &[EditOp],
) -> Result<EvalTable> {
    let n = test.n_domains();
    if generator.arch.n_domains != n || classifier.n_domains() != n {
        return Err(Error::InvalidArgument("generator, classifier and data disagree on the domain count".into()));
    }
    let size = test.image_size;
    let hw = size * size;
    let kind = generator.variant.kind;
    let indices: Vec<usize> = (0..test.len()).collect();
    let mut rows = Vec::with_capacity(ops.len());
    for op in ops {
        if op.attrs.iter().any(|&a| a >= n) {
            return Err(Error::InvalidArgument(format!("operation {} names an unknown domain", op.name)));
        }
        let region = if op.is_identity() { vec![false; hw] } else { union_region(&op.attrs, size) };
        let (mut hits, mut inside, mut outside, mut mask_sum) = (0usize, 0.0f64, 0.0f64, 0.0f64);
        for idx in indices.chunks(EVAL_BATCH) {
            let b = test.batch(idx, &[])?;
            let mut target = b.labels.to_vec();
            for row in target.chunks_mut(n) {
                for &a in &op.attrs {
                    row[a] = 1.0 - row[a];
                }
            }
            let c_t = Tensor::from_vec(target.clone(), &[idx.len(), n])?;
            let cond = condition_for(kind, &b.labels, &c_t)?;
            let out = no_grad(|| generator.forward(&b.images, &cond))?;
            mask_sum += out.mask.data().iter().map(|&m| m as f64).sum::<f64>();
            let y = out.y;
            let pred = classifier.predict(&y)?;
            for (p, t) in pred.chunks(n).zip(target.chunks(n)) {
                if p.iter().zip(t).all(|(p, t)| *p == (*t > 0.5)) {
                    hits += 1;
                }
            }
            for (xs, ys) in b.images.data().chunks(3 * hw).zip(y.data().chunks(3 * hw)) {
                for (i, (a, b)) in xs.iter().zip(ys).enumerate() {
                    let e = ((a - b) as f64).powi(2);
                    if region[i % hw] {
                        inside += e;
                    } else {
                        outside += e;
                    }
                }
            }
        }
        let total = inside + outside;
        rows.push(EvalRow {
            op: op.clone(),
            accuracy: hits as f64 / test.len() as f64,
            outside_energy: if total > 0.0 { outside / total } else { 0.0 },
            mask_mean: mask_sum / (test.len() * hw) as f64,
            samples: test.len(),
        });
    }
    let mut l1 = 0.0;
    let mut exact = 0usize;
    for idx in indices.chunks(EVAL_BATCH) {
        let b = test.batch(idx, &[])?;
        let cond = condition_for(kind, &b.labels, &b.labels)?;
        let y = no_grad(|| generator.forward(&b.images, &cond))?.y;
        l1 += b.images.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
        let pred = classifier.predict(&b.images)?;
        for (p, t) in pred.chunks(n).zip(b.labels.data().chunks(n)) {
            if p.iter().zip(t).all(|(p, t)| *p == (*t > 0.5)) {
                exact += 1;
            }
        }
    }
    Ok(EvalTable {
        rows,
        identity_l1: l1 / (test.len() * 3 * hw) as f64,
        classifier_accuracy: exact as f64 / test.len() as f64,
    })
}
