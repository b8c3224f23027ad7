//! Alternating critic/generator optimisation.

use std::fmt::Write as _;

use super::config::TrainConfig;
use super::losses::{
    cls_loss, cycle_loss, d_adv_loss, g_adv_loss, gradient_penalty, identity_loss, total_d_loss, total_g_loss,
};
use super::optim::Adam;
use crate::data::{Batch, BatchSchedule, Dataset};
use crate::error::{Error, Result};
use crate::model::{Condition, Discriminator, Generator, VectorKind};
use crate::nn::Module;
use crate::rng::SatRng;
use crate::tensor::{backward, no_grad, Float, FillKind, Tensor};

const STEP_TAG: u64 = 0x7374_6570;
const DATA_TAG: u64 = 0x6461_7461;

/// Rows of `c_s` in a seeded random order.
pub fn sample_targets<T: Float>(c_s: &Tensor<T>, rng: &mut SatRng) -> Result<Tensor<T>> {
    if c_s.rank() != 2 {
        return Err(Error::InvalidShape(c_s.shape().to_vec(), "labels must be (N, n)"));
    }
    let (n, w) = (c_s.shape()[0], c_s.shape()[1]);
    let perm = rng.permutation(n);
    let src = c_s.data();
    let mut out = Vec::with_capacity(n * w);
    for &p in &perm {
        out.extend_from_slice(&src[p * w..(p + 1) * w]);
    }
    Tensor::from_vec(out, &[n, w])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DLosses {
    pub adv: f64,
    pub cls: f64,
    pub gp: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GLosses {
    pub adv: f64,
    pub cls: f64,
    pub cyc: f64,
    pub id: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub iter: u64,
    pub lr: f64,
    pub d: DLosses,
    /// Present only on iterations that update the generator.
    pub g: Option<GLosses>,
}

pub const LOG_COLUMNS: [&str; 11] =
    ["iter", "lr", "d_adv", "d_cls", "d_gp", "d_total", "g_adv", "g_cls", "g_cyc", "g_id", "g_total"];

impl LossReport {
    pub fn tsv_header() -> String {
        LOG_COLUMNS.join("\t")
    }

    /// One tab-separated row; generator columns are empty on critic-only steps.
    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.iter, self.lr, self.d.adv, self.d.cls, self.d.gp, self.d.total
        );
        match &self.g {
            Some(g) => {
                let _ = write!(s, "\t{}\t{}\t{}\t{}\t{}", g.adv, g.cls, g.cyc, g.id, g.total);
            }
            None => s.push_str("\t\t\t\t\t"),
        }
        s
    }
}

/// Generator, critic, their optimizers and the iteration counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub g_opt: Adam<f32>,
    pub d_opt: Adam<f32>,
    pub iter: u64,
}

fn scalar(t: &Tensor<f32>) -> Result<f64> {
    Ok(t.item()?.as_f64())
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = SatRng::new(config.seed);
        let generator = Generator::new(config.arch, config.variant, rng.fork(1).key())?;
        let discriminator = Discriminator::new(config.arch, rng.fork(2).key())?;
        let g_opt = Adam::new(&generator, config.adam);
        let d_opt = Adam::new(&discriminator, config.adam);
        Ok(Self { config, generator, discriminator, g_opt, d_opt, iter: 0 })
    }

    fn step_rng(&self, iter: u64) -> SatRng {
        SatRng::new(self.config.seed).fork(STEP_TAG).fork(iter)
    }

    pub fn is_generator_step(&self, iter: u64) -> bool {
        iter % self.config.n_critic == self.config.n_critic - 1
    }

    /// Target conditioning for translating `c_s` to `c_t` under this variant.
    pub fn target_condition(&self, c_s: &Tensor<f32>, c_t: &Tensor<f32>) -> Result<Condition<f32>> {
        match self.config.variant.kind {
            VectorKind::Label => Condition::labels(c_t.clone()),
            VectorKind::Action => Condition::action_between(c_t, c_s),
        }
    }

    /// Conditioning that should reproduce the input unchanged.
    pub fn identity_condition(&self, c_s: &Tensor<f32>) -> Result<Condition<f32>> {
        match self.config.variant.kind {
            VectorKind::Label => Condition::labels(c_s.clone()),
            VectorKind::Action => Condition::actions(Tensor::zeros(c_s.shape())?),
        }
    }

    /// Conditioning for the return trip of the cycle.
    pub fn reverse_condition(&self, c_s: &Tensor<f32>, forward: &Condition<f32>) -> Result<Condition<f32>> {
        match self.config.variant.kind {
            VectorKind::Label => Condition::labels(c_s.clone()),
            VectorKind::Action => Ok(forward.reversed()),
        }
    }

    /// One critic update. The generator is only evaluated, never differentiated.
    pub fn d_step(&mut self, batch: &Batch, c_t: &Tensor<f32>, eps: &Tensor<f32>, lr: f64) -> Result<DLosses> {
        let x = &batch.images;
        let cond = self.target_condition(&batch.labels, c_t)?;
        let fake = no_grad(|| self.generator.forward(x, &cond))?.y;
        let d = &self.discriminator;
        let (real_adv, real_cls) = d.forward(x)?;
        let fake_adv = d.adv(&fake)?;
        let adv = d_adv_loss(&real_adv, &fake_adv)?;
        let cls = cls_loss(&real_cls, &batch.labels)?;
        let gp = gradient_penalty(d, x, &fake, eps)?;
        let total = total_d_loss(&adv, &cls, &gp, &self.config.weights)?;
        let losses = DLosses { adv: scalar(&adv)?, cls: scalar(&cls)?, gp: scalar(&gp)?, total: scalar(&total)? };
        if ![losses.adv, losses.cls, losses.gp, losses.total].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("critic loss at iteration {}: {losses:?}", self.iter)));
        }
        let params = d.parameters();
        let refs: Vec<_> = params.iter().collect();
        let grads = backward(&total, &refs, false)?;
        self.d_opt.step(&mut self.discriminator, &grads, lr)?;
        Ok(losses)
    }

    /// One generator update. The critic is evaluated but excluded from the update.
    pub fn g_step(&mut self, batch: &Batch, c_t: &Tensor<f32>, lr: f64) -> Result<GLosses> {
        let x = &batch.images;
        let c_s = &batch.labels;
        let cond = self.target_condition(c_s, c_t)?;
        let g = &self.generator;
        let fake = g.forward(x, &cond)?.y;
        let (fake_adv, fake_cls) = self.discriminator.forward(&fake)?;
        let adv = g_adv_loss(&fake_adv)?;
        let cls = cls_loss(&fake_cls, c_t)?;
        let back = self.reverse_condition(c_s, &cond)?;
        let x_cycle = g.forward(&fake, &back)?.y;
        let cyc = cycle_loss(x, &x_cycle)?;
        let x_id = g.forward(x, &self.identity_condition(c_s)?)?.y;
        let id = identity_loss(x, &x_id)?;
        let total = total_g_loss(&adv, &cls, &cyc, &id, &self.config.weights)?;
        let losses = GLosses {
            adv: scalar(&adv)?,
            cls: scalar(&cls)?,
            cyc: scalar(&cyc)?,
            id: scalar(&id)?,
            total: scalar(&total)?,
        };
        if ![losses.adv, losses.cls, losses.cyc, losses.id, losses.total].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("generator loss at iteration {}: {losses:?}", self.iter)));
        }
        let params = g.parameters();
        let refs: Vec<_> = params.iter().collect();
        let grads = backward(&total, &refs, false)?;
        self.g_opt.step(&mut self.generator, &grads, lr)?;
        Ok(losses)
    }

    /// Critic update, plus a generator update every `n_critic`-th iteration.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<LossReport> {
        let arch = &self.config.arch;
        if batch.labels.shape().get(1) != Some(&arch.n_domains) {
            return Err(Error::InvalidArgument(format!(
                "batch has labels {:?}, model expects {} domains",
                batch.labels.shape(),
                arch.n_domains
            )));
        }
        let iter = self.iter;
        let rng = self.step_rng(iter);
        let c_t = sample_targets(&batch.labels, &mut rng.fork(1))?;
        let eps = Tensor::create(&[batch.len()], FillKind::Uniform { lo: 0.0, hi: 1.0, seed: rng.fork(2).key() })?;
        let d = self.d_step(batch, &c_t, &eps, lr)?;
        let g = if self.is_generator_step(iter) { Some(self.g_step(batch, &c_t, lr)?) } else { None };
        self.iter += 1;
        Ok(LossReport { iter, lr, d, g })
    }

    pub fn schedule(&self, data: &Dataset) -> Result<BatchSchedule> {
        BatchSchedule::new(data.len(), self.config.batch_size, SatRng::new(self.config.seed).fork(DATA_TAG).key())
    }

    /// Iteration count at which `run` stops for this dataset.
    pub fn total_iters(&self, data: &Dataset) -> Result<u64> {
        let per = self.schedule(data)?.iters_per_epoch();
        let full = (self.config.total_epochs * per as f64).ceil() as u64;
        Ok(if self.config.max_iters > 0 { full.min(self.config.max_iters) } else { full })
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let arch = &self.config.arch;
        if data.n_domains() != arch.n_domains || data.image_size != arch.image_size {
            return Err(Error::Config(format!(
                "dataset has {} domains at {}px, config expects {} at {}px",
                data.n_domains(),
                data.image_size,
                arch.n_domains,
                arch.image_size
            )));
        }
        Ok(())
    }

    /// Runs from the current iteration to `until` (exclusive), calling
    /// `on_step` after every iteration.
    pub fn run_until<F>(&mut self, data: &Dataset, until: u64, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Trainer, &LossReport) -> Result<()>,
    {
        self.check_dataset(data)?;
        let schedule = self.schedule(data)?;
        while self.iter < until {
            let batch = schedule.batch(data, self.iter, self.config.flip)?;
            let lr = self.config.lr_at(schedule.epoch_of(self.iter));
            let report = self.train_step(&batch, lr)?;
            on_step(self, &report)?;
        }
        Ok(())
    }

    pub fn run<F>(&mut self, data: &Dataset, on_step: F) -> Result<()>
    where
        F: FnMut(&Trainer, &LossReport) -> Result<()>,
    {
        let until = self.total_iters(data)?;
        self.run_until(data, until, on_step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_are_row_permutations() {
        let c = Tensor::<f32>::from_f64(&[1., 0., 0., 1., 1., 1., 0., 0., 1.], &[3, 3]).unwrap();
        let t = sample_targets(&c, &mut SatRng::new(4)).unwrap();
        let mut a: Vec<_> = c.data().chunks(3).map(|r| r.to_vec()).collect();
        let mut b: Vec<_> = t.data().chunks(3).map(|r| r.to_vec()).collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(a, b);
        let same = Tensor::<f32>::from_f64(&[1., 0., 1., 0.], &[2, 2]).unwrap();
        assert_eq!(sample_targets(&same, &mut SatRng::new(9)).unwrap().data(), same.data());
        assert_eq!(
            sample_targets(&c, &mut SatRng::new(4)).unwrap().data(),
            sample_targets(&c, &mut SatRng::new(4)).unwrap().data()
        );
    }

    #[test]
    fn tsv_rows() {
        let d = DLosses { adv: 1.0, cls: 0.5, gp: 0.25, total: 2.0 };
        let r = LossReport { iter: 3, lr: 1e-4, d, g: None };
        assert_eq!(r.to_tsv().split('\t').count(), 11);
        assert!(r.to_tsv().ends_with("\t\t\t\t\t"));
        let g = GLosses { adv: -1.0, cls: 0.1, cyc: 0.2, id: 0.3, total: 4.0 };
        let r = LossReport { g: Some(g), ..r };
        assert_eq!(r.to_tsv(), "3\t0.0001\t1\t0.5\t0.25\t2\t-1\t0.1\t0.2\t0.3\t4");
        assert_eq!(LossReport::tsv_header().split('\t').count(), 11);
    }
}
