//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::losses::LossWeights;
use super::optim::{lr_at, AdamConfig};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub lr: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub n_critic: u64,
    pub total_epochs: f64,
    pub decay_start_epoch: f64,
    pub seed: u64,
    pub variant: Variant,
    pub arch: ArchConfig,
    /// Random horizontal flips of training batches.
    pub flip: bool,
    /// Stop after this many iterations even if the schedule is longer (0: no cap).
    pub max_iters: u64,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            lr: 1e-4,
            adam: AdamConfig::default(),
            batch_size: 16,
            n_critic: 5,
            total_epochs: 20.0,
            decay_start_epoch: 10.0,
            seed: 0,
            variant: Variant::AL,
            arch: ArchConfig::desk(),
            flip: true,
            max_iters: 0,
            checkpoint_every: 1000,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "lambda_cls",
    "lambda_gp",
    "lambda_cyc",
    "lambda_id",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "batch_size",
    "n_critic",
    "epochs",
    "decay_start_epoch",
    "seed",
    "variant",
    "image_size",
    "base_filters",
    "n_resblocks",
    "n_domains",
    "d_layers",
    "flip",
    "max_iters",
    "checkpoint_every",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "lambda_cls" => self.weights.cls = parse(key, v)?,
            "lambda_gp" => self.weights.gp = parse(key, v)?,
            "lambda_cyc" => self.weights.cyc = parse(key, v)?,
            "lambda_id" => self.weights.id = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.adam.beta1 = parse(key, v)?,
            "beta2" => self.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.adam.eps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "n_critic" => self.n_critic = parse(key, v)?,
            "epochs" => self.total_epochs = parse(key, v)?,
            "decay_start_epoch" => self.decay_start_epoch = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "variant" => self.variant = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "image_size" => self.arch.image_size = parse(key, v)?,
            "base_filters" => self.arch.base_filters = parse(key, v)?,
            "n_resblocks" => self.arch.n_resblocks = parse(key, v)?,
            "n_domains" => self.arch.n_domains = parse(key, v)?,
            "d_layers" => self.arch.d_layers = if v == "auto" { None } else { Some(parse(key, v)?) },
            "flip" => self.flip = parse_bool(key, v)?,
            "max_iters" => self.max_iters = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &self.weights;
        let d_layers = self.arch.d_layers.map_or("auto".to_string(), |d| d.to_string());
        let pairs: [(&str, String); 22] = [
            ("lambda_cls", w.cls.to_string()),
            ("lambda_gp", w.gp.to_string()),
            ("lambda_cyc", w.cyc.to_string()),
            ("lambda_id", w.id.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("n_critic", self.n_critic.to_string()),
            ("epochs", self.total_epochs.to_string()),
            ("decay_start_epoch", self.decay_start_epoch.to_string()),
            ("seed", self.seed.to_string()),
            ("variant", self.variant.to_string()),
            ("image_size", self.arch.image_size.to_string()),
            ("base_filters", self.arch.base_filters.to_string()),
            ("n_resblocks", self.arch.n_resblocks.to_string()),
            ("n_domains", self.arch.n_domains.to_string()),
            ("d_layers", d_layers),
            ("flip", self.flip.to_string()),
            ("max_iters", self.max_iters.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let w = &self.weights;
        if [w.cls, w.gp, w.cyc, w.id].iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        if self.batch_size == 0 || self.n_critic == 0 {
            return bad("batch_size and n_critic must be positive".into());
        }
        if !(self.total_epochs > 0.0) || !(0.0..=self.total_epochs).contains(&self.decay_start_epoch) {
            return bad("need 0 <= decay_start_epoch <= epochs and epochs > 0".into());
        }
        self.arch.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn lr_at(&self, epoch: f64) -> f64 {
        lr_at(epoch, self.lr, self.decay_start_epoch, self.total_epochs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_training_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.weights, LossWeights { cls: 10.0, gp: 10.0, cyc: 10.0, id: 10.0 });
        assert_eq!((c.lr, c.adam.beta1, c.adam.beta2), (1e-4, 0.5, 0.999));
        assert_eq!((c.batch_size, c.n_critic), (16, 5));
        assert_eq!((c.total_epochs, c.decay_start_epoch), (20.0, 10.0));
        assert_eq!(c.lr_at(5.0), 1e-4);
        assert_eq!(c.lr_at(15.0), 5e-5);
        assert_eq!(c.lr_at(20.0), 0.0);
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.apply_text("# comment\nlr = 0.0003  # trailing\nvariant = sat-lr\nd_layers = 4\nflip=false\n").unwrap();
        assert_eq!(c.lr, 3e-4);
        assert_eq!(c.variant, Variant::LR);
        assert_eq!(c.arch.d_layers, Some(4));
        assert!(!c.flip);
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(c.to_text().lines().count(), CONFIG_KEYS.len());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::parse("nope = 1").is_err());
        assert!(TrainConfig::parse("lr").is_err());
        assert!(TrainConfig::parse("lr = fast").is_err());
        assert!(TrainConfig::parse("lambda_cls = -1").is_err());
        assert!(TrainConfig::parse("image_size = 30").is_err());
        assert!(TrainConfig::parse("decay_start_epoch = 30").is_err());
    }
}
