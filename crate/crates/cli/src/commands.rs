use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use sat_core::data::manifest::MANIFEST_FILE;
use sat_core::data::netpbm::{image_read_ppm, image_write_ppm, mask_write_pgm};
use sat_core::data::synth::{synth_generate, SUPPORTED_SIZES};
use sat_core::data::{residual_image, Dataset};
use sat_core::eval::{classifier_train, translation_accuracy, ClassifierTraining, EditOp, EvalClassifier};
use sat_core::gradsuite::{check_names, run_gradcheck};
use sat_core::model::{Condition, Variant};
use sat_core::tensor::set_finite_checks;
use sat_core::train::{config_path, LossReport, TrainConfig, Trainer};
use sat_core::{no_grad, Error};

use crate::error::{usage, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "sat", version, about = "Attention-guided multi-domain image translation")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a procedural multi-attribute image dataset.
    Synth(SynthArgs),
    /// Train generator and critic; writes a TSV loss log.
    Train(TrainArgs),
    /// Translate one image with a trained generator.
    Translate(TranslateArgs),
    /// Score a generator with a trained classifier oracle.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Fit the attribute classifier used by `eval`.
    TrainClassifier(ClassifierArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// `key = value` config file; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Continue from this checkpoint; its sidecar config is the base.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<u64>,
    /// Extra config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Loss log destination (default: stdout).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Comma-separated label or action values, one per domain.
    #[arg(long, allow_hyphen_values = true)]
    vector: String,
    /// Output prefix for `.ppm`, `.mask.pgm` and `.residual.pgm`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated operations such as `A0,A1,A0A2,ID`.
    #[arg(long, default_value = "A0,A1,A2,A0A1,A0A2,A1A2,A0A1A2,ID")]
    ops: String,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only run checks whose name contains this string.
    #[arg(long)]
    op: Option<String>,
}

#[derive(Debug, Args)]
struct ClassifierArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_steps: Option<u64>,
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Translate(a) => translate(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::TrainClassifier(a) => train_classifier(a),
    }
}

fn synth(a: SynthArgs) -> CliResult {
    if !SUPPORTED_SIZES.contains(&a.size) {
        return Err(usage(format!("--size must be one of {SUPPORTED_SIZES:?}, got {}", a.size)));
    }
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    synth_generate(a.count, a.size, a.seed, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{}", a.out.join(MANIFEST_FILE).display());
    Ok(())
}

fn open_data(path: &Path) -> CliResult<Dataset> {
    Ok(Dataset::open(path).with_context(|| format!("loading dataset {}", path.display()))?)
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &a.resume {
        Some(p) => TrainConfig::read(&config_path(p)).map_err(|e| usage(format!("--resume: {e}")))?,
        None => TrainConfig::default(),
    };
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).map_err(|e| usage(format!("--config {}: {e}", p.display())))?;
        cfg.apply_text(&text).map_err(|e| usage(format!("--config {}: {e}", p.display())))?;
    }
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.max_iters {
        cfg.max_iters = m;
    }
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v).map_err(|e| usage(format!("--set: {e}")))?;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

/// Appends `.nonfinite` to the output checkpoint name.
fn diagnostic_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".nonfinite");
    PathBuf::from(s)
}

fn train(a: TrainArgs) -> CliResult {
    let cfg = train_config(&a)?;
    let data = open_data(&a.data)?;
    if data.n_domains() != cfg.arch.n_domains || data.image_size != cfg.arch.image_size {
        return Err(usage(format!(
            "dataset has {} domains at {}px but the config expects {} at {}px",
            data.n_domains(),
            data.image_size,
            cfg.arch.n_domains,
            cfg.arch.image_size
        )));
    }
    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = sat_core::train::Checkpoint::load(p).with_context(|| format!("reading {}", p.display()))?;
            Trainer::from_checkpoint(cfg, &ckpt)?
        }
        None => Trainer::new(cfg)?,
    };
    if let Some(dir) = a.out_checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut log: Box<dyn Write> = match &a.log {
        Some(p) => {
            let fresh = a.resume.is_none() || !p.exists();
            let f = if fresh {
                File::create(p)
            } else {
                OpenOptions::new().append(true).open(p)
            }
            .with_context(|| format!("opening log {}", p.display()))?;
            let mut w = BufWriter::new(f);
            if fresh {
                writeln!(w, "{}", LossReport::tsv_header())?;
            }
            Box::new(w)
        }
        None => {
            let mut w = io::stdout().lock();
            if a.resume.is_none() {
                writeln!(w, "{}", LossReport::tsv_header())?;
            }
            Box::new(w)
        }
    };

    // Non-finite values must surface as errors, not panics.
    set_finite_checks(false);
    let total = trainer.total_iters(&data)?;
    let every = trainer.config.checkpoint_every;
    let out = a.out_checkpoint.clone();
    let start = Instant::now();
    let first = trainer.iter;
    eprintln!("training iterations {first}..{total}");
    let result = trainer.run_until(&data, total, |t, r| {
        writeln!(log, "{}", r.to_tsv())?;
        let done = r.iter + 1;
        if every > 0 && done % every == 0 {
            log.flush()?;
            t.save(&out)?;
        }
        if done % 500 == 0 {
            let rate = start.elapsed().as_secs_f64() / (done - first) as f64;
            eprintln!("iter {done}/{total}  {:.0}s remaining", rate * (total - done) as f64);
        }
        Ok(())
    });
    log.flush()?;
    match result {
        Ok(()) => {
            trainer.save(&a.out_checkpoint)?;
            eprintln!("wrote {}", a.out_checkpoint.display());
            Ok(())
        }
        Err(e @ Error::NonFinite(_)) => {
            let dump = diagnostic_path(&a.out_checkpoint);
            trainer.save(&dump)?;
            Err(anyhow::Error::new(e).context(format!("diagnostic checkpoint written to {}", dump.display())).into())
        }
        Err(e) => Err(e.into()),
    }
}

fn parse_vector(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|v| {
            let v = v.trim();
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| usage(format!("--vector: {v:?} is not a finite number")))
        })
        .collect()
}

fn load_trainer(path: &Path) -> CliResult<Trainer> {
    Ok(Trainer::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn translate(a: TranslateArgs) -> CliResult {
    let values = parse_vector(&a.vector)?;
    let trainer = load_trainer(&a.checkpoint)?;
    let g = &trainer.generator;
    let arch = g.arch;
    if values.len() != arch.n_domains {
        return Err(usage(format!("--vector has {} values, the model has {} domains", values.len(), arch.n_domains)));
    }
    let image = image_read_ppm(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let size = arch.image_size;
    if image.shape() != [3, size, size] {
        return Err(usage(format!("image is {:?}, the model expects 3x{size}x{size}", image.shape())));
    }
    let x = image.reshape(&[1, 3, size, size])?;
    let cond = Condition::repeat(g.variant.kind, &values, 1)?;
    let out = no_grad(|| g.forward(&x, &cond))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    image_write_ppm(&with_suffix(&a.out, ".ppm"), &out.y)?;
    mask_write_pgm(&with_suffix(&a.out, ".mask.pgm"), &out.mask)?;
    mask_write_pgm(&with_suffix(&a.out, ".residual.pgm"), &residual_image(&x, &out.y)?)?;
    eprintln!("{} vector {values:?} -> {}.{{ppm,mask.pgm,residual.pgm}}", g.variant, a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let trainer = load_trainer(&a.checkpoint)?;
    let clf = EvalClassifier::load(&a.classifier).with_context(|| format!("loading {}", a.classifier.display()))?;
    let data = open_data(&a.data)?;
    let ops = EditOp::parse_list(&a.ops, &data.domains).map_err(|e| usage(format!("--ops: {e}")))?;
    if !clf.passes_gate() {
        return Err(Error::ClassifierGate { target: sat_core::eval::CLASSIFIER_GATE, best: clf.heldout_accuracy }.into());
    }
    let table = translation_accuracy(&trainer.generator, &clf, &data, &ops)?;
    print!("{}", table.to_tsv());
    eprintln!(
        "classifier exact-match accuracy on originals: {:.4} (preservation rows are a classifier-based proxy)",
        table.classifier_accuracy
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    if let Some(f) = &a.op {
        if !check_names().iter().any(|n| n.contains(f.as_str())) {
            return Err(usage(format!("--op {f:?} matches none of {:?}", check_names())));
        }
    }
    let results = run_gradcheck(a.seed, a.op.as_deref())?;
    println!("op\tmax_rel_err\tthreshold\tstatus");
    for r in &results {
        println!("{}\t{:.3e}\t{:.0e}\t{}", r.op, r.max_rel_err, r.threshold, if r.passed() { "ok" } else { "FAIL" });
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow::anyhow!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn train_classifier(a: ClassifierArgs) -> CliResult {
    let data = open_data(&a.data)?;
    let mut opts = ClassifierTraining::default();
    if let Some(m) = a.max_steps {
        opts.max_steps = m;
    }
    let (clf, acc) = classifier_train(&data, a.seed, &opts)?;
    clf.save(&a.out)?;
    for (d, acc) in data.domains.iter().zip(&acc) {
        println!("{d}\t{acc:.4}");
    }
    eprintln!("wrote {}", a.out.display());
    Ok(())
}
