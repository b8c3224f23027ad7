//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `SAT_ACCEPTANCE_ONLY=a,b` restricts the run to criteria whose names
//! contain one of the comma-separated substrings.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use sat_core::data::netpbm::image_read_ppm;
use sat_core::data::synth::synth_generate;
use sat_core::data::Dataset;
use sat_core::gradsuite::{linear_penalty_case, run_gradcheck, PENALTY_TOL};
use sat_core::model::{
    action_from_labels, blend, reverse_action, ArchConfig, Condition, Generator, LabelVector, Variant,
};
use sat_core::nn::Module;
use sat_core::reference::{conv2d_backward, conv2d_forward, ConvGeometry};
use sat_core::rng::SatRng;
use sat_core::tensor::FillKind;
use sat_core::train::{TrainConfig, Trainer};
use sat_core::{backward, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn sat(args: &[&str]) -> Result<String, String> {
    let out = ok(Command::new(env!("CARGO_BIN_EXE_sat")).args(args).output())?;
    if !out.status.success() {
        return Err(format!(
            "sat {} exited with {:?}: {}",
            args.first().unwrap_or(&""),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let t = start.elapsed();
    ensure!(t <= limit, "took {t:.1?}, limit {limit:?}");
    Ok(t)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let table = sat(&["gradcheck", "--seed", "0"])?;
    let t = within(Duration::from_secs(120), start)?;
    let rows: Vec<&str> = table.lines().skip(1).collect();
    ensure!(rows.len() == 15, "expected 15 checks, got {}", rows.len());
    let first_order = ok(run_gradcheck(0, None))?
        .into_iter()
        .filter(|r| r.op != "gradient_penalty")
        .collect::<Vec<_>>();
    let worst = first_order.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    ensure!(worst < 1e-4, "worst first-order error {worst:.2e}");
    Ok(format!("{} ops, worst rel err {worst:.2e}, {t:.1?}", rows.len()))
}

fn penalty_double_backward() -> Outcome {
    let start = Instant::now();
    let r = ok(run_gradcheck(0, Some("gradient_penalty")))?;
    ensure!(r.len() == 1 && r[0].max_rel_err < PENALTY_TOL, "{r:?}");
    let mut worst = 0.0f64;
    for (i, (n, h, w)) in [(1, 2, 2), (3, 4, 5), (2, 8, 8), (4, 16, 16)].into_iter().enumerate() {
        let (got, want) = ok(linear_penalty_case(n, h, w, i as u64))?;
        worst = worst.max((got - want).abs());
    }
    ensure!(worst <= 1e-6, "linear critic deviates by {worst:.2e}");
    let t = within(Duration::from_secs(60), start)?;
    Ok(format!("2-layer critic rel err {:.2e}, linear case abs err {worst:.1e}, {t:.1?}", r[0].max_rel_err))
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn blending_identities() -> Outcome {
    let u = |shape: &[usize], seed| Tensor::<f32>::create(shape, FillKind::Uniform { lo: -1.0, hi: 1.0, seed });
    let x = ok(u(&[2, 3, 32, 32], 1))?;
    let y_prime = ok(u(&[2, 3, 32, 32], 2))?;
    let ones = ok(Tensor::ones(&[2, 1, 32, 32]))?;
    let zeros = ok(Tensor::zeros(&[2, 1, 32, 32]))?;
    ensure!(bits(&ok(blend(&x, &y_prime, &ones))?) == bits(&y_prime), "M=1 does not give y'");
    ensure!(bits(&ok(blend(&x, &y_prime, &zeros))?) == bits(&x), "M=0 does not give x");
    for variant in Variant::ALL {
        let g = ok(Generator::<f32>::new(ArchConfig::desk(), variant, 3))?;
        let c = ok(Condition::from_rows(variant.kind, &[vec![1.0, 0.0, -1.0], vec![0.0, 1.0, 0.0]]))?;
        let out = ok(g.forward(&x, &c))?;
        let explicit = ok(blend(&x, &ok(g.translation_net(&x, &c))?, &ok(g.attention_net(&x, &c))?))?;
        ensure!(bits(&out.y) == bits(&explicit), "{variant}: forward differs from explicit blend");
    }
    Ok("M=1, M=0 and forward composition bitwise equal for all variants".into())
}

fn action_algebra() -> Outcome {
    let mut rng = SatRng::new(17);
    for _ in 0..10_000 {
        let n = 1 + rng.below(10);
        let mut draw = || LabelVector((0..n).map(|_| rng.bernoulli(0.5) as u8 as f64).collect());
        let (cs, ct) = (draw(), draw());
        let a_t = ok(action_from_labels(&ct, &cs))?;
        ensure!(ok(action_from_labels(&cs, &cs))?.is_zero(), "a(c, c) != 0");
        ensure!(ok(action_from_labels(&cs, &ct))? == reverse_action(&a_t), "a_s != -a_t");
        ensure!(reverse_action(&reverse_action(&a_t)) == a_t, "reversal is not an involution");
        ensure!(a_t.0.iter().all(|v| [-1.0, 0.0, 1.0].contains(v)), "{a_t:?} leaves {{-1, 0, 1}}");
    }
    Ok("10000 random label pairs".into())
}

fn conv_oracle() -> Outcome {
    let mut rng = SatRng::new(23);
    let mut adjoint_worst = 0.0f64;
    for case in 0..50 {
        let k = 1 + rng.below(5);
        let g = ConvGeometry {
            n: 1 + rng.below(3),
            c_in: 1 + rng.below(8),
            c_out: 1 + rng.below(8),
            h: k + rng.below(10),
            w: k + rng.below(10),
            k,
            stride: 1 + rng.below(3),
            pad: rng.below(k),
        };
        let mut ints = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.below(9) as f64 - 4.0).collect() };
        let x = ints(g.input_shape().iter().product());
        let w = ints(g.weight_shape().iter().product());
        let dy = ints(g.output_shape().iter().product());
        let xt = ok(Tensor::<f64>::from_vec(x.clone(), &g.input_shape()))?.into_leaf(true);
        let wt = ok(Tensor::<f64>::from_vec(w.clone(), &g.weight_shape()))?.into_leaf(true);
        let r = ok(Tensor::<f64>::from_vec(dy.clone(), &g.output_shape()))?;
        let y = ok(xt.conv2d(&wt, g.stride, g.pad))?;
        ensure!(y.to_vec() == conv2d_forward(&g, &x, &w), "case {case} {g:?}: forward differs");
        let grads = ok(backward(&ok(y.mul(&r))?.sum_all(), &[&xt, &wt], false))?;
        let (dx, dw) = conv2d_backward(&g, &x, &w, &dy);
        ensure!(grads.get_or_zeros(&xt).to_vec() == dx, "case {case} {g:?}: input gradient differs");
        ensure!(grads.get_or_zeros(&wt).to_vec() == dw, "case {case} {g:?}: weight gradient differs");

        let seed = rng.below(usize::MAX) as u64;
        let u = |shape: &[usize], s| Tensor::<f64>::create(shape, FillKind::Uniform { lo: -1.0, hi: 1.0, seed: s });
        let (xu, wu, yu) = (ok(u(&g.input_shape(), seed))?, ok(u(&g.weight_shape(), seed ^ 1))?, ok(u(&g.output_shape(), seed ^ 2))?);
        let lhs = ok(ok(ok(xu.conv2d(&wu, g.stride, g.pad))?.mul(&yu))?.sum_all().item())?;
        let back = ok(yu.conv_transpose2d(&wu, g.stride, g.pad, Some((g.h, g.w))))?;
        let rhs = ok(ok(xu.mul(&back))?.sum_all().item())?;
        adjoint_worst = adjoint_worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12));
    }
    ensure!(adjoint_worst <= 1e-6, "adjoint rel err {adjoint_worst:.2e}");
    Ok(format!("50 geometries exact; adjoint rel err {adjoint_worst:.1e}"))
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        seed,
        arch: ArchConfig { image_size: 32, base_filters: 4, n_resblocks: 1, n_domains: 3, d_layers: None },
        ..TrainConfig::default()
    }
}

fn small_data(dir: &Path) -> Result<Dataset, String> {
    ok(synth_generate(32, 32, 9, dir))?;
    ok(Dataset::open(dir))
}

fn logged(t: &mut Trainer, data: &Dataset, until: u64) -> Result<Vec<String>, String> {
    let mut rows = Vec::new();
    ok(t.run_until(data, until, |_, r| {
        rows.push(r.to_tsv());
        Ok(())
    }))?;
    Ok(rows)
}

fn determinism_and_persistence(tmp: &Path) -> Outcome {
    let data = small_data(&tmp.join("det"))?;
    let a = logged(&mut ok(Trainer::new(small_config(5)))?, &data, 110)?;
    let b = logged(&mut ok(Trainer::new(small_config(5)))?, &data, 110)?;
    ensure!(a == b, "two fixed-seed runs diverge");

    let ck = tmp.join("det.satc");
    let mut first = ok(Trainer::new(small_config(5)))?;
    logged(&mut first, &data, 10)?;
    ok(first.save(&ck))?;
    let mut resumed = ok(Trainer::load(&ck))?;
    ensure!(logged(&mut resumed, &data, 110)? == a[10..], "resumed trace differs from uninterrupted run");

    let ck2 = tmp.join("det2.satc");
    ok(ok(Trainer::load(&ck))?.save(&ck2))?;
    ensure!(ok(fs::read(&ck))? == ok(fs::read(&ck2))?, "save -> load -> save changed bytes");
    Ok("110-step logs identical; 100 resumed steps identical; checkpoint bytes stable".into())
}

fn update_ratio_and_isolation(tmp: &Path) -> Outcome {
    let data = small_data(&tmp.join("ratio"))?;
    let mut t = ok(Trainer::new(small_config(6)))?;
    let mut g_updates = 0;
    let mut violations = Vec::new();
    for _ in 0..25 {
        let (g0, d0) = (t.generator.digest(), t.discriminator.digest());
        let iter = t.iter;
        let schedule = ok(t.schedule(&data))?;
        let batch = ok(schedule.batch(&data, iter, true))?;
        let lr = t.config.lr_at(schedule.epoch_of(iter));
        let rng = SatRng::new(99).fork(iter);
        let c_t = ok(sat_core::train::sample_targets(&batch.labels, &mut rng.fork(1)))?;
        let eps = ok(Tensor::create(&[4], FillKind::Uniform { lo: 0.0, hi: 1.0, seed: rng.fork(2).key() }))?;
        ok(t.d_step(&batch, &c_t, &eps, lr))?;
        let d1 = t.discriminator.digest();
        if t.generator.digest() != g0 || d1 == d0 {
            violations.push(format!("critic step {iter}"));
        }
        if t.is_generator_step(iter) {
            ok(t.g_step(&batch, &c_t, lr))?;
            g_updates += 1;
            if t.discriminator.digest() != d1 || t.generator.digest() == g0 {
                violations.push(format!("generator step {iter}"));
            }
        }
        t.iter += 1;
    }
    ensure!(violations.is_empty(), "isolation violated at {violations:?}");

    let mut t = ok(Trainer::new(small_config(6)))?;
    let mut logged_g = 0;
    ok(t.run_until(&data, 25, |_, r| {
        logged_g += r.g.is_some() as usize;
        Ok(())
    }))?;
    ensure!(g_updates == 5 && logged_g == 5, "{g_updates} direct / {logged_g} logged generator updates");
    Ok("25 steps -> 5 generator updates; parameter hashes isolated".into())
}

fn lr_schedule() -> Outcome {
    let c = TrainConfig::default();
    let got = [c.lr_at(5.0), c.lr_at(15.0), c.lr_at(20.0)];
    ensure!(got == [1e-4, 5e-5, 0.0], "{got:?}");
    Ok("epoch 5 -> 1e-4, 15 -> 5e-5, 20 -> 0".into())
}

struct Desk {
    root: PathBuf,
}

impl Desk {
    fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }
    fn test_dir(&self) -> PathBuf {
        self.root.join("test")
    }
}

fn desk_training(desk: &Desk) -> Outcome {
    let (train, test) = (desk.train_dir(), desk.test_dir());
    sat(&["synth", "--out", p(&train), "--count", "8000", "--size", "32", "--seed", "1"])?;
    sat(&["synth", "--out", p(&test), "--count", "500", "--size", "32", "--seed", "2"])?;
    let clf = desk.root.join("clf.satc");
    sat(&["train-classifier", "--data", p(&train), "--out", p(&clf), "--seed", "1"])?;

    let ck = desk.root.join("sat-al.satc");
    let log = desk.root.join("loss.tsv");
    let start = Instant::now();
    sat(&["train", "--data", p(&train), "--out-checkpoint", p(&ck), "--log", p(&log), "--seed", "1"])?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let rows = ok(fs::read_to_string(&log))?;
    let g_updates = rows.lines().skip(1).filter(|l| !l.split('\t').nth(6).unwrap_or("").is_empty()).count();
    ensure!(g_updates == 2000, "{g_updates} generator updates");

    let table = sat(&["eval", "--checkpoint", p(&ck), "--classifier", p(&clf), "--data", p(&test), "--ops", "A0,A1,A2"])?;
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    let col = |i: usize| -> Result<Vec<f64>, String> { rows.iter().map(|r| ok(r[i].parse::<f64>())).collect() };
    let acc = col(2)?;
    let outside = col(3)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (acc, outside, id_l1) = (mean(&acc), mean(&outside), col(4)?[0]);
    let detail = format!(
        "accuracy {acc:.3} (>= 0.85), identity L1 {id_l1:.4} (<= 0.08), outside energy {:.1}% (<= 25%), {minutes:.1} min on {} core(s)",
        100.0 * outside,
        std::thread::available_parallelism().map_or(1, |n| n.get())
    );
    ensure!(acc >= 0.85 && id_l1 <= 0.08 && outside <= 0.25, "{detail}");
    Ok(detail)
}

fn variant_matrix(desk: &Desk) -> Outcome {
    let data = desk.root.join("variants-data");
    sat(&["synth", "--out", p(&data), "--count", "800", "--size", "32", "--seed", "3"])?;
    for v in ["lr", "ll", "ar", "al"] {
        let ck = desk.root.join(format!("sat-{v}-200.satc"));
        let log = desk.root.join(format!("sat-{v}-200.tsv"));
        sat(&["train", "--data", p(&data), "--out-checkpoint", p(&ck), "--variant", v, "--max-iters", "200", "--log", p(&log)])?;
        let text = ok(fs::read_to_string(&log))?;
        let rows: Vec<&str> = text.lines().skip(1).collect();
        ensure!(rows.len() == 200, "{v}: {} log rows", rows.len());
        for row in &rows {
            for cell in row.split('\t').filter(|c| !c.is_empty()) {
                ensure!(ok(cell.parse::<f64>())?.is_finite(), "{v}: non-finite value in {row}");
            }
        }
        let t = ok(Trainer::load(&ck))?;
        let mut finite = true;
        t.generator.visit("", &mut |_, p| finite &= p.is_finite());
        t.discriminator.visit("", &mut |_, p| finite &= p.is_finite());
        ensure!(finite, "{v}: parameters contain NaN or Inf");
    }
    Ok("lr, ll, ar, al: 200 steps each, all losses and parameters finite".into())
}

fn real_valued_vectors(desk: &Desk) -> Outcome {
    let image = desk.root.join("variants-data").join("img_000000.ppm");
    let mut count = 0;
    for v in ["lr", "ll", "ar", "al"] {
        let ck = desk.root.join(format!("sat-{v}-200.satc"));
        ensure!(ck.exists(), "missing {v} checkpoint from the variant matrix run");
        let generator = ok(Trainer::load(&ck))?.generator;
        for value in [-1.0, 0.5, 2.0] {
            let vector = format!("{value},{value},{value}");
            let prefix = desk.root.join(format!("real-{v}-{value}"));
            sat(&["translate", "--checkpoint", p(&ck), "--image", p(&image), "--vector", &vector, "--out", p(&prefix)])?;
            let out = ok(image_read_ppm(&PathBuf::from(format!("{}.ppm", p(&prefix)))))?;
            ensure!(out.shape() == [3, 32, 32], "{v} {value}: output shape {:?}", out.shape());
            let x = ok(ok(image_read_ppm(&image))?.reshape(&[1, 3, 32, 32]))?;
            let cond = ok(Condition::repeat(generator.variant.kind, &[value; 3], 1))?;
            let y = ok(sat_core::no_grad(|| generator.forward(&x, &cond)))?.y;
            ensure!(y.data().iter().all(|p| (-1.0..=1.0).contains(p)), "{v} {value}: output leaves [-1, 1]");
            count += 1;
        }
    }
    Ok(format!("{count} translations, all in [-1, 1]"))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let desk = Desk { root: tmp.path().join("desk") };
    fs::create_dir_all(&desk.root).expect("desk dir");
    let t = tmp.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient correctness", Box::new(gradient_correctness)),
        ("gradient-penalty double-backward", Box::new(penalty_double_backward)),
        ("blending identities", Box::new(blending_identities)),
        ("action algebra", Box::new(action_algebra)),
        ("conv oracle equivalence", Box::new(conv_oracle)),
        ("determinism and persistence", Box::new(move || determinism_and_persistence(t))),
        ("update ratio and isolation", Box::new(move || update_ratio_and_isolation(t))),
        ("learning-rate schedule", Box::new(lr_schedule)),
        ("desk-scale training smoke", Box::new(|| desk_training(&desk))),
        ("variant matrix smoke", Box::new(|| variant_matrix(&desk))),
        ("real-valued robustness", Box::new(|| real_valued_vectors(&desk))),
    ];
    let only = std::env::var("SAT_ACCEPTANCE_ONLY").ok();
    let mut failed = 0;
    for (name, check) in &criteria {
        if only.as_deref().is_some_and(|o| !o.split(',').any(|part| name.contains(part))) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| Err(e.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
