use std::fs;

use proptest::prelude::*;
use sat_core::data::netpbm::{image_read_ppm, image_write_ppm, mask_write_pgm};
use sat_core::data::synth::{image_spec, synth_generate, N_ATTRIBUTES};
use sat_core::data::{augment_flip, residual_image, Dataset};
use sat_core::model::blend;
use sat_core::rng::SatRng;
use sat_core::tensor::FillKind;
use sat_core::Tensor;

#[test]
fn synth_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth_generate(8, 32, 1, a.path()).unwrap();
    synth_generate(8, 32, 1, b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 9);
    for name in names {
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
    }
}

#[test]
fn label_marginals_are_balanced() {
    let n = 10_000;
    let mut counts = [0usize; N_ATTRIBUTES];
    for i in 0..n {
        for (c, l) in counts.iter_mut().zip(image_spec(3, i).0) {
            *c += l as usize;
        }
    }
    for c in counts {
        assert!((c as f64 / n as f64 - 0.5).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn dataset_loads_in_range() {
    let dir = tempfile::tempdir().unwrap();
    synth_generate(16, 32, 2, dir.path()).unwrap();
    let data = Dataset::open(dir.path()).unwrap();
    assert_eq!((data.len(), data.n_domains(), data.image_size), (16, 3, 32));
    for s in &data.samples {
        assert_eq!(s.image.shape(), &[3, 32, 32]);
        assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(s.labels.is_binary());
    }
}

#[test]
fn missing_image_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    synth_generate(4, 32, 2, dir.path()).unwrap();
    fs::remove_file(dir.path().join("img_000002.ppm")).unwrap();
    assert!(Dataset::open(dir.path()).is_err());
}

#[test]
fn ppm_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    synth_generate(2, 32, 5, dir.path()).unwrap();
    let src = dir.path().join("img_000001.ppm");
    let out = dir.path().join("copy.ppm");
    image_write_ppm(&out, &image_read_ppm(&src).unwrap()).unwrap();
    assert_eq!(fs::read(&src).unwrap(), fs::read(&out).unwrap());
}

#[test]
fn mask_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.pgm");
    mask_write_pgm(&p, &Tensor::from_vec(vec![0.0, 0.5, 1.0, 0.25], &[1, 2, 2]).unwrap()).unwrap();
    let bytes = fs::read(&p).unwrap();
    assert_eq!(&bytes[bytes.len() - 4..], &[0, 128, 255, 64]);
}

#[test]
fn flip_rate_is_fair() {
    let s = sat_core::data::Sample {
        image: Tensor::create(&[3, 2, 2], FillKind::Uniform { lo: -1.0, hi: 1.0, seed: 1 }).unwrap(),
        labels: sat_core::model::LabelVector(vec![1.0, 0.0, 1.0]),
    };
    let mut rng = SatRng::new(11);
    let mut flips = 0;
    for _ in 0..10_000 {
        let out = augment_flip(&s, &mut rng).unwrap();
        assert_eq!(out.labels, s.labels);
        flips += (out.image.data() != s.image.data()) as usize;
    }
    assert!((flips as f64 / 1e4 - 0.5).abs() <= 0.02, "{flips}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn codec_quantization_bound(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let x = Tensor::<f32>::create(&[3, 5, 7], FillKind::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap();
        image_write_ppm(&p, &x).unwrap();
        let back = image_read_ppm(&p).unwrap();
        let err = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        prop_assert!(err <= 1.0 / 127.5 + 1e-6);
    }

    #[test]
    fn residual_vanishes_where_mask_is_zero(seed in any::<u64>()) {
        let u = |s: u64, lo: f64, c: usize| {
            Tensor::<f32>::create(&[1, c, 6, 6], FillKind::Uniform { lo, hi: 1.0, seed: s }).unwrap()
        };
        let x = u(seed, -1.0, 3);
        let y_prime = u(seed ^ 1, -1.0, 3);
        // Zero out roughly half of the mask.
        let raw = u(seed ^ 2, -1.0, 1);
        let mask = raw.relu();
        let r = residual_image(&x, &blend(&x, &y_prime, &mask).unwrap()).unwrap();
        let bound = residual_image(&x, &y_prime).unwrap();
        for ((rv, m), b) in r.data().iter().zip(mask.data()).zip(bound.data()) {
            if *m == 0.0 {
                prop_assert_eq!(*rv, 0.0);
            } else {
                prop_assert!(*rv <= m * b + 1e-6);
            }
        }
    }
}
