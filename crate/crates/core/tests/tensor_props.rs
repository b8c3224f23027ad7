use proptest::prelude::*;
use sat_core::nn::{instance_norm, IN_EPS};
use sat_core::reference::{conv2d_backward, conv2d_forward, ConvGeometry};
use sat_core::tensor::FillKind;
use sat_core::{backward, Tensor};

fn geometry() -> impl Strategy<Value = ConvGeometry> {
    (1usize..=2, 1usize..=6, 1usize..=6, 1usize..=4, 1usize..=3)
        .prop_flat_map(|(n, c_in, c_out, k, stride)| {
            (Just((n, c_in, c_out, k, stride)), 0..k, k..=9usize, k..=9usize)
        })
        .prop_map(|((n, c_in, c_out, k, stride), pad, h, w)| ConvGeometry { n, c_in, c_out, h, w, k, stride, pad })
}

fn ints(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-4i32..=4).prop_map(f64::from), len)
}

fn case() -> impl Strategy<Value = (ConvGeometry, Vec<f64>, Vec<f64>, Vec<f64>)> {
    geometry().prop_flat_map(|g| {
        let (nx, nw, ny) = (
            g.input_shape().iter().product(),
            g.weight_shape().iter().product(),
            g.output_shape().iter().product(),
        );
        (Just(g), ints(nx), ints(nw), ints(ny))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    // Integer operands keep every partial sum exact, so the two summation
    // orders must agree bit for bit.
    #[test]
    fn conv2d_matches_nested_loops((g, x, w, dy) in case()) {
        let xt = Tensor::<f64>::from_vec(x.clone(), &g.input_shape()).unwrap().into_leaf(true);
        let wt = Tensor::<f64>::from_vec(w.clone(), &g.weight_shape()).unwrap().into_leaf(true);
        let r = Tensor::<f64>::from_vec(dy.clone(), &g.output_shape()).unwrap();
        let y = xt.conv2d(&wt, g.stride, g.pad).unwrap();
        prop_assert_eq!(y.shape(), &g.output_shape()[..]);
        prop_assert_eq!(y.to_vec(), conv2d_forward(&g, &x, &w));

        let loss = y.mul(&r).unwrap().sum_all();
        let grads = backward(&loss, &[&xt, &wt], false).unwrap();
        let (dx, dw) = conv2d_backward(&g, &x, &w, &dy);
        prop_assert_eq!(grads.get_or_zeros(&xt).to_vec(), dx);
        prop_assert_eq!(grads.get_or_zeros(&wt).to_vec(), dw);
    }

    #[test]
    fn transposed_conv_is_adjoint(g in geometry(), seed in any::<u64>()) {
        let u = |shape: &[usize], s: u64| {
            Tensor::<f64>::create(shape, FillKind::Uniform { lo: -1.0, hi: 1.0, seed: s }).unwrap()
        };
        let x = u(&g.input_shape(), seed);
        let w = u(&g.weight_shape(), seed ^ 1);
        let y = u(&g.output_shape(), seed ^ 2);
        let lhs = x.conv2d(&w, g.stride, g.pad).unwrap().mul(&y).unwrap().sum_all().item().unwrap();
        let back = y.conv_transpose2d(&w, g.stride, g.pad, Some((g.h, g.w))).unwrap();
        let rhs = x.mul(&back).unwrap().sum_all().item().unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(rhs.abs()).max(1.0), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn instance_norm_standardizes_each_channel(seed in any::<u64>(), scale in 0.5f64..20.0) {
        let x = Tensor::<f64>::create(&[2, 3, 5, 4], FillKind::Uniform { lo: -scale, hi: scale, seed }).unwrap();
        let y = instance_norm(&x, &Tensor::ones(&[3]).unwrap(), &Tensor::zeros(&[3]).unwrap(), IN_EPS).unwrap();
        for plane in y.data().chunks(20) {
            let mean = plane.iter().sum::<f64>() / 20.0;
            let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }
}

#[test]
fn instance_norm_affine_moves_statistics() {
    let x = Tensor::<f64>::create(&[1, 2, 6, 6], FillKind::Uniform { lo: -3.0, hi: 3.0, seed: 4 }).unwrap();
    let gamma = Tensor::from_vec(vec![2.0, 0.5], &[2]).unwrap();
    let beta = Tensor::from_vec(vec![1.0, -1.0], &[2]).unwrap();
    let y = instance_norm(&x, &gamma, &beta, IN_EPS).unwrap();
    for (plane, (g, b)) in y.data().chunks(36).zip([(2.0, 1.0), (0.5, -1.0)]) {
        let mean = plane.iter().sum::<f64>() / 36.0;
        let sd = (plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 36.0).sqrt();
        assert!((mean - b).abs() < 1e-9);
        assert!((sd - g).abs() < 1e-3);
    }
}

#[test]
fn double_backward_of_cubic() {
    let x = Tensor::<f64>::from_vec(vec![1.5, -2.0], &[2]).unwrap().into_leaf(true);
    let y = x.mul(&x).unwrap().mul(&x).unwrap().sum_all();
    let g = backward(&y, &[&x], true).unwrap().get_or_zeros(&x);
    assert_eq!(g.to_vec(), vec![6.75, 12.0]);
    let gg = backward(&g.sum_all(), &[&x], false).unwrap().get_or_zeros(&x);
    assert_eq!(gg.to_vec(), vec![9.0, -12.0]);
}
