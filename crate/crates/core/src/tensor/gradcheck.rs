use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Central finite differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// element of `x`, evaluated in double precision with recording disabled.
pub fn finite_diff_gradient<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    central_differences(f, x, h, false)
}

/// Like [`finite_diff_gradient`] but keeps graph recording on while `f`
/// runs, for functions that differentiate internally.
pub fn finite_diff_gradient_recorded<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    central_differences(f, x, h, true)
}

fn central_differences<F>(f: F, x: &Tensor<f64>, h: f64, record: bool) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step {h} must be positive")));
    }
    let eval = |data: Vec<f64>| -> Result<f64> {
        let xp = Tensor::from_vec(data, x.shape())?;
        let y = if record { f(&xp)? } else { no_grad(|| f(&xp))? };
        y.item()
    };
    let base = x.to_vec();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        grad.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    Tensor::from_vec(grad, x.shape())
}

/// `max_i |a_i - b_i| / max(1, |b_i|)`; `b` is the reference.
pub fn max_rel_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_error shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_f64(&[0.3, -2.0, 5.0], &[3]).unwrap();
        let g = finite_diff_gradient(|x| Ok(x.sum_all()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_of_squares() {
        let x = Tensor::from_f64(&[1.0, 2.0], &[2]).unwrap();
        let g = finite_diff_gradient(|x| Ok(x.mul(x)?.mean_all()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-8);
        assert!((g.data()[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_non_scalar_and_bad_step() {
        let x = Tensor::from_f64(&[1.0, 2.0], &[2]).unwrap();
        assert!(finite_diff_gradient(|x| Ok(x.clone()), &x, 1e-5).is_err());
        assert!(finite_diff_gradient(|x| Ok(x.sum_all()), &x, 0.0).is_err());
    }
}
