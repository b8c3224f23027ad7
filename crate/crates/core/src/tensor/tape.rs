//! Gradient recording mode and the reverse sweep.
//!
//! The tape is implicit: every recorded operation links to its inputs, and
//! node ids are issued from a monotone counter, so sorting the nodes reachable
//! from a loss by id yields a topological order. The sweep visits each node
//! once, newest first.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};

use super::{Float, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct ModeGuard(bool);

impl Drop for ModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

pub(crate) fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    let _guard = ModeGuard(prev);
    f()
}

/// Run `f` without recording any operations.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

/// Gradients keyed by tensor identity.
#[derive(Debug)]
pub struct GradMap<T: Float> {
    grads: HashMap<u64, Tensor<T>>,
}

impl<T: Float> GradMap<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        self.grads.get(&t.id())
    }

    /// Gradient of `t`, or zeros of its shape when `t` was not requested.
    pub fn get_or_zeros(&self, t: &Tensor<T>) -> Tensor<T> {
        self.grads
            .get(&t.id())
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()).expect("valid shape"))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Reverse-mode gradients of a single-element `loss` with respect to `wrt`.
///
/// Every requested tensor gets an entry; tensors with no path to the loss get
/// zeros. With `create_graph` the backward rules run with recording enabled,
/// so the returned gradients can be differentiated again.
pub fn backward<T: Float>(
    loss: &Tensor<T>,
    wrt: &[&Tensor<T>],
    create_graph: bool,
) -> Result<GradMap<T>> {
    if loss.numel() != 1 {
        return Err(Error::NotScalar(loss.shape().to_vec()));
    }
    let wrt_ids: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();
    let mut grads: HashMap<u64, Tensor<T>> = HashMap::new();

    if loss.requires_grad() {
        let mut nodes = collect(loss);
        nodes.sort_unstable_by_key(|t| t.id());

        // A node is relevant when some requested tensor is reachable from it.
        let mut relevant: HashSet<u64> = HashSet::new();
        for node in &nodes {
            let reaches = wrt_ids.contains(&node.id())
                || node
                    .grad_fn()
                    .is_some_and(|g| g.inputs.iter().any(|i| relevant.contains(&i.id())));
            if reaches {
                relevant.insert(node.id());
            }
        }

        if relevant.contains(&loss.id()) {
            grads.insert(loss.id(), Tensor::ones(loss.shape())?);
            with_grad_mode(create_graph, || -> Result<()> {
                for node in nodes.iter().rev() {
                    if !relevant.contains(&node.id()) {
                        continue;
                    }
                    let upstream = if wrt_ids.contains(&node.id()) {
                        grads.get(&node.id()).cloned()
                    } else {
                        grads.remove(&node.id())
                    };
                    let (Some(upstream), Some(gf)) = (upstream, node.grad_fn()) else {
                        continue;
                    };
                    let needs: Vec<bool> =
                        gf.inputs.iter().map(|i| relevant.contains(&i.id())).collect();
                    if !needs.iter().any(|&b| b) {
                        continue;
                    }
                    let input_grads = (gf.backward)(&upstream, &needs)?;
                    for ((input, grad), need) in gf.inputs.iter().zip(input_grads).zip(&needs) {
                        let Some(grad) = grad else { continue };
                        if !need {
                            continue;
                        }
                        if grad.shape() != input.shape() {
                            return Err(Error::ShapeMismatch {
                                op: gf.op,
                                lhs: input.shape().to_vec(),
                                rhs: grad.shape().to_vec(),
                            });
                        }
                        let acc = match grads.remove(&input.id()) {
                            Some(prev) => prev.add(&grad)?,
                            None => grad,
                        };
                        grads.insert(input.id(), acc);
                    }
                }
                Ok(())
            })?;
        }
    }

    let mut out = HashMap::with_capacity(wrt.len());
    for t in wrt {
        let g = match grads.remove(&t.id()) {
            Some(g) => g,
            None => Tensor::zeros(t.shape())?,
        };
        out.insert(t.id(), g);
    }
    Ok(GradMap { grads: out })
}

fn collect<T: Float>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut seen = HashSet::new();
    let mut stack = vec![root.clone()];
    let mut nodes = Vec::new();
    while let Some(t) = stack.pop() {
        if !seen.insert(t.id()) {
            continue;
        }
        if let Some(gf) = t.grad_fn() {
            for input in &gf.inputs {
                if input.requires_grad() && !seen.contains(&input.id()) {
                    stack.push(input.clone());
                }
            }
        }
        nodes.push(t);
    }
    nodes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(v, shape).unwrap().into_leaf(true)
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let g = backward(&x.mean_all(), &[&x], false).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn rejects_non_scalar_loss() {
        let x = t(&[1.0, 2.0], &[2]);
        assert!(matches!(backward(&x, &[&x], false), Err(Error::NotScalar(_))));
    }

    #[test]
    fn unreachable_tensor_gets_zeros() {
        let x = t(&[1.0, 2.0], &[2]);
        let y = t(&[3.0, 4.0, 5.0], &[3]);
        let g = backward(&x.sum_all(), &[&x, &y], false).unwrap();
        assert_eq!(g.get(&y).unwrap().data(), &[0.0; 3]);
        assert_eq!(g.get(&x).unwrap().data(), &[1.0; 2]);
    }

    #[test]
    fn self_subtraction_cancels() {
        let x = t(&[1.5, -2.0, 0.25], &[3]);
        let d = x.sub(&x).unwrap();
        assert_eq!(d.data(), &[0.0; 3]);
        let g = backward(&d.sum_all(), &[&x], false).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn double_backward_of_cubic() {
        let xs = [0.5, -1.25, 2.0];
        let x = t(&xs, &[3]);
        let cube = x.mul(&x).unwrap().mul(&x).unwrap();
        let g1 = backward(&cube.sum_all(), &[&x], true).unwrap();
        let g = g1.get(&x).unwrap().clone();
        for (gv, xv) in g.data().iter().zip(xs) {
            assert_eq!(*gv, 3.0 * xv * xv);
        }
        assert!(g.requires_grad());
        let g2 = backward(&g.sum_all(), &[&x], false).unwrap();
        for (gv, xv) in g2.get(&x).unwrap().data().iter().zip(xs) {
            assert_eq!(*gv, 6.0 * xv);
        }
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = t(&[1.0], &[1]);
        let y = no_grad(|| x.scale(2.0));
        assert!(!y.requires_grad());
        assert!(grad_enabled());
        let z = x.scale(2.0);
        assert!(z.requires_grad());
    }

    #[test]
    fn first_order_gradients_are_detached() {
        let x = t(&[1.0, 2.0], &[2]);
        let g = backward(&x.mul(&x).unwrap().sum_all(), &[&x], false).unwrap();
        assert!(!g.get(&x).unwrap().requires_grad());
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let x = Tensor::<f64>::create(
                &[5],
                super::super::FillKind::Uniform { lo: -1.0, hi: 1.0, seed: 3 },
            )
            .unwrap()
            .into_leaf(true);
            let y = x.tanh().mul(&x.sigmoid()).unwrap().mean_all();
            backward(&y, &[&x], false).unwrap().get(&x).unwrap().to_vec()
        };
        assert_eq!(run(), run());
    }
}
