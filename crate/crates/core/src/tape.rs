//! Recording tape for reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only arena of computation nodes. Tensors enter as
//! leaves via [`Tape::leaf`] (trainable) or [`Tape::constant`] and every
//! [`Tape::apply`] records the primitive, its input handles and the computed
//! value. Append order is the topological order, so [`Tape::backward`] is a
//! single reverse sweep that visits each node exactly once, after all of its
//! consumers, accumulating gradients additively across fan-out.
//!
//! A tape lives for one forward/backward step and is then dropped. It is
//! single-threaded; independent tapes on separate threads are fine as long as
//! no handle crosses between them.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::ops::{self, Primitive};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tape_id: u64,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    /// `None` for leaves/constants and for outputs that need no backward pass.
    recorded: Option<(Primitive, Vec<Var>)>,
}

/// Append-only recording of a single forward computation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    tape_id: u64,
}

// Cheap per-process tape identity so cross-tape handle misuse is an error,
// not silent corruption.
fn next_tape_id() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(1);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            tape_id: next_tape_id(),
        }
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(node);
        Var {
            id,
            tape_id: self.tape_id,
        }
    }

    /// Register a trainable leaf. Its gradient is available after `backward`.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Node {
            value,
            requires_grad: true,
            recorded: None,
        })
    }

    /// Register a constant. No gradient is tracked through it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Node {
            value,
            requires_grad: false,
            recorded: None,
        })
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape_id != self.tape_id {
            return Err(Error::ForeignTape);
        }
        Ok(())
    }

    /// Apply a primitive to recorded values.
    ///
    /// The output is recorded for the backward pass iff any input requires a
    /// gradient; otherwise it is stored as a constant.
    pub fn apply(&self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        for v in inputs {
            self.check(*v)?;
        }
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let tensors: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.id].value).collect();
            let value = ops::forward(&prim, &tensors)?;
            let rg = inputs.iter().any(|v| nodes[v.id].requires_grad);
            (value, rg)
        };
        Ok(self.push(Node {
            value,
            requires_grad,
            recorded: requires_grad.then(|| (prim, inputs.to_vec())),
        }))
    }

    /// Clone out the value of a recorded tensor.
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Read a recorded value without cloning.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.id].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Gradients accumulate additively across fan-out. Every node that
    /// requires a gradient gets one of its own shape; nodes not on a path to
    /// the loss get zeros.
    pub fn backward(&self, loss: Var) -> Result<GradMap> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::InvalidTensor("backward on empty tape".into()));
        }
        {
            let lv = &nodes[loss.id].value;
            if !lv.is_scalar() {
                return Err(Error::NonScalarLoss(lv.shape().to_vec()));
            }
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let Some((prim, inputs)) = nodes[id].recorded.as_ref() else {
                continue;
            };
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = inputs
                .iter()
                .map(|v| nodes[v.id].requires_grad)
                .collect();
            let input_tensors: Vec<&Tensor> =
                inputs.iter().map(|v| &nodes[v.id].value).collect();
            let contribs = ops::backward(prim, &input_tensors, &nodes[id].value, &grad_out, &needs)?;
            for (v, contrib) in inputs.iter().zip(contribs) {
                let Some(contrib) = contrib else { continue };
                match &mut grads[v.id] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
            grads[id] = Some(grad_out);
        }
        // Nodes off the path to the loss still get a zero gradient.
        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(GradMap {
            grads,
            tape_id: self.tape_id,
        })
    }

    // -- convenience builders ------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[x])
    }

    pub fn scale_by(&self, x: Var, s: Var) -> Result<Var> {
        self.apply(Primitive::ScaleByScalar, &[x, s])
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        self.apply(Primitive::Conv2d { stride, pad }, &[x, w])
    }

    pub fn avg_pool(&self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        self.apply(
            Primitive::AvgPool2d {
                kernel,
                stride,
                pad,
            },
            &[x],
        )
    }

    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::GlobalAvgPool, &[x])
    }

    pub fn row(&self, x: Var, index: usize) -> Result<Var> {
        self.apply(Primitive::Row { index }, &[x])
    }

    pub fn select(&self, x: Var, index: usize) -> Result<Var> {
        self.apply(Primitive::Select { index }, &[x])
    }

    pub fn softmax(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[x])
    }

    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::AddBias, &[x, b])
    }

    pub fn add_chan_bias(&self, x: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::AddChanBias, &[x, b])
    }

    pub fn cross_entropy_logits(&self, logits: Var, onehot: Var) -> Result<Var> {
        self.apply(Primitive::CrossEntropyLogits, &[logits, onehot])
    }

    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mse, &[a, b])
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, inputs)
    }
}

/// Gradients from one backward sweep, keyed by tape handle.
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
    tape_id: u64,
}

impl GradMap {
    /// Gradient of the loss with respect to `v`, if one was tracked.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape_id != self.tape_id {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, panicking if `v` was not tracked.
    pub fn grad(&self, v: Var) -> &Tensor {
        self.get(v).expect("no gradient tracked for this handle")
    }
}

/// Max relative error between analytic and central-difference gradients of a
/// scalar-valued function at `point`.
///
/// The error is `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`. The
/// function is rebuilt on a fresh tape for every evaluation, so the check is
/// independent of any state cached by the caller.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::InvalidConfig("grad_check: step must be > 0".into()));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.constant(t.clone());
        let out = f(&tape, x)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check function value".into()));
        }
        Ok(v)
    };

    let tape = Tape::new();
    let x = tape.leaf(point.clone());
    let out = f(&tape, x)?;
    if !tape.value(out).item()?.is_finite() {
        return Err(Error::NonFinite("grad_check function value".into()));
    }
    let grads = tape.backward(out)?;
    let analytic = grads.grad(x).clone();

    let mut max_err = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_rel_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2, 3], vec![1., -2., 3., 0.5, 0., 9.]).unwrap());
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.grad(x), &Tensor::filled(&[2, 3], 1.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(Error::NonScalarLoss(ref s)) if s == &vec![2, 2]
        ));
    }

    #[test]
    fn fanout_accumulates() {
        // loss = sum(x + x) => grad = 2
        let tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[3], 1.5));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.grad(x), &Tensor::filled(&[3], 2.0));
    }

    #[test]
    fn off_path_leaf_gets_zero_grad() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[2], 1.0));
        let unused = tape.leaf(Tensor::filled(&[4], 1.0));
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.grad(unused), &Tensor::zeros(&[4]));
    }

    #[test]
    fn residual_chain_gradient_has_identity_term() {
        // y = x.A + x, loss = sum(y): grad(x) = ones.(A^T + I)
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let x0 = Tensor::randn(&[1, 4], 1.0, &mut rng);

        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let aw = tape.constant(a.clone());
        let fx = tape.matmul(x, aw).unwrap();
        let y = tape.add(fx, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();

        let mut expected = Tensor::zeros(&[1, 4]);
        for j in 0..4 {
            let mut acc = 1.0; // identity term times grad(y) = ones
            for c in 0..4 {
                acc += a.data()[j * 4 + c];
            }
            expected.data_mut()[j] = acc;
        }
        assert!(max_rel_diff(grads.grad(x), &expected) < 1e-12);
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w1 = Tensor::randn(&[5, 4], 0.7, &mut rng);
        let w2 = Tensor::randn(&[4, 3], 0.7, &mut rng);
        let x0 = Tensor::randn(&[2, 5], 1.0, &mut rng);
        let target = Tensor::randn(&[2, 3], 1.0, &mut rng);

        // Check d(loss)/d(w1) with w2, x held fixed.
        let err = grad_check(
            |tape, w1v| {
                let x = tape.constant(x0.clone());
                let w2v = tape.constant(w2.clone());
                let t = tape.constant(target.clone());
                let h = tape.relu(tape.matmul(x, w1v)?)?;
                let out = tape.matmul(h, w2v)?;
                tape.mse(out, t)
            },
            &w1,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn grad_check_square() {
        let err = grad_check(
            |tape, x| {
                let y = tape.mul(x, x)?;
                tape.sum(y)
            },
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn grad_check_cross_entropy_closed_form() {
        let logits = Tensor::from_vec(vec![1, 4], vec![0.3, -1.2, 2.0, 0.1]).unwrap();
        let mut onehot = Tensor::zeros(&[1, 4]);
        onehot.data_mut()[2] = 1.0;
        let err = grad_check(
            |tape, l| {
                let t = tape.constant(onehot.clone());
                tape.cross_entropy_logits(l, t)
            },
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn residual_identity_beta_term() {
        // y = f(x) + beta*x with constant beta: the analytic gradient carries
        // the additive beta*I contribution.
        for beta in [0.0, 0.5, 1.0] {
            let w = Tensor::randn(&[3, 3], 0.4, &mut ChaCha8Rng::seed_from_u64(3));
            let err = grad_check(
                |tape, x| {
                    let wv = tape.constant(w.clone());
                    let fx = tape.matmul(x, wv)?;
                    let bx = tape.scale(x, beta)?;
                    let y = tape.add(fx, bx)?;
                    tape.sum(y)
                },
                &Tensor::randn(&[1, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(4)),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-8, "beta {beta}: rel err {err}");
        }
    }

    #[test]
    fn gradient_accumulation_linearity() {
        // backward(a*L1 + b*L2) == a*backward(L1) + b*backward(L2)
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x0 = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 3], 0.8, &mut rng);
        let (a, b) = (1.7, -0.3);

        let build = |tape: &Tape, x: Var| -> (Var, Var) {
            let wv = tape.constant(w.clone());
            let h = tape.matmul(x, wv).unwrap();
            let l1 = tape.sum(tape.relu(h).unwrap()).unwrap();
            let l2 = tape.sum(tape.mul(h, h).unwrap()).unwrap();
            (l1, l2)
        };

        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let (l1, l2) = build(&tape, x);
        let combined = tape
            .add(tape.scale(l1, a).unwrap(), tape.scale(l2, b).unwrap())
            .unwrap();
        let g_combined = tape.backward(combined).unwrap().grad(x).clone();

        let tape1 = Tape::new();
        let x1 = tape1.leaf(x0.clone());
        let (l1, _) = build(&tape1, x1);
        let g1 = tape1.backward(l1).unwrap().grad(x1).clone();

        let tape2 = Tape::new();
        let x2 = tape2.leaf(x0.clone());
        let (_, l2) = build(&tape2, x2);
        let g2 = tape2.backward(l2).unwrap().grad(x2).clone();

        let mut expected = Tensor::zeros(&[2, 3]);
        for i in 0..6 {
            expected.data_mut()[i] = a * g1.data()[i] + b * g2.data()[i];
        }
        assert!(max_rel_diff(&g_combined, &expected) < 1e-10);
    }

    #[test]
    fn deterministic_replay() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let x0 = Tensor::randn(&[3, 3], 1.0, &mut rng);
            let tape = Tape::new();
            let x = tape.leaf(x0);
            let y = tape.softmax(x).unwrap();
            let loss = tape.sum(tape.mul(y, y).unwrap()).unwrap();
            let g = tape.backward(loss).unwrap().grad(x).clone();
            (tape.value(loss).item().unwrap(), g)
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }

    #[test]
    fn cross_tape_handles_are_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let x = t1.leaf(Tensor::scalar(1.0));
        assert!(matches!(t2.sum(x), Err(Error::ForeignTape)));
    }
}
