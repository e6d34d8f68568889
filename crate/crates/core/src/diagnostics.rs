//! Collapse diagnostics: the max Hessian eigenvalue of the validation loss
//! with respect to the architecture parameters, validation-accuracy
//! landscape probing along normalized random directions, the analytic
//! convergence-rate proxy, and two residual-chain demonstrations of the
//! gradient-flow role of skip connections.
//!
//! The autodiff engine is strictly first order, so Hessian-vector products
//! are central finite differences of gradients:
//! `Hv ~ (g(a + eps*v) - g(a - eps*v)) / (2*eps)` with `eps = 1e-3 / |v|`.

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::rng;
use crate::supernet::{ArchParams, Supernet};
use crate::tape::Tape;
use crate::tensor::{gauss, Tensor};

/// Result of the power-iteration eigenvalue estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenEstimate {
    /// Dominant eigenvalue by magnitude (Rayleigh quotient of the last iterate).
    pub value: f64,
    pub iterations: usize,
    /// `|Hv - value*v| / |v|` at the last iterate.
    pub residual: f64,
    pub converged: bool,
}

/// Power iteration on an implicit symmetric operator given by a gradient
/// oracle around `center`.
pub fn power_iteration_max_eig(
    grad_at: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    center: &[f64],
    iters: usize,
    tol: f64,
    seed: u64,
) -> Result<EigenEstimate> {
    let dim = center.len();
    let mut r = rng::stream(seed, "power-iteration");
    let mut v: Vec<f64> = (0..dim).map(|_| gauss(&mut r)).collect();
    normalize(&mut v);

    let mut value = 0.0;
    let mut residual = f64::INFINITY;
    let mut used = 0;
    for it in 1..=iters {
        used = it;
        let hv = hessian_vec(grad_at, center, &v)?;
        value = dot(&v, &hv);
        let hv_norm = norm(&hv);
        residual = {
            let mut acc = 0.0;
            for i in 0..dim {
                let d = hv[i] - value * v[i];
                acc += d * d;
            }
            acc.sqrt()
        };
        if hv_norm == 0.0 {
            // Flat loss: the operator annihilates the iterate.
            return Ok(EigenEstimate {
                value: 0.0,
                iterations: it,
                residual: 0.0,
                converged: true,
            });
        }
        if residual <= tol {
            return Ok(EigenEstimate {
                value,
                iterations: it,
                residual,
                converged: true,
            });
        }
        for (vi, hvi) in v.iter_mut().zip(&hv) {
            *vi = hvi / hv_norm;
        }
    }
    Ok(EigenEstimate {
        value,
        iterations: used,
        residual,
        converged: false,
    })
}

fn hessian_vec(
    grad_at: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    center: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    let eps = 1e-3 / norm(v);
    let plus: Vec<f64> = center.iter().zip(v).map(|(c, vi)| c + eps * vi).collect();
    let minus: Vec<f64> = center.iter().zip(v).map(|(c, vi)| c - eps * vi).collect();
    let gp = grad_at(&plus)?;
    let gm = grad_at(&minus)?;
    if gp.iter().chain(&gm).any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient in Hessian-vector product".into()));
    }
    Ok(gp
        .iter()
        .zip(&gm)
        .map(|(p, m)| (p - m) / (2.0 * eps))
        .collect())
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for vi in v.iter_mut() {
            *vi /= n;
        }
    } else {
        v[0] = 1.0;
    }
}

/// Max Hessian eigenvalue of the validation loss w.r.t. the architecture
/// parameters, estimated on one fixed batch set.
pub fn hessian_max_eig(
    net: &Supernet,
    arch: &ArchParams,
    batch: &Batch,
    beta: f64,
    iters: usize,
    tol: f64,
    seed: u64,
) -> Result<EigenEstimate> {
    let center = arch.flatten();
    let mut grad_at = |flat: &[f64]| -> Result<Vec<f64>> {
        let probe = arch.unflatten_like(flat);
        let tape = Tape::new();
        let lifted = net.lift(&tape, false);
        let arch_vars = net.lift_arch(&tape, &probe, true);
        let (loss, _) = net.loss_and_accuracy(&tape, &lifted, &arch_vars, batch, beta)?;
        let grads = tape.backward(loss)?;
        let mut flat_grad = grads.grad(arch_vars.normal).data().to_vec();
        if let Some(rv) = arch_vars.reduce {
            flat_grad.extend_from_slice(grads.grad(rv).data());
        }
        Ok(flat_grad)
    };
    power_iteration_max_eig(&mut grad_at, &center, iters, tol, seed)
}

/// Validation-accuracy grid around the current architecture parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    pub radius: f64,
    pub resolution: usize,
    /// Row-major `resolution x resolution`: rows walk the second direction.
    pub values: Vec<f64>,
    /// Signed offsets shared by both axes.
    pub offsets: Vec<f64>,
    /// Seeds of the two random directions.
    pub dir_seeds: (u64, u64),
}

impl LandscapeGrid {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.resolution + col]
    }

    pub fn center(&self) -> f64 {
        let mid = self.resolution / 2;
        self.at(mid, mid)
    }
}

/// Probe the validation-accuracy landscape along two random directions.
///
/// Directions are Gaussian, then normalized per edge row to the norm of the
/// corresponding block of `arch` (the architecture analogue of filter-wise
/// normalization); rows with zero norm get no perturbation. The grid center
/// evaluates the unperturbed parameters bit-exactly.
pub fn landscape_probe(
    net: &Supernet,
    arch: &ArchParams,
    probe: &Dataset,
    beta: f64,
    radius: f64,
    resolution: usize,
    seed: u64,
    batch_size: usize,
) -> Result<LandscapeGrid> {
    if resolution < 3 || resolution % 2 == 0 {
        return Err(Error::InvalidConfig(
            "landscape resolution must be odd and >= 3".into(),
        ));
    }
    if radius < 0.0 {
        return Err(Error::InvalidConfig("landscape radius must be >= 0".into()));
    }
    let dir_seeds = (rng::derive_seed(seed, "dir1"), rng::derive_seed(seed, "dir2"));
    let d1 = direction_like(arch, dir_seeds.0);
    let d2 = direction_like(arch, dir_seeds.1);

    let n = resolution;
    let offsets: Vec<f64> = (0..n)
        .map(|i| radius * (2.0 * i as f64 / (n - 1) as f64 - 1.0))
        .collect();
    let mut values = Vec::with_capacity(n * n);
    for &b in &offsets {
        for &a in &offsets {
            let acc = if a == 0.0 && b == 0.0 {
                crate::search::evaluate(net, arch, probe, beta, batch_size)?.1
            } else {
                let probe_arch = perturbed(arch, &d1, &d2, a, b);
                crate::search::evaluate(net, &probe_arch, probe, beta, batch_size)?.1
            };
            values.push(acc);
        }
    }
    Ok(LandscapeGrid {
        radius,
        resolution,
        values,
        offsets,
        dir_seeds,
    })
}

fn direction_like(arch: &ArchParams, seed: u64) -> ArchParams {
    let mut r = rng::stream(seed, "direction");
    let mut gen_block = |t: &Tensor| {
        let [rows, cols] = [t.shape()[0], t.shape()[1]];
        let mut d = Tensor::randn(t.shape(), 1.0, &mut r);
        for row in 0..rows {
            let a = &t.data()[row * cols..(row + 1) * cols];
            let dr = &d.data()[row * cols..(row + 1) * cols];
            let a_norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d_norm = dr.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = if d_norm > 0.0 { a_norm / d_norm } else { 0.0 };
            for v in d.data_mut()[row * cols..(row + 1) * cols].iter_mut() {
                *v *= scale;
            }
        }
        d
    };
    ArchParams {
        normal: gen_block(&arch.normal),
        reduce: arch.reduce.as_ref().map(gen_block),
    }
}

fn perturbed(arch: &ArchParams, d1: &ArchParams, d2: &ArchParams, a: f64, b: f64) -> ArchParams {
    let combine = |base: &Tensor, x: &Tensor, y: &Tensor| {
        let mut out = base.clone();
        for i in 0..out.numel() {
            out.data_mut()[i] += a * x.data()[i] + b * y.data()[i];
        }
        out
    };
    ArchParams {
        normal: combine(&arch.normal, &d1.normal, &d2.normal),
        reduce: arch.reduce.as_ref().map(|r| {
            combine(
                r,
                d1.reduce.as_ref().unwrap(),
                d2.reduce.as_ref().unwrap(),
            )
        }),
    }
}

/// Convergence-rate proxy of a softmax-weighted (none, skip, conv) chain of
/// `h` layers with an auxiliary skip coefficient `beta`:
///
/// ```text
/// lambda = sum_{i=0}^{h-2} conv[i]^2 * prod_{t=0}^{i-1} (skip[i][t] + beta)^2
/// ```
///
/// `conv[i]` is the conv weight of edge `(i, h-1)` and `skip[i][t]` the skip
/// weight of edge `(t, i)`. The hidden proportionality constant is taken as
/// 1; only ratios and reductions of this quantity are meaningful. At
/// `beta = 0` the expression is exactly the plain-search form.
pub fn lambda_proxy(conv: &[f64], skip: &[Vec<f64>], beta: f64, h: usize) -> Result<f64> {
    if h < 2 {
        return Err(Error::InvalidConfig("lambda proxy needs h >= 2".into()));
    }
    if conv.len() != h - 1 {
        return Err(Error::InvalidConfig(format!(
            "missing conv weight: need {} entries for h = {h}, got {}",
            h - 1,
            conv.len()
        )));
    }
    if skip.len() < h - 1 {
        return Err(Error::InvalidConfig(format!(
            "missing skip weights: need {} rows for h = {h}, got {}",
            h - 1,
            skip.len()
        )));
    }
    for (i, row) in skip.iter().enumerate().take(h - 1) {
        if row.len() != i {
            return Err(Error::InvalidConfig(format!(
                "missing skip weight: row {i} must have {i} entries, got {}",
                row.len()
            )));
        }
    }
    let mut lambda = 0.0;
    for i in 0..=h - 2 {
        let mut product = 1.0;
        for t in 0..i {
            let f = skip[i][t] + beta;
            product *= f * f;
        }
        lambda += conv[i] * conv[i] * product;
    }
    Ok(lambda)
}

/// Trace of a single shared trainable skip coefficient on a residual chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBetaTrace {
    pub init_beta: f64,
    /// Learned coefficient after each epoch.
    pub betas: Vec<f64>,
}

/// Hyperparameters of the residual-chain demonstration.
#[derive(Debug, Clone)]
pub struct ResBetaConfig {
    pub depth: usize,
    pub epochs: usize,
    pub dim: usize,
    pub samples: usize,
    pub weight_lr: f64,
    pub beta_lr: f64,
    pub weight_std: f64,
}

impl Default for ResBetaConfig {
    fn default() -> Self {
        ResBetaConfig {
            depth: 6,
            epochs: 80,
            dim: 12,
            samples: 64,
            weight_lr: 0.02,
            beta_lr: 0.4,
            weight_std: 0.12,
        }
    }
}

/// Train a residual chain `x_{i+1} = x_i W_{i+1} + beta * x_i` with one
/// shared trainable scalar `beta` on an identity-regression task, recording
/// the learned coefficient per epoch.
///
/// The blocks are deliberately contractive at initialization, so signal
/// propagation (and hence low loss) requires a skip coefficient near 1; the
/// chain has to learn it.
pub fn resnet_beta_demo(
    init_beta: f64,
    cfg: &ResBetaConfig,
    data: &Tensor,
    seed: u64,
) -> Result<ResBetaTrace> {
    if !(0.0..=1.5).contains(&init_beta) {
        return Err(Error::InvalidConfig(format!(
            "init_beta must be in [0, 1.5], got {init_beta}"
        )));
    }
    if cfg.depth < 4 {
        return Err(Error::InvalidConfig("chain depth must be >= 4".into()));
    }
    if data.shape().len() != 2 {
        return Err(Error::InvalidConfig(format!(
            "demo data must be [n, d], got {:?}",
            data.shape()
        )));
    }
    let dim = data.shape()[1];
    let mut init = rng::stream(seed, "resnet/init");
    let mut weights: Vec<Tensor> = (0..cfg.depth)
        .map(|_| Tensor::randn(&[dim, dim], cfg.weight_std, &mut init))
        .collect();
    let mut beta = Tensor::scalar(init_beta);

    let mut betas = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let tape = Tape::new();
        let x0 = tape.constant(data.clone());
        let beta_v = tape.leaf(beta.clone());
        let w_vars: Vec<_> = weights.iter().map(|w| tape.leaf(w.clone())).collect();
        let mut x = x0;
        for &w in &w_vars {
            let f = tape.matmul(x, w)?;
            let skip = tape.scale_by(x, beta_v)?;
            x = tape.add(f, skip)?;
        }
        let loss = tape.mse(x, x0)?;
        let loss_val = tape.value(loss).item()?;
        if !loss_val.is_finite() {
            return Err(Error::NonFinite(format!(
                "residual chain diverged at epoch {epoch}"
            )));
        }
        let grads = tape.backward(loss)?;
        for (w, var) in weights.iter_mut().zip(&w_vars) {
            let g = grads.grad(*var);
            for (p, gi) in w.data_mut().iter_mut().zip(g.data()) {
                *p -= cfg.weight_lr * gi;
            }
        }
        beta.data_mut()[0] -= cfg.beta_lr * grads.grad(beta_v).data()[0];
        betas.push(beta.data()[0]);
    }
    Ok(ResBetaTrace { init_beta, betas })
}

/// Compare autodiff gradients on a linear residual chain against the
/// closed-form layer-to-layer product, returning the max relative error and
/// the gradient norm at the input.
pub fn gradient_flow_detail(depth: usize, beta: f64) -> Result<(f64, f64)> {
    if depth < 2 {
        return Err(Error::InvalidConfig("gradient flow needs depth >= 2".into()));
    }
    let dim = 6;
    let mut r = rng::stream(0xF10A, "gradflow");
    let weights: Vec<Tensor> = (0..depth)
        .map(|_| Tensor::randn(&[dim, dim], 0.35, &mut r))
        .collect();
    let x0 = Tensor::randn(&[1, dim], 1.0, &mut r);
    gradient_flow_with(&weights, &x0, beta)
}

/// Same check with caller-supplied block matrices.
pub fn gradient_flow_with(weights: &[Tensor], x0: &Tensor, beta: f64) -> Result<(f64, f64)> {
    let dim = x0.shape()[1];
    let tape = Tape::new();
    let mut states = vec![tape.leaf(x0.clone())];
    for w in weights {
        let x = *states.last().unwrap();
        let wv = tape.constant(w.clone());
        let f = tape.matmul(x, wv)?;
        let skip = tape.scale(x, beta)?;
        states.push(tape.add(f, skip)?);
    }
    let loss = tape.sum(*states.last().unwrap())?;
    let grads = tape.backward(loss)?;

    // Closed form, walking down from the top: g_i = g_{i+1} (W_{i+1}^T + beta I).
    let mut expected = vec![1.0; dim];
    let mut max_err = 0.0f64;
    for i in (0..weights.len()).rev() {
        let auto_top = grads
            .get(states[i + 1])
            .expect("intermediate gradients are retained");
        max_err = max_err.max(rel_err(auto_top.data(), &expected));
        let w = &weights[i];
        let mut next = vec![0.0; dim];
        for j in 0..dim {
            let mut acc = beta * expected[j];
            for c in 0..dim {
                acc += expected[c] * w.data()[j * dim + c];
            }
            next[j] = acc;
        }
        expected = next;
    }
    let g0 = grads.grad(states[0]);
    max_err = max_err.max(rel_err(g0.data(), &expected));
    Ok((max_err, g0.norm()))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Max relative error of the gradient-flow identity at `depth`, `beta`.
pub fn gradient_flow_check(depth: usize, beta: f64) -> Result<f64> {
    gradient_flow_detail(depth, beta).map(|(err, _)| err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn quadratic_eigenvalue_matches_dense_oracle() {
        // L(a) = a^T A a / 2 for symmetric A: the gradient is exactly A a, so
        // the finite-difference HVP is exact and power iteration must agree
        // with a dense eigensolver.
        let d = 6;
        let mut r = rng::stream(31, "quad");
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let v = gauss(&mut r);
                a[i * d + j] = v;
                a[j * d + i] = v;
            }
        }
        let mut grad = |x: &[f64]| -> Result<Vec<f64>> {
            Ok((0..d)
                .map(|i| (0..d).map(|j| a[i * d + j] * x[j]).sum())
                .collect())
        };
        let est =
            power_iteration_max_eig(&mut grad, &vec![0.0; d], 10_000, 1e-10, 99).unwrap();
        let dense = nalgebra::DMatrix::from_row_slice(d, d, &a)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        assert!(
            (est.value - dense).abs() / dense.abs() < 1e-6,
            "{} vs {dense}",
            est.value
        );
        assert!(est.converged);
    }

    #[test]
    fn constant_loss_has_zero_eigenvalue() {
        let mut grad = |_: &[f64]| -> Result<Vec<f64>> { Ok(vec![0.0; 4]) };
        let est = power_iteration_max_eig(&mut grad, &[0.0; 4], 100, 1e-10, 1).unwrap();
        assert!(est.value.abs() < 1e-8);
        assert!(est.converged);
    }

    #[test]
    fn lambda_reduces_to_plain_form_at_beta_zero() {
        let mut r = rng::stream(4, "lambda");
        for _ in 0..100 {
            let h = 2 + (r.gen::<u64>() % 5) as usize;
            let conv: Vec<f64> = (0..h - 1).map(|_| r.gen_range(0.0..1.0)).collect();
            let skip: Vec<Vec<f64>> = (0..h - 1)
                .map(|i| (0..i).map(|_| r.gen_range(0.0..1.0)).collect())
                .collect();
            let ours = lambda_proxy(&conv, &skip, 0.0, h).unwrap();
            // Direct plain-form evaluation.
            let mut expect = 0.0;
            for i in 0..=h - 2 {
                let mut p = 1.0;
                for t in 0..i {
                    p *= skip[i][t] * skip[i][t];
                }
                expect += conv[i] * conv[i] * p;
            }
            assert_eq!(ours.to_bits(), expect.to_bits());
        }
    }

    #[test]
    fn lambda_hand_computed_cases() {
        // h = 2: the product is empty regardless of beta.
        for beta in [0.0, 0.3, 1.0] {
            let v = lambda_proxy(&[0.7], &[vec![]], beta, 2).unwrap();
            assert!((v - 0.49).abs() < 1e-15);
        }
        // h = 3, conv 0.5, skip 0.15, beta 1: 0.25 + 0.25 * 1.15^2.
        let v = lambda_proxy(&[0.5, 0.5], &[vec![], vec![0.15]], 1.0, 3).unwrap();
        assert!((v - 0.580625).abs() < 1e-12);
    }

    #[test]
    fn lambda_missing_index_errors() {
        assert!(lambda_proxy(&[0.5], &[vec![]], 1.0, 3).is_err());
        assert!(lambda_proxy(&[0.5, 0.5], &[vec![]], 1.0, 3).is_err());
        assert!(lambda_proxy(&[0.5, 0.5], &[vec![], vec![0.1, 0.2]], 1.0, 3).is_err());
        assert!(lambda_proxy(&[], &[], 1.0, 1).is_err());
    }

    #[test]
    fn lambda_monotone_in_beta_for_nonnegative_weights() {
        let mut r = rng::stream(8, "mono");
        for _ in 0..200 {
            let h = 3 + (r.gen::<u64>() % 3) as usize;
            let conv: Vec<f64> = (0..h - 1).map(|_| r.gen_range(0.0..1.0)).collect();
            let skip: Vec<Vec<f64>> = (0..h - 1)
                .map(|i| (0..i).map(|_| r.gen_range(0.0..1.0)).collect())
                .collect();
            let b1: f64 = r.gen_range(0.0..1.0);
            let b2 = b1 + r.gen_range(0.0..1.0);
            let l1 = lambda_proxy(&conv, &skip, b1, h).unwrap();
            let l2 = lambda_proxy(&conv, &skip, b2, h).unwrap();
            assert!(l2 >= l1 - 1e-15);
        }
    }

    #[test]
    fn lambda_insensitive_to_skip_jitter_when_beta_dominates() {
        // At beta = 1, h = 4, skip weights 0.15: jittering every skip weight
        // uniformly within +-50% moves the proxy by well under 1% on average.
        let conv = vec![0.5, 0.5, 0.5];
        let nominal_skip = vec![vec![], vec![0.15], vec![0.15, 0.15]];
        let nominal = lambda_proxy(&conv, &nominal_skip, 1.0, 4).unwrap();
        let mut r = rng::stream(12, "jitter");
        let trials = 1000;
        let mut mean = 0.0;
        for _ in 0..trials {
            let skip: Vec<Vec<f64>> = nominal_skip
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|v| v * (1.0 + r.gen_range(-0.5..0.5)))
                        .collect()
                })
                .collect();
            mean += lambda_proxy(&conv, &skip, 1.0, 4).unwrap();
        }
        mean /= trials as f64;
        let change = (mean - nominal).abs() / nominal;
        assert!(change < 0.01, "mean jittered lambda moved by {change}");
    }

    #[test]
    fn frozen_beta_trace_is_constant() {
        let data = Tensor::randn(&[16, 8], 1.0, &mut rng::stream(2, "demo"));
        let cfg = ResBetaConfig {
            beta_lr: 0.0,
            epochs: 10,
            dim: 8,
            samples: 16,
            ..ResBetaConfig::default()
        };
        let trace = resnet_beta_demo(0.5, &cfg, &data, 3).unwrap();
        assert_eq!(trace.betas.len(), 10);
        assert!(trace.betas.iter().all(|&b| b == 0.5));
    }

    #[test]
    fn demo_rejects_bad_inputs() {
        let data = Tensor::randn(&[4, 4], 1.0, &mut rng::stream(2, "demo"));
        let cfg = ResBetaConfig::default();
        assert!(resnet_beta_demo(2.0, &cfg, &data, 0).is_err());
        let shallow = ResBetaConfig {
            depth: 2,
            ..ResBetaConfig::default()
        };
        assert!(resnet_beta_demo(0.5, &shallow, &data, 0).is_err());
    }

    #[test]
    fn gradient_flow_identity_small_depths() {
        for depth in 2..=8 {
            for beta in [0.0, 0.5, 1.0] {
                let err = gradient_flow_check(depth, beta).unwrap();
                assert!(err < 1e-10, "depth {depth} beta {beta}: err {err}");
            }
        }
    }

    #[test]
    fn identity_blocks_double_per_layer() {
        let depth = 5;
        let dim = 4;
        let weights: Vec<Tensor> = (0..depth).map(|_| Tensor::eye(dim)).collect();
        let x0 = Tensor::filled(&[1, dim], 0.3);
        // grad at input = 2^depth * ones; norm = 2^depth * sqrt(dim)
        let (err, g0) = gradient_flow_with(&weights, &x0, 1.0).unwrap();
        assert!(err < 1e-12);
        let expect = 2f64.powi(depth as i32) * (dim as f64).sqrt();
        assert!((g0 - expect).abs() / expect < 1e-12);
    }

    #[test]
    fn vanishing_without_skip_on_contractive_blocks() {
        let (_, g_beta0) = gradient_flow_detail(6, 0.0).unwrap();
        let (_, g_beta1) = gradient_flow_detail(6, 1.0).unwrap();
        assert!(
            g_beta0 < g_beta1,
            "contractive chain should vanish: {g_beta0} vs {g_beta1}"
        );
    }
}
