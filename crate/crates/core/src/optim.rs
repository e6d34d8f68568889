//! SGD with momentum (network weights) and Adam (architecture parameters).
//!
//! Both follow the standard update rules with L2 weight decay folded into the
//! gradient. The flat-slice step functions are the single source of truth;
//! the stateful wrappers just keep per-tensor buffers aligned.

use crate::error::{Error, Result};

fn check_finite(grads: &[f64], what: &str) -> Result<()> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("{what} gradient")));
    }
    Ok(())
}

/// One SGD-with-momentum step: `v = momentum*v + g + wd*p; p -= lr*v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), velocity.len());
    check_finite(grads, "sgd")?;
    for i in 0..params.len() {
        let g = grads[i] + weight_decay * params[i];
        velocity[i] = momentum * velocity[i] + g;
        params[i] -= lr * velocity[i];
    }
    Ok(())
}

/// Adam moment buffers for one parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One Adam step with bias correction; weight decay is L2 added to the
/// gradient (the torch `Adam(weight_decay=..)` convention).
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    check_finite(grads, "adam")?;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i] + weight_decay * params[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Cosine-annealed learning rate over `total` epochs, epoch `e` in `[1, total]`.
pub fn cosine_lr(lr0: f64, lr_min: f64, epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr0;
    }
    let t = (epoch - 1) as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut v = vec![0.0; 3];
        sgd_step(&mut p, &[0.0; 3], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);

        let mut state = AdamState::new(3);
        let before = p.clone();
        adam_step(&mut p, &[0.0; 3], &mut state, 0.1, 0.5, 0.999, 1e-8, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_sgd_matches_hand_recurrence() {
        // Scalar recurrence with lr=0.1, momentum=0.9, grads g1=1, g2=2:
        //   v1 = 1,     p1 = 1 - 0.1*1 = 0.9
        //   v2 = 0.9*1 + 2 = 2.9, p2 = 0.9 - 0.29 = 0.61
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
        sgd_step(&mut p, &[2.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] - 0.61).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // At t=1 bias correction gives m_hat = g and v_hat = g^2, so the
        // update is exactly -lr * g / (|g| + eps).
        let mut p = vec![0.0, 0.0];
        let mut state = AdamState::new(2);
        let g = [3.0, -0.5];
        let (lr, b1, b2, eps) = (0.01, 0.5, 0.999, 1e-8);
        adam_step(&mut p, &g, &mut state, lr, b1, b2, eps, 0.0).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            let expected = -lr * gi / (gi.abs() + eps);
            assert!((pi - expected).abs() < 1e-15, "{pi} vs {expected}");
        }
    }

    #[test]
    fn weight_decay_pulls_to_zero() {
        let mut p = vec![10.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[0.0], &mut v, 0.1, 0.0, 0.5).unwrap();
        assert!(p[0] < 10.0);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        assert!(sgd_step(&mut p, &[f64::NAN], &mut v, 0.1, 0.9, 0.0).is_err());
        let mut state = AdamState::new(1);
        assert!(adam_step(&mut p, &[f64::INFINITY], &mut state, 0.1, 0.5, 0.999, 1e-8, 0.0).is_err());
    }

    #[test]
    fn cosine_lr_endpoints() {
        assert!((cosine_lr(0.05, 0.001, 1, 50) - 0.05).abs() < 1e-12);
        let last = cosine_lr(0.05, 0.001, 50, 50);
        assert!(last > 0.001 && last < 0.0015);
    }
}
