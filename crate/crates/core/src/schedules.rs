//! Decay schedules for the auxiliary skip coefficient.
//!
//! The coefficient starts at `beta0` and is driven to zero over the search so
//! the supernet degenerates to the plain softmax-mixed form before
//! discretization. Linear decay is the default; cosine, step and
//! hold-then-linear (for long-epoch runs) are provided, plus a constant
//! schedule for ablations. `beta_at` is evaluated at epoch granularity: the
//! coefficient is constant within an epoch.

use crate::error::{Error, Result};

/// Decay policy kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayKind {
    Linear,
    Cosine,
    /// `beta0` until `step_epoch`, zero from `step_epoch` on.
    Step,
    /// `beta0` until `hold_until`, then linear to zero at the final epoch.
    HoldThenLinear,
    Constant,
}

impl DecayKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecayKind::Linear => "linear",
            DecayKind::Cosine => "cosine",
            DecayKind::Step => "step",
            DecayKind::HoldThenLinear => "hold-then-linear",
            DecayKind::Constant => "constant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(DecayKind::Linear),
            "cosine" => Ok(DecayKind::Cosine),
            "step" => Ok(DecayKind::Step),
            "hold-then-linear" => Ok(DecayKind::HoldThenLinear),
            "constant" => Ok(DecayKind::Constant),
            other => Err(Error::InvalidConfig(format!(
                "unknown decay kind `{other}` (expected linear|cosine|step|hold-then-linear|constant)"
            ))),
        }
    }
}

/// Auxiliary-coefficient schedule over a search of `total_epochs` epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaSchedule {
    pub kind: DecayKind,
    pub beta0: f64,
    pub total_epochs: usize,
    /// Switch epoch for [`DecayKind::Step`].
    pub step_epoch: usize,
    /// Hold horizon for [`DecayKind::HoldThenLinear`].
    pub hold_until: usize,
}

impl BetaSchedule {
    /// Linear decay from `beta0` to zero, the default policy.
    pub fn linear(beta0: f64, total_epochs: usize) -> Self {
        BetaSchedule {
            kind: DecayKind::Linear,
            beta0,
            total_epochs,
            step_epoch: 0,
            hold_until: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta0) {
            return Err(Error::InvalidConfig(format!(
                "beta0 must be in [0, 1], got {}",
                self.beta0
            )));
        }
        if self.total_epochs < 1 {
            return Err(Error::InvalidConfig("total_epochs must be >= 1".into()));
        }
        match self.kind {
            DecayKind::Step => {
                if self.step_epoch < 1 || self.step_epoch > self.total_epochs {
                    return Err(Error::InvalidConfig(format!(
                        "step_epoch must be in [1, {}], got {}",
                        self.total_epochs, self.step_epoch
                    )));
                }
            }
            DecayKind::HoldThenLinear => {
                if self.hold_until >= self.total_epochs {
                    return Err(Error::InvalidConfig(format!(
                        "hold_until must be < total_epochs ({}), got {}",
                        self.total_epochs, self.hold_until
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Coefficient at epoch `e`, for `0 <= e <= total_epochs`.
    ///
    /// Endpoints are exact: `beta_at(0) == beta0` and, for every kind but
    /// `Constant`, `beta_at(total_epochs) == 0`.
    pub fn beta_at(&self, epoch: usize) -> Result<f64> {
        let e = epoch;
        let total = self.total_epochs;
        if e > total {
            return Err(Error::InvalidConfig(format!(
                "epoch {e} out of schedule range [0, {total}]"
            )));
        }
        let b0 = self.beta0;
        Ok(match self.kind {
            DecayKind::Constant => b0,
            DecayKind::Linear => {
                if e == total {
                    0.0
                } else {
                    b0 * (1.0 - e as f64 / total as f64)
                }
            }
            DecayKind::Cosine => {
                if e == 0 {
                    b0
                } else if e == total {
                    0.0
                } else {
                    b0 * (1.0 + (std::f64::consts::PI * e as f64 / total as f64).cos()) / 2.0
                }
            }
            DecayKind::Step => {
                if e < self.step_epoch {
                    b0
                } else {
                    0.0
                }
            }
            DecayKind::HoldThenLinear => {
                if e < self.hold_until {
                    b0
                } else if e == total {
                    0.0
                } else {
                    b0 * (total - e) as f64 / (total - self.hold_until) as f64
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_endpoints() {
        let s = BetaSchedule::linear(1.0, 50);
        assert_eq!(s.beta_at(0).unwrap(), 1.0);
        assert_eq!(s.beta_at(50).unwrap(), 0.0);
        assert!((s.beta_at(25).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn step_switches_exactly() {
        let s = BetaSchedule {
            kind: DecayKind::Step,
            beta0: 1.0,
            total_epochs: 50,
            step_epoch: 45,
            hold_until: 0,
        };
        assert_eq!(s.beta_at(44).unwrap(), 1.0);
        assert_eq!(s.beta_at(45).unwrap(), 0.0);
    }

    #[test]
    fn cosine_midpoint() {
        let s = BetaSchedule {
            kind: DecayKind::Cosine,
            beta0: 1.0,
            total_epochs: 50,
            step_epoch: 0,
            hold_until: 0,
        };
        assert!((s.beta_at(25).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(s.beta_at(0).unwrap(), 1.0);
        assert_eq!(s.beta_at(50).unwrap(), 0.0);
    }

    #[test]
    fn hold_then_linear_long_run() {
        let s = BetaSchedule {
            kind: DecayKind::HoldThenLinear,
            beta0: 1.0,
            total_epochs: 150,
            step_epoch: 0,
            hold_until: 100,
        };
        assert_eq!(s.beta_at(99).unwrap(), 1.0);
        assert_eq!(s.beta_at(125).unwrap(), 0.5);
        assert_eq!(s.beta_at(150).unwrap(), 0.0);
    }

    #[test]
    fn zero_beta0_is_identically_zero() {
        for kind in [
            DecayKind::Linear,
            DecayKind::Cosine,
            DecayKind::Step,
            DecayKind::HoldThenLinear,
            DecayKind::Constant,
        ] {
            let s = BetaSchedule {
                kind,
                beta0: 0.0,
                total_epochs: 20,
                step_epoch: 10,
                hold_until: 5,
            };
            for e in 0..=20 {
                assert_eq!(s.beta_at(e).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn out_of_range_epoch_errors() {
        let s = BetaSchedule::linear(1.0, 10);
        assert!(s.beta_at(11).is_err());
    }

    proptest! {
        #[test]
        fn monotone_non_increasing_and_bounded(
            kind_idx in 0usize..5,
            beta0 in 0.0f64..=1.0,
            total in 1usize..200,
            a in 0usize..200,
            b in 0usize..200,
        ) {
            let kind = [
                DecayKind::Linear,
                DecayKind::Cosine,
                DecayKind::Step,
                DecayKind::HoldThenLinear,
                DecayKind::Constant,
            ][kind_idx];
            let s = BetaSchedule {
                kind,
                beta0,
                total_epochs: total,
                step_epoch: (a % total) + 1,
                hold_until: b % total,
            };
            s.validate().unwrap();
            let mut prev = f64::INFINITY;
            for e in 0..=total {
                let v = s.beta_at(e).unwrap();
                prop_assert!(v <= prev + 1e-15);
                prop_assert!((0.0..=beta0 + 1e-15).contains(&v));
                prev = v;
            }
        }
    }
}
