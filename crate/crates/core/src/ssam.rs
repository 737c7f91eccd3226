//! Shift-sensitive mask-ratio control.
//!
//! Once per epoch the pooled inter-domain channel variance `μ` of the invariant
//! features is mapped through a shifted sigmoid, smoothed by an exponential moving
//! average, and converted into the channel suppression budget for the next epoch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

/// Per-channel pooled variance over the union of both domains, divided by
/// `n_s + n_t - 1`.
pub fn per_channel_pooled_variance<T: Real>(src: &Matrix<T>, tgt: &Matrix<T>) -> Result<Vec<f64>> {
    if src.cols != tgt.cols {
        return Err(Error::arg(format!(
            "pooled widths differ: {} vs {}",
            src.cols, tgt.cols
        )));
    }
    let n = src.rows + tgt.rows;
    if n < 2 {
        return Err(Error::arg("pooled variance needs at least two samples"));
    }
    let rows = || (0..src.rows).map(|r| src.row(r)).chain((0..tgt.rows).map(|r| tgt.row(r)));
    let mut mean = vec![0.0f64; src.cols];
    for row in rows() {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v.as_f64());
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut ss = vec![0.0f64; src.cols];
    for row in rows() {
        ss.iter_mut()
            .zip(row)
            .zip(&mean)
            .for_each(|((s, &v), &m)| *s += (v.as_f64() - m).powi(2));
    }
    Ok(ss.into_iter().map(|s| s / (n - 1) as f64).collect())
}

/// Channel-averaged pooled variance `μ`.
pub fn pooled_channel_variance<T: Real>(src: &Matrix<T>, tgt: &Matrix<T>) -> Result<f64> {
    let per = per_channel_pooled_variance(src, tgt)?;
    if per.is_empty() {
        return Ok(0.0);
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// `1 / (1 + exp(-slope·(μ - offset)))`.
pub fn shifted_sigmoid(mu: f64, slope: f64, offset: f64) -> f64 {
    let z = slope * (mu - offset);
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `round(C_f · min(r, r_max))`, halves rounded up.
pub fn mask_count(ratio: f64, channels: usize, r_max: f64) -> usize {
    let r = ratio.min(r_max).clamp(0.0, 1.0);
    ((channels as f64 * r) + 0.5).floor() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsamConfig {
    /// Sigmoid slope `k`.
    pub slope: f64,
    /// Sigmoid offset `s`.
    pub offset: f64,
    /// EMA momentum `m`.
    pub momentum: f64,
    /// Upper bound on the effective ratio.
    pub r_max: f64,
}

impl Default for SsamConfig {
    fn default() -> Self {
        Self {
            slope: 1.5,
            offset: 2.5,
            momentum: 0.1,
            r_max: 0.5,
        }
    }
}

impl SsamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.slope > 0.0) || !self.slope.is_finite() {
            return Err(Error::arg("sigmoid slope must be positive"));
        }
        if !self.offset.is_finite() {
            return Err(Error::arg("sigmoid offset must be finite"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::arg("EMA momentum must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.r_max) {
            return Err(Error::arg("r_max must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Monitor state; advanced once per epoch by the training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftState {
    pub config: SsamConfig,
    /// Smoothed mask ratio `r_e`; 0 until the first observation.
    pub r_current: f64,
    /// Number of observations folded in so far.
    pub epoch: usize,
    pub mu_history: Vec<f64>,
    pub r_prime_history: Vec<f64>,
    pub r_history: Vec<f64>,
}

/// Result of one monitor update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsamStep {
    pub mu: f64,
    pub r_prime: f64,
    pub r: f64,
    /// Budget for the following epoch.
    pub next_k: usize,
}

impl ShiftState {
    pub fn new(config: SsamConfig) -> Self {
        Self {
            config,
            r_current: 0.0,
            epoch: 0,
            mu_history: Vec::new(),
            r_prime_history: Vec::new(),
            r_history: Vec::new(),
        }
    }

    /// `r_e = (1 - m)·r_{e-1} + m·r'`; the first observation seeds the average.
    pub fn ema_update(&mut self, r_prime: f64) -> f64 {
        let m = self.config.momentum;
        // (1 - m)·r + m·r' written as an increment so that r' = r and the m ∈ {0, 1}
        // endpoints are reproduced exactly
        let r = if self.epoch == 0 || m == 1.0 {
            r_prime
        } else if m == 0.0 {
            self.r_current
        } else {
            self.r_current + m * (r_prime - self.r_current)
        };
        self.r_current = r;
        self.epoch += 1;
        self.r_prime_history.push(r_prime);
        self.r_history.push(r);
        r
    }

    /// Folds one epoch's `μ` into the state.
    pub fn observe(&mut self, mu: f64, channels: usize) -> SsamStep {
        let r_prime = shifted_sigmoid(mu, self.config.slope, self.config.offset);
        self.mu_history.push(mu);
        let r = self.ema_update(r_prime);
        SsamStep {
            mu,
            r_prime,
            r,
            next_k: mask_count(r, channels, self.config.r_max),
        }
    }

    /// Budget implied by the current ratio.
    pub fn current_k(&self, channels: usize) -> usize {
        mask_count(self.r_current, channels, self.config.r_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(v.len(), 1, v.to_vec())
    }

    #[test]
    fn constant_features_have_zero_variance() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(pooled_channel_variance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn hand_case_is_five_thirds() {
        // mean 2.5, SS = 2.25 + 0.25 + 0.25 + 2.25 = 5, divisor 3
        let mu = pooled_channel_variance(&col(&[1.0, 3.0]), &col(&[2.0, 4.0])).unwrap();
        assert!((mu - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn fewer_than_two_samples_is_an_error() {
        let empty = Matrix::<f64>::zeros(0, 1);
        assert!(matches!(pooled_channel_variance(&col(&[1.0]), &empty), Err(Error::Argument(_))));
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(shifted_sigmoid(2.5, 1.5, 2.5), 0.5);
        let want = 1.0 / (1.0 + 3.75f64.exp());
        assert!((shifted_sigmoid(0.0, 1.5, 2.5) - want).abs() < 1e-15);
        assert!((shifted_sigmoid(0.0, 1.5, 2.5) - 0.0230).abs() < 5e-5);
        assert!((shifted_sigmoid(1e6, 1.5, 2.5) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ema_examples() {
        let cfg = |m| SsamConfig {
            momentum: m,
            ..SsamConfig::default()
        };
        let mut s = ShiftState::new(cfg(0.5));
        assert_eq!(s.ema_update(0.2), 0.2); // seeded by the first observation
        assert!((s.ema_update(0.6) - 0.4).abs() < 1e-15);

        let mut s = ShiftState::new(cfg(0.0));
        s.ema_update(0.3);
        assert_eq!(s.ema_update(0.9), 0.3);
        let mut s = ShiftState::new(cfg(1.0));
        s.ema_update(0.3);
        assert_eq!(s.ema_update(0.9), 0.9);
    }

    #[test]
    fn mask_count_examples() {
        assert_eq!(mask_count(0.0, 64, 0.5), 0);
        assert_eq!(mask_count(0.10, 64, 0.5), 6);
        assert_eq!(mask_count(0.9, 64, 0.5), 32);
        assert_eq!(mask_count(0.5 / 64.0 + 1e-12, 1, 1.0), 0);
        // 6.5 rounds up
        assert_eq!(mask_count(6.5 / 64.0, 64, 1.0), 7);
    }

    #[test]
    fn observe_couples_to_next_budget() {
        let mut s = ShiftState::new(SsamConfig::default());
        let step = s.observe(2.5, 64);
        assert_eq!(step.r_prime, 0.5);
        assert_eq!(step.r, 0.5);
        assert_eq!(step.next_k, 32);
        assert_eq!(s.current_k(64), 32);
        assert_eq!(s.mu_history, vec![2.5]);
    }

    proptest! {
        #[test]
        fn variance_is_translation_invariant(
            a in proptest::collection::vec(-10.0f64..10.0, 6),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
            shift in -100.0f64..100.0,
        ) {
            let src = Matrix::from_vec(3, 2, a.clone());
            let tgt = Matrix::from_vec(2, 2, b.clone());
            let src2 = Matrix::from_vec(3, 2, a.iter().map(|v| v + shift).collect());
            let tgt2 = Matrix::from_vec(2, 2, b.iter().map(|v| v + shift).collect());
            let m1 = pooled_channel_variance(&src, &tgt).unwrap();
            let m2 = pooled_channel_variance(&src2, &tgt2).unwrap();
            prop_assert!((m1 - m2).abs() <= 1e-9 * (1.0 + m1.abs()));
        }

        #[test]
        fn ratio_stays_bounded_and_budget_capped(
            mus in proptest::collection::vec(0.0f64..20.0, 1..30),
            m in 0.0f64..=1.0,
            channels in 1usize..128,
        ) {
            let cfg = SsamConfig { momentum: m, ..SsamConfig::default() };
            let cap = (channels as f64 * cfg.r_max).ceil() as usize;
            let mut s = ShiftState::new(cfg);
            for mu in mus {
                let step = s.observe(mu, channels);
                prop_assert!(step.r > 0.0 && step.r < 1.0);
                prop_assert!(step.next_k <= cap);
            }
        }

        #[test]
        fn ema_fixed_point(r in 0.0f64..1.0, m in 0.0f64..=1.0) {
            let mut s = ShiftState::new(SsamConfig { momentum: m, ..SsamConfig::default() });
            s.ema_update(r);
            prop_assert_eq!(s.ema_update(r), r);
        }
    }
}
