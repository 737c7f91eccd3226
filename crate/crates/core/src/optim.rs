//! Adaptive-moment optimizer and the reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// One bias-corrected update of every parameter tensor.
    pub fn step(&mut self, params: Vec<&mut Vec<T>>, grads: Vec<&mut Vec<T>>, lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter list changed shape");
        assert_eq!(grads.len(), self.m.len(), "gradient list changed shape");
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::of(lr / c1);
        let c2_sqrt = T::of(c2.sqrt());
        let eps = T::of(self.eps);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                p[i] -= step * m[i] / (v[i].sqrt() / c2_sqrt + eps);
            }
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored value has failed
/// to improve on its best for `patience` consecutive epochs, then restarts the
/// count. Improvement means strictly smaller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::arg(format!("plateau factor must lie in (0, 1), got {factor}")));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::arg(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            lr,
            factor,
            patience,
            best: None,
            bad_epochs: 0,
        })
    }

    /// Records one epoch's monitored value; returns the rate for the next epoch.
    pub fn observe(&mut self, value: f64) -> f64 {
        if self.best.is_none_or(|best| value < best) {
            self.best = Some(value);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
