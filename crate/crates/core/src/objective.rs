//! Composite objective: source cross-entropy, orthogonality between the refined
//! branches, and the adversarial domain loss.

use serde::{Deserialize, Serialize};

use crate::disentangle::{logistic, Discriminator};
use crate::error::{Error, Result};
use crate::hsidata::Domain;
use crate::tensor::{FeatureMap, Matrix, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the orthogonality term.
    pub lambda1: f64,
    /// Weight of the domain term.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::arg("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
/// `labels` are zero-based class indices.
pub fn cls_loss<T: Real>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    if logits.rows != labels.len() {
        return Err(Error::arg("logit rows and labels differ in length"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols) {
        return Err(Error::arg(format!("label {bad} out of range for {} classes", logits.cols)));
    }
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    if logits.rows == 0 {
        return Ok((T::zero(), grad));
    }
    let n = T::of(logits.rows as f64);
    let mut total = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label];
        let g = grad.row_mut(r);
        for (c, gv) in g.iter_mut().enumerate() {
            let p = (row[c] - log_z).exp();
            *gv = (p - if c == label { T::one() } else { T::zero() }) / n;
        }
    }
    Ok((total / n, grad))
}

/// Value and input gradients of the orthogonality loss.
pub struct OrthoOutput<T> {
    pub value: T,
    pub d_di: FeatureMap<T>,
    pub d_ds: FeatureMap<T>,
}

/// Flattens every sample to a unit-norm row (zero rows stay zero). Returns the
/// rows and the original norms.
fn unit_rows<T: Real>(f: &FeatureMap<T>) -> (Matrix<T>, Vec<T>) {
    let d = f.channels * f.plane_len();
    let p = f.plane_len();
    let mut rows = Matrix::zeros(f.batch, d);
    for n in 0..f.batch {
        let row = rows.row_mut(n);
        for c in 0..f.channels {
            row[c * p..(c + 1) * p].copy_from_slice(f.plane(c, n));
        }
    }
    let mut norms = Vec::with_capacity(f.batch);
    for n in 0..f.batch {
        let row = rows.row_mut(n);
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() {
            row.iter_mut().for_each(|v| *v = *v / norm);
        }
        norms.push(norm);
    }
    (rows, norms)
}

/// Backpropagates through row normalization and scatters into map layout.
fn unit_rows_backward<T: Real>(rows: &Matrix<T>, norms: &[T], d_rows: &Matrix<T>, like: &FeatureMap<T>) -> FeatureMap<T> {
    let p = like.plane_len();
    let mut out = like.zeros_like();
    for n in 0..rows.rows {
        if norms[n] == T::zero() {
            continue;
        }
        let h = rows.row(n);
        let dh = d_rows.row(n);
        let dot = h.iter().zip(dh).map(|(&a, &b)| a * b).sum::<T>();
        for c in 0..like.channels {
            let dst = out.plane_mut(c, n);
            for (k, d) in dst.iter_mut().enumerate() {
                let i = c * p + k;
                *d = (dh[i] - h[i] * dot) / norms[n];
            }
        }
    }
    out
}

/// `‖H_di · H_dsᵀ‖²_F / N²` over L2-normalized flattened samples.
pub fn ortho_loss<T: Real>(di: &FeatureMap<T>, ds: &FeatureMap<T>) -> Result<OrthoOutput<T>> {
    if !di.same_shape(ds) {
        return Err(Error::arg("orthogonality inputs must share a shape"));
    }
    let n = di.batch;
    if n == 0 {
        return Ok(OrthoOutput {
            value: T::zero(),
            d_di: di.zeros_like(),
            d_ds: ds.zeros_like(),
        });
    }
    let (h_di, norm_di) = unit_rows(di);
    let (h_ds, norm_ds) = unit_rows(ds);
    let d = h_di.cols;
    let mut m = Matrix::zeros(n, n);
    T::gemm(n, d, n, T::one(), &h_di.data, false, &h_ds.data, true, T::zero(), &mut m.data);
    let n2 = T::of((n * n) as f64);
    let value = m.data.iter().map(|&v| v * v).sum::<T>() / n2;

    let scale = T::of(2.0) / n2;
    let mut dh_di = Matrix::zeros(n, d);
    T::gemm(n, n, d, scale, &m.data, false, &h_ds.data, false, T::zero(), &mut dh_di.data);
    let mut dh_ds = Matrix::zeros(n, d);
    T::gemm(n, n, d, scale, &m.data, true, &h_di.data, false, T::zero(), &mut dh_ds.data);
    Ok(OrthoOutput {
        value,
        d_di: unit_rows_backward(&h_di, &norm_di, &dh_di, di),
        d_ds: unit_rows_backward(&h_ds, &norm_ds, &dh_ds, ds),
    })
}

/// `BCE(σ(z), y)` and its derivative in `z`, stable for large `|z|`.
pub fn bce_with_logit<T: Real>(z: T, y: T) -> (T, T) {
    let value = z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
    (value, logistic(z) - y)
}

/// Domain loss over one combined batch plus every gradient it produces.
pub struct DomainLossOutput<T> {
    pub value: T,
    /// Gradient delivered to the invariant features (already sign-reversed when
    /// reversal is on).
    pub d_p_di: Matrix<T>,
    /// Gradient delivered to the specific features (never reversed).
    pub d_p_ds: Matrix<T>,
    /// Minimizing gradient for the discriminator's own parameters.
    pub disc_grad: Discriminator<T>,
}

fn mean_bce<T: Real>(
    disc: &Discriminator<T>,
    p: &Matrix<T>,
    domains: &[Domain],
    disc_grad: &mut Discriminator<T>,
) -> (T, Matrix<T>) {
    let (logits, cache) = disc.forward_cached(p);
    let n = T::of(p.rows.max(1) as f64);
    let mut value = T::zero();
    let dlogit: Vec<T> = logits
        .iter()
        .zip(domains)
        .map(|(&z, &d)| {
            let (v, g) = bce_with_logit(z, T::of(d.label()));
            value += v;
            g / n
        })
        .collect();
    let dp = disc.backward(&cache, &dlogit, Some(disc_grad));
    (value / n, dp)
}

/// Mean BCE of the discriminator on the invariant rows plus mean BCE on the
/// specific rows. `reversal` flips the sign of the gradient sent into the
/// invariant features (coefficient 1).
pub fn domain_loss<T: Real>(
    disc: &Discriminator<T>,
    p_di: &Matrix<T>,
    p_ds: &Matrix<T>,
    domains: &[Domain],
    reversal: bool,
) -> Result<DomainLossOutput<T>> {
    if p_di.cols != disc.width() || p_ds.cols != disc.width() {
        return Err(Error::arg("pooled width does not match discriminator"));
    }
    if p_di.rows != domains.len() || p_ds.rows != domains.len() {
        return Err(Error::arg("domain labels must align with pooled rows"));
    }
    let mut disc_grad = disc.zeros_like();
    let (v_di, mut d_p_di) = mean_bce(disc, p_di, domains, &mut disc_grad);
    let (v_ds, d_p_ds) = mean_bce(disc, p_ds, domains, &mut disc_grad);
    if reversal {
        d_p_di.data.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(DomainLossOutput {
        value: v_di + v_ds,
        d_p_di,
        d_p_ds,
        disc_grad,
    })
}

/// Four-batch form: source rows first, then target rows, for each branch.
pub fn domain_adv_loss<T: Real>(
    disc: &Discriminator<T>,
    p_di_src: &Matrix<T>,
    p_di_tgt: &Matrix<T>,
    p_ds_src: &Matrix<T>,
    p_ds_tgt: &Matrix<T>,
) -> Result<DomainLossOutput<T>> {
    let domains: Vec<Domain> = std::iter::repeat_n(Domain::Source, p_di_src.rows)
        .chain(std::iter::repeat_n(Domain::Target, p_di_tgt.rows))
        .collect();
    if p_ds_src.rows != p_di_src.rows || p_ds_tgt.rows != p_di_tgt.rows {
        return Err(Error::arg("branch batches must have matching sizes"));
    }
    domain_loss(disc, &p_di_src.vstack(p_di_tgt), &p_ds_src.vstack(p_ds_tgt), &domains, true)
}

/// `cls + λ1·ortho + λ2·dom`; any non-finite component is reported by name.
pub fn total_loss(cls: f64, ortho: f64, dom: f64, weights: &LossWeights) -> Result<f64> {
    for (component, value) in [("cls", cls), ("ortho", ortho), ("dom", dom)] {
        if !value.is_finite() {
            return Err(Error::Numeric { component, value });
        }
    }
    let total = cls + weights.lambda1 * ortho + weights.lambda2 * dom;
    if !total.is_finite() {
        return Err(Error::Numeric {
            component: "total",
            value: total,
        });
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng as _;

    #[test]
    fn uniform_logits_give_log_class_count() {
        let logits = Matrix::from_vec(3, 7, vec![0.4f64; 21]);
        let (v, _) = cls_loss(&logits, &[0, 3, 6]).unwrap();
        assert!((v - 7f64.ln()).abs() < 1e-12);
        assert!((v - 1.9459).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logit_drives_loss_to_zero() {
        let logits = Matrix::from_vec(1, 3, vec![80.0f64, 0.0, -5.0]);
        let (v, _) = cls_loss(&logits, &[0]).unwrap();
        assert!(v < 1e-30);
    }

    #[test]
    fn two_class_hand_softmax() {
        let logits = Matrix::from_vec(1, 2, vec![1.0f64, 0.0]);
        let (v, g) = cls_loss(&logits, &[0]).unwrap();
        let e = std::f64::consts::E;
        assert!((v + (e / (e + 1.0)).ln()).abs() < 1e-14);
        assert!((v - 0.3133).abs() < 1e-4);
        assert!((g.data[0] - (e / (e + 1.0) - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Matrix::from_vec(1, 2, vec![1.0f64, 0.0]);
        assert!(matches!(cls_loss(&logits, &[2]), Err(Error::Argument(_))));
    }

    #[test]
    fn orthogonal_branches_have_zero_loss() {
        let di = FeatureMap::from_vec(2, 2, 1, 1, vec![1.0f64, 2.0, 0.0, 0.0]);
        let ds = FeatureMap::from_vec(2, 2, 1, 1, vec![0.0f64, 0.0, 3.0, -1.0]);
        assert_eq!(ortho_loss(&di, &ds).unwrap().value, 0.0);
    }

    #[test]
    fn identical_unit_vectors_give_one() {
        let di = FeatureMap::from_vec(2, 1, 1, 1, vec![0.6f64, 0.8]);
        assert!((ortho_loss(&di, &di).unwrap().value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_sample_contributes_nothing() {
        let di = FeatureMap::from_vec(1, 2, 1, 2, vec![0.0f64, 0.0, 1.0, 1.0]);
        let ds = FeatureMap::from_vec(1, 2, 1, 2, vec![1.0f64, 1.0, 1.0, 1.0]);
        let out = ortho_loss(&di, &ds).unwrap();
        // only sample 1 of di is non-zero and it matches both ds rows: (1 + 1) / 4
        assert!((out.value - 0.5).abs() < 1e-15);
        assert!(out.d_di.plane(0, 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ortho_gradient_matches_finite_differences() {
        let mut rng = seeded(4, 0);
        let mk = |rng: &mut crate::rng::Rng| {
            FeatureMap::from_vec(2, 3, 2, 2, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>())
        };
        let (di, ds) = (mk(&mut rng), mk(&mut rng));
        let out = ortho_loss(&di, &ds).unwrap();
        let h = 1e-6;
        for i in 0..di.data.len() {
            let mut p = di.clone();
            p.data[i] += h;
            let mut m = di.clone();
            m.data[i] -= h;
            let fd = (ortho_loss(&p, &ds).unwrap().value - ortho_loss(&m, &ds).unwrap().value) / (2.0 * h);
            assert!((fd - out.d_di.data[i]).abs() < 1e-8);
            let mut p = ds.clone();
            p.data[i] += h;
            let mut m = ds.clone();
            m.data[i] -= h;
            let fd = (ortho_loss(&di, &p).unwrap().value - ortho_loss(&di, &m).unwrap().value) / (2.0 * h);
            assert!((fd - out.d_ds.data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn uninformative_discriminator_gives_two_ln_two() {
        let disc = Discriminator::<f64>::zeros(3, 0);
        let one = Matrix::from_vec(1, 3, vec![0.1, 0.2, 0.3]);
        let two = Matrix::from_vec(1, 3, vec![0.4, 0.5, 0.6]);
        let out = domain_adv_loss(&disc, &one, &two, &one, &two).unwrap();
        assert!((out.value - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((out.value - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn confident_discriminator_drives_domain_loss_to_zero() {
        let mut disc = Discriminator::<f64>::zeros(1, 0);
        disc.layers[0].weight = vec![100.0];
        let src = Matrix::from_vec(1, 1, vec![1.0]);
        let tgt = Matrix::from_vec(1, 1, vec![-1.0]);
        let out = domain_adv_loss(&disc, &src, &tgt, &src, &tgt).unwrap();
        assert!(out.value < 1e-40);
    }

    #[test]
    fn reversal_flips_invariant_gradient_only() {
        let mut rng = seeded(5, 0);
        let disc = Discriminator::<f64>::new(4, 3, &mut rng);
        let p_di = Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        let p_ds = Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        let doms = [Domain::Source, Domain::Target, Domain::Source];
        let on = domain_loss(&disc, &p_di, &p_ds, &doms, true).unwrap();
        let off = domain_loss(&disc, &p_di, &p_ds, &doms, false).unwrap();
        for (a, b) in on.d_p_di.data.iter().zip(&off.d_p_di.data) {
            assert_eq!(*a, -*b);
        }
        assert_eq!(on.d_p_ds, off.d_p_ds);
        assert_eq!(on.disc_grad, off.disc_grad);
        // the non-reversed gradient is the true derivative of the loss
        let h = 1e-6;
        for i in 0..p_di.data.len() {
            let mut pp = p_di.clone();
            pp.data[i] += h;
            let mut pm = p_di.clone();
            pm.data[i] -= h;
            let fd = (domain_loss(&disc, &pp, &p_ds, &doms, false).unwrap().value
                - domain_loss(&disc, &pm, &p_ds, &doms, false).unwrap().value)
                / (2.0 * h);
            assert!((fd - off.d_p_di.data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
        };
        assert_eq!(total_loss(0.7, 5.0, 9.0, &w).unwrap(), 0.7);
        let w = LossWeights {
            lambda1: 0.1,
            lambda2: 1.0,
        };
        assert!((total_loss(1.0, 2.0, 3.0, &w).unwrap() - 4.2).abs() < 1e-12);
        match total_loss(1.0, f64::NAN, 3.0, &w) {
            Err(Error::Numeric { component, .. }) => assert_eq!(component, "ortho"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn ortho_is_nonnegative_and_scale_invariant(
            a in proptest::collection::vec(-2.0f64..2.0, 12),
            b in proptest::collection::vec(-2.0f64..2.0, 12),
            scale in 0.01f64..100.0,
        ) {
            let di = FeatureMap::from_vec(2, 2, 1, 3, a.clone());
            let ds = FeatureMap::from_vec(2, 2, 1, 3, b);
            let v = ortho_loss(&di, &ds).unwrap().value;
            prop_assert!(v >= 0.0);
            // scale sample 1 of di only
            let mut scaled = di.clone();
            for c in 0..2 {
                scaled.plane_mut(c, 1).iter_mut().for_each(|x| *x *= scale);
            }
            let v2 = ortho_loss(&scaled, &ds).unwrap().value;
            prop_assert!((v - v2).abs() <= 1e-12 * (1.0 + v));
        }

        #[test]
        fn total_is_nonnegative_for_nonnegative_parts(
            c in 0.0f64..10.0, o in 0.0f64..10.0, d in 0.0f64..10.0,
            l1 in 0.0f64..5.0, l2 in 0.0f64..5.0,
        ) {
            let w = LossWeights { lambda1: l1, lambda2: l2 };
            prop_assert!(total_loss(c, o, d, &w).unwrap() >= 0.0);
        }
    }
}
