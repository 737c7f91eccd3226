//! Domain-invariant / domain-specific split and gradient-guided channel masks.
//!
//! The invariant encoder maps backbone features `F_b` to `F_di`; the specific part
//! is the residual `F_ds = F_b - F_di`. A shared discriminator scores each pooled
//! channel by `P_c · ∂ℓ/∂P_c`, where `ℓ` is the log-likelihood of the sample's true
//! domain. Invariant masks drop the top-K positively scored channels; specific
//! masks drop the K channels with the smallest absolute score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsidata::Domain;
use crate::layers::{
    join, leaky, leaky_backward, leaky_map, BatchNorm, BnCache, Conv2d, ConvCache, Linear, Mode, Module,
    NamedTensor, TensorKind,
};
use crate::rng::Rng;
use crate::tensor::{FeatureMap, Matrix, Real};

// ---------------------------------------------------------------------------
// Invariant encoder
// ---------------------------------------------------------------------------

/// Channel-preserving conv3×3 → BN → leaky block producing `F_di`.
#[derive(Clone, Debug, PartialEq)]
pub struct InvariantEncoder<T> {
    pub conv: Conv2d<T>,
    pub norm: BatchNorm<T>,
}

pub struct EncoderCache<T> {
    conv: ConvCache<T>,
    bn: BnCache<T>,
    out: FeatureMap<T>,
}

impl<T: Real> InvariantEncoder<T> {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        Self {
            conv: Conv2d::new(channels, channels, 3, false, rng),
            norm: BatchNorm::new(channels),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv: self.conv.zeros_like(),
            norm: self.norm.zeros_like(),
        }
    }

    pub fn forward(&self, fb: &FeatureMap<T>, mode: Mode) -> (FeatureMap<T>, EncoderCache<T>) {
        let (h, conv) = self.conv.forward(fb);
        let (n, bn) = self.norm.forward(&h, mode);
        let out = leaky_map(&n);
        (out.clone(), EncoderCache { conv, bn, out })
    }

    pub fn infer(&self, fb: &FeatureMap<T>, mode: Mode) -> FeatureMap<T> {
        let h = self.conv.infer(fb);
        leaky_map(&self.norm.forward(&h, mode).0)
    }

    pub fn backward(&self, cache: &EncoderCache<T>, dy: &FeatureMap<T>, grad: &mut Self) -> FeatureMap<T> {
        let dn = FeatureMap::from_vec(
            dy.channels,
            dy.batch,
            dy.height,
            dy.width,
            leaky_backward(&cache.out.data, &dy.data),
        );
        let dh = self.norm.backward(&cache.bn, &dn, &mut grad.norm);
        self.conv.backward(&cache.conv, &dh, &mut grad.conv)
    }

    pub fn commit(&mut self, cache: &EncoderCache<T>) {
        self.norm.commit(&cache.bn);
    }
}

impl<T: Real> Module<T> for InvariantEncoder<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        self.conv.tensors(&join(prefix, "conv"), out);
        self.norm.tensors(&join(prefix, "norm"), out);
    }
    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<(TensorKind, &'a mut Vec<T>)>) {
        self.conv.tensors_mut(out);
        self.norm.tensors_mut(out);
    }
}

/// `(F_di, F_ds)` with `F_ds = F_b - F_di`.
pub fn die_split<T: Real>(
    encoder: &InvariantEncoder<T>,
    fb: &FeatureMap<T>,
    mode: Mode,
) -> (FeatureMap<T>, FeatureMap<T>) {
    let di = encoder.infer(fb, mode);
    let ds = fb.sub(&di);
    (di, ds)
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Global average pooling: `N × C` matrix of per-sample channel means.
pub fn gap<T: Real>(f: &FeatureMap<T>) -> Matrix<T> {
    let scale = T::one() / T::of(f.plane_len() as f64);
    let mut p = Matrix::zeros(f.batch, f.channels);
    for c in 0..f.channels {
        for n in 0..f.batch {
            p.data[n * f.channels + c] = f.plane(c, n).iter().copied().sum::<T>() * scale;
        }
    }
    p
}

/// Spreads pooled gradients uniformly back over each spatial plane.
pub fn gap_backward<T: Real>(dp: &Matrix<T>, height: usize, width: usize) -> FeatureMap<T> {
    let mut out = FeatureMap::zeros(dp.cols, dp.rows, height, width);
    let scale = T::one() / T::of((height * width) as f64);
    for c in 0..dp.cols {
        for n in 0..dp.rows {
            let v = dp.get(n, c) * scale;
            out.plane_mut(c, n).iter_mut().for_each(|x| *x = v);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

/// Domain discriminator on pooled vectors. With `hidden = 0` it is a single
/// affine map `C_f → 1`; otherwise `C_f → hidden → leaky → 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub layers: Vec<Linear<T>>,
}

/// Intermediate values kept for the backward pass.
pub struct DiscCache<T> {
    inputs: Vec<Matrix<T>>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(width: usize, hidden: usize, rng: &mut Rng) -> Self {
        let layers = if hidden == 0 {
            vec![Linear::new(width, 1, rng)]
        } else {
            vec![Linear::new(width, hidden, rng), Linear::new(hidden, 1, rng)]
        };
        Self { layers }
    }

    pub fn zeros(width: usize, hidden: usize) -> Self {
        let layers = if hidden == 0 {
            vec![Linear::zeros(width, 1)]
        } else {
            vec![Linear::zeros(width, hidden), Linear::zeros(hidden, 1)]
        };
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Linear::zeros_like).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.layers[0].in_features
    }

    pub fn forward_cached(&self, p: &Matrix<T>) -> (Vec<T>, DiscCache<T>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = p.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&x);
            if i + 1 < self.layers.len() {
                y.data.iter_mut().for_each(|v| *v = leaky(*v));
            }
            inputs.push(x);
            x = y;
        }
        (x.data, DiscCache { inputs })
    }

    /// One logit per row of `p`; `logistic(logit)` is the probability of source.
    pub fn forward(&self, p: &Matrix<T>) -> Vec<T> {
        self.forward_cached(p).0
    }

    /// Gradient of `Σ_i dlogit_i · logit_i` with respect to the pooled input;
    /// parameter gradients are accumulated into `grad` when given.
    pub fn backward(&self, cache: &DiscCache<T>, dlogit: &[T], mut grad: Option<&mut Self>) -> Matrix<T> {
        let mut d = Matrix::from_vec(dlogit.len(), 1, dlogit.to_vec());
        for i in (0..self.layers.len()).rev() {
            let g = grad.as_deref_mut().map(|g| &mut g.layers[i]);
            let dx = self.layers[i].backward(&cache.inputs[i], &d, g);
            d = if i > 0 {
                // input of layer i is the leaky output of layer i-1
                Matrix::from_vec(dx.rows, dx.cols, leaky_backward(&cache.inputs[i].data, &dx.data))
            } else {
                dx
            };
        }
        d
    }
}

impl<T: Real> Module<T> for Discriminator<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.tensors(&join(prefix, &format!("fc{i}")), out);
        }
    }
    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<(TensorKind, &'a mut Vec<T>)>) {
        for l in &mut self.layers {
            l.tensors_mut(out);
        }
    }
}

pub fn logistic<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `log σ(z)` computed without overflow.
pub fn log_logistic<T: Real>(z: T) -> T {
    if z >= T::zero() {
        -((-z).exp().ln_1p())
    } else {
        z - z.exp().ln_1p()
    }
}

// ---------------------------------------------------------------------------
// Channel scores and masks
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelScores {
    pub values: Vec<f64>,
}

impl ChannelScores {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Log-likelihood of each sample's true domain under the discriminator, and its
/// derivative with respect to the logit.
pub fn domain_log_likelihood<T: Real>(logit: T, domain: Domain) -> (T, T) {
    match domain {
        Domain::Source => (log_logistic(logit), T::one() - logistic(logit)),
        Domain::Target => (log_logistic(-logit), -logistic(logit)),
    }
}

/// Batch-averaged `P_c · ∂ℓ/∂P_c`. Reads the discriminator only; no parameter
/// gradients are produced.
pub fn channel_scores<T: Real>(disc: &Discriminator<T>, p: &Matrix<T>, domains: &[Domain]) -> ChannelScores {
    assert_eq!(p.rows, domains.len(), "pooled rows and domain labels must align");
    assert_eq!(p.cols, disc.width(), "discriminator width");
    if p.rows == 0 {
        return ChannelScores {
            values: vec![0.0; p.cols],
        };
    }
    let (logits, cache) = disc.forward_cached(p);
    let dlogit: Vec<T> = logits
        .iter()
        .zip(domains)
        .map(|(&z, &d)| domain_log_likelihood(z, d).1)
        .collect();
    let dp = disc.backward(&cache, &dlogit, None);
    let n = p.rows as f64;
    let values = (0..p.cols)
        .map(|c| (0..p.rows).map(|i| (p.get(i, c) * dp.get(i, c)).as_f64()).sum::<f64>() / n)
        .collect();
    ChannelScores { values }
}

/// Binary per-channel kernel; `false` marks a suppressed channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMask {
    pub bits: Vec<bool>,
    /// Suppression budget the mask was built with.
    pub budget: usize,
}

impl ChannelMask {
    pub fn ones(len: usize) -> Self {
        Self {
            bits: vec![true; len],
            budget: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn suppressed(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| !b)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn zeros_count(&self) -> usize {
        self.bits.iter().filter(|&&b| !b).count()
    }
}

/// Channel order by a key, ties broken toward the lower index.
fn ranked(values: &[f64], key: impl Fn(f64) -> f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| key(values[a]).total_cmp(&key(values[b])).then(a.cmp(&b)));
    idx
}

/// Suppresses the (up to) `k` highest-scoring channels whose score is positive.
pub fn invariant_mask(scores: &ChannelScores, k: usize) -> ChannelMask {
    let mut bits = vec![true; scores.len()];
    for &c in ranked(&scores.values, |v| -v).iter().take(k) {
        if scores.values[c] > 0.0 {
            bits[c] = false;
        }
    }
    ChannelMask { bits, budget: k }
}

/// Suppresses the `min(k, C)` channels with the smallest absolute score.
pub fn specific_mask(scores: &ChannelScores, k: usize) -> ChannelMask {
    let mut bits = vec![true; scores.len()];
    for &c in ranked(&scores.values, f64::abs).iter().take(k) {
        bits[c] = false;
    }
    ChannelMask { bits, budget: k }
}

/// Depth-wise 1×1 product of each channel with its mask bit.
pub fn apply_mask<T: Real>(f: &FeatureMap<T>, mask: &ChannelMask) -> Result<FeatureMap<T>> {
    if mask.len() != f.channels {
        return Err(Error::arg(format!(
            "mask length {} does not match {} channels",
            mask.len(),
            f.channels
        )));
    }
    let mut out = f.clone();
    for (c, &keep) in mask.bits.iter().enumerate() {
        if !keep {
            out.channel_mut(c).iter_mut().for_each(|v| *v = T::zero());
        }
    }
    Ok(out)
}

pub(crate) fn mask_rows<T: Real>(p: &Matrix<T>, mask: &ChannelMask) -> Matrix<T> {
    let mut out = p.clone();
    for r in 0..out.rows {
        out.row_mut(r)
            .iter_mut()
            .zip(&mask.bits)
            .for_each(|(v, &keep)| {
                if !keep {
                    *v = T::zero()
                }
            });
    }
    out
}

// ---------------------------------------------------------------------------
// Classification head
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead<T> {
    pub fc: Linear<T>,
}

impl<T: Real> ClassifierHead<T> {
    pub fn new(width: usize, num_classes: usize, rng: &mut Rng) -> Self {
        Self {
            fc: Linear::new(width, num_classes, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fc: self.fc.zeros_like(),
        }
    }

    /// Class logits (`N × num_classes`) from a masked invariant map.
    pub fn classify(&self, f_di_masked: &FeatureMap<T>) -> Matrix<T> {
        self.fc.forward(&gap(f_di_masked))
    }
}

impl<T: Real> Module<T> for ClassifierHead<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        self.fc.tensors(prefix, out);
    }
    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<(TensorKind, &'a mut Vec<T>)>) {
        self.fc.tensors_mut(out);
    }
}
