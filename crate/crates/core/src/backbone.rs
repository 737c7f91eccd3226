//! Reversible feature extractor: a pointwise channel-lifting stem followed by
//! additive coupling blocks that can be inverted exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    join, leaky_backward, leaky_map, BatchNorm, BnCache, Conv2d, ConvCache, Mode, Module, NamedTensor, TensorKind,
};
use crate::rng::Rng;
use crate::tensor::{FeatureMap, Real};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Feature channels after the stem (C_f); must be even.
    pub stem_out_channels: usize,
    /// Number of reversible blocks.
    pub num_blocks: usize,
    /// Hidden width inside each residual function.
    pub residual_hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_out_channels: 64,
            num_blocks: 4,
            residual_hidden: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_out_channels == 0 || self.stem_out_channels % 2 != 0 {
            return Err(Error::arg(format!(
                "stem_out_channels must be even and positive, got {}",
                self.stem_out_channels
            )));
        }
        if self.num_blocks == 0 {
            return Err(Error::arg("num_blocks must be at least 1"));
        }
        if self.residual_hidden == 0 {
            return Err(Error::arg("residual_hidden must be positive"));
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.stem_out_channels / 2
    }
}

// ---------------------------------------------------------------------------
// Stem
// ---------------------------------------------------------------------------

/// 1×1 convolution mapping the spectral bands to C_f feature channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Stem<T> {
    pub conv: Conv2d<T>,
}

pub struct StemCache<T>(ConvCache<T>);

impl<T: Real> Stem<T> {
    pub fn new(bands: usize, out_channels: usize, rng: &mut Rng) -> Self {
        Self {
            conv: Conv2d::new(bands, out_channels, 1, true, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv: self.conv.zeros_like(),
        }
    }

    pub fn lift(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        self.conv.infer(x)
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, StemCache<T>) {
        let (y, c) = self.conv.forward(x);
        (y, StemCache(c))
    }

    pub fn backward(&self, cache: &StemCache<T>, dy: &FeatureMap<T>, grad: &mut Self) {
        // the input patches are not trainable, so the input gradient is dropped
        let _ = self.conv.backward(&cache.0, dy, &mut grad.conv);
    }
}

impl<T: Real> Module<T> for Stem<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        self.conv.tensors(prefix, out);
    }
    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<(TensorKind, &'a mut Vec<T>)>) {
        self.conv.tensors_mut(out);
    }
}

// ---------------------------------------------------------------------------
// Residual function: conv3×3 → BN → leaky → conv3×3
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualFn<T> {
    pub conv1: Conv2d<T>,
    pub norm: BatchNorm<T>,
    pub conv2: Conv2d<T>,
}

pub struct ResidualCache<T> {
    c1: ConvCache<T>,
    bn: BnCache<T>,
    act: FeatureMap<T>,
    c2: ConvCache<T>,
}

impl<T: Real> ResidualFn<T> {
    pub fn new(channels: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            conv1: Conv2d::new(channels, hidden, 3, false, rng),
            norm: BatchNorm::new(hidden),
            conv2: Conv2d::new(hidden, channels, 3, true, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            norm: self.norm.zeros_like(),
            conv2: self.conv2.zeros_like(),
        }
    }

    /// Makes the function identically zero (output conv weights and bias cleared).
    pub fn zero_output(&mut self) {
        self.conv2.weight.iter_mut().for_each(|v| *v = T::zero());
        if let Some(b) = self.conv2.bias.as_mut() {
            b.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>, mode: Mode) -> (FeatureMap<T>, ResidualCache<T>) {
        let (h, c1) = self.conv1.forward(x);
        let (n, bn) = self.norm.forward(&h, mode);
        let act = leaky_map(&n);
        let (y, c2) = self.conv2.forward(&act);
        (y, ResidualCache { c1, bn, act, c2 })
    }

    pub fn infer(&self, x: &FeatureMap<T>, mode: Mode) -> FeatureMap<T> {
        let h = self.conv1.infer(x);
        let (n, _) = self.norm.forward(&h, mode);
        self.conv2.infer(&leaky_map(&n))
    }

    pub fn backward(&self, cache: &ResidualCache<T>, dy: &FeatureMap<T>, grad: &mut Self) -> FeatureMap<T> {
        let d_act = self.conv2.backward(&cache.c2, dy, &mut grad.conv2);
        let d_norm = FeatureMap::from_vec(
            d_act.channels,
            d_act.batch,
            d_act.height,
            d_act.width,
            leaky_backward(&cache.act.data, &d_act.data),
        );
        let d_h = self.norm.backward(&cache.bn, &d_norm, &mut grad.norm);
        self.conv1.backward(&cache.c1, &d_h, &mut grad.conv1)
    }

    pub fn commit(&mut self, cache: &ResidualCache<T>) {
        self.norm.commit(&cache.bn);
    }
}

impl<T: Real> Module<T> for ResidualFn<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        self.conv1.tensors(&join(prefix, "conv1"), out);
        self.norm.tensors(&join(prefix, "norm"), out);
        self.conv2.tensors(&join(prefix, "conv2"), out);
    }
    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<(TensorKind, &'a mut Vec<T>)>) {
        self.conv1.tensors_mut(out);
        self.norm.tensors_mut(out);
        self.conv2.tensors_mut(out);
    }
}

// ---------------------------------------------------------------------------
// Additive coupling
// ---------------------------------------------------------------------------

/// One coupling step: `a' = a + f(b)`, then `b' = b + g(a')`.
pub fn coupling_forward<T: Real>(
    a: &FeatureMap<T>,
    b: &FeatureMap<T>,
    f: impl Fn(&FeatureMap<T>) -> FeatureMap<T>,
    g: impl Fn(&FeatureMap<T>) -> FeatureMap<T>,
) -> (FeatureMap<T>, FeatureMap<T>) {
    let a_next = a.add(&f(b));
    let b_next = b.add(&g(&a_next));
    (a_next, b_next)
}

/// Inverse coupling step: `b = b' - g(a')`, then `a = a' - f(b)`.
pub fn coupling_inverse<T: Real>(
    a_next: &FeatureMap<T>,
    b_next: &FeatureMap<T>,
    f: impl Fn(&FeatureMap<T>) -> FeatureMap<T>,
    g: impl Fn(&FeatureMap<T>) -> FeatureMap<T>,
) -> (FeatureMap<T>, FeatureMap<T>) {
    let b = b_next.sub(&g(a_next));
    let a = a_next.sub(&f(&b));
    (a, b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReversibleBlock<T> {
    pub f: ResidualFn<T>,
    pub g: ResidualFn<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rfe<T> {
    pub blocks: Vec<ReversibleBlock<T>>,
}

pub struct RfeCache<T> {
    blocks: Vec<(ResidualCache<T>, ResidualCache<T>)>,
}

fn split_even<T: Real>(x: &FeatureMap<T>) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    if x.channels % 2 != 0 {
        return Err(Error::arg(format!(
            "reversible blocks need an even channel count, got {}",
            x.channels
        )));
    }
    Ok(x.split_channels(x.channels / 2))
}

impl<T: Real> Rfe<T> {
    pub fn new(cfg: &BackboneConfig, rng: &mut Rng) -> Self {
        let blocks = (0..cfg.num_blocks)
            .map(|_| ReversibleBlock {
                f: ResidualFn::new(cfg.half(), cfg.residual_hidden, rng),
                g: ResidualFn::new(cfg.half(), cfg.residual_hidden, rng),
            })
            .collect();
        Self { blocks }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|b| ReversibleBlock {
                    f: b.f.zeros_like(),
                    g: b.g.zeros_like(),
                })
                .collect(),
        }
    }

    /// Forward pass keeping the activations needed for backpropagation.
    pub fn forward(&self, x: &FeatureMap<T>, mode: Mode) -> Result<(FeatureMap<T>, RfeCache<T>)> {
        let (mut a, mut b) = split_even(x)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (fy, fc) = block.f.forward(&b, mode);
            a.add_assign(&fy);
            let (gy, gc) = block.g.forward(&a, mode);
            b.add_assign(&gy);
            caches.push((fc, gc));
        }
        Ok((a.concat_channels(&b), RfeCache { blocks: caches }))
    }

    /// Forward pass without caches.
    pub fn infer(&self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        let (mut a, mut b) = split_even(x)?;
        for block in &self.blocks {
            (a, b) = coupling_forward(&a, &b, |v| block.f.infer(v, mode), |v| block.g.infer(v, mode));
        }
        Ok(a.concat_channels(&b))
    }

    /// Reconstructs the block input from the output. Exact (to rounding) when the
    /// normalization layers run on frozen statistics.
    pub fn inverse(&self, y: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        let (mut a, mut b) = split_even(y)?;
        for block in self.blocks.iter().rev() {
            (a, b) = coupling_inverse(&a, &b, |v| block.f.infer(v, mode), |v| block.g.infer(v, mode));
        }
        Ok(a.concat_channels(&b))
    }

    /// Backpropagates `dy` through all blocks in reverse order.
    pub fn backward(&self, cache: &RfeCache<T>, dy: &FeatureMap<T>, grad: &mut Self) -> FeatureMap<T> {
        let (mut da, mut db) = dy.split_channels(dy.channels / 2);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let (fc, gc) = &cache.blocks[i];
            let dg_in = block.g.backward(gc, &db, &mut grad.blocks[i].g);
            da.add_assign(&dg_in);
            let df_in = block.f.backward(fc, &da, &mut grad.blocks[i].f);
            db.add_assign(&df_in);
        }
        da.concat_channels(&db)
    }

    pub fn commit(&mut self, cache: &RfeCache<T>) {
        for (block, (fc, gc)) in self.blocks.iter_mut().zip(&cache.blocks) {
            block.f.commit(fc);
            block.g.commit(gc);
        }
    }
}

impl<T: Real> Module<T> for Rfe<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            b.f.tensors(&join(&p, "f"), out);
            b.g.tensors(&join(&p, "g"), out);
        }
    }
    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<(TensorKind, &'a mut Vec<T>)>) {
        for b in &mut self.blocks {
            b.f.tensors_mut(out);
            b.g.tensors_mut(out);
        }
    }
}
