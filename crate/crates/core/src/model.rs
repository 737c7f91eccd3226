//! The full network: stem, reversible backbone, invariant encoder, shared
//! discriminator and classification head, with a hand-written training step.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Rfe, RfeCache, Stem, StemCache};
use crate::disentangle::{
    apply_mask, channel_scores, gap, gap_backward, invariant_mask, mask_rows, specific_mask, ChannelMask,
    ChannelScores, ClassifierHead, Discriminator, EncoderCache, InvariantEncoder,
};
use crate::error::{Error, Result};
use crate::hsidata::{Domain, PatchSet};
use crate::layers::{join, Mode, Module, NamedTensor, TensorKind};
use crate::objective::{cls_loss, domain_loss, ortho_loss, total_loss, LossWeights};
use crate::rng::{seeded, stream};
use crate::tensor::{FeatureMap, Matrix, Real};

/// Samples per forward pass when running inference over a whole set.
pub const INFERENCE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub bands: usize,
    pub num_classes: usize,
    pub stem: Stem<T>,
    pub rfe: Rfe<T>,
    pub die: InvariantEncoder<T>,
    pub disc: Discriminator<T>,
    pub head: ClassifierHead<T>,
}

/// Scalar parameter counts per group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub stem: usize,
    pub blocks: usize,
    pub die: usize,
    pub discriminator: usize,
    pub head: usize,
    pub total: usize,
}

/// One mixed batch: the first `labels.len()` rows are labeled source samples,
/// the remaining rows are target samples.
pub struct Batch<T> {
    pub x: FeatureMap<T>,
    pub labels: Vec<usize>,
    pub domains: Vec<Domain>,
}

impl<T: Real> Batch<T> {
    pub fn from_sets(src: &PatchSet, src_idx: &[usize], tgt: &PatchSet, tgt_idx: &[usize]) -> Self {
        let xs = src.gather::<T>(src_idx);
        let xt = tgt.gather::<T>(tgt_idx);
        let x = if tgt_idx.is_empty() {
            xs
        } else if src_idx.is_empty() {
            xt
        } else {
            concat_samples(&xs, &xt)
        };
        let mut domains = vec![Domain::Source; src_idx.len()];
        domains.extend(std::iter::repeat_n(Domain::Target, tgt_idx.len()));
        Self {
            x,
            labels: src.gather_labels(src_idx),
            domains,
        }
    }

    pub fn source_len(&self) -> usize {
        self.labels.len()
    }
}

/// Stacks two maps along the sample axis.
pub fn concat_samples<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> FeatureMap<T> {
    assert_eq!((a.channels, a.height, a.width), (b.channels, b.height, b.width));
    let mut out = FeatureMap::zeros(a.channels, a.batch + b.batch, a.height, a.width);
    for c in 0..a.channels {
        let dst = out.channel_mut(c);
        let (x, y) = dst.split_at_mut(a.channel(c).len());
        x.copy_from_slice(a.channel(c));
        y.copy_from_slice(b.channel(c));
    }
    out
}

/// Options for one forward/backward pass.
#[derive(Clone, Debug)]
pub struct StepOptions {
    /// Suppression budget for both masks.
    pub k: usize,
    pub weights: LossWeights,
    /// Sign-reverse the domain gradient entering the invariant features.
    pub reversal: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub ortho: f64,
    pub dom: f64,
    pub total: f64,
}

/// Everything a training step produces.
pub struct Step<T> {
    pub losses: LossParts,
    pub grad: Network<T>,
    pub scores_di: ChannelScores,
    pub scores_ds: ChannelScores,
    pub mask_di: ChannelMask,
    pub mask_ds: ChannelMask,
    /// Unmasked pooled invariant features of every row.
    pub pooled_di: Matrix<T>,
    caches: BnCaches<T>,
}

struct BnCaches<T> {
    rfe: RfeCache<T>,
    die: EncoderCache<T>,
}

/// Pooled features of a whole set, computed in evaluation mode.
pub struct Pooled<T> {
    pub backbone: Matrix<T>,
    pub invariant: Matrix<T>,
}

impl<T: Real> Network<T> {
    pub fn new(bands: usize, num_classes: usize, backbone: &BackboneConfig, disc_hidden: usize, seed: u64) -> Result<Self> {
        backbone.validate()?;
        if bands == 0 || num_classes == 0 {
            return Err(Error::arg("bands and num_classes must be positive"));
        }
        let mut rng = seeded(seed, stream::INIT);
        let width = backbone.stem_out_channels;
        Ok(Self {
            bands,
            num_classes,
            stem: Stem::new(bands, width, &mut rng),
            rfe: Rfe::new(backbone, &mut rng),
            die: InvariantEncoder::new(width, &mut rng),
            disc: Discriminator::new(width, disc_hidden, &mut rng),
            head: ClassifierHead::new(width, num_classes, &mut rng),
        })
    }

    pub fn width(&self) -> usize {
        self.disc.width()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            bands: self.bands,
            num_classes: self.num_classes,
            stem: self.stem.zeros_like(),
            rfe: self.rfe.zeros_like(),
            die: self.die.zeros_like(),
            disc: self.disc.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn param_breakdown(&self) -> ParamCount {
        let stem = self.stem.param_count();
        let blocks = self.rfe.param_count();
        let die = self.die.param_count();
        let discriminator = self.disc.param_count();
        let head = self.head.param_count();
        ParamCount {
            stem,
            blocks,
            die,
            discriminator,
            head,
            total: stem + blocks + die + discriminator + head,
        }
    }

    /// Training-mode forward and backward over one mixed batch. The network is
    /// not modified; call [`Network::commit`] to fold the batch statistics into
    /// the running normalization buffers.
    pub fn step(&self, batch: &Batch<T>, opts: &StepOptions) -> Result<Step<T>> {
        let n = batch.x.batch;
        let ns = batch.source_len();
        if batch.domains.len() != n || ns > n {
            return Err(Error::arg("batch labels do not match its samples"));
        }
        if batch.x.channels != self.bands {
            return Err(Error::arg(format!(
                "model expects {} bands, batch has {}",
                self.bands, batch.x.channels
            )));
        }
        let (h, w) = (batch.x.height, batch.x.width);
        let (x0, stem_cache): (_, StemCache<T>) = self.stem.forward(&batch.x);
        let (fb, rfe_cache) = self.rfe.forward(&x0, Mode::Train)?;
        let (fdi, die_cache) = self.die.forward(&fb, Mode::Train);
        let fds = fb.sub(&fdi);
        let p_di = gap(&fdi);
        let p_ds = gap(&fds);

        let scores_di = channel_scores(&self.disc, &p_di, &batch.domains);
        let scores_ds = channel_scores(&self.disc, &p_ds, &batch.domains);
        let mask_di = invariant_mask(&scores_di, opts.k);
        let mask_ds = specific_mask(&scores_ds, opts.k);
        let fdi_m = apply_mask(&fdi, &mask_di)?;
        let fds_m = apply_mask(&fds, &mask_ds)?;

        let mut grad = self.zeros_like();
        let lambda1 = T::of(opts.weights.lambda1);
        let lambda2 = T::of(opts.weights.lambda2);

        // classification on the masked invariant features of the source rows
        let p_cls = mask_rows(&p_di, &mask_di).rows_range(0..ns);
        let logits = self.head.fc.forward(&p_cls);
        let (cls, dlogits) = cls_loss(&logits, &batch.labels)?;
        let dp_cls = self.head.fc.backward(&p_cls, &dlogits, Some(&mut grad.head.fc));

        let ortho = ortho_loss(&fdi_m, &fds_m)?;
        let dom = domain_loss(&self.disc, &p_di, &p_ds, &batch.domains, opts.reversal)?;
        let total = total_loss(cls.as_f64(), ortho.value.as_f64(), dom.value.as_f64(), &opts.weights)?;

        for (g, d) in grad.disc.layers.iter_mut().zip(&dom.disc_grad.layers) {
            g.weight.iter_mut().zip(&d.weight).for_each(|(a, &b)| *a += lambda2 * b);
            g.bias.iter_mut().zip(&d.bias).for_each(|(a, &b)| *a += lambda2 * b);
        }

        let mut dp_di = dom.d_p_di;
        dp_di.data.iter_mut().for_each(|v| *v = *v * lambda2);
        let dp_cls = mask_rows(&dp_cls, &mask_di);
        for r in 0..ns {
            dp_di.row_mut(r).iter_mut().zip(dp_cls.row(r)).for_each(|(a, &b)| *a += b);
        }
        let mut dp_ds = dom.d_p_ds;
        dp_ds.data.iter_mut().for_each(|v| *v = *v * lambda2);

        let mut d_fdi = gap_backward(&dp_di, h, w);
        let d_ortho_di = apply_mask(&ortho.d_di, &mask_di)?;
        d_fdi.data.iter_mut().zip(&d_ortho_di.data).for_each(|(a, &b)| *a += lambda1 * b);
        let mut d_fds = gap_backward(&dp_ds, h, w);
        let d_ortho_ds = apply_mask(&ortho.d_ds, &mask_ds)?;
        d_fds.data.iter_mut().zip(&d_ortho_ds.data).for_each(|(a, &b)| *a += lambda1 * b);

        // F_ds = F_b - F_di
        let d_fdi = d_fdi.sub(&d_fds);
        let mut d_fb = self.die.backward(&die_cache, &d_fdi, &mut grad.die);
        d_fb.add_assign(&d_fds);
        let d_x0 = self.rfe.backward(&rfe_cache, &d_fb, &mut grad.rfe);
        self.stem.backward(&stem_cache, &d_x0, &mut grad.stem);

        Ok(Step {
            losses: LossParts {
                cls: cls.as_f64(),
                ortho: ortho.value.as_f64(),
                dom: dom.value.as_f64(),
                total,
            },
            grad,
            scores_di,
            scores_ds,
            mask_di,
            mask_ds,
            pooled_di: p_di,
            caches: BnCaches {
                rfe: rfe_cache,
                die: die_cache,
            },
        })
    }

    /// Updates running normalization statistics from a completed step.
    pub fn commit(&mut self, step: &Step<T>) {
        self.rfe.commit(&step.caches.rfe);
        self.die.commit(&step.caches.die);
    }

    /// `(F_b, F_di)` in evaluation mode.
    pub fn features(&self, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
        if x.channels != self.bands {
            return Err(Error::arg(format!("model expects {} bands, input has {}", self.bands, x.channels)));
        }
        let fb = self.rfe.infer(&self.stem.lift(x), Mode::Eval)?;
        let fdi = self.die.infer(&fb, Mode::Eval);
        Ok((fb, fdi))
    }

    /// Pooled backbone and invariant features for every patch of a set.
    pub fn pooled(&self, set: &PatchSet) -> Result<Pooled<T>> {
        let width = self.width();
        let mut backbone = Vec::with_capacity(set.len() * width);
        let mut invariant = Vec::with_capacity(set.len() * width);
        let all: Vec<usize> = (0..set.len()).collect();
        for chunk in all.chunks(INFERENCE_CHUNK) {
            let (fb, fdi) = self.features(&set.gather::<T>(chunk))?;
            backbone.extend(gap(&fb).data);
            invariant.extend(gap(&fdi).data);
        }
        Ok(Pooled {
            backbone: Matrix::from_vec(set.len(), width, backbone),
            invariant: Matrix::from_vec(set.len(), width, invariant),
        })
    }

    /// Pooled invariant features with masked channels zeroed; equals the pooled
    /// masked map.
    pub fn masked_pooled(&self, pooled_di: &Matrix<T>, mask: &ChannelMask) -> Matrix<T> {
        mask_rows(pooled_di, mask)
    }

    /// Class logits from pooled invariant features under a mask.
    pub fn logits(&self, pooled_di: &Matrix<T>, mask: &ChannelMask) -> Matrix<T> {
        self.head.fc.forward(&mask_rows(pooled_di, mask))
    }
}

/// Index of the largest entry, first one on ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl<T: Real> Module<T> for Network<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        self.stem.tensors(&join(prefix, "stem"), out);
        self.rfe.tensors(&join(prefix, "rfe"), out);
        self.die.tensors(&join(prefix, "die"), out);
        self.disc.tensors(&join(prefix, "disc"), out);
        self.head.tensors(&join(prefix, "head"), out);
    }
    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<(TensorKind, &'a mut Vec<T>)>) {
        self.stem.tensors_mut(out);
        self.rfe.tensors_mut(out);
        self.die.tensors_mut(out);
        self.disc.tensors_mut(out);
        self.head.tensors_mut(out);
    }
}

/// Mutable views of the trainable parameters, in module order.
pub fn params_mut<T: Real>(net: &mut Network<T>) -> Vec<&mut Vec<T>> {
    let mut all = Vec::new();
    net.tensors_mut(&mut all);
    all.into_iter()
        .filter(|(k, _)| *k == TensorKind::Param)
        .map(|(_, v)| v)
        .collect()
}
