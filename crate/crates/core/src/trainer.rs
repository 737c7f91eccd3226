//! Deterministic training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::disentangle::{invariant_mask, specific_mask, ChannelMask, ChannelScores};
use crate::error::{Error, Result};
use crate::hsidata::{PairBatches, PatchSet, DEFAULT_PATCH_SIZE};
use crate::model::{argmax, params_mut, Batch, LossParts, Network, StepOptions};
use crate::objective::{cls_loss, LossWeights};
use crate::optim::{Adam, Plateau};
use crate::rng::{seeded, stream};
use crate::ssam::{mask_count, pooled_channel_variance, ShiftState, SsamConfig};
use crate::tensor::Matrix;

/// How the suppression budget is chosen each epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskPolicy {
    /// No suppression (K = 0).
    Off,
    /// Constant ratio of the feature channels.
    Fixed { ratio: f64 },
    /// Budget driven by the shift monitor; epoch 1 runs with K = 0.
    Adaptive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_factor: f64,
    pub patience: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub ssam: SsamConfig,
    pub backbone: BackboneConfig,
    pub num_runs: usize,
    /// Hidden width of the discriminator; 0 makes it a single affine map.
    pub disc_hidden: usize,
    pub patch_size: usize,
    pub mask_policy: MaskPolicy,
    /// Fraction of each source class held out to drive the plateau schedule.
    pub validation_fraction: f64,
    pub gradient_reversal: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            lr_factor: 0.1,
            patience: 2,
            seed: 0,
            weights: LossWeights::default(),
            ssam: SsamConfig::default(),
            backbone: BackboneConfig::default(),
            num_runs: 3,
            disc_hidden: 32,
            patch_size: DEFAULT_PATCH_SIZE,
            mask_policy: MaskPolicy::Adaptive,
            validation_fraction: 0.1,
            gradient_reversal: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be at least 1"));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::arg("lr_factor must lie in (0, 1)"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::arg("validation_fraction must lie in [0, 1)"));
        }
        if self.patch_size % 2 == 0 {
            return Err(Error::arg("patch_size must be odd"));
        }
        if let MaskPolicy::Fixed { ratio } = self.mask_policy {
            if !(0.0..=1.0).contains(&ratio) {
                return Err(Error::arg("fixed mask ratio must lie in [0, 1]"));
            }
        }
        self.weights.validate()?;
        self.ssam.validate()?;
        self.backbone.validate()
    }

    /// Seeds used for multi-run averaging.
    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.num_runs.max(1) as u64).map(|i| self.seed + i).collect()
    }
}

/// Per-epoch record. Epochs are numbered from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossParts,
    pub val_loss: f64,
    /// Absent when the source set is too small to hold out samples.
    pub val_acc: Option<f64>,
    pub mu: f64,
    pub r_prime: f64,
    pub r: f64,
    /// Budget used during this epoch.
    pub k: usize,
    /// Budget the monitor hands to the next epoch.
    pub k_next: usize,
    /// Channels suppressed by the epoch-averaged invariant scores.
    pub di_suppressed: Vec<usize>,
    pub ds_suppressed: Vec<usize>,
    /// Mean over batches of |u-zeros ∩ v-zeros| / |union| (0 for an empty union).
    pub mask_overlap: f64,
}

/// Masks built from the last epoch's averaged scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenMasks {
    pub invariant: ChannelMask,
    pub specific: ChannelMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub network: Network<f32>,
    pub shift: ShiftState,
    pub history: Vec<EpochRecord>,
    pub frozen: FrozenMasks,
}

impl TrainedModel {
    pub fn width(&self) -> usize {
        self.network.width()
    }

    /// Budget the model applies at evaluation time.
    pub fn final_k(&self) -> usize {
        policy_k(&self.config, &self.shift, self.width())
    }
}

fn policy_k(cfg: &TrainConfig, shift: &ShiftState, channels: usize) -> usize {
    match cfg.mask_policy {
        MaskPolicy::Off => 0,
        MaskPolicy::Fixed { ratio } => mask_count(ratio, channels, 1.0),
        MaskPolicy::Adaptive => shift.current_k(channels),
    }
}

/// Class-stratified split of `0..set.len()` into (train, validation). Each class
/// keeps at least one training sample.
pub fn stratified_split(set: &PatchSet, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seeded(seed, stream::SPLIT);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 1..=set.num_classes {
        let mut idx: Vec<usize> = (0..set.len()).filter(|&i| set.class_labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let take = ((idx.len() as f64 * fraction + 0.5).floor() as usize).min(idx.len() - 1);
        val.extend_from_slice(&idx[..take]);
        train.extend_from_slice(&idx[take..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn overlap(u: &ChannelMask, v: &ChannelMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in u.bits.iter().zip(&v.bits) {
        inter += usize::from(!a && !b);
        union += usize::from(!a || !b);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean cross-entropy and accuracy of `net` on a labeled set under a mask.
fn validate_on(net: &Network<f32>, set: &PatchSet, mask: &ChannelMask) -> Result<(f64, f64)> {
    let pooled = net.pooled(set)?;
    let logits = net.logits(&pooled.invariant, mask);
    let labels = set.gather_labels(&(0..set.len()).collect::<Vec<_>>());
    let (loss, _) = cls_loss(&logits.cast::<f64>(), &labels)?;
    let hits = (0..logits.rows).filter(|&r| argmax(logits.row(r)) == labels[r]).count();
    Ok((loss, hits as f64 / set.len() as f64))
}

pub fn train(cfg: &TrainConfig, src: &PatchSet, tgt: &PatchSet) -> Result<TrainedModel> {
    train_with(cfg, src, tgt, None)
}

/// Snapshot callback invoked after every epoch.
pub type EpochObserver<'a> = &'a mut dyn FnMut(&TrainedModel);

/// [`train`] with an optional observer that receives a snapshot of the model
/// after each epoch.
pub fn train_with(
    cfg: &TrainConfig,
    src: &PatchSet,
    tgt: &PatchSet,
    mut observer: Option<EpochObserver<'_>>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if src.is_empty() {
        return Err(Error::arg("source patch set is empty"));
    }
    if tgt.is_empty() {
        return Err(Error::arg("target patch set is empty"));
    }
    if src.bands != tgt.bands || src.patch_size != tgt.patch_size {
        return Err(Error::arg("source and target patches differ in bands or size"));
    }
    let (train_idx, val_idx) = stratified_split(src, cfg.validation_fraction, cfg.seed);
    let train_set = src.subset(&train_idx);
    let val_set = src.subset(&val_idx);

    let mut net = Network::<f32>::new(src.bands, src.num_classes, &cfg.backbone, cfg.disc_hidden, cfg.seed)?;
    let width = net.width();
    let sizes: Vec<usize> = params_mut(&mut net).iter().map(|v| v.len()).collect();
    let mut adam = Adam::<f32>::new(&sizes);
    let mut plateau = Plateau::new(cfg.learning_rate, cfg.lr_factor, cfg.patience)?;
    let batches = PairBatches::new(train_set.len(), tgt.len(), cfg.batch_size, cfg.seed)?;
    let mut shift = ShiftState::new(cfg.ssam.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut frozen = FrozenMasks {
        invariant: ChannelMask::ones(width),
        specific: ChannelMask::ones(width),
    };

    for e in 0..cfg.epochs {
        let k = policy_k(cfg, &shift, width);
        let lr = plateau.lr;
        let opts = StepOptions {
            k,
            weights: cfg.weights.clone(),
            reversal: cfg.gradient_reversal,
        };
        let mut sums = LossParts::default();
        let mut score_di = vec![0.0; width];
        let mut score_ds = vec![0.0; width];
        let mut overlap_sum = 0.0;
        let mut src_pool = Vec::new();
        let mut tgt_pool = Vec::new();
        let pairs = batches.epoch(e as u64);
        for pair in &pairs {
            let batch = Batch::<f32>::from_sets(&train_set, &pair.source, tgt, &pair.target);
            let ns = batch.source_len();
            let mut step = net.step(&batch, &opts)?;
            sums.cls += step.losses.cls;
            sums.ortho += step.losses.ortho;
            sums.dom += step.losses.dom;
            sums.total += step.losses.total;
            score_di.iter_mut().zip(&step.scores_di.values).for_each(|(a, b)| *a += b);
            score_ds.iter_mut().zip(&step.scores_ds.values).for_each(|(a, b)| *a += b);
            overlap_sum += overlap(&step.mask_di, &step.mask_ds);
            src_pool.extend_from_slice(&step.pooled_di.data[..ns * width]);
            tgt_pool.extend_from_slice(&step.pooled_di.data[ns * width..]);
            net.commit(&step);
            adam.step(params_mut(&mut net), params_mut(&mut step.grad), lr);
        }
        let nb = pairs.len() as f64;
        let losses = LossParts {
            cls: sums.cls / nb,
            ortho: sums.ortho / nb,
            dom: sums.dom / nb,
            total: sums.total / nb,
        };
        let avg = |s: Vec<f64>| ChannelScores {
            values: s.into_iter().map(|v| v / nb).collect(),
        };
        frozen = FrozenMasks {
            invariant: invariant_mask(&avg(score_di), k),
            specific: specific_mask(&avg(score_ds), k),
        };

        let src_pool = Matrix::from_vec(src_pool.len() / width, width, src_pool);
        let tgt_pool = Matrix::from_vec(tgt_pool.len() / width, width, tgt_pool);
        let ssam = shift.observe(pooled_channel_variance(&src_pool, &tgt_pool)?, width);

        let (val_loss, val_acc) = if val_set.is_empty() {
            (losses.cls, None)
        } else {
            let (l, a) = validate_on(&net, &val_set, &frozen.invariant)?;
            (l, Some(a))
        };
        plateau.observe(val_loss);
        history.push(EpochRecord {
            epoch: e + 1,
            lr,
            losses,
            val_loss,
            val_acc,
            mu: ssam.mu,
            r_prime: ssam.r_prime,
            r: ssam.r,
            k,
            k_next: policy_k(cfg, &shift, width),
            di_suppressed: frozen.invariant.suppressed(),
            ds_suppressed: frozen.specific.suppressed(),
            mask_overlap: overlap_sum / nb,
        });
        if let Some(obs) = observer.as_mut() {
            obs(&TrainedModel {
                config: cfg.clone(),
                network: net.clone(),
                shift: shift.clone(),
                history: history.clone(),
                frozen: frozen.clone(),
            });
        }
    }

    Ok(TrainedModel {
        config: cfg.clone(),
        network: net,
        shift,
        history,
        frozen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsidata::Domain;

    fn toy_set(n: usize, classes: usize, domain: Domain, offset: f32) -> PatchSet {
        let p = 3;
        let bands = 2;
        let mut patches = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % classes + 1;
            for b in 0..bands {
                for j in 0..p * p {
                    let v = if b == 0 { c as f32 } else { -(c as f32) } + offset + 0.01 * ((i * 7 + j) % 5) as f32;
                    patches.push(v);
                }
            }
            labels.push(c);
        }
        PatchSet {
            bands,
            patch_size: p,
            num_classes: classes,
            patches,
            class_labels: labels,
            coords: (0..n).map(|i| (i, 0)).collect(),
            domain,
        }
    }

    fn small_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            patch_size: 3,
            backbone: BackboneConfig {
                stem_out_channels: 8,
                num_blocks: 1,
                residual_hidden: 4,
            },
            disc_hidden: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let src = toy_set(20, 2, Domain::Source, 0.0);
        let tgt = toy_set(20, 2, Domain::Target, 0.5);
        let cfg = small_cfg(0);
        let model = train(&cfg, &src, &tgt).unwrap();
        assert!(model.history.is_empty());
        let init = Network::<f32>::new(2, 2, &cfg.backbone, cfg.disc_hidden, cfg.seed).unwrap();
        assert_eq!(model.network, init);
        assert_eq!(model.final_k(), 0);
    }

    #[test]
    fn empty_source_is_rejected() {
        let src = toy_set(0, 2, Domain::Source, 0.0);
        let tgt = toy_set(4, 2, Domain::Target, 0.0);
        assert!(matches!(train(&small_cfg(1), &src, &tgt), Err(Error::Argument(_))));
    }

    #[test]
    fn repeated_training_is_bit_identical() {
        let src = toy_set(24, 2, Domain::Source, 0.0);
        let tgt = toy_set(16, 2, Domain::Target, 0.3);
        let a = train(&small_cfg(3), &src, &tgt).unwrap();
        let b = train(&small_cfg(3), &src, &tgt).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.network, b.network);
        assert_eq!(a.history.len(), 3);
    }

    #[test]
    fn first_epoch_runs_without_suppression_and_budget_follows_monitor() {
        let src = toy_set(24, 2, Domain::Source, 0.0);
        let tgt = toy_set(16, 2, Domain::Target, 0.3);
        let mut cfg = small_cfg(4);
        cfg.ssam.offset = 0.0;
        let model = train(&cfg, &src, &tgt).unwrap();
        assert_eq!(model.history[0].k, 0);
        for w in model.history.windows(2) {
            assert_eq!(w[1].k, w[0].k_next);
            assert_eq!(w[0].k_next, mask_count(w[0].r, 8, cfg.ssam.r_max));
        }
        assert_eq!(model.final_k(), model.history.last().unwrap().k_next);
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let set = toy_set(50, 3, Domain::Source, 0.0);
        let (train_idx, val_idx) = stratified_split(&set, 0.1, 9);
        assert_eq!(train_idx.len() + val_idx.len(), 50);
        assert!(train_idx.iter().all(|i| !val_idx.contains(i)));
        for class in 1..=3 {
            let n = val_idx.iter().filter(|&&i| set.class_labels[i] == class).count();
            assert!((1..=2).contains(&n));
        }
        assert_eq!(stratified_split(&set, 0.1, 9), (train_idx, val_idx));
    }

    #[test]
    fn learning_reduces_training_loss() {
        let src = toy_set(48, 2, Domain::Source, 0.0);
        let tgt = toy_set(48, 2, Domain::Target, 0.0);
        let mut cfg = small_cfg(8);
        cfg.learning_rate = 1e-2;
        let model = train(&cfg, &src, &tgt).unwrap();
        let first = model.history[0].losses.cls;
        let last = model.history.last().unwrap().losses.cls;
        assert!(last < first, "cls loss {first} -> {last}");
    }

    #[test]
    fn config_json_accepts_partial_keys() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 5, "mask_policy": {"kind": "fixed", "ratio": 0.1}}"#).unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.mask_policy, MaskPolicy::Fixed { ratio: 0.1 });
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 5}"#).is_err());
    }
}
