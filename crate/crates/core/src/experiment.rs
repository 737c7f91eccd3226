//! Scene preparation, ablation variants and the slope/offset sweep.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{evaluate, MaskMode};
use crate::hsidata::{
    extract_patches, synth_domain_pair, zscore_normalize, Domain, HsiCube, PatchSet, SceneSpec, SpectralShift,
};
use crate::trainer::{train, MaskPolicy, TrainConfig};

/// Compact description of a synthetic pair, expanded by [`SynthSpec::scene_spec`].
/// The defaults describe the reference desk-scale pair (3 classes, 32 bands,
/// roughly two thousand labeled pixels per domain).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    /// Amplitude of the class-specific spectral bumps.
    pub separation: f64,
    pub prototype_seed: u64,
    pub class_std: f64,
    pub noise: f64,
    /// Target gain on the first and last band (linear in between).
    pub gain_first: f64,
    pub gain_last: f64,
    /// Target offset added to every band.
    pub offset: f64,
    pub cells: usize,
    pub source_background: f64,
    pub target_background: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            bands: 32,
            height: 56,
            width: 56,
            separation: 0.3,
            prototype_seed: 0,
            class_std: 0.1,
            noise: 0.05,
            gain_first: 0.8,
            gain_last: 1.2,
            offset: 0.1,
            cells: 24,
            source_background: 0.2,
            target_background: 0.35,
        }
    }
}

impl SynthSpec {
    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let mut spec = SceneSpec::with_smooth_prototypes(
            self.num_classes,
            self.bands,
            self.height,
            self.width,
            self.separation,
            self.prototype_seed,
        );
        spec.class_stds = vec![vec![self.class_std; self.bands]; self.num_classes];
        spec.background_std = vec![self.class_std; self.bands];
        spec.noise = self.noise;
        spec.shift = SpectralShift::ramp(self.bands, self.gain_first, self.gain_last, self.offset);
        spec.geometry.cells = self.cells;
        spec.geometry.source_background = self.source_background;
        spec.geometry.target_background = self.target_background;
        spec.validate()?;
        Ok(spec)
    }
}

/// Normalizes each cube with its own statistics and extracts labeled patches.
pub fn prepare_pair(source: &HsiCube, target: &HsiCube, patch_size: usize) -> Result<(PatchSet, PatchSet)> {
    let src = extract_patches(&zscore_normalize(source), patch_size, Domain::Source)?;
    let tgt = extract_patches(&zscore_normalize(target), patch_size, Domain::Target)?;
    Ok((src, tgt))
}

/// Generates, normalizes and patches a synthetic pair.
pub fn synth_patch_pair(spec: &SceneSpec, seed: u64, patch_size: usize) -> Result<(PatchSet, PatchSet)> {
    let (s, t) = synth_domain_pair(spec, seed)?;
    prepare_pair(&s, &t, patch_size)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Classification and orthogonality only; no domain loss, no masks.
    SourceOnly,
    /// Adversarial alignment without channel suppression.
    Adversarial,
    /// Adversarial alignment with adaptive channel suppression.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::SourceOnly, Variant::Adversarial, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source_only",
            Variant::Adversarial => "adversarial",
            Variant::Full => "full",
        }
    }

    /// `base` with the loss weights and mask policy of this variant.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::SourceOnly => {
                cfg.weights.lambda2 = 0.0;
                cfg.mask_policy = MaskPolicy::Off;
            }
            Variant::Adversarial => cfg.mask_policy = MaskPolicy::Off,
            Variant::Full => cfg.mask_policy = MaskPolicy::Adaptive,
        }
        cfg
    }
}

/// Trains one model and returns its target overall accuracy.
pub fn target_accuracy(cfg: &TrainConfig, src: &PatchSet, tgt: &PatchSet, mode: MaskMode) -> Result<f64> {
    let model = train(cfg, src, tgt)?;
    Ok(evaluate(&model, tgt, mode)?.overall_accuracy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub slope: f64,
    pub offset: f64,
    pub mean_oa: f64,
    pub std_oa: f64,
    pub runs: usize,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Target OA over the `slope × offset` grid, averaged over `cfg.run_seeds()`.
pub fn sweep(
    cfg: &TrainConfig,
    slopes: &[f64],
    offsets: &[f64],
    src: &PatchSet,
    tgt: &PatchSet,
    mode: MaskMode,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(slopes.len() * offsets.len());
    for &slope in slopes {
        for &offset in offsets {
            let mut oas = Vec::new();
            for seed in cfg.run_seeds() {
                let mut run = cfg.clone();
                run.seed = seed;
                run.ssam.slope = slope;
                run.ssam.offset = offset;
                oas.push(target_accuracy(&run, src, tgt, mode)?);
            }
            let (mean_oa, std_oa) = mean_std(&oas);
            rows.push(SweepRow {
                slope,
                offset,
                mean_oa,
                std_oa,
                runs: oas.len(),
            });
        }
    }
    Ok(rows)
}
