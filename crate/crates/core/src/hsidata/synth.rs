//! Synthetic two-domain scenes with a controllable spectral shift.
//!
//! Both domains draw every pixel from the same class prototypes. The target
//! additionally passes each prototype draw through a per-band affine map before
//! sensor noise is added. Class regions are Voronoi cells around random sites;
//! cells not reserved for a class become unlabeled background with a
//! domain-specific probability, so the two scenes also differ in land-cover mix.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::HsiCube;
use crate::error::{Error, Result};
use crate::rng::{seeded, stream, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralShift {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
}

impl SpectralShift {
    pub fn identity(bands: usize) -> Self {
        Self {
            gain: vec![1.0; bands],
            offset: vec![0.0; bands],
        }
    }

    /// Gain varying linearly from `gain_first` to `gain_last` across bands with a
    /// constant offset.
    pub fn ramp(bands: usize, gain_first: f64, gain_last: f64, offset: f64) -> Self {
        let gain = (0..bands)
            .map(|b| {
                let t = if bands > 1 { b as f64 / (bands - 1) as f64 } else { 0.0 };
                gain_first + t * (gain_last - gain_first)
            })
            .collect();
        Self {
            gain,
            offset: vec![offset; bands],
        }
    }
}

/// Layout of the label map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Number of Voronoi sites; the first `num_classes` are reserved one per class.
    pub cells: usize,
    /// Probability that an unreserved source cell is unlabeled background.
    pub source_background: f64,
    /// Same, for the target scene.
    pub target_background: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub num_classes: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    /// `num_classes × bands` prototype means.
    pub class_means: Vec<Vec<f64>>,
    /// `num_classes × bands` within-class standard deviations.
    pub class_stds: Vec<Vec<f64>>,
    pub background_mean: Vec<f64>,
    pub background_std: Vec<f64>,
    pub shift: SpectralShift,
    /// Standard deviation of additive sensor noise.
    pub noise: f64,
    pub geometry: Geometry,
}

impl SceneSpec {
    /// Smooth random prototype spectra: a shared baseline plus three Gaussian
    /// bumps per class scaled by `separation`.
    pub fn with_smooth_prototypes(
        num_classes: usize,
        bands: usize,
        height: usize,
        width: usize,
        separation: f64,
        seed: u64,
    ) -> Self {
        let mut rng = seeded(seed, stream::PROTOTYPES);
        let width_b = (bands as f64 / 8.0).max(1.0);
        let spectrum = |rng: &mut Rng| -> Vec<f64> {
            let bumps: Vec<(f64, f64)> = (0..3)
                .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(0.0..bands as f64)))
                .collect();
            (0..bands)
                .map(|b| {
                    let x = b as f64;
                    let base = 1.0 + 0.3 * (std::f64::consts::PI * x / bands as f64).sin();
                    base + separation
                        * bumps
                            .iter()
                            .map(|&(a, c)| a * (-(x - c).powi(2) / (2.0 * width_b * width_b)).exp())
                            .sum::<f64>()
                })
                .collect()
        };
        let class_means = (0..num_classes).map(|_| spectrum(&mut rng)).collect();
        let background_mean = spectrum(&mut rng);
        Self {
            num_classes,
            bands,
            height,
            width,
            class_means,
            class_stds: vec![vec![0.1; bands]; num_classes],
            background_mean,
            background_std: vec![0.1; bands],
            shift: SpectralShift::identity(bands),
            noise: 0.05,
            geometry: Geometry {
                cells: 24,
                source_background: 0.3,
                target_background: 0.3,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.bands;
        let bad = |msg: &str| Err(Error::arg(format!("scene spec: {msg}")));
        if self.num_classes == 0 || c == 0 || self.height == 0 || self.width == 0 {
            return bad("dimensions and class count must be positive");
        }
        if self.num_classes > u16::MAX as usize {
            return bad("too many classes for a 16-bit label map");
        }
        if self.class_means.len() != self.num_classes || self.class_stds.len() != self.num_classes {
            return bad("one prototype per class required");
        }
        let all_rows = self
            .class_means
            .iter()
            .chain(&self.class_stds)
            .chain([&self.background_mean, &self.background_std, &self.shift.gain, &self.shift.offset]);
        for row in all_rows {
            if row.len() != c {
                return bad("every per-band vector must have `bands` entries");
            }
            if row.iter().any(|v| !v.is_finite()) {
                return bad("non-finite value");
            }
        }
        if self.shift.gain.iter().any(|&g| g <= 0.0) {
            return bad("gains must be positive");
        }
        if self.class_stds.iter().flatten().chain(&self.background_std).any(|&s| s < 0.0) {
            return bad("standard deviations must be non-negative");
        }
        if !(self.noise >= 0.0) {
            return bad("noise level must be non-negative");
        }
        let g = &self.geometry;
        if g.cells < self.num_classes || g.cells > self.height * self.width {
            return bad("cell count must lie between num_classes and H·W");
        }
        for f in [g.source_background, g.target_background] {
            if !(0.0..=1.0).contains(&f) {
                return bad("background probabilities must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

fn label_map(spec: &SceneSpec, background: f64, rng: &mut Rng) -> Vec<u16> {
    let (h, w) = (spec.height, spec.width);
    let mut sites: Vec<(usize, usize)> = Vec::with_capacity(spec.geometry.cells);
    while sites.len() < spec.geometry.cells {
        let site = (rng.random_range(0..h), rng.random_range(0..w));
        if !sites.contains(&site) {
            sites.push(site);
        }
    }
    let kinds: Vec<u16> = (0..sites.len())
        .map(|i| {
            if i < spec.num_classes {
                (i + 1) as u16
            } else if rng.random::<f64>() < background {
                0
            } else {
                rng.random_range(1..=spec.num_classes) as u16
            }
        })
        .collect();
    let mut labels = vec![0u16; h * w];
    for r in 0..h {
        for c in 0..w {
            // nearest site; ties go to the lower site index
            let (best, _) = sites.iter().enumerate().fold((0, usize::MAX), |acc, (i, &(sr, sc))| {
                let d = sr.abs_diff(r).pow(2) + sc.abs_diff(c).pow(2);
                if d < acc.1 {
                    (i, d)
                } else {
                    acc
                }
            });
            labels[r * w + c] = kinds[best];
        }
    }
    labels
}

fn render(spec: &SceneSpec, labels: Vec<u16>, shift: Option<&SpectralShift>, rng: &mut Rng) -> HsiCube {
    let (h, w, c) = (spec.height, spec.width, spec.bands);
    let n = h * w;
    let mut refl = vec![0f32; n * c];
    // draw order: pixel-major, band-minor; prototype draw then noise draw
    for (p, &label) in labels.iter().enumerate() {
        let (mean, std) = if label == 0 {
            (&spec.background_mean, &spec.background_std)
        } else {
            let k = label as usize - 1;
            (&spec.class_means[k], &spec.class_stds[k])
        };
        for b in 0..c {
            let z: f64 = rng.sample(StandardNormal);
            let mut v = mean[b] + std[b] * z;
            if let Some(s) = shift {
                v = s.gain[b] * v + s.offset[b];
            }
            let e: f64 = rng.sample(StandardNormal);
            v += spec.noise * e;
            refl[b * n + p] = v as f32;
        }
    }
    HsiCube {
        height: h,
        width: w,
        bands: c,
        reflectance: refl,
        labels,
        num_classes: spec.num_classes,
    }
}

/// Deterministic `(source, target)` scene pair for `seed`.
pub fn synth_domain_pair(spec: &SceneSpec, seed: u64) -> Result<(HsiCube, HsiCube)> {
    spec.validate()?;
    let src_labels = label_map(spec, spec.geometry.source_background, &mut seeded(seed, stream::SOURCE_GEOMETRY));
    let tgt_labels = label_map(spec, spec.geometry.target_background, &mut seeded(seed, stream::TARGET_GEOMETRY));
    let source = render(spec, src_labels, None, &mut seeded(seed, stream::SOURCE_PIXELS));
    let target = render(spec, tgt_labels, Some(&spec.shift), &mut seeded(seed, stream::TARGET_PIXELS));
    source.validate()?;
    target.validate()?;
    Ok((source, target))
}
