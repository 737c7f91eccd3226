//! Evaluation metrics, classification maps, the channel-variance diagnostic,
//! feature export and parameter counting.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::disentangle::{channel_scores, invariant_mask, ChannelMask};
use crate::error::{Error, Result};
use crate::hsidata::{extract_all_patches, Domain, HsiCube, PatchSet};
use crate::model::{argmax, Network, ParamCount};
use crate::ssam::per_channel_pooled_variance;
use crate::tensor::{Matrix, Real};
use crate::trainer::TrainedModel;

/// Which invariant mask is applied at evaluation time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Scores recomputed on the evaluated samples, budget from the final ratio.
    #[default]
    Recompute,
    /// The mask built from the last training epoch's averaged scores.
    Frozen,
}

impl FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recompute" => Ok(Self::Recompute),
            "frozen" => Ok(Self::Frozen),
            other => Err(Error::arg(format!("unknown mask mode '{other}' (expected recompute or frozen)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    /// Recall per class; `None` for classes absent from the evaluated set.
    pub per_class_acc: Vec<Option<f64>>,
    pub overall_accuracy: f64,
    pub kappa: f64,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let k = confusion.len();
        if confusion.iter().any(|r| r.len() != k) {
            return Err(Error::arg("confusion matrix must be square"));
        }
        let n: u64 = confusion.iter().flatten().sum();
        let per_class_acc = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let total: u64 = row.iter().sum();
                (total > 0).then(|| row[i] as f64 / total as f64)
            })
            .collect();
        if n == 0 {
            return Ok(Self {
                confusion,
                per_class_acc,
                overall_accuracy: 0.0,
                kappa: 0.0,
            });
        }
        let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let p_o = trace as f64 / n as f64;
        // kappa = (p_o - p_e) / (1 - p_e) scaled by n² so that only the final
        // division rounds
        let chance: u128 = (0..k)
            .map(|i| {
                let row: u64 = confusion[i].iter().sum();
                let col: u64 = confusion.iter().map(|r| r[i]).sum();
                row as u128 * col as u128
            })
            .sum();
        let n2 = n as u128 * n as u128;
        let kappa = if chance == n2 {
            // one class in both truth and prediction: chance agreement is 1
            if trace == n {
                1.0
            } else {
                0.0
            }
        } else {
            (trace as i128 * n as i128 - chance as i128) as f64 / (n2 - chance) as f64
        };
        Ok(Self {
            confusion,
            per_class_acc,
            overall_accuracy: p_o,
            kappa,
        })
    }

    /// Zero-based truth and prediction indices.
    pub fn from_predictions(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::arg("truth and predictions differ in length"));
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::arg(format!("class index out of range for {num_classes} classes")));
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }
}

fn check_compatible(model: &TrainedModel, set: &PatchSet) -> Result<()> {
    let net = &model.network;
    if set.num_classes != net.num_classes {
        return Err(Error::arg(format!(
            "model has {} classes, set has {}",
            net.num_classes, set.num_classes
        )));
    }
    if set.bands != net.bands {
        return Err(Error::arg(format!("model expects {} bands, set has {}", net.bands, set.bands)));
    }
    Ok(())
}

/// Invariant mask for a block of pooled features, all from `domains`.
pub fn eval_mask(model: &TrainedModel, pooled_di: &Matrix<f32>, domains: &[Domain], mode: MaskMode) -> ChannelMask {
    match mode {
        MaskMode::Frozen => model.frozen.invariant.clone(),
        MaskMode::Recompute => {
            let scores = channel_scores(&model.network.disc, pooled_di, domains);
            invariant_mask(&scores, model.final_k())
        }
    }
}

fn predict_rows(model: &TrainedModel, pooled_di: &Matrix<f32>, mask: &ChannelMask) -> Vec<usize> {
    let logits = model.network.logits(pooled_di, mask);
    (0..logits.rows).map(|r| argmax(logits.row(r))).collect()
}

/// Zero-based class predictions for every patch of a labeled set.
pub fn predict(model: &TrainedModel, set: &PatchSet, mode: MaskMode) -> Result<Vec<usize>> {
    check_compatible(model, set)?;
    let pooled = model.network.pooled(set)?;
    let domains = vec![set.domain; set.len()];
    let mask = eval_mask(model, &pooled.invariant, &domains, mode);
    Ok(predict_rows(model, &pooled.invariant, &mask))
}

pub fn evaluate(model: &TrainedModel, set: &PatchSet, mode: MaskMode) -> Result<MetricsReport> {
    let pred = predict(model, set, mode)?;
    let truth = set.gather_labels(&(0..set.len()).collect::<Vec<_>>());
    MetricsReport::from_predictions(&truth, &pred, set.num_classes)
}

/// Fixed map palette, indexed by zero-based class (wrapping after 16 classes).
pub const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

pub fn palette_color(class: usize) -> [u8; 3] {
    PALETTE[class % PALETTE.len()]
}

/// Zero-based predicted class per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<usize>,
}

impl ClassMap {
    pub fn get(&self, row: usize, col: usize) -> usize {
        self.classes[row * self.width + col]
    }

    /// Binary PPM (P6), `width × height`, one palette color per pixel.
    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for &c in &self.classes {
            bytes.extend_from_slice(&palette_color(c));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }
}

/// Classifies every pixel of a cube. In recompute mode the mask is scored on
/// the labeled pixels (all pixels if none are labeled) and applied everywhere.
pub fn predict_map(model: &TrainedModel, cube: &HsiCube, domain: Domain, mode: MaskMode) -> Result<ClassMap> {
    let all = extract_all_patches(cube, model.config.patch_size, domain)?;
    check_compatible(model, &all)?;
    let pooled = model.network.pooled(&all)?;
    let mut labeled: Vec<usize> = (0..all.len()).filter(|&i| all.class_labels[i] != 0).collect();
    if labeled.is_empty() {
        labeled = (0..all.len()).collect();
    }
    let width = pooled.invariant.cols;
    let mut rows = Vec::with_capacity(labeled.len() * width);
    for &i in &labeled {
        rows.extend_from_slice(pooled.invariant.row(i));
    }
    let scored = Matrix::from_vec(labeled.len(), width, rows);
    let mask = eval_mask(model, &scored, &vec![domain; labeled.len()], mode);
    Ok(ClassMap {
        height: cube.height,
        width: cube.width,
        classes: predict_rows(model, &pooled.invariant, &mask),
    })
}

pub fn classification_map(
    model: &TrainedModel,
    cube: &HsiCube,
    out: impl AsRef<Path>,
    domain: Domain,
    mode: MaskMode,
) -> Result<ClassMap> {
    let map = predict_map(model, cube, domain, mode)?;
    map.write_ppm(out)?;
    Ok(map)
}

/// Per-channel pooled inter-domain standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceReport {
    /// Invariant features `F_di` before masking.
    pub invariant: Vec<f64>,
    /// Invariant features after the evaluation mask.
    pub masked: Vec<f64>,
    /// Backbone features `F_b`.
    pub backbone: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl VarianceReport {
    pub fn mean_invariant(&self) -> f64 {
        mean(&self.invariant)
    }
    pub fn mean_masked(&self) -> f64 {
        mean(&self.masked)
    }
    pub fn mean_backbone(&self) -> f64 {
        mean(&self.backbone)
    }

    /// CSV with one row per channel and a final `mean` row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["channel", "invariant_std", "masked_invariant_std", "backbone_std"])?;
        for c in 0..self.invariant.len() {
            w.write_record([
                c.to_string(),
                self.invariant[c].to_string(),
                self.masked[c].to_string(),
                self.backbone[c].to_string(),
            ])?;
        }
        w.write_record([
            "mean".to_string(),
            self.mean_invariant().to_string(),
            self.mean_masked().to_string(),
            self.mean_backbone().to_string(),
        ])?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn pooled_std(src: &Matrix<f32>, tgt: &Matrix<f32>) -> Result<Vec<f64>> {
    Ok(per_channel_pooled_variance(src, tgt)?.into_iter().map(f64::sqrt).collect())
}

/// Square roots of the per-channel pooled variance of pooled features over
/// source and target together.
pub fn channel_variance_report(
    model: &TrainedModel,
    src: &PatchSet,
    tgt: &PatchSet,
    mode: MaskMode,
) -> Result<VarianceReport> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::arg("variance report needs non-empty source and target sets"));
    }
    let ps = model.network.pooled(src)?;
    let pt = model.network.pooled(tgt)?;
    let both = ps.invariant.vstack(&pt.invariant);
    let mut domains = vec![src.domain; src.len()];
    domains.extend(std::iter::repeat_n(tgt.domain, tgt.len()));
    let mask = eval_mask(model, &both, &domains, mode);
    let masked = |m: &Matrix<f32>| model.network.masked_pooled(m, &mask);
    Ok(VarianceReport {
        invariant: pooled_std(&ps.invariant, &pt.invariant)?,
        masked: pooled_std(&masked(&ps.invariant), &masked(&pt.invariant))?,
        backbone: pooled_std(&ps.backbone, &pt.backbone)?,
    })
}

/// CSV of pooled invariant features: `domain,class,f0..f{C_f-1}`.
pub fn export_features(model: &TrainedModel, set: &PatchSet, out: impl AsRef<Path>) -> Result<()> {
    if set.is_empty() {
        return Err(Error::arg("cannot export features of an empty set"));
    }
    let pooled = model.network.pooled(set)?;
    let path = out.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["domain".to_string(), "class".to_string()];
    header.extend((0..pooled.invariant.cols).map(|c| format!("f{c}")));
    w.write_record(&header)?;
    for i in 0..set.len() {
        let mut row = vec![set.domain.as_str().to_string(), set.class_labels[i].to_string()];
        row.extend(pooled.invariant.row(i).iter().map(f32::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn count_parameters<T: Real>(net: &Network<T>) -> ParamCount {
    net.param_breakdown()
}
