//! Hyperspectral scenes: ingestion, normalization, patches, synthetic pairs and batching.

mod batches;
mod io;
mod normalize;
mod patches;
mod synth;

pub use batches::{sample_pair_batches, BatchPair, PairBatches};
pub use io::{load_scene, resolve_scene_path, save_scene, SceneHeader};
pub use normalize::{zscore_normalize, ZSCORE_EPS};
pub use patches::{extract_patches, extract_all_patches, mirror_index, DEFAULT_PATCH_SIZE};
pub use synth::{synth_domain_pair, Geometry, SceneSpec, SpectralShift};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Real};

/// Which scene a sample comes from. The discriminator's positive class is `Source`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Binary domain label used by the discriminator (source = 1).
    pub fn label(self) -> f64 {
        match self {
            Domain::Source => 1.0,
            Domain::Target => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// A hyperspectral scene: band-sequential reflectance plus a per-pixel label map.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// `bands × height × width`, row-major within each band.
    pub reflectance: Vec<f32>,
    /// `height × width`; 0 marks an unlabeled pixel.
    pub labels: Vec<u16>,
    pub num_classes: usize,
}

impl HsiCube {
    pub fn new(
        height: usize,
        width: usize,
        bands: usize,
        reflectance: Vec<f32>,
        labels: Vec<u16>,
        num_classes: usize,
    ) -> Result<Self> {
        let cube = Self {
            height,
            width,
            bands,
            reflectance,
            labels,
            num_classes,
        };
        cube.validate()?;
        Ok(cube)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::Data(format!(
                "cube dimensions must be positive, got {}×{}×{}",
                self.height, self.width, self.bands
            )));
        }
        if self.reflectance.len() != self.height * self.width * self.bands {
            return Err(Error::Data("reflectance length does not match H·W·C".into()));
        }
        if self.labels.len() != self.height * self.width {
            return Err(Error::Data("label map length does not match H·W".into()));
        }
        if let Some(i) = self.reflectance.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite reflectance at flat index {i}")));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize > self.num_classes) {
            return Err(Error::Data(format!(
                "label {bad} exceeds num_classes {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn value(&self, row: usize, col: usize, band: usize) -> f32 {
        self.reflectance[(band * self.height + row) * self.width + col]
    }

    pub fn band(&self, band: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.reflectance[band * n..(band + 1) * n]
    }

    pub fn label(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

/// Patches centred on labeled pixels of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub bands: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    /// `N × bands × P × P`.
    pub patches: Vec<f32>,
    /// Class labels in `1..=num_classes`.
    pub class_labels: Vec<usize>,
    pub coords: Vec<(usize, usize)>,
    pub domain: Domain,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.class_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_labels.is_empty()
    }

    pub fn patch_len(&self) -> usize {
        self.bands * self.patch_size * self.patch_size
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let l = self.patch_len();
        &self.patches[i * l..(i + 1) * l]
    }

    /// Gathers the listed patches into a channel-major batch.
    pub fn gather<T: Real>(&self, indices: &[usize]) -> FeatureMap<T> {
        let p = self.patch_size;
        let mut nchw = Vec::with_capacity(indices.len() * self.patch_len());
        for &i in indices {
            nchw.extend(self.patch(i).iter().map(|&v| T::of(v as f64)));
        }
        FeatureMap::from_nchw(indices.len(), self.bands, p, p, &nchw)
    }

    /// Zero-based class indices for the listed samples.
    pub fn gather_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.class_labels[i] - 1).collect()
    }

    /// Subset with the listed samples, in order.
    pub fn subset(&self, indices: &[usize]) -> PatchSet {
        let mut patches = Vec::with_capacity(indices.len() * self.patch_len());
        for &i in indices {
            patches.extend_from_slice(self.patch(i));
        }
        PatchSet {
            bands: self.bands,
            patch_size: self.patch_size,
            num_classes: self.num_classes,
            patches,
            class_labels: indices.iter().map(|&i| self.class_labels[i]).collect(),
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            domain: self.domain,
        }
    }
}
