use super::{Domain, HsiCube, PatchSet};
use crate::error::{Error, Result};

pub const DEFAULT_PATCH_SIZE: usize = 11;

/// Reflects an out-of-range index back into `0..len` without repeating the edge
/// sample (`-1 → 1`, `len → len-2`), repeating as often as needed.
pub fn mirror_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn check_patch_size(patch_size: usize) -> Result<()> {
    if patch_size == 0 || patch_size % 2 == 0 {
        return Err(Error::arg(format!("patch size must be odd, got {patch_size}")));
    }
    Ok(())
}

fn patch_at(cube: &HsiCube, row: usize, col: usize, patch_size: usize, out: &mut Vec<f32>) {
    let half = (patch_size / 2) as isize;
    for b in 0..cube.bands {
        let band = cube.band(b);
        for py in 0..patch_size as isize {
            let r = mirror_index(row as isize + py - half, cube.height);
            for px in 0..patch_size as isize {
                let c = mirror_index(col as isize + px - half, cube.width);
                out.push(band[r * cube.width + c]);
            }
        }
    }
}

/// One mirror-padded patch per labeled pixel, in row-major pixel order.
pub fn extract_patches(cube: &HsiCube, patch_size: usize, domain: Domain) -> Result<PatchSet> {
    check_patch_size(patch_size)?;
    let coords: Vec<(usize, usize)> = (0..cube.height)
        .flat_map(|r| (0..cube.width).map(move |c| (r, c)))
        .filter(|&(r, c)| cube.label(r, c) != 0)
        .collect();
    build(cube, patch_size, domain, coords, true)
}

/// Patches for every pixel (labeled or not). Unlabeled pixels carry class label 0.
pub fn extract_all_patches(cube: &HsiCube, patch_size: usize, domain: Domain) -> Result<PatchSet> {
    check_patch_size(patch_size)?;
    let coords: Vec<(usize, usize)> = (0..cube.height)
        .flat_map(|r| (0..cube.width).map(move |c| (r, c)))
        .collect();
    build(cube, patch_size, domain, coords, false)
}

fn build(
    cube: &HsiCube,
    patch_size: usize,
    domain: Domain,
    coords: Vec<(usize, usize)>,
    labeled_only: bool,
) -> Result<PatchSet> {
    let mut patches = Vec::with_capacity(coords.len() * cube.bands * patch_size * patch_size);
    let mut class_labels = Vec::with_capacity(coords.len());
    for &(r, c) in &coords {
        patch_at(cube, r, c, patch_size, &mut patches);
        let l = cube.label(r, c) as usize;
        debug_assert!(!labeled_only || l != 0);
        class_labels.push(l);
    }
    Ok(PatchSet {
        bands: cube.bands,
        patch_size,
        num_classes: cube.num_classes,
        patches,
        class_labels,
        coords,
        domain,
    })
}
