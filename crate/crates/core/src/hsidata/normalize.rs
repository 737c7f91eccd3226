use super::HsiCube;

/// Bands whose population standard deviation falls below this map to zero.
pub const ZSCORE_EPS: f64 = 1e-8;

/// Per-band z-score over all pixels of the cube (labeled or not), population std.
pub fn zscore_normalize(cube: &HsiCube) -> HsiCube {
    let n = cube.height * cube.width;
    let mut out = cube.clone();
    for b in 0..cube.bands {
        let band = cube.band(b);
        let mean = band.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = band.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        let dst = &mut out.reflectance[b * n..(b + 1) * n];
        if std < ZSCORE_EPS {
            dst.iter_mut().for_each(|v| *v = 0.0);
        } else {
            dst.iter_mut()
                .zip(band)
                .for_each(|(d, &v)| *d = ((v as f64 - mean) / std) as f32);
        }
    }
    out
}
