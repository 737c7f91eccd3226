//! Network building blocks with hand-written backward passes.
//!
//! Every layer's `backward` takes a gradient accumulator of the layer's own type
//! (built with `zeros_like`) and adds its parameter gradients into it.

use rand::Rng as _;

use crate::rng::Rng;
use crate::tensor::{FeatureMap, Matrix, Real};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether normalization layers use batch statistics or their running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
}

/// A named view of one stored tensor.
pub struct NamedTensor<'a, T> {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

/// Uniform traversal over parameters and buffers. `tensors` and `tensors_mut`
/// must visit in the same order.
pub trait Module<T: Real> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>);
    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<(TensorKind, &'a mut Vec<T>)>);

    fn param_count(&self) -> usize {
        let mut v = Vec::new();
        self.tensors("", &mut v);
        v.iter()
            .filter(|t| t.kind == TensorKind::Param)
            .map(|t| t.data.len())
            .sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn uniform<T: Real>(rng: &mut Rng, len: usize, bound: f64) -> Vec<T> {
    (0..len)
        .map(|_| T::of(rng.random_range(-bound..=bound)))
        .collect()
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Square stride-1 convolution with "same" zero padding (`(k-1)/2`).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `out × in × k × k`, row-major.
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

pub struct ConvCache<T> {
    /// Unfolded input (`in·k·k × N·H·W`); for 1×1 kernels this is the input itself.
    col: Vec<T>,
    batch: usize,
    height: usize,
    width: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, bias: bool, rng: &mut Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = uniform(rng, out_channels * fan_in, bound);
        let bias = bias.then(|| uniform(rng, out_channels, bound));
        Self {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            weight: vec![T::zero(); self.weight.len()],
            bias: self.bias.as_ref().map(|b| vec![T::zero(); b.len()]),
        }
    }

    fn unfold(&self, x: &FeatureMap<T>) -> Vec<T> {
        let k = self.kernel;
        if k == 1 {
            return x.data.clone();
        }
        let pad = (k / 2) as isize;
        let (h, w) = (x.height as isize, x.width as isize);
        let m = x.spatial_len();
        let mut col = vec![T::zero(); self.in_channels * k * k * m];
        for ci in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst_row = &mut col[row * m..(row + 1) * m];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    // Valid output x-range for this horizontal shift.
                    let x0 = (-dx).max(0);
                    let x1 = (w - dx).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    for n in 0..x.batch {
                        let plane = x.plane(ci, n);
                        let dst_plane = &mut dst_row[n * x.plane_len()..(n + 1) * x.plane_len()];
                        for y in 0..h {
                            let sy = y + dy;
                            if sy < 0 || sy >= h {
                                continue;
                            }
                            let src = &plane[(sy * w + x0 + dx) as usize..(sy * w + x1 + dx) as usize];
                            dst_plane[(y * w + x0) as usize..(y * w + x1) as usize].copy_from_slice(src);
                        }
                    }
                }
            }
        }
        col
    }

    fn fold(&self, col: &[T], batch: usize, height: usize, width: usize) -> FeatureMap<T> {
        let k = self.kernel;
        if k == 1 {
            return FeatureMap::from_vec(self.in_channels, batch, height, width, col.to_vec());
        }
        let pad = (k / 2) as isize;
        let (h, w) = (height as isize, width as isize);
        let mut out = FeatureMap::zeros(self.in_channels, batch, height, width);
        let m = out.spatial_len();
        let plane_len = out.plane_len();
        for ci in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src_row = &col[row * m..(row + 1) * m];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    let x0 = (-dx).max(0);
                    let x1 = (w - dx).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    for n in 0..batch {
                        let src_plane = &src_row[n * plane_len..(n + 1) * plane_len];
                        let plane = out.plane_mut(ci, n);
                        for y in 0..h {
                            let sy = y + dy;
                            if sy < 0 || sy >= h {
                                continue;
                            }
                            let dst = &mut plane[(sy * w + x0 + dx) as usize..(sy * w + x1 + dx) as usize];
                            let src = &src_plane[(y * w + x0) as usize..(y * w + x1) as usize];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, ConvCache<T>) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let col = self.unfold(x);
        let y = self.apply(&col, x);
        (
            y,
            ConvCache {
                col,
                batch: x.batch,
                height: x.height,
                width: x.width,
            },
        )
    }

    /// Forward pass without keeping the unfolded input.
    pub fn infer(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let col = self.unfold(x);
        self.apply(&col, x)
    }

    fn apply(&self, col: &[T], x: &FeatureMap<T>) -> FeatureMap<T> {
        let m = x.spatial_len();
        let fan_in = self.in_channels * self.kernel * self.kernel;
        let mut y = FeatureMap::zeros(self.out_channels, x.batch, x.height, x.width);
        T::gemm(
            self.out_channels,
            fan_in,
            m,
            T::one(),
            &self.weight,
            false,
            col,
            false,
            T::zero(),
            &mut y.data,
        );
        if let Some(bias) = &self.bias {
            for (c, &b) in bias.iter().enumerate() {
                y.channel_mut(c).iter_mut().for_each(|v| *v += b);
            }
        }
        y
    }

    pub fn backward(&self, cache: &ConvCache<T>, dy: &FeatureMap<T>, grad: &mut Self) -> FeatureMap<T> {
        let m = dy.spatial_len();
        let fan_in = self.in_channels * self.kernel * self.kernel;
        T::gemm(
            self.out_channels,
            m,
            fan_in,
            T::one(),
            &dy.data,
            false,
            &cache.col,
            true,
            T::one(),
            &mut grad.weight,
        );
        if let Some(gb) = grad.bias.as_mut() {
            for (c, g) in gb.iter_mut().enumerate() {
                *g += dy.channel(c).iter().copied().sum::<T>();
            }
        }
        let mut dcol = vec![T::zero(); fan_in * m];
        T::gemm(
            fan_in,
            self.out_channels,
            m,
            T::one(),
            &self.weight,
            true,
            &dy.data,
            false,
            T::zero(),
            &mut dcol,
        );
        self.fold(&dcol, cache.batch, cache.height, cache.width)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        out.push(NamedTensor {
            name: join(prefix, "weight"),
            kind: TensorKind::Param,
            shape: vec![self.out_channels, self.in_channels, self.kernel, self.kernel],
            data: &self.weight,
        });
        if let Some(b) = &self.bias {
            out.push(NamedTensor {
                name: join(prefix, "bias"),
                kind: TensorKind::Param,
                shape: vec![self.out_channels],
                data: b,
            });
        }
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<(TensorKind, &'a mut Vec<T>)>) {
        out.push((TensorKind::Param, &mut self.weight));
        if let Some(b) = self.bias.as_mut() {
            out.push((TensorKind::Param, b));
        }
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

pub struct BnCache<T> {
    mode: Mode,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Batch mean and unbiased variance, applied to the running estimates by
    /// [`BatchNorm::commit`].
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let c = self.gamma.len();
        Self {
            gamma: vec![T::zero(); c],
            beta: vec![T::zero(); c],
            running_mean: vec![T::zero(); c],
            running_var: vec![T::zero(); c],
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>, mode: Mode) -> (FeatureMap<T>, BnCache<T>) {
        let c_count = x.channels;
        assert_eq!(c_count, self.gamma.len(), "batch-norm channels");
        let m = x.spatial_len();
        let eps = T::of(BN_EPS);
        let mut y = x.zeros_like();
        let mut xhat = vec![T::zero(); x.data.len()];
        let mut inv_std = vec![T::zero(); c_count];
        let mut batch_mean = vec![T::zero(); c_count];
        let mut batch_var = vec![T::zero(); c_count];
        for c in 0..c_count {
            let xs = x.channel(c);
            let (mean, var) = match mode {
                Mode::Train => {
                    let mf = T::of(m as f64);
                    let mean = xs.iter().copied().sum::<T>() / mf;
                    let ss = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                    batch_mean[c] = mean;
                    batch_var[c] = if m > 1 { ss / T::of((m - 1) as f64) } else { T::zero() };
                    (mean, ss / mf)
                }
                Mode::Eval => (self.running_mean[c], self.running_var[c]),
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[c] = is;
            let (g, b) = (self.gamma[c], self.beta[c]);
            let xh = &mut xhat[c * m..(c + 1) * m];
            for ((o, h), &v) in y.channel_mut(c).iter_mut().zip(xh.iter_mut()).zip(xs) {
                *h = (v - mean) * is;
                *o = g * *h + b;
            }
        }
        (
            y,
            BnCache {
                mode,
                xhat,
                inv_std,
                batch_mean,
                batch_var,
            },
        )
    }

    pub fn backward(&self, cache: &BnCache<T>, dy: &FeatureMap<T>, grad: &mut Self) -> FeatureMap<T> {
        let m = dy.spatial_len();
        let mf = T::of(m as f64);
        let mut dx = dy.zeros_like();
        for c in 0..dy.channels {
            let dys = dy.channel(c);
            let xh = &cache.xhat[c * m..(c + 1) * m];
            let sum_dy = dys.iter().copied().sum::<T>();
            let sum_dy_xh = dys.iter().zip(xh).map(|(&d, &h)| d * h).sum::<T>();
            grad.gamma[c] += sum_dy_xh;
            grad.beta[c] += sum_dy;
            let g = self.gamma[c];
            let is = cache.inv_std[c];
            let out = dx.channel_mut(c);
            match cache.mode {
                Mode::Train => {
                    let scale = g * is / mf;
                    for ((o, &d), &h) in out.iter_mut().zip(dys).zip(xh) {
                        *o = scale * (mf * d - sum_dy - h * sum_dy_xh);
                    }
                }
                Mode::Eval => {
                    for (o, &d) in out.iter_mut().zip(dys) {
                        *o = g * is * d;
                    }
                }
            }
        }
        dx
    }

    /// Folds a training batch's statistics into the running estimates.
    pub fn commit(&mut self, cache: &BnCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let mom = T::of(BN_MOMENTUM);
        for c in 0..self.gamma.len() {
            self.running_mean[c] = (T::one() - mom) * self.running_mean[c] + mom * cache.batch_mean[c];
            self.running_var[c] = (T::one() - mom) * self.running_var[c] + mom * cache.batch_var[c];
        }
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        let c = self.gamma.len();
        for (name, kind, data) in [
            ("gamma", TensorKind::Param, &self.gamma),
            ("beta", TensorKind::Param, &self.beta),
            ("running_mean", TensorKind::Buffer, &self.running_mean),
            ("running_var", TensorKind::Buffer, &self.running_var),
        ] {
            out.push(NamedTensor {
                name: join(prefix, name),
                kind,
                shape: vec![c],
                data,
            });
        }
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<(TensorKind, &'a mut Vec<T>)>) {
        out.push((TensorKind::Param, &mut self.gamma));
        out.push((TensorKind::Param, &mut self.beta));
        out.push((TensorKind::Buffer, &mut self.running_mean));
        out.push((TensorKind::Buffer, &mut self.running_var));
    }
}

// ---------------------------------------------------------------------------
// Leaky rectifier
// ---------------------------------------------------------------------------

pub fn leaky<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * T::of(LEAKY_SLOPE)
    }
}

pub fn leaky_map<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = leaky(*v));
    y
}

/// Backward through the leaky rectifier given its *output* (sign is preserved).
pub fn leaky_backward<T: Real>(out: &[T], dy: &[T]) -> Vec<T> {
    let slope = T::of(LEAKY_SLOPE);
    out.iter()
        .zip(dy)
        .map(|(&o, &d)| if o > T::zero() { d } else { d * slope })
        .collect()
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `out × in`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_features.max(1) as f64).sqrt();
        Self {
            in_features,
            out_features,
            weight: uniform(rng, in_features * out_features, bound),
            bias: uniform(rng, out_features, bound),
        }
    }

    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![T::zero(); in_features * out_features],
            bias: vec![T::zero(); out_features],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_features, self.out_features)
    }

    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        assert_eq!(x.cols, self.in_features, "linear input width");
        let mut y = Matrix::zeros(x.rows, self.out_features);
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(&self.bias);
        }
        T::gemm(
            x.rows,
            self.in_features,
            self.out_features,
            T::one(),
            &x.data,
            false,
            &self.weight,
            true,
            T::one(),
            &mut y.data,
        );
        y
    }

    /// Returns the input gradient; accumulates parameter gradients into `grad` when given.
    pub fn backward(&self, x: &Matrix<T>, dy: &Matrix<T>, grad: Option<&mut Self>) -> Matrix<T> {
        if let Some(grad) = grad {
            T::gemm(
                self.out_features,
                x.rows,
                self.in_features,
                T::one(),
                &dy.data,
                true,
                &x.data,
                false,
                T::one(),
                &mut grad.weight,
            );
            for r in 0..dy.rows {
                grad.bias.iter_mut().zip(dy.row(r)).for_each(|(g, &d)| *g += d);
            }
        }
        let mut dx = Matrix::zeros(x.rows, self.in_features);
        T::gemm(
            x.rows,
            self.out_features,
            self.in_features,
            T::one(),
            &dy.data,
            false,
            &self.weight,
            false,
            T::zero(),
            &mut dx.data,
        );
        dx
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        out.push(NamedTensor {
            name: join(prefix, "weight"),
            kind: TensorKind::Param,
            shape: vec![self.out_features, self.in_features],
            data: &self.weight,
        });
        out.push(NamedTensor {
            name: join(prefix, "bias"),
            kind: TensorKind::Param,
            shape: vec![self.out_features],
            data: &self.bias,
        });
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<(TensorKind, &'a mut Vec<T>)>) {
        out.push((TensorKind::Param, &mut self.weight));
        out.push((TensorKind::Param, &mut self.bias));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    /// Direct 4-loop convolution used as an oracle for the unfold/gemm path.
    fn naive_conv(conv: &Conv2d<f64>, x: &FeatureMap<f64>) -> FeatureMap<f64> {
        let k = conv.kernel;
        let pad = (k / 2) as isize;
        let mut y = FeatureMap::zeros(conv.out_channels, x.batch, x.height, x.width);
        for n in 0..x.batch {
            for co in 0..conv.out_channels {
                for yy in 0..x.height as isize {
                    for xx in 0..x.width as isize {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b[co]);
                        for ci in 0..conv.in_channels {
                            for ky in 0..k as isize {
                                for kx in 0..k as isize {
                                    let sy = yy + ky - pad;
                                    let sx = xx + kx - pad;
                                    if sy < 0 || sx < 0 || sy >= x.height as isize || sx >= x.width as isize {
                                        continue;
                                    }
                                    let wi = ((co * conv.in_channels + ci) * k + ky as usize) * k + kx as usize;
                                    acc += conv.weight[wi] * x.get(ci, n, sy as usize, sx as usize);
                                }
                            }
                        }
                        y.plane_mut(co, n)[yy as usize * x.width + xx as usize] = acc;
                    }
                }
            }
        }
        y
    }

    fn random_map(rng: &mut Rng, c: usize, n: usize, h: usize, w: usize) -> FeatureMap<f64> {
        FeatureMap::from_vec(c, n, h, w, (0..c * n * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let mut rng = seeded(3, 0);
        for &(k, cin, cout) in &[(3, 2, 3), (1, 4, 2), (3, 1, 1)] {
            let conv = Conv2d::<f64>::new(cin, cout, k, true, &mut rng);
            let x = random_map(&mut rng, cin, 2, 4, 5);
            let (y, _) = conv.forward(&x);
            assert!(y.max_abs_diff(&naive_conv(&conv, &x)) < 1e-12);
        }
    }

    /// Checks `backward` against central differences of `sum(y * probe)`.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = seeded(5, 0);
        let conv = Conv2d::<f64>::new(2, 3, 3, true, &mut rng);
        let x = random_map(&mut rng, 2, 2, 3, 4);
        let probe = random_map(&mut rng, 3, 2, 3, 4);
        let objective = |c: &Conv2d<f64>, x: &FeatureMap<f64>| {
            let (y, _) = c.forward(x);
            y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = conv.forward(&x);
        let mut grad = conv.zeros_like();
        let dx = conv.backward(&cache, &probe, &mut grad);
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-7, "dx[{i}]");
        }
        for i in 0..conv.weight.len() {
            let mut cp = conv.clone();
            cp.weight[i] += h;
            let mut cm = conv.clone();
            cm.weight[i] -= h;
            let fd = (objective(&cp, &x) - objective(&cm, &x)) / (2.0 * h);
            assert!((fd - grad.weight[i]).abs() < 1e-7, "dw[{i}]");
        }
    }

    #[test]
    fn batch_norm_backward_matches_finite_differences() {
        let mut rng = seeded(7, 0);
        let mut bn = BatchNorm::<f64>::new(2);
        bn.gamma = vec![1.3, -0.4];
        bn.beta = vec![0.1, 0.2];
        let x = random_map(&mut rng, 2, 3, 2, 2);
        let probe = random_map(&mut rng, 2, 3, 2, 2);
        let objective = |b: &BatchNorm<f64>, x: &FeatureMap<f64>| {
            let (y, _) = b.forward(x, Mode::Train);
            y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = bn.forward(&x, Mode::Train);
        let mut grad = bn.zeros_like();
        let dx = bn.backward(&cache, &probe, &mut grad);
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (objective(&bn, &xp) - objective(&bn, &xm)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6, "dx[{i}]: {fd} vs {}", dx.data[i]);
        }
        let mut bp = bn.clone();
        bp.gamma[1] += h;
        let mut bm = bn.clone();
        bm.gamma[1] -= h;
        let fd = (objective(&bp, &x) - objective(&bm, &x)) / (2.0 * h);
        assert!((fd - grad.gamma[1]).abs() < 1e-6);
    }

    #[test]
    fn batch_norm_running_statistics_follow_momentum() {
        let mut bn = BatchNorm::<f64>::new(1);
        let x = FeatureMap::from_vec(1, 4, 1, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let (y, cache) = bn.forward(&x, Mode::Train);
        let m: f64 = y.data.iter().sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12);
        bn.commit(&cache);
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = seeded(9, 0);
        let lin = Linear::<f64>::new(3, 2, &mut rng);
        let x = Matrix::from_vec(2, 3, vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.7]);
        let probe = Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 0.25]);
        let objective = |l: &Linear<f64>, x: &Matrix<f64>| {
            l.forward(x).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut grad = lin.zeros_like();
        let dx = lin.backward(&x, &probe, Some(&mut grad));
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (objective(&lin, &xp) - objective(&lin, &xm)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-8);
        }
        for i in 0..lin.weight.len() {
            let mut lp = lin.clone();
            lp.weight[i] += h;
            let mut lm = lin.clone();
            lm.weight[i] -= h;
            let fd = (objective(&lp, &x) - objective(&lm, &x)) / (2.0 * h);
            assert!((fd - grad.weight[i]).abs() < 1e-8);
        }
    }
}
