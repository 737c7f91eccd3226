//! Dense storage for feature maps and pooled matrices.
//!
//! Feature maps are stored channel-major (`C × N × H × W`): every channel is one
//! contiguous run covering all samples of the batch. Convolutions become a single
//! matrix product per layer, normalization statistics are contiguous rows, and the
//! two-way channel split of the reversible blocks is a split of the buffer.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar used throughout the network. Training runs in `f32`;
/// gradient verification re-evaluates the same code in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, where `op(a)` is
    /// `m × k` and `op(b)` is `k × n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: lengths were checked above against the strides implied by
                // the row-major (or transposed row-major) layouts.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Batch of activations stored channel-major (`C × N × H × W`).
#[derive(Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Debug for FeatureMap<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "FeatureMap({}ch × {} × {}×{})",
            self.channels, self.batch, self.height, self.width
        )
    }
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![T::zero(); channels * batch * height * width],
        }
    }

    pub fn from_vec(
        channels: usize,
        batch: usize,
        height: usize,
        width: usize,
        data: Vec<T>,
    ) -> Self {
        assert_eq!(data.len(), channels * batch * height * width);
        Self {
            channels,
            batch,
            height,
            width,
            data,
        }
    }

    /// Builds a map from sample-major (`N × C × H × W`) values.
    pub fn from_nchw(batch: usize, channels: usize, height: usize, width: usize, nchw: &[T]) -> Self {
        let plane = height * width;
        assert_eq!(nchw.len(), batch * channels * plane);
        let mut out = Self::zeros(channels, batch, height, width);
        for i in 0..batch {
            for c in 0..channels {
                let src = &nchw[(i * channels + c) * plane..][..plane];
                out.plane_mut(c, i).copy_from_slice(src);
            }
        }
        out
    }

    /// Sample-major (`N × C × H × W`) copy of the values.
    pub fn to_nchw(&self) -> Vec<T> {
        let plane = self.plane_len();
        let mut out = Vec::with_capacity(self.data.len());
        for i in 0..self.batch {
            for c in 0..self.channels {
                out.extend_from_slice(self.plane(c, i));
            }
        }
        debug_assert_eq!(out.len(), plane * self.batch * self.channels);
        out
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels
            && self.batch == other.batch
            && self.height == other.height
            && self.width == other.width
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.channels, self.batch, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    /// Number of columns of the channel-major matrix view (`N·H·W`).
    pub fn spatial_len(&self) -> usize {
        self.batch * self.plane_len()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let m = self.spatial_len();
        &self.data[c * m..(c + 1) * m]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let m = self.spatial_len();
        &mut self.data[c * m..(c + 1) * m]
    }

    pub fn plane(&self, c: usize, sample: usize) -> &[T] {
        let p = self.plane_len();
        let start = (c * self.batch + sample) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, c: usize, sample: usize) -> &mut [T] {
        let p = self.plane_len();
        let start = (c * self.batch + sample) * p;
        &mut self.data[start..start + p]
    }

    pub fn get(&self, c: usize, sample: usize, y: usize, x: usize) -> T {
        self.plane(c, sample)[y * self.width + x]
    }

    /// Splits the channels positionally into the first `at` and the remainder.
    pub fn split_channels(&self, at: usize) -> (Self, Self) {
        assert!(at <= self.channels);
        let m = self.spatial_len();
        let head = Self::from_vec(at, self.batch, self.height, self.width, self.data[..at * m].to_vec());
        let tail = Self::from_vec(
            self.channels - at,
            self.batch,
            self.height,
            self.width,
            self.data[at * m..].to_vec(),
        );
        (head, tail)
    }

    /// Channel concatenation `[self; other]`.
    pub fn concat_channels(&self, other: &Self) -> Self {
        assert!(self.batch == other.batch && self.height == other.height && self.width == other.width);
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Self::from_vec(self.channels + other.channels, self.batch, self.height, self.width, data)
    }

    /// Selects a contiguous range of samples.
    pub fn samples(&self, range: std::ops::Range<usize>) -> Self {
        assert!(range.end <= self.batch);
        let n = range.len();
        let mut out = Self::zeros(self.channels, n, self.height, self.width);
        for c in 0..self.channels {
            for (dst, src) in range.clone().enumerate() {
                out.plane_mut(c, dst).copy_from_slice(self.plane(c, src));
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    pub fn add(&self, other: &Self) -> Self {
        assert!(self.same_shape(other));
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Self::from_vec(self.channels, self.batch, self.height, self.width, data)
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert!(self.same_shape(other));
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Self::from_vec(self.channels, self.batch, self.height, self.width, data)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other));
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Row-major `rows × cols` matrix; rows are samples for pooled vectors and logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols);
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::from_vec(self.rows + other.rows, self.cols, data)
    }

    pub fn rows_range(&self, range: std::ops::Range<usize>) -> Self {
        let data = self.data[range.start * self.cols..range.end * self.cols].to_vec();
        Self::from_vec(range.len(), self.cols, data)
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}
