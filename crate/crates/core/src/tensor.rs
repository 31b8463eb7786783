//! Dense row-major tensors used for latents, features and token matrices.

use serde::{Deserialize, Serialize};

use crate::Scalar;

/// A `(height, width, channels)` tensor stored row-major with channels
/// innermost, so the flat buffer is also a `(height * width, channels)` token
/// matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3<S> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor3<S> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, S::zero())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: S) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<S>) -> Self {
        assert_eq!(
            data.len(),
            height * width * channels,
            "buffer length does not match {height}x{width}x{channels}"
        );
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> S,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::from_vec(height, width, channels, data)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn offset(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> S {
        self.data[self.offset(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: S) {
        let o = self.offset(y, x, c);
        self.data[o] = value;
    }

    /// Channel vector at one spatial position.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[S] {
        let o = self.offset(y, x, 0);
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [S] {
        let o = self.offset(y, x, 0);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    /// Copies the `rows x cols` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, rows: usize, cols: usize) -> Self {
        assert!(row + rows <= self.height && col + cols <= self.width);
        let mut out = Vec::with_capacity(rows * cols * self.channels);
        for y in row..row + rows {
            let start = self.offset(y, col, 0);
            out.extend_from_slice(&self.data[start..start + cols * self.channels]);
        }
        Self::from_vec(rows, cols, self.channels, out)
    }

    /// Adds `patch` into the window at `(row, col)`.
    pub fn add_window(&mut self, row: usize, col: usize, patch: &Self) {
        assert_eq!(self.channels, patch.channels);
        assert!(row + patch.height <= self.height && col + patch.width <= self.width);
        let span = patch.width * patch.channels;
        for y in 0..patch.height {
            let dst = self.offset(row + y, col, 0);
            let src = y * span;
            for (d, s) in self.data[dst..dst + span]
                .iter_mut()
                .zip(&patch.data[src..src + span])
            {
                *d += *s;
            }
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(self.shape(), other.shape());
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, factor: S) -> Self {
        self.map(|v| v * factor)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> S {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Concatenates along channels.
    pub fn concat_channels(&self, other: &Self) -> Self {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let c = self.channels + other.channels;
        let mut data = Vec::with_capacity(self.tokens() * c);
        for (a, b) in self
            .data
            .chunks_exact(self.channels)
            .zip(other.data.chunks_exact(other.channels))
        {
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        Self::from_vec(self.height, self.width, c, data)
    }

    /// Splits channels at `at`, the inverse of [`Tensor3::concat_channels`].
    pub fn split_channels(&self, at: usize) -> (Self, Self) {
        assert!(at <= self.channels);
        let rest = self.channels - at;
        let mut a = Vec::with_capacity(self.tokens() * at);
        let mut b = Vec::with_capacity(self.tokens() * rest);
        for px in self.data.chunks_exact(self.channels) {
            a.extend_from_slice(&px[..at]);
            b.extend_from_slice(&px[at..]);
        }
        (
            Self::from_vec(self.height, self.width, at, a),
            Self::from_vec(self.height, self.width, rest, b),
        )
    }

    /// Reinterprets as a `(tokens, channels)` matrix without copying.
    pub fn into_tokens(self) -> Matrix<S> {
        Matrix {
            rows: self.height * self.width,
            cols: self.channels,
            data: self.data,
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor3<T> {
        Tensor3 {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| T::of(v.f64())).collect(),
        }
    }
}

/// Row-major `(rows, cols)` matrix; attention works on `(tokens, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn into_tensor(self, height: usize, width: usize) -> Tensor3<S> {
        assert_eq!(height * width, self.rows);
        Tensor3::from_vec(height, width, self.cols, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self (n x k) * rhs (k x m)`.
    pub fn matmul(&self, rhs: &Self) -> Self {
        let mut out = Self::zeros(self.rows, rhs.cols);
        gemm_nn(&self.data, &rhs.data, &mut out.data, self.rows, self.cols, rhs.cols);
        out
    }
}

/// `out (n x m) += a (n x k) * b (k x m)`.
pub fn gemm_nn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(m)) {
            if av == S::zero() {
                continue;
            }
            axpy(av, brow, orow);
        }
    }
}

/// `out (n x m) += a (n x k) * b (m x k)^T`.
pub fn gemm_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * m);
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        for (o, brow) in orow.iter_mut().zip(b.chunks_exact(k)) {
            *o += dot(arow, brow);
        }
    }
}

/// `out (k x m) += a (n x k)^T * b (n x m)`.
pub fn gemm_tn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), n * m);
    debug_assert_eq!(out.len(), k * m);
    for (arow, brow) in a.chunks_exact(k).zip(b.chunks_exact(m)) {
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(m)) {
            if av == S::zero() {
                continue;
            }
            axpy(av, brow, orow);
        }
    }
}

#[inline]
pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    // Four partial sums let the compiler vectorize without fast-math.
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_and_add_window_are_consistent() {
        let t = Tensor3::<f64>::from_fn(4, 5, 2, |y, x, c| (y * 10 + x) as f64 + c as f64 * 0.5);
        let w = t.crop(1, 2, 2, 3);
        assert_eq!(w.get(0, 0, 1), t.get(1, 2, 1));
        assert_eq!(w.get(1, 2, 0), t.get(2, 4, 0));
        let mut z = Tensor3::<f64>::zeros(4, 5, 2);
        z.add_window(1, 2, &w);
        assert_eq!(z.get(2, 4, 0), t.get(2, 4, 0));
        assert_eq!(z.get(0, 0, 0), 0.0);
    }

    #[test]
    fn channel_concat_round_trips() {
        let a = Tensor3::<f32>::from_fn(2, 3, 2, |y, x, c| (y + x + c) as f32);
        let b = Tensor3::<f32>::from_fn(2, 3, 3, |y, x, c| (y * x * c) as f32 - 1.0);
        let (a2, b2) = a.concat_channels(&b).split_channels(2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn gemm_variants_agree_with_naive_products() {
        let (n, k, m) = (3, 4, 5);
        let a: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut nn = vec![0.0; n * m];
        gemm_nn(&a, &b, &mut nn, n, k, m);
        for i in 0..n {
            for j in 0..m {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * m + j]).sum();
                assert!((nn[i * m + j] - want).abs() < 1e-12);
            }
        }
        // b^T stored as (m x k)
        let bt: Vec<f64> = (0..m * k).map(|i| b[(i % k) * m + i / k]).collect();
        let mut nt = vec![0.0; n * m];
        gemm_nt(&a, &bt, &mut nt, n, k, m);
        for (x, y) in nt.iter().zip(&nn) {
            assert!((x - y).abs() < 1e-12);
        }
        // a^T * nn is (k x m)
        let mut tn = vec![0.0; k * m];
        gemm_tn(&a, &nn, &mut tn, n, k, m);
        for i in 0..k {
            for j in 0..m {
                let want: f64 = (0..n).map(|r| a[r * k + i] * nn[r * m + j]).sum();
                assert!((tn[i * m + j] - want).abs() < 1e-12);
            }
        }
    }
}
