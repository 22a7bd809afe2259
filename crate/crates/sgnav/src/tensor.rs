//! Dense 64-bit float tensors and the handful of numeric primitives the
//! models are built from: matrix product, stable softmax, cross-entropy and
//! multi-label BCE losses with analytic gradients.
//!
//! Everything is row-major `f64`. Shapes are validated at the boundaries;
//! the model code works with known-consistent shapes internally.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense rows x cols matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "tensor data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    /// Identity matrix of size n.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor2 { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn same_shape(&self, other: &Tensor2) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] += v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Standard matrix product. Errors on an inner-dimension mismatch.
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(Error::dim(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add_scaled(&mut self, other: &Tensor2, s: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|a| *a = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense dim0 x dim1 x channels tensor, channel-minor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    dim0: usize,
    dim1: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dim0: usize, dim1: usize, channels: usize) -> Self {
        Tensor3 { dim0, dim1, channels, data: vec![0.0; dim0 * dim1 * channels] }
    }

    pub fn dim0(&self) -> usize {
        self.dim0
    }

    pub fn dim1(&self) -> usize {
        self.dim1
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        debug_assert!(i < self.dim0 && j < self.dim1 && c < self.channels);
        self.data[(i * self.dim1 + j) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, v: f64) {
        debug_assert!(i < self.dim0 && j < self.dim1 && c < self.channels);
        self.data[(i * self.dim1 + j) * self.channels + c] = v;
    }

    /// The feature vector at (i, j), length `channels`.
    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.dim1 + j) * self.channels;
        &self.data[base..base + self.channels]
    }

    /// Extract channel c as a dim0 x dim1 matrix.
    pub fn channel(&self, c: usize) -> Tensor2 {
        let mut out = Tensor2::zeros(self.dim0, self.dim1);
        for i in 0..self.dim0 {
            for j in 0..self.dim1 {
                out.set(i, j, self.get(i, j, c));
            }
        }
        out
    }

    /// Stack per-channel matrices into a tensor.
    pub fn from_channels(mats: &[Tensor2]) -> Result<Tensor3> {
        let first = mats
            .first()
            .ok_or_else(|| Error::arg("from_channels: no channels"))?;
        let (d0, d1) = (first.rows(), first.cols());
        let mut out = Tensor3::zeros(d0, d1, mats.len());
        for (c, m) in mats.iter().enumerate() {
            if m.rows() != d0 || m.cols() != d1 {
                return Err(Error::dim(format!(
                    "from_channels: channel {c} is {}x{}, expected {d0}x{d1}",
                    m.rows(),
                    m.cols()
                )));
            }
            for i in 0..d0 {
                for j in 0..d1 {
                    out.set(i, j, c, m.get(i, j));
                }
            }
        }
        Ok(out)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable softmax over a nonempty slice.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::arg("softmax of empty vector"));
    }
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Backward through softmax: given y = softmax(x) and dL/dy, return dL/dx.
pub fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter().zip(dy).map(|(yi, dyi)| yi * (dyi - dot)).collect()
}

/// log(sum(exp(x))) with max subtraction.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean negative log-softmax of the true class per row.
///
/// Returns the scalar loss and dL/dlogits = (softmax - onehot) / rows.
pub fn cross_entropy(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2)> {
    if logits.rows() != labels.len() {
        return Err(Error::dim(format!(
            "cross_entropy: {} logit rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let n = logits.rows();
    let k = logits.cols();
    let mut grad = Tensor2::zeros(n, k);
    let mut loss = 0.0;
    for i in 0..n {
        let label = labels[i];
        if label >= k {
            return Err(Error::arg(format!(
                "cross_entropy: label {label} out of range for {k} classes"
            )));
        }
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        loss += lse - row[label];
        let p = softmax(row)?;
        for j in 0..k {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.set(i, j, (p[j] - onehot) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

/// Mean sigmoid binary cross-entropy over all entries, log-sum-exp form.
///
/// Returns the scalar loss and dL/dlogits = (sigmoid(logit) - target) / count.
pub fn bce_multilabel(logits: &Tensor2, targets: &Tensor2) -> Result<(f64, Tensor2)> {
    if !logits.same_shape(targets) {
        return Err(Error::dim(format!(
            "bce_multilabel: logits {}x{} vs targets {}x{}",
            logits.rows(),
            logits.cols(),
            targets.rows(),
            targets.cols()
        )));
    }
    let count = logits.data().len();
    if count == 0 {
        return Ok((0.0, Tensor2::zeros(logits.rows(), logits.cols())));
    }
    let mut grad = Tensor2::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (idx, (&x, &t)) in logits.data().iter().zip(targets.data()).enumerate() {
        // max(x,0) - x*t + ln(1 + e^{-|x|})
        loss += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        grad.data_mut()[idx] = (sigmoid(x) - t) / count as f64;
    }
    Ok((loss / count as f64, grad))
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}
