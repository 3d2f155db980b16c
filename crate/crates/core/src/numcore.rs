//! Dense row-major matrices, the two MIDN softmax variants, affine layers
//! with analytic gradients, and a central-difference gradient checker.
//!
//! Score matrices are laid out classes × proposals: column `i` holds the
//! per-class scores of proposal `i`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-12;

/// `ln(p)` with `p` clamped into `[PROB_EPS, 1 - PROB_EPS]`.
pub fn clamped_ln(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Mat::from_vec", rows * cols, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {v}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Keeps the first `n` rows.
    pub fn top_rows(&self, n: usize) -> Mat {
        Mat {
            rows: n,
            cols: self.cols,
            data: self.data[..n * self.cols].to_vec(),
        }
    }

    /// Selects a subset of columns, in the given order.
    pub fn select_cols(&self, cols: &[usize]) -> Mat {
        Mat::from_fn(self.rows, cols.len(), |r, j| self.get(r, cols[j]))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        self.expect_shape("Mat::zip_map", other.shape())?;
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Mat) -> Result<()> {
        self.expect_shape("Mat::add_assign", other.shape())?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn expect_shape(&self, op: &'static str, shape: (usize, usize)) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::shape(
                op,
                format!("{}x{}", shape.0, shape.1),
                format!("{}x{}", self.rows, self.cols),
            ));
        }
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "Mat::matmul",
                format!("inner dim {}", self.cols),
                format!("{}", other.rows),
            ));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Mat) -> Result<Mat> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "Mat::t_matmul",
                format!("shared dim {}", self.rows),
                format!("{}", other.rows),
            ));
        }
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (r, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "Mat::matmul_t",
                format!("shared dim {}", self.cols),
                format!("{}", other.cols),
            ));
        }
        Ok(Mat::from_fn(self.rows, other.rows, |r, c| {
            self.row(r)
                .iter()
                .zip(other.row(c))
                .map(|(a, b)| a * b)
                .sum()
        }))
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Softmax of a slice, max-subtracted.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

/// `log(sum(exp(v)))`, max-subtracted.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Normalizes each column over the classes (rows).
pub fn softmax_over_classes(x: &Mat) -> Mat {
    let mut out = x.clone();
    let mut col = vec![0.0; x.rows];
    for c in 0..x.cols {
        for (r, v) in col.iter_mut().enumerate() {
            *v = x.get(r, c);
        }
        softmax_in_place(&mut col);
        for (r, &v) in col.iter().enumerate() {
            out.set(r, c, v);
        }
    }
    out
}

/// Normalizes each row over the proposals (columns).
pub fn softmax_over_proposals(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..x.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Backward pass of [`softmax_over_classes`] given its output.
pub fn softmax_over_classes_backward(probs: &Mat, upstream: &Mat) -> Mat {
    let mut out = Mat::zeros(probs.rows, probs.cols);
    for c in 0..probs.cols {
        let dot: f64 = (0..probs.rows)
            .map(|r| probs.get(r, c) * upstream.get(r, c))
            .sum();
        for r in 0..probs.rows {
            out.set(r, c, probs.get(r, c) * (upstream.get(r, c) - dot));
        }
    }
    out
}

/// Backward pass of [`softmax_over_proposals`] given its output.
pub fn softmax_over_proposals_backward(probs: &Mat, upstream: &Mat) -> Mat {
    let mut out = Mat::zeros(probs.rows, probs.cols);
    for r in 0..probs.rows {
        let p = probs.row(r);
        let g = upstream.row(r);
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (o, (&pi, &gi)) in out.row_mut(r).iter_mut().zip(p.iter().zip(g)) {
            *o = pi * (gi - dot);
        }
    }
    out
}

pub fn relu(x: &Mat) -> Mat {
    x.map(|v| v.max(0.0))
}

/// Gradient through a rectifier given its pre-activation input.
pub fn relu_backward(pre: &Mat, upstream: &Mat) -> Mat {
    Mat {
        rows: pre.rows,
        cols: pre.cols,
        data: pre
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

/// Flat views over every trainable tensor of a model, in a fixed order.
///
/// SGD, EMA updates and checkpointing all walk parameters through this.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::shape("ParamSet::load_flat", n, flat.len()));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Fully connected layer `y = W x + b`, applied column-wise to a
/// features × proposals matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub input: Mat,
}

impl AffineParams {
    pub fn new(weight: Mat, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape("AffineParams::new", weight.rows(), bias.len()));
        }
        if !weight.is_finite() || bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("affine parameters".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Mat::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Weights drawn from `N(0, std²)`, zero bias.
    pub fn gaussian(out_dim: usize, in_dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Self {
            weight: Mat::from_fn(out_dim, in_dim, |_, _| normal.sample(rng)),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn same_shape(&self, other: &AffineParams) -> bool {
        self.weight.shape() == other.weight.shape() && self.bias.len() == other.bias.len()
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        if x.rows() != self.in_dim() {
            return Err(Error::shape("affine_forward", self.in_dim(), x.rows()));
        }
        let mut out = self.weight.matmul(x)?;
        for (r, &b) in self.bias.iter().enumerate() {
            for v in out.row_mut(r) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Mat, upstream: &Mat) -> Result<AffineGrads> {
        if x.rows() != self.in_dim() {
            return Err(Error::shape("affine_backward", self.in_dim(), x.rows()));
        }
        upstream.expect_shape("affine_backward", (self.out_dim(), x.cols()))?;
        Ok(AffineGrads {
            weight: upstream.matmul_t(x)?,
            bias: (0..upstream.rows())
                .map(|r| upstream.row(r).iter().sum())
                .collect(),
            input: self.weight.t_matmul(upstream)?,
        })
    }
}

impl ParamSet for AffineParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.weight.data(), &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.data_mut(), &mut self.bias]
    }
}

pub fn affine_forward(p: &AffineParams, x: &Mat) -> Result<Mat> {
    p.forward(x)
}

pub fn affine_backward(p: &AffineParams, x: &Mat, upstream: &Mat) -> Result<AffineGrads> {
    p.backward(x, upstream)
}

impl AffineGrads {
    /// Parameter part of the gradient packed as an [`AffineParams`].
    pub fn params(&self) -> AffineParams {
        AffineParams {
            weight: self.weight.clone(),
            bias: self.bias.clone(),
        }
    }
}

/// Compares `analytic` against central differences of `loss` at `params`.
///
/// Returns the largest relative error
/// `|a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
pub fn fd_gradcheck<F>(mut loss: F, params: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(Error::shape("fd_gradcheck", params.len(), analytic.len()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let mut theta = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + eps;
        let plus = loss(&theta);
        theta[i] = orig - eps;
        let minus = loss(&theta);
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
