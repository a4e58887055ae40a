//! Dense f32 kernels used by the transformer forward pass.
//!
//! Every reduction runs left to right in a fixed order, so repeated calls on
//! the same inputs are bit-identical regardless of thread count. Row-parallel
//! kernels split work by output row only; each row is still reduced serially.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Work threshold (multiply-adds) above which row-parallel kernels use rayon.
const PAR_THRESHOLD: usize = 1 << 18;

/// Row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the given rows into a new matrix, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack<'a>(parts: impl IntoIterator<Item = &'a Matrix>, cols: usize) -> Result<Matrix> {
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::Shape(format!("vstack: expected {cols} columns, got {}", p.cols)));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::Shape(format!(
                "push_row: expected {} values, got {}",
                self.cols,
                row.len()
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }
}

fn for_each_row(out: &mut [f32], cols: usize, work: usize, f: impl Fn(usize, &mut [f32]) + Sync) {
    if cols == 0 {
        return;
    }
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(cols).enumerate().for_each(|(i, r)| f(i, r));
    } else {
        out.chunks_mut(cols).enumerate().for_each(|(i, r)| f(i, r));
    }
}

/// `a · b`. Each output element accumulates over the shared dimension from
/// index 0 upward.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul: {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    for_each_row(&mut out.data, n, m * k * n, |i, row| {
        let arow = a.row(i);
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    Ok(out)
}

/// `a · bᵀ`, with `b` given row-major as `[n, k]`.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_transposed: {}x{} by ({}x{})^T",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Matrix::zeros(m, n);
    for_each_row(&mut out.data, n, m * k * n, |i, row| {
        let arow = a.row(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(arow, b.row(j));
        }
    });
    Ok(out)
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Adds `bias` to every row in place.
pub fn add_bias(m: &mut Matrix, bias: &[f32]) -> Result<()> {
    if bias.len() != m.cols {
        return Err(Error::Shape(format!(
            "bias of length {} for {} columns",
            bias.len(),
            m.cols
        )));
    }
    for row in m.data.chunks_mut(m.cols.max(1)) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(())
}

/// Softmax restricted to `allowed` entries; masked entries come out as exactly
/// zero. The max is taken over allowed entries only.
pub fn masked_softmax(logits: &[f32], allowed: &[bool]) -> Result<Vec<f32>> {
    let mut out = vec![0.0; logits.len()];
    masked_softmax_into(logits, allowed, &mut out)?;
    Ok(out)
}

pub(crate) fn masked_softmax_into(logits: &[f32], allowed: &[bool], out: &mut [f32]) -> Result<()> {
    if logits.len() != allowed.len() || out.len() != logits.len() {
        return Err(Error::Shape(format!(
            "masked_softmax: {} logits, {} mask entries",
            logits.len(),
            allowed.len()
        )));
    }
    let mut max = f32::NEG_INFINITY;
    let mut any = false;
    for (&x, &ok) in logits.iter().zip(allowed) {
        if ok {
            any = true;
            if x > max {
                max = x;
            }
        }
    }
    if !any {
        return Err(Error::EmptyAttention(0));
    }
    let mut sum = 0.0f32;
    for ((o, &x), &ok) in out.iter_mut().zip(logits).zip(allowed) {
        if ok {
            let e = (x - max).exp();
            *o = e;
            sum += e;
        } else {
            *o = 0.0;
        }
    }
    for (o, &ok) in out.iter_mut().zip(allowed) {
        if ok {
            *o /= sum;
        }
    }
    Ok(())
}

/// Layer normalization with population variance.
pub fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> Result<Vec<f32>> {
    let mut out = vec![0.0; x.len()];
    layer_norm_into(x, gamma, beta, eps, &mut out)?;
    Ok(out)
}

pub(crate) fn layer_norm_into(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]) -> Result<()> {
    if x.len() != gamma.len() || x.len() != beta.len() || out.len() != x.len() {
        return Err(Error::Shape(format!(
            "layer_norm: x={}, gamma={}, beta={}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Shape(format!("layer_norm: eps must be positive, got {eps}")));
    }
    let n = x.len() as f32;
    let mut sum = 0.0f32;
    for &v in x {
        sum += v;
    }
    let mean = sum / n;
    let mut var = 0.0f32;
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    let inv = 1.0 / (var / n + eps).sqrt();
    for (i, o) in out.iter_mut().enumerate() {
        *o = (x[i] - mean) * inv * gamma[i] + beta[i];
    }
    Ok(())
}

/// Row-wise layer norm over a matrix.
pub fn layer_norm_rows(m: &Matrix, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let (src, dst) = (m.row(i), &mut out.data[i * m.cols..(i + 1) * m.cols]);
        layer_norm_into(src, gamma, beta, eps, dst)?;
    }
    Ok(out)
}

/// Which GELU formula the MLP uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeluKind {
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`, the GPT-2 variant.
    #[default]
    Tanh,
    /// `0.5·x·(1 + erf(x/√2))`.
    Erf,
}

/// Tanh-approximation GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_erf(x: f32) -> f32 {
    let e = statrs::function::erf::erf(f64::from(x) / std::f64::consts::SQRT_2) as f32;
    0.5 * x * (1.0 + e)
}

pub fn gelu_in_place(m: &mut Matrix, kind: GeluKind) {
    let f = match kind {
        GeluKind::Tanh => gelu,
        GeluKind::Erf => gelu_erf,
    };
    for v in &mut m.data {
        *v = f(*v);
    }
}

/// Gathers rows of `table` by id.
pub fn embedding_gather(table: &Matrix, ids: &[u32]) -> Result<Matrix> {
    let mut out = Matrix::zeros(0, table.cols);
    out.data.reserve(ids.len() * table.cols);
    for &id in ids {
        let id = id as usize;
        if id >= table.rows {
            return Err(Error::Shape(format!(
                "embedding id {id} outside table of {} rows",
                table.rows
            )));
        }
        out.push_row(table.row(id))?;
    }
    Ok(out)
}
