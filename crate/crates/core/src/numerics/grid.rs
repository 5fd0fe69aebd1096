use rayon::prelude::*;

use crate::error::{Error, Result};

/// Minimum row count before matmul fans out across threads. Small products
/// are cheaper single-threaded than paying the fork/join overhead.
const PAR_ROW_THRESHOLD: usize = 64;

/// A dense n-dimensional array of `f32` values.
///
/// Invariants: `shape.iter().product() == data.len()`, and every exposed
/// operation either returns finite values or an error — NaN/Inf never
/// propagates silently.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Grid {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Grid { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Grid {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n: usize = shape.iter().product();
        Grid {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} values to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            let bad = self.data.iter().position(|v| !v.is_finite()).unwrap();
            Err(Error::non_finite(format!(
                "{context}: element {bad} is {}",
                self.data[bad]
            )))
        }
    }

    fn rows_cols(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(format!("{what} expects a 2-d grid, got {s:?}"))),
        }
    }

    /// Standard matrix product `self[M×K] · other[K×N]`.
    ///
    /// Parallelizes over output rows; each row is computed independently so
    /// the result is identical no matter how work is split.
    pub fn matmul(&self, other: &Grid) -> Result<Grid> {
        let (m, k) = self.rows_cols("matmul lhs")?;
        let (k2, n) = other.rows_cols("matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims differ: {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0f32; m * n];
        let lhs = &self.data;
        let rhs = &other.data;
        let row_job = |(i, out_row): (usize, &mut [f32])| {
            let a_row = &lhs[i * k..(i + 1) * k];
            for (kk, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs[kk * n..(kk + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        };
        if m >= PAR_ROW_THRESHOLD {
            out.par_chunks_mut(n).enumerate().for_each(row_job);
        } else {
            out.chunks_mut(n).enumerate().for_each(row_job);
        }
        let out = Grid::new(vec![m, n], out)?;
        out.assert_finite("matmul output")?;
        Ok(out)
    }

    /// Matrix product with a transposed right operand:
    /// `self[M×K] · other[N×K]ᵀ -> [M×N]`. This is the attention-score shape
    /// (queries against keys) and avoids materializing the transpose.
    pub fn matmul_nt(&self, other: &Grid) -> Result<Grid> {
        let (m, k) = self.rows_cols("matmul_nt lhs")?;
        let (n, k2) = other.rows_cols("matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nt inner dims differ: {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0f32; m * n];
        let lhs = &self.data;
        let rhs = &other.data;
        let row_job = |(i, out_row): (usize, &mut [f32])| {
            let a_row = &lhs[i * k..(i + 1) * k];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &rhs[j * k..(j + 1) * k];
                let mut acc = 0.0f32;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                *o = acc;
            }
        };
        if m >= PAR_ROW_THRESHOLD {
            out.par_chunks_mut(n).enumerate().for_each(row_job);
        } else {
            out.chunks_mut(n).enumerate().for_each(row_job);
        }
        let out = Grid::new(vec![m, n], out)?;
        out.assert_finite("matmul_nt output")?;
        Ok(out)
    }

    /// Transposed-lhs product: `self[K×M]ᵀ · other[K×N] -> [M×N]`.
    /// Used in backward passes (gradients w.r.t. projection weights).
    pub fn matmul_tn(&self, other: &Grid) -> Result<Grid> {
        let (k, m) = self.rows_cols("matmul_tn lhs")?;
        let (k2, n) = other.rows_cols("matmul_tn rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_tn inner dims differ: {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0f32; m * n];
        // Accumulate rank-1 updates row-by-row of the shared K axis. Output
        // rows are not independent here, so this stays single-threaded; the
        // shapes it sees (C×C weight gradients) are small.
        for kk in 0..k {
            let a_row = &self.data[kk * m..(kk + 1) * m];
            let b_row = &other.data[kk * n..(kk + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        let out = Grid::new(vec![m, n], out)?;
        out.assert_finite("matmul_tn output")?;
        Ok(out)
    }

    pub fn transpose2d(&self) -> Result<Grid> {
        let (r, c) = self.rows_cols("transpose2d")?;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Grid::new(vec![c, r], out)
    }

    /// Row-wise softmax with max-subtraction for numerical stability.
    /// Each output row sums to 1.
    pub fn softmax_rows(&self) -> Result<Grid> {
        let (r, c) = self.rows_cols("softmax_rows")?;
        if c == 0 {
            return Err(Error::invalid("softmax over empty rows".to_string()));
        }
        self.assert_finite("softmax input")?;
        let mut out = vec![0.0f32; r * c];
        let src = &self.data;
        let row_job = |(i, out_row): (usize, &mut [f32])| {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for (o, &v) in out_row.iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                sum += e as f64;
            }
            let inv = (1.0 / sum) as f32;
            for o in out_row.iter_mut() {
                *o *= inv;
            }
        };
        if r >= PAR_ROW_THRESHOLD {
            out.par_chunks_mut(c).enumerate().for_each(row_job);
        } else {
            out.chunks_mut(c).enumerate().for_each(row_job);
        }
        Grid::new(vec![r, c], out)
    }

    /// Elementwise combination of two identically shaped grids.
    pub fn zip_map(&self, other: &Grid, f: impl Fn(f32, f32) -> f32) -> Result<Grid> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "zip_map shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Grid::new(self.shape.clone(), data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Grid {
        Grid {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Grid {
        self.map(|v| v * s)
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: f32, other: &Grid) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "axpy shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Sum of all elements, accumulated in f64 for reproducible reductions.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    /// Flattened inner product, accumulated in f64.
    pub fn dot(&self, other: &Grid) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "dot shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    /// Identity matrix of side `n`.
    pub fn identity(n: usize) -> Grid {
        let mut g = Grid::zeros(vec![n, n]);
        for i in 0..n {
            g.data[i * n + i] = 1.0;
        }
        g
    }

    /// Nearest-pixel resize of an `H×W×C` grid. Output pixel `(i, j)` copies
    /// the source pixel whose center is nearest to the output pixel center.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Result<Grid> {
        let (h, w, c) = self.hwc("resize_nearest")?;
        let mut out = vec![0.0f32; out_h * out_w * c];
        for i in 0..out_h {
            let si = (((i as f32 + 0.5) * h as f32 / out_h as f32) as usize).min(h - 1);
            for j in 0..out_w {
                let sj = (((j as f32 + 0.5) * w as f32 / out_w as f32) as usize).min(w - 1);
                let src = &self.data[(si * w + sj) * c..(si * w + sj) * c + c];
                out[(i * out_w + j) * c..(i * out_w + j) * c + c].copy_from_slice(src);
            }
        }
        Grid::new(vec![out_h, out_w, c], out)
    }

    /// Bilinear resize of an `H×W×C` grid with edge clamping.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Grid> {
        let (h, w, c) = self.hwc("resize_bilinear")?;
        let mut out = vec![0.0f32; out_h * out_w * c];
        for i in 0..out_h {
            let fy = (i as f32 + 0.5) * h as f32 / out_h as f32 - 0.5;
            let y0 = fy.floor().clamp(0.0, (h - 1) as f32) as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ty = (fy - y0 as f32).clamp(0.0, 1.0);
            for j in 0..out_w {
                let fx = (j as f32 + 0.5) * w as f32 / out_w as f32 - 0.5;
                let x0 = fx.floor().clamp(0.0, (w - 1) as f32) as usize;
                let x1 = (x0 + 1).min(w - 1);
                let tx = (fx - x0 as f32).clamp(0.0, 1.0);
                for ch in 0..c {
                    let p00 = self.data[(y0 * w + x0) * c + ch];
                    let p01 = self.data[(y0 * w + x1) * c + ch];
                    let p10 = self.data[(y1 * w + x0) * c + ch];
                    let p11 = self.data[(y1 * w + x1) * c + ch];
                    let top = p00 + (p01 - p00) * tx;
                    let bot = p10 + (p11 - p10) * tx;
                    out[(i * out_w + j) * c + ch] = top + (bot - top) * ty;
                }
            }
        }
        Grid::new(vec![out_h, out_w, c], out)
    }

    fn hwc(&self, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [h, w, c] => Ok((*h, *w, *c)),
            s => Err(Error::shape(format!("{what} expects H×W×C, got {s:?}"))),
        }
    }
}
