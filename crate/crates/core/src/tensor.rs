//! Dense row-major matrices and the handful of kernels the encoder needs.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpiralError};

/// Row-major `rows x cols` matrix of `f32` frames.
///
/// Rows are encoder frames, columns are feature dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(cols >= 1, "feature dimension must be at least 1");
        FeatureMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if cols == 0 {
            return Err(SpiralError::config("feature dimension must be at least 1"));
        }
        if data.len() != rows * cols {
            return Err(SpiralError::config(format!(
                "expected {} values for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    /// Build a matrix from equal-length rows. `cols` is used when `rows` is empty.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(SpiralError::config(format!(
                    "row {i} has {} values, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols)
    }

    /// Copy of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> FeatureMatrix {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        FeatureMatrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.cols {
            return Err(SpiralError::config(format!(
                "row has {} values, expected {}",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Stack matrices vertically. All parts must share `cols`.
    pub fn concat_rows(parts: &[FeatureMatrix], cols: usize) -> Result<FeatureMatrix> {
        let mut out = FeatureMatrix::zeros(0, cols);
        for p in parts {
            if p.cols != cols {
                return Err(SpiralError::config(format!(
                    "cannot stack a {}-column matrix onto {cols} columns",
                    p.cols
                )));
            }
            out.data.extend_from_slice(&p.data);
            out.rows += p.rows;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &FeatureMatrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Row-wise argmax (first maximum wins).
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.iter_rows()
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// `out = x * w + b`, where `w` is `in_dim x out_dim` row-major.
pub(crate) fn affine(x: &FeatureMatrix, w: &[f32], b: &[f32], out_dim: usize) -> FeatureMatrix {
    let in_dim = x.cols();
    debug_assert_eq!(w.len(), in_dim * out_dim);
    debug_assert_eq!(b.len(), out_dim);
    let mut out = FeatureMatrix::zeros(x.rows(), out_dim);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let or = out.row_mut(r);
        or.copy_from_slice(b);
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wk = &w[k * out_dim..(k + 1) * out_dim];
            for (o, &wv) in or.iter_mut().zip(wk) {
                *o += xv * wv;
            }
        }
    }
    out
}

pub(crate) const LAYER_NORM_EPS: f32 = 1e-5;

pub(crate) fn layer_norm(x: &FeatureMatrix, scale: &[f32], offset: &[f32]) -> FeatureMatrix {
    let d = x.cols() as f32;
    let mut out = FeatureMatrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f32>() / d;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (xr[j] - mean) * inv * scale[j] + offset[j];
        }
    }
    out
}

/// In-place numerically stable softmax over a slice.
pub(crate) fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// In-place log-softmax over a slice.
pub(crate) fn log_softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f32>().ln();
    for x in v.iter_mut() {
        *x -= lse;
    }
}

/// Sinusoidal positional encoding with configurable base.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionalEncoding {
    pub base: f32,
}

impl Default for PositionalEncoding {
    fn default() -> Self {
        PositionalEncoding { base: 10_000.0 }
    }
}

impl PositionalEncoding {
    /// Encoding of one absolute position: even columns `sin`, odd columns `cos`,
    /// sharing the frequency `base^(-2k/d)` within each pair.
    pub fn encode(&self, position: usize, dim: usize) -> Vec<f32> {
        let pos = position as f64;
        (0..dim)
            .map(|j| {
                let pair = (j / 2) as f64;
                let angle = pos / (self.base as f64).powf(2.0 * pair / dim as f64);
                if j % 2 == 0 {
                    angle.sin() as f32
                } else {
                    angle.cos() as f32
                }
            })
            .collect()
    }

    /// Add the encoding of absolute positions `start, start + 1, ...` to each row.
    pub fn add_to(&self, input: &FeatureMatrix, absolute_start_frame: usize) -> FeatureMatrix {
        let mut out = input.clone();
        for r in 0..out.rows() {
            let enc = self.encode(absolute_start_frame + r, out.cols());
            for (o, e) in out.row_mut(r).iter_mut().zip(enc) {
                *o += e;
            }
        }
        out
    }
}

/// Add the default sinusoidal encoding indexed by absolute frame position.
pub fn add_positional_encoding(input: &FeatureMatrix, absolute_start_frame: usize) -> FeatureMatrix {
    PositionalEncoding::default().add_to(input, absolute_start_frame)
}
