//! Pre-norm transformer encoder layer and the shared linear CTC head.
//!
//! Each layer is multi-head self-attention over every row of its input
//! followed by a ReLU feed-forward block, both wrapped in a residual
//! connection with layer normalization applied on the way in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpiralError};
use crate::tensor::{self, FeatureMatrix, PositionalEncoding};

/// Parameters of a single encoder layer. Matrices are `in_dim x out_dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerWeights {
    pub dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub wq: Vec<f32>,
    pub bq: Vec<f32>,
    pub wk: Vec<f32>,
    pub bk: Vec<f32>,
    pub wv: Vec<f32>,
    pub bv: Vec<f32>,
    pub wo: Vec<f32>,
    pub bo: Vec<f32>,
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
    pub ln1_scale: Vec<f32>,
    pub ln1_offset: Vec<f32>,
    pub ln2_scale: Vec<f32>,
    pub ln2_offset: Vec<f32>,
}

impl EncoderLayerWeights {
    /// All projections zero, normalization scale 1 and offset 0.
    pub fn zeros(dim: usize, ff_dim: usize, heads: usize) -> Self {
        EncoderLayerWeights {
            dim,
            ff_dim,
            heads,
            wq: vec![0.0; dim * dim],
            bq: vec![0.0; dim],
            wk: vec![0.0; dim * dim],
            bk: vec![0.0; dim],
            wv: vec![0.0; dim * dim],
            bv: vec![0.0; dim],
            wo: vec![0.0; dim * dim],
            bo: vec![0.0; dim],
            w1: vec![0.0; dim * ff_dim],
            b1: vec![0.0; ff_dim],
            w2: vec![0.0; ff_dim * dim],
            b2: vec![0.0; dim],
            ln1_scale: vec![1.0; dim],
            ln1_offset: vec![0.0; dim],
            ln2_scale: vec![1.0; dim],
            ln2_offset: vec![0.0; dim],
        }
    }

    /// Xavier-uniform projections, small uniform biases, unit-scale norms.
    pub fn random<R: Rng>(dim: usize, ff_dim: usize, heads: usize, rng: &mut R) -> Self {
        fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Vec<f32> {
            let a = (6.0 / (fan_in + fan_out) as f32).sqrt();
            (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect()
        }
        fn bias<R: Rng>(rng: &mut R, n: usize) -> Vec<f32> {
            (0..n).map(|_| rng.random_range(-0.05..0.05)).collect()
        }
        let mut w = Self::zeros(dim, ff_dim, heads);
        w.wq = xavier(rng, dim, dim);
        w.bq = bias(rng, dim);
        w.wk = xavier(rng, dim, dim);
        w.bk = bias(rng, dim);
        w.wv = xavier(rng, dim, dim);
        w.bv = bias(rng, dim);
        w.wo = xavier(rng, dim, dim);
        w.bo = bias(rng, dim);
        w.w1 = xavier(rng, dim, ff_dim);
        w.b1 = bias(rng, ff_dim);
        w.w2 = xavier(rng, ff_dim, dim);
        w.b2 = bias(rng, dim);
        w
    }

    /// Parameter blocks in serialization order.
    pub fn blocks(&self) -> [&[f32]; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln1_scale,
            &self.ln1_offset,
            &self.ln2_scale,
            &self.ln2_offset,
        ]
    }

    pub(crate) fn blocks_mut(&mut self) -> [&mut Vec<f32>; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln1_scale,
            &mut self.ln1_offset,
            &mut self.ln2_scale,
            &mut self.ln2_offset,
        ]
    }

    /// Expected length of each parameter block, same order as [`Self::blocks`].
    pub fn block_lens(dim: usize, ff_dim: usize) -> [usize; 16] {
        let dd = dim * dim;
        [
            dd,
            dim,
            dd,
            dim,
            dd,
            dim,
            dd,
            dim,
            dim * ff_dim,
            ff_dim,
            ff_dim * dim,
            dim,
            dim,
            dim,
            dim,
            dim,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(SpiralError::config(format!(
                "model dimension {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.ff_dim == 0 {
            return Err(SpiralError::config("feed-forward dimension must be positive"));
        }
        let lens = Self::block_lens(self.dim, self.ff_dim);
        for (i, (block, want)) in self.blocks().iter().zip(lens).enumerate() {
            if block.len() != want {
                return Err(SpiralError::config(format!(
                    "parameter block {i} has {} values, expected {want}",
                    block.len()
                )));
            }
            if !block.iter().all(|v| v.is_finite()) {
                return Err(SpiralError::config(format!(
                    "parameter block {i} has non-finite values"
                )));
            }
        }
        Ok(())
    }
}

/// Evaluate one encoder layer over all rows of `input`.
///
/// Non-finite results are reported as [`SpiralError::NonFinite`] without a
/// layer index; [`EncoderWeights::forward_layer`] fills it in.
pub fn layer_forward(weights: &EncoderLayerWeights, input: &FeatureMatrix) -> Result<FeatureMatrix> {
    let d = weights.dim;
    if input.cols() != d {
        return Err(SpiralError::config(format!(
            "layer expects {d} input features, got {}",
            input.cols()
        )));
    }
    if input.rows() == 0 {
        return Ok(input.clone());
    }
    let t = input.rows();
    let h = weights.heads;
    let dh = d / h;
    let scale = 1.0 / (dh as f32).sqrt();

    let normed = tensor::layer_norm(input, &weights.ln1_scale, &weights.ln1_offset);
    let q = tensor::affine(&normed, &weights.wq, &weights.bq, d);
    let k = tensor::affine(&normed, &weights.wk, &weights.bk, d);
    let v = tensor::affine(&normed, &weights.wv, &weights.bv, d);

    let mut context = FeatureMatrix::zeros(t, d);
    let mut scores = vec![0.0f32; t];
    for head in 0..h {
        let cols = head * dh..(head + 1) * dh;
        for r in 0..t {
            let qr = &q.row(r)[cols.clone()];
            for (c, s) in scores.iter_mut().enumerate() {
                let kc = &k.row(c)[cols.clone()];
                *s = qr.iter().zip(kc).map(|(a, b)| a * b).sum::<f32>() * scale;
            }
            tensor::softmax_in_place(&mut scores);
            let out = &mut context.row_mut(r)[cols.clone()];
            for (c, &p) in scores.iter().enumerate() {
                let vc = &v.row(c)[cols.clone()];
                for (o, &vv) in out.iter_mut().zip(vc) {
                    *o += p * vv;
                }
            }
        }
    }
    let mut hidden = tensor::affine(&context, &weights.wo, &weights.bo, d);
    hidden.add_assign(input);

    let normed = tensor::layer_norm(&hidden, &weights.ln2_scale, &weights.ln2_offset);
    let mut ff = tensor::affine(&normed, &weights.w1, &weights.b1, weights.ff_dim);
    for x in ff.data_mut() {
        *x = x.max(0.0);
    }
    let mut out = tensor::affine(&ff, &weights.w2, &weights.b2, d);
    out.add_assign(&hidden);

    if !out.is_finite() {
        return Err(SpiralError::NonFinite { layer: None });
    }
    Ok(out)
}

/// Hyper-parameters shared by every layer plus the output vocabulary size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub layers: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    /// Number of non-blank tokens; the CTC head has `vocab + 1` outputs.
    pub vocab: usize,
}

/// Full encoder: `layers` transformer layers and one CTC projection shared by every exit depth.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub dims: ModelDims,
    pub layers: Vec<EncoderLayerWeights>,
    /// `dim x (vocab + 1)`, blank is the last column.
    pub ctc_weight: Vec<f32>,
    pub ctc_bias: Vec<f32>,
    pub positional: PositionalEncoding,
}

impl EncoderWeights {
    pub fn random(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..dims.layers)
            .map(|_| EncoderLayerWeights::random(dims.dim, dims.ff_dim, dims.heads, &mut rng))
            .collect();
        let classes = dims.vocab + 1;
        let a = (6.0 / (dims.dim + classes) as f32).sqrt();
        let ctc_weight = (0..dims.dim * classes)
            .map(|_| rng.random_range(-a..a))
            .collect();
        let ctc_bias = (0..classes).map(|_| rng.random_range(-0.05..0.05)).collect();
        EncoderWeights {
            dims,
            layers,
            ctc_weight,
            ctc_bias,
            positional: PositionalEncoding::default(),
        }
    }

    pub fn classes(&self) -> usize {
        self.dims.vocab + 1
    }

    pub fn blank(&self) -> usize {
        self.dims.vocab
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        if self.layers.len() != d.layers {
            return Err(SpiralError::config(format!(
                "header declares {} layers but {} are present",
                d.layers,
                self.layers.len()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if (l.dim, l.ff_dim, l.heads) != (d.dim, d.ff_dim, d.heads) {
                return Err(SpiralError::config(format!("layer {} has mismatched dimensions", i + 1)));
            }
            l.validate()?;
        }
        if self.ctc_weight.len() != d.dim * self.classes() || self.ctc_bias.len() != self.classes() {
            return Err(SpiralError::config("CTC head shape does not match dims"));
        }
        Ok(())
    }

    /// Evaluate layer `index` (1-based, as in the schedule).
    pub fn forward_layer(&self, index: usize, input: &FeatureMatrix) -> Result<FeatureMatrix> {
        let layer = index
            .checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .ok_or_else(|| SpiralError::config(format!("no encoder layer {index}")))?;
        layer_forward(layer, input).map_err(|e| match e {
            SpiralError::NonFinite { .. } => SpiralError::NonFinite { layer: Some(index) },
            other => other,
        })
    }
}

/// Linear projection to `vocab + 1` classes followed by a per-row log-softmax.
pub fn ctc_head_forward(weights: &EncoderWeights, encoded: &FeatureMatrix) -> Result<FeatureMatrix> {
    if encoded.cols() != weights.dims.dim {
        return Err(SpiralError::config(format!(
            "CTC head expects {} features, got {}",
            weights.dims.dim,
            encoded.cols()
        )));
    }
    let mut out = tensor::affine(encoded, &weights.ctc_weight, &weights.ctc_bias, weights.classes());
    for r in 0..out.rows() {
        tensor::log_softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}
