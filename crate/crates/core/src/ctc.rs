//! CTC greedy decoding, loss, and gradient.
//!
//! The blank class is the last column (`V` for `V` tokens). Losses are
//! computed in `f64` in the log domain; impossible states carry
//! [`LOG_ZERO`] instead of `-inf`.

use serde::{Deserialize, Serialize};

use crate::block::BlockPlan;
use crate::encoder::{ctc_head_forward, EncoderWeights};
use crate::error::{Result, SpiralError};
use crate::tensor::FeatureMatrix;

/// Log-domain stand-in for `log(0)`.
pub const LOG_ZERO: f64 = -1.0e30;

fn lse2(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if hi <= LOG_ZERO {
        return LOG_ZERO;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

fn clamp_log(v: f64) -> f64 {
    if v.is_nan() || v < LOG_ZERO {
        LOG_ZERO
    } else {
        v
    }
}

/// A decoded token and the first frame of its argmax run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEmission {
    pub token_id: usize,
    pub frame_index: usize,
}

/// A decoded token placed on the simulated wall clock.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmissionEvent {
    pub token_id: usize,
    pub frame_index: usize,
    /// Block whose chunk contained `frame_index`.
    pub block_index: usize,
    /// Time the block's output became available.
    pub emit_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub text: String,
    /// Half-open range into the transcript's token list.
    pub token_span: (usize, usize),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub tokens: Vec<usize>,
    #[serde(default)]
    pub words: Vec<WordSpan>,
}

impl Transcript {
    pub fn new(tokens: Vec<usize>) -> Self {
        Transcript { tokens, words: Vec::new() }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if let Some(t) = self.tokens.iter().find(|&&t| t >= vocab) {
            return Err(SpiralError::config(format!("token id {t} outside vocabulary of {vocab}")));
        }
        let mut next = 0;
        for w in &self.words {
            let (a, b) = w.token_span;
            if a != next || b <= a || b > self.tokens.len() {
                return Err(SpiralError::config(format!("word {:?} has an invalid token span", w.text)));
            }
            next = b;
        }
        Ok(())
    }
}

/// Per-frame argmax, collapse repeats, drop blanks.
pub fn greedy_decode(logprobs: &FeatureMatrix) -> Vec<TokenEmission> {
    let blank = logprobs.cols() - 1;
    let mut out = Vec::new();
    let mut prev = None;
    for (t, k) in logprobs.argmax_rows().into_iter().enumerate() {
        if prev != Some(k) && k != blank {
            out.push(TokenEmission {
                token_id: k,
                frame_index: t,
            });
        }
        prev = Some(k);
    }
    out
}

/// Place decoded tokens on the wall clock of the block that emitted their frame.
pub fn attach_blocks(tokens: &[TokenEmission], plans: &[BlockPlan]) -> Vec<EmissionEvent> {
    tokens
        .iter()
        .filter_map(|tok| {
            let plan = plans.iter().find(|p| p.contains_chunk_frame(tok.frame_index))?;
            Some(EmissionEvent {
                token_id: tok.token_id,
                frame_index: tok.frame_index,
                block_index: plan.block_index,
                emit_ms: plan.ready_time_ms,
            })
        })
        .collect()
}

/// Fewest frames that can carry `target`: one per token plus a blank between repeats.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Blank-interleaved target `[blank, y1, blank, y2, ..., blank]`.
fn extend_target(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

fn check_alignable(frames: usize, classes: usize, target: &[usize]) -> Result<()> {
    if let Some(&t) = target.iter().find(|&&t| t + 1 >= classes) {
        return Err(SpiralError::config(format!(
            "token id {t} is not a non-blank class of {classes}"
        )));
    }
    let required = min_frames(target);
    if frames < required {
        return Err(SpiralError::Unalignable {
            target_len: target.len(),
            required,
            frames,
        });
    }
    Ok(())
}

/// `alpha[t][s]`: log probability of all prefixes ending in extended state `s` at frame `t`.
fn forward(lp: &[f64], classes: usize, ext: &[usize]) -> Vec<Vec<f64>> {
    let frames = lp.len() / classes;
    let n = ext.len();
    let blank = classes - 1;
    let mut alpha = vec![vec![LOG_ZERO; n]; frames];
    alpha[0][0] = lp[ext[0]];
    if n > 1 {
        alpha[0][1] = lp[ext[1]];
    }
    for t in 1..frames {
        let row = &lp[t * classes..(t + 1) * classes];
        for s in 0..n {
            let stay = alpha[t - 1][s];
            let step = if s >= 1 { alpha[t - 1][s - 1] } else { LOG_ZERO };
            let skip = if can_skip(ext, s, blank) { alpha[t - 1][s - 2] } else { LOG_ZERO };
            alpha[t][s] = clamp_log(lse3(stay, step, skip) + row[ext[s]]);
        }
    }
    alpha
}

/// `beta[t][s]`: log probability of completing the target from state `s` at frame `t`,
/// excluding the emission at `t`.
fn backward(lp: &[f64], classes: usize, ext: &[usize]) -> Vec<Vec<f64>> {
    let frames = lp.len() / classes;
    let n = ext.len();
    let blank = classes - 1;
    let mut beta = vec![vec![LOG_ZERO; n]; frames];
    beta[frames - 1][n - 1] = 0.0;
    if n > 1 {
        beta[frames - 1][n - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        let row = &lp[(t + 1) * classes..(t + 2) * classes];
        for s in 0..n {
            let stay = beta[t + 1][s] + row[ext[s]];
            let step = if s + 1 < n { beta[t + 1][s + 1] + row[ext[s + 1]] } else { LOG_ZERO };
            let skip = if s + 2 < n && can_skip(ext, s + 2, blank) {
                beta[t + 1][s + 2] + row[ext[s + 2]]
            } else {
                LOG_ZERO
            };
            beta[t][s] = clamp_log(lse3(clamp_log(stay), clamp_log(step), clamp_log(skip)));
        }
    }
    beta
}

fn total_log_prob(alpha: &[Vec<f64>]) -> f64 {
    let last = alpha.last().expect("at least one frame");
    let n = last.len();
    if n > 1 {
        lse2(last[n - 1], last[n - 2])
    } else {
        last[0]
    }
}

/// Negative log-likelihood of `target` under per-frame log-probabilities.
pub fn ctc_loss(logprobs: &FeatureMatrix, target: &[usize]) -> Result<f64> {
    let classes = logprobs.cols();
    if logprobs.rows() == 0 {
        return Err(SpiralError::EmptyInput("no frames to score".into()));
    }
    check_alignable(logprobs.rows(), classes, target)?;
    let lp: Vec<f64> = logprobs.data().iter().map(|&v| clamp_log(v as f64)).collect();
    let ext = extend_target(target, classes - 1);
    let alpha = forward(&lp, classes, &ext);
    Ok(-total_log_prob(&alpha))
}

/// Loss and gradient with respect to pre-softmax `logits` (row-major, `classes` per row).
pub fn ctc_loss_grad_f64(logits: &[f64], classes: usize, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    if classes < 2 || !logits.len().is_multiple_of(classes) {
        return Err(SpiralError::config("logits must be a non-empty multiple of at least 2 classes"));
    }
    let frames = logits.len() / classes;
    if frames == 0 {
        return Err(SpiralError::EmptyInput("no frames to score".into()));
    }
    check_alignable(frames, classes, target)?;
    let mut lp = logits.to_vec();
    for row in lp.chunks_exact_mut(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    let ext = extend_target(target, classes - 1);
    let alpha = forward(&lp, classes, &ext);
    let beta = backward(&lp, classes, &ext);
    let log_p = total_log_prob(&alpha);

    let mut grad = vec![0.0; logits.len()];
    let mut occupancy = vec![LOG_ZERO; classes];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|v| *v = LOG_ZERO);
        for (s, &k) in ext.iter().enumerate() {
            occupancy[k] = lse2(occupancy[k], alpha[t][s] + beta[t][s]);
        }
        for k in 0..classes {
            let prob = lp[t * classes + k].exp();
            let post = if occupancy[k] <= LOG_ZERO {
                0.0
            } else {
                (occupancy[k] - log_p).exp()
            };
            grad[t * classes + k] = prob - post;
        }
    }
    Ok((-log_p, grad))
}

/// Loss and row-major gradient with respect to pre-softmax logits.
pub fn ctc_loss_grad(logits: &FeatureMatrix, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    let l: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    ctc_loss_grad_f64(&l, logits.cols(), target)
}

/// Terms of the multi-exit training objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinedLoss {
    /// Loss of the emitted sequence.
    pub full: f64,
    /// Loss of each fixed-exit sequence, indexed by shift.
    pub per_shift: Vec<f64>,
    pub total: f64,
}

impl CombinedLoss {
    pub fn term_count(&self) -> usize {
        1 + self.per_shift.len()
    }
}

/// Unit-weight sum of the CTC loss of the emitted sequence and of every fixed-exit sequence.
pub fn combined_loss(
    per_shift_outputs: &[FeatureMatrix],
    full_output: &FeatureMatrix,
    target: &[usize],
    weights: &EncoderWeights,
) -> Result<CombinedLoss> {
    for (s, h) in per_shift_outputs.iter().enumerate() {
        if h.rows() != full_output.rows() {
            return Err(SpiralError::config(format!(
                "exit sequence {s} has {} rows, expected {}",
                h.rows(),
                full_output.rows()
            )));
        }
    }
    let full = ctc_loss(&ctc_head_forward(weights, full_output)?, target)?;
    let per_shift = per_shift_outputs
        .iter()
        .map(|h| ctc_loss(&ctc_head_forward(weights, h)?, target))
        .collect::<Result<Vec<_>>>()?;
    let total = full + per_shift.iter().sum::<f64>();
    Ok(CombinedLoss { full, per_shift, total })
}
