//! Segmentation of a frame stream into overlapping analysis windows.
//!
//! Each window is `n_left` frames of history, an `n_center` frame chunk whose
//! encoded features are emitted, and `n_right` frames of look-ahead. Frame
//! indices are 0-based and ranges half-open; block indices are 1-based.
//!
//! Left context that would fall before frame 0 is zero-padded so that every
//! non-final window has exactly `window_len` rows. The last block is flushed
//! at end of stream with whatever look-ahead exists and its chunk runs to the
//! final frame.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpiralError};
use crate::tensor::FeatureMatrix;

fn default_frame_ms() -> f64 {
    40.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub n_left: usize,
    pub n_center: usize,
    pub n_right: usize,
    /// Duration of one encoder frame in milliseconds.
    #[serde(default = "default_frame_ms")]
    pub frame_ms: f64,
}

impl BlockConfig {
    pub fn new(n_left: usize, n_center: usize, n_right: usize) -> Self {
        BlockConfig {
            n_left,
            n_center,
            n_right,
            frame_ms: default_frame_ms(),
        }
    }

    pub fn with_frame_ms(mut self, frame_ms: f64) -> Self {
        self.frame_ms = frame_ms;
        self
    }

    pub fn window_len(&self) -> usize {
        self.n_left + self.n_center + self.n_right
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_center == 0 {
            return Err(SpiralError::config("n_center must be at least 1"));
        }
        if !(self.frame_ms > 0.0 && self.frame_ms.is_finite()) {
            return Err(SpiralError::config("frame_ms must be positive"));
        }
        Ok(())
    }
}

/// Placement of one block in absolute frame coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub block_index: usize,
    /// First real frame of the window (clamped at 0).
    pub window_start: usize,
    pub window_end: usize,
    /// Zero rows logically prepended before `window_start`.
    pub left_pad: usize,
    pub chunk_start: usize,
    pub chunk_end: usize,
    /// Simulated time at which the last frame of the window has arrived.
    pub ready_time_ms: f64,
    pub is_final: bool,
}

impl BlockPlan {
    /// Rows in the window matrix, padding included.
    pub fn window_rows(&self) -> usize {
        self.left_pad + self.window_end - self.window_start
    }

    /// Row of the window matrix holding absolute frame `frame`.
    pub fn row_of(&self, frame: usize) -> Option<usize> {
        (self.window_start..self.window_end)
            .contains(&frame)
            .then(|| self.left_pad + frame - self.window_start)
    }

    pub fn chunk_len(&self) -> usize {
        self.chunk_end - self.chunk_start
    }

    pub fn contains_chunk_frame(&self, frame: usize) -> bool {
        (self.chunk_start..self.chunk_end).contains(&frame)
    }
}

fn make_plan(b: usize, total: usize, cfg: &BlockConfig, is_final: bool) -> BlockPlan {
    let chunk_start = (b - 1) * cfg.n_center;
    let (chunk_end, window_end) = if is_final {
        (total, total)
    } else {
        let ce = chunk_start + cfg.n_center;
        (ce, ce + cfg.n_right)
    };
    BlockPlan {
        block_index: b,
        window_start: chunk_start.saturating_sub(cfg.n_left),
        window_end,
        left_pad: cfg.n_left.saturating_sub(chunk_start),
        chunk_start,
        chunk_end,
        ready_time_ms: window_end as f64 * cfg.frame_ms,
        is_final,
    }
}

/// Geometry of block `b` in a stream long enough that it is not the final block.
pub fn steady_block(b: usize, cfg: &BlockConfig) -> BlockPlan {
    assert!(b >= 1, "block indices are 1-based");
    make_plan(b, usize::MAX, cfg, false)
}

/// Lay out every block of a `total_frames` long utterance.
pub fn plan_blocks(total_frames: usize, cfg: &BlockConfig) -> Result<Vec<BlockPlan>> {
    cfg.validate()?;
    if total_frames == 0 {
        return Err(SpiralError::EmptyInput("utterance has no frames".into()));
    }
    let mut plans = Vec::with_capacity(total_frames / cfg.n_center + 1);
    for b in 1.. {
        let chunk_start = (b - 1) * cfg.n_center;
        let chunk_end = chunk_start + cfg.n_center;
        let complete = chunk_end < total_frames && chunk_end + cfg.n_right <= total_frames;
        plans.push(make_plan(b, total_frames, cfg, !complete));
        if !complete {
            break;
        }
    }
    Ok(plans)
}

/// Number of blocks `plan_blocks` produces, without allocating the plans.
pub fn block_count(total_frames: usize, cfg: &BlockConfig) -> usize {
    if total_frames == 0 {
        return 0;
    }
    // complete blocks satisfy b*n_c < total and b*n_c + n_r <= total
    let limit_c = (total_frames - 1) / cfg.n_center;
    let limit_r = total_frames.saturating_sub(cfg.n_right) / cfg.n_center;
    limit_c.min(limit_r) + 1
}

/// Copy a block's window out of a full utterance, zero rows where padded.
pub fn slice_window(features: &FeatureMatrix, plan: &BlockPlan) -> FeatureMatrix {
    let mut out = FeatureMatrix::zeros(plan.window_rows(), features.cols());
    for f in plan.window_start..plan.window_end {
        out.row_mut(plan.left_pad + f - plan.window_start)
            .copy_from_slice(features.row(f));
    }
    out
}

/// Streaming segmentation state machine for one utterance.
///
/// Frames are pushed one at a time; a block is yielded as soon as the last
/// frame of its window has arrived. With no look-ahead (`n_right == 0`) a
/// completed block is held until the next frame or end of stream, because only
/// then is it known whether the block is the final one.
#[derive(Debug)]
pub struct BlockIngest {
    cfg: BlockConfig,
    dim: Option<usize>,
    /// Frames from absolute index `buffer_start` onwards.
    buffer: VecDeque<Vec<f32>>,
    buffer_start: usize,
    received: usize,
    next_block: usize,
    held: Option<usize>,
    finished: bool,
}

pub type BlockWindow = (BlockPlan, FeatureMatrix);

impl BlockIngest {
    pub fn new(cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(BlockIngest {
            cfg,
            dim: None,
            buffer: VecDeque::new(),
            buffer_start: 0,
            received: 0,
            next_block: 1,
            held: None,
            finished: false,
        })
    }

    pub fn frames_received(&self) -> usize {
        self.received
    }

    pub fn push(&mut self, row: &[f32]) -> Result<Option<BlockWindow>> {
        if self.finished {
            return Err(SpiralError::Stream("frame pushed after end of stream".into()));
        }
        match self.dim {
            None if row.is_empty() => {
                return Err(SpiralError::Stream("frame has no features".into()));
            }
            None => self.dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(SpiralError::Stream(format!(
                    "feature dimension changed from {d} to {} at frame {}",
                    row.len(),
                    self.received
                )));
            }
            Some(_) => {}
        }
        self.buffer.push_back(row.to_vec());
        self.received += 1;

        if let Some(b) = self.held.take() {
            // another frame arrived, so the held block was not the last one
            let out = self.emit(b, false);
            self.try_complete();
            return Ok(Some(out));
        }
        Ok(self.try_complete())
    }

    fn try_complete(&mut self) -> Option<BlockWindow> {
        let b = self.next_block;
        let window_end = b * self.cfg.n_center + self.cfg.n_right;
        if self.received != window_end {
            return None;
        }
        self.next_block += 1;
        if self.cfg.n_right == 0 {
            self.held = Some(b);
            None
        } else {
            Some(self.emit(b, false))
        }
    }

    /// Signal end of stream, flushing the final block if any frames remain.
    pub fn finish(&mut self) -> Result<Option<BlockWindow>> {
        if self.finished {
            return Ok(None);
        }
        self.finished = true;
        if let Some(b) = self.held.take() {
            return Ok(Some(self.emit(b, true)));
        }
        let b = self.next_block;
        if (b - 1) * self.cfg.n_center < self.received {
            self.next_block += 1;
            return Ok(Some(self.emit(b, true)));
        }
        Ok(None)
    }

    fn emit(&mut self, b: usize, is_final: bool) -> BlockWindow {
        let plan = make_plan(b, self.received, &self.cfg, is_final);
        let dim = self.dim.expect("a block needs at least one frame");
        let mut window = FeatureMatrix::zeros(plan.window_rows(), dim);
        for f in plan.window_start..plan.window_end {
            window
                .row_mut(plan.left_pad + f - plan.window_start)
                .copy_from_slice(&self.buffer[f - self.buffer_start]);
        }
        // frames before the next window start are never needed again
        let keep_from = (b * self.cfg.n_center).saturating_sub(self.cfg.n_left);
        while self.buffer_start < keep_from && !self.buffer.is_empty() {
            self.buffer.pop_front();
            self.buffer_start += 1;
        }
        (plan, window)
    }
}

/// Run a whole stream of rows through [`BlockIngest`].
pub fn ingest<I, R>(rows: I, cfg: BlockConfig) -> Result<Vec<BlockWindow>>
where
    I: IntoIterator<Item = R>,
    R: AsRef<[f32]>,
{
    let mut state = BlockIngest::new(cfg)?;
    let mut out = Vec::new();
    for row in rows {
        if let Some(y) = state.push(row.as_ref())? {
            out.push(y);
        }
    }
    if let Some(y) = state.finish()? {
        out.push(y);
    }
    Ok(out)
}
