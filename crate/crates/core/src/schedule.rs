//! Circular layer-skipping schedule.
//!
//! Block `b` (1-based) uses shift `s = (b - 1) mod p` and evaluates the layers
//! `1 + s, 1 + p + s, ...` up to `I`. Its highest computed layer,
//! `I - p + s + 1`, is the early-exit output. Over `p` consecutive blocks
//! every layer is computed exactly once.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpiralError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineMode {
    /// Skip layers circularly and exit early.
    #[default]
    Spiral,
    /// Evaluate every layer of every block.
    Baseline,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpiralConfig {
    pub total_layers: usize,
    pub pitch: usize,
    /// Add the previous block's cached `(i - 1)` layer output into layer `i`'s input.
    #[serde(default = "yes")]
    pub cache_combination: bool,
    /// Also cache and combine the raw (layer 0) input.
    #[serde(default)]
    pub layer0_cache: bool,
    #[serde(default)]
    pub mode: EngineMode,
}

impl SpiralConfig {
    pub fn spiral(total_layers: usize, pitch: usize) -> Self {
        SpiralConfig {
            total_layers,
            pitch,
            cache_combination: true,
            layer0_cache: false,
            mode: EngineMode::Spiral,
        }
    }

    pub fn baseline(total_layers: usize) -> Self {
        SpiralConfig {
            total_layers,
            pitch: 1,
            cache_combination: false,
            layer0_cache: false,
            mode: EngineMode::Baseline,
        }
    }

    pub fn with_cache_combination(mut self, on: bool) -> Self {
        self.cache_combination = on;
        self
    }

    pub fn with_layer0_cache(mut self, on: bool) -> Self {
        self.layer0_cache = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (i, p) = (self.total_layers, self.pitch);
        if i == 0 {
            return Err(SpiralError::config("total_layers must be at least 1"));
        }
        if p == 0 || p > i {
            return Err(SpiralError::config(format!(
                "pitch must satisfy 1 <= p <= total_layers, got p={p}, total_layers={i}"
            )));
        }
        if self.mode == EngineMode::Spiral && i % p != 0 {
            return Err(SpiralError::config(format!(
                "total_layers must be divisible by pitch in spiral mode, got {i} mod {p} = {}",
                i % p
            )));
        }
        Ok(())
    }

    /// Shift used by block `b`; always 0 in baseline mode.
    pub fn shift_for_block(&self, b: usize) -> usize {
        match self.mode {
            EngineMode::Spiral => shift_index(b, self.pitch),
            EngineMode::Baseline => 0,
        }
    }

    /// Layers evaluated under shift `s`.
    pub fn layers_for_shift(&self, s: usize) -> Result<Vec<usize>> {
        match self.mode {
            EngineMode::Spiral => computed_layers(s, self.total_layers, self.pitch),
            EngineMode::Baseline => Ok((1..=self.total_layers).collect()),
        }
    }

    pub fn exit_for_shift(&self, s: usize) -> usize {
        match self.mode {
            EngineMode::Spiral => exit_layer(s, self.total_layers, self.pitch),
            EngineMode::Baseline => self.total_layers,
        }
    }

    /// Encoder-layer evaluations per block.
    pub fn evals_per_block(&self) -> usize {
        match self.mode {
            EngineMode::Spiral => self.total_layers / self.pitch,
            EngineMode::Baseline => self.total_layers,
        }
    }
}

/// `(b - 1) mod p` for 1-based block `b`.
pub fn shift_index(b: usize, p: usize) -> usize {
    assert!(b >= 1 && p >= 1, "block index and pitch are 1-based");
    (b - 1) % p
}

/// Ascending layer indices `{1 + s, 1 + p + s, ...}` within `[1, total_layers]`.
pub fn computed_layers(s: usize, total_layers: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || s >= p {
        return Err(SpiralError::config(format!("shift {s} out of range for pitch {p}")));
    }
    if !total_layers.is_multiple_of(p) {
        return Err(SpiralError::config(format!(
            "total_layers {total_layers} is not divisible by pitch {p}"
        )));
    }
    Ok((1 + s..=total_layers).step_by(p).collect())
}

/// Early-exit layer `I - p + s + 1`, the largest member of `computed_layers(s)`.
pub fn exit_layer(s: usize, total_layers: usize, p: usize) -> usize {
    total_layers - p + s + 1
}
