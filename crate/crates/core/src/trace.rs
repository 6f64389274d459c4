//! Which computed cells feed a block's output.
//!
//! A cell is one frame of one computed layer in one block. Attention mixes
//! every row of a window, so a layer's output at any frame depends on every
//! row of its input. Layer `i` of block `b` reads layer `i - p` of the same
//! block and, with cache combination, layer `i - 1` of block `b - 1` on the
//! frames both windows share. Raw input frames are not computed cells.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::block::{steady_block, BlockConfig};
use crate::error::Result;
use crate::schedule::{EngineMode, SpiralConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DepCell {
    pub block: usize,
    pub layer: usize,
    pub frame: usize,
}

/// Every computed cell reachable from the exit-layer chunk cells of block `b`,
/// assuming a stream long enough that `b` is not the final block.
pub fn trace_dependencies(b: usize, bcfg: &BlockConfig, scfg: &SpiralConfig) -> Result<BTreeSet<DepCell>> {
    bcfg.validate()?;
    scfg.validate()?;
    let mut cells = BTreeSet::new();
    // one entry per (block, layer) whose full input has been expanded
    let mut expanded = BTreeSet::new();
    let plan = steady_block(b, bcfg);
    let exit = scfg.exit_for_shift(scfg.shift_for_block(b));
    let mut work: Vec<DepCell> = (plan.chunk_start..plan.chunk_end)
        .map(|frame| DepCell { block: b, layer: exit, frame })
        .collect();
    while let Some(cell) = work.pop() {
        if !cells.insert(cell) || !expanded.insert((cell.block, cell.layer)) {
            continue;
        }
        let here = steady_block(cell.block, bcfg);
        let below = match scfg.mode {
            EngineMode::Spiral => cell.layer.checked_sub(scfg.pitch).filter(|&l| l >= 1),
            EngineMode::Baseline => cell.layer.checked_sub(1).filter(|&l| l >= 1),
        };
        if let Some(layer) = below {
            work.extend((here.window_start..here.window_end).map(|frame| DepCell {
                block: cell.block,
                layer,
                frame,
            }));
        }
        let cached = scfg.mode == EngineMode::Spiral && scfg.cache_combination && cell.block >= 2 && cell.layer >= 2;
        if cached {
            let prev_block = cell.block - 1;
            let prev_layers = scfg.layers_for_shift(scfg.shift_for_block(prev_block))?;
            if prev_layers.contains(&(cell.layer - 1)) {
                let prev = steady_block(prev_block, bcfg);
                let lo = here.window_start.max(prev.window_start);
                let hi = here.window_end.min(prev.window_end);
                work.extend((lo..hi).map(|frame| DepCell {
                    block: prev_block,
                    layer: cell.layer - 1,
                    frame,
                }));
            }
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig_cfg() -> (BlockConfig, SpiralConfig) {
        (BlockConfig::new(3, 1, 2), SpiralConfig::spiral(12, 4))
    }

    #[test]
    fn ninth_block_reads_layer_five_and_cached_layer_eight() {
        let (bcfg, scfg) = fig_cfg();
        let cells = trace_dependencies(9, &bcfg, &scfg).unwrap();
        assert!(cells.iter().any(|c| c.block == 9 && c.layer == 9));
        assert!(cells.iter().any(|c| c.block == 9 && c.layer == 5));
        assert!(cells.iter().any(|c| c.block == 8 && c.layer == 8));
        // exit cells are exactly the one-frame chunk of block 9
        let exits: Vec<_> = cells.iter().filter(|c| c.block == 9 && c.layer == 9).collect();
        assert_eq!(exits.len(), 1);
        assert_eq!(exits[0].frame, 8);
    }

    #[test]
    fn without_combination_only_own_block() {
        let (bcfg, scfg) = fig_cfg();
        let cells = trace_dependencies(9, &bcfg, &scfg.with_cache_combination(false)).unwrap();
        assert!(cells.iter().all(|c| c.block == 9 && [1, 5, 9].contains(&c.layer)));
        // layers 1 and 5 cover the whole window of 6 frames (5..11)
        assert_eq!(cells.len(), 1 + 6 + 6);
    }

    #[test]
    fn coverage_grows_per_shift_until_saturation() {
        let (bcfg, scfg) = fig_cfg();
        let counts: Vec<usize> = (1..=24).map(|b| trace_dependencies(b, &bcfg, &scfg).unwrap().len()).collect();
        // blocks sharing a shift have the same exit depth; compare b with b + p
        assert!(counts.windows(5).all(|w| w[0] <= w[4]), "{counts:?}");
        assert!(counts[0] < counts[8]);
        assert_eq!(&counts[16..20], &counts[20..24]);
    }

    #[test]
    fn history_reaches_back_further_than_one_block() {
        let (bcfg, scfg) = fig_cfg();
        let cells = trace_dependencies(9, &bcfg, &scfg).unwrap();
        let oldest = cells.iter().map(|c| c.block).min().unwrap();
        assert!(oldest < 8);
    }
}
