//! Block execution with circular layer skipping, cross-block cache
//! combination and early exit, plus the ordinary all-layers baseline.
//!
//! In spiral mode layer `i` of block `b` reads
//!
//! ```text
//! (i <= p ? X_b : Z_b^(i-p))  +  aligned(Z~_{b-1}^(i-1))
//! ```
//!
//! where the cached term is looked up by absolute frame index and is zero
//! for frames the previous block did not compute.

use std::collections::BTreeMap;

use crate::block::{plan_blocks, slice_window, BlockConfig, BlockIngest, BlockPlan};
use crate::encoder::EncoderWeights;
use crate::error::{Result, SpiralError};
use crate::schedule::{EngineMode, SpiralConfig};
use crate::tensor::FeatureMatrix;

#[derive(Clone, Debug, PartialEq)]
struct CachedLayer {
    start_frame: usize,
    values: FeatureMatrix,
}

/// Per-layer intermediate outputs of one block, restricted to the frames the
/// next block's window shares with it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCache {
    provenance: Option<usize>,
    layers: BTreeMap<usize, CachedLayer>,
}

impl LayerCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Block that filled this cache, `None` before the first block.
    pub fn provenance(&self) -> Option<usize> {
        self.provenance
    }

    pub fn layer_indices(&self) -> Vec<usize> {
        self.layers.keys().copied().collect()
    }

    /// Absolute frames `[start, end)` cached for `layer`.
    pub fn frame_range(&self, layer: usize) -> Option<(usize, usize)> {
        self.layers
            .get(&layer)
            .map(|c| (c.start_frame, c.start_frame + c.values.rows()))
    }

    pub fn get(&self, layer: usize, frame: usize) -> Option<&[f32]> {
        let c = self.layers.get(&layer)?;
        let r = frame.checked_sub(c.start_frame)?;
        (r < c.values.rows()).then(|| c.values.row(r))
    }

    /// Total number of cached values.
    pub fn len_values(&self) -> usize {
        self.layers.values().map(|c| c.values.data().len()).sum()
    }
}

/// Result of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockOutput {
    pub block_index: usize,
    pub shift: usize,
    pub exit_layer: usize,
    /// Exit-layer rows at the chunk positions.
    pub chunk: FeatureMatrix,
    /// Encoder-layer invocations spent on this block.
    pub layer_evals: usize,
    pub plan: BlockPlan,
}

fn check_inputs(
    window: &FeatureMatrix,
    plan: &BlockPlan,
    scfg: &SpiralConfig,
    weights: &EncoderWeights,
) -> Result<()> {
    scfg.validate()?;
    if weights.layers.len() != scfg.total_layers {
        return Err(SpiralError::config(format!(
            "config expects {} layers but the weights have {}",
            scfg.total_layers,
            weights.layers.len()
        )));
    }
    if window.rows() != plan.window_rows() || window.cols() != weights.dims.dim {
        return Err(SpiralError::config(format!(
            "window is {}x{}, block {} expects {}x{}",
            window.rows(),
            window.cols(),
            plan.block_index,
            plan.window_rows(),
            weights.dims.dim
        )));
    }
    Ok(())
}

fn check_provenance(plan: &BlockPlan, cache: &LayerCache) -> Result<()> {
    let expected = plan.block_index.checked_sub(1).filter(|&b| b >= 1);
    if cache.provenance != expected {
        return Err(SpiralError::State(format!(
            "block {} needs a cache from block {}, got {}",
            plan.block_index,
            expected.map_or("<none>".into(), |b| b.to_string()),
            cache.provenance.map_or("<none>".into(), |b| b.to_string()),
        )));
    }
    Ok(())
}

/// Input rows with positional encoding at absolute positions; padded rows stay zero.
fn encode_input(window: &FeatureMatrix, plan: &BlockPlan, weights: &EncoderWeights) -> FeatureMatrix {
    let mut x = window.clone();
    for f in plan.window_start..plan.window_end {
        let r = plan.left_pad + f - plan.window_start;
        let enc = weights.positional.encode(f, x.cols());
        for (v, e) in x.row_mut(r).iter_mut().zip(enc) {
            *v += e;
        }
    }
    x
}

fn add_cached(input: &mut FeatureMatrix, plan: &BlockPlan, cache: &LayerCache, layer: usize) {
    let Some((start, end)) = cache.frame_range(layer) else {
        return;
    };
    for f in start.max(plan.window_start)..end.min(plan.window_end) {
        let cached = cache.get(layer, f).expect("frame inside cached range");
        let r = plan.left_pad + f - plan.window_start;
        for (v, c) in input.row_mut(r).iter_mut().zip(cached) {
            *v += c;
        }
    }
}

struct BlockRun {
    output: BlockOutput,
    computed: BTreeMap<usize, FeatureMatrix>,
    input: FeatureMatrix,
}

fn execute(
    window: &FeatureMatrix,
    plan: &BlockPlan,
    cache: &LayerCache,
    scfg: &SpiralConfig,
    weights: &EncoderWeights,
    shift: usize,
) -> Result<BlockRun> {
    let x = encode_input(window, plan, weights);
    let layers = scfg.layers_for_shift(shift)?;
    let p = scfg.pitch;
    let combine = scfg.mode == EngineMode::Spiral && scfg.cache_combination;
    let mut computed: BTreeMap<usize, FeatureMatrix> = BTreeMap::new();
    for &i in &layers {
        let below = match scfg.mode {
            EngineMode::Spiral if i > p => computed.get(&(i - p)),
            EngineMode::Baseline if i > 1 => computed.get(&(i - 1)),
            _ => None,
        };
        let mut input = below.unwrap_or(&x).clone();
        if combine && (i > 1 || scfg.layer0_cache) {
            add_cached(&mut input, plan, cache, i - 1);
        }
        let z = weights.forward_layer(i, &input)?;
        computed.insert(i, z);
    }
    let exit = scfg.exit_for_shift(shift);
    let exit_out = &computed[&exit];
    let mut chunk = FeatureMatrix::zeros(0, exit_out.cols());
    for f in plan.chunk_start..plan.chunk_end {
        let r = plan.row_of(f).expect("chunk lies inside window");
        chunk.push_row(exit_out.row(r))?;
    }
    Ok(BlockRun {
        output: BlockOutput {
            block_index: plan.block_index,
            shift,
            exit_layer: exit,
            chunk,
            layer_evals: layers.len(),
            plan: *plan,
        },
        computed,
        input: x,
    })
}

fn next_cache(run: BlockRun, plan: &BlockPlan, scfg: &SpiralConfig) -> LayerCache {
    let mut cache = LayerCache {
        provenance: Some(plan.block_index),
        layers: BTreeMap::new(),
    };
    if scfg.mode != EngineMode::Spiral || plan.is_final {
        return cache;
    }
    let n_left = plan.chunk_start + plan.left_pad - plan.window_start;
    let next_start = plan.chunk_end.saturating_sub(n_left).max(plan.window_start);
    let keep = |m: &FeatureMatrix| CachedLayer {
        start_frame: next_start,
        values: m.slice_rows(
            plan.row_of(next_start).unwrap_or(m.rows()),
            plan.window_rows(),
        ),
    };
    if next_start >= plan.window_end {
        return cache;
    }
    if scfg.layer0_cache {
        cache.layers.insert(0, keep(&run.input));
    }
    for (i, z) in &run.computed {
        cache.layers.insert(*i, keep(z));
    }
    cache
}

/// Run one block and return its output with the cache for the next block.
pub fn run_block(
    window: &FeatureMatrix,
    plan: &BlockPlan,
    cache: &LayerCache,
    scfg: &SpiralConfig,
    weights: &EncoderWeights,
) -> Result<(BlockOutput, LayerCache)> {
    check_inputs(window, plan, scfg, weights)?;
    check_provenance(plan, cache)?;
    let run = execute(window, plan, cache, scfg, weights, scfg.shift_for_block(plan.block_index))?;
    let output = run.output.clone();
    Ok((output, next_cache(run, plan, scfg)))
}

/// Run one block with its shift forced to `shift`, reading the genuine cache.
///
/// Used to materialise every exit depth of a block for loss evaluation; the
/// returned output does not advance the cache.
pub fn run_block_with_shift(
    window: &FeatureMatrix,
    plan: &BlockPlan,
    cache: &LayerCache,
    scfg: &SpiralConfig,
    weights: &EncoderWeights,
    shift: usize,
) -> Result<BlockOutput> {
    check_inputs(window, plan, scfg, weights)?;
    check_provenance(plan, cache)?;
    Ok(execute(window, plan, cache, scfg, weights, shift)?.output)
}

/// Encoder output for a whole utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceOutput {
    /// Concatenated chunk outputs, one row per input frame.
    pub encoded: FeatureMatrix,
    pub blocks: Vec<BlockOutput>,
    /// For each shift `s`, the concatenation of every block's exit-`s` chunk.
    /// Empty unless exit capture was requested.
    pub per_shift: Vec<FeatureMatrix>,
}

impl UtteranceOutput {
    pub fn layer_evals(&self) -> usize {
        self.blocks.iter().map(|b| b.layer_evals).sum()
    }
}

/// Encode an utterance block by block, threading the cache.
///
/// With `capture_exits`, each block is additionally re-run at every other
/// shift so that all `p` exit depths are available for the combined loss.
pub fn run_utterance(
    features: &FeatureMatrix,
    bcfg: &BlockConfig,
    scfg: &SpiralConfig,
    weights: &EncoderWeights,
    capture_exits: bool,
) -> Result<UtteranceOutput> {
    scfg.validate()?;
    let plans = plan_blocks(features.rows(), bcfg)?;
    let dim = weights.dims.dim;
    let n_shifts = match scfg.mode {
        EngineMode::Spiral => scfg.pitch,
        EngineMode::Baseline => 1,
    };
    let mut per_shift: Vec<Vec<FeatureMatrix>> = vec![Vec::new(); if capture_exits { n_shifts } else { 0 }];
    let mut blocks = Vec::with_capacity(plans.len());
    let mut cache = LayerCache::new();
    for plan in &plans {
        let window = slice_window(features, plan);
        if capture_exits {
            let genuine = scfg.shift_for_block(plan.block_index);
            for (s, parts) in per_shift.iter_mut().enumerate() {
                if s != genuine {
                    let out = run_block_with_shift(&window, plan, &cache, scfg, weights, s)?;
                    parts.push(out.chunk);
                }
            }
        }
        let (out, next) = run_block(&window, plan, &cache, scfg, weights)?;
        if capture_exits {
            per_shift[out.shift].push(out.chunk.clone());
        }
        blocks.push(out);
        cache = next;
    }
    let chunks: Vec<FeatureMatrix> = blocks.iter().map(|b| b.chunk.clone()).collect();
    let encoded = FeatureMatrix::concat_rows(&chunks, dim)?;
    let per_shift = per_shift
        .iter()
        .map(|parts| FeatureMatrix::concat_rows(parts, dim))
        .collect::<Result<Vec<_>>>()?;
    Ok(UtteranceOutput {
        encoded,
        blocks,
        per_shift,
    })
}

/// Frame-by-frame driver: segmentation plus block execution for one stream.
pub struct StreamingEncoder<'w> {
    ingest: BlockIngest,
    cache: LayerCache,
    scfg: SpiralConfig,
    weights: &'w EncoderWeights,
}

impl<'w> StreamingEncoder<'w> {
    pub fn new(bcfg: BlockConfig, scfg: SpiralConfig, weights: &'w EncoderWeights) -> Result<Self> {
        scfg.validate()?;
        Ok(StreamingEncoder {
            ingest: BlockIngest::new(bcfg)?,
            cache: LayerCache::new(),
            scfg,
            weights,
        })
    }

    fn step(&mut self, plan: BlockPlan, window: FeatureMatrix) -> Result<BlockOutput> {
        let (out, next) = run_block(&window, &plan, &self.cache, &self.scfg, self.weights)?;
        self.cache = next;
        Ok(out)
    }

    pub fn push(&mut self, row: &[f32]) -> Result<Option<BlockOutput>> {
        match self.ingest.push(row)? {
            Some((plan, window)) => self.step(plan, window).map(Some),
            None => Ok(None),
        }
    }

    pub fn finish(&mut self) -> Result<Option<BlockOutput>> {
        match self.ingest.finish()? {
            Some((plan, window)) => self.step(plan, window).map(Some),
            None => Ok(None),
        }
    }

    pub fn cache(&self) -> &LayerCache {
        &self.cache
    }
}
