//! Streaming blockwise speech encoder with circular layer skipping.
//!
//! A stream of encoder-rate feature frames is cut into overlapping windows
//! ([`block`]). Each window runs through only every `p`-th encoder layer,
//! shifted by one layer per block, and reuses the previous block's cached
//! layer outputs on the overlapping frames ([`engine`], [`schedule`]). The
//! highest computed layer is the block's output. [`ctc`] decodes and scores
//! those outputs, [`metrics`] turns emission times into word-delay and compute
//! statistics, and [`trace`] enumerates which computed cells feed a block.

pub mod block;
pub mod ctc;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod formats;
pub mod metrics;
pub mod schedule;
pub mod sim;
pub mod tensor;
pub mod trace;
pub mod verify;

pub use block::{plan_blocks, BlockConfig, BlockIngest, BlockPlan};
pub use encoder::{ctc_head_forward, layer_forward, EncoderLayerWeights, EncoderWeights, ModelDims};
pub use engine::{run_block, run_utterance, BlockOutput, LayerCache, StreamingEncoder, UtteranceOutput};
pub use error::{Result, SpiralError};
pub use schedule::{computed_layers, exit_layer, shift_index, EngineMode, SpiralConfig};
pub use tensor::{add_positional_encoding, FeatureMatrix};
