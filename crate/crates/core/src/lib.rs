//! Hierarchical block-sparse attention over curve-ordered token grids.
//!
//! The crate is organized bottom-up:
//! - [`curve`]: Hilbert index math.
//! - [`layout`]: token sequences (text, grid tokens, guidance anchors) laid
//!   out in curve order with contiguous local windows.
//! - [`mask`]: interaction rules compiled to a tri-state tile mask, plus the
//!   dense token-level oracle it is verified against.
//! - [`rope`]: two-axis rotary position encoding shared by grid tokens and
//!   scaled guidance anchors.
//! - [`attention`]: dense reference attention and the tile-skipping kernel,
//!   with benchmark and flop accounting helpers.
//! - [`model`]: a small guided flow-matching transformer exercising the full
//!   stack end to end (adapters, backward pass, training, sampling).

pub mod attention;
pub mod curve;
pub mod error;
pub mod layout;
pub mod mask;
pub mod mat;
pub mod model;
pub mod rope;
pub mod train;

pub use attention::{
    attention_weights, dense_attention, kernel_bench, tiled_attention, tiled_attention_with,
    AttentionInputs, BenchReport, TiledOptions,
};
pub use curve::{hilbert_index, hilbert_point, order_for_side};
pub use error::{Error, Result};
pub use layout::{
    anchor_positions, build_layout, AnchorSpec, GridSpec, Segment, TokenLayout, TokenPos,
    WindowSpec,
};
pub use mask::{
    build_block_mask, build_token_mask, build_token_mask_capped, flop_report, tile_stats,
    verify_block_mask, BlockMask, ConsistencyReport, GuidanceScope, InteractionRules, LrSelfScope,
    TileState, TileStats, TokenMask, DEFAULT_K_TILE, DEFAULT_ORACLE_CAP, DEFAULT_Q_TILE,
};
pub use mat::{Mat, Real};
pub use model::{
    lora_project, AttentionBackend, BlockTensor, ForwardCache, LoraAdapter, MmaBlockParams,
    ModelConfig, ModelGrads, ModelInputs, SequenceSpec, TensorId, ToyModel, BACKWARD_CAP,
};
pub use rope::RopeParams;
pub use train::{
    euler_sample, euler_sample_with, flow_match_loss, flow_match_loss_value, load_checkpoint,
    recursive_upscale, save_checkpoint, sgd_step, train, trainable, FlowMatchBatch, LevelStats,
    SyntheticDataset, TrainConfig, TrainMode, TrainReport, TrainRow, TrainSample, UpscaleConfig,
};
