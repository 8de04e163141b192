//! Attention matrices as discrete-time Markov chains: multi-bounce
//! attention, TokenRank, spectral head weighting and zero-shot segmentation.

pub mod chain;
pub mod eigen;
pub mod error;
pub mod io;
pub mod ops;
pub mod segmentation;
pub mod spectral;
pub mod synth;

pub use chain::{
    bounce, power_iterate, ranking, steady_state, ChainConfig, Orientation, RankResult, RepairPolicy,
    StateVector, StochasticMatrix,
};
pub use error::{Error, Result};
pub use ops::{
    aggregate_heads, column_select, column_sum, mask_columns, masking_order, multi_bounce, row_select,
    token_rank, AttentionTensor, Direction, HeadScheme, MaskStrategy, MaskingOptions,
};
pub use segmentation::{
    attention_to_map, evaluate, threshold, Bounces, MapRequest, SegMap, SegMetrics, ThresholdRule,
};
pub use spectral::{lambda2, lambda2_weights, Lambda2Method, Lambda2Options, SpectralSummary};
