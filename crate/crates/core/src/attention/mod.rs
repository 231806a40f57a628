//! Top-k window attention: windows are summarized by their mean token, each
//! query window picks its `T_k` most similar key windows by summary dot
//! product, and its patches attend to those windows' patches plus every
//! window summary.

mod block;
mod window;

pub use block::{
    attention_block, channel_attention, project_qkv, top_k_window_attention, window_attention_qkv, AttentionParams,
    WindowAttentionOutput,
};
pub use window::{
    build_kv, gather_window_features, select_top_k, window_average, window_partition, window_reverse,
    window_similarity, AugmentedKV, SimilarityMatrix, TopKIndex, WindowContext, WindowGrid, WindowSummary,
    WindowedFeatures,
};
