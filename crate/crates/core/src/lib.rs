//! Difference-aware, stripe-granular sparse attention for the prefill phase,
//! with a dense causal oracle, selection baselines and recall/sparsity
//! metrics.
//!
//! The pipeline has three stages:
//!
//! 1. [`compute_anchor`] runs blocked attention over the first key block and
//!    a step-aligned local window, keeping each row's partial softmax state.
//!    The running max logit of that state is the row's *anchor*.
//! 2. [`identify_stripes`] pools queries per block, scores them against
//!    every key between the initial block and the window, and keeps the keys
//!    whose score is within `theta` of the pooled anchor.
//! 3. [`sparse_attention`] resumes each row's state and folds in the
//!    gathered keys.
//!
//! [`anchor_attention`] composes all three.

pub mod anchor;
pub mod baselines;
pub mod bench;
pub mod error;
pub mod format;
pub mod mask;
pub mod metrics;
pub mod online;
pub mod oracle;
pub mod sparse;
pub mod stripe;
pub mod tensor;
pub mod workloads;

pub use anchor::{anchor_region, compute_anchor, AnchorState, Coverage};
pub use baselines::{
    pooled_score_map, select_diff_aware, select_topcdf, select_topk, streaming_mask, Granularity,
};
pub use error::{Error, Result};
pub use format::{read_workload, write_workload};
pub use mask::SelectionMask;
pub use metrics::{output_error, recall, sparsity, EvalReport};
pub use oracle::{dense_attention, dense_probs, dense_scores, masked_attention, AttentionOutput};
pub use sparse::{anchor_attention, run_pipeline, sparse_attention, PipelineRun, RunStats};
pub use stripe::{identify_stripes, pooled_anchor, AnchorMode, StripeIndex};
pub use tensor::{avgpool_rows, avgpool_vector, BlockConfig, HeadWorkload, Matrix, QueryPooling};
pub use workloads::{gen_planted_stripes, gen_random, gen_sink_local, PlantedStripes, SinkLocal};
