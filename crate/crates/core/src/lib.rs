//! Streaming decoder-only translation with explicit position slots.
//!
//! Source tokens stream into reserved position slots while generated target
//! tokens sit after the slot, so no cached key ever needs re-rotation. The
//! crate bundles the toy transformer, the KV cache, the slot allocator, the
//! READ/WRITE policies, policy-consistent training masks, a toy trainer, the
//! streaming engine with its baseline strategies, and latency/compute metrics.

pub mod engine;
pub mod error;
pub mod kv_cache;
pub mod layout;
mod linalg;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod scalar;
pub mod tokens;
pub mod trainer;
pub mod verify;

pub use engine::{
    compare_traces, run_stream, uncached_replay, CompareReport, Decode, EngineConfig, StepKind, Strategy,
    StreamSession, StreamStep, StreamTrace,
};
pub use error::{Error, Result};
pub use kv_cache::{CacheDelta, CacheMark, KvCache};
pub use layout::{
    layout_conversational, layout_grouped, layout_recompute, AllocationState, Chunk, LayoutEntry, LayoutPlan, RoleLens,
    SlotState,
};
pub use masking::{build_causal_mask, build_policy_mask, visibility_oracle, MaskMatrix};
pub use metrics::{average_lagging, cumulative_flops, laal, token_accuracy, FlopsModel};
pub use model::{ForwardInput, ForwardOutput, ModelConfig, PosScheme, Transformer, Visibility};
pub use policy::{delays_from_trace, next_action, waitk_g, Action, PolicyKind, PolicySpec, PolicyState};
pub use scalar::Scalar;
pub use tokens::{special, PositionId, Role, Tag, TokenId};
