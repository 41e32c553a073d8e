//! The shared transformer architecture, its KV cache with retention
//! policies, and the attention mask builders.

pub mod config;
pub mod dit;
pub mod kv_cache;
pub mod mask;

pub use config::{AttentionMode, ModelConfig};
pub use dit::{patchify, time_features, token_positions, unpatchify, BoundModel, ForwardInput, ForwardOutput, Model, TokenInput};
pub use kv_cache::{cache_append, EntryMeta, KvCache, LayerKv, RetentionPolicy};
pub use mask::{build_inference_mask, build_memory_mask, AttentionMask, MaskKind};
