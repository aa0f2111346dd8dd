//! Hybrid recurrent / sparse-attention sequence model engine.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom of this file fix the precision for callers that do not care.
//!
//! * [`rwkv7`]: delta-rule state recurrence with a constant-size state.
//! * [`sparse_attn`]: top-k chunk sparse attention for prefill and decode.
//! * [`kv_cache`]: importance-based cache compression under a fixed budget.
//! * [`model`]: interleaved layer stack, block expansion, checkpoints.
//! * [`bench`]: latency and memory measurement, pass-key tasks.

pub mod bench;
pub mod error;
pub mod kv_cache;
pub mod model;
pub mod rwkv7;
pub mod scalar;
pub mod sparse_attn;
pub mod tensor;

pub use error::{CheckpointError, Error, Result};
pub use kv_cache::{append, compress, importance_scores, split_cache, CacheSplit, KvCache};
pub use model::{
    build_layout, load_checkpoint, save_checkpoint, LayerKind, LayerLayout, Mode, Model, ModelConfig, ModelState,
};
pub use rwkv7::{readout, rwkv7_forward, state_step, transition_matrix, Rwkv7Inputs, Rwkv7State};
pub use scalar::Scalar;
pub use sparse_attn::{chunk_scores, decode_step, prefill, select_topk, sparse_attend, AttnConfig};
pub use tensor::{mean_pool, softmax_rows, Matrix, Precision, Vector};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Vector64 = Vector<f64>;
pub type Vector32 = Vector<f32>;
pub type KvCache64 = KvCache<f64>;
pub type KvCache32 = KvCache<f32>;
pub type Rwkv7State64 = Rwkv7State<f64>;
pub type Rwkv7State32 = Rwkv7State<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
