//! Differentiable building blocks: a small reverse-mode tape, attention,
//! feed-forward and batch-norm layers, parameter storage and checkpoints.

mod gradcheck;
mod layers;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, rel_err, GradCheck};
pub use layers::{
    attn_weights, sha, AttnConfig, BatchNorm, BnMode, Linear, Mha, Mlp, NnError, SaBlock,
};
pub use params::{
    Checkpoint, CheckpointError, Gradients, ParamArray, ParamId, ParamSet, Record, StatUpdate,
};
pub use tape::{AttnLayout, Backward, Graph, Var};
pub use tensor::{Real, Tensor};
