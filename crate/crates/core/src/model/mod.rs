//! The encoder-decoder policy: node encoder, vehicle and tour encoders,
//! joint action embeddings and the attention decoder.

mod config;
mod features;
mod infer;
mod policy;

use thiserror::Error;

use crate::env::EnvError;
use crate::nn::{CheckpointError, NnError};

pub use config::{parse_meta, ModelConfig, PolicyKind};
pub use features::{
    coord_scale, node_features, time_scale, vehicle_feature_matrix, vehicle_features,
};
pub use infer::{best_rollout, decode_config, greedy_with, Model, ModelMeta, Rollout};
pub use policy::{LaneDecoder, LaneRollout, Policy, Selector, StepView};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
