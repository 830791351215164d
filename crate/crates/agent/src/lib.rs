//! Multi-agent signal control with learned top-k collaborator selection:
//! a dual feature extractor, a collaborator head, a recurrent actor and a
//! per-intersection critic trained jointly from replay.

pub mod buffer;
pub mod config;
pub mod cos;
pub mod decision;
pub mod evaluate;
pub mod features;
pub mod model;
pub mod trainer;

pub use buffer::{Batch, ReplayBuffer, StoredStep};
pub use config::{AgentConfig, MatrixMode, ModelConfig, TrainConfig};
pub use cos::{constraint_terms, eval_topk, sample_topk, Selection};
pub use evaluate::{evaluate_controller, evaluate_policy, mean_std, MeanStd, PolicyController};
pub use model::{ActMode, ActOutput, Agent, LossTerms, UpdateReport};
pub use trainer::{collect_episode, EpisodeSummary, TrainLog, Trainer};

use tsclab_core::EnvError;
use tsclab_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad batch: {0}")]
    Batch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error("episode {episode}: {source}")]
    Episode {
        episode: u64,
        #[source]
        source: Box<AgentError>,
    },
}
