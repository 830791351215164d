//! Model and training configuration.

use crate::AgentError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::str::FromStr;
use tsclab_nn::AdamWConfig;

/// How collaborator sets are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum MatrixMode {
    /// Sampled from the learned collaborator matrix.
    Learned,
    /// Every intersection within `radius` hops (excluding itself).
    FixedHop { radius: usize },
    /// Sampled from a matrix drawn once at initialisation and never trained.
    RandomFrozen,
}

impl fmt::Display for MatrixMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixMode::Learned => write!(f, "learned"),
            MatrixMode::FixedHop { radius } => write!(f, "fixed-hop:{radius}"),
            MatrixMode::RandomFrozen => write!(f, "random-frozen"),
        }
    }
}

impl FromStr for MatrixMode {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "learned" => Ok(MatrixMode::Learned),
            "random-frozen" => Ok(MatrixMode::RandomFrozen),
            _ => {
                let radius = s
                    .strip_prefix("fixed-hop:")
                    .and_then(|r| r.parse::<usize>().ok())
                    .filter(|r| *r >= 1)
                    .ok_or_else(|| AgentError::Config(format!("unknown matrix mode {s:?}")))?;
                Ok(MatrixMode::FixedHop { radius })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Multiplies each observation column before embedding.
    pub obs_scale: [f64; 7],
    /// Output width of each per-feature embedding.
    pub feature_embed: usize,
    /// Channels of the first pair convolution.
    pub relation_channels: usize,
    /// Channels of the second pair convolution.
    pub pair_out_channels: usize,
    /// Width of the phase representation and of the encoder output.
    pub repr_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub ff_dim: usize,
    pub cos_hidden: usize,
    pub actor_hidden: usize,
    pub gru_hidden: usize,
    pub actor_out_hidden: usize,
    pub critic_hidden: usize,
    /// Collaborators per intersection.
    pub k: usize,
    pub matrix: MatrixMode,
    pub use_frap: bool,
    pub use_transformer: bool,
    pub use_team: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            obs_scale: [1.0; 7],
            feature_embed: 4,
            relation_channels: 16,
            pair_out_channels: 4,
            repr_dim: 32,
            model_dim: 64,
            heads: 8,
            encoder_layers: 2,
            ff_dim: 64,
            cos_hidden: 64,
            actor_hidden: 64,
            gru_hidden: 64,
            actor_out_hidden: 32,
            critic_hidden: 64,
            k: 5,
            matrix: MatrixMode::Learned,
            use_frap: true,
            use_transformer: true,
            use_team: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub optim: AdamWConfig,
    pub clip: f64,
    /// Probability of a uniform action during rollouts.
    pub epsilon: f64,
    pub w_diag: f64,
    pub w_sym: f64,
    /// Episodes collected before the first update.
    pub warmup_episodes: usize,
    /// Episodes between target-critic copies.
    pub target_sync_episodes: usize,
    pub batch_size: usize,
    /// Capacity in joint transitions.
    pub buffer_capacity: usize,
    /// Policy steps per collected episode after warm-up.
    pub updates_per_episode: usize,
    /// Critic steps per collected episode after warm-up.
    pub critic_updates_per_episode: usize,
    /// Critic steps taken before the first policy step.
    pub critic_warmup_updates: usize,
    pub episodes: usize,
    /// Environment steps between checkpoints and evaluations.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub workers: usize,
    /// Multiply the critic by the policy gradient without a baseline.
    pub raw_q: bool,
    pub no_clip: bool,
    pub adv_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            optim: AdamWConfig::default(),
            clip: 0.2,
            epsilon: 1e-5,
            w_diag: 1.0,
            w_sym: 1.0,
            warmup_episodes: 4,
            target_sync_episodes: 10,
            batch_size: 256,
            buffer_capacity: 960,
            updates_per_episode: 1,
            critic_updates_per_episode: 1,
            critic_warmup_updates: 0,
            episodes: 300,
            eval_interval: 4000,
            eval_episodes: 100,
            workers: 1,
            raw_q: false,
            no_clip: false,
            adv_norm: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl AgentConfig {
    /// Check the configuration against a network of `n` intersections.
    pub fn validate(&self, n: usize) -> Result<(), AgentError> {
        let m = &self.model;
        let t = &self.train;
        let bad = |msg: String| Err(AgentError::Config(msg));
        if n == 0 {
            return bad("network has no intersections".into());
        }
        if matches!(m.matrix, MatrixMode::Learned | MatrixMode::RandomFrozen) && (m.k == 0 || m.k > n) {
            return bad(format!("k = {} must lie in 1..={n}", m.k));
        }
        if !m.model_dim.is_multiple_of(m.heads.max(1)) || m.heads == 0 {
            return bad(format!("model_dim {} is not divisible by {} heads", m.model_dim, m.heads));
        }
        let widths = [
            m.feature_embed,
            m.relation_channels,
            m.pair_out_channels,
            m.repr_dim,
            m.model_dim,
            m.ff_dim,
            m.cos_hidden,
            m.actor_hidden,
            m.gru_hidden,
            m.actor_out_hidden,
            m.critic_hidden,
        ];
        if widths.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if !(0.0..=1.0).contains(&t.epsilon) || !(0.0..1.0).contains(&t.clip) || !(0.0..=1.0).contains(&t.gamma) {
            return bad("epsilon, clip and gamma must lie in [0, 1]".into());
        }
        if t.warmup_episodes == 0 || t.target_sync_episodes == 0 {
            return bad("warmup and target-sync intervals must be at least 1".into());
        }
        if t.batch_size == 0 || t.batch_size > t.buffer_capacity {
            return bad(format!("batch {} must lie in 1..={}", t.batch_size, t.buffer_capacity));
        }
        if t.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).unwrap_or_default();
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_mode_round_trips() {
        for s in ["learned", "random-frozen", "fixed-hop:1", "fixed-hop:3"] {
            assert_eq!(s.parse::<MatrixMode>().unwrap().to_string(), s);
        }
        assert!("fixed-hop:0".parse::<MatrixMode>().is_err());
        assert!("nearest".parse::<MatrixMode>().is_err());
    }

    #[test]
    fn k_larger_than_network_is_rejected() {
        let cfg = AgentConfig::default();
        assert!(cfg.validate(4).is_err());
        assert!(cfg.validate(16).is_ok());
    }

    #[test]
    fn json_round_trip_preserves_hash() {
        let cfg = AgentConfig::default();
        let back: AgentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg.hash(), back.hash());
    }
}
