#![allow(dead_code)]

use std::sync::Arc;
use tsclab_agent::{AgentConfig, MatrixMode};
use tsclab_core::{generate_scenario, EnvConfig, GenOptions, Scenario, SimConfig, TrafficEnv};

/// Grid environment with episodes of `length` seconds.
pub fn grid_env(rows: usize, cols: usize, scale: f64, length: u32) -> TrafficEnv {
    let opts = GenOptions {
        rows,
        cols,
        demand_scale: scale,
        ..GenOptions::default()
    };
    let (file, demand) = generate_scenario(&opts).unwrap();
    let sc = Scenario::from_parts(&file, demand).unwrap();
    let cfg = EnvConfig {
        sim: SimConfig {
            episode_length: length,
            ..SimConfig::default()
        },
        ..EnvConfig::default()
    };
    TrafficEnv::new(Arc::clone(&sc.net), Arc::clone(&sc.demand), cfg).unwrap()
}

/// A narrow model that keeps every component.
pub fn tiny_config(matrix: MatrixMode) -> AgentConfig {
    let mut cfg = AgentConfig::default();
    let m = &mut cfg.model;
    m.feature_embed = 2;
    m.relation_channels = 4;
    m.pair_out_channels = 2;
    m.repr_dim = 6;
    m.model_dim = 8;
    m.heads = 2;
    m.encoder_layers = 1;
    m.ff_dim = 8;
    m.cos_hidden = 6;
    m.actor_hidden = 6;
    m.gru_hidden = 5;
    m.actor_out_hidden = 4;
    m.critic_hidden = 6;
    m.k = 2;
    m.matrix = matrix;
    let t = &mut cfg.train;
    t.batch_size = 8;
    t.buffer_capacity = 64;
    t.warmup_episodes = 2;
    t.target_sync_episodes = 3;
    t.updates_per_episode = 2;
    t.critic_updates_per_episode = 2;
    cfg
}
