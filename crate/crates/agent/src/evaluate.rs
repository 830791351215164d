//! Deterministic evaluation of the learned policy behind the common
//! controller interface, with optional matrix and embedding capture.

use crate::model::{ActMode, Agent};
use crate::AgentError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tsclab_core::{run_episode, Controller, EpisodeReport, Observation, TrafficEnv};
use tsclab_nn::Tensor;

/// Per-step outputs captured during evaluation.
#[derive(Clone, Debug, Default)]
pub struct Capture {
    pub matrices: Vec<Tensor>,
    pub embeddings: Vec<Tensor>,
}

/// Greedy collaborator sets and greedy actions.
pub struct PolicyController<'a> {
    agent: &'a Agent,
    hidden: Tensor,
    rng: ChaCha8Rng,
    pub capture: Option<Capture>,
    pub error: Option<AgentError>,
}

impl<'a> PolicyController<'a> {
    pub fn new(agent: &'a Agent) -> Self {
        PolicyController {
            agent,
            hidden: agent.initial_hidden(),
            rng: ChaCha8Rng::seed_from_u64(0),
            capture: None,
            error: None,
        }
    }

    pub fn capturing(agent: &'a Agent) -> Self {
        PolicyController {
            capture: Some(Capture::default()),
            ..PolicyController::new(agent)
        }
    }
}

impl Controller for PolicyController<'_> {
    fn begin_episode(&mut self, _env: &TrafficEnv, _seed: u64) {
        self.hidden = self.agent.initial_hidden();
        if let Some(c) = &mut self.capture {
            *c = Capture::default();
        }
    }

    fn act(&mut self, _env: &TrafficEnv, obs: &[Observation]) -> Vec<usize> {
        if self.error.is_some() {
            return vec![0; obs.len()];
        }
        match self.agent.act(obs, &self.hidden, ActMode::Greedy, &mut self.rng) {
            Ok(out) => {
                self.hidden = out.next_hidden;
                if let Some(c) = &mut self.capture {
                    c.matrices.push(out.matrix);
                    c.embeddings.push(out.embeddings);
                }
                out.actions
            }
            Err(e) => {
                self.error = Some(e);
                vec![0; obs.len()]
            }
        }
    }
}

/// Run one episode per seed with a learned policy.
pub fn evaluate_policy(agent: &Agent, env: &mut TrafficEnv, seeds: &[u64]) -> Result<Vec<EpisodeReport>, AgentError> {
    let mut ctl = PolicyController::new(agent);
    let mut out = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let r = run_episode(env, &mut ctl, s)?;
        if let Some(e) = ctl.error.take() {
            return Err(e);
        }
        out.push(r);
    }
    Ok(out)
}

/// Run one episode per seed with any controller.
pub fn evaluate_controller(ctl: &mut dyn Controller, env: &mut TrafficEnv, seeds: &[u64]) -> Result<Vec<EpisodeReport>, AgentError> {
    seeds.iter().map(|&s| Ok(run_episode(env, ctl, s)?)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for fewer than two values.
    pub std: f64,
}

pub fn mean_std(x: &[f64]) -> MeanStd {
    if x.is_empty() {
        return MeanStd::default();
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = if x.len() > 1 {
        (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_of_small_sets() {
        assert_eq!(mean_std(&[]), MeanStd::default());
        assert_eq!(mean_std(&[3.0]), MeanStd { mean: 3.0, std: 0.0 });
        let m = mean_std(&[1.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 2f64.sqrt()).abs() < 1e-15);
    }
}
