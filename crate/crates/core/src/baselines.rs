//! Fixed-time control with seeded offsets, and greedy MaxPressure.

use crate::env::{EnvError, EpisodeMetrics, Observation, RewardBreakdown, TrafficEnv};
use crate::net::{IntersectionId, PhaseId, PHASES};
use crate::sim::SimState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A controller picks one phase index per intersection at each boundary.
pub trait Controller {
    /// Called after every reset.
    fn begin_episode(&mut self, _env: &TrafficEnv, _seed: u64) {}

    fn act(&mut self, env: &TrafficEnv, obs: &[Observation]) -> Vec<usize>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FtcConfig {
    pub order: Vec<PhaseId>,
    /// Seconds per phase.
    pub duration: u32,
    /// Per-intersection offset, seconds.
    pub offsets: Vec<u32>,
}

impl FtcConfig {
    /// Default cycle A, B, C, D at 30 s with offsets drawn in multiples of
    /// `interval` from one cycle.
    pub fn seeded(n: usize, interval: u32, seed: u64) -> Self {
        let order: Vec<PhaseId> = (0..4).map(PhaseId).collect();
        let duration = 30;
        let cycle = duration * order.len() as u32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots = (cycle / interval.max(1)).max(1);
        let offsets = (0..n).map(|_| rng.random_range(0..slots) * interval).collect();
        FtcConfig {
            order,
            duration,
            offsets,
        }
    }

    pub fn cycle(&self) -> u32 {
        self.duration * self.order.len() as u32
    }
}

pub fn ftc_action(i: usize, t: u32, cfg: &FtcConfig) -> usize {
    let k = ((t + cfg.offsets[i]) / cfg.duration) as usize % cfg.order.len();
    cfg.order[k].index()
}

/// Phase with the largest phase pressure; ties go to the lowest index.
pub fn maxpressure_action(sim: &SimState, i: IntersectionId) -> usize {
    let mut best = 0;
    let mut best_p = f64::NEG_INFINITY;
    for p in 0..PHASES {
        let v = sim.pressure_phase(i, PhaseId(p as u8));
        if v > best_p {
            best = p;
            best_p = v;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct FixedTime {
    pub cfg: FtcConfig,
    /// Offsets are re-drawn from this seed combined with the episode seed.
    pub base_seed: u64,
}

impl Controller for FixedTime {
    fn begin_episode(&mut self, env: &TrafficEnv, seed: u64) {
        self.cfg = FtcConfig {
            offsets: FtcConfig::seeded(env.len(), env.config().sim.control_interval, self.base_seed ^ seed).offsets,
            ..self.cfg.clone()
        };
    }

    fn act(&mut self, env: &TrafficEnv, _obs: &[Observation]) -> Vec<usize> {
        let t = env.sim().clock();
        (0..env.len()).map(|i| ftc_action(i, t, &self.cfg)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MaxPressure;

impl Controller for MaxPressure {
    fn act(&mut self, env: &TrafficEnv, _obs: &[Observation]) -> Vec<usize> {
        (0..env.len())
            .map(|i| maxpressure_action(env.sim(), IntersectionId(i)))
            .collect()
    }
}

/// Outcome of one evaluation episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub seed: u64,
    /// Σ over steps of the mean reward across intersections.
    pub reward: f64,
    pub metrics: EpisodeMetrics,
    /// Per-intersection means over steps.
    pub node_breakdown: Vec<RewardBreakdown>,
    pub node_queue: Vec<f64>,
}

/// Roll out one full episode.
pub fn run_episode(env: &mut TrafficEnv, ctl: &mut dyn Controller, seed: u64) -> Result<EpisodeReport, EnvError> {
    let mut obs = env.reset(seed)?;
    ctl.begin_episode(env, seed);
    let n = env.len();
    let mut reward = 0.0;
    let mut sums = vec![RewardBreakdown::default(); n];
    let mut queues = vec![0.0; n];
    let mut steps = 0usize;
    loop {
        let actions = ctl.act(env, &obs);
        let r = env.step(&actions)?;
        reward += r.rewards.iter().sum::<f64>() / n as f64;
        for (i, b) in r.info.breakdown.iter().enumerate() {
            let s = &mut sums[i];
            s.delay_term += b.delay_term;
            s.wait_term += b.wait_term;
            s.queue_term += b.queue_term;
            s.pressure_term += b.pressure_term;
            s.total += b.total;
            queues[i] += r.info.averages[i].queue;
        }
        steps += 1;
        obs = r.obs;
        if r.done {
            break;
        }
    }
    let k = steps as f64;
    for s in &mut sums {
        s.delay_term /= k;
        s.wait_term /= k;
        s.queue_term /= k;
        s.pressure_term /= k;
        s.total /= k;
    }
    queues.iter_mut().for_each(|q| *q /= k);
    Ok(EpisodeReport {
        seed,
        reward,
        metrics: env.episode_metrics(),
        node_breakdown: sums,
        node_queue: queues,
    })
}
