//! Episode collection, replay updates, target syncing and checkpoints.

use crate::buffer::{Batch, ReplayBuffer, StoredStep};
use crate::config::AgentConfig;
use crate::model::{ActMode, Agent, UpdateReport};
use crate::AgentError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tsclab_core::{EpisodeMetrics, TrafficEnv};
use tsclab_nn::{Checkpoint, Tensor};

/// SplitMix64 finaliser, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, index: u64, stream: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const ENV_STREAM: u64 = 1;
const ACT_STREAM: u64 = 2;
const UPDATE_STREAM: u64 = 3;

/// Outcome of one training rollout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: u64,
    pub env_seed: u64,
    /// Σ over steps of the mean reward across intersections.
    pub reward: f64,
    /// Mean over steps and intersections of the interval queue.
    pub queue: f64,
    pub steps: usize,
    pub metrics: EpisodeMetrics,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub summary: EpisodeSummary,
    pub updates: usize,
    /// Mean over this episode's updates.
    pub report: Option<UpdateReport>,
    pub target_synced: bool,
    /// Updates were due but the buffer held fewer than a batch.
    pub buffer_short: bool,
}

/// Roll out one episode with the sampling policy.
pub fn collect_episode(agent: &Agent, env: &mut TrafficEnv, episode: u64, env_seed: u64, act_seed: u64) -> Result<(Vec<StoredStep>, EpisodeSummary), AgentError> {
    let ctx = |e: AgentError| AgentError::Episode {
        episode,
        source: Box::new(e),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(act_seed);
    let mut obs = env.reset(env_seed).map_err(|e| ctx(e.into()))?;
    let mut hidden = agent.initial_hidden();
    let n = agent.n;
    let mut steps = Vec::with_capacity(env.steps_per_episode());
    let mut reward = 0.0;
    let mut queue = 0.0;
    loop {
        let out = agent.act(&obs, &hidden, ActMode::Sample, &mut rng).map_err(ctx)?;
        let r = env.step(&out.actions).map_err(|e| ctx(e.into()))?;
        reward += r.rewards.iter().sum::<f64>() / n as f64;
        queue += r.info.averages.iter().map(|a| a.queue).sum::<f64>() / n as f64;
        steps.push(StoredStep {
            episode,
            step: steps.len() as u32,
            obs,
            ids: out.ids,
            actions: out.actions,
            rewards: r.rewards,
            next_obs: r.obs.clone(),
            done: r.done,
            hidden: hidden.data,
            logprob: out.logprob,
            cos_logprob: out.cos_logprob,
        });
        hidden = out.next_hidden;
        obs = r.obs;
        if r.done {
            break;
        }
    }
    let summary = EpisodeSummary {
        episode,
        env_seed,
        reward,
        queue: queue / steps.len() as f64,
        steps: steps.len(),
        metrics: env.episode_metrics(),
    };
    Ok((steps, summary))
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub agent: Agent,
    pub env: TrafficEnv,
    pub buffer: ReplayBuffer,
    pub seed: u64,
    pub episodes: u64,
    pub env_steps: u64,
    pub updates: u64,
    pub policy_updates: u64,
    pub critic_updates: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: AgentConfig,
    seed: u64,
    intersections: usize,
}

impl Trainer {
    pub fn new(cfg: AgentConfig, env: TrafficEnv, seed: u64) -> Result<Self, AgentError> {
        let agent = Agent::new(cfg, env.network(), seed)?;
        let buffer = ReplayBuffer::new(agent.cfg.train.buffer_capacity);
        Ok(Trainer {
            agent,
            env,
            buffer,
            seed,
            episodes: 0,
            env_steps: 0,
            updates: 0,
            policy_updates: 0,
            critic_updates: 0,
        })
    }

    pub fn env_seed(&self, episode: u64) -> u64 {
        mix_seed(self.seed, episode, ENV_STREAM)
    }

    /// Collect `count` episodes starting at the current counter, in parallel
    /// when more than one worker is configured. Results are in episode order.
    fn collect(&self, count: usize) -> Result<Vec<(Vec<StoredStep>, EpisodeSummary)>, AgentError> {
        let job = |k: usize| {
            let ep = self.episodes + k as u64;
            let mut env = self.env.clone();
            collect_episode(&self.agent, &mut env, ep, self.env_seed(ep), mix_seed(self.seed, ep, ACT_STREAM))
        };
        if count <= 1 || self.agent.cfg.train.workers <= 1 {
            return (0..count).map(job).collect();
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..count).map(|k| s.spawn(move || job(k))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(AgentError::Batch("rollout worker panicked".into()))))
                .collect()
        })
    }

    /// One replay update with a deterministic minibatch.
    pub fn update_once(&mut self, policy: bool, critic: bool) -> Result<UpdateReport, AgentError> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, self.updates, UPDATE_STREAM));
        let b = self.agent.cfg.train.batch_size;
        if self.buffer.len() < b {
            return Err(AgentError::Batch(format!("buffer holds {} transitions, batch needs {b}", self.buffer.len())));
        }
        let steps = self.buffer.sample(b, &mut rng)?;
        let batch = Batch::from_steps(&steps)?;
        let report = self.agent.update(&batch, policy, critic)?;
        self.updates += 1;
        self.policy_updates += policy as u64;
        self.critic_updates += critic as u64;
        Ok(report)
    }

    /// The updates that follow one collected episode.
    fn episode_updates(&mut self) -> Result<Vec<UpdateReport>, AgentError> {
        let tc = &self.agent.cfg.train;
        let (pu, cu, delay) = (tc.updates_per_episode, tc.critic_updates_per_episode, tc.critic_warmup_updates as u64);
        let mut reports = Vec::new();
        for u in 0..pu.max(cu) {
            let policy = u < pu && self.critic_updates >= delay;
            let critic = u < cu;
            if policy || critic {
                let r = self.update_once(policy, critic)?;
                if policy {
                    reports.push(r);
                }
            }
        }
        Ok(reports)
    }

    /// Collect up to `workers` episodes (never past `limit` in total), then
    /// update after each once warm-up is over.
    pub fn train_round(&mut self, limit: u64) -> Result<Vec<TrainLog>, AgentError> {
        let tc = self.agent.cfg.train.clone();
        let count = (tc.workers as u64).min(limit.saturating_sub(self.episodes)) as usize;
        let results = self.collect(count)?;
        let mut logs = Vec::with_capacity(count);
        for (steps, summary) in results {
            self.env_steps += steps.len() as u64;
            for s in steps {
                self.buffer.push(s);
            }
            self.episodes += 1;
            let due = self.episodes >= tc.warmup_episodes as u64;
            let buffer_short = due && self.buffer.len() < tc.batch_size;
            let reports = if due && !buffer_short { self.episode_updates()? } else { Vec::new() };
            let synced = self.episodes.is_multiple_of(tc.target_sync_episodes as u64);
            if synced {
                self.agent.sync_target()?;
            }
            logs.push(TrainLog {
                summary,
                updates: reports.len(),
                report: mean_report(&reports),
                target_synced: synced,
                buffer_short,
            });
        }
        Ok(logs)
    }

    /// Train until `episodes` episodes have been collected in total.
    pub fn train(&mut self, episodes: u64, mut on_log: impl FnMut(&TrainLog, &Trainer) -> Result<(), AgentError>) -> Result<(), AgentError> {
        while self.episodes < episodes {
            for log in self.train_round(episodes)? {
                on_log(&log, self)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint, AgentError> {
        let a = &self.agent;
        let meta = Meta {
            config: a.cfg.clone(),
            seed: self.seed,
            intersections: a.n,
        };
        let mut tensors = a.policy.named_tensors("policy/");
        tensors.extend(a.critic_params.named_tensors("critic/"));
        tensors.extend(a.target_params.named_tensors("target/"));
        tensors.extend(a.policy_opt.named_state(&a.policy, "policy_opt/"));
        tensors.extend(a.critic_opt.named_state(&a.critic_params, "critic_opt/"));
        if let Some(f) = &a.frozen {
            tensors.push(("frozen".into(), f.clone()));
        }
        tensors.extend(self.buffer.to_tensors("buffer/"));
        Ok(Checkpoint {
            config_hash: a.cfg.hash(),
            meta: serde_json::to_string(&meta)?,
            tensors,
            counters: vec![
                ("episodes".into(), self.episodes),
                ("env_steps".into(), self.env_steps),
                ("updates".into(), self.updates),
                ("policy_updates".into(), self.policy_updates),
                ("critic_updates".into(), self.critic_updates),
                ("policy_opt_step".into(), a.policy_opt.step),
                ("critic_opt_step".into(), a.critic_opt.step),
            ],
        })
    }

    /// Rebuild a trainer from a checkpoint against `env`.
    pub fn from_checkpoint(ck: &Checkpoint, env: TrafficEnv) -> Result<Self, AgentError> {
        let meta: Meta = serde_json::from_str(&ck.meta)?;
        if meta.config.hash() != ck.config_hash {
            return Err(AgentError::Checkpoint("configuration hash does not match its metadata".into()));
        }
        if meta.intersections != env.len() {
            return Err(AgentError::Checkpoint(format!(
                "checkpoint is for {} intersections, scenario has {}",
                meta.intersections,
                env.len()
            )));
        }
        let mut t = Trainer::new(meta.config, env, meta.seed)?;
        let strip = |prefix: &str| -> Vec<(String, Tensor)> {
            ck.tensors
                .iter()
                .filter_map(|(n, v)| n.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect()
        };
        let counter = |name: &str| ck.counter(name).ok_or_else(|| AgentError::Checkpoint(format!("missing counter {name}")));
        let a = &mut t.agent;
        a.policy.load_named(&strip("policy/"))?;
        a.critic_params.load_named(&strip("critic/"))?;
        a.target_params.load_named(&strip("target/"))?;
        a.policy_opt.load_state(&a.policy, "policy_opt/", &ck.tensors, counter("policy_opt_step")?)?;
        a.critic_opt.load_state(&a.critic_params, "critic_opt/", &ck.tensors, counter("critic_opt_step")?)?;
        if a.frozen.is_some() {
            a.frozen = Some(ck.tensor("frozen").cloned().ok_or_else(|| AgentError::Checkpoint("missing frozen matrix".into()))?);
        }
        t.buffer = ReplayBuffer::from_tensors(t.agent.cfg.train.buffer_capacity, "buffer/", &ck.tensors)?;
        t.episodes = counter("episodes")?;
        t.env_steps = counter("env_steps")?;
        t.updates = counter("updates")?;
        t.policy_updates = counter("policy_updates")?;
        t.critic_updates = counter("critic_updates")?;
        Ok(t)
    }
}

fn mean_report(reports: &[UpdateReport]) -> Option<UpdateReport> {
    if reports.is_empty() {
        return None;
    }
    let k = reports.len() as f64;
    let mut m = UpdateReport::default();
    for r in reports {
        m.actor_loss += r.actor_loss / k;
        m.cos_pg += r.cos_pg / k;
        m.diag += r.diag / k;
        m.sym += r.sym / k;
        m.policy_loss += r.policy_loss / k;
        m.critic_loss += r.critic_loss / k;
        m.mean_advantage += r.mean_advantage / k;
        m.policy_grad_norm += r.policy_grad_norm / k;
        m.critic_grad_norm += r.critic_grad_norm / k;
    }
    Some(m)
}
