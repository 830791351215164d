//! Bounded replay of recent joint transitions with behaviour log-probabilities.

use crate::AgentError;
use rand::Rng;
use std::collections::VecDeque;
use tsclab_core::{Observation, CONTROLLED_MOVEMENTS, FEATURES};
use tsclab_nn::Tensor;

const OBS: usize = CONTROLLED_MOVEMENTS * FEATURES;

/// One control step of every intersection.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredStep {
    pub episode: u64,
    pub step: u32,
    pub obs: Vec<Observation>,
    /// Collaborators chosen by each intersection.
    pub ids: Vec<Vec<usize>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_obs: Vec<Observation>,
    pub done: bool,
    /// Actor hidden state before the step, `N·H` row-major.
    pub hidden: Vec<f64>,
    pub logprob: Vec<f64>,
    pub cos_logprob: Vec<f64>,
}

/// Ring of the most recent `capacity` joint steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<StoredStep>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, step: StoredStep) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(step);
    }

    pub fn iter(&self) -> impl Iterator<Item = &StoredStep> {
        self.items.iter()
    }

    /// `b` distinct stored steps, uniformly.
    pub fn sample(&self, b: usize, rng: &mut impl Rng) -> Result<Vec<&StoredStep>, AgentError> {
        if b == 0 || b > self.items.len() {
            return Err(AgentError::Batch(format!("cannot sample {b} of {} stored steps", self.items.len())));
        }
        let mut idx = rand::seq::index::sample(rng, self.items.len(), b).into_vec();
        idx.sort_unstable();
        Ok(idx.into_iter().map(|i| &self.items[i]).collect())
    }

    /// Flatten into named tensors; collaborator lists are padded with −1.
    pub fn to_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let s = self.items.len();
        let n = self.items.front().map_or(0, |x| x.obs.len());
        let h = self.items.front().map_or(0, |x| x.hidden.len() / n.max(1));
        let kmax = self.items.iter().flat_map(|x| x.ids.iter().map(|v| v.len())).max().unwrap_or(0);
        let mut obs = Vec::with_capacity(s * n * OBS);
        let mut next = Vec::with_capacity(s * n * OBS);
        let mut ids = Vec::with_capacity(s * n * kmax);
        let mut per_node = Vec::with_capacity(s * n * 4);
        let mut hidden = Vec::with_capacity(s * n * h);
        let mut meta = Vec::with_capacity(s * 3);
        for x in &self.items {
            for i in 0..n {
                obs.extend(x.obs[i].flat());
                next.extend(x.next_obs[i].flat());
                ids.extend((0..kmax).map(|j| x.ids[i].get(j).map_or(-1.0, |&v| v as f64)));
                per_node.extend([x.actions[i] as f64, x.rewards[i], x.logprob[i], x.cos_logprob[i]]);
            }
            hidden.extend_from_slice(&x.hidden);
            meta.extend([x.episode as f64, x.step as f64, if x.done { 1.0 } else { 0.0 }]);
        }
        let t = |rows, cols, data| Tensor { rows, cols, data };
        vec![
            (format!("{prefix}obs"), t(s * n, OBS, obs)),
            (format!("{prefix}next_obs"), t(s * n, OBS, next)),
            (format!("{prefix}ids"), t(s * n, kmax, ids)),
            (format!("{prefix}per_node"), t(s * n, 4, per_node)),
            (format!("{prefix}hidden"), t(s * n, h, hidden)),
            (format!("{prefix}meta"), t(s, 3, meta)),
        ]
    }

    /// Inverse of [`ReplayBuffer::to_tensors`].
    pub fn from_tensors(capacity: usize, prefix: &str, tensors: &[(String, Tensor)]) -> Result<Self, AgentError> {
        let get = |name: &str| {
            let key = format!("{prefix}{name}");
            tensors
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, t)| t)
                .ok_or_else(|| AgentError::Checkpoint(format!("missing tensor {key}")))
        };
        let meta = get("meta")?;
        let obs = get("obs")?;
        let next = get("next_obs")?;
        let ids = get("ids")?;
        let per_node = get("per_node")?;
        let hidden = get("hidden")?;
        let s = meta.rows;
        let mut buf = ReplayBuffer::new(capacity);
        if s == 0 {
            return Ok(buf);
        }
        let n = obs.rows / s;
        if obs.rows != s * n || next.rows != obs.rows || ids.rows != obs.rows || per_node.rows != obs.rows || hidden.rows != obs.rows {
            return Err(AgentError::Checkpoint("inconsistent replay tensors".into()));
        }
        let to_obs = |t: &Tensor, r: usize| {
            let mut o = Observation::zeros();
            for m in 0..CONTROLLED_MOVEMENTS {
                o.0[m].copy_from_slice(&t.row(r)[m * FEATURES..(m + 1) * FEATURES]);
            }
            o
        };
        for x in 0..s {
            let rows = x * n..(x + 1) * n;
            let m = meta.row(x);
            buf.push(StoredStep {
                episode: m[0] as u64,
                step: m[1] as u32,
                obs: rows.clone().map(|r| to_obs(obs, r)).collect(),
                ids: rows
                    .clone()
                    .map(|r| ids.row(r).iter().filter(|v| **v >= 0.0).map(|v| *v as usize).collect())
                    .collect(),
                actions: rows.clone().map(|r| per_node.get(r, 0) as usize).collect(),
                rewards: rows.clone().map(|r| per_node.get(r, 1)).collect(),
                next_obs: rows.clone().map(|r| to_obs(next, r)).collect(),
                done: m[2] != 0.0,
                hidden: rows.clone().flat_map(|r| hidden.row(r).to_vec()).collect(),
                logprob: rows.clone().map(|r| per_node.get(r, 2)).collect(),
                cos_logprob: rows.map(|r| per_node.get(r, 3)).collect(),
            });
        }
        Ok(buf)
    }
}

/// A sampled minibatch with per-intersection fields flattened to `B·N` rows.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub n: usize,
    pub obs: Vec<Vec<Observation>>,
    pub next_obs: Vec<Vec<Observation>>,
    pub ids: Vec<Vec<usize>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub done: Vec<bool>,
    pub hidden: Tensor,
    pub logprob: Vec<f64>,
    pub cos_logprob: Vec<f64>,
}

impl Batch {
    pub fn from_steps(steps: &[&StoredStep]) -> Result<Self, AgentError> {
        let first = steps.first().ok_or_else(|| AgentError::Batch("empty batch".into()))?;
        let n = first.obs.len();
        let h = first.hidden.len() / n.max(1);
        let rows = steps.len() * n;
        let mut b = Batch {
            size: steps.len(),
            n,
            obs: Vec::with_capacity(steps.len()),
            next_obs: Vec::with_capacity(steps.len()),
            ids: Vec::with_capacity(rows),
            actions: Vec::with_capacity(rows),
            rewards: Vec::with_capacity(rows),
            done: Vec::with_capacity(rows),
            hidden: Tensor::zeros(rows, h),
            logprob: Vec::with_capacity(rows),
            cos_logprob: Vec::with_capacity(rows),
        };
        b.hidden.data.clear();
        for s in steps {
            if s.obs.len() != n || s.hidden.len() != n * h {
                return Err(AgentError::Batch("steps disagree on network size".into()));
            }
            b.obs.push(s.obs.clone());
            b.next_obs.push(s.next_obs.clone());
            b.ids.extend(s.ids.iter().cloned());
            b.actions.extend(&s.actions);
            b.rewards.extend(&s.rewards);
            b.done.extend(std::iter::repeat_n(s.done, n));
            b.hidden.data.extend(&s.hidden);
            b.logprob.extend(&s.logprob);
            b.cos_logprob.extend(&s.cos_logprob);
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.size * self.n
    }
}
