//! Collaborator-conditioned recurrent actor, per-intersection action-value
//! critic, and the actor and critic losses.

use crate::cos::OUTPUT_INIT;
use crate::AgentError;
use rand::Rng;
use tsclab_core::PHASES;
use tsclab_nn::{Dense, GruCell, NnError, ParamStore, Tape, Tensor, Var};

/// Actor: dense, GRU, dense, then phase logits. The last layer starts near
/// zero so the initial policy is close to uniform.
#[derive(Clone, Debug)]
pub struct Actor {
    pub input: Dense,
    pub gru: GruCell,
    pub mid: Dense,
    pub out: Dense,
}

impl Actor {
    pub fn new(store: &mut ParamStore, input: usize, hidden: usize, gru: usize, mid: usize, rng: &mut impl Rng) -> Self {
        Actor {
            input: Dense::new(store, "actor.input", input, hidden, rng),
            gru: GruCell::new(store, "actor.gru", hidden, gru, rng),
            mid: Dense::new(store, "actor.mid", gru, mid, rng),
            out: Dense::uniform(store, "actor.out", mid, PHASES, OUTPUT_INIT, rng),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.hidden
    }

    /// `(logits, next hidden)` for stacked inputs and hidden states.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<(Var, Var), NnError> {
        let a = self.input.forward(tape, store, x)?;
        let a = tape.relu(a);
        let h1 = self.gru.forward(tape, store, a, h)?;
        let m = self.mid.forward(tape, store, h1)?;
        let m = tape.relu(m);
        let logits = self.out.forward(tape, store, m)?;
        Ok((logits, h1))
    }
}

/// Critic over the flattened scaled observation, eight action values.
#[derive(Clone, Debug)]
pub struct Critic {
    pub hidden: Dense,
    pub out: Dense,
}

impl Critic {
    pub fn new(store: &mut ParamStore, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Critic {
            hidden: Dense::new(store, "critic.hidden", input, hidden, rng),
            out: Dense::new(store, "critic.out", hidden, PHASES, rng),
        }
    }

    pub fn q_values(&self, tape: &mut Tape, store: &ParamStore, obs: Var) -> Result<Var, NnError> {
        let h = self.hidden.forward(tape, store, obs)?;
        let h = tape.relu(h);
        self.out.forward(tape, store, h)
    }

    /// Forward pass without recording gradients of interest.
    pub fn eval(&self, store: &ParamStore, obs: &Tensor) -> Result<Tensor, NnError> {
        let mut tape = Tape::new();
        let x = tape.constant(obs.clone());
        let q = self.q_values(&mut tape, store, x)?;
        Ok(tape.value(q).clone())
    }
}

/// `y = r + γ·(1 − done)·max_a Q̃(o′, a)` per row.
pub fn td_targets(rewards: &[f64], done: &[bool], q_next: &Tensor, gamma: f64) -> Vec<f64> {
    rewards
        .iter()
        .zip(done)
        .enumerate()
        .map(|(r, (&rew, &d))| {
            if d {
                rew
            } else {
                let best = q_next.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                rew + gamma * best
            }
        })
        .collect()
}

/// `Q(o, a) − mean_a Q(o, a)`, or `Q(o, a)` itself when `raw_q`. With
/// `normalize_groups = Some(n)` rows are standardised within each
/// intersection, row `r` belonging to intersection `r % n`.
pub fn advantages(q: &Tensor, actions: &[usize], raw_q: bool, normalize_groups: Option<usize>) -> Vec<f64> {
    let mut adv: Vec<f64> = actions
        .iter()
        .enumerate()
        .map(|(r, &a)| {
            let row = q.row(r);
            let qa = row[a];
            if raw_q {
                qa
            } else {
                qa - row.iter().sum::<f64>() / row.len() as f64
            }
        })
        .collect();
    if let Some(n) = normalize_groups.filter(|&n| n > 0) {
        for g in 0..n {
            let idx: Vec<usize> = (g..adv.len()).step_by(n).collect();
            if idx.len() < 2 {
                continue;
            }
            let m = idx.len() as f64;
            let mean = idx.iter().map(|&i| adv[i]).sum::<f64>() / m;
            let var = idx.iter().map(|&i| (adv[i] - mean).powi(2)).sum::<f64>() / m;
            let sd = var.sqrt().max(1e-8);
            for i in idx {
                adv[i] = (adv[i] - mean) / sd;
            }
        }
    }
    adv
}

/// `−mean(min(ρ·A, clip(ρ, 1 ± c)·A))` with `ρ = exp(logp − old)`; without a
/// clip range the surrogate is `−mean(ρ·A)`.
pub fn actor_loss(tape: &mut Tape, logp: Var, old_logp: &[f64], adv: &[f64], clip: Option<f64>) -> Result<Var, AgentError> {
    let rows = tape.value(logp).rows;
    if rows == 0 || old_logp.len() != rows || adv.len() != rows {
        return Err(AgentError::Batch(format!("actor loss over {rows} rows with {} old logprobs and {} advantages", old_logp.len(), adv.len())));
    }
    let old = tape.constant(Tensor::column(old_logp.to_vec()));
    let a = tape.constant(Tensor::column(adv.to_vec()));
    let diff = tape.sub(logp, old)?;
    let ratio = tape.exp(diff);
    let surr = tape.mul(ratio, a)?;
    let obj = match clip {
        Some(c) => {
            let clipped = tape.clamp(ratio, 1.0 - c, 1.0 + c);
            let surr2 = tape.mul(clipped, a)?;
            tape.minimum(surr, surr2)?
        }
        None => surr,
    };
    let m = tape.mean(obj);
    Ok(tape.scale(m, -1.0))
}

/// `mean((Q(o, a) − y)²)`.
pub fn critic_loss(tape: &mut Tape, q: Var, actions: &[usize], y: &[f64]) -> Result<Var, AgentError> {
    let rows = tape.value(q).rows;
    if rows == 0 || actions.len() != rows || y.len() != rows {
        return Err(AgentError::Batch(format!("critic loss over {rows} rows with {} actions and {} targets", actions.len(), y.len())));
    }
    let qa = tape.pick_per_row(q, actions.to_vec())?;
    let t = tape.constant(Tensor::column(y.to_vec()));
    let d = tape.sub(qa, t)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}
