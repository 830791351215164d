//! The full agent: shared extractor, collaborator head and actor in one
//! parameter store, plus an online and a target critic.

use crate::buffer::Batch;
use crate::config::{AgentConfig, MatrixMode};
use crate::cos::{diag_term, eval_topk, fixed_hop_sets, sample_topk, sym_term, team_groups, CosHead, Selection};
use crate::decision::{actor_loss, advantages, critic_loss, td_targets, Actor, Critic};
use crate::features::{observation_tensor, Extractor};
use crate::AgentError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsclab_core::{Observation, RoadNetwork, CONTROLLED_MOVEMENTS, FEATURES, PHASES};
use tsclab_nn::dist::categorical_sample;
use tsclab_nn::tensor::{log_softmax_row, softmax_row};
use tsclab_nn::{AdamW, ParamStore, Tape, Tensor, Var};

/// Stochastic rollout or deterministic evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Greedy,
}

/// Decisions for every intersection at one control step.
#[derive(Clone, Debug)]
pub struct ActOutput {
    pub ids: Vec<Vec<usize>>,
    pub cos_logprob: Vec<f64>,
    pub actions: Vec<usize>,
    pub logprob: Vec<f64>,
    pub next_hidden: Tensor,
    /// Collaborator matrix `N×N`, or the uniform-over-set matrix for fixed
    /// neighbourhoods.
    pub matrix: Tensor,
    pub embeddings: Tensor,
}

/// Which parts of the policy objective are active.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub actor: bool,
    pub cos_pg: bool,
    pub w_diag: f64,
    pub w_sym: f64,
}

impl LossTerms {
    pub fn from_config(cfg: &AgentConfig) -> Self {
        LossTerms {
            actor: true,
            cos_pg: true,
            w_diag: cfg.train.w_diag,
            w_sym: cfg.train.w_sym,
        }
    }
}

/// Tape handles of the policy objective and its parts.
#[derive(Clone, Copy, Debug)]
pub struct PolicyLoss {
    pub total: Var,
    pub actor: Var,
    pub cos_pg: Var,
    pub diag: Var,
    pub sym: Var,
    pub matrix: Option<Var>,
}

/// Scalar summary of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateReport {
    pub actor_loss: f64,
    pub cos_pg: f64,
    pub diag: f64,
    pub sym: f64,
    pub policy_loss: f64,
    pub critic_loss: f64,
    pub mean_advantage: f64,
    pub policy_grad_norm: f64,
    pub critic_grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub cfg: AgentConfig,
    pub n: usize,
    pub policy: ParamStore,
    pub critic_params: ParamStore,
    pub target_params: ParamStore,
    pub extractor: Extractor,
    pub cos: CosHead,
    pub actor: Actor,
    pub critic: Critic,
    pub policy_opt: AdamW,
    pub critic_opt: AdamW,
    /// Row-stochastic matrix drawn at construction for the frozen mode.
    pub frozen: Option<Tensor>,
    pub hop_sets: Vec<Vec<usize>>,
}

impl Agent {
    pub fn new(cfg: AgentConfig, net: &RoadNetwork, seed: u64) -> Result<Self, AgentError> {
        let n = net.len();
        cfg.validate(n)?;
        let m = &cfg.model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut policy = ParamStore::new();
        let extractor = Extractor::new(&mut policy, m, n, &mut rng)?;
        let cos = CosHead::new(&mut policy, m.repr_dim, m.cos_hidden, n, &mut rng);
        let actor = Actor::new(&mut policy, 2 * m.repr_dim, m.actor_hidden, m.gru_hidden, m.actor_out_hidden, &mut rng);
        let mut critic_params = ParamStore::new();
        let critic = Critic::new(&mut critic_params, CONTROLLED_MOVEMENTS * FEATURES, m.critic_hidden, &mut rng);
        let target_params = critic_params.clone();
        let frozen = match m.matrix {
            MatrixMode::RandomFrozen => {
                let logits = Tensor::uniform(n, n, 3.0, &mut rng);
                let mut probs = Tensor::zeros(n, n);
                for r in 0..n {
                    softmax_row(logits.row(r), &mut probs.data[r * n..(r + 1) * n]);
                }
                Some(probs)
            }
            _ => None,
        };
        let hop_sets = match m.matrix {
            MatrixMode::FixedHop { radius } => fixed_hop_sets(net, radius),
            _ => Vec::new(),
        };
        let policy_opt = AdamW::new(&policy, cfg.train.optim);
        let critic_opt = AdamW::new(&critic_params, cfg.train.optim);
        Ok(Agent {
            cfg,
            n,
            policy,
            critic_params,
            target_params,
            extractor,
            cos,
            actor,
            critic,
            policy_opt,
            critic_opt,
            frozen,
            hop_sets,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.actor.hidden_dim()
    }

    /// Zero actor state for a fresh episode, `N×H`.
    pub fn initial_hidden(&self) -> Tensor {
        Tensor::zeros(self.n, self.hidden_dim())
    }

    /// Intersection representations `(B·N)×d` of a batch of joint observations.
    pub fn encode(&self, tape: &mut Tape, batch: &[&[Observation]]) -> Result<Var, AgentError> {
        for joint in batch {
            if joint.len() != self.n {
                return Err(AgentError::Batch(format!("expected {} observations, got {}", self.n, joint.len())));
            }
        }
        let x = tape.constant(observation_tensor(batch, &self.cfg.model.obs_scale));
        Ok(self.extractor.forward(tape, &self.policy, x)?)
    }

    /// Collaborator matrix rows `(B·N)×N`; `None` for fixed neighbourhoods.
    pub fn matrix_var(&self, tape: &mut Tape, e_ir: Var) -> Result<Option<Var>, AgentError> {
        match self.cfg.model.matrix {
            MatrixMode::Learned => Ok(Some(self.cos.matrix(tape, &self.policy, e_ir)?)),
            MatrixMode::RandomFrozen => {
                let f = self.frozen.as_ref().ok_or_else(|| AgentError::Config("missing frozen matrix".into()))?;
                let blocks = tape.value(e_ir).rows / self.n;
                let mut data = Vec::with_capacity(blocks * f.data.len());
                for _ in 0..blocks {
                    data.extend(&f.data);
                }
                Ok(Some(tape.constant(Tensor {
                    rows: blocks * self.n,
                    cols: self.n,
                    data,
                })))
            }
            MatrixMode::FixedHop { .. } => Ok(None),
        }
    }

    fn hop_matrix(&self) -> Tensor {
        let mut t = Tensor::zeros(self.n, self.n);
        for (i, set) in self.hop_sets.iter().enumerate() {
            for &j in set {
                t.set(i, j, 1.0 / set.len() as f64);
            }
        }
        t
    }

    /// Collaborators of row `r` (intersection `r mod N`).
    pub fn select(&self, probs: Option<&[f64]>, r: usize, mode: ActMode, rng: &mut impl Rng) -> Result<Selection, AgentError> {
        match probs {
            None => Ok(Selection {
                ids: self.hop_sets[r % self.n].clone(),
                logprob: 0.0,
            }),
            Some(p) => match mode {
                ActMode::Sample => sample_topk(p, self.cfg.model.k, rng),
                ActMode::Greedy => eval_topk(p, self.cfg.model.k),
            },
        }
    }

    /// Mean of each row's collaborators, or zeros without team input.
    pub fn team(&self, tape: &mut Tape, e_ir: Var, ids: &[Vec<usize>]) -> Result<Var, AgentError> {
        if !self.cfg.model.use_team {
            let (r, c) = tape.value(e_ir).shape();
            return Ok(tape.constant(Tensor::zeros(r, c)));
        }
        Ok(tape.gather_mean(e_ir, team_groups(ids, self.n))?)
    }

    /// Actor logits `(B·N)×8` and next hidden state.
    pub fn actor_forward(&self, tape: &mut Tape, e_ir: Var, team: Var, hidden: &Tensor) -> Result<(Var, Var), AgentError> {
        let x = tape.concat_cols(&[e_ir, team])?;
        let h = tape.constant(hidden.clone());
        Ok(self.actor.forward(tape, &self.policy, x, h)?)
    }

    /// One decision for every intersection.
    pub fn act(&self, obs: &[Observation], hidden: &Tensor, mode: ActMode, rng: &mut impl Rng) -> Result<ActOutput, AgentError> {
        let mut tape = Tape::new();
        let e_ir = self.encode(&mut tape, &[obs])?;
        let m = self.matrix_var(&mut tape, e_ir)?;
        let matrix = match m {
            Some(v) => tape.value(v).clone(),
            None => self.hop_matrix(),
        };
        let mut ids = Vec::with_capacity(self.n);
        let mut cos_logprob = Vec::with_capacity(self.n);
        for r in 0..self.n {
            let sel = self.select(m.map(|_| matrix.row(r)), r, mode, rng)?;
            ids.push(sel.ids);
            cos_logprob.push(sel.logprob);
        }
        let team = self.team(&mut tape, e_ir, &ids)?;
        let (logits, h1) = self.actor_forward(&mut tape, e_ir, team, hidden)?;
        let lv = tape.value(logits);
        let mut actions = Vec::with_capacity(self.n);
        let mut logprob = Vec::with_capacity(self.n);
        let mut probs = [0.0; PHASES];
        let mut logp = [0.0; PHASES];
        for r in 0..self.n {
            softmax_row(lv.row(r), &mut probs);
            log_softmax_row(lv.row(r), &mut logp);
            let a = match mode {
                ActMode::Greedy => argmax(&probs),
                ActMode::Sample => {
                    if self.cfg.train.epsilon > 0.0 && rng.random::<f64>() < self.cfg.train.epsilon {
                        rng.random_range(0..PHASES)
                    } else {
                        categorical_sample(&probs, rng)?
                    }
                }
            };
            actions.push(a);
            logprob.push(logp[a]);
        }
        Ok(ActOutput {
            ids,
            cos_logprob,
            actions,
            logprob,
            next_hidden: tape.value(h1).clone(),
            matrix,
            embeddings: tape.value(e_ir).clone(),
        })
    }

    /// Scaled flattened observations `(B·N)×56` for the critic.
    pub fn critic_input(&self, batch: &[Vec<Observation>]) -> Tensor {
        let refs: Vec<&[Observation]> = batch.iter().map(|b| b.as_slice()).collect();
        let t = observation_tensor(&refs, &self.cfg.model.obs_scale);
        Tensor {
            rows: t.rows / CONTROLLED_MOVEMENTS,
            cols: CONTROLLED_MOVEMENTS * FEATURES,
            data: t.data,
        }
    }

    /// Advantage of each stored action under the online critic.
    pub fn batch_advantages(&self, batch: &Batch) -> Result<Vec<f64>, AgentError> {
        let q = self.critic.eval(&self.critic_params, &self.critic_input(&batch.obs))?;
        Ok(advantages(&q, &batch.actions, self.cfg.train.raw_q, self.cfg.train.adv_norm.then_some(self.n)))
    }

    /// Record the policy objective for `batch` on `tape`.
    pub fn policy_loss(&self, tape: &mut Tape, batch: &Batch, adv: &[f64], terms: LossTerms) -> Result<PolicyLoss, AgentError> {
        let refs: Vec<&[Observation]> = batch.obs.iter().map(|b| b.as_slice()).collect();
        let e_ir = self.encode(tape, &refs)?;
        let zero = tape.constant(Tensor::scalar(0.0));
        let learned = self.cfg.model.matrix == MatrixMode::Learned;
        let matrix = if learned { self.matrix_var(tape, e_ir)? } else { None };
        let clip = (!self.cfg.train.no_clip).then_some(self.cfg.train.clip);
        let (cos_pg, diag, sym) = match matrix {
            Some(m) => {
                let lp = tape.plackett_luce_logprob(m, batch.ids.clone())?;
                let pg = actor_loss(tape, lp, &batch.cos_logprob, adv, clip)?;
                (pg, diag_term(tape, m, self.n)?, sym_term(tape, m, self.n)?)
            }
            None => (zero, zero, zero),
        };
        let team = self.team(tape, e_ir, &batch.ids)?;
        let (logits, _) = self.actor_forward(tape, e_ir, team, &batch.hidden)?;
        let logp_all = tape.log_softmax(logits);
        let logp = tape.pick_per_row(logp_all, batch.actions.clone())?;
        let actor = actor_loss(tape, logp, &batch.logprob, adv, clip)?;
        let mut parts = Vec::new();
        if terms.actor {
            parts.push(actor);
        }
        if matrix.is_some() {
            if terms.cos_pg {
                parts.push(cos_pg);
            }
            if terms.w_diag != 0.0 {
                parts.push(tape.scale(diag, -terms.w_diag));
            }
            if terms.w_sym != 0.0 {
                parts.push(tape.scale(sym, terms.w_sym));
            }
        }
        let mut total = zero;
        for p in parts {
            total = tape.add(total, p)?;
        }
        Ok(PolicyLoss {
            total,
            actor,
            cos_pg,
            diag,
            sym,
            matrix,
        })
    }

    /// One optimizer step on the policy objective; returns the pre-step
    /// values and the gradient norm.
    pub fn policy_step(&mut self, batch: &Batch, adv: &[f64], terms: LossTerms) -> Result<(UpdateReport, f64), AgentError> {
        let mut tape = Tape::new();
        let l = self.policy_loss(&mut tape, batch, adv, terms)?;
        let grads = tape.backward(l.total)?;
        let norm = self.policy_opt.apply(&mut self.policy, &grads)?;
        let v = |x: Var| tape.value(x).item();
        let report = UpdateReport {
            actor_loss: v(l.actor),
            cos_pg: v(l.cos_pg),
            diag: v(l.diag),
            sym: v(l.sym),
            policy_loss: v(l.total),
            policy_grad_norm: norm,
            ..UpdateReport::default()
        };
        Ok((report, norm))
    }

    /// TD targets from the target critic.
    pub fn batch_targets(&self, batch: &Batch) -> Result<Vec<f64>, AgentError> {
        let q_next = self.critic.eval(&self.target_params, &self.critic_input(&batch.next_obs))?;
        Ok(td_targets(&batch.rewards, &batch.done, &q_next, self.cfg.train.gamma))
    }

    /// One optimizer step on the critic; returns `(loss, grad norm)`.
    pub fn critic_step(&mut self, batch: &Batch) -> Result<(f64, f64), AgentError> {
        let y = self.batch_targets(batch)?;
        let mut tape = Tape::new();
        let x = tape.constant(self.critic_input(&batch.obs));
        let q = self.critic.q_values(&mut tape, &self.critic_params, x)?;
        let loss = critic_loss(&mut tape, q, &batch.actions, &y)?;
        let grads = tape.backward(loss)?;
        let norm = self.critic_opt.apply(&mut self.critic_params, &grads)?;
        Ok((tape.value(loss).item(), norm))
    }

    /// Policy then critic update on one batch; the policy objective uses
    /// advantages from the critic before its step.
    pub fn update(&mut self, batch: &Batch, policy: bool, critic: bool) -> Result<UpdateReport, AgentError> {
        let mut report = UpdateReport::default();
        if policy {
            let adv = self.batch_advantages(batch)?;
            report = self.policy_step(batch, &adv, LossTerms::from_config(&self.cfg))?.0;
            report.mean_advantage = adv.iter().sum::<f64>() / adv.len().max(1) as f64;
        }
        if critic {
            let (closs, cnorm) = self.critic_step(batch)?;
            report.critic_loss = closs;
            report.critic_grad_norm = cnorm;
        }
        Ok(report)
    }

    pub fn sync_target(&mut self) -> Result<(), AgentError> {
        Ok(self.target_params.copy_from(&self.critic_params)?)
    }
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}
