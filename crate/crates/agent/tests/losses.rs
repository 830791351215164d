mod common;

use common::{grid_env, tiny_config};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsclab_agent::cos::constraint_terms;
use tsclab_agent::decision::td_targets;
use tsclab_agent::{collect_episode, Agent, Batch, LossTerms, MatrixMode, StoredStep};
use tsclab_nn::gradcheck::{rel_err, FD_STEP};
use tsclab_nn::tape::plackett_luce;
use tsclab_nn::{ParamStore, Tape};

const TOL: f64 = 1e-4;

fn rollout(agent: &Agent, seed: u64) -> Vec<StoredStep> {
    let mut env = grid_env(2, 2, 2.0, 300);
    collect_episode(agent, &mut env, 0, seed, seed + 100).unwrap().0
}

fn batch_of(steps: &[StoredStep], picks: &[usize]) -> Batch {
    let refs: Vec<&StoredStep> = picks.iter().map(|&i| &steps[i]).collect();
    Batch::from_steps(&refs).unwrap()
}

fn random_adv(rows: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn total_loss(agent: &Agent, batch: &Batch, adv: &[f64], terms: LossTerms) -> f64 {
    let mut tape = Tape::new();
    let l = agent.policy_loss(&mut tape, batch, adv, terms).unwrap();
    tape.value(l.total).item()
}

/// Worst relative error between tape gradients and central differences over
/// at most `per_param` entries of every policy parameter.
fn policy_grad_error(agent: &mut Agent, batch: &Batch, adv: &[f64], terms: LossTerms, per_param: usize) -> (f64, String) {
    let mut tape = Tape::new();
    let l = agent.policy_loss(&mut tape, batch, adv, terms).unwrap();
    let grads = tape.backward(l.total).unwrap();
    let ids: Vec<_> = agent.policy.ids().collect();
    let mut worst = (0.0, String::new());
    for id in ids {
        let g = grads.get(&agent.policy, id);
        let stride = (g.len() / per_param).max(1);
        for k in (0..g.len()).step_by(stride) {
            let orig = agent.policy.get(id).data[k];
            agent.policy.get_mut(id).data[k] = orig + FD_STEP;
            let up = total_loss(agent, batch, adv, terms);
            agent.policy.get_mut(id).data[k] = orig - FD_STEP;
            let down = total_loss(agent, batch, adv, terms);
            agent.policy.get_mut(id).data[k] = orig;
            let e = rel_err(g.data[k], (up - down) / (2.0 * FD_STEP), 1e-3);
            if e > worst.0 {
                worst = (e, format!("{}[{k}]", agent.policy.name(id)));
            }
        }
    }
    worst
}

#[test]
fn composed_policy_objective_matches_finite_differences() {
    let env = grid_env(2, 2, 2.0, 300);
    for seed in 0..3 {
        let mut agent = Agent::new(tiny_config(MatrixMode::Learned), env.network(), seed).unwrap();
        let steps = rollout(&agent, seed);
        let batch = batch_of(&steps, &[2, 9, 15]);
        let adv = random_adv(batch.rows(), seed);
        let terms = LossTerms::from_config(&agent.cfg);
        let (err, at) = policy_grad_error(&mut agent, &batch, &adv, terms, 6);
        assert!(err < TOL, "seed {seed}: rel err {err} at {at}");
    }
}

#[test]
fn ablated_extractors_match_finite_differences() {
    let env = grid_env(2, 2, 2.0, 300);
    for (frap, transformer) in [(false, true), (true, false), (false, false)] {
        let mut cfg = tiny_config(MatrixMode::Learned);
        cfg.model.use_frap = frap;
        cfg.model.use_transformer = transformer;
        let mut agent = Agent::new(cfg, env.network(), 7).unwrap();
        let steps = rollout(&agent, 7);
        let batch = batch_of(&steps, &[4, 11]);
        let adv = random_adv(batch.rows(), 7);
        let terms = LossTerms::from_config(&agent.cfg);
        let (err, at) = policy_grad_error(&mut agent, &batch, &adv, terms, 6);
        assert!(err < TOL, "frap {frap} transformer {transformer}: rel err {err} at {at}");
    }
}

#[test]
fn critic_loss_matches_finite_differences() {
    let env = grid_env(2, 2, 2.0, 300);
    let agent = Agent::new(tiny_config(MatrixMode::Learned), env.network(), 3).unwrap();
    let steps = rollout(&agent, 3);
    let batch = batch_of(&steps, &[1, 6, 13]);
    let y = agent.batch_targets(&batch).unwrap();
    let x = agent.critic_input(&batch.obs);
    let loss = |store: &ParamStore, tape: &mut Tape| {
        let xv = tape.constant(x.clone());
        let q = agent.critic.q_values(tape, store, xv).unwrap();
        tsclab_agent::decision::critic_loss(tape, q, &batch.actions, &y).unwrap()
    };
    let mut store = agent.critic_params.clone();
    let mut tape = Tape::new();
    let l = loss(&store, &mut tape);
    let grads = tape.backward(l).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let g = grads.get(&store, id);
        for k in (0..g.len()).step_by((g.len() / 8).max(1)) {
            let orig = store.get(id).data[k];
            let mut eval = |v: f64| {
                store.get_mut(id).data[k] = v;
                let mut t = Tape::new();
                let l = loss(&store, &mut t);
                t.value(l).item()
            };
            let numeric = (eval(orig + FD_STEP) - eval(orig - FD_STEP)) / (2.0 * FD_STEP);
            store.get_mut(id).data[k] = orig;
            assert!(rel_err(g.data[k], numeric, 1e-3) < TOL, "{}[{k}]", store.name(id));
        }
    }
}

#[test]
fn fresh_policy_ratios_are_exactly_one() {
    let env = grid_env(2, 2, 2.0, 300);
    let agent = Agent::new(tiny_config(MatrixMode::Learned), env.network(), 5).unwrap();
    let steps = rollout(&agent, 5);
    let batch = batch_of(&steps, &[0, 8, 19]);
    let adv = random_adv(batch.rows(), 5);
    let mut tape = Tape::new();
    let l = agent.policy_loss(&mut tape, &batch, &adv, LossTerms::from_config(&agent.cfg)).unwrap();
    let mean = adv.iter().sum::<f64>() / adv.len() as f64;
    assert_eq!(tape.value(l.actor).item(), -mean);
    assert_eq!(tape.value(l.cos_pg).item(), -mean);
}

/// Hand assembly of the policy objective from the matrix values, the stored
/// behaviour log-probabilities and the clip range.
fn hand_objective(agent: &Agent, batch: &Batch, adv: &[f64], m: &tsclab_nn::Tensor, actor: f64, w: (f64, f64)) -> f64 {
    let n = agent.n;
    let c = agent.cfg.train.clip;
    let mut pg = 0.0;
    for r in 0..batch.rows() {
        let lp = plackett_luce(m.row(r), &batch.ids[r]);
        let ratio = (lp - batch.cos_logprob[r]).exp();
        pg += (ratio * adv[r]).min(ratio.clamp(1.0 - c, 1.0 + c) * adv[r]);
    }
    let pg = -pg / batch.rows() as f64;
    let (mut diag, mut sym) = (0.0, 0.0);
    for b in 0..batch.size {
        let (d, s) = constraint_terms(&m.data[b * n * n..(b + 1) * n * n], n);
        diag += d;
        sym += s;
    }
    let blocks = batch.size as f64;
    actor + pg - w.0 * diag / blocks + w.1 * sym / blocks
}

#[test]
fn policy_objective_recombines_from_its_terms() {
    let env = grid_env(2, 2, 2.0, 300);
    let mut agent = Agent::new(tiny_config(MatrixMode::Learned), env.network(), 11).unwrap();
    let steps = rollout(&agent, 11);
    let batch = batch_of(&steps, &[3, 5, 17]);
    let adv = random_adv(batch.rows(), 11);
    // Move away from the behaviour policy so ratios differ from one.
    for _ in 0..3 {
        agent.policy_step(&batch, &adv, LossTerms::from_config(&agent.cfg)).unwrap();
    }
    for w in [(1.0, 1.0), (0.0, 0.0), (2.5, 0.5)] {
        let terms = LossTerms {
            actor: true,
            cos_pg: true,
            w_diag: w.0,
            w_sym: w.1,
        };
        let mut tape = Tape::new();
        let l = agent.policy_loss(&mut tape, &batch, &adv, terms).unwrap();
        let m = tape.value(l.matrix.unwrap()).clone();
        let expect = hand_objective(&agent, &batch, &adv, &m, tape.value(l.actor).item(), w);
        let total = tape.value(l.total).item();
        assert!((total - expect).abs() < 1e-10, "weights {w:?}: {total} vs {expect}");
    }
}

#[test]
fn diagonal_term_alone_raises_the_trace() {
    let env = grid_env(2, 2, 2.0, 300);
    let mut agent = Agent::new(tiny_config(MatrixMode::Learned), env.network(), 2).unwrap();
    let steps = rollout(&agent, 2);
    let batch = batch_of(&steps, &[1, 10]);
    let adv = vec![0.0; batch.rows()];
    let terms = LossTerms {
        actor: false,
        cos_pg: false,
        w_diag: 1.0,
        w_sym: 0.0,
    };
    let diag = |a: &Agent| {
        let mut t = Tape::new();
        let l = a.policy_loss(&mut t, &batch, &adv, terms).unwrap();
        t.value(l.diag).item()
    };
    let before = diag(&agent);
    agent.policy_step(&batch, &adv, terms).unwrap();
    assert!(diag(&agent) > before);
}

#[test]
fn matrix_rows_stay_stochastic_after_updates() {
    let env = grid_env(2, 2, 2.0, 300);
    let mut agent = Agent::new(tiny_config(MatrixMode::Learned), env.network(), 4).unwrap();
    let steps = rollout(&agent, 4);
    let batch = batch_of(&steps, &[0, 7, 14]);
    for _ in 0..5 {
        agent.update(&batch, true, true).unwrap();
    }
    let mut tape = Tape::new();
    let l = agent.policy_loss(&mut tape, &batch, &vec![0.0; batch.rows()], LossTerms::from_config(&agent.cfg)).unwrap();
    let m = tape.value(l.matrix.unwrap());
    for r in 0..m.rows {
        assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn targets_match_hand_composition() {
    let env = grid_env(2, 2, 2.0, 300);
    let mut cfg = tiny_config(MatrixMode::Learned);
    cfg.train.gamma = 0.7;
    let mut agent = Agent::new(cfg, env.network(), 9).unwrap();
    let steps = rollout(&agent, 9);
    let batch = batch_of(&steps, &[2, 19]);
    // Separate the target from the online critic first.
    agent.update(&batch, false, true).unwrap();
    let y = agent.batch_targets(&batch).unwrap();
    let q_next = agent.critic.eval(&agent.target_params, &agent.critic_input(&batch.next_obs)).unwrap();
    for r in 0..batch.rows() {
        let best = q_next.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let expect = if batch.done[r] { batch.rewards[r] } else { batch.rewards[r] + 0.7 * best };
        assert!((y[r] - expect).abs() < 1e-12);
    }
    assert!(batch.done[batch.rows() - 1]);
    assert_eq!(td_targets(&batch.rewards, &batch.done, &q_next, 0.0), batch.rewards);
}
