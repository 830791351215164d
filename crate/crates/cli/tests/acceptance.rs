//! Acceptance suite. Runs every criterion in order, prints one PASS or FAIL
//! line per criterion and exits non-zero if any criterion fails.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::Instant;
use tsclab_agent::features::observation_tensor;
use tsclab_agent::{
    collect_episode, evaluate_controller, evaluate_policy, sample_topk, Agent, AgentConfig, Batch, LossTerms, MatrixMode,
    StoredStep, Trainer,
};
use tsclab_cli::commands::overlay;
use tsclab_core::{
    generate_scenario, EnvConfig, FixedTime, FtcConfig, GenOptions, MaxPressure, Observation, PhaseId, Scenario, Signal,
    SimConfig, SimState, TrafficEnv, CONTROLLED_MOVEMENTS, FEATURES, PHASES,
};
use tsclab_nn::dist::enumerate_ordered;
use tsclab_nn::gradcheck::{check, rel_err, FD_STEP};
use tsclab_nn::tensor::softmax_row;
use tsclab_nn::*;

const PRESET: &str = include_str!("../../../configs/grid2x2.json");

/// Absolute tolerance on each ordered-selection frequency.
const SAMPLING_TOL: f64 = 0.01;
const SAMPLING_SECONDS: f64 = 10.0;
const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: u64 = 20;
const GRAD_SECONDS: f64 = 60.0;
const CONSTRAINT_STEPS: usize = 50;
const SYM_REDUCTION: f64 = 0.9;
const BASELINE_SEEDS: u64 = 10;
const LEARN_EPISODES: u64 = 150;
const LEARN_SCALE: f64 = 2.0;
const LEARN_GAIN: f64 = 0.3;
const QUEUE_SLACK: f64 = 1.1;
const LEARN_SECONDS: f64 = 1800.0;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const SYMMETRY_TOL: f64 = 1e-12;
const DECOMPOSITION_TOL: f64 = 1e-12;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn scenario(rows: usize, cols: usize, scale: f64, seed: u64) -> Scenario {
    let opts = GenOptions {
        rows,
        cols,
        seed,
        demand_scale: scale,
        ..GenOptions::default()
    };
    let (file, demand) = generate_scenario(&opts).unwrap();
    Scenario::from_parts(&file, demand).unwrap()
}

fn env_of(sc: &Scenario, length: u32) -> TrafficEnv {
    let cfg = EnvConfig {
        sim: SimConfig {
            episode_length: length,
            ..SimConfig::default()
        },
        ..EnvConfig::default()
    };
    TrafficEnv::new(Arc::clone(&sc.net), Arc::clone(&sc.demand), cfg).unwrap()
}

fn preset() -> AgentConfig {
    overlay(&AgentConfig::default(), PRESET).unwrap()
}

/// A narrow model that keeps every component, for derivative checks.
fn tiny() -> AgentConfig {
    let mut cfg = AgentConfig::default();
    let m = &mut cfg.model;
    (m.feature_embed, m.relation_channels, m.pair_out_channels, m.repr_dim) = (2, 4, 2, 6);
    (m.model_dim, m.heads, m.encoder_layers, m.ff_dim) = (8, 2, 1, 8);
    (m.cos_hidden, m.actor_hidden, m.gru_hidden, m.actor_out_hidden, m.critic_hidden) = (6, 6, 5, 4, 6);
    m.k = 2;
    cfg
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; logits.len()];
    softmax_row(logits, &mut p);
    p
}

fn sampling_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws = 200_000;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = softmax(&logits);
        let exact = enumerate_ordered(&p, 2);
        assert_eq!(exact.len(), 12);
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        for _ in 0..draws {
            *counts.entry(sample_topk(&p, 2, &mut rng).unwrap().ids).or_default() += 1;
        }
        for (ids, q) in &exact {
            let f = *counts.get(ids).unwrap_or(&0) as f64 / draws as f64;
            worst = worst.max((f - q).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst < SAMPLING_TOL && secs < SAMPLING_SECONDS,
        format!("max |freq - exact| {worst:.5} (tol {SAMPLING_TOL}), {secs:.1} s (limit {SAMPLING_SECONDS} s)"),
    )
}

type Build = fn(&mut ParamStore, &mut ChaCha8Rng) -> Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var, NnError>>;

/// Random linear functional of `y` so every output entry matters.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, NnError> {
    let (r, c) = tape.value(y).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(Tensor::uniform(r, c, 1.0, &mut rng));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn layer_cases() -> Vec<(&'static str, Build)> {
    fn x(s: &mut ParamStore, rng: &mut ChaCha8Rng, r: usize, c: usize) -> ParamId {
        s.add("x", Tensor::uniform(r, c, 1.5, rng))
    }
    vec![
        ("dense", |s, rng| {
            let d = Dense::new(s, "d", 5, 3, rng);
            let x = x(s, rng, 4, 5);
            Box::new(move |t, s| {
                let xv = t.param(s, x);
                d.forward(t, s, xv)
            })
        }),
        ("conv1x1+relu", |s, rng| {
            let c: Conv1x1 = Dense::new(s, "c", 6, 4, rng);
            let x = x(s, rng, 12, 6);
            Box::new(move |t, s| {
                let xv = t.param(s, x);
                let y = c.forward(t, s, xv)?;
                Ok(t.relu(y))
            })
        }),
        ("layernorm", |s, rng| {
            let ln = LayerNorm::new(s, "ln", 6);
            *s.get_mut(ln.gamma) = Tensor::uniform(1, 6, 1.0, rng);
            *s.get_mut(ln.beta) = Tensor::uniform(1, 6, 1.0, rng);
            let x = x(s, rng, 3, 6);
            Box::new(move |t, s| {
                let xv = t.param(s, x);
                ln.forward(t, s, xv)
            })
        }),
        ("attention", |s, rng| {
            let m = MultiHeadAttention::new(s, "mha", 8, 4, rng).unwrap();
            let x = x(s, rng, 6, 8);
            Box::new(move |t, s| {
                let xv = t.param(s, x);
                m.forward(t, s, xv, 3)
            })
        }),
        ("encoder", |s, rng| {
            let e = EncoderLayer::new(s, "enc", 8, 2, 8, rng).unwrap();
            let x = x(s, rng, 6, 8);
            Box::new(move |t, s| {
                let xv = t.param(s, x);
                e.forward(t, s, xv, 3)
            })
        }),
        ("positional", |s, rng| {
            let p = PositionalEmbedding::new(s, "pos", 5, 4, rng);
            let x = x(s, rng, 6, 4);
            Box::new(move |t, s| {
                let xv = t.param(s, x);
                p.forward(t, s, xv, 3)
            })
        }),
        ("gru", |s, rng| {
            let g = GruCell::new(s, "gru", 3, 4, rng);
            let x = x(s, rng, 2, 3);
            let h = s.add("h", Tensor::uniform(2, 4, 1.0, rng));
            Box::new(move |t, s| {
                let xv = t.param(s, x);
                let hv = t.param(s, h);
                g.forward(t, s, xv, hv)
            })
        }),
        ("softmax+log_softmax", |s, rng| {
            let x = x(s, rng, 3, 5);
            Box::new(move |t, s| {
                let xv = t.param(s, x);
                let p = t.softmax(xv);
                let lp = t.log_softmax(xv);
                t.add(p, lp)
            })
        }),
    ]
}

fn rollout(agent: &Agent, env: &mut TrafficEnv, seed: u64) -> Vec<StoredStep> {
    collect_episode(agent, env, 0, seed, seed + 100).unwrap().0
}

fn batch_of(steps: &[StoredStep], picks: &[usize]) -> Batch {
    let refs: Vec<&StoredStep> = picks.iter().map(|&i| &steps[i]).collect();
    Batch::from_steps(&refs).unwrap()
}

fn policy_value(agent: &Agent, batch: &Batch, adv: &[f64], terms: LossTerms) -> f64 {
    let mut tape = Tape::new();
    let l = agent.policy_loss(&mut tape, batch, adv, terms).unwrap();
    tape.value(l.total).item()
}

/// Worst relative error of the policy objective over sampled entries of
/// every policy parameter.
fn policy_grad_error(agent: &mut Agent, batch: &Batch, adv: &[f64], terms: LossTerms) -> f64 {
    let mut tape = Tape::new();
    let l = agent.policy_loss(&mut tape, batch, adv, terms).unwrap();
    let grads = tape.backward(l.total).unwrap();
    let ids: Vec<_> = agent.policy.ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        let g = grads.get(&agent.policy, id);
        for k in (0..g.len()).step_by((g.len() / 4).max(1)) {
            let orig = agent.policy.get(id).data[k];
            agent.policy.get_mut(id).data[k] = orig + FD_STEP;
            let up = policy_value(agent, batch, adv, terms);
            agent.policy.get_mut(id).data[k] = orig - FD_STEP;
            let down = policy_value(agent, batch, adv, terms);
            agent.policy.get_mut(id).data[k] = orig;
            worst = worst.max(rel_err(g.data[k], (up - down) / (2.0 * FD_STEP), 1e-3));
        }
    }
    worst
}

fn critic_grad_error(agent: &Agent, batch: &Batch) -> f64 {
    let y = agent.batch_targets(batch).unwrap();
    let x = agent.critic_input(&batch.obs);
    let mut store = agent.critic_params.clone();
    let report = check(
        &mut store,
        |tape, store| {
            let xv = tape.constant(x.clone());
            let q = agent.critic.q_values(tape, store, xv)?;
            tsclab_agent::decision::critic_loss(tape, q, &batch.actions, &y).map_err(|e| NnError::Mismatch(e.to_string()))
        },
        Some(8),
    )
    .unwrap();
    report.max_rel_err
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut results: Vec<(String, f64)> = Vec::new();
    for (name, build) in layer_cases() {
        let mut worst = 0.0f64;
        for seed in 0..GRAD_INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let f = build(&mut store, &mut rng);
            let r = check(&mut store, |t, s| {
                let y = f(t, s)?;
                project(t, y, seed)
            }, Some(32))
            .unwrap();
            worst = worst.max(r.max_rel_err);
        }
        results.push((name.to_string(), worst));
    }

    let sc = scenario(2, 2, LEARN_SCALE, 0);
    let mut env = env_of(&sc, 300);
    let full = LossTerms::from_config(&tiny());
    let constraint = LossTerms {
        actor: false,
        cos_pg: false,
        w_diag: 1.0,
        w_sym: 1.0,
    };
    let actor = LossTerms {
        actor: true,
        cos_pg: false,
        w_diag: 0.0,
        w_sym: 0.0,
    };
    let mut worst = [0.0f64; 4];
    for seed in 0..GRAD_INSTANCES {
        let mut agent = Agent::new(tiny(), env.network(), seed).unwrap();
        let steps = rollout(&agent, &mut env, seed);
        let batch = batch_of(&steps, &[(seed as usize) % 10, 10 + (seed as usize) % 9]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adv: Vec<f64> = (0..batch.rows()).map(|_| rng.random_range(-2.0..2.0)).collect();
        // Move off the behaviour policy so clipping is exercised.
        agent.policy_step(&batch, &adv, full).unwrap();
        for (slot, terms) in [full, constraint, actor].into_iter().enumerate() {
            worst[slot] = worst[slot].max(policy_grad_error(&mut agent, &batch, &adv, terms));
        }
        worst[3] = worst[3].max(critic_grad_error(&agent, &batch));
    }
    for (name, w) in ["policy objective", "constraint loss", "actor loss", "critic loss"].iter().zip(worst) {
        results.push((name.to_string(), w));
    }
    let secs = start.elapsed().as_secs_f64();
    let (name, max) = results.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    ensure(
        max < GRAD_TOL && secs < GRAD_SECONDS,
        format!(
            "{} checks x {GRAD_INSTANCES} instances, max rel err {max:.2e} ({name}, tol {GRAD_TOL:e}), {secs:.1} s (limit {GRAD_SECONDS} s)",
            results.len()
        ),
    )
}

/// Agent with a strongly asymmetric collaborator head and a frozen batch.
fn constraint_setup() -> (Agent, Batch) {
    let sc = scenario(2, 2, LEARN_SCALE, 0);
    let mut env = env_of(&sc, 300);
    let mut agent = Agent::new(preset(), env.network(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for id in [agent.cos.out.w, agent.cos.out.b] {
        let (r, c) = agent.policy.get(id).shape();
        *agent.policy.get_mut(id) = Tensor::uniform(r, c, 1.0, &mut rng);
    }
    let steps = rollout(&agent, &mut env, 0);
    let batch = batch_of(&steps, &(0..steps.len()).step_by(2).collect::<Vec<_>>());
    (agent, batch)
}

/// One optimizer step that moves only the collaborator-selection head.
fn cos_step(agent: &mut Agent, batch: &Batch, terms: LossTerms) {
    let frozen: Vec<(ParamId, Tensor)> =
        agent.policy.ids().filter(|&id| !agent.policy.name(id).starts_with("cos.")).map(|id| (id, agent.policy.get(id).clone())).collect();
    agent.policy_step(batch, &vec![0.0; batch.rows()], terms).unwrap();
    for (id, t) in frozen {
        *agent.policy.get_mut(id) = t;
    }
}

fn terms_value(agent: &Agent, batch: &Batch, terms: LossTerms) -> (f64, f64) {
    let mut tape = Tape::new();
    let l = agent.policy_loss(&mut tape, batch, &vec![0.0; batch.rows()], terms).unwrap();
    (tape.value(l.diag).item(), tape.value(l.sym).item())
}

fn constraint_dynamics() -> Outcome {
    let diag_only = LossTerms {
        actor: false,
        cos_pg: false,
        w_diag: 1.0,
        w_sym: 0.0,
    };
    let sym_only = LossTerms {
        w_diag: 0.0,
        w_sym: 1.0,
        ..diag_only
    };
    let (mut agent, batch) = constraint_setup();
    let mut trace = vec![terms_value(&agent, &batch, diag_only).0];
    for _ in 0..CONSTRAINT_STEPS {
        cos_step(&mut agent, &batch, diag_only);
        trace.push(terms_value(&agent, &batch, diag_only).0);
    }
    let rising = trace.windows(2).filter(|w| w[1] > w[0]).count();

    let (mut agent, batch) = constraint_setup();
    let sym0 = terms_value(&agent, &batch, sym_only).1;
    for _ in 0..CONSTRAINT_STEPS {
        cos_step(&mut agent, &batch, sym_only);
    }
    let sym1 = terms_value(&agent, &batch, sym_only).1;
    let cut = 1.0 - sym1 / sym0;
    ensure(
        rising >= CONSTRAINT_STEPS - 1 && cut >= SYM_REDUCTION && sym0 > 0.0,
        format!(
            "trace rose on {rising}/{CONSTRAINT_STEPS} steps ({:.4} -> {:.4}); sym {sym0:.4e} -> {sym1:.4e} ({:.1}% cut, need {:.0}%)",
            trace[0],
            trace[CONSTRAINT_STEPS],
            100.0 * cut,
            100.0 * SYM_REDUCTION
        ),
    )
}

fn conservation() -> Outcome {
    let mut ticks = 0u64;
    let mut peak = 0u64;
    for seed in 0..10 {
        let sc = scenario(4, 4, 1.0, seed);
        let mut sim = SimState::new(sc.net.clone(), sc.demand.clone(), SimConfig { seed, ..SimConfig::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = sc.net.len();
        let mut signals = Vec::new();
        for t in 0..sim.config().episode_length {
            if t % 15 == 0 {
                signals = (0..n).map(|_| Signal::Phase(PhaseId(rng.random_range(0..PHASES as u8)))).collect();
            }
            sim.step(&signals).unwrap();
            if let Err(e) = sim.check_invariants() {
                return Err(format!("seed {seed} tick {t}: {e}"));
            }
            ticks += 1;
            peak = peak.max(sim.in_network());
        }
    }
    ensure(ticks == 36_000, format!("entered = exited + in network and lane capacity held on all {ticks} ticks (peak {peak} vehicles)"))
}

fn baseline_ordering() -> Outcome {
    let sc = scenario(4, 4, 1.0, 0);
    let mut env = env_of(&sc, 3600);
    let seeds: Vec<u64> = (0..BASELINE_SEEDS).collect();
    let mean = |reports: &[tsclab_core::EpisodeReport], f: fn(&tsclab_core::EpisodeReport) -> f64| {
        reports.iter().map(f).sum::<f64>() / reports.len() as f64
    };
    let mp = evaluate_controller(&mut MaxPressure, &mut env, &seeds).unwrap();
    let mut ftc = FixedTime {
        cfg: FtcConfig::seeded(env.len(), env.config().sim.control_interval, 0),
        base_seed: 0,
    };
    let fx = evaluate_controller(&mut ftc, &mut env, &seeds).unwrap();
    let (mt, ft) = (mean(&mp, |r| r.metrics.trip_time), mean(&fx, |r| r.metrics.trip_time));
    let (mq, fq) = (mean(&mp, |r| r.metrics.queue), mean(&fx, |r| r.metrics.queue));
    ensure(mt < ft && mq < fq, format!("trip time MP {mt:.2} vs FTC {ft:.2}; queue MP {mq:.3} vs FTC {fq:.3}"))
}

struct Run {
    rewards: Vec<f64>,
    eval_queue: f64,
    seconds: f64,
}

impl Run {
    fn head(&self) -> f64 {
        self.rewards[..10].iter().sum::<f64>() / 10.0
    }

    fn tail(&self) -> f64 {
        self.rewards[self.rewards.len() - 10..].iter().sum::<f64>() / 10.0
    }
}

fn learning_env() -> TrafficEnv {
    env_of(&scenario(2, 2, LEARN_SCALE, 0), 3600)
}

/// Cached training runs, shared between the learning and ablation checks.
fn run(matrix: MatrixMode, seed: u64) -> &'static Run {
    static RUNS: [OnceLock<Run>; 6] = [const { OnceLock::new() }; 6];
    let slot = 2 * seed as usize + usize::from(matrix == MatrixMode::RandomFrozen);
    RUNS[slot].get_or_init(|| {
        let start = Instant::now();
        let mut cfg = preset();
        cfg.model.matrix = matrix;
        let mut trainer = Trainer::new(cfg, learning_env(), seed).unwrap();
        let mut rewards = Vec::new();
        trainer
            .train(LEARN_EPISODES, |log, _| {
                rewards.push(log.summary.reward);
                Ok(())
            })
            .unwrap();
        let seconds = start.elapsed().as_secs_f64();
        let seeds: Vec<u64> = (1000..1000 + BASELINE_SEEDS).collect();
        let reports = evaluate_policy(&trainer.agent, &mut learning_env(), &seeds).unwrap();
        let eval_queue = reports.iter().map(|r| r.metrics.queue).sum::<f64>() / reports.len() as f64;
        Run {
            rewards,
            eval_queue,
            seconds,
        }
    })
}

fn learning_smoke() -> Outcome {
    let r = run(MatrixMode::Learned, 0);
    let gain = (r.tail() - r.head()) / r.head().abs();
    let seeds: Vec<u64> = (1000..1000 + BASELINE_SEEDS).collect();
    let mp = evaluate_controller(&mut MaxPressure, &mut learning_env(), &seeds).unwrap();
    let mp_queue = mp.iter().map(|r| r.metrics.queue).sum::<f64>() / mp.len() as f64;
    ensure(
        gain >= LEARN_GAIN && r.eval_queue <= QUEUE_SLACK * mp_queue && r.seconds <= LEARN_SECONDS,
        format!(
            "reward first-10 {:.1} -> last-10 {:.1} ({:+.1}%, need +{:.0}%); queue {:.3} vs MaxPressure {mp_queue:.3} (limit {:.3}); {LEARN_EPISODES} episodes in {:.0} s",
            r.head(),
            r.tail(),
            100.0 * gain,
            100.0 * LEARN_GAIN,
            r.eval_queue,
            QUEUE_SLACK * mp_queue,
            r.seconds
        ),
    )
}

fn ablation_direction() -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in ABLATION_SEEDS {
        let learned = run(MatrixMode::Learned, seed).tail();
        let frozen = run(MatrixMode::RandomFrozen, seed).tail();
        if frozen <= learned {
            wins += 1;
        }
        parts.push(format!("seed {seed}: learned {learned:.1} / random-frozen {frozen:.1}"));
    }
    ensure(wins * 2 > ABLATION_SEEDS.len(), format!("learned >= random-frozen on {wins}/{} seeds; {}", ABLATION_SEEDS.len(), parts.join("; ")))
}

const TINY_JSON: &str = r#"{
  "model": {"feature_embed": 2, "relation_channels": 4, "pair_out_channels": 2, "repr_dim": 6, "model_dim": 8,
            "heads": 2, "encoder_layers": 1, "ff_dim": 8, "cos_hidden": 6, "actor_hidden": 6, "gru_hidden": 5,
            "actor_out_hidden": 4, "critic_hidden": 6, "k": 2},
  "train": {"batch_size": 16, "buffer_capacity": 480, "warmup_episodes": 1, "target_sync_episodes": 2,
            "updates_per_episode": 2, "critic_updates_per_episode": 2, "eval_interval": 240}
}"#;

/// Run the full command sequence into `root`.
fn command_sequence(root: &Path) -> Result<(), String> {
    let cfg = root.join("tiny.json");
    std::fs::write(&cfg, TINY_JSON).map_err(|e| e.to_string())?;
    let sc = root.join("scenario/scenario.json");
    let ck = root.join("train/final.ckpt");
    let (sc, ck, cfg) = (sc.to_str().unwrap(), ck.to_str().unwrap(), cfg.to_str().unwrap());
    let steps: [&[&str]; 6] = [
        &["--name", "scenario", "gen-scenario", "grid", "2", "2", "--scale", "2", "--seed", "7"],
        &["--name", "train", "train", "--scenario", sc, "--config", cfg, "--episodes", "3", "--seed", "5"],
        &["--name", "eval", "eval", "--scenario", sc, "--checkpoint", ck, "--seeds", "0..3"],
        &["--name", "ftc", "eval", "--scenario", sc, "--controller", "ftc", "--seeds", "0..3"],
        &["--name", "matrix", "dump", "matrix", "--scenario", sc, "--checkpoint", ck],
        &["--name", "embeddings", "dump", "embeddings", "--scenario", sc, "--checkpoint", ck],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_tsclab")).env("TSCLAB_OUT", root).arg("--quiet").args(args).output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

/// Relative path to contents for every artifact under `root`.
fn artifacts(root: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    for dir in std::fs::read_dir(root).unwrap().flatten().filter(|d| d.path().is_dir()) {
        for f in std::fs::read_dir(dir.path()).unwrap().flatten() {
            let rel = format!("{}/{}", dir.file_name().to_string_lossy(), f.file_name().to_string_lossy());
            let bytes = std::fs::read(f.path()).unwrap();
            let bytes = if rel.ends_with("manifest.json") {
                let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v["hash"].to_string().into_bytes()
            } else {
                bytes
            };
            out.insert(rel, bytes);
        }
    }
    out
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    command_sequence(a.path())?;
    command_sequence(b.path())?;
    let (fa, fb) = (artifacts(a.path()), artifacts(b.path()));
    let csvs = fa.keys().filter(|k| k.ends_with(".csv")).count();
    let ckpts = fa.keys().filter(|k| k.ends_with(".ckpt")).count();
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    ensure(
        differing.is_empty() && fa.len() == fb.len() && csvs >= 5 && ckpts >= 2,
        format!("{} artifacts ({csvs} CSVs, {ckpts} checkpoints, manifest hashes) compared across two runs; differing: {differing:?}", fa.len()),
    )
}

fn frap_symmetry() -> Outcome {
    let sc = scenario(4, 4, 1.0, 0);
    let env = env_of(&sc, 300);
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let agent = Agent::new(AgentConfig::default(), env.network(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let row: [f64; FEATURES] = std::array::from_fn(|_| rng.random_range(0.0..5.0));
        let obs = vec![Observation([row; CONTROLLED_MOVEMENTS]); agent.n];
        let mut tape = Tape::new();
        let x = tape.constant(observation_tensor(&[&obs], &agent.cfg.model.obs_scale));
        let ep = agent.extractor.phase_embeddings(&mut tape, &agent.policy, x).unwrap();
        let v = tape.value(ep);
        assert_eq!(v.rows, agent.n * PHASES);
        for node in 0..agent.n {
            for a in 0..PHASES {
                for b in a + 1..PHASES {
                    let (ra, rb) = (v.row(node * PHASES + a), v.row(node * PHASES + b));
                    worst = worst.max(ra.iter().zip(rb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
                }
            }
        }
    }
    ensure(worst < SYMMETRY_TOL, format!("max pairwise phase-embedding diff {worst:.3e} over 20 weight seeds (tol {SYMMETRY_TOL:e})"))
}

fn reward_decomposition() -> Outcome {
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (rows, cols, scale) in [(2, 2, 3.0), (4, 4, 1.0)] {
        for seed in 0..3 {
            let mut env = env_of(&scenario(rows, cols, scale, seed), 3600);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            env.reset(seed).unwrap();
            while !env.done() {
                let a: Vec<usize> = (0..env.len()).map(|_| rng.random_range(0..PHASES)).collect();
                let r = env.step(&a).unwrap();
                for b in &r.info.breakdown {
                    let sum = b.delay_term + b.wait_term + b.queue_term + b.pressure_term;
                    worst = worst.max((sum - b.total).abs());
                    checked += 1;
                }
            }
        }
    }
    ensure(worst <= DECOMPOSITION_TOL, format!("{checked} intersection-steps, max |sum of terms - total| {worst:.3e} (tol {DECOMPOSITION_TOL:e})"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("sampling oracle", sampling_oracle),
        ("gradient suite", gradient_suite),
        ("constraint dynamics", constraint_dynamics),
        ("simulator conservation", conservation),
        ("baseline ordering", baseline_ordering),
        ("learning smoke test", learning_smoke),
        ("ablation direction", ablation_direction),
        ("determinism", determinism),
        ("phase symmetry", frap_symmetry),
        ("reward decomposition", reward_decomposition),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let label = format!("{} {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|p| label.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        let line = match outcome {
            Ok(d) => format!("PASS  criterion {label}: {d} [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                format!("FAIL  criterion {label}: {d} [{secs:.1} s]")
            }
        };
        let mut out = std::io::stdout().lock();
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
