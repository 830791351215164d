//! The four subcommands.

use crate::manifest::{file_hash, Manifest};
use crate::output::{csv_writer, header, num};
use crate::{checkpoint_error, CliError, ControllerKind, DumpArgs, DumpKind, EvalArgs, GenArgs, Kind, TrainArgs};
use std::path::Path;
use tsclab_agent::evaluate::PolicyController;
use tsclab_agent::{mean_std, AgentConfig, Trainer};
use tsclab_core::{
    generate_scenario, load_scenario, run_episode, save_scenario, Controller, DemandKind, EnvConfig, EpisodeReport,
    FixedTime, FtcConfig, GenOptions, MaxPressure, Scenario, TrafficEnv,
};
use tsclab_nn::Checkpoint;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn environment(sc: &Scenario) -> Result<TrafficEnv, CliError> {
    TrafficEnv::new(sc.net.clone(), sc.demand.clone(), EnvConfig::default()).map_err(|e| CliError::Input(e.to_string()))
}

fn load_trainer(path: &Path, env: TrafficEnv) -> Result<Trainer, CliError> {
    let ck = Checkpoint::load(path).map_err(|e| checkpoint_error(path, e))?;
    Ok(Trainer::from_checkpoint(&ck, env)?)
}

pub fn gen_scenario(a: &GenArgs, dir: &Path) -> Result<(), CliError> {
    if a.rows == 0 || a.cols == 0 {
        return Err(CliError::Usage("rows and cols must be positive".into()));
    }
    let opts = GenOptions {
        kind: match a.kind {
            Kind::Grid => DemandKind::Grid,
            Kind::Avenue => DemandKind::Avenue,
        },
        rows: a.rows,
        cols: a.cols,
        seed: a.seed,
        demand_scale: a.scale,
        horizon: a.horizon,
        ..GenOptions::default()
    };
    let (file, demand) = generate_scenario(&opts).map_err(|e| CliError::Usage(e.to_string()))?;
    let path = save_scenario(dir, &file, &demand)?;
    let sc = Scenario::from_parts(&file, demand)?;
    let mut m = Manifest::new("gen-scenario", serde_json::to_value(&opts).map_err(runtime)?);
    m.scenario_hash = Some(sc.content_hash);
    m.seeds = vec![a.seed];
    m.outputs = vec!["scenario.json".into(), file.demand.clone()];
    m.write(dir)?;
    println!("{}", path.display());
    Ok(())
}

/// Flags first, then the configuration file merged over them.
pub fn resolve_config(a: &TrainArgs) -> Result<AgentConfig, CliError> {
    let mut cfg = AgentConfig::default();
    cfg.model.k = a.k;
    cfg.model.matrix = a.matrix;
    if a.no_diag {
        cfg.train.w_diag = 0.0;
    }
    if a.no_sym {
        cfg.train.w_sym = 0.0;
    }
    if let Some(e) = a.episodes {
        cfg.train.episodes = e;
    }
    if let Some(w) = a.workers {
        cfg.train.workers = w;
    }
    let Some(path) = &a.config else { return Ok(cfg) };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    overlay(&cfg, &text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Apply a JSON document of overrides to `cfg`.
pub fn overlay(cfg: &AgentConfig, json: &str) -> Result<AgentConfig, serde_json::Error> {
    let over: serde_json::Value = serde_json::from_str(json)?;
    let mut base = serde_json::to_value(cfg)?;
    merge(&mut base, over);
    serde_json::from_value(base)
}

/// Overwrite `base` with `over`, recursing into objects.
fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Checkpoint files written while training from `start` to `end` episodes.
fn checkpoint_names(start: u64, end: u64, steps_per_episode: u64, interval: u64) -> Vec<String> {
    let interval = interval.max(1);
    (start + 1..=end)
        .filter(|ep| (ep * steps_per_episode) / interval > ((ep - 1) * steps_per_episode) / interval)
        .map(|ep| format!("ckpt_{ep:05}.ckpt"))
        .collect()
}

pub fn train(a: &TrainArgs, dir: &Path, quiet: bool) -> Result<(), CliError> {
    let sc = load_scenario(&a.scenario)?;
    let env = environment(&sc)?;
    let spe = env.steps_per_episode() as u64;
    let mut m;
    let mut trainer = match &a.resume {
        Some(p) => {
            let mut t = load_trainer(p, env)?;
            if let Some(e) = a.episodes {
                t.agent.cfg.train.episodes = e;
            }
            m = Manifest::new("train", serde_json::to_value(&t.agent.cfg).map_err(runtime)?);
            m.inputs.insert("resume".into(), file_hash(p)?);
            t
        }
        None => {
            let cfg = resolve_config(a)?;
            cfg.validate(env.len())?;
            m = Manifest::new("train", serde_json::to_value(&cfg).map_err(runtime)?);
            Trainer::new(cfg, env, a.seed)?
        }
    };
    let total = trainer.agent.cfg.train.episodes as u64;
    let interval = trainer.agent.cfg.train.eval_interval as u64;
    let ckpts = checkpoint_names(trainer.episodes, total, spe, interval);
    m.scenario_hash = Some(sc.content_hash.clone());
    m.seeds = vec![trainer.seed];
    m.outputs = vec!["train_log.csv".into()];
    m.outputs.extend(ckpts.iter().cloned());
    m.outputs.push("final.ckpt".into());
    let hash = m.write(dir)?;

    let cols = [
        "episode", "env_seed", "reward", "queue", "trip_time", "updates", "buffer_short", "actor_loss", "cos_pg", "diag",
        "sym", "policy_loss", "critic_loss", "mean_advantage", "policy_grad_norm", "critic_grad_norm", "target_synced",
    ];
    let mut log = csv_writer(dir, "train_log.csv", &hash, &header(&cols))?;
    let mut fault: Option<CliError> = None;
    trainer
        .train(total, |l, t| {
            let s = &l.summary;
            let r = l.report.unwrap_or_default();
            let mut row = vec![s.episode.to_string(), s.env_seed.to_string(), num(s.reward), num(s.queue), num(s.metrics.trip_time)];
            row.push(l.updates.to_string());
            row.push(l.buffer_short.to_string());
            for v in [r.actor_loss, r.cos_pg, r.diag, r.sym, r.policy_loss, r.critic_loss, r.mean_advantage, r.policy_grad_norm, r.critic_grad_norm] {
                row.push(num(v));
            }
            row.push(l.target_synced.to_string());
            let mut step = || -> Result<(), CliError> {
                log.write_record(&row)?;
                let ep = t.episodes;
                let name = format!("ckpt_{ep:05}.ckpt");
                if ckpts.contains(&name) {
                    log.flush()?;
                    t.checkpoint()?.save(&dir.join(&name)).map_err(runtime)?;
                }
                Ok(())
            };
            if let Err(e) = step() {
                fault = Some(e);
                return Err(tsclab_agent::AgentError::Batch("output failure".into()));
            }
            if !quiet {
                eprintln!("episode {:4} reward {:10.2} queue {:7.3} trip {:7.1} updates {}", s.episode, s.reward, s.queue, s.metrics.trip_time, l.updates);
            }
            Ok(())
        })
        .map_err(|e| fault.take().unwrap_or_else(|| e.into()))?;
    log.flush()?;
    trainer.checkpoint()?.save(&dir.join("final.ckpt")).map_err(runtime)?;
    Ok(())
}

const SCENARIO_METRICS: [&str; 8] = ["reward", "trip_time", "delay", "wait", "queue", "pressure", "entered", "exited"];
const NODE_METRICS: [&str; 6] = ["reward", "delay_term", "wait_term", "queue_term", "pressure_term", "queue"];

fn scenario_values(r: &EpisodeReport) -> [f64; 8] {
    let m = &r.metrics;
    [r.reward, m.trip_time, m.delay, m.wait, m.queue, m.pressure, m.entered as f64, m.exited as f64]
}

fn node_values(r: &EpisodeReport, i: usize) -> [f64; 6] {
    let b = &r.node_breakdown[i];
    [b.total, b.delay_term, b.wait_term, b.queue_term, b.pressure_term, r.node_queue[i]]
}

/// Per-seed rows plus mean and std rows, then per-intersection mean and std.
fn write_eval_tables(dir: &Path, hash: &str, reports: &[EpisodeReport]) -> Result<(), CliError> {
    let mut cols = vec!["seed".to_string()];
    cols.extend(header(&SCENARIO_METRICS));
    let mut w = csv_writer(dir, "eval_scenario.csv", hash, &cols)?;
    for r in reports {
        let mut row = vec![r.seed.to_string()];
        row.extend(scenario_values(r).iter().map(|v| num(*v)));
        w.write_record(&row)?;
    }
    let stats: Vec<_> = (0..SCENARIO_METRICS.len())
        .map(|c| mean_std(&reports.iter().map(|r| scenario_values(r)[c]).collect::<Vec<_>>()))
        .collect();
    let mut mean = vec!["mean".to_string()];
    mean.extend(stats.iter().map(|s| num(s.mean)));
    let mut std = vec!["std".to_string()];
    std.extend(stats.iter().map(|s| num(s.std)));
    w.write_record(&mean)?;
    w.write_record(&std)?;
    w.flush()?;

    let mut cols = vec!["intersection".to_string()];
    for m in NODE_METRICS {
        cols.push(format!("{m}_mean"));
        cols.push(format!("{m}_std"));
    }
    let mut w = csv_writer(dir, "eval_intersections.csv", hash, &cols)?;
    let n = reports.first().map(|r| r.node_queue.len()).unwrap_or(0);
    for i in 0..n {
        let mut row = vec![i.to_string()];
        for c in 0..NODE_METRICS.len() {
            let s = mean_std(&reports.iter().map(|r| node_values(r, i)[c]).collect::<Vec<_>>());
            row.push(num(s.mean));
            row.push(num(s.std));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn eval(a: &EvalArgs, dir: &Path) -> Result<(), CliError> {
    let kind = match (a.controller, &a.checkpoint) {
        (None | Some(ControllerKind::Coslight), Some(_)) => ControllerKind::Coslight,
        (Some(ControllerKind::Coslight), None) => return Err(CliError::Usage("--controller coslight needs --checkpoint".into())),
        (Some(k), None) => k,
        (Some(_), Some(_)) => return Err(CliError::Usage("--checkpoint only applies to the coslight controller".into())),
        (None, None) => return Err(CliError::Usage("give --checkpoint or --controller".into())),
    };
    let sc = load_scenario(&a.scenario)?;
    let mut env = environment(&sc)?;
    let seeds = &a.seeds.0;
    let name = match kind {
        ControllerKind::Ftc => "ftc",
        ControllerKind::Maxpressure => "maxpressure",
        ControllerKind::Coslight => "coslight",
    };
    let mut config = serde_json::json!({ "controller": name, "env": env.config() });
    let mut m = Manifest::new("eval", serde_json::Value::Null);
    let trainer = match &a.checkpoint {
        Some(p) => {
            let t = load_trainer(p, env.clone())?;
            config["agent"] = serde_json::to_value(&t.agent.cfg).map_err(runtime)?;
            m.inputs.insert("checkpoint".into(), file_hash(p)?);
            Some(t)
        }
        None => None,
    };
    m.config = config;
    m.scenario_hash = Some(sc.content_hash.clone());
    m.seeds = seeds.clone();
    m.outputs = vec!["eval_scenario.csv".into(), "eval_intersections.csv".into()];
    let hash = m.write(dir)?;

    let mut reports = Vec::with_capacity(seeds.len());
    match (&trainer, kind) {
        (Some(t), _) => {
            let mut ctl = PolicyController::new(&t.agent);
            for &s in seeds {
                reports.push(run_episode(&mut env, &mut ctl, s).map_err(runtime)?);
                if let Some(e) = ctl.error.take() {
                    return Err(e.into());
                }
            }
        }
        (None, k) => {
            let mut ctl: Box<dyn Controller> = match k {
                ControllerKind::Ftc => Box::new(FixedTime {
                    cfg: FtcConfig::seeded(env.len(), env.config().sim.control_interval, 0),
                    base_seed: 0,
                }),
                _ => Box::new(MaxPressure),
            };
            for &s in seeds {
                reports.push(run_episode(&mut env, ctl.as_mut(), s).map_err(runtime)?);
            }
        }
    }
    write_eval_tables(dir, &hash, &reports)
}

pub fn dump(a: &DumpArgs, dir: &Path) -> Result<(), CliError> {
    let sc = load_scenario(&a.scenario)?;
    let mut env = environment(&sc)?;
    let t = load_trainer(&a.checkpoint, env.clone())?;
    let kind = match a.kind {
        DumpKind::Matrix => "matrix",
        DumpKind::Embeddings => "embeddings",
    };
    let file = format!("{kind}.csv");
    let mut m = Manifest::new("dump", serde_json::json!({ "kind": kind, "agent": t.agent.cfg }));
    m.inputs.insert("checkpoint".into(), file_hash(&a.checkpoint)?);
    m.scenario_hash = Some(sc.content_hash.clone());
    m.seeds = a.seeds.0.clone();
    m.outputs = vec![file.clone()];
    let hash = m.write(dir)?;

    let n = t.agent.n;
    let cols = match a.kind {
        DumpKind::Matrix => {
            let mut c = header(&["seed", "moment", "row"]);
            c.extend((0..n).map(|j| format!("m{j}")));
            c
        }
        DumpKind::Embeddings => {
            let mut c = header(&["seed", "step", "intersection"]);
            c.extend((0..t.agent.extractor.repr_dim).map(|j| format!("e{j}")));
            c
        }
    };
    let mut w = csv_writer(dir, &file, &hash, &cols)?;
    let mut ctl = PolicyController::capturing(&t.agent);
    for &s in &a.seeds.0 {
        run_episode(&mut env, &mut ctl, s).map_err(runtime)?;
        if let Some(e) = ctl.error.take() {
            return Err(e.into());
        }
        let cap = ctl.capture.as_ref().expect("capturing controller");
        match a.kind {
            DumpKind::Matrix => {
                let first = cap.matrices.first().ok_or_else(|| runtime("episode made no decisions"))?;
                let last = cap.matrices.last().expect("non-empty");
                for (moment, mat) in [("start", first), ("end", last)] {
                    for r in 0..mat.rows {
                        let mut row = vec![s.to_string(), moment.to_string(), r.to_string()];
                        row.extend(mat.row(r).iter().map(|v| num(*v)));
                        w.write_record(&row)?;
                    }
                }
            }
            DumpKind::Embeddings => {
                for (step, e) in cap.embeddings.iter().enumerate() {
                    for r in 0..e.rows {
                        let mut row = vec![s.to_string(), step.to_string(), r.to_string()];
                        row.extend(e.row(r).iter().map(|v| num(*v)));
                        w.write_record(&row)?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_overrides_leaves_only() {
        let mut a = serde_json::json!({"model": {"k": 5, "heads": 8}, "train": {"gamma": 0.99}});
        merge(&mut a, serde_json::json!({"model": {"k": 2}}));
        assert_eq!(a, serde_json::json!({"model": {"k": 2, "heads": 8}, "train": {"gamma": 0.99}}));
    }

    #[test]
    fn checkpoints_follow_the_step_interval() {
        assert_eq!(checkpoint_names(0, 4, 240, 500), vec!["ckpt_00003.ckpt".to_string()]);
        assert_eq!(checkpoint_names(0, 3, 240, 240).len(), 3);
        assert!(checkpoint_names(5, 5, 240, 240).is_empty());
    }
}
