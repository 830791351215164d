mod common;

use common::{grid_env, tiny_config};
use tsclab_agent::{collect_episode, Agent, AgentConfig, MatrixMode, Trainer};
use tsclab_nn::Checkpoint;

fn trainer(cfg: AgentConfig, seed: u64) -> Trainer {
    Trainer::new(cfg, grid_env(2, 2, 2.0, 300), seed).unwrap()
}

#[test]
fn same_seed_replays_identically() {
    for matrix in [MatrixMode::Learned, MatrixMode::RandomFrozen, MatrixMode::FixedHop { radius: 1 }] {
        let mut a = trainer(tiny_config(matrix), 4);
        let mut b = trainer(tiny_config(matrix), 4);
        a.train(5, |_, _| Ok(())).unwrap();
        b.train(5, |_, _| Ok(())).unwrap();
        assert!(a.updates > 0);
        assert_eq!(a.buffer.iter().collect::<Vec<_>>(), b.buffer.iter().collect::<Vec<_>>());
        assert_eq!(a.checkpoint().unwrap().to_bytes(), b.checkpoint().unwrap().to_bytes(), "{matrix}");
    }
}

#[test]
fn different_seeds_diverge() {
    let mut a = trainer(tiny_config(MatrixMode::Learned), 1);
    let mut b = trainer(tiny_config(MatrixMode::Learned), 2);
    a.train(1, |_, _| Ok(())).unwrap();
    b.train(1, |_, _| Ok(())).unwrap();
    assert_ne!(a.checkpoint().unwrap().to_bytes(), b.checkpoint().unwrap().to_bytes());
}

#[test]
fn hidden_state_resets_between_episodes() {
    let mut env = grid_env(2, 2, 2.0, 300);
    let agent = Agent::new(tiny_config(MatrixMode::Learned), env.network(), 0).unwrap();
    let (first, _) = collect_episode(&agent, &mut env, 0, 9, 10).unwrap();
    let (second, _) = collect_episode(&agent, &mut env, 1, 9, 10).unwrap();
    assert_eq!(first.len(), 20);
    for (x, y) in first.iter().zip(&second) {
        assert_eq!(x.actions, y.actions);
        assert_eq!(x.ids, y.ids);
        assert_eq!(x.hidden, y.hidden);
    }
    assert!(first[0].hidden.iter().all(|h| *h == 0.0));
    assert!(first[1].hidden.iter().any(|h| *h != 0.0));
}

#[test]
fn target_copies_only_on_sync_episodes() {
    let mut t = trainer(tiny_config(MatrixMode::Learned), 0);
    let mut seen = Vec::new();
    t.train(6, |log, tr| {
        let equal = tr.agent.target_params.iter().zip(tr.agent.critic_params.iter()).all(|(a, b)| a == b);
        seen.push((log.summary.episode, log.target_synced, equal));
        Ok(())
    })
    .unwrap();
    // Warm-up ends after episode index 1; sync every third episode.
    assert_eq!(
        seen,
        vec![(0, false, true), (1, false, false), (2, true, true), (3, false, false), (4, false, false), (5, true, true)]
    );
}

#[test]
fn checkpoint_resume_matches_uninterrupted_training() {
    let cfg = tiny_config(MatrixMode::Learned);
    let mut full = trainer(cfg.clone(), 6);
    full.train(6, |_, _| Ok(())).unwrap();

    let mut part = trainer(cfg, 6);
    part.train(3, |_, _| Ok(())).unwrap();
    let bytes = part.checkpoint().unwrap().to_bytes();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::from_checkpoint(&ck, grid_env(2, 2, 2.0, 300)).unwrap();
    assert_eq!(resumed.checkpoint().unwrap().to_bytes(), bytes);
    resumed.train(6, |_, _| Ok(())).unwrap();
    assert_eq!(resumed.checkpoint().unwrap().to_bytes(), full.checkpoint().unwrap().to_bytes());
}

#[test]
fn resume_rejects_a_different_network() {
    let mut t = trainer(tiny_config(MatrixMode::Learned), 0);
    t.train(1, |_, _| Ok(())).unwrap();
    let ck = t.checkpoint().unwrap();
    assert!(Trainer::from_checkpoint(&ck, grid_env(2, 3, 2.0, 300)).is_err());
}

#[test]
fn short_buffer_skips_updates_with_a_flag() {
    let mut cfg = tiny_config(MatrixMode::Learned);
    cfg.train.warmup_episodes = 1;
    cfg.train.batch_size = 30;
    let mut t = trainer(cfg, 0);
    let mut flags = Vec::new();
    t.train(2, |log, _| {
        flags.push((log.buffer_short, log.updates));
        Ok(())
    })
    .unwrap();
    assert_eq!(flags, vec![(true, 0), (false, 2)]);
    assert!(t.update_once(true, true).is_ok());
}
