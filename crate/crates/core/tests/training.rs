use std::path::Path;
use std::sync::Arc;

use corrnav::correlation::CueVariant;
use corrnav::numkit::optim::Adam;
use corrnav::numkit::ParamStore;
use corrnav::perception::EncoderConfig;
use corrnav::policy::{init_network, NetConfig, PolicyConfig};
use corrnav::training::{
    load_model, ppo_update, train, Collector, PpoConfig, RewardConfig, TrainConfig, UpdateLog, LOG_FILE,
};
use corrnav::worldsim::{generate_scene, sample_episodes, EpisodePool, GoalCameraSetting, World};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn net(variant: CueVariant) -> NetConfig {
    NetConfig {
        variant,
        image_size: 32,
        encoder: EncoderConfig { channels: [4, 8, 8, 8], feature_dim: 4, groups: 2 },
        policy: PolicyConfig { hidden: 8, action_embed: 3, layers: 2 },
    }
}

fn pool() -> Arc<EpisodePool> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut scenes = Vec::new();
    let mut episodes = Vec::new();
    for s in 0..2u64 {
        let scene = generate_scene(40 + s, 8, 0.0).unwrap();
        let world = World::new(scene.clone());
        episodes.extend(sample_episodes(&world, GoalCameraSetting::AgentMatched, 32, 6, s * 6, &mut rng).unwrap());
        scenes.push(scene);
    }
    Arc::new(EpisodePool::new(scenes, episodes).unwrap())
}

fn ppo() -> PpoConfig {
    PpoConfig { horizon: 12, num_envs: 4, minibatches: 2, epochs: 2, ..PpoConfig::default() }
}

#[test]
fn first_minibatch_ratio_is_one() {
    for variant in CueVariant::ALL {
        let net = net(variant);
        let mut store: ParamStore<f32> = init_network(&net, &mut ChaCha8Rng::seed_from_u64(1));
        let cfg = ppo();
        let mut collector = Collector::new(pool(), &net, cfg.num_envs, RewardConfig::default(), 2).unwrap();
        let batch = collector.collect(&store, &net, cfg.horizon).unwrap();
        let mut adam = Adam::new(cfg.lr);
        let stats = ppo_update(&mut store, &mut adam, &net, &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(stats.first_ratio_dev < 1e-5, "{variant:?}: {}", stats.first_ratio_dev);
        assert!(stats.grad_norm.is_finite() && stats.grad_norm > 0.0);
    }
}

#[test]
fn one_update_moves_every_parameter() {
    for variant in CueVariant::ALL {
        let net = net(variant);
        let before: ParamStore<f32> = init_network(&net, &mut ChaCha8Rng::seed_from_u64(5));
        let mut store = before.clone();
        let cfg = ppo();
        let mut collector = Collector::new(pool(), &net, cfg.num_envs, RewardConfig::default(), 6).unwrap();
        let batch = collector.collect(&store, &net, cfg.horizon).unwrap();
        let mut adam = Adam::new(cfg.lr);
        ppo_update(&mut store, &mut adam, &net, &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(adam.steps(), (cfg.epochs * cfg.minibatches) as u64);
        let frozen: Vec<&str> = before
            .iter()
            .filter(|(name, t)| store.get(name).unwrap().data() == t.data())
            .map(|(name, _)| name)
            .collect();
        assert!(frozen.is_empty(), "{variant:?}: unchanged {frozen:?}");
    }
}

fn run(dir: &Path, cfg: &TrainConfig) -> (corrnav::training::TrainOutcome, Vec<UpdateLog>) {
    let mut seen = Vec::new();
    let out =
        train(pool(), &net(CueVariant::DirectionAware), &RewardConfig::default(), &ppo(), cfg, 9, dir, &mut |l| {
            seen.push(l.clone())
        })
        .unwrap();
    (out, seen)
}

#[test]
fn training_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { total_env_steps: 144, checkpoint_every: 1, ..TrainConfig::default() };
    let (a, la) = run(&tmp.path().join("a"), &cfg);
    let (b, lb) = run(&tmp.path().join("b"), &cfg);
    assert_eq!(a.updates, 3);
    assert_eq!(a.env_steps, 144);
    assert_eq!(la, lb);
    for (name, t) in a.params.iter() {
        assert_eq!(t.data(), b.params.get(name).unwrap().data(), "{name}");
    }
    let log_a = std::fs::read(tmp.path().join("a").join(LOG_FILE)).unwrap();
    let log_b = std::fs::read(tmp.path().join("b").join(LOG_FILE)).unwrap();
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.iter().filter(|&&c| c == b'\n').count(), 3);
    let (meta, params) = load_model(&tmp.path().join("a/checkpoints/last.bin")).unwrap();
    assert_eq!(meta.update, 3);
    for (name, t) in params.iter() {
        assert_eq!(t.data(), a.params.get(name).unwrap().data(), "{name}");
    }
}

#[test]
fn validation_runs_on_schedule_and_on_the_last_update() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        total_env_steps: 240,
        checkpoint_every: 0,
        eval_every: 2,
        eval_episodes: 4,
        ..TrainConfig::default()
    };
    let (out, logs) = run(tmp.path(), &cfg);
    assert_eq!(out.updates, 5);
    let validated: Vec<u64> = logs.iter().filter(|l| l.val_sr.is_some()).map(|l| l.update).collect();
    assert_eq!(validated, vec![2, 4, 5]);
    for l in &logs {
        if let Some(v) = l.val_sr {
            assert!((0.0..=1.0).contains(&v));
            assert_eq!((v * 4.0).fract(), 0.0);
        }
    }
    assert_eq!(out.val_sr, logs.last().unwrap().val_sr);
    let (meta, _) = load_model(&tmp.path().join("checkpoints/best.bin")).unwrap();
    assert!(meta.val_sr.is_some());
}

#[test]
fn target_rate_stops_early() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        total_env_steps: 10_000,
        eval_every: 1,
        eval_episodes: 2,
        target_sr: Some(0.0),
        ..TrainConfig::default()
    };
    let (out, logs) = run(tmp.path(), &cfg);
    assert_eq!(out.updates, 1);
    assert_eq!(logs.len(), 1);
    assert_eq!(out.env_steps, 48);
}
