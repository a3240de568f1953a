//! `corrnav` command line: gen, train, eval, ablate, render.
//!
//! Files under `--out` (default from the config):
//!
//! ```text
//! data/scenes/<scene_id>.json   data/train.jsonl   data/test_<setting>.jsonl
//! train/train_log.jsonl         train/checkpoints/{ckpt_NNNNNN,best,last}.bin
//! eval/metrics_<setting>.json   eval/episodes_<setting>.jsonl
//! ablate/ablation.csv           ablate/<variant>/seed_<seed>/...
//! render/episode_<id>_<setting>.ppm
//! ```

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{load_config, ConfigError, RunConfig};
use crate::evaluation::{
    ablation_run, evaluate, load_policy, render_trajectory, run_episodes, write_ablation_csv, write_results,
    AblationPlan, EvalError, NetController,
};
use crate::seed::{derive_seed, rng_for};
use crate::training::{train, TrainError, CHECKPOINT_DIR};
use crate::worldsim::{
    generate_scene, read_episodes, sample_episodes, sample_goal_camera, write_episodes, EpisodePool, EpisodeSpec,
    GoalCameraSetting, SceneGrid, World, WorldError,
};

#[derive(Debug, Parser)]
#[command(name = "corrnav", version, about = "Correlation-cue image-goal navigation in a raycast gridworld")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Single-threaded, bit-reproducible run.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    pub overwrite: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate scenes and train/test episode files.
    Gen,
    /// Train a policy on the generated training episodes.
    Train,
    /// Evaluate a checkpoint on the test episode files.
    Eval(EvalArgs),
    /// Train and evaluate every variant under every seed.
    Ablate,
    /// Draw the top-down trajectory of one test episode.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Defaults to train/checkpoints/best.bin, then last.bin.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate only this goal-camera setting.
    #[arg(long)]
    pub setting: Option<GoalCameraSetting>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub episode_id: u64,
    #[arg(long, default_value = "agent_matched")]
    pub setting: GoalCameraSetting,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Image path; defaults to render/episode_<id>_<setting>.ppm.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(WorldError, TrainError, EvalError, std::io::Error);

/// Resolved configuration: file, then environment, then flags.
pub fn resolve_config(global: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut cfg = load_config(global.config.as_deref())?;
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(t) = global.threads {
        cfg.threads = t;
    }
    if global.deterministic {
        cfg.deterministic = true;
    }
    if let Some(o) = &global.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses arguments and runs the command. Help and version requests print
/// and succeed.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(&cli),
        Err(e) if !e.use_stderr() => {
            e.print()?;
            Ok(())
        }
        Err(e) => Err(CliError::Config(ConfigError::Parse(e.render().to_string()))),
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.global)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.effective_threads())
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Gen => cmd_gen(&cfg, cli.global.overwrite),
        Command::Train => cmd_train(&cfg, cli.global.overwrite),
        Command::Eval(a) => cmd_eval(&cfg, a, cli.global.overwrite),
        Command::Ablate => cmd_ablate(&cfg, cli.global.overwrite),
        Command::Render(a) => cmd_render(&cfg, a, cli.global.overwrite),
    })
}

fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("data")
}

/// Clears `dir` when overwriting, or fails if it already holds anything.
fn prepare_dir(dir: &Path, overwrite: bool) -> Result<(), CliError> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !overwrite {
            return Err(CliError::Runtime(format!("{} already exists; pass --overwrite to replace it", dir.display())));
        }
        if non_empty {
            std::fs::remove_dir_all(dir)?;
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn test_file(cfg: &RunConfig, setting: GoalCameraSetting) -> PathBuf {
    data_dir(cfg).join(format!("test_{setting}.jsonl"))
}

fn cmd_gen(cfg: &RunConfig, overwrite: bool) -> Result<(), CliError> {
    let dir = data_dir(cfg);
    prepare_dir(&dir, overwrite)?;
    std::fs::create_dir_all(dir.join("scenes"))?;
    let s = &cfg.scenes;
    let n_rays = cfg.model.image_size;
    // consecutive seeds from one base keep train and test scenes disjoint
    let base = derive_seed(cfg.seed, "scenes");
    let make = |k: usize| -> Result<SceneGrid, CliError> {
        let scene = generate_scene(base.wrapping_add(k as u64), s.size, s.wall_density)?;
        scene.save(&dir.join("scenes").join(format!("{}.json", scene.scene_id)))?;
        Ok(scene)
    };

    let mut train_eps = Vec::new();
    let mut next_id = 0u64;
    for k in 0..s.n_train_scenes {
        let scene = make(k)?;
        let mut rng = rng_for(cfg.seed, &format!("episodes/{}", scene.scene_id));
        let world = World::new(scene);
        train_eps.extend(sample_episodes(
            &world,
            s.train_setting,
            n_rays,
            s.train_episodes_per_scene,
            next_id,
            &mut rng,
        )?);
        next_id += s.train_episodes_per_scene as u64;
    }
    write_episodes(&dir.join("train.jsonl"), &train_eps)?;

    let mut test_eps = Vec::new();
    for k in 0..s.n_test_scenes {
        let scene = make(s.n_train_scenes + k)?;
        let mut rng = rng_for(cfg.seed, &format!("episodes/{}", scene.scene_id));
        let world = World::new(scene);
        let eps = sample_episodes(
            &world,
            GoalCameraSetting::AgentMatched,
            n_rays,
            s.test_episodes_per_scene,
            next_id,
            &mut rng,
        )?;
        test_eps.extend(eps);
        next_id += s.test_episodes_per_scene as u64;
    }
    for setting in GoalCameraSetting::ALL {
        let mut rng = rng_for(cfg.seed, &format!("goal_camera/{setting}"));
        let eps: Vec<EpisodeSpec> = test_eps
            .iter()
            .map(|e| EpisodeSpec { goal_camera: sample_goal_camera(setting, n_rays, &mut rng), ..e.clone() })
            .collect();
        write_episodes(&test_file(cfg, setting), &eps)?;
    }
    println!(
        "wrote {} train scenes / {} train episodes and {} test scenes / {} test episodes per setting to {}",
        s.n_train_scenes,
        train_eps.len(),
        s.n_test_scenes,
        test_eps.len(),
        dir.display()
    );
    Ok(())
}

/// Episodes of `file` together with the scenes they reference.
fn load_pool(cfg: &RunConfig, file: &Path) -> Result<(EpisodePool, Vec<EpisodeSpec>), CliError> {
    if !file.exists() {
        return Err(CliError::Runtime(format!("{} not found; run `corrnav gen` first", file.display())));
    }
    let episodes = read_episodes(file)?;
    let ids: BTreeSet<&str> = episodes.iter().map(|e| e.scene_id.as_str()).collect();
    let scenes = ids
        .into_iter()
        .map(|id| SceneGrid::load(&data_dir(cfg).join("scenes").join(format!("{id}.json"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((EpisodePool::new(scenes, episodes.clone())?, episodes))
}

fn cmd_train(cfg: &RunConfig, overwrite: bool) -> Result<(), CliError> {
    let (pool, _) = load_pool(cfg, &data_dir(cfg).join("train.jsonl"))?;
    let dir = cfg.out_dir.join("train");
    prepare_dir(&dir, overwrite)?;
    let outcome = train(Arc::new(pool), &cfg.net(), &cfg.reward, &cfg.ppo, &cfg.train, cfg.seed, &dir, &mut |l| {
        let sr = l.sr_last100.map_or("-".to_string(), |v| format!("{v:.3}"));
        let rew = l.mean_episode_reward.map_or("-".to_string(), |v| format!("{v:.3}"));
        let val = l.val_sr.map_or(String::new(), |v| format!("  val {v:.3}"));
        eprintln!(
            "update {:>5}  steps {:>9}  sr100 {sr:>5}  reward {rew:>7}  entropy {:.3}  clip {:.3}{val}",
            l.update, l.env_steps, l.entropy, l.clip_fraction
        );
    })?;
    println!(
        "trained {} updates ({} env steps, {} episodes); last-100 SR {}; validation SR {}; checkpoints in {}",
        outcome.updates,
        outcome.env_steps,
        outcome.episodes,
        outcome.sr_last100.map_or("n/a".to_string(), |v| format!("{v:.3}")),
        outcome.val_sr.map_or("n/a".to_string(), |v| format!("{v:.3}")),
        dir.join(CHECKPOINT_DIR).display()
    );
    Ok(())
}

fn default_checkpoint(cfg: &RunConfig, given: Option<&PathBuf>) -> Result<PathBuf, CliError> {
    if let Some(p) = given {
        return Ok(p.clone());
    }
    let dir = cfg.out_dir.join("train").join(CHECKPOINT_DIR);
    ["best.bin", "last.bin"].iter().map(|f| dir.join(f)).find(|p| p.exists()).ok_or_else(|| {
        CliError::Runtime(format!("no checkpoint in {}; run `corrnav train` or pass --checkpoint", dir.display()))
    })
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs, overwrite: bool) -> Result<(), CliError> {
    let ckpt = default_checkpoint(cfg, args.checkpoint.as_ref())?;
    let settings = args.setting.map_or_else(|| cfg.eval.settings.clone(), |s| vec![s]);
    let dir = cfg.out_dir.join("eval");
    std::fs::create_dir_all(&dir)?;
    for &setting in &settings {
        let target = dir.join(format!("metrics_{setting}.json"));
        if target.exists() && !overwrite {
            return Err(CliError::Runtime(format!(
                "{} already exists; pass --overwrite to replace it",
                target.display()
            )));
        }
    }
    let mut out = std::io::stdout().lock();
    writeln!(out, "{:<14} {:>6} {:>6} {:>8} {:>9}", "setting", "SR", "SPL", "final_d", "final_a")?;
    for setting in settings {
        let (pool, episodes) = load_pool(cfg, &test_file(cfg, setting))?;
        let report = evaluate(&ckpt, Some(cfg.model.variant), &pool, &episodes, &cfg.eval.seeds, cfg.eval.batch)?;
        write_results(&dir, setting.as_str(), &report)?;
        let m = &report.mean;
        writeln!(
            out,
            "{:<14} {:>6.3} {:>6.3} {:>8.3} {:>9.3}",
            setting.as_str(),
            m.sr,
            m.spl,
            m.mean_final_d,
            m.mean_final_alpha
        )?;
    }
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, overwrite: bool) -> Result<(), CliError> {
    let (train_pool, _) = load_pool(cfg, &data_dir(cfg).join("train.jsonl"))?;
    let mut test_scenes: Vec<SceneGrid> = Vec::new();
    let mut test_sets = Vec::new();
    for setting in GoalCameraSetting::ALL {
        let (pool, eps) = load_pool(cfg, &test_file(cfg, setting))?;
        for e in &eps {
            if !test_scenes.iter().any(|s| s.scene_id == e.scene_id) {
                test_scenes.push(pool.world(&e.scene_id).expect("loaded").scene().clone());
            }
        }
        test_sets.push((setting, eps));
    }
    let test_pool = EpisodePool::new(test_scenes, test_sets.iter().flat_map(|(_, e)| e.clone()).collect())?;
    let dir = cfg.out_dir.join("ablate");
    prepare_dir(&dir, overwrite)?;
    let plan = AblationPlan {
        variants: cfg.ablate.variants.clone(),
        seeds: cfg.ablate.seeds.clone(),
        net: cfg.net(),
        reward: cfg.reward.clone(),
        ppo: cfg.ppo.clone(),
        train: cfg.train.clone(),
        eval_batch: cfg.eval.batch,
    };
    let cells = ablation_run(&plan, Arc::new(train_pool), &test_pool, &test_sets, &dir, &mut |v, s, l| {
        if l.update % 10 == 0 {
            eprintln!("{v} seed {s}: update {} steps {} sr100 {:?}", l.update, l.env_steps, l.sr_last100);
        }
    })?;
    let csv = dir.join("ablation.csv");
    write_ablation_csv(&csv, &cells)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{:<16} {:<14} {:>13} {:>13}", "variant", "setting", "SR", "SPL")?;
    for c in &cells {
        writeln!(
            out,
            "{:<16} {:<14} {:>6.3}±{:<6.3} {:>6.3}±{:<6.3}",
            c.variant.as_str(),
            c.setting.as_str(),
            c.sr_mean,
            c.sr_std,
            c.spl_mean,
            c.spl_std
        )?;
    }
    writeln!(out, "table written to {}", csv.display())?;
    Ok(())
}

fn cmd_render(cfg: &RunConfig, args: &RenderArgs, overwrite: bool) -> Result<(), CliError> {
    let (pool, episodes) = load_pool(cfg, &test_file(cfg, args.setting))?;
    let episode = episodes.iter().find(|e| e.episode_id == args.episode_id).ok_or_else(|| {
        CliError::Runtime(format!("episode {} is not in the {} test set", args.episode_id, args.setting))
    })?;
    let ckpt = default_checkpoint(cfg, args.checkpoint.as_ref())?;
    let (net, store) = load_policy(&ckpt, Some(cfg.model.variant))?;
    let h = net.image_size;
    let results = run_episodes(&pool, std::slice::from_ref(episode), h, 1, || {
        NetController::new(Arc::clone(&store), net.clone())
    })?;
    let result = &results[0];
    let scene = pool.world(&episode.scene_id).expect("loaded").scene();
    let img = render_trajectory(scene, &result.trajectory, &episode.goal, cfg.eval.upscale);
    let path = args.output.clone().unwrap_or_else(|| {
        cfg.out_dir.join("render").join(format!("episode_{}_{}.ppm", args.episode_id, args.setting))
    });
    if path.exists() && !overwrite {
        return Err(CliError::Runtime(format!("{} already exists; pass --overwrite to replace it", path.display())));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.write_ppm(&path)?;
    println!(
        "episode {}: {} in {} steps, path {:.2} m (geodesic {:.2} m); image {}",
        result.episode_id,
        if result.success { "success" } else { "failure" },
        result.steps,
        result.path_length,
        result.geodesic_length,
        path.display()
    );
    Ok(())
}
