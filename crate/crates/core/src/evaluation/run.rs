use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::controller::Controller;
use super::metrics::{summarize, EpisodeResult, MetricSummary};
use super::EvalError;
use crate::correlation::CueVariant;
use crate::numkit::ParamStore;
use crate::policy::NetConfig;
use crate::training::load_model;
use crate::worldsim::{angle_to_goal, EpisodePool, EpisodeSpec, NavEnv};

/// Loads a checkpoint, optionally insisting on a cue variant.
pub fn load_policy(path: &Path, expected: Option<CueVariant>) -> Result<(NetConfig, Arc<ParamStore<f32>>), EvalError> {
    let (meta, params) = load_model(path)?;
    if let Some(expected) = expected {
        if meta.net.variant != expected {
            return Err(EvalError::VariantMismatch { expected, found: meta.net.variant });
        }
    }
    Ok((meta.net, Arc::new(params)))
}

fn finish(env: &NavEnv) -> EpisodeResult {
    let ep = env.episode();
    EpisodeResult {
        episode_id: ep.episode_id,
        success: env.is_success(),
        path_length: env.path_length(),
        geodesic_length: ep.geodesic_length,
        final_d: env.distance(),
        final_alpha: angle_to_goal(&env.pose(), &ep.goal),
        steps: env.steps(),
        trajectory: env.trajectory().to_vec(),
    }
}

fn run_chunk<C: Controller>(
    pool: &EpisodePool,
    episodes: &[EpisodeSpec],
    h_img: usize,
    mut ctl: C,
) -> Result<Vec<EpisodeResult>, EvalError> {
    let mut envs = episodes.iter().map(|e| pool.make_env(e, h_img)).collect::<Result<Vec<_>, _>>()?;
    ctl.begin(&envs)?;
    let mut active: Vec<usize> = (0..envs.len()).collect();
    while !active.is_empty() {
        let actions = ctl.act(&envs, &active)?;
        for (&i, &a) in active.iter().zip(&actions) {
            envs[i].step(a)?;
        }
        active.retain(|&i| !envs[i].is_done());
    }
    Ok(envs.iter().map(finish).collect())
}

/// Runs every episode to completion with controllers from `make`, `batch`
/// episodes per controller. Results come back sorted by episode id.
pub fn run_episodes<C, F>(
    pool: &EpisodePool,
    episodes: &[EpisodeSpec],
    h_img: usize,
    batch: usize,
    make: F,
) -> Result<Vec<EpisodeResult>, EvalError>
where
    C: Controller,
    F: Fn() -> C + Sync,
{
    if episodes.is_empty() {
        return Err(EvalError::NoEpisodes);
    }
    let chunks: Vec<Vec<EpisodeResult>> = episodes
        .par_chunks(batch.max(1))
        .map(|chunk| run_chunk(pool, chunk, h_img, make()))
        .collect::<Result<_, _>>()?;
    let mut out: Vec<EpisodeResult> = chunks.into_iter().flatten().collect();
    out.sort_by_key(|r| r.episode_id);
    Ok(out)
}

/// Per-seed summaries, their mean and the per-episode records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: MetricSummary,
    pub per_seed: Vec<MetricSummary>,
    #[serde(skip)]
    pub results: Vec<Vec<EpisodeResult>>,
}

/// Evaluates once per seed; `make(seed)` builds the controller factory input.
pub fn evaluate_seeds<C, F>(
    pool: &EpisodePool,
    episodes: &[EpisodeSpec],
    h_img: usize,
    batch: usize,
    seeds: &[u64],
    make: F,
) -> Result<EvalReport, EvalError>
where
    C: Controller,
    F: Fn(u64) -> C + Sync,
{
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let r = run_episodes(pool, episodes, h_img, batch, || make(seed))?;
        per_seed.push(summarize(&r, &[seed]));
        results.push(r);
    }
    let k = per_seed.len().max(1) as f64;
    let avg = |f: fn(&MetricSummary) -> f64| per_seed.iter().map(f).sum::<f64>() / k;
    let mean = MetricSummary {
        sr: avg(|m| m.sr),
        spl: avg(|m| m.spl),
        mean_final_d: avg(|m| m.mean_final_d),
        mean_final_alpha: avg(|m| m.mean_final_alpha),
        n_episodes: episodes.len(),
        seed_set: seeds.to_vec(),
    };
    Ok(EvalReport { mean, per_seed, results })
}

/// Greedy evaluation of a checkpoint.
pub fn evaluate(
    checkpoint: &Path,
    expected: Option<CueVariant>,
    pool: &EpisodePool,
    episodes: &[EpisodeSpec],
    seeds: &[u64],
    batch: usize,
) -> Result<EvalReport, EvalError> {
    let (net, store) = load_policy(checkpoint, expected)?;
    let h = net.image_size;
    evaluate_seeds(pool, episodes, h, batch, seeds, |_| super::NetController::new(Arc::clone(&store), net.clone()))
}

#[derive(Serialize)]
struct Record<'a> {
    seed: u64,
    #[serde(flatten)]
    result: &'a EpisodeResult,
}

/// Writes `metrics_{name}.json` and `episodes_{name}.jsonl` into `dir`.
pub fn write_results(dir: &Path, name: &str, report: &EvalReport) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    let mut f = BufWriter::new(File::create(dir.join(format!("metrics_{name}.json")))?);
    serde_json::to_writer_pretty(&mut f, report)?;
    f.write_all(b"\n")?;
    f.flush()?;
    let mut f = BufWriter::new(File::create(dir.join(format!("episodes_{name}.jsonl")))?);
    for (summary, results) in report.per_seed.iter().zip(&report.results) {
        for r in results {
            serde_json::to_writer(&mut f, &Record { seed: summary.seed_set[0], result: r })?;
            f.write_all(b"\n")?;
        }
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{OracleController, RandomController};
    use crate::worldsim::{CameraParams, Pose, SceneGrid, World};

    fn corridor() -> (EpisodePool, Vec<EpisodeSpec>) {
        // 3-cell-wide corridor along x, 20 m long
        let mut scene = SceneGrid::empty_room(22, 5, 1.0);
        scene.scene_id = "corridor".into();
        let world = World::new(scene.clone());
        let episodes: Vec<EpisodeSpec> = (0..6)
            .map(|i| {
                let start = Pose::new(1.5 + i as f64, 2.5, 0.0);
                let goal = Pose::new(8.5 + 2.0 * i as f64, 2.5, 0.0);
                EpisodeSpec {
                    scene_id: "corridor".into(),
                    start,
                    goal,
                    goal_camera: CameraParams::agent(32),
                    geodesic_length: world.geodesic(&start, &goal).unwrap(),
                    episode_id: 10 - i as u64,
                }
            })
            .collect();
        (EpisodePool::new(vec![scene], episodes.clone()).unwrap(), episodes)
    }

    #[test]
    fn oracle_solves_straight_corridors() {
        let (pool, eps) = corridor();
        let rs = run_episodes(&pool, &eps, 32, 4, OracleController::new).unwrap();
        assert_eq!(rs.iter().map(|r| r.episode_id).collect::<Vec<_>>(), vec![5, 6, 7, 8, 9, 10]);
        let m = summarize(&rs, &[0]);
        assert_eq!(m.sr, 1.0);
        assert!(m.spl >= 0.9, "{m:?}");
        for r in &rs {
            assert!(r.final_d <= 1.0 && r.steps <= 500);
            assert_eq!(r.trajectory.len(), r.steps as usize + 1);
        }
    }

    #[test]
    fn batch_size_does_not_change_results() {
        let (pool, eps) = corridor();
        let a = run_episodes(&pool, &eps, 32, 1, || RandomController::new(3)).unwrap();
        let b = run_episodes(&pool, &eps, 32, 6, || RandomController::new(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_are_reported() {
        let (pool, eps) = corridor();
        let rep = evaluate_seeds(&pool, &eps, 32, 3, &[1, 2, 3], RandomController::new).unwrap();
        assert_eq!(rep.per_seed.len(), 3);
        assert_eq!(rep.mean.seed_set, vec![1, 2, 3]);
        for s in &rep.per_seed {
            assert!(s.spl <= s.sr);
        }
        let dir = tempfile::tempdir().unwrap();
        write_results(dir.path(), "agent_matched", &rep).unwrap();
        let lines = std::fs::read_to_string(dir.path().join("episodes_agent_matched.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 18);
        let back: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics_agent_matched.json")).unwrap())
                .unwrap();
        assert_eq!(back.per_seed, rep.per_seed);
    }
}
