use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 4
[scenes]
size = 8
n_train_scenes = 2
n_test_scenes = 1
train_episodes_per_scene = 4
test_episodes_per_scene = 3
[model]
image_size = 32
[encoder]
channels = [4, 8, 8, 8]
feature_dim = 4
groups = 2
[policy]
hidden = 8
action_embed = 3
layers = 1
[ppo]
horizon = 8
num_envs = 2
minibatches = 2
epochs = 1
[train]
total_env_steps = 32
checkpoint_every = 0
[eval]
seeds = [0]
batch = 2
settings = ["agent_matched"]
[ablate]
seeds = [0, 1]
"#;

struct Run {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Run {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let config = tmp.path().join("run.toml");
        std::fs::write(&config, TINY).unwrap();
        let out = tmp.path().join("out");
        Self { _tmp: tmp, config, out }
    }

    fn cmd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_corrnav"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(&self.out)
            .args(args)
            .env_remove("CORRNAV_SEED")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.cmd(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }
}

fn scene_ids(path: &Path) -> BTreeSet<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["scene_id"].as_str().unwrap().to_string())
        .collect()
}

#[test]
fn gen_is_reproducible_and_splits_scenes() {
    let a = Run::new();
    let b = Run::new();
    a.ok(&["gen"]);
    b.ok(&["gen"]);
    for f in ["train.jsonl", "test_agent_matched.jsonl", "test_user_matched.jsonl", "test_extreme.jsonl"] {
        let fa = std::fs::read(a.out.join("data").join(f)).unwrap();
        assert_eq!(fa, std::fs::read(b.out.join("data").join(f)).unwrap(), "{f}");
    }
    let train = scene_ids(&a.out.join("data/train.jsonl"));
    let test = scene_ids(&a.out.join("data/test_agent_matched.jsonl"));
    assert_eq!((train.len(), test.len()), (2, 1));
    assert!(train.is_disjoint(&test));
    assert_eq!(std::fs::read_dir(a.out.join("data/scenes")).unwrap().count(), 3);
    // all settings share start and goal poses
    let starts = |f: &str| -> Vec<(serde_json::Value, serde_json::Value)> {
        std::fs::read_to_string(a.out.join("data").join(f))
            .unwrap()
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                (v["start"].clone(), v["goal"].clone())
            })
            .collect()
    };
    assert_eq!(starts("test_agent_matched.jsonl"), starts("test_extreme.jsonl"));
}

#[test]
fn different_seeds_give_different_data() {
    let a = Run::new();
    a.ok(&["gen"]);
    let b = Run::new();
    b.ok(&["--seed", "5", "gen"]);
    let fa = std::fs::read(a.out.join("data/train.jsonl")).unwrap();
    assert_ne!(fa, std::fs::read(b.out.join("data/train.jsonl")).unwrap());
}

#[test]
fn exit_codes() {
    let r = Run::new();
    std::fs::write(&r.config, "[ppo]\nclip_eps = 3.0\n").unwrap();
    assert_eq!(r.cmd(&["gen"]).status.code(), Some(1));
    std::fs::write(&r.config, "no_such_key = 1\n").unwrap();
    assert_eq!(r.cmd(&["gen"]).status.code(), Some(1));

    let r = Run::new();
    let o = r.cmd(&["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("corrnav gen"));
    r.ok(&["gen"]);
    let o = r.cmd(&["gen"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--overwrite"));
    r.ok(&["gen", "--overwrite"]);
    assert_eq!(r.cmd(&["eval"]).status.code(), Some(2));
}

#[test]
fn env_overrides_reach_the_run() {
    let r = Run::new();
    let o = Command::new(env!("CARGO_BIN_EXE_corrnav"))
        .arg("--config")
        .arg(&r.config)
        .arg("--out")
        .arg(&r.out)
        .arg("gen")
        .env("CORRNAV_SCENES__N_TEST_SCENES", "2")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(scene_ids(&r.out.join("data/test_extreme.jsonl")).len(), 2);
}

#[test]
fn train_eval_render_ablate() {
    let r = Run::new();
    r.ok(&["gen"]);
    let train = r.ok(&["train"]);
    assert!(!train.is_empty());
    assert!(r.out.join("train/checkpoints/last.bin").exists());
    assert!(r.out.join("train/checkpoints/best.bin").exists());

    let inputs = |r: &Run| -> Vec<Vec<u8>> {
        let mut files = vec![r.out.join("train/checkpoints/best.bin"), r.out.join("train/checkpoints/last.bin")];
        for e in std::fs::read_dir(r.out.join("data")).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                files.push(p);
            }
        }
        files.sort();
        files.iter().map(|p| std::fs::read(p).unwrap()).collect()
    };
    let before = inputs(&r);
    r.ok(&["eval"]);
    // evaluation only reads checkpoints and episode files
    assert!(before == inputs(&r));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(r.out.join("eval/metrics_agent_matched.json")).unwrap()).unwrap();
    let text = metrics.to_string();
    assert!(text.contains("sr") && text.contains("spl"), "{text}");
    assert!(!r.out.join("eval/metrics_extreme.json").exists());
    let lines = std::fs::read_to_string(r.out.join("eval/episodes_agent_matched.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);

    let o = r.cmd(&["--overwrite", "eval"]);
    assert!(o.status.success());
    // the checkpoint holds a direction-aware policy
    let o = Command::new(env!("CARGO_BIN_EXE_corrnav"))
        .arg("--config")
        .arg(&r.config)
        .arg("--out")
        .arg(&r.out)
        .args(["--overwrite", "eval"])
        .env("CORRNAV_MODEL__VARIANT", "dense")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("variant"), "{}", String::from_utf8_lossy(&o.stderr));

    r.ok(&["render", "--episode-id", "8"]);
    let img = std::fs::read(r.out.join("render/episode_8_agent_matched.ppm")).unwrap();
    assert!(img.starts_with(b"P6\n"));
    assert_eq!(r.cmd(&["render", "--episode-id", "0"]).status.code(), Some(2));

    let table = r.ok(&["ablate"]);
    assert!(table.contains("direction_aware") && table.contains("minimalist"), "{table}");
    let csv = std::fs::read_to_string(r.out.join("ablate/ablation.csv")).unwrap();
    // header plus 3 variants x 3 settings
    assert_eq!(csv.lines().count(), 10, "{csv}");
}
