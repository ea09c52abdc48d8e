use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_aovr")
}

const SMALL: &str = r#"
[synth]
num_base = 3
num_novel = 2
objects_per_class = 8
test_objects_per_class = 3
dim = 16
rows = 6
cols = 6

[agent]
validation_every = 2

[agent.fusion_train]
epochs = 2

[agent.ppo]
updates = 4
episodes_per_update = 8

[eval]
repeats = 2
trace_episodes = 3
"#;

fn aovr(config: &Path, out: &Path, args: &[&str]) -> Output {
    let o = Command::new(bin())
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--threads", "1", "--seed", "3"])
        .args(args)
        .output()
        .unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn files_with_ext(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == ext) {
                found.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    found.sort();
    found
}

#[test]
fn staged_commands_are_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let runs: Vec<PathBuf> = (0..2).map(|i| tmp.path().join(format!("run{i}"))).collect();
    for out in &runs {
        for cmd in ["synth", "investigate", "train", "eval", "trace", "report"] {
            aovr(&cfg, out, &[cmd]);
        }
    }
    let csvs = files_with_ext(&runs[0], "csv");
    assert_eq!(csvs.len(), 10, "{csvs:?}");
    assert_eq!(csvs, files_with_ext(&runs[1], "csv"));
    for f in csvs.iter().chain(&files_with_ext(&runs[0], "jsonl")) {
        assert_eq!(std::fs::read(runs[0].join(f)).unwrap(), std::fs::read(runs[1].join(f)).unwrap(), "{}", f.display());
    }
    assert_eq!(std::fs::read(runs[0].join("checkpoints/policy.ckpt")).unwrap(), std::fs::read(runs[1].join("checkpoints/policy.ckpt")).unwrap());
}

#[test]
fn run_matches_staged_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let (staged, whole) = (tmp.path().join("staged"), tmp.path().join("whole"));
    for cmd in ["synth", "investigate", "train", "eval", "report"] {
        aovr(&cfg, &staged, &[cmd]);
    }
    aovr(&cfg, &whole, &["run"]);
    for f in ["eval/eval_policy.csv", "investigate/occlusion.csv", "train/training_curve.csv", "summary.csv"] {
        assert_eq!(std::fs::read(staged.join(f)).unwrap(), std::fs::read(whole.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn ingest_accepts_an_external_container() {
    let tmp = tempfile::tempdir().unwrap();
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_tiny.aovr");
    let cfg = tmp.path().join("empty.toml");
    std::fs::write(&cfg, "").unwrap();
    let out = tmp.path().join("ingested");
    let o = aovr(&cfg, &out, &["ingest", "--input", golden.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("validated"));
    assert_eq!(std::fs::read(out.join("dataset.aovr")).unwrap(), std::fs::read(&golden).unwrap());
}

#[test]
fn failures_name_their_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("missing.toml");
    std::fs::write(&cfg, "[dataset]\npath = \"/no/such/world.aovr\"\n").unwrap();
    let o = Command::new(bin()).arg("--config").arg(&cfg).arg("--out").arg(tmp.path()).arg("run").output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage `ingest` failed"));

    let empty = tmp.path().join("empty.toml");
    std::fs::write(&empty, "").unwrap();
    let o = Command::new(bin()).arg("--config").arg(&empty).arg("--out").arg(tmp.path().join("none")).arg("eval").output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage `eval` failed"));

    let o = Command::new(bin()).args(["--config", "/no/such/config.toml", "config"]).output().unwrap();
    assert!(!o.status.success());
}

#[test]
fn config_command_prints_loadable_defaults() {
    let o = Command::new(bin()).arg("config").output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(aovr::harness::ExperimentConfig::from_toml(&text).unwrap(), aovr::harness::ExperimentConfig::default());
}
