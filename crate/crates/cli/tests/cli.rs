use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3

[corpus]
docs_per_class = 10

[model]
layers = 0
embed_dim = 16
joint_dim = 16
ff_dim = 32

[train]
epochs = 2
batch_size = 16

[eval]
gamma_points = 5

[ablation]
alignments = ["both"]
channels = ["clean"]
fusions = ["late"]
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(ws.config(), SMALL).unwrap();
        ws
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("run.toml")
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("runs")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_docalign"))
            .args(args)
            .arg("--config")
            .arg(self.config())
            .arg("--out")
            .arg(self.out())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    /// The single run directory created so far under the output root.
    fn run_dir(&self) -> PathBuf {
        let dirs: Vec<PathBuf> = fs::read_dir(self.out())
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_dir())
            .collect();
        assert_eq!(dirs.len(), 1, "{dirs:?}");
        dirs[0].clone()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn split_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir.join("splits"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn gen_prints_manifest_and_summary() {
    let ws = Workspace::new();
    let stdout = ws.ok(&["gen"]);
    let manifest = PathBuf::from(stdout.lines().next().unwrap());
    assert!(manifest.is_file());
    assert!(stdout.contains("160 records, 16 classes, channels: clean, noisy"));
    assert!(ws.run_dir().join("config.toml").is_file());
}

#[test]
fn splits_default_and_incremental() {
    let ws = Workspace::new();
    ws.ok(&["splits"]);
    assert_eq!(split_files(&ws.run_dir()), ["A.json", "B.json", "C.json", "D.json"]);

    let rank = ws.dir.path().join("rank.csv");
    let manifest = ws.run_dir().join("corpus/manifest.jsonl");
    let header = fs::read_to_string(&manifest).unwrap();
    let header: String = header.lines().next().unwrap().to_string();
    let classes_start = header.find("\"classes\":[").unwrap() + 11;
    let classes_end = classes_start + header[classes_start..].find(']').unwrap();
    let names: Vec<String> = header[classes_start..classes_end]
        .split(',')
        .map(|s| s.trim_matches('"').to_string())
        .collect();
    assert_eq!(names.len(), 16);
    let mut csv = String::from("class,accuracy\n");
    for (i, n) in names.iter().enumerate() {
        csv.push_str(&format!("{n},{}\n", (i * 7) % 16));
    }
    fs::write(&rank, csv).unwrap();

    let out = ws.run(&["splits", "--incremental", "2..8"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));

    let stdout = ws.ok(&["splits", "--incremental", "2..8", "--rank-csv", rank.to_str().unwrap()]);
    assert_eq!(stdout.lines().count(), 11);
    let incremental: Vec<&str> = stdout.lines().filter(|l| l.contains("S_I_")).collect();
    assert_eq!(incremental.len(), 7);
    for i in 2..=8 {
        assert!(incremental.iter().any(|l| l.ends_with(&format!("S_I_{i}.json"))));
    }
}

#[test]
fn validation_errors_exit_with_two() {
    let ws = Workspace::new();
    let out = ws.run(&["train", "--channel", "docTR"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("available channels: clean, noisy"));

    assert_eq!(code(&ws.run(&["train", "--split", "Q"])), 2);

    fs::write(ws.config(), "seed = 1\n[train]\nepochs = 0\n").unwrap();
    assert_eq!(code(&ws.run(&["gen"])), 2);
    fs::write(ws.config(), "sed = 1\n").unwrap();
    assert_eq!(code(&ws.run(&["gen"])), 2);
}

#[test]
fn train_reuses_completed_checkpoint() {
    let ws = Workspace::new();
    let first = ws.ok(&["train"]);
    let checkpoint = PathBuf::from(first.lines().next().unwrap());
    let bytes = fs::read(&checkpoint).unwrap();
    let modified = fs::metadata(&checkpoint).unwrap().modified().unwrap();
    let second = ws.ok(&["train"]);
    assert_eq!(first, second);
    assert_eq!(fs::metadata(&checkpoint).unwrap().modified().unwrap(), modified);
    assert_eq!(fs::read(&checkpoint).unwrap(), bytes);
    let model_dir = checkpoint.parent().unwrap();
    assert!(model_dir.join("loss_curve.csv").is_file());
    assert!(model_dir.join("train_report.json").is_file());
}

#[test]
fn locked_run_directory_is_a_runtime_failure() {
    let ws = Workspace::new();
    ws.ok(&["gen"]);
    let lock = ws.run_dir().join(".lock");
    fs::write(&lock, "held").unwrap();
    let out = ws.run(&["splits"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
    fs::remove_file(&lock).unwrap();
    ws.ok(&["splits"]);
    assert!(!lock.exists());
}

#[test]
fn eval_writes_reports_and_strict_rejects_foreign_checkpoint() {
    let ws = Workspace::new();
    let stdout = ws.ok(&["eval"]);
    let eval_dir = PathBuf::from(stdout.lines().next().unwrap());
    for f in [
        "zsl.json",
        "gzsl.json",
        "zsl.md",
        "gzsl.md",
        "sweep.csv",
        "zsl_predictions.csv",
    ] {
        assert!(eval_dir.join(f).is_file(), "{f} missing");
    }
    assert!(stdout.contains("ZSL T1"));
    let sweep = fs::read_to_string(eval_dir.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().next().unwrap(), "gamma,u,s,H");
    assert_eq!(sweep.lines().count(), 6);

    let checkpoint = ws.run_dir().join("models/A_both_clean/checkpoint.json");
    assert!(checkpoint.is_file());
    let ckpt = checkpoint.to_str().unwrap();
    // Split A's checkpoint evaluated on split B: a warning by default...
    ws.ok(&["eval", "--split", "B", "--checkpoint", ckpt]);
    // ...and a runtime failure under --strict.
    let out = ws.run(&["eval", "--split", "B", "--checkpoint", ckpt, "--strict"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("provenance"));
    ws.ok(&["eval", "--checkpoint", ckpt, "--strict"]);
}

#[test]
fn ablate_single_cell_and_resume() {
    let ws = Workspace::new();
    let stdout = ws.ok(&["ablate"]);
    assert!(stdout.contains("1 cell reports"));
    let dir = ws.run_dir().join("ablation");
    for f in [
        "metrics.csv",
        "tables.md",
        "incremental_curve.csv",
        "cells/A_both_clean_late.json",
    ] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let curve = fs::read_to_string(dir.join("incremental_curve.csv")).unwrap();
    assert_eq!(curve.lines().next().unwrap(), "split_index,zsl_t1,gzsl_h");
    let metrics = fs::read(dir.join("metrics.csv")).unwrap();
    let checkpoint = ws.run_dir().join("models/A_both_clean/checkpoint.json");
    let modified = fs::metadata(&checkpoint).unwrap().modified().unwrap();
    ws.ok(&["ablate"]);
    assert_eq!(fs::metadata(&checkpoint).unwrap().modified().unwrap(), modified);
    assert_eq!(fs::read(dir.join("metrics.csv")).unwrap(), metrics);
}
