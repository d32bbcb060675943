//! Command-line runs driven through the library entry point.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use voco::cli::{run, Cli, CliError};

const TINY: &str = r#"
[data]
count = 4
dims = [16, 16, 8]
labeled_fraction = 0.5

[trainer]
grid_shape = [2, 2]
cell_size = [8, 8, 8]
batch_volumes = 2
feature_dim = 8
steps = 3

[omni]
seg_crop = [16, 16, 8]
cycles = 1

[eval]
crops = 10
grid_shape = [2, 2]
cell_size = [8, 8, 8]
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), TINY).unwrap();
        Self { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("runs")
    }

    fn voco(&self, args: &[&str]) -> Result<PathBuf, CliError> {
        let before: Vec<PathBuf> = runs(&self.out());
        let (config, out) = (self.dir.path().join("run.toml"), self.out());
        let mut argv = vec!["voco", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
        argv.extend_from_slice(args);
        run(&Cli::try_parse_from(argv).unwrap())?;
        let fresh: Vec<PathBuf> = runs(&self.out()).into_iter().filter(|p| !before.contains(p)).collect();
        assert_eq!(fresh.len(), 1);
        Ok(fresh[0].clone())
    }

    fn dataset(&self) -> PathBuf {
        self.voco(&["gen-phantoms"]).unwrap().join("data/manifest.jsonl")
    }
}

fn runs(root: &Path) -> Vec<PathBuf> {
    fs::read_dir(root).map(|d| d.map(|e| e.unwrap().path()).collect()).unwrap_or_default()
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(snapshot(&p));
        } else {
            out.push((p.clone(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn zero_step_pretrain_writes_initial_checkpoint_and_empty_metrics() {
    let ws = Workspace::new();
    let data = ws.dataset();
    let run = ws.voco(&["pretrain", "--data", data.to_str().unwrap(), "--steps", "0"]).unwrap();
    for f in ["config.json", "manifest.json", "metrics.csv", "checkpoints/step_000000.ckpt", "reports"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap(), "step,l_pred,l_reg,l_inter,l_ssl\n");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "pretrain");
    assert_eq!(manifest["seed"], 0);
}

#[test]
fn repeated_runs_emit_identical_metrics_and_leave_inputs_alone() {
    let ws = Workspace::new();
    let data = ws.dataset();
    let data_dir = data.parent().unwrap().to_path_buf();
    let before = snapshot(&data_dir);
    let a = ws.voco(&["--seed", "5", "pretrain", "--data", data.to_str().unwrap()]).unwrap();
    let b = ws.voco(&["--seed", "5", "pretrain", "--data", data.to_str().unwrap()]).unwrap();
    let ma = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 4);
    let s1 = ws.voco(&["omni", "stage1", "--data", data.to_str().unwrap()]).unwrap();
    let ckpt = s1.join("checkpoints/stage1.ckpt");
    let pl = ws
        .voco(&["omni", "pseudo-label", "--data", data.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--threshold", "0"])
        .unwrap();
    let list = pl.join("reports/pseudo_labels.json");
    ws.voco(&[
        "omni",
        "stage2",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--pseudo",
        list.to_str().unwrap(),
    ])
    .unwrap();
    ws.voco(&["eval-position", "--data", data.to_str().unwrap(), "--checkpoint", a.join("checkpoints/final.ckpt").to_str().unwrap()])
        .unwrap();
    assert_eq!(snapshot(&data_dir), before);
}

#[test]
fn inspect_labels_reports_the_reference_geometry() {
    let ws = Workspace::new();
    let run = ws.voco(&["inspect-labels"]).unwrap();
    let y: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("reports/labels.json")).unwrap()).unwrap();
    let v: Vec<f64> = serde_json::from_value(y["values"].clone()).unwrap();
    for (cell, want) in [(0, 0.2), (1, 0.3), (4, 0.2), (5, 0.3)] {
        assert!((v[cell] - want).abs() < 1e-12);
    }
}

#[test]
fn failures_are_categorized() {
    let ws = Workspace::new();
    fs::write(ws.dir.path().join("run.toml"), "[trainer]\nsteps = 1\nlearnin_rate = 2\n").unwrap();
    let err = ws.voco(&["gen-phantoms"]).unwrap_err();
    assert_eq!(err.category(), "config");
    assert!(err.to_string().contains("learnin_rate") && err.to_string().contains("line 3"));

    fs::write(ws.dir.path().join("run.toml"), "").unwrap();
    let missing = ws.dir.path().join("nope.jsonl");
    let cli = Cli::try_parse_from(["voco", "--out", ws.out().to_str().unwrap(), "pretrain", "--data", missing.to_str().unwrap()]).unwrap();
    assert_eq!(run(&cli).unwrap_err().category(), "data");
    assert!(Cli::try_parse_from(["voco", "probe", "--task", "liver"]).is_err());
}
