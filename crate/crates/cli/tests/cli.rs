use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hemulab::geo::solar::{parse_utc, sun_position};
use hemulab::pipeline::{EvalReport, TrainSummary};

const TINY: &str = r#"{
  "name": "tiny",
  "scene": { "rows": 12, "cols": 12, "years": 3, "hours_per_year": 96, "horizon_sectors": 8 },
  "dataset": { "context": 2, "albedo_as_input": true },
  "model": { "kind": "tsvit", "t": 2, "h": 6, "w": 6, "d": 8, "l_t": 1, "l_s": 1, "heads": 2, "mlp_ratio": 2 },
  "baseline": { "patch_size": 3, "width": 4, "n_blocks": 1 },
  "train": { "epochs": 1, "steps_per_epoch": 4, "batch_size": 2, "val_samples": 4 },
  "baseline_train": { "epochs": 1, "steps_per_epoch": 4, "batch_size": 8, "val_samples": 16 },
  "eval": { "contexts": [1, 2], "frame_stride": 5, "baseline_pixels": 16, "reseeds": 1,
            "perm_repeats": 2, "perm_frame_stride": 5, "perm_tile": 6 }
}"#;

fn hemulab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hemulab")).args(args).env("HEMULAB_THREADS", "1").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_dir(o: &Output) -> PathBuf {
    let s = stdout(o);
    let line = s.lines().find_map(|l| l.strip_prefix("run directory: ")).unwrap_or_else(|| panic!("no run directory in {s}"));
    PathBuf::from(line)
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn every_subcommand_has_help() {
    for sub in ["simulate", "train", "evaluate", "context-sweep", "ablate", "perm-importance", "solar", "terrain", "report"] {
        let o = hemulab(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(stdout(&o).contains("Usage"), "{sub}");
    }
    assert_eq!(hemulab(&["--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(hemulab(&["fly"]).status.code(), Some(1));
    assert_eq!(hemulab(&["simulate", "--bogus"]).status.code(), Some(1));
    assert_eq!(hemulab(&[]).status.code(), Some(1));
    assert_eq!(hemulab(&["solar", "--lat", "1", "--lon", "2", "--time", "yesterday"]).status.code(), Some(1));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{ "scene": { "rows": 12, "colz": 3 } }"#).unwrap();
    let o = hemulab(&["simulate", "--config", bad.to_str().unwrap(), "--out", &out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colz"));
    let missing = dir.path().join("missing.json");
    assert_eq!(hemulab(&["simulate", "--config", missing.to_str().unwrap(), "--out", &out]).status.code(), Some(1));
    let cfg = tiny_config(dir.path());
    assert_eq!(hemulab(&["evaluate", "--config", &cfg, "--out", &out]).status.code(), Some(1), "no checkpoint to resolve");
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("short.json");
    fs::write(&cfg, TINY.replace("\"years\": 3", "\"years\": 2")).unwrap();
    let o = hemulab(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn solar_matches_the_library() {
    let o = hemulab(&["solar", "--lat", "46.8", "--lon", "8.2", "--time", "2019-06-21T11:00Z"]);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    let nums: Vec<f64> = s.split_whitespace().filter_map(|w| w.parse().ok()).collect();
    let p = sun_position(46.8, 8.2, &parse_utc("2019-06-21T11:00Z").unwrap()).unwrap();
    assert!((nums[0] - p.zenith).abs() < 1e-4 && (nums[1] - p.azimuth).abs() < 1e-4, "{s}");
    // Half an hour before local solar noon on the solstice: near lat − 23.44°, sun still east of south.
    assert!((nums[0] - (46.8 - 23.44)).abs() < 1.5);
    assert!(nums[1] > 150.0 && nums[1] < 180.0);
    let south = hemulab(&["solar", "--lat", "-33.9", "--lon", "18.4", "--time", "2019-06-21T10:45Z"]);
    assert_eq!(south.status.code(), Some(0));
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("runs").display().to_string();
    let a = hemulab(&["simulate", "--config", &cfg, "--seed", "7", "--out", &out]);
    let b = hemulab(&["simulate", "--config", &cfg, "--seed", "7", "--out", &out]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let (ra, rb) = (run_dir(&a), run_dir(&b));
    assert_ne!(ra, rb);
    assert_eq!(files(&ra.join("dataset")), files(&rb.join("dataset")));
    assert_eq!(fs::read(ra.join("reports/simulate.json")).unwrap(), fs::read(rb.join("reports/simulate.json")).unwrap());
    for f in ["config.json", "manifest.json", "logs.jsonl"] {
        assert!(ra.join(f).is_file() || f == "logs.jsonl", "{f}");
    }
    let c = hemulab(&["simulate", "--config", &cfg, "--seed", "8", "--out", &out]);
    assert_ne!(files(&ra.join("dataset")), files(&run_dir(&c).join("dataset")));
}

#[test]
fn train_then_evaluate_reproduces_best_validation_mse() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("runs").display().to_string();
    let t = hemulab(&["train", "--config", &cfg, "--out", &out]);
    assert_eq!(t.status.code(), Some(0), "{}", String::from_utf8_lossy(&t.stderr));
    let train_dir = run_dir(&t);
    assert!(train_dir.join("checkpoints/best/params.f32").is_file());
    assert!(fs::read_to_string(train_dir.join("logs.jsonl")).unwrap().lines().count() >= 4);
    let summary: TrainSummary = serde_json::from_str(&fs::read_to_string(train_dir.join("reports/train.json")).unwrap()).unwrap();
    assert_eq!(summary.context, 2);
    assert_eq!(summary.channels.last().unwrap(), "albedo");

    let e = hemulab(&["evaluate", "--config", &cfg, "--checkpoint", "best", "--out", &out]);
    assert_eq!(e.status.code(), Some(0), "{}", String::from_utf8_lossy(&e.stderr));
    let eval_dir = run_dir(&e);
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(eval_dir.join("reports/eval.json")).unwrap()).unwrap();
    assert_eq!(report.val_mse, summary.best_val_mse);
    assert_eq!(report.best_val_mse, summary.best_val_mse);
    assert!(fs::read_to_string(eval_dir.join("reports/rmse_grid.csv")).unwrap().starts_with("kt_bin"));
    let manifest = fs::read_to_string(eval_dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("config_hash") && manifest.contains("checkpoint"));

    let r = hemulab(&["report", "--config", &cfg, "--run", eval_dir.to_str().unwrap(), "--out", &out]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(run_dir(&r).join("reports/rmse_grid_climatology.csv").is_file());

    let p = hemulab(&["perm-importance", "--config", &cfg, "--checkpoint", train_dir.to_str().unwrap(), "--out", &out]);
    assert_eq!(p.status.code(), Some(0), "{}", String::from_utf8_lossy(&p.stderr));
    let csv = fs::read_to_string(run_dir(&p).join("reports/importance.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + summary.channels.len());
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("runs").display().to_string();
    let o = hemulab(&["train", "--config", &cfg, "--out", &out, "--model", "convresnet", "--no-albedo", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s: TrainSummary = serde_json::from_str(&fs::read_to_string(run_dir(&o).join("reports/train.json")).unwrap()).unwrap();
    assert_eq!((s.model.as_str(), s.context, s.seed), ("convresnet", 1, 3));
    assert!(!s.channels.contains(&"albedo".to_string()));
    let o = hemulab(&["train", "--config", &cfg, "--out", &out, "--context-length", "1"]);
    let s: TrainSummary = serde_json::from_str(&fs::read_to_string(run_dir(&o).join("reports/train.json")).unwrap()).unwrap();
    assert_eq!(s.context, 1);
}

#[test]
fn sweep_and_ablation_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("runs").display().to_string();
    let s = hemulab(&["context-sweep", "--config", &cfg, "--out", &out, "--jobs", "2"]);
    assert_eq!(s.status.code(), Some(0), "{}", String::from_utf8_lossy(&s.stderr));
    let sweep = run_dir(&s);
    let csv = fs::read_to_string(sweep.join("reports/sweep.csv")).unwrap();
    for model in ["tsvit", "convresnet", "climatology"] {
        assert!(csv.lines().any(|l| l.starts_with(model)), "{model}");
    }
    assert!(sweep.join("reports/sweep_summary.csv").is_file());

    let a = hemulab(&["ablate", "--config", &cfg, "--out", &out, "--context-length", "1"]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let csv = fs::read_to_string(run_dir(&a).join("reports/ablation.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("hrv,")));
    assert!(csv.lines().any(|l| l.starts_with("reference,")));
}

#[test]
fn terrain_writes_rasters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("runs").display().to_string();
    let o = hemulab(&["terrain", "--config", &cfg, "--time", "2019-06-21T11:00Z", "--out", &out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = run_dir(&o).join("reports/terrain");
    for stem in ["dem", "slope", "aspect_sin", "aspect_cos", "shadow", "f_corr"] {
        assert_eq!(fs::read(r.join(format!("{stem}.f32"))).unwrap().len(), 12 * 12 * 4, "{stem}");
    }
}
