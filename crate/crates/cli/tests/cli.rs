use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use proptest::prelude::*;
use sparsepose_cli::commands::{cmd_estimate, cmd_eval, cmd_fuse, cmd_stats, cmd_synth, cmd_targets, PoseSource, Repr};
use sparsepose_cli::PipelineConfig;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparsepose"))
}

fn synth(dir: &Path, name: &str, cfg: &PipelineConfig) -> PathBuf {
    let out = dir.join(name);
    cmd_synth(cfg, &out).unwrap();
    out
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn json_seed(path: &Path) -> u64 {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v["seed"].as_u64().unwrap_or_else(|| panic!("{} has no seed", path.display()))
}

#[test]
fn synth_is_deterministic_for_a_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = PipelineConfig::default();
    let a = synth(dir.path(), "a", &cfg);
    let b = synth(dir.path(), "b", &cfg);
    assert_eq!(files(&a), files(&b));

    let other = PipelineConfig { seed: cfg.seed + 1, ..cfg };
    let c = synth(dir.path(), "c", &other);
    assert_ne!(files(&a), files(&c));
}

#[test]
fn oracle_estimates_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = PipelineConfig::default();
    let scene = synth(dir.path(), "scene", &cfg);
    let a = dir.path().join("est_a");
    let b = dir.path().join("est_b");
    cmd_estimate(&cfg, &scene, PoseSource::Oracle, &a).unwrap();
    cmd_estimate(&cfg, &scene, PoseSource::Oracle, &b).unwrap();
    assert_eq!(files(&a), files(&b));
}

#[test]
fn every_output_echoes_the_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = PipelineConfig { seed: 77, ..PipelineConfig::default() };
    let scene = synth(dir.path(), "scene", &cfg);
    let tag = "# seed=77";

    let ply = dir.path().join("cloud.ply");
    cmd_fuse(&cfg, &scene, Repr::Cloud, &ply).unwrap();
    assert_eq!(json_seed(&dir.path().join("cloud.ply.json")), 77);

    let dump = dir.path().join("tsdf.bin");
    cmd_fuse(&cfg, &scene, Repr::Tsdf, &dump).unwrap();
    assert_eq!(json_seed(&dir.path().join("tsdf.bin.json")), 77);

    let targets = dir.path().join("targets");
    cmd_targets(&cfg, &scene, &targets).unwrap();
    assert_eq!(first_line(&targets.join("coarse.csv")), tag);
    assert_eq!(first_line(&targets.join("fine.csv")), tag);
    assert_eq!(json_seed(&targets.join("targets.json")), 77);

    let est = dir.path().join("est");
    cmd_estimate(&cfg, &scene, PoseSource::Oracle, &est).unwrap();
    assert_eq!(first_line(&est.join("poses.csv")), tag);
    assert_eq!(json_seed(&est.join("poses.json")), 77);

    let eval = dir.path().join("eval");
    let summary = cmd_eval(&cfg, &est.join("poses.csv"), &scene, &eval).unwrap();
    assert_eq!(summary.matched, summary.objects);
    assert_eq!(first_line(&eval.join("metrics.csv")), tag);
    assert_eq!(json_seed(&eval.join("summary.json")), 77);

    let stats = dir.path().join("stats.csv");
    cmd_stats(&cfg, &scene, &[8.0, 4.0], &stats).unwrap();
    assert_eq!(first_line(&stats), tag);
    assert_eq!(json_seed(&dir.path().join("stats.csv.json")), 77);
}

#[test]
fn synth_refuses_to_replace_a_foreign_directory() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("keep");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("notes.txt"), "mine").unwrap();
    let err = cmd_synth(&PipelineConfig::default(), &out).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert_eq!(fs::read_to_string(out.join("notes.txt")).unwrap(), "mine");
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "seed = 5\n").unwrap();
    let out = bin().args(["--seed", "9", "config", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success());
    let effective = PipelineConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(effective.seed, 9);

    let out = bin().arg("config").arg("--config").arg(&cfg).output().unwrap();
    let effective = PipelineConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(effective.seed, 5);
}

#[test]
fn config_errors_exit_with_2() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[fusion]\ntheta_mm = -1.0\n").unwrap();
    assert_eq!(bin().arg("--config").arg(&bad).arg("config").status().unwrap().code(), Some(2));

    fs::write(&bad, "unknown_key = 1\n").unwrap();
    assert_eq!(bin().arg("--config").arg(&bad).arg("config").status().unwrap().code(), Some(2));

    let missing = dir.path().join("missing.toml");
    assert_eq!(bin().arg("--config").arg(&missing).arg("config").status().unwrap().code(), Some(2));

    assert_eq!(bin().args(["stats", "x", "--thetas", "abc", "--out", "y"]).status().unwrap().code(), Some(2));
}

#[test]
fn data_errors_exit_with_3() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("no_scene");
    let out = dir.path().join("o.ply");
    let status = bin().arg("fuse").arg(&missing).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(3));
    assert!(!out.exists());

    let scene = synth(dir.path(), "scene", &PipelineConfig::default());
    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let status = bin().arg("estimate").arg(&scene).arg("--checkpoint").arg(&junk).arg("--out").arg(dir.path().join("e")).status().unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn binary_runs_the_oracle_pipeline() {
    let dir = TempDir::new().unwrap();
    let scene = dir.path().join("scene");
    let est = dir.path().join("est");
    let eval = dir.path().join("eval");
    assert!(bin().args(["--seed", "3", "synth", "--out"]).arg(&scene).status().unwrap().success());
    assert!(bin().args(["--seed", "3", "estimate"]).arg(&scene).arg("--oracle").arg("--out").arg(&est).status().unwrap().success());
    let out = bin().args(["--seed", "3", "eval", "--mssd-mm", "--poses"]).arg(est.join("poses.csv")).arg("--scene").arg(&scene).arg("--out").arg(&eval).output().unwrap();
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["seed"], 3);
    assert_eq!(summary["matched"], summary["objects"]);
    assert!(!dir.path().read_dir().unwrap().any(|e| e.unwrap().file_name().to_string_lossy().contains("tmp")));
}

fn random_config() -> impl Strategy<Value = PipelineConfig> {
    (
        any::<u64>(),
        prop::sample::select(vec![1.0f64, 2.0, 4.0, 8.0]),
        1usize..20,
        1e-4f64..0.5,
        0.0f64..0.99,
        0.0f64..1.0,
        any::<bool>(),
        (0.1f64..5.0, 0.5f64..4.0),
    )
        .prop_map(|(seed, theta, objects, lr, momentum, warmup, refine, (sigma, focal_gamma))| {
            let mut cfg = PipelineConfig { seed, ..PipelineConfig::default() };
            cfg.fusion.theta_mm = theta;
            cfg.synth.objects = objects;
            cfg.train.lr = lr;
            cfg.train.momentum = momentum;
            cfg.train.warmup_fraction = warmup;
            cfg.voting.refine = refine;
            cfg.heatmap.sigma_c = sigma;
            cfg.heatmap.focal_gamma = focal_gamma;
            cfg
        })
}

proptest! {
    #[test]
    fn config_dump_load_dump_is_byte_identical(cfg in random_config()) {
        let first = cfg.to_toml();
        let loaded = PipelineConfig::from_toml(&first).unwrap();
        prop_assert_eq!(&loaded, &cfg);
        prop_assert_eq!(loaded.to_toml(), first);
    }
}
