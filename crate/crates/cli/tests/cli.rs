use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ebsde-lab"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn ebsde-lab")
}

fn manifest(dir: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("runtime");
    v
}

#[test]
fn missing_driver_is_a_parse_error_naming_the_section() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    let text = std::fs::read_to_string(configs().join("ou_quadratic.toml")).unwrap();
    let cut: String = text
        .split("\n[")
        .filter(|s| !s.starts_with("driver]"))
        .collect::<Vec<_>>()
        .join("\n[");
    std::fs::write(&cfg, cut).unwrap();
    let out = run(&["ebsde", "--config", cfg.to_str().unwrap(), "--out-dir", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[driver]"), "{err}");
}

#[test]
fn unknown_key_is_reported_with_its_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "simulate",
        "--config",
        configs().join("ou_stationary.toml").to_str().unwrap(),
        "--override",
        "simulation.stepz=3",
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("simulation.stepz"), "{err}");
}

#[test]
fn same_seed_gives_the_same_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("periodic_jumps.toml");
    let mut dirs = Vec::new();
    for i in 0..2 {
        let dir = tmp.path().join(format!("run{i}"));
        let out = run(&[
            "discounted",
            "--config",
            cfg.to_str().unwrap(),
            "--seed=7",
            "--override",
            "simulation.n_paths=100",
            "--override",
            "discounted.horizons=[2.0, 5.0]",
            "--out-dir",
            dir.to_str().unwrap(),
        ]);
        assert!(matches!(out.status.code(), Some(0) | Some(2)), "{}", String::from_utf8_lossy(&out.stderr));
        dirs.push(dir);
    }
    let (a, b) = (manifest(&dirs[0]), manifest(&dirs[1]));
    assert_eq!(a, b);
    assert_eq!(a["seed"], 7);
    assert_eq!(a["subcommand"], "discounted");
    for art in a["artifacts"].as_array().unwrap() {
        let f = art["file"].as_str().unwrap();
        assert_eq!(std::fs::read(dirs[0].join(f)).unwrap(), std::fs::read(dirs[1].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn shipped_configs_parse() {
    let root = configs().join("..");
    let all = ebsde_cli::shipped_configs(&root).unwrap();
    assert!(all.len() >= 8);
    for p in all {
        let c = ebsde_cli::load(&p, &[], None).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        c.config.coefficients().unwrap();
        c.config.noise().unwrap();
    }
}
