use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gnsn(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gnsn"))
        .args(args)
        .env("GNSN_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

fn error_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap()
}

fn small_graph(dir: &Path) -> String {
    let path = dir.join("g.json");
    let p = path.to_str().unwrap().to_string();
    let out = gnsn(&["csbm", "--out", &p, "--nodes", "40", "--intra-p", "0.3", "--inter-p", "0.05", "--splits", "2"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    p
}

#[test]
fn bad_parameters_exit_with_input_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gnsn(&["csbm", "--out", "x.json", "--intra-p", "1.2"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "input");
    assert!(err["error"]["message"].as_str().unwrap().contains("intra_p"));
}

#[test]
fn missing_dataset_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gnsn(&["train", "--dataset", "no/such/graph.json"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(error_json(&out)["error"]["message"].as_str().unwrap().contains("no/such/graph.json"));
}

#[test]
fn unknown_variant_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let g = small_graph(tmp.path());
    let out = gnsn(&["train", "--dataset", &g, "--variant", "sideways"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_artifacts_and_echoes_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let g = small_graph(tmp.path());
    let out = gnsn(
        &["train", "--dataset", &g, "--variant", "pure_convection", "--epochs", "4", "--seeds", "2", "--run-id", "r"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("r");
    for f in ["config.json", "metrics.json", "timing.json", "curves.csv", "params/run_0.json", "params/run_1.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let cfg: Value = serde_json::from_slice(&std::fs::read(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["model"]["dynamics"]["variant"], "pure_convection");
    assert_eq!(cfg["train"]["epochs"], 4);

    let metrics: Value = serde_json::from_slice(&std::fs::read(dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["aggregate"]["n_runs"], 2);
    // run k pairs split k with seed k
    assert_eq!(metrics["runs"][1]["split"], "1");
    assert_eq!(metrics["runs"][1]["seed"], 1);

    let curves = std::fs::read_to_string(dir.join("curves.csv")).unwrap();
    assert!(curves.starts_with("run,split,seed,epoch,"));
    assert_eq!(curves.lines().count(), 1 + 2 * 4);
}

#[test]
fn stats_refuses_variants_without_velocity() {
    let tmp = tempfile::tempdir().unwrap();
    let g = small_graph(tmp.path());
    let out = gnsn(&["train", "--dataset", &g, "--epochs", "2", "--run-id", "r"], tmp.path());
    assert!(out.status.success());
    let params = tmp.path().join("r/params/run_0.json");
    let out = gnsn(
        &["stats", "--dataset", &g, "--params", params.to_str().unwrap(), "--variant", "pure_diffusion"],
        tmp.path(),
    );
    assert!(!out.status.success());

    let out = gnsn(&["stats", "--dataset", &g, "--params", params.to_str().unwrap(), "--run-id", "s"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("s/velocity.csv")).unwrap();
    assert!(csv.starts_with("node_id,u,h_local,label"));
    assert_eq!(csv.lines().count(), 41);
}

#[test]
fn convert_round_trip_and_asymmetry() {
    let tmp = tempfile::tempdir().unwrap();
    let edges = tmp.path().join("e.txt");
    let feats = tmp.path().join("f.csv");
    std::fs::write(&edges, "0 1\n1 2\n2 3\n3 0\n1 1\n").unwrap();
    std::fs::write(&feats, "0.5,1.0,0\n0.1,0.2,1\n-0.3,0.4,0\n0.9,-0.1,1\n").unwrap();
    let out_path = tmp.path().join("g.json");
    let args = |extra: &[&'static str]| {
        let mut v = vec![
            "convert".to_string(),
            "--edges".into(),
            edges.display().to_string(),
            "--features".into(),
            feats.display().to_string(),
            "--out".into(),
            out_path.display().to_string(),
        ];
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let run = |a: Vec<String>| gnsn(&a.iter().map(String::as_str).collect::<Vec<_>>(), tmp.path());

    let out = run(args(&["--drop-self-loops"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["num_nodes"], 4);

    let out = run(args(&["--require-symmetric"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_rejects_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"seeds": 1, "learning_rate": 0.1}"#).unwrap();
    let out = gnsn(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}
