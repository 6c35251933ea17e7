use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn modalign(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modalign")).arg("--out").arg(out).args(args).output().unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = modalign(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(out: &Path, args: &[&str]) -> i32 {
    modalign(out, args).status.code().unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn csv_rows(path: PathBuf) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["--config", "/nonexistent/cfg.json", "train"]), 2);
    let bad = write(d, "bad.json", r#"{"data": {"identities": 2}}"#);
    assert_eq!(code(d, &["--config", &bad, "train"]), 2);
    let unknown = write(d, "unknown.json", r#"{"colour": 1}"#);
    assert_eq!(code(d, &["--config", &unknown, "gen"]), 2);

    let x = write(d, "x.csv", "1,2\n3,4\n");
    let ragged = write(d, "ragged.csv", "1,2\n3\n");
    assert_eq!(code(d, &["mmd", &x, &ragged]), 3);
    assert_eq!(code(d, &["eval", "--checkpoint", "/nonexistent/ckpt.bin"]), 3);
    let garbage = write(d, "garbage.bin", "not a checkpoint");
    assert_eq!(code(d, &["eval", "--checkpoint", &garbage]), 2);

    let zeros = write(d, "zeros.csv", "0,0\n0,0\n0,0\n");
    assert_eq!(code(d, &["mmd", &zeros, &zeros]), 4);
}

#[test]
fn eval_is_deterministic_and_train_loss_falls() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "11", "train"]);
    let train = json(d.join("train.json"));
    assert!(train["final_total"].as_f64().unwrap() < train["initial_total"].as_f64().unwrap());
    let losses = csv_rows(d.join("losses.csv"));
    assert_eq!(losses.len(), 21);

    ok(d, &["--seed", "11", "eval"]);
    let first = fs::read(d.join("metrics.json")).unwrap();
    ok(d, &["--seed", "11", "eval"]);
    assert_eq!(first, fs::read(d.join("metrics.json")).unwrap());

    let text = String::from_utf8(first.clone()).unwrap();
    let at: Vec<usize> = ["seed", "ablation", "ir_to_rgb", "rgb_to_ir", "rank1", "distance"]
        .iter()
        .map(|k| text.find(&format!("\"{k}\":")).unwrap())
        .collect();
    assert!(at.windows(2).all(|w| w[0] < w[1]), "{at:?}");
    let m: Value = serde_json::from_slice(&first).unwrap();
    let rate = m["ir_to_rgb"]["cmc"][0]["rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    let mean = 50.0 * (rate + m["rgb_to_ir"]["cmc"][0]["rate"].as_f64().unwrap());
    assert!((m["rank1"].as_f64().unwrap() - mean).abs() <= 1e-12);
}

#[test]
fn sanity_mode_and_incompatible_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(d, "small.json", r#"{"train": {"epochs": 3}}"#);
    ok(d, &["--config", &cfg, "train"]);
    ok(d, &["--config", &cfg, "eval", "--sanity"]);
    let s = json(d.join("sanity.json"));
    for dir in ["rgb_to_rgb", "ir_to_ir"] {
        let r = s[dir]["cmc"][0]["rate"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&r), "{dir}: {r}");
    }

    let wider = write(d, "wider.json", r#"{"train": {"epochs": 3}, "model": {"hidden": 8}}"#);
    assert_eq!(code(d, &["--config", &wider, "eval"]), 2);
}

#[test]
fn single_point_sweep_matches_train_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(d, "small.json", r#"{"train": {"epochs": 5}}"#);
    let sweep = d.join("sweep");
    ok(&sweep, &["--config", &cfg, "--seed", "3", "sweep", "--axis", "ablation", "--values", "M4", "--seeds", "1"]);
    let runs = csv_rows(sweep.join("sweep_ablation_runs.csv"));
    assert_eq!(runs[0], ["value", "seed", "rank1", "map", "minp", "gap"]);

    let single = d.join("single");
    ok(&single, &["--config", &cfg, "--seed", "3", "train"]);
    ok(&single, &["--config", &cfg, "--seed", "3", "eval"]);
    let m = json(single.join("metrics.json"));
    let swept: f64 = runs[1][2].parse().unwrap();
    assert_eq!(swept, m["rank1"].as_f64().unwrap());
    let gap: f64 = runs[1][5].parse().unwrap();
    assert_eq!(gap, m["distance"]["gap"].as_f64().unwrap());
}

#[test]
fn sweep_writes_one_row_per_point_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(d, "small.json", r#"{"train": {"epochs": 2}}"#);
    ok(d, &["--config", &cfg, "--threads", "2", "sweep", "--axis", "weights", "--values", "0.2:0.8,0.8:0.2,1:0", "--seeds", "2"]);
    let runs = csv_rows(d.join("sweep_weights_runs.csv"));
    assert_eq!(runs.len(), 1 + 3 * 2);
    let summary = csv_rows(d.join("sweep_weights.csv"));
    assert_eq!(summary.len(), 1 + 3);
    assert!(summary[1..].iter().all(|r| r[1] == "2"));

    ok(d, &["--config", &cfg, "sweep", "--axis", "ubp", "--values", "0.4", "--seeds", "1"]);
    assert_eq!(csv_rows(d.join("sweep_ubp.csv")).len(), 2);
    assert_eq!(code(d, &["--config", &cfg, "sweep", "--axis", "ubp", "--values", "1.5"]), 2);
    assert_eq!(code(d, &["--config", &cfg, "--threads", "0", "sweep", "--axis", "ubp"]), 2);
}

#[test]
fn mmd_reports_reproduce_from_their_own_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let x = write(d, "x.csv", "a,b\n0,0\n0,0\n");
    let y = write(d, "y.csv", "1,0\n1,0\n");
    ok(d, &["mmd", &x, &y, "--bandwidths", "1"]);
    let hand = json(d.join("mmd.json"));
    assert!((hand["mmd2"].as_f64().unwrap() - (2.0 - 2.0 * (-0.5f64).exp())).abs() <= 1e-12);

    let x = write(d, "x2.csv", "0.1,0.2\n-0.3,0.5\n0.9,-1.1\n0.4,0.4\n");
    let y = write(d, "y2.csv", "1.1,0.2\n0.7,1.5\n1.9,-0.1\n");
    let out = ok(d, &["mmd", &x, &y, "--kernels", "3", "--logits", "0.5,-1,2"]);
    let first = json(d.join("mmd.json"));
    assert_eq!(serde_json::from_str::<Value>(&out).unwrap(), first);
    let bw: Vec<String> = first["bandwidths"].as_array().unwrap().iter().map(|v| v.to_string()).collect();
    let lg: Vec<String> = first["weight_logits"].as_array().unwrap().iter().map(|v| v.to_string()).collect();
    ok(d, &["mmd", &x, &y, "--bandwidths", &bw.join(","), "--logits", &lg.join(",")]);
    let again = json(d.join("mmd.json"));
    assert_eq!(first["mmd2"], again["mmd2"]);
    let weights: f64 = first["weights"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((weights - 1.0).abs() <= 1e-15);
}

#[test]
fn gen_and_pc_map_write_images() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(d, "image.json", r#"{"data": {"mode": "image", "identities": 4, "test_identities": 2, "samples_per_identity": 4}, "train": {"batch_size": 8, "k": 2}}"#);
    ok(d, &["--config", &cfg, "gen"]);
    let pgm = fs::read_dir(d.join("images")).unwrap().map(|e| e.unwrap().path()).find(|p| p.extension().is_some_and(|e| e == "pgm")).unwrap();
    assert!(fs::read(&pgm).unwrap().starts_with(b"P5"));
    for f in ["train_rgb.csv", "train_ir.csv", "test_rgb.csv", "test_ir.csv", "dataset.json", "config.json"] {
        assert!(d.join(f).exists(), "{f}");
    }

    let pc = d.join("pc");
    ok(&pc, &["pc-map", pgm.to_str().unwrap()]);
    for f in ["pc.pgm", "attention.pgm", "pc.csv", "pc_map.json"] {
        assert!(pc.join(f).exists(), "{f}");
    }
    let values: Vec<f64> = fs::read_to_string(pc.join("pc.csv"))
        .unwrap()
        .lines()
        .flat_map(|l| l.split(',').filter_map(|v| v.parse().ok()).collect::<Vec<f64>>())
        .collect();
    assert!(!values.is_empty() && values.iter().all(|v| (0.0..=1.0).contains(v)));
    ok(&pc, &["pc-map", pgm.to_str().unwrap(), "--threshold", "auto"]);
    assert_eq!(code(&pc, &["pc-map", pgm.to_str().unwrap(), "--threshold", "loud"]), 2);
}
