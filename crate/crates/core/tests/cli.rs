use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

use fedapc::data::{encode_idx, IdxArray};

fn fedsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .args(args)
        .env("FEDSIM_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn default_config(method: &str) -> Value {
    let out = fedsim(&["default-config", "--method", method]);
    assert!(out.status.success());
    serde_json::from_slice(&out.stdout).unwrap()
}

fn small_config(dir: &Path, method: &str) -> String {
    let mut v = default_config(method);
    v["rounds"] = 3.into();
    v["report_last"] = 2.into();
    v["seeds"] = json!([4]);
    let path = dir.join(format!("{method}.json"));
    std::fs::write(&path, v.to_string()).unwrap();
    path.display().to_string()
}

#[test]
fn default_config_parses_for_every_method() {
    for m in ["fedavg", "fedproto", "fedapc"] {
        assert_eq!(default_config(m)["method"], m);
    }
    let out = fedsim(&["default-config", "--method", "sgd"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown method"));
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "fedapc");
    let out_dir = dir.path().join("out");
    let out = fedsim(&["run", "--config", &config, "--out-dir", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("fedapc: average "));

    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("seed,round,acc_alpha,acc_beta,acc_gamma,acc_delta,avg_acc,ce_c0"));
    assert_eq!(lines.count(), 3);
    for f in ["timings.csv", "summary.json", "config.json"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let summary: Value = serde_json::from_slice(&std::fs::read(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["method"], "fedapc");
}

#[test]
fn seed_override_and_tcp_transport() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "fedavg");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out_dir, transport) in [(&a, "inproc"), (&b, "tcp")] {
        let out = fedsim(&[
            "run", "--config", &config, "--out-dir", out_dir.to_str().unwrap(),
            "--seed-override", "7,8", "--transport", transport, "--quiet",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(out.stdout.is_empty());
    }
    let ma = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, std::fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert!(ma.lines().nth(1).unwrap().starts_with("7,1,"));
    assert!(ma.lines().last().unwrap().starts_with("8,3,"));
}

#[test]
fn ablate_prints_both_arms() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "fedapc");
    let out_dir = dir.path().join("ab");
    let out = fedsim(&["ablate", "--config", &config, "--out-dir", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("augmented: average"));
    assert!(lines[1].starts_with("no_augmentation: average"));
    assert!(lines[2].starts_with("delta "));
    assert!(out_dir.join("augmented/metrics.csv").exists());
    assert!(out_dir.join("no_augmentation/metrics.csv").exists());
}

#[test]
fn bad_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = default_config("fedapc");
    v["train"]["local_epochs"] = "two".into();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let out = fedsim(&["run", "--config", path.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.local_epochs"), "{err}");

    let out = fedsim(&["run", "--config", "/nonexistent/cfg.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn gradcheck_passes() {
    let out = fedsim(&["gradcheck", "--cases", "5"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("cross_entropy") && text.contains("fedproto_reg"));
    assert!(text.lines().last().unwrap().starts_with("PASS (20 checks"));
}

fn write_idx(path: &Path, magic: u32, dims: Vec<usize>, data: Vec<u8>) {
    std::fs::write(path, encode_idx(&IdxArray { magic, dims, data })).unwrap();
}

/// Images whose brightest quadrant encodes the label.
fn idx_split(dir: &Path, prefix: &str, n: usize, offset: usize) -> (String, String) {
    let mut images = Vec::with_capacity(n * 16);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i + offset) % 3;
        for p in 0..16 {
            let quadrant = (p / 8) * 2 + (p % 4) / 2;
            images.push(if quadrant == label { 200 + (i % 50) as u8 } else { ((i * 7 + p) % 40) as u8 });
        }
        labels.push(label as u8);
    }
    let (img, lab) = (dir.join(format!("{prefix}-images.idx")), dir.join(format!("{prefix}-labels.idx")));
    write_idx(&img, 0x0803, vec![n, 4, 4], images);
    write_idx(&lab, 0x0801, vec![n], labels);
    (img.display().to_string(), lab.display().to_string())
}

#[test]
fn inspect_and_train_on_idx_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut domains = Vec::new();
    for (k, name) in ["left", "right"].iter().enumerate() {
        let (tri, trl) = idx_split(dir.path(), &format!("{name}-train"), 60, k);
        let (tei, tel) = idx_split(dir.path(), &format!("{name}-test"), 30, k + 1);
        domains.push(json!({
            "name": name, "train_images": tri, "train_labels": trl, "test_images": tei, "test_labels": tel
        }));
    }

    let out = fedsim(&["inspect-idx", domains[0]["train_images"].as_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(stdout(&out), "magic 0x00000803\ncount 60\ndims 60x4x4\n");
    let out = fedsim(&["inspect-idx", domains[0]["train_labels"].as_str().unwrap()]);
    assert_eq!(stdout(&out), "magic 0x00000801\ncount 60\ndims 60\n");

    let mut v = default_config("fedapc");
    v["data"] = json!({ "idx": domains });
    v["model"]["input_dim"] = 16.into();
    v["model"]["num_classes"] = 3.into();
    v["partition"]["clients"] = json!([
        {"domain": "left", "fraction": 0.5}, {"domain": "left", "fraction": 0.5}, {"domain": "right", "fraction": 1.0}
    ]);
    v["rounds"] = 5.into();
    v["report_last"] = 2.into();
    v["seeds"] = json!([1]);
    let cfg = dir.path().join("idx.json");
    std::fs::write(&cfg, v.to_string()).unwrap();
    let out_dir = dir.path().join("run");
    let out = fedsim(&["run", "--config", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("seed,round,acc_left,acc_right,avg_acc,ce_c0,ce_c1,ce_c2,apc_c0,apc_c1,apc_c2\n"));

    let garbage = dir.path().join("garbage.idx");
    std::fs::write(&garbage, [0u8, 0, 9, 9, 0, 0, 0, 1]).unwrap();
    let out = fedsim(&["inspect-idx", garbage.to_str().unwrap()]);
    assert!(!out.status.success());
}
