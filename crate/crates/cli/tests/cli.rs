//! End-to-end CLI tests driving the built binary on a small configuration.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_gardiff")
}

fn temp_dir(tag: &str) -> PathBuf {
    let p = std::env::temp_dir().join(format!("gardiff_cli_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&p);
    std::fs::create_dir_all(&p).unwrap();
    p
}

/// A config small enough for fast end-to-end runs: tiny corpus, short
/// schedule, reduced sampler.
fn write_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "out_root": dir.join("runs").to_string_lossy(),
        "corpus": {
            "path": dir.join("corpus").to_string_lossy(),
            "train_count": 24,
            "test_count": 6,
            "base_seed": 11
        },
        "train": {
            "steps": 12,
            "batch": 4,
            "lr": 2e-4,
            "warmup_iters": 4,
            "checkpoint_every": 6,
            "seed": 2
        },
        "sampler": { "steps": 10, "guidance_scale": 7.5, "seed": 7 },
        "eval": { "items": 3, "contact_sheet": false, "seed": 7 },
        "ablation": { "seeds": [1], "steps": 6, "batch": 4, "eval_items": 2 },
        "gradcheck": { "n_params": 24, "batch": 1, "seed": 5 }
    });
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(bin())
        .args(args)
        .env("GARDIFF_THREADS", "2")
        .output()
        .expect("spawn gardiff");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).to_string(),
        String::from_utf8_lossy(&out.stderr).to_string(),
    )
}

#[test]
fn full_pipeline_smoke() {
    let dir = temp_dir("pipeline");
    let cfg = write_config(&dir);
    let cfg_s = cfg.to_string_lossy();

    // gen-data twice: identical digests.
    let (code, out1, err) = run(&["gen-data", "--config", &cfg_s]);
    assert_eq!(code, 0, "gen-data failed: {err}");
    let v1: serde_json::Value = serde_json::from_str(out1.trim()).unwrap();
    let (code, out2, _) = run(&["gen-data", "--config", &cfg_s]);
    assert_eq!(code, 0);
    let v2: serde_json::Value = serde_json::from_str(out2.trim()).unwrap();
    assert_eq!(v1["digest"], v2["digest"], "corpus digest must be stable");

    // train.
    let (code, out, err) = run(&["train", "--config", &cfg_s]);
    assert_eq!(code, 0, "train failed: {err}");
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    let ckpt = v["checkpoint"].as_str().unwrap().to_string();
    assert!(Path::new(&ckpt).exists());

    // sample twice with a fixed seed: identical output digests.
    let out_a = dir.join("samples_a");
    let out_b = dir.join("samples_b");
    let (code, sa, err) = run(&[
        "sample",
        "--config",
        &cfg_s,
        "--checkpoint",
        &ckpt,
        "--out",
        &out_a.to_string_lossy(),
    ]);
    assert_eq!(code, 0, "sample failed: {err}");
    let (code, sb, _) = run(&[
        "sample",
        "--config",
        &cfg_s,
        "--checkpoint",
        &ckpt,
        "--out",
        &out_b.to_string_lossy(),
    ]);
    assert_eq!(code, 0);
    let da: serde_json::Value = serde_json::from_str(sa.trim()).unwrap();
    let db: serde_json::Value = serde_json::from_str(sb.trim()).unwrap();
    assert_eq!(da["digest"], db["digest"], "sampling must be deterministic");

    // eval on the real checkpoint.
    let (code, out, err) = run(&["eval", "--config", &cfg_s, "--checkpoint", &ckpt]);
    assert_eq!(code, 0, "eval failed: {err}");
    let report: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(report["samples"].as_u64().unwrap(), 3);
    assert!(report["ssim"].as_f64().is_some());
    assert!(report["fid_u"].as_f64().is_some());

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn eval_oracle_reports_perfect_scores() {
    let dir = temp_dir("oracle");
    let cfg_path = write_config(&dir);
    let cfg_s = cfg_path.to_string_lossy();
    let (code, _, err) = run(&["gen-data", "--config", &cfg_s]);
    assert_eq!(code, 0, "{err}");

    // Flip the oracle flag on.
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
    v["eval"]["oracle"] = serde_json::json!(true);
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&v).unwrap()).unwrap();

    let (code, out, err) = run(&["eval", "--config", &cfg_s]);
    assert_eq!(code, 0, "oracle eval failed: {err}");
    let report: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    let ssim = report["ssim"].as_f64().unwrap();
    assert!((ssim - 1.0).abs() < 1e-9, "oracle ssim {ssim}");
    let fid_p = report["fid_p"].as_f64().unwrap();
    assert!(fid_p.abs() < 1e-6, "oracle fid_p {fid_p}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn error_exit_codes() {
    let dir = temp_dir("errors");
    // Malformed config: unknown key -> exit 2, message names the key.
    let bad = dir.join("bad.json");
    std::fs::write(&bad, r#"{"trian": {"steps": 5}}"#).unwrap();
    let (code, _, err) = run(&["gen-data", "--config", &bad.to_string_lossy()]);
    assert_eq!(code, 2, "unknown key should exit 2");
    assert!(err.contains("trian"), "stderr should name the bad key: {err}");

    // Missing config file -> exit 3.
    let (code, _, _) = run(&["train", "--config", &dir.join("nope.json").to_string_lossy()]);
    assert_eq!(code, 3);

    // Valid config but missing corpus -> exit 3.
    let cfg = write_config(&dir);
    let (code, _, err) = run(&["train", "--config", &cfg.to_string_lossy()]);
    assert_eq!(code, 3, "missing corpus should exit 3: {err}");

    // Missing checkpoint for sample -> exit 3.
    let (code, _, _) = run(&["gen-data", "--config", &cfg.to_string_lossy()]);
    assert_eq!(code, 0);
    let (code, _, _) = run(&[
        "sample",
        "--config",
        &cfg.to_string_lossy(),
        "--checkpoint",
        &dir.join("missing.gdck").to_string_lossy(),
        "--out",
        &dir.join("out").to_string_lossy(),
    ]);
    assert_eq!(code, 3);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let dir = temp_dir("gradcheck");
    // Gradcheck at reduced dims so the f64 finite differences stay fast.
    let cfg = serde_json::json!({
        "out_root": dir.join("runs").to_string_lossy(),
        "corpus": {
            "path": dir.join("corpus").to_string_lossy(),
            "train_count": 4, "test_count": 2, "base_seed": 1,
            "person_h": 16, "person_w": 16, "garment_h": 16, "garment_w": 16
        },
        "model": {
            "person_h": 16, "person_w": 16, "garment_h": 16, "garment_w": 16,
            "base_ch": 8, "mid_ch": 16, "heads": 2, "time_dim": 16,
            "sin_dim": 8, "groups": 4
        },
        "gradcheck": { "n_params": 110, "batch": 2, "seed": 42 }
    });
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
    let cfg_s = p.to_string_lossy();

    let (code, out, err) = run(&["gradcheck", "--config", &cfg_s]);
    assert_eq!(code, 0, "gradcheck failed: {err}");
    let report: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert!(report["checked"].as_u64().unwrap() >= 100);
    assert!(err.contains("worst relative error"));

    // Negative control: a corrupted gradient path must exit 5 and name the
    // failing parameter.
    let (code, _, err) = run(&[
        "gradcheck",
        "--config",
        &cfg_s,
        "--corrupt",
        "stem.conv.weight",
    ]);
    assert_eq!(code, 5, "corrupted gradient must exit 5");
    assert!(err.contains("stem.conv.weight"), "stderr: {err}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn ablate_smoke_emits_table() {
    let dir = temp_dir("ablate");
    let cfg = write_config(&dir);
    let cfg_s = cfg.to_string_lossy();
    let (code, _, err) = run(&["gen-data", "--config", &cfg_s]);
    assert_eq!(code, 0, "{err}");
    let (code, out, err) = run(&["ablate", "--config", &cfg_s]);
    assert_eq!(code, 0, "ablate failed: {err}");
    let table: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let names: Vec<&str> = rows.iter().map(|r| r["row"].as_str().unwrap()).collect();
    assert_eq!(names, ["base", "base_al", "base_gfa", "base_gfa_al"]);
    for r in rows {
        for key in ["ssim", "fid_p", "kid_p", "fid_u", "kid_u", "high_freq_err"] {
            assert!(r[key].as_f64().unwrap().is_finite(), "{key} missing");
        }
    }
    // Four run directories with checkpoints and logs.
    for row in ["base", "base_al", "base_gfa", "base_gfa_al"] {
        let rd = dir.join("runs/ablation").join(row).join("seed_1");
        assert!(rd.join("checkpoint.gdck").exists(), "{row} checkpoint");
        assert!(rd.join("loss_log.jsonl").exists(), "{row} loss log");
        assert!(rd.join("eval_report.json").exists(), "{row} report");
    }
    // The merged table references the published full-scale row for context.
    assert_eq!(table["reference_full_scale"]["ssim"].as_f64().unwrap(), 0.912);
    assert_eq!(table["reference_full_scale"]["fid_p"].as_f64().unwrap(), 6.02);
    std::fs::remove_dir_all(&dir).ok();
}
