//! Subcommand behaviour: exit codes, output files and agreement with the
//! library.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mobilesal::data::{self, ImageKind};
use mobilesal::metrics::MetricsReport;
use mobilesal::Tensor;
use serde_json::Value;

fn mobilesal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mobilesal"))
        .args(args)
        .output()
        .expect("spawn mobilesal")
}

fn ok(args: &[&str]) -> String {
    let out = mobilesal(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    mobilesal(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_under(dir: &Path) -> Vec<String> {
    let mut out: Vec<String> = walk(dir).into_iter().map(|p| p.strip_prefix(dir).unwrap().display().to_string()).collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn synth(dir: &Path, n: usize, size: usize, seed: u64) {
    ok(&["synth", "--n", &n.to_string(), "--size", &size.to_string(), "--seed", &seed.to_string(), "--out", s(dir)]);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["stats", "--width-mult", "abc"]), 1);
    assert_eq!(code(&["gradcheck", "--block", "nonsense"]), 1);
    assert_eq!(code(&["stats", "--input-size", "100"]), 1);
    assert_eq!(code(&["--help"]), 0);
    let out = mobilesal(&["frobnicate"]);
    assert!(!out.stderr.is_empty());
}

#[test]
fn synth_layout_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, 8, 64, 3);
    synth(&b, 8, 64, 3);
    let files = files_under(&a);
    assert_eq!(files.len(), 24);
    assert_eq!(files, files_under(&b));
    for f in &files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    for id in data::image_ids(&a.join("GT")).unwrap() {
        let raw = data::load_image(&data::find_image(&a.join("GT"), &id).unwrap(), ImageKind::Gray).unwrap();
        assert!(raw.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
    assert_eq!(code(&["synth", "--n", "0", "--out", s(&dir.path().join("c"))]), 1);
}

#[test]
fn stats_reports_counts_and_scaling() {
    let full: Value = serde_json::from_str(ok(&["stats"]).lines().last().unwrap()).unwrap();
    let half: Value = serde_json::from_str(ok(&["stats", "--width-mult", "0.5"]).lines().last().unwrap()).unwrap();
    let (f, h) = (full["params_inference"].as_f64().unwrap(), half["params_inference"].as_f64().unwrap());
    let ratio = f / h;
    assert!((2.0..8.0).contains(&ratio), "{ratio}");
    assert!(full["macs_train"].as_u64() > full["macs_eval"].as_u64());
    assert_eq!(full["scopes"]["idr"]["eval_macs"], 0);
    let sum: u64 = ["rgb", "depth", "cmf", "decoder", "idr"]
        .iter()
        .map(|k| full["scopes"][k]["params"].as_u64().unwrap())
        .sum();
    assert_eq!(sum, full["params_with_idr"].as_u64().unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stats.json");
    ok(&["stats", "--width-mult", "0.25", "--input-size", "64", "--json", s(&path)]);
    let written: Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    assert_eq!(written["input_size"], 64);
}

#[test]
fn gradcheck_paths() {
    let out = ok(&["gradcheck", "--block", "cpr"]);
    assert!(out.contains("cpr") && out.contains("PASS"));
    let out = ok(&["gradcheck", "--block", "all"]);
    for b in ["irb", "attention", "cmf", "cpr", "idr", "bce", "dice", "ssim", "total"] {
        assert!(out.lines().any(|l| l.starts_with(b) && l.ends_with("PASS")), "{b}");
    }
    let fail = mobilesal(&["gradcheck", "--block", "irb", "--precision", "f32", "--tolerance", "1e-12"]);
    assert_eq!(fail.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&fail.stdout).contains("FAIL"));
    assert!(String::from_utf8_lossy(&fail.stderr).contains("gradient check failed"));
}

#[test]
fn eval_matches_library_and_handles_identity() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("d");
    synth(&data_dir, 4, 32, 1);
    let gt = data_dir.join("GT");

    let report = dir.path().join("self.json");
    ok(&["eval", "--pred-dir", s(&gt), "--gt-dir", s(&gt), "--report", s(&report)]);
    let r: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["f_beta_max"], 1.0);
    assert_eq!(r["mae"], 0.0);
    assert_eq!(r["curve"].as_array().unwrap().len(), 255);

    // Depth maps as soft predictions.
    let preds = data_dir.join("depth");
    ok(&["eval", "--pred-dir", s(&preds), "--gt-dir", s(&gt), "--report", s(&report), "--dataset", "synth"]);
    let got: MetricsReport = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    let ids = data::image_ids(&gt).unwrap();
    let load = |dir: &Path, mask: bool| -> Vec<Tensor> {
        ids.iter()
            .map(|id| {
                let p = data::find_image(dir, id).unwrap();
                if mask {
                    data::load_mask(&p).unwrap()
                } else {
                    data::load_image(&p, ImageKind::Gray).unwrap()
                }
            })
            .collect()
    };
    let want = MetricsReport::evaluate("synth", &load(&preds, false), &load(&gt, true), 0.3).unwrap();
    assert_eq!(got, want);

    ok(&[
        "eval", "--pred-dir", s(&preds), "--gt-dir", s(&gt), "--report", s(&report),
        "--restored-dir", s(&preds), "--depth-dir", s(&preds),
    ]);
    let r: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["psnr"], 99.0);
    assert!((r["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-9);

    fs::remove_file(data::find_image(&gt, ids.iter().next().unwrap()).unwrap()).unwrap();
    let mismatch = dir.path().join("mismatch.json");
    let out = mobilesal(&["eval", "--pred-dir", s(&preds), "--gt-dir", s(&gt), "--report", s(&mismatch)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("id sets differ"));
    assert!(!mismatch.exists());
}

#[test]
fn failed_writes_leave_no_files() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("d");
    synth(&data_dir, 2, 32, 0);
    let gt = data_dir.join("GT");
    let report = dir.path().join("missing_dir").join("r.json");
    assert_eq!(code(&["eval", "--pred-dir", s(&gt), "--gt-dir", s(&gt), "--report", s(&report)]), 2);
    assert!(!dir.path().join("missing_dir").exists());

    assert_eq!(code(&["train", "--toy", "--data", s(&dir.path().join("nope")), "--out", s(&dir.path().join("o"))]), 2);
    assert!(!dir.path().join("o").exists());
}

#[test]
fn train_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("d");
    synth(&data_dir, 3, 64, 2);
    let run = |out: &Path, lambda: &str| {
        ok(&[
            "train", "--toy", "--data", s(&data_dir), "--out", s(out), "--epochs", "2", "--batch", "2",
            "--lambda", lambda, "--seed", "5", "--threads", "1",
        ])
    };
    let out = dir.path().join("o");
    run(&out, "0.3");
    let log: Vec<Value> = fs::read_to_string(out.join("loss_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(log.len(), 2);
    assert_eq!(log[0]["epoch"], 0);
    assert_eq!(log[0]["lr"], 2e-3);
    let cfg: Value = serde_json::from_slice(&fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["train"]["lambda"], 0.3);
    assert_eq!(cfg["network"]["width_mult"], 0.25);
    assert!(files_under(&out).iter().all(|f| !f.ends_with(".partial") && !f.ends_with(".tmp")));

    let zero = dir.path().join("z");
    run(&zero, "0");
    let cfg: Value = serde_json::from_slice(&fs::read(zero.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["train"]["lambda"], 0.0);

    // Odd-sized input exercises the reflect-pad and crop path.
    let rgb = Tensor::from_fn(mobilesal::Shape::new(1, 3, 45, 70), |_, c, y, x| ((x + y + c) % 7) as f32 / 7.0);
    let depth = Tensor::from_fn(mobilesal::Shape::new(1, 1, 45, 70), |_, _, y, _| y as f32 / 45.0);
    let (rgb_path, depth_path) = (dir.path().join("rgb.png"), dir.path().join("depth.pgm"));
    data::save_image(&rgb, &rgb_path).unwrap();
    data::save_image(&depth, &depth_path).unwrap();
    let mut outputs = Vec::new();
    for (i, ck) in ["checkpoint.msal", "inference.msal", "checkpoint.msal"].iter().enumerate() {
        let p = dir.path().join(format!("p{i}.png"));
        ok(&[
            "infer", "--ckpt", s(&out.join(ck)), "--rgb", s(&rgb_path), "--depth", s(&depth_path), "--out", s(&p),
            "--config", s(&out.join("config.json")),
        ]);
        let img = data::load_image(&p, ImageKind::Gray).unwrap();
        assert_eq!((img.shape().h, img.shape().w), (45, 70));
        outputs.push(fs::read(&p).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);

    let preds = dir.path().join("preds");
    ok(&["infer", "--ckpt", s(&out.join("inference.msal")), "--data", s(&data_dir), "--out", s(&preds)]);
    assert_eq!(files_under(&preds).len(), 3);

    // A differently configured network is rejected by fingerprint.
    let other = dir.path().join("other.json");
    fs::write(&other, r#"{"input_size":[64,64],"width_mult":0.5,"m_depth":4,"m_cpr":4,"m_idr":6,"m_cmf":4,"cpr_dilations":[1,2,3],"idr_channels":256,"include_idr_at_inference":false}"#).unwrap();
    let bad = mobilesal(&[
        "infer", "--ckpt", s(&out.join("checkpoint.msal")), "--rgb", s(&rgb_path), "--depth", s(&depth_path),
        "--out", s(&dir.path().join("x.png")), "--config", s(&other),
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("fingerprint"));
    assert!(!dir.path().join("x.png").exists());

    let missing = mobilesal(&[
        "infer", "--ckpt", s(&out.join("checkpoint.msal")), "--rgb", s(&dir.path().join("none.png")),
        "--depth", s(&depth_path), "--out", s(&dir.path().join("y.png")),
    ]);
    assert_eq!(missing.status.code(), Some(2));
}
