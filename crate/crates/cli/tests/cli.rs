use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lane(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lane"))
        .args(args)
        .env("LANE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = lane(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn err(args: &[&str]) -> Value {
    let out = lane(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small model that trains in well under a second per step.
fn write_config(dir: &Path, m_max: usize) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "model": {
            "d_model": 16, "n_heads": 2, "k_blocks": 2, "t_sc": 4, "m_max": m_max, "l_sub": 8,
            "vocab": 517, "d_ff": 32, "n_enc_layers": 1, "n_ar_layers": 1, "counts": [64, 8, 16, 32]
        },
        "scheme": "halfedge",
        "dataset": { "shapes": [{ "kind": "cube", "resolution": 1 }, { "kind": "grid", "resolution": 1 }] },
        "schedule": { "steps": 4, "lr_max": 1e-3, "lr_min": 1e-4, "checkpoint_every": 2 },
        "output_dir": s(&dir.join("run")),
    });
    let p = dir.join(format!("config{m_max}.json"));
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn help_lists_every_flag() {
    let top = String::from_utf8(lane(&["--help"]).stdout).unwrap();
    for cmd in [
        "synth", "tokenize", "detokenize", "sample", "train", "generate", "repair", "eval", "bench", "gradcheck",
    ] {
        assert!(top.contains(cmd), "missing {cmd}");
    }
    assert!(top.contains("--config") && top.contains("--seed"));
    let gen = String::from_utf8(lane(&["generate", "--help"]).stdout).unwrap();
    for flag in ["--mode", "--batch-limit", "--scheme", "--length", "--corrupt-fraction", "--out"] {
        assert!(gen.contains(flag), "generate help lacks {flag}");
    }
    let bench = String::from_utf8(lane(&["bench", "--help"]).stdout).unwrap();
    assert!(bench.contains("--sweep-L"));
    assert!(!lane(&["generate", "--no-such-flag"]).status.success());
}

#[test]
fn synth_tokenize_detokenize_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let obj = dir.path().join("cube.obj");
    let toks = dir.path().join("cube.tok");
    let back = dir.path().join("back.obj");
    let v = ok(&["synth", "--kind", "cube", "--out", s(&obj)]);
    assert_eq!(v["faces"], 12);
    let v = ok(&["tokenize", "--input", s(&obj), "--scheme", "flat", "--out", s(&toks)]);
    assert_eq!(v["L"], 110);
    let v = ok(&["detokenize", "--input", s(&toks), "--out", s(&back)]);
    assert_eq!(v["faces"], 12);
    assert_eq!(v["partial"], false);

    let pcs = dir.path().join("cube.json");
    let v = ok(&["--seed", "3", "sample", "--input", s(&obj), "--out", s(&pcs)]);
    assert_eq!(v["counts"], serde_json::json!([8192, 512, 1024, 2048]));
    assert_eq!(v["seed"], 3);
}

#[test]
fn failures_are_json_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.obj");
    let e = err(&["tokenize", "--input", s(&missing), "--out", s(&dir.path().join("x.tok"))]);
    assert!(e["error"].as_str().unwrap().contains("nope.obj"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"modle": {}}"#).unwrap();
    let e = err(&["--config", s(&bad), "synth", "--kind", "cube", "--out", s(&dir.path().join("c.obj"))]);
    assert!(e["error"].as_str().unwrap().contains("modle"));

    let e = err(&["synth", "--kind", "cube", "--resolution", "0", "--out", s(&dir.path().join("c.obj"))]);
    assert!(e["error"].is_string());
}

#[test]
fn train_generate_repair_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 6);
    let run = dir.path().join("run");
    let v = ok(&["--config", s(&cfg), "train", "--out", s(&run)]);
    assert_eq!(v["steps"], 4);
    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let ckpt = run.join("checkpoint.bin");
    assert!(ckpt.exists());

    // resuming at the final step does nothing further
    let v = ok(&["--config", s(&cfg), "train", "--out", s(&run), "--resume", s(&ckpt)]);
    assert_eq!(v["steps"], 4);
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 4);

    let obj = dir.path().join("cube.obj");
    ok(&["synth", "--kind", "cube", "--out", s(&obj)]);
    let pcs = dir.path().join("cube.json");
    ok(&["--config", s(&cfg), "sample", "--input", s(&obj), "--out", s(&pcs)]);

    let serial = dir.path().join("serial.tok");
    let ada = dir.path().join("ada.tok");
    let gen_obj = dir.path().join("gen.obj");
    let a = ok(&[
        "--config", s(&cfg), "generate", "--checkpoint", s(&ckpt), "--input", s(&pcs), "--length", "44",
        "--mode", "serial", "--out", s(&serial), "--obj", s(&gen_obj),
    ]);
    let b = ok(&[
        "generate", "--checkpoint", s(&ckpt), "--input", s(&pcs), "--length", "44", "--mode", "adagraph",
        "--batch-limit", "3", "--out", s(&ada),
    ]);
    assert_eq!(std::fs::read(&serial).unwrap(), std::fs::read(&ada).unwrap());
    assert_eq!(a["timing"]["M"], 6);
    assert_eq!(b["timing"]["mode"], "adagraph");
    assert_eq!(b["timing"]["batch_limit"], 3);

    let rep = dir.path().join("rep.tok");
    let r = ok(&[
        "repair", "--checkpoint", s(&ckpt), "--input", s(&obj), "--length", "44", "--out", s(&rep),
    ]);
    assert_eq!(r["corrupt_fraction"], 0.2);

    // a config whose model differs from the checkpoint is refused
    let other = write_config(dir.path(), 5);
    let e = err(&[
        "--config", s(&other), "generate", "--checkpoint", s(&ckpt), "--input", s(&pcs), "--length", "20",
        "--out", s(&serial),
    ]);
    assert!(e.to_string().contains("hash"), "{e}");

    let e = ok(&["eval", "--generated", s(&obj), "--reference", s(&obj), "--samples", "500"]);
    assert!(e["chamfer"].as_f64().unwrap() < 1e-9);
    assert!((e["normal_consistency"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn bench_sweep_writes_csv_with_quadratic_baseline_attention() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let v = ok(&["bench", "--sweep-L", "128,256,512,1024", "--sweep-only", "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "L,lane_flops,baseline_flops,lane_mem,baseline_mem");
    let base: Vec<f64> = lines.map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(base.len(), 4);
    for w in base.windows(2) {
        assert!(w[1] > w[0]);
    }
    // second differences grow: the quadratic term dominates
    assert!(base[3] - base[2] > 2.0 * (base[2] - base[1]));
    assert_eq!(v["sweep"].as_array().unwrap().len(), 4);
}

#[test]
fn bench_times_every_setting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 6);
    let v = ok(&["--config", s(&cfg), "bench", "--batch-limit", "4", "--repeats", "2"]);
    let t = &v["throughput"];
    assert_eq!(t["tokens_identical"], true);
    let limits: Vec<u64> = t["entries"].as_array().unwrap().iter().map(|e| e["batch_limit"].as_u64().unwrap()).collect();
    assert_eq!(limits, vec![1, 1, 2, 4]);
}

#[test]
fn gradcheck_passes_on_one_pathway() {
    let v = ok(&["gradcheck", "--m", "1"]);
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-4);
}
