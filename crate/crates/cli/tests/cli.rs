use std::path::Path;
use std::process::{Command, Output};

fn guef(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guef"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = guef(args);
    assert!(
        out.status.success(),
        "guef {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(
        &path,
        "# small run\nseed = 2\nfeature_dim = 6\nheads = 2\nhidden = 8\niterations = 5\nbatch_size = 3\n\
         learning_rate = 1e-3\ntrain_videos = 6\ntest_videos = 3\nsnippets = 32\ncheckpoint_every = 2\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");

    let out = ok(&["synth", "--config", &cfg, "--out", p(&data)]);
    assert!(out.contains("6 training and 3 test videos"), "{out}");

    let out = ok(&["train", "--config", &cfg, "--manifest", p(&data.join("train.jsonl")), "--out", p(&run)]);
    assert!(out.contains("iter=5"), "{out}");
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(run.join("step_000002.ckpt").exists());
    assert!(run.join("step_000004.ckpt").exists());

    let props = dir.path().join("props.jsonl");
    let out = ok(&[
        "infer",
        "--config",
        &cfg,
        "--checkpoint",
        p(&run.join("final.ckpt")),
        "--manifest",
        p(&data.join("test.jsonl")),
        "--out",
        p(&props),
    ]);
    assert!(out.contains("video accuracy"), "{out}");

    let json = dir.path().join("report.json");
    let out = ok(&[
        "eval",
        "--config",
        &cfg,
        "--proposals",
        p(&props),
        "--manifest",
        p(&data.join("test.jsonl")),
        "--json",
        p(&json),
    ]);
    assert!(out.contains("mAP@tIoU"), "{out}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["map"].as_array().unwrap().len(), 7);
}

#[test]
fn training_and_synthesis_are_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--config", &cfg, "--out", p(&a)]);
    ok(&["synth", "--config", &cfg, "--out", p(&b)]);
    for name in ["train.jsonl", "test.jsonl", "features/train_0000.rgb.bin", "features/test_0002.flow.bin"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let manifest = a.join("train.jsonl");
    ok(&["train", "--config", &cfg, "--manifest", p(&manifest), "--out", p(&a.join("r"))]);
    ok(&["train", "--config", &cfg, "--manifest", p(&manifest), "--out", p(&b.join("r"))]);
    assert_eq!(
        std::fs::read(a.join("r/train.log")).unwrap(),
        std::fs::read(b.join("r/train.log")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("r/final.ckpt")).unwrap(),
        std::fs::read(b.join("r/final.ckpt")).unwrap()
    );

    let c = dir.path().join("c");
    ok(&["synth", "--config", &cfg, "--seed", "3", "--out", p(&c)]);
    assert_ne!(
        std::fs::read(a.join("train.jsonl")).unwrap(),
        std::fs::read(c.join("train.jsonl")).unwrap()
    );
}

#[test]
fn fuse_reads_evidence_lines() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("ev.jsonl");
    std::fs::write(&input, "{\"evidence\": [[3, 1]]}\n{\"evidence\": [[3, 1], [3, 1]]}\n").unwrap();
    let out = ok(&["fuse", "--seed", "0", "--input", p(&input)]);
    let lines: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert!((lines[0]["theta"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
    let fused = lines[1]["singletons"].as_array().unwrap();
    assert!((fused[0].as_f64().unwrap() - 0.7).abs() < 1e-9);
    assert!((lines[1]["theta"].as_f64().unwrap() - 0.4 / 3.0).abs() < 1e-9);
}

#[test]
fn gradcheck_reports_every_term() {
    let out = ok(&["gradcheck", "--seed", "0", "--seeds", "2"]);
    for term in ["cla", "uef", "hge", "total"] {
        assert!(out.contains(term), "{out}");
    }
}

#[test]
fn errors_are_reported_with_a_status() {
    let dir = tempfile::tempdir().unwrap();

    let out = guef(&["synth", "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 1\nwobble = 2\n").unwrap();
    let out = guef(&["synth", "--config", p(&cfg), "--out", p(dir.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.cfg:2"), "{err}");

    let bad = dir.path().join("ev.jsonl");
    std::fs::write(&bad, "{\"evidence\": [[1, -2]]}\n").unwrap();
    let out = guef(&["fuse", "--seed", "0", "--input", p(&bad)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ev.jsonl:1"));

    let out = guef(&["eval", "--seed", "0", "--proposals", "/nonexistent", "--manifest", "/nonexistent"]);
    assert!(!out.status.success());
}

#[test]
fn infer_rejects_a_checkpoint_for_another_class_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["synth", "--config", &cfg, "--out", p(&data)]);
    ok(&["train", "--config", &cfg, "--manifest", p(&data.join("train.jsonl")), "--out", p(&run)]);
    let other = dir.path().join("other.cfg");
    std::fs::write(&other, std::fs::read_to_string(&cfg).unwrap() + "num_classes = 4\n").unwrap();
    let out = guef(&[
        "infer",
        "--config",
        p(&other),
        "--checkpoint",
        p(&run.join("final.ckpt")),
        "--manifest",
        p(&data.join("test.jsonl")),
        "--out",
        p(&dir.path().join("x.jsonl")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("classes"));
}
