//! End-to-end runs of the `mrbcnn` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mrbcnn::net::expected_shapes;
use mrbcnn::NetworkConfig;

fn mrbcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrbcnn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mrbcnn(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(path: &Path, extra: &str) {
    let text = format!(
        "seed = 5\nnet.preset = down_scaled\ntrain.batch = 12\ntrain.lr = 0.01\ntrain.max_iters = 6\n\
         train.eval_every = 3\ntrain.val_trials = 2\ndata.train_manifest = train/manifest.csv\n\
         data.val_manifest = val/manifest.csv\n{extra}"
    );
    fs::write(path, text).unwrap();
}

/// Synthesizes train and validation sets under `dir`.
fn datasets(dir: &Path) {
    ok(&[
        "synth",
        "--out",
        p(&dir.join("train")),
        "--ids",
        "6",
        "--per-id",
        "4",
        "--seed",
        "1",
    ]);
    ok(&[
        "synth",
        "--out",
        p(&dir.join("val")),
        "--ids",
        "4",
        "--per-id",
        "4",
        "--seed",
        "2",
    ]);
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    datasets(d);
    write_config(&d.join("run.cfg"), "out.dir = run\n");
    let stdout = ok(&["--threads", "1", "train", "--config", p(&d.join("run.cfg"))]);
    assert!(stdout.contains("6 iterations"), "{stdout}");
    for f in ["best.ckpt", "latest.ckpt", "train_log.csv", "config.txt"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 7);

    let ckpt = d.join("run/best.ckpt");
    let eval = |out: &str| {
        ok(&[
            "eval",
            "--checkpoint",
            p(&ckpt),
            "--manifest",
            p(&d.join("val/manifest.csv")),
            "--protocol",
            "cuhk03",
            "--seed",
            "3",
            "--trials",
            "2",
            "--out",
            p(&d.join(out)),
        ])
    };
    eval("e1");
    eval("e2");
    for f in [
        "metrics.json",
        "recall_mean.csv",
        "recall_trial0.csv",
        "recall_trial1.csv",
    ] {
        assert_eq!(
            fs::read(d.join("e1").join(f)).unwrap(),
            fs::read(d.join("e2").join(f)).unwrap(),
            "{f}"
        );
    }
    let json: serde_json::Value = serde_json::from_slice(&fs::read(d.join("e1/metrics.json")).unwrap()).unwrap();
    let r1 = json["recall@1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r1));
    assert_eq!(json["trials"], 2);
}

#[test]
fn resume_and_head_reinit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    datasets(d);
    write_config(&d.join("a.cfg"), "out.dir = a\n");
    ok(&["--threads", "1", "train", "--config", p(&d.join("a.cfg"))]);

    // Continue the same run to 9 iterations.
    write_config(&d.join("more.cfg"), "out.dir = a\n");
    let text = fs::read_to_string(d.join("more.cfg"))
        .unwrap()
        .replace("max_iters = 6", "max_iters = 9");
    fs::write(d.join("more.cfg"), text).unwrap();
    ok(&[
        "train",
        "--config",
        p(&d.join("more.cfg")),
        "--resume",
        p(&d.join("a/latest.ckpt")),
    ]);
    assert_eq!(
        fs::read_to_string(d.join("a/train_log.csv")).unwrap().lines().count(),
        10
    );

    // A new head size only loads with --allow-head-reinit.
    write_config(&d.join("b.cfg"), "out.dir = b\nnet.embedding_dim = 8\n");
    let refused = mrbcnn(&[
        "train",
        "--config",
        p(&d.join("b.cfg")),
        "--resume",
        p(&d.join("a/latest.ckpt")),
    ]);
    assert!(!refused.status.success());
    ok(&[
        "train",
        "--config",
        p(&d.join("b.cfg")),
        "--resume",
        p(&d.join("a/latest.ckpt")),
        "--allow-head-reinit",
    ]);
    assert!(d.join("b/latest.ckpt").exists());
}

#[test]
fn malformed_checkpoint_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"NOPE\x01\x00\x00\x00garbage").unwrap();
    let manifest = dir.path().join("m.csv");
    fs::write(&manifest, "path,person_id,camera_id\n").unwrap();
    let out = mrbcnn(&["eval", "--checkpoint", p(&bad), "--manifest", p(&manifest)]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("magic"), "{stderr}");
    assert!(!stderr.contains("panicked"), "{stderr}");
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("x.cfg");
    fs::write(&cfg, "train.lr = 0.1\n").unwrap();
    let out = mrbcnn(&["train", "--config", p(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("max_iters"));
}

#[test]
fn gradcheck_reports_every_parameter() {
    let stdout = ok(&["gradcheck", "--seed", "0", "--coords", "4"]);
    let reported: Vec<&str> = stdout
        .lines()
        .filter_map(|l| l.split_whitespace().nth(1))
        .filter_map(|n| n.strip_prefix("param/"))
        .collect();
    let expected: Vec<String> = expected_shapes(&NetworkConfig::down_scaled())
        .unwrap()
        .into_keys()
        .collect();
    let mut got: Vec<String> = reported.iter().map(|s| s.to_string()).collect();
    got.sort();
    assert_eq!(got, expected);
    assert!(!stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn bench_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    ok(&["bench", "--reps", "2", "--warmup", "0", "--out", p(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# "));
    assert_eq!(lines.next().unwrap(), "kernel,shape,reps,median_us,p90_us,checksum");
    assert_eq!(lines.count(), 4);
}
