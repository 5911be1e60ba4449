//! Drives the `nmvq` binary end to end on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.n=40",
    "data.length=32",
    "steps.stage1=10",
    "steps.stage2=10",
    "steps.stage3=10",
    "steps.fcn=10",
    "train.checkpoint_every=4",
    "stage1.base_width=4",
    "stage1.codebook_size=8",
    "stage1.code_dim=4",
    "prior.dim=16",
    "prior.layers=1",
    "prior.heads=2",
    "unet.base_channels=4",
    "fcn.widths=4,8,8",
    "rocket.kernels=20",
    "tau.n_gen=10",
    "sampling.iterations=3",
    "visualize.samples=5",
];

fn nmvq(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nmvq"));
    cmd.arg("--desk-scale").arg("--out-dir").arg(out).arg("--seed").arg("4");
    for s in TINY {
        cmd.arg("--set").arg(s);
    }
    cmd.args(args).output().unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = nmvq(out, args);
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(o.status.success(), "nmvq {args:?} failed: {stderr}");
    String::from_utf8(o.stdout).unwrap()
}

fn err(out: &Path, args: &[&str]) -> String {
    let o = nmvq(out, args);
    assert!(!o.status.success(), "nmvq {args:?} should fail");
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_input_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let msg = err(dir.path(), &["prepare-data", "--input", "/nonexistent/data.tsv"]);
    assert!(msg.contains("/nonexistent/data.tsv"), "{msg}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let msg = err(dir.path(), &["--set", "stage9.width=3", "show-config"]);
    assert!(msg.contains("stage9.width"), "{msg}");
}

#[test]
fn stages_run_in_order_and_refuse_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert!(err(out, &["train", "--stage", "1"]).contains("prepare-data"));
    ok(out, &["prepare-data"]);
    assert!(err(out, &["train", "--stage", "2"]).contains("train --stage 1"));
    ok(out, &["train", "--stage", "1"]);
    ok(out, &["train", "--stage", "2"]);
    assert!(err(out, &["train", "--stage", "3"]).contains("run search-tau first"));
    assert!(err(out, &["generate", "--refine"]).contains("train --stage 3"));
    let tau = ok(out, &["search-tau"]);
    assert!(tau.contains("tau* = "), "{tau}");
    ok(out, &["train", "--stage", "3"]);

    let gen = ok(out, &["generate", "--n", "6", "--refine"]);
    assert!(gen.contains("6 series"), "{gen}");
    let rows = |p: &str| {
        let text = std::fs::read_to_string(out.join(p)).unwrap();
        assert!(text.starts_with("# config_hash="), "{p} lacks provenance");
        text.lines().filter(|l| !l.starts_with('#')).count()
    };
    assert_eq!(rows("samples/generated.tsv"), 6);
    assert_eq!(rows("samples/refined.tsv"), 6);

    let report = ok(out, &["evaluate"]);
    assert!(report.contains("fid_change_pct"), "{report}");
    let csv = std::fs::read_to_string(out.join("metrics/metrics.csv")).unwrap();
    assert!(csv.lines().any(|l| l == "dataset,metric,feature_source,value,seed"));
    let files = ok(out, &["visualize"]);
    assert!(files.lines().any(|l| l.ends_with(".svg")), "{files}");

    // Same seed, same samples.
    let first = std::fs::read(out.join("samples/generated.tsv")).unwrap();
    ok(out, &["generate", "--n", "6", "--refine"]);
    assert_eq!(first, std::fs::read(out.join("samples/generated.tsv")).unwrap());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        ok(d, &["prepare-data"]);
    }
    ok(a.path(), &["train", "--stage", "1"]);
    let part = ok(b.path(), &["train", "--stage", "1", "--until", "6"]);
    assert!(part.contains("steps 0 -> 6"), "{part}");
    let resumed = ok(b.path(), &["train", "--stage", "1"]);
    assert!(resumed.contains("steps 6 -> 10"), "{resumed}");
    let ck = |d: &Path| std::fs::read(d.join("checkpoints/stage1.ckpt")).unwrap();
    let log = |d: &Path| std::fs::read_to_string(d.join("logs/stage1_loss.csv")).unwrap();
    assert_eq!(ck(a.path()), ck(b.path()));
    let body = |t: String| t.lines().filter(|l| !l.starts_with('#')).map(String::from).collect::<Vec<_>>();
    assert_eq!(body(log(a.path())), body(log(b.path())));
}
