use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bevkd(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevkd"))
        .args(args)
        .args(["--out", out.to_str().unwrap()])
        .args(["--override", "data.train_scenes=6", "--override", "data.eval_scenes=3", "--epochs", "2"])
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = bevkd(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_artifacts_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = bevkd(dir.path(), &["train", "--variant", "s3"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("teacher.cache"), "{}", stderr(&o));

    let o = bevkd(dir.path(), &["cache"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("teacher.ckpt"));

    let o = bevkd(dir.path(), &["eval", "--variant", "s1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("student_s1.ckpt"));
}

#[test]
fn bad_invocations_fail() {
    let dir = tempfile::tempdir().unwrap();
    let o = bevkd(dir.path(), &["selftest", "--frobnicate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"));

    let o = bevkd(dir.path(), &["train", "--variant", "s9"]);
    assert!(!o.status.success());

    let o = bevkd(dir.path(), &["gen-data", "--override", "grid.extnt=3"]);
    assert!(!o.status.success());

    let csv = dir.path().join("bad.csv");
    fs::write(&csv, "variant,map\nS0,1\n").unwrap();
    let o = bevkd(dir.path(), &["report", csv.to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn stepwise_pipeline_matches_ablate() {
    let steps = tempfile::tempdir().unwrap();
    let s = steps.path();
    ok(s, &["gen-data"]);
    assert_eq!(fs::read_to_string(s.join("train.manifest")).unwrap().lines().count(), 6);
    ok(s, &["teacher-train"]);
    ok(s, &["cache"]);
    ok(s, &["train", "--variant", "s3"]);
    ok(s, &["train", "--variant", "s0"]);
    let eval = ok(s, &["eval", "--variant", "s3"]);
    assert!(eval.starts_with("variant,map,") && eval.contains("\nS3,"));
    assert!(fs::read_to_string(s.join("history_s3.csv")).unwrap().starts_with("step,lr,"));
    let teacher_eval = ok(s, &["eval", "--teacher"]);
    assert!(teacher_eval.contains("\nteacher,"));

    let whole = tempfile::tempdir().unwrap();
    let w = whole.path();
    let report = ok(w, &["ablate"]);
    assert_eq!(report.lines().count(), 5);
    for f in ["train.manifest", "teacher.ckpt", "teacher.cache", "student_s3.ckpt", "student_s0.ckpt"] {
        assert_eq!(fs::read(s.join(f)).unwrap(), fs::read(w.join(f)).unwrap(), "{f}");
    }
    let hashes = fs::read_to_string(w.join("sha256.txt")).unwrap();
    assert!(hashes.lines().any(|l| l.ends_with("  ablation.csv")));

    let again = ok(w, &["report", w.join("ablation.csv").to_str().unwrap()]);
    assert_eq!(again.lines().next(), report.lines().next());
}
