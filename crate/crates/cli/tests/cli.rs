use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
corpus.items = 30
corpus.length = 16
teacher.d_model = 16
teacher.n_layers = 1
teacher.n_heads = 2
teacher.max_len = 32
student.d_model = 8
student.n_layers = 1
student.n_heads = 2
student.max_len = 32
teacher_train.epochs = 1
train.epochs = 2
sample.max_new_tokens = 16
sample.n_sequences = 8
";

fn tinykd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tinykd")).args(args).env("TINYKD_THREADS", "1").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Runs a subcommand that must succeed and returns its run directory.
fn ok(args: &[&str]) -> PathBuf {
    let out = tinykd(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join(format!("run{}.cfg", extra.len()));
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn corpus_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = ok(&["corpus", "--seed", "7", "--items", "200", "--out", s(&tmp.path().join("a"))]);
    let b = ok(&["corpus", "--seed", "7", "--items", "200", "--out", s(&tmp.path().join("b"))]);
    assert_eq!(a.file_name(), b.file_name());
    assert!(a.file_name().unwrap().to_str().unwrap().ends_with("-seed7"));
    for f in ["train.txt", "validation.txt", "test.txt", "config.resolved"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let lines = |f: &str| fs::read_to_string(a.join(f)).unwrap().lines().count() - 1;
    assert_eq!((lines("train.txt"), lines("validation.txt"), lines("test.txt")), (160, 20, 20));
    assert!(a.join("run.log").exists());
    let names: Vec<_> = fs::read_dir(tmp.path().join("a")).unwrap().collect();
    assert_eq!(names.len(), 1, "only the run directory is written");
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tinykd(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = tinykd(&["corpus", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));

    let cfg = write_config(tmp.path(), "distill.gamma1 = 1.5\n");
    let out = tinykd(&["distill", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gamma1") && err.contains("[0,1]"), "{err}");

    let cfg = write_config(tmp.path(), "unknown.key = 3\n");
    let out = tinykd(&["corpus", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown.key"));

    let out = tinykd(&["quantize", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("paths.student"));

    let out = tinykd(&["compare-losses", "--variant", "bikl", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let out = tinykd(&["distill", "--variant", "nope", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count(), 0);

    let out = tinykd(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.tkdc");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let cfg = write_config(tmp.path(), &format!("paths.student = {}\n", bad.display()));
    let out = tinykd(&["quantize", "--config", s(&cfg), "--out", s(&tmp.path().join("runs"))]);
    assert_eq!(out.status.code(), Some(2));
    let log = fs::read_dir(tmp.path().join("runs")).unwrap().next().unwrap().unwrap().path().join("run.log");
    assert!(fs::read_to_string(log).unwrap().contains("error"));
}

#[test]
fn resolved_config_reproduces_the_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let a = ok(&["corpus", "--config", s(&cfg), "--seed", "3", "--out", s(tmp.path())]);
    let b = ok(&["corpus", "--config", s(&a.join("config.resolved")), "--out", s(&tmp.path().join("again"))]);
    assert_eq!(a.file_name(), b.file_name());
    assert_eq!(fs::read(a.join("config.resolved")).unwrap(), fs::read(b.join("config.resolved")).unwrap());
}

#[test]
fn teacher_distill_quantize_generate_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg = write_config(tmp.path(), "");
    let t = ok(&["train-teacher", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(csv_rows(&t.join("train_loss.csv")).len(), 2);
    assert_eq!(csv_rows(&t.join("val_loss.csv")).len(), 1);

    let cfg = write_config(tmp.path(), &format!("paths.teacher = {}\n", t.join("teacher.tkdc").display()));
    let d1 = ok(&["distill", "--config", s(&cfg), "--variant", "bikl", "--out", s(&out)]);
    let d2 = ok(&["distill", "--config", s(&cfg), "--variant", "bikl", "--out", s(&tmp.path().join("again"))]);
    for f in ["student.tkdc", "train_loss.csv", "val_loss.csv", "config.resolved"] {
        assert_eq!(fs::read(d1.join(f)).unwrap(), fs::read(d2.join(f)).unwrap(), "{f}");
    }
    assert!(csv_rows(&d1.join("train_loss.csv")).iter().all(|r| r[2] == "bikl"));
    assert!(fs::read_to_string(d1.join("config.resolved")).unwrap().contains("distill.variant = bikl"));

    let student = d1.join("student.tkdc");
    let cfg = write_config(tmp.path(), &format!("paths.student = {}\n", student.display()));
    let q = ok(&["quantize", "--config", s(&cfg), "--plan", "paper", "--out", s(&out)]);
    let rows = csv_rows(&q.join("size_report.csv"));
    let get = |k: &str| rows.iter().find(|r| r[0] == k).unwrap()[1].clone();
    assert_eq!(get("file").parse::<u64>().unwrap(), fs::metadata(q.join("quantized.tkdc")).unwrap().len());
    assert!(get("ratio").parse::<f64>().unwrap() > 0.0);

    let g = ok(&["generate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(fs::read_to_string(g.join("samples.txt")).unwrap().lines().count(), 9);

    let e = ok(&["eval", "--config", s(&cfg), "--out", s(&out)]);
    let rows = csv_rows(&e.join("eval.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "checkpoint");
    assert_eq!(rows[0][4], "0");
}

#[test]
fn compare_losses_emits_six_aligned_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let dir = ok(&["compare-losses", "--config", s(&cfg), "--out", s(tmp.path())]);
    let rows = csv_rows(&dir.join("curves.csv"));
    let mut variants: Vec<&str> = rows.iter().map(|r| r[3].as_str()).collect();
    variants.dedup();
    assert_eq!(
        variants,
        ["forward-kl", "backward-kl", "fixed-param-bikl", "bikl", "stepped-bikl", "stage-mixed-skewed"]
    );
    assert_eq!(rows.len(), 6 * 4);
    assert_eq!(csv_rows(&dir.join("summary.csv")).len(), 6);
    assert_eq!(csv_rows(&dir.join("val_curves.csv")).len(), 6 * 2);
    assert!(dir.join("teacher.tkdc").exists());
    assert!(fs::read_to_string(dir.join("run.log")).unwrap().contains("forward-kl:"));
}

#[test]
fn ablation_emits_four_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let dir = ok(&["ablation", "--config", s(&cfg), "--out", s(tmp.path())]);
    let rows = csv_rows(&dir.join("ablation.csv"));
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["baseline", "kd", "quant", "kd+quant"]);
    assert_eq!(rows[0][4], "0");
    assert_eq!(rows[1][4], "0");
    assert_eq!(rows[0][3], rows[1][3]);
    assert_eq!(rows[2][3], rows[3][3]);
}
