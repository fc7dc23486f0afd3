use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};
use sslvm::data::{read_matrix_csv, write_matrix_csv};
use sslvm::eval::{mean_average_precision, rank_by_distance};
use sslvm::kernels::{KernelFamily, KernelSpec};
use sslvm::model::{init_model, read_checkpoint, save, AnyModel, InitStrategy, SsGplvm, View};
use sslvm::variational::{SsPosterior, SsPrior};

fn sslvm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sslvm"))
        .args(args)
        .env_remove("SSLVM_THREADS")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: u64) -> PathBuf {
    let out = dir.join(format!("synth{seed}"));
    let r = sslvm(&["synth", "--seed", &seed.to_string(), "--out-dir", s(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    out
}

const FILES: [&str; 5] = ["latents.csv", "view1.csv", "view2.csv", "mixing1.csv", "mixing2.csv"];

#[test]
fn synth_writes_five_deterministic_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), 3);
    let b = dir.path().join("again");
    assert!(sslvm(&["synth", "--seed", "3", "--out-dir", s(&b)]).status.success());
    for f in FILES {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let v = read_matrix_csv(a.join("view1.csv"), false).unwrap();
    assert_eq!(v.shape(), (50, 12));
    assert_eq!(read_matrix_csv(a.join("latents.csv"), false).unwrap().shape(), (50, 3));
    assert_eq!(read_matrix_csv(a.join("mixing2.csv"), false).unwrap().shape(), (12, 2));
}

#[test]
fn synth_into_unwritable_location_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let target = blocker.join("sub");
    let r = sslvm(&["synth", "--out-dir", s(&target)]);
    assert_eq!(r.status.code(), Some(2));
    let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(entries.len(), 1);
}

#[test]
fn zero_iterations_checkpoint_equals_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(dir.path(), 0);
    let ck = dir.path().join("m.ckpt");
    let r = sslvm(&[
        "train", "--data", s(&d.join("view1.csv")), "--q", "3", "--m", "6", "--kernel", "expquad", "--iters", "0",
        "--seed", "4", "--checkpoint", s(&ck),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let y = read_matrix_csv(d.join("view1.csv"), false).unwrap();
    let init = init_model(&y, 3, 6, KernelFamily::ExpQuad, &InitStrategy::Pca, 4).unwrap();
    let loaded = sslvm::model::load(&ck, vec![y]).unwrap();
    assert_eq!(loaded, AnyModel::Single(init));
}

#[test]
fn training_prints_summary_and_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(dir.path(), 0);
    let ck = dir.path().join("m.ckpt");
    let trace = dir.path().join("trace.csv");
    let r = sslvm(&[
        "train", "--data", s(&d.join("view1.csv")), "--q", "5", "--m", "5", "--kernel", "linear", "--iters", "300",
        "--checkpoint", s(&ck), "--trace", s(&trace),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let out = String::from_utf8_lossy(&r.stdout);
    assert!(out.contains("elbo"));
    assert!(out.contains("view 0 gamma"));
    assert!(out.contains("lengthscales"));
    let t = fs::read_to_string(trace).unwrap();
    assert!(t.starts_with("iter,elbo,grad_norm"));
    assert!(t.lines().count() > 2);
}

#[test]
fn mismatched_views_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(dir.path(), 0);
    let y = read_matrix_csv(d.join("view2.csv"), false).unwrap();
    let short = dir.path().join("short.csv");
    write_matrix_csv(&short, &y.rows(0, 30).into_owned(), None).unwrap();
    let r = sslvm(&[
        "train", "--data", &format!("{},{}", s(&d.join("view1.csv")), s(&short)), "--checkpoint",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("rows"));
    assert!(!dir.path().join("m.ckpt").exists());
}

#[test]
fn config_file_fills_in_unset_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(dir.path(), 0);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"q": 3, "m": 4, "kernel": "linear", "iters": 0}"#).unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    let data = d.join("view1.csv");
    assert!(sslvm(&["train", "--data", s(&data), "--config", s(&cfg), "--checkpoint", s(&a)]).status.success());
    assert!(sslvm(&["train", "--data", s(&data), "--config", s(&cfg), "--q", "2", "--checkpoint", s(&b)])
        .status
        .success());
    let ca = read_checkpoint(&a).unwrap();
    let cb = read_checkpoint(&b).unwrap();
    assert_eq!(ca.mu.ncols(), 3);
    assert_eq!(cb.mu.ncols(), 2);
    assert_eq!(ca.views[0].z.nrows(), 4);
    assert_eq!(ca.views[0].kernel.family, KernelFamily::Linear);

    fs::write(&cfg, r#"{"qq": 3}"#).unwrap();
    let r = sslvm(&["train", "--data", s(&data), "--config", s(&cfg), "--checkpoint", s(&a)]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_one_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(dir.path(), 0);
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"q": 2, "kernel": {"family": "expquad", "variance": 1e300, "lengthscales": [1, 1]}}"#).unwrap();
    let ck = dir.path().join("m.ckpt");
    let diag = dir.path().join("diag.json");
    let r = sslvm(&[
        "train", "--data", s(&d.join("view1.csv")), "--config", s(&cfg), "--checkpoint", s(&ck), "--diagnostics",
        s(&diag),
    ]);
    assert_eq!(r.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(diag).unwrap()).unwrap();
    assert_eq!(v["command"], "train");
    assert!(!ck.exists());
}

fn train_linear(dir: &Path, d: &Path) -> PathBuf {
    let ck = dir.join("m.ckpt");
    let r = sslvm(&[
        "train", "--data", s(&d.join("view1.csv")), "--q", "5", "--m", "5", "--kernel", "linear", "--iters", "400",
        "--normalize", "--checkpoint", s(&ck),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    ck
}

#[test]
fn infer_is_deterministic_across_thread_counts_and_leaves_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(dir.path(), 2);
    let ck = train_linear(dir.path(), &d);
    let y = read_matrix_csv(d.join("view1.csv"), false).unwrap();
    let test = dir.path().join("test.csv");
    write_matrix_csv(&test, &y.rows(10, 6).into_owned(), None).unwrap();
    let before = (fs::read(&ck).unwrap(), fs::read(&test).unwrap(), fs::read(d.join("view1.csv")).unwrap());

    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("inf{threads}.csv"));
        let r = sslvm(&[
            "--threads", threads, "infer", "--checkpoint", s(&ck), "--data", s(&test), "--out", s(&out), "--iters",
            "200",
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        outputs.push(fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let inferred = read_matrix_csv(dir.path().join("inf1.csv"), false).unwrap();
    assert_eq!(inferred.shape(), (6, 10));
    assert!(inferred.columns(5, 5).iter().all(|v| *v > 0.0));
    let after = (fs::read(&ck).unwrap(), fs::read(&test).unwrap(), fs::read(d.join("view1.csv")).unwrap());
    assert_eq!(before, after);
}

#[test]
fn infer_rejects_bad_view_and_width() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(dir.path(), 2);
    let ck = train_linear(dir.path(), &d);
    let narrow = dir.path().join("narrow.csv");
    write_matrix_csv(&narrow, &DMatrix::from_element(2, 3, 0.5), None).unwrap();
    let out = dir.path().join("o.csv");
    let r = sslvm(&["infer", "--checkpoint", s(&ck), "--data", s(&narrow), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    let r = sslvm(&["infer", "--checkpoint", s(&ck), "--data", s(&d.join("view1.csv")), "--view", "1", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
}

/// A checkpoint whose latent means are exactly `mu`.
fn checkpoint_with_latents(path: &Path, mu: DMatrix<f64>) {
    let (n, q) = mu.shape();
    let view = View {
        y: DMatrix::from_fn(n, 2, |i, j| (i + j) as f64),
        kernel: KernelSpec::default_for(KernelFamily::ExpQuad, q),
        beta: 1.0,
        z: DMatrix::from_fn(2, q, |i, j| (i * q + j) as f64 * 0.3),
    };
    let post = SsPosterior::new(mu, DMatrix::from_element(n, q, 0.5), DVector::from_element(q, 0.5)).unwrap();
    let m = SsGplvm::new(view, post, SsPrior::default()).unwrap();
    save(&AnyModel::Single(m), &[None], path).unwrap();
}

#[test]
fn eval_classify_on_training_latents_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.ckpt");
    checkpoint_with_latents(&ck, DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.1, 0.0, 5.0, 5.0, 5.1, 5.0]));
    let labels = dir.path().join("labels.csv");
    fs::write(&labels, "a\nb\nc\nd\n").unwrap();
    let report = dir.path().join("r.json");
    let r = sslvm(&["eval", "--checkpoint", s(&ck), "--mode", "classify", "--labels", s(&labels), "--report", s(&report)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(v["accuracy"], 1.0);
}

#[test]
fn eval_retrieve_matches_library_map() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.ckpt");
    let gallery = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
    checkpoint_with_latents(&ck, gallery.clone());
    let queries = DMatrix::from_row_slice(2, 1, &[0.2, 2.6]);
    let qpath = dir.path().join("q.csv");
    write_matrix_csv(&qpath, &queries, None).unwrap();
    let labels = dir.path().join("g.csv");
    fs::write(&labels, "x\ny\nx\ny\n").unwrap();
    let qlabels = dir.path().join("ql.csv");
    fs::write(&qlabels, "x\ny\n").unwrap();
    let report = dir.path().join("r.json");
    let pr = dir.path().join("pr.csv");
    let r = sslvm(&[
        "eval", "--checkpoint", s(&ck), "--mode", "retrieve", "--test", s(&qpath), "--labels", s(&labels),
        "--test-labels", s(&qlabels), "--report", s(&report), "--pr-curve", s(&pr),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();

    let rankings = rank_by_distance(&queries, &gallery).unwrap();
    let rel = vec![vec![true, false, true, false], vec![false, true, false, true]];
    let expected = mean_average_precision(&rankings, &rel).unwrap().map;
    // Both queries see relevant, irrelevant, relevant, irrelevant: AP = (1 + 2/3) / 2.
    assert!((expected - 5.0 / 6.0).abs() < 1e-12);
    assert!((v["retrieval"]["map"].as_f64().unwrap() - expected).abs() < 1e-12);
    let curve = fs::read_to_string(pr).unwrap();
    assert!(curve.starts_with("recall,precision"));
    assert_eq!(curve.lines().count(), 5);
}

#[test]
fn eval_unknown_mode_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    let r = sslvm(&[
        "eval", "--checkpoint", s(&dir.path().join("none")), "--mode", "bogus", "--report", s(&dir.path().join("r")),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("Usage"));
}

#[test]
fn eval_recovery_reports_correlations() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(dir.path(), 1);
    let ck = train_linear(dir.path(), &d);
    let report = dir.path().join("r.json");
    let r = sslvm(&[
        "eval", "--checkpoint", s(&ck), "--mode", "recovery", "--truth", s(&d.join("latents.csv")), "--dims", "gamma",
        "--report", s(&report),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(v["recovery"]["scores"].as_array().unwrap().len(), 3);
    assert!(v["selection"][0]["by_gamma"].is_array());
}

#[test]
fn threads_env_var_is_a_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let r = Command::new(env!("CARGO_BIN_EXE_sslvm"))
        .args(["synth", "--out-dir", s(&out)])
        .env("SSLVM_THREADS", "2")
        .output()
        .unwrap();
    assert!(r.status.success());
    let r = sslvm(&["--threads", "0", "synth", "--out-dir", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
}
