use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wfs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wfs"))
        .args(args)
        .env("WFS_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = wfs(args);
    assert!(
        out.status.success(),
        "wfs {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(args: &[&str]) -> Option<i32> {
    wfs(args).status.code()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen", "--suite", "elasticity-30-linear", "--out", s(d)]);
    }
    let (fa, fb) = (files(&a.join("inputs")), files(&b.join("inputs")));
    assert_eq!(fa.len(), 30);
    assert_eq!(fa, fb);
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
}

#[test]
fn config_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    assert_eq!(code(&["gen", "--suite", "no-such-suite", "--out", out]), Some(2));
    assert_eq!(
        code(&["eval", "--checkpoint", "missing.wfsm", "--mc", "1", "--out", out]),
        Some(2)
    );
    assert_eq!(code(&["train", "--optimizer", "sgd", "--out", out]), Some(2));
    assert_eq!(code(&["train", "--epochs", "0", "--out", out]), Some(2));
    let threads = Command::new(env!("CARGO_BIN_EXE_wfs"))
        .args(["gen", "--out", out])
        .env("WFS_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn missing_files_exit_with_4() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    let missing = tmp.path().join("nope.wfsm");
    assert_eq!(
        code(&["train", "--bayesian", "--warm-start", s(&missing), "--out", out]),
        Some(4)
    );
    assert_eq!(code(&["eval", "--checkpoint", s(&missing), "--out", out]), Some(4));
    let cfg = tmp.path().join("absent.json");
    assert_eq!(code(&["--config", s(&cfg), "gen"]), Some(4));
}

#[test]
fn dns_writes_fields_and_sidecars() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["dns", "--suite", "nonlinear-steps", "--out", s(tmp.path())]);
    let dns = tmp.path().join("dns");
    assert_eq!(files(&dns).len(), 20);
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dns.join("stretch-step10.json")).unwrap()).unwrap();
    assert_eq!(side["converged"], true);
    assert!(!side["reactions"].as_array().unwrap().is_empty());
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let det = root.join("det");
    let small = [
        "--suite", "diffusion-20", "--epochs", "3", "--zero-init-epochs", "1", "--copies", "1",
        "--batch-size", "4", "--checkpoint-every", "2",
    ];
    ok(&["gen", "--suite", "diffusion-20", "--out", s(&det)]);
    let mut args = vec!["train"];
    args.extend(small);
    args.extend(["--out", s(&det)]);
    ok(&args);

    let ckpt = det.join("checkpoints");
    for f in ["epoch-000002.wfsm", "final.wfsm", "best.wfsm"] {
        assert!(ckpt.join(f).exists(), "{f} missing");
    }
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(det.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["history"].as_array().unwrap().len(), 3);
    let csv = fs::read_to_string(det.join("history.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let final_ckpt = ckpt.join("final.wfsm");
    ok(&["eval", "--suite", "diffusion-20", "--checkpoint", s(&final_ckpt), "--out", s(&det)]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(det.join("report/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["bvps"].as_array().unwrap().len(), 20);
    assert!(summary["averaged_l2"].as_f64().unwrap().is_finite());
    assert!(det.join("report/domain5-bc2.csv").exists());

    let bnn = root.join("bnn");
    ok(&[
        "train", "--bayesian", "--suite", "diffusion-20", "--epochs", "1", "--copies", "1",
        "--warm-start", s(&final_ckpt), "--out", s(&bnn),
    ]);
    let bnn_ckpt = bnn.join("checkpoints/final.wfsm");
    ok(&[
        "eval", "--suite", "diffusion-20", "--checkpoint", s(&bnn_ckpt), "--mc", "3", "--out", s(&bnn),
    ]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(bnn.join("report/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["samples"], 3);
    assert!(summary["sigma2"].as_f64().unwrap() > 0.0);
    assert_eq!(summary["sigma2_history"].as_array().unwrap().len(), 1);

    // the Bayesian checkpoint does not fit a different preset
    assert_eq!(
        code(&["eval", "--suite", "diffusion-20", "--preset", "octagon", "--checkpoint", s(&bnn_ckpt), "--out", s(&bnn)]),
        Some(2)
    );
}
