use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use betafact::io::read_matrix;
use betafact::models::{check_constraints, ModelKind, Theta};

fn betafact(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_betafact")).args(args).env("BETAFACT_THREADS", "2").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = betafact(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_phantom(dir: &Path, model: &str) {
    ok(&[
        "phantom",
        "--out",
        s(dir),
        "--frames",
        "10",
        "--voxels",
        "60",
        "--factors",
        "3",
        "--nv",
        "2",
        "--model",
        model,
        "--noise",
        "poisson",
        "--scale",
        "200",
        "--seed",
        "5",
    ]);
}

#[test]
fn phantom_is_reproducible_and_rerunnable_from_its_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    small_phantom(&a, "slmm");
    small_phantom(&b, "slmm");
    for f in ["Y.bfmat", "gt_M.bfmat", "gt_A.bfmat", "gt_X.bfmat", "gt_V.bfmat", "gt_B.bfmat", "frames.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    ok(&["phantom", "--config", s(&a.join("manifest.cfg")), "--out", s(&c)]);
    assert_eq!(fs::read(a.join("Y.bfmat")).unwrap(), fs::read(c.join("Y.bfmat")).unwrap());
    let y = read_matrix(&a.join("Y.bfmat")).unwrap();
    assert_eq!(y.dim(), (10, 60));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(betafact(&["phantom", "--frames", "10"]).status.code(), Some(2));
    assert_eq!(betafact(&["fit", "--model", "nmf"]).status.code(), Some(2));
    assert_eq!(betafact(&["nonsense"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "frames = 10\nunknown_key = 1\n").unwrap();
    assert_eq!(betafact(&["phantom", "--config", s(&cfg), "--out", s(tmp.path())]).status.code(), Some(2));
}

#[test]
fn slmm_fit_requires_a_basis() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    small_phantom(&ph, "slmm");
    let out = betafact(&[
        "fit",
        "--data",
        s(&ph.join("Y.bfmat")),
        "--model",
        "slmm",
        "--beta",
        "1",
        "--lambda",
        "0.01",
        "--factors",
        "3",
        "--out",
        s(&tmp.path().join("fit")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--v"));
}

#[test]
fn fit_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    let fit_dir = tmp.path().join("fit");
    small_phantom(&ph, "slmm");
    ok(&[
        "fit",
        "--data",
        s(&ph.join("Y.bfmat")),
        "--model",
        "slmm",
        "--beta",
        "1",
        "--preset",
        "6it",
        "--factors",
        "3",
        "--v",
        s(&ph.join("gt_V.bfmat")),
        "--max-iter",
        "200",
        "--seed",
        "2",
        "--out",
        s(&fit_dir),
    ]);
    for f in ["M.bfmat", "A.bfmat", "B.bfmat", "V.bfmat", "objective_trace.csv", "manifest.cfg", "result.cfg"] {
        assert!(fit_dir.join(f).exists(), "{f}");
    }
    let manifest = fs::read_to_string(fit_dir.join("manifest.cfg")).unwrap();
    assert!(manifest.contains("lambda = 0.0013"), "{manifest}");
    let theta =
        Theta::new(read_matrix(&fit_dir.join("M.bfmat")).unwrap(), read_matrix(&fit_dir.join("A.bfmat")).unwrap())
            .with_variability(
                read_matrix(&fit_dir.join("V.bfmat")).unwrap(),
                read_matrix(&fit_dir.join("B.bfmat")).unwrap(),
            );
    assert!(check_constraints(ModelKind::Slmm, &theta).is_empty());
    let trace = fs::read_to_string(fit_dir.join("objective_trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,objective\n"));

    let refit = tmp.path().join("refit");
    ok(&["fit", "--config", s(&fit_dir.join("manifest.cfg")), "--out", s(&refit)]);
    assert_eq!(fs::read(fit_dir.join("M.bfmat")).unwrap(), fs::read(refit.join("M.bfmat")).unwrap());

    let metrics = tmp.path().join("metrics.csv");
    ok(&["eval", "--fit", s(&fit_dir), "--gt", s(&ph), "--out", s(&metrics)]);
    let text = fs::read_to_string(&metrics).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("psnr,"));
    let psnr: f64 = lines[1].split(',').next().unwrap().parse().unwrap();
    assert!(psnr.is_finite());
}

#[test]
fn eval_of_the_truth_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    small_phantom(&ph, "lmm");
    let fake = tmp.path().join("fit");
    fs::create_dir_all(&fake).unwrap();
    fs::copy(ph.join("gt_M.bfmat"), fake.join("M.bfmat")).unwrap();
    fs::copy(ph.join("gt_A.bfmat"), fake.join("A.bfmat")).unwrap();
    let out = ok(&["eval", "--fit", s(&fake), "--gt", s(&ph)]);
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "inf");
    assert_eq!(row[1], "0");
}

#[test]
fn init_file_violating_constraints_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    small_phantom(&ph, "lmm");
    let a_bad = tmp.path().join("a.csv");
    let row = vec!["0.5"; 60].join(",");
    fs::write(&a_bad, format!("{row}\n{row}\n{row}\n")).unwrap();
    let out = betafact(&[
        "fit",
        "--data",
        s(&ph.join("Y.bfmat")),
        "--model",
        "lmm",
        "--beta",
        "1",
        "--init",
        "file",
        "--m-init",
        s(&ph.join("gt_M.bfmat")),
        "--a-init",
        s(&a_bad),
        "--out",
        s(&tmp.path().join("fit")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sum"));
}

#[test]
fn sweep_writes_cells_and_aggregates() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    small_phantom(&ph, "lmm");
    let out = tmp.path().join("sweep");
    ok(&[
        "sweep",
        "--phantom",
        s(&ph),
        "--model",
        "lmm",
        "--factors",
        "3",
        "--betas",
        "1,2",
        "--seeds",
        "1,2,3",
        "--fix-factors",
        "--max-iter",
        "50",
        "--out",
        s(&out),
    ]);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 1 + 6 + 2);
    assert_eq!(lines.iter().filter(|l| l.starts_with("cell,")).count(), 6);
    assert_eq!(lines.iter().filter(|l| l.starts_with("aggregate,")).count(), 2);
    assert!(lines[1..7].iter().all(|l| l.split(',').nth(3) == Some("ok")), "{summary}");

    let again = tmp.path().join("again");
    ok(&["sweep", "--config", s(&out.join("manifest.cfg")), "--out", s(&again)]);
    assert_eq!(summary, fs::read_to_string(again.join("summary.csv")).unwrap());
}
