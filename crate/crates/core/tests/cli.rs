//! The `fpf` binary end to end on the toy problem.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fpf::artifacts::{
    read_grid_csv, read_json, RunManifest, RunStatus, MANIFEST_FILE, ORACLE_FILE,
};
use fpf::benchmarks::toy_analytic_fpf;
use fpf::cli::{execute_run, load_run_fpf};
use fpf::config::RunConfig;
use tempfile::TempDir;

fn fpf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpf"))
        .args(args)
        .output()
        .unwrap()
}

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn run_grid_compare() {
    let tmp = TempDir::new().unwrap();
    let (run, grid) = (tmp.path().join("run"), tmp.path().join("grid"));
    let out = fpf(&["run", "--config", s(&toy_config()), "--out", s(&run)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("P(F)"));

    let m: RunManifest = read_json(&run.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.status, RunStatus::Complete);
    m.check_totals().unwrap();
    m.verify_checksums(&run).unwrap();
    assert!(m.total_evaluations <= 40_000);
    assert_eq!(
        m.n_it.unwrap() + 1,
        (0..)
            .take_while(|k| run.join(format!("samples/level_{k}.csv")).exists())
            .count()
    );

    let out = fpf(&[
        "grid",
        "--config",
        s(&toy_config()),
        "--out",
        s(&grid),
        "--analytic",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let table = read_grid_csv(&grid.join(ORACLE_FILE)).unwrap();
    assert_eq!(table.points.len(), 21);
    assert!(table
        .points
        .iter()
        .all(|p| p.pf_hat == toy_analytic_fpf(p.phi[0])));

    let out = fpf(&["compare", s(&run), s(&grid.join(ORACLE_FILE))]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    assert!(run.join("comparison.csv").exists());
    assert!(std::fs::read_to_string(run.join("comparison.txt"))
        .unwrap()
        .contains("PASS"));

    // an impossible tolerance fails the comparison with its own exit code
    let out = fpf(&[
        "compare",
        s(&run),
        s(&grid.join(ORACLE_FILE)),
        "--tolerance",
        "1e-9",
    ]);
    assert_eq!(out.status.code(), Some(4));

    // a dMCS table on a coarser grid of the same box is accepted
    let coarse = tmp.path().join("coarse");
    let out = fpf(&[
        "grid",
        "--config",
        s(&toy_config()),
        "--out",
        s(&coarse),
        "--resolution",
        "5",
        "--n-per-point",
        "2000",
    ]);
    assert!(out.status.success());
    let om: serde_json::Value = read_json(&coarse.join("oracle_manifest.json")).unwrap();
    assert_eq!(om["total_evaluations"], 5 * 2000);
}

#[test]
fn loaded_run_matches_in_memory_fpf() {
    let tmp = TempDir::new().unwrap();
    let cfg = RunConfig::load(&toy_config()).unwrap();
    let r = execute_run(&cfg, tmp.path()).unwrap();
    let loaded = load_run_fpf(tmp.path()).unwrap();
    for i in 0..=40 {
        let phi = [i as f64 / 10.0];
        assert_eq!(
            loaded.value(&phi).unwrap().to_bits(),
            r.fpf.value(&phi).unwrap().to_bits()
        );
        assert_eq!(
            loaded.piecewise(&phi).unwrap().to_bits(),
            r.fpf.piecewise(&phi).unwrap().to_bits()
        );
    }
    assert_eq!(loaded.chain.to_record(), r.fpf.chain.to_record());
}

#[test]
fn runs_are_byte_identical_across_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(fpf(&[
        "run",
        "--config",
        s(&toy_config()),
        "--out",
        s(&a),
        "--seed",
        "3"
    ])
    .status
    .success());
    assert!(fpf(&[
        "--threads",
        "1",
        "run",
        "--config",
        s(&toy_config()),
        "--out",
        s(&b),
        "--seed",
        "3"
    ])
    .status
    .success());
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.len() > 10);
    assert_eq!(
        fa.iter().map(|f| &f.0).collect::<Vec<_>>(),
        fb.iter().map(|f| &f.0).collect::<Vec<_>>()
    );
    for (x, y) in fa.iter().zip(&fb) {
        assert!(x.1 == y.1, "{} differs", x.0.display());
    }
    let m: RunManifest = read_json(&a.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.seed, 3);
}

#[test]
fn config_and_usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nkind = \"toy\"\n[pipeline]\nratio = 2.0\n").unwrap();
    let out = fpf(&[
        "run",
        "--config",
        s(&bad),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pipeline.ratio"));
    assert_eq!(
        fpf(&["run", "--config", s(&tmp.path().join("missing.toml"))])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(fpf(&["frobnicate"]).status.code(), Some(2));
    // a model without a closed form cannot write an analytic table
    let beam = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/beam.toml");
    let out = fpf(&[
        "grid",
        "--config",
        s(&beam),
        "--out",
        s(&tmp.path().join("g")),
        "--analytic",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compare_rejects_mismatched_grid() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    let cfg = RunConfig::load(&toy_config()).unwrap();
    execute_run(&cfg, &run).unwrap();
    let table = tmp.path().join("table.csv");
    std::fs::write(&table, "phi_1,pf_hat,n,cov\n0,0.5,0,0\n3,0.001,0,0\n").unwrap();
    let out = fpf(&["compare", s(&run), s(&table)]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("axis 1"));
}
