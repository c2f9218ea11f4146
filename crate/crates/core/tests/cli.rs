use std::process::{Command, Output};

use dqp::generators::gen_simplex;
use dqp::problem::io::store_problem;
use dqp::problem::QpProblem;
use dqp::sparse::CscMatrix;

fn dqp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dqp")).args(args).output().expect("binary runs")
}

fn stored(problem: &QpProblem) -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("problem.json");
    store_problem(problem, &path).unwrap();
    (dir, path.to_string_lossy().into_owned())
}

#[test]
fn solve_succeeds_quietly() {
    let (_dir, path) = stored(&gen_simplex(4, 0).0);
    let out = dqp(&["solve", &path]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stderr.is_empty(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("J = "));
}

#[test]
fn solve_json_reports_point() {
    let (_dir, path) = stored(&gen_simplex(4, 0).0);
    let out = dqp(&["solve", &path, "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let z: Vec<f64> = serde_json::from_value(report["z"].clone()).unwrap();
    assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn out_file_receives_report() {
    let (dir, path) = stored(&gen_simplex(3, 1).0);
    let target = dir.path().join("report.txt");
    let out = dqp(&["solve", &path, "--out", target.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(std::fs::read_to_string(target).unwrap().contains("z = "));
}

#[test]
fn parse_errors_exit_two() {
    assert_eq!(dqp(&["solve", "/nonexistent/problem.json"]).status.code(), Some(2));
    assert_eq!(dqp(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(dqp(&["solve", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn unknown_backend_exits_three() {
    let (_dir, path) = stored(&gen_simplex(3, 0).0);
    assert_eq!(dqp(&["solve", &path, "--solver", "nope"]).status.code(), Some(3));
}

#[test]
fn singular_reduced_system_exits_four() {
    // Two copies of the same active row make K_J singular.
    let problem = QpProblem::new(
        CscMatrix::identity(1),
        vec![0.0],
        CscMatrix::zeros(0, 1),
        vec![],
        CscMatrix::from_rows(&[&[1.0], &[1.0]]),
        vec![-1.0, -1.0],
    )
    .unwrap();
    let (_dir, path) = stored(&problem);
    assert_eq!(dqp(&["solve", &path, "--solver", "brute_force"]).status.code(), Some(4));
}

#[test]
fn commands_succeed_on_small_suites() {
    for args in [
        &["bench", "--suite", "simplex", "--sizes", "10", "--seeds", "2"][..],
        &["profile", "--suite", "random-dense", "--size", "10"],
        &["check-grad", "--suite", "chain", "--size", "4"],
        &["bilevel"],
    ] {
        let out = dqp(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(out.stderr.is_empty(), "{args:?}");
    }
}

#[test]
fn bench_csv_header() {
    let out = dqp(&["bench", "--suite", "random-sparse", "--sizes", "20"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some(dqp::cli::bench::CSV_HEADER));
}
