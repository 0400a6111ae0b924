use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dampopt"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn scratch(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("dampopt-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_passes_and_reports_each_property() {
    let o = run(&["validate", "-n", "16"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    for p in ["kronecker-lyapunov", "decomposition-residual", "woodbury-identity", "delta-dense-trace", "block-identities"] {
        assert!(out.lines().any(|l| l.starts_with("PASS") && l.contains(p)), "{p}\n{out}");
    }
}

#[test]
fn validate_mutation_fails_the_indicator_property() {
    let o = run(&["validate", "-n", "12", "--mutate-delta"]);
    assert_eq!(code(&o), 1);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.lines().any(|l| l.starts_with("FAIL") && l.contains("delta-dense-trace")));
}

#[test]
fn validate_rejects_tiny_systems() {
    assert_eq!(code(&run(&["validate", "-n", "1"])), 2);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&run(&["run", "--tol-opt", "-1"])), 2);
    assert_eq!(code(&run(&["run", "--method", "nope"])), 2);
    assert_eq!(code(&run(&["run", "-n", "20", "--positions", "3,3"])), 2);
    assert_eq!(code(&run(&["run", "-n", "20", "--positions", "3", "--gains", "1,2"])), 2);
    let o = bin().args(["validate", "-n", "4"]).env("DAMPOPT_THREADS", "zero").output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn repeated_runs_are_bit_identical_and_compare() {
    let dir = scratch("run");
    for (stem, threads) in [("a", "1"), ("b", "3")] {
        let o = bin()
            .args(["run", "-n", "20", "--positions", "2,4", "--method", "vh-delta", "--seed", "9", "-o"])
            .arg(dir.join(stem))
            .env("DAMPOPT_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let table = String::from_utf8(o.stdout).unwrap();
        for row in ["Time", "Dimension", "Position", "Gain", "Error", "Acceleration"] {
            assert!(table.contains(row), "{row}");
        }
    }
    for ext in ["results.csv", "trace.csv", "deltas.csv"] {
        let a = std::fs::read(dir.join(format!("a.{ext}"))).unwrap();
        let b = std::fs::read(dir.join(format!("b.{ext}"))).unwrap();
        assert_eq!(a, b, "{ext}");
    }
    let o = bin()
        .args(["run", "-n", "20", "--positions", "2,4", "--method", "full", "-o"])
        .arg(dir.join("full"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let cmp = dir.join("cmp.csv");
    let o = run(&["compare", s(&dir.join("full.results.csv")), s(&dir.join("a.results.csv")), "-o", s(&cmp)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("Original") && text.contains("V_H with Delta"));
    let csv = std::fs::read_to_string(&cmp).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let o = run(&["compare", s(&dir.join("a.results.csv"))]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("no full-order run"));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn made_system_runs_like_the_builtin_example() {
    let dir = scratch("sys");
    let o = run(&["make-system", "-n", "20", "-o", s(&dir)]);
    assert_eq!(code(&o), 0);
    let from_file = dir.join("file");
    let builtin = dir.join("builtin");
    let common = ["run", "--positions", "2,4", "--method", "vf"];
    let a = bin().args(common).args(["--system", s(&dir.join("system.toml")), "-o", s(&from_file)]).output().unwrap();
    let b = bin().args(common).args(["-n", "20", "-o", s(&builtin)]).output().unwrap();
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(code(&b), 0);
    let rows = |p: &Path| {
        let t = std::fs::read_to_string(p).unwrap();
        t.lines().nth(1).unwrap().split(',').skip(2).collect::<Vec<_>>().join(",")
    };
    let fa = rows(&dir.join("file.results.csv"));
    let fb = rows(&dir.join("builtin.results.csv"));
    let cols = |r: &str| r.split(',').take(3).map(String::from).collect::<Vec<_>>();
    assert_eq!(cols(&fa), cols(&fb));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn batch_runs_every_entry() {
    let dir = scratch("batch");
    let file = dir.join("batch.toml");
    let text = format!(
        "[[run]]\nmethod = \"full\"\nn = 20\npositions = [2, 4]\noutput = \"{0}/full\"\n\n\
         [[run]]\nmethod = \"vf\"\nn = 20\npositions = [2, 4]\noutput = \"{0}/vf\"\n",
        s(&dir)
    );
    std::fs::write(&file, text).unwrap();
    let o = run(&["run", "--batch", s(&file)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("Original") && out.contains("V_F"));
    assert!(dir.join("full.results.csv").exists() && dir.join("vf.results.csv").exists());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn failed_run_exits_one_and_flushes_the_trace() {
    assert_eq!(code(&run(&["run", "-n", "20", "--gains", "1e9,1"])), 2);
    assert_eq!(code(&run(&["run", "-n", "20", "--truncation-tol", "0"])), 2);
    // A truncation that keeps no columns, even after refinement, can never
    // satisfy the indicator.
    let dir = scratch("fail");
    let stem = dir.join("sub").join("x");
    let o = run(&[
        "run", "-n", "20", "--positions", "2,4", "--method", "vf-delta",
        "--truncation-tol", "1e9", "-o", s(&stem),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stalled"));
    let trace = std::fs::read_to_string(dir.join("sub").join("x.trace.csv")).unwrap();
    assert!(trace.starts_with("run,iteration"));
    assert!(!dir.join("sub").join("x.results.csv").exists());
    std::fs::remove_dir_all(&dir).unwrap();
}
