use std::path::Path;
use std::process::{Command, Output};

fn cfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfl")).args(args).env_remove("CFL_SEED").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

/// The bundled motivating scenario, written out as a file.
fn motivating_file(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("motivating.json");
    std::fs::write(&path, stdout(&cfl(&["show", "motivating"]))).unwrap();
    path
}

#[test]
fn list_names_the_bundled_scenarios() {
    let o = cfl(&["list"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    for id in ["motivating", "smoking", "remark8"] {
        assert!(out.lines().any(|l| l.starts_with(id)), "{out}");
    }
}

#[test]
fn passing_run_exits_zero_with_csv() {
    let o = cfl(&["run", "motivating"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("scenario,estimand,"));
    assert!(out.lines().skip(1).all(|l| l.contains(",true,")), "{out}");
}

#[test]
fn markdown_report_to_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.md");
    let o = cfl(&["run", "smoking", "--format", "md", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
    assert!(std::fs::read_to_string(out).unwrap().starts_with("# Scenario `smoking`: PASS"));
}

#[test]
fn failing_expectation_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = motivating_file(dir.path());
    let src = std::fs::read_to_string(&path).unwrap();
    let broken = src.replacen("\"alpha + beta\"", "\"alpha + beta + 1\"", 1);
    assert_ne!(src, broken, "fixture lost its symbolic expectation");
    std::fs::write(&path, broken).unwrap();
    let o = cfl(&["run", path.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stdout(&o).contains(",false,"));
}

#[test]
fn input_errors_exit_two() {
    assert_eq!(code(&cfl(&["run", "/no/such/file.json"])), 2);
    assert_eq!(code(&cfl(&["run", "motivating", "--engine", "quantum"])), 2);
    assert_eq!(code(&cfl(&["run", "motivating", "--param", "gamma=1"])), 2);
    assert_eq!(code(&cfl(&["compare", "prop2:R", "prop2:Nope", "--level", "single"])), 2);
    assert_eq!(code(&cfl(&["show", "nope"])), 2);
    assert_eq!(code(&cfl(&["frobnicate"])), 2);
}

#[test]
fn check_accepts_valid_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = cfl(&["check", motivating_file(dir.path()).to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("motivating: ok"));
}

#[test]
fn check_reports_where_a_file_is_wrong() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\n  \"id\": \"x\",\n  \"noises\": [{\"name\": \"U\", \"dist\": \"bernoulli\"}]\n}\n")
        .unwrap();
    let o = cfl(&["check", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("bad.json") && err.contains("line 3") && err.contains("`p`"), "{err}");
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let args = ["run", "prop2", "--engine", "mc", "--samples", "20000", "--seed", "5"];
    assert_eq!(cfl(&args).stdout, cfl(&args).stdout);

    let env_run = |seed: &str| {
        Command::new(env!("CARGO_BIN_EXE_cfl"))
            .args(["run", "prop2", "--engine", "mc", "--samples", "20000"])
            .env("CFL_SEED", seed)
            .output()
            .unwrap()
            .stdout
    };
    assert_eq!(env_run("5"), cfl(&args).stdout);
    assert_ne!(env_run("6"), cfl(&args).stdout);
}

#[test]
fn compare_prints_a_verdict() {
    let o = cfl(&["compare", "remark4:R", "remark4:F", "--level", "single"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("verdict:   equal"), "{}", stdout(&o));

    // a verdict of not_equal is still a successful comparison
    let o = cfl(&["compare", "prop2:R", "prop2:E", "--level", "single"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("verdict:   not_equal"), "{}", stdout(&o));

    let o = cfl(&["compare", "cor1:R", "cor1:E", "--level", "as"]);
    assert!(stdout(&o).contains("verdict:   not_equal"), "{}", stdout(&o));
}

#[test]
fn parameters_can_be_overridden() {
    let o = cfl(&["run", "motivating", "--param", "alpha=-1.5", "--param", "beta=0.5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}
