mod common;

use common::*;
use tempfile::tempdir;

const TORUS_8: &str = r#"
[manifold]
topology = "torus"
n = 3
shape = [8, 8, 8]
lengths = [1.0, 1.0, 1.0]
"#;

#[test]
fn expected_refusal_exits_zero() {
    let dir = tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "refuse",
        &format!("scenario = \"closed_zero_eigenvalue\"\nexpect = \"refused\"\n{TORUS_8}\n[fields.S]\npreset = \"constant\"\nc = 1.0\n"),
    );
    let out = run(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = out_dir(dir.path(), "refuse").join("report.json");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(json["outcome"]["kind"], "refused");
    assert_eq!(code(&verify(&out_dir(dir.path(), "refuse"))), 0);
}

#[test]
fn unexpected_refusal_exits_two() {
    let dir = tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "refuse",
        &format!("scenario = \"closed_zero_eigenvalue\"\n{TORUS_8}\n[fields.S]\npreset = \"constant\"\nc = 1.0\n"),
    );
    assert_eq!(code(&run(&["run", cfg.to_str().unwrap()])), 2);
}

#[test]
fn config_errors_exit_four() {
    let dir = tempdir().unwrap();
    let missing = config(
        dir.path(),
        "missing",
        &format!("scenario = \"closed_zero_eigenvalue\"\n{TORUS_8}\n[fields.S]\npreset = \"csv\"\npath = \"nope.csv\"\n"),
    );
    assert_eq!(code(&run(&["run", missing.to_str().unwrap()])), 4);
    let unknown = config(
        dir.path(),
        "unknown",
        &format!("scenario = \"closed_zero_eigenvalue\"\ncolour = 3\n{TORUS_8}\n[fields.S]\npreset = \"constant\"\nc = 0.0\n"),
    );
    assert_eq!(code(&run(&["run", unknown.to_str().unwrap()])), 4);
    let incomplete = config(
        dir.path(),
        "incomplete",
        &format!("scenario = \"closed_zero_eigenvalue\"\n{TORUS_8}\n[fields.S]\npreset = \"sinusoid_shift\"\namplitude = 1.0\n"),
    );
    assert_eq!(code(&run(&["run", incomplete.to_str().unwrap()])), 4);
    assert_eq!(code(&run(&["run", dir.path().join("absent.toml").to_str().unwrap()])), 4);
}

#[test]
fn zero_curvature_round_trips_through_csv() {
    let dir = tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "zero",
        &format!("scenario = \"closed_zero_eigenvalue\"\n{TORUS_8}\n[fields.S]\npreset = \"constant\"\nc = 0.0\n"),
    );
    assert_eq!(code(&run(&["run", cfg.to_str().unwrap()])), 0);
    let out = out_dir(dir.path(), "zero");
    assert!(out.join("u.csv").is_file());
    assert!(out.join("trace.csv").is_file());
    assert_eq!(code(&verify(&out)), 0);

    let again = config(
        dir.path(),
        "again",
        &format!("scenario = \"closed_zero_eigenvalue\"\n{TORUS_8}\n[fields.S]\npreset = \"csv\"\npath = \"zero_out/S.csv\"\n"),
    );
    assert_eq!(code(&run(&["run", again.to_str().unwrap()])), 0);
}

#[test]
fn gauss_run_verifies_and_detects_tampering() {
    let dir = tempdir().unwrap();
    let cfg = config(dir.path(), "gauss", GAUSS_32);
    let out = run(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = out_dir(dir.path(), "gauss");
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,J,grad_norm,mean_u,K_moment"));
    assert_eq!(code(&verify(&out)), 0);
    perturb(&out.join("u.csv"), 17, 1.1);
    let bad = verify(&out);
    assert_eq!(code(&bad), 5);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("residual_interior"));
}

#[test]
fn verify_rejects_empty_dir() {
    let dir = tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let report = dir.path().join("report.json");
    let out = run(&["verify", report.to_str().unwrap(), empty.to_str().unwrap()]);
    assert_eq!(code(&out), 4);
}

#[test]
fn replay_is_bit_identical() {
    let dir = tempdir().unwrap();
    let a = config(dir.path(), "a", NEG_CYLINDER);
    let b = config(dir.path(), "b", NEG_CYLINDER);
    assert_eq!(code(&run(&["run", a.to_str().unwrap()])), 0);
    assert_eq!(code(&run(&["run", b.to_str().unwrap()])), 0);
    for file in ["report.json", "u.csv", "trace.csv"] {
        let x = std::fs::read(out_dir(dir.path(), "a").join(file)).unwrap();
        let y = std::fs::read(out_dir(dir.path(), "b").join(file)).unwrap();
        assert!(x == y, "{file} differs between replays");
    }
}

#[test]
fn classify_prints_eigenvalue_and_verdict() {
    let dir = tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "classify",
        &format!("scenario = \"closed_zero_eigenvalue\"\n{TORUS_8}\n[fields.S]\npreset = \"sinusoid_shift\"\namplitude = 1.0\nshift = -0.2\naxis = 1\n"),
    );
    let out = run(&["classify", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(json["eigenvalue"].as_f64().unwrap().abs() < 1e-10);
    assert_eq!(json["verdict"]["case"], "Admissible");
}

#[test]
fn random_modes_follow_the_seed() {
    let dir = tempdir().unwrap();
    let body = |seed: u64| {
        format!("scenario = \"closed_zero_eigenvalue\"\nexpect = \"any\"\nseed = {seed}\n{TORUS_8}\n[fields.S]\npreset = \"random_modes\"\nmodes = 3\namplitude = 1.0\nshift = 2.0\n")
    };
    let a = config(dir.path(), "a", &body(1));
    let b = config(dir.path(), "b", &body(1));
    let c = config(dir.path(), "c", &body(2));
    for cfg in [&a, &b, &c] {
        assert_eq!(code(&run(&["run", cfg.to_str().unwrap()])), 0);
    }
    let read = |n: &str| std::fs::read(out_dir(dir.path(), n).join("S.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}
