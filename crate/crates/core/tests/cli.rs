use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fbsdelta");

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(format!("{name}.json"))
}

fn scratch(label: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fbsdelta-cli-{}-{label}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn run_scenario(command: &str, name: &str, out: Option<&Path>) -> Output {
    let path = scenario(name);
    let mut args = vec![command.to_string(), path.display().to_string()];
    if let Some(dir) = out {
        args.push("--out".into());
        args.push(dir.display().to_string());
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run(&refs)
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn exit_code_golden_suite() {
    let cases = [
        ("validate", "bsde_trinomial", 0),
        ("validate", "linear_coupled", 0),
        ("validate", "nonlinear_monotone", 0),
        ("solve-bsde", "bsde_trinomial", 0),
        ("solve-linear", "linear_coupled", 0),
        ("solve-linear", "linear_singular", 2),
        ("solve-nonlinear", "nonlinear_monotone", 0),
        ("check-monotone", "nonlinear_monotone", 0),
        ("compare-oracle", "linear_coupled", 0),
        ("compare-oracle", "nonlinear_monotone", 0),
        ("validate", "invalid_moments", 3),
        ("solve-bsde", "linear_coupled", 3),
        ("compare-oracle", "bsde_trinomial", 3),
        ("validate", "malformed", 4),
        ("validate", "does_not_exist", 4),
    ];
    for (command, name, code) in cases {
        let out = run_scenario(command, name, None);
        assert_eq!(
            out.status.code(),
            Some(code),
            "{command} {name}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn singular_construction_names_the_failing_time() {
    let out = run_scenario("solve-linear", "linear_singular", None);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(
        stderr.contains("NotSolvable at t=1 (min singular value 0.0e0)"),
        "{stderr}"
    );
}

#[test]
fn unknown_command_is_a_parse_error() {
    let out = run(&["frobnicate", "x.json"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn reruns_are_byte_identical() {
    for (command, name) in [
        ("solve-bsde", "bsde_trinomial"),
        ("solve-linear", "linear_coupled"),
        ("solve-nonlinear", "nonlinear_monotone"),
        ("check-monotone", "nonlinear_monotone"),
        ("compare-oracle", "linear_coupled"),
    ] {
        let a = scratch(&format!("{command}-a"));
        let b = scratch(&format!("{command}-b"));
        let first = run_scenario(command, name, Some(&a));
        let second = run_scenario(command, name, Some(&b));
        assert_eq!(first.status.code(), Some(0));
        assert_eq!(first.stdout, second.stdout, "{command}");
        assert_eq!(dir_contents(&a), dir_contents(&b), "{command}");
        let _ = fs::remove_dir_all(a);
        let _ = fs::remove_dir_all(b);
    }
}

#[test]
fn csv_tables_use_node_paths_and_full_precision() {
    let dir = scratch("csv");
    let out = run_scenario("solve-linear", "linear_coupled", Some(&dir));
    assert_eq!(out.status.code(), Some(0));
    let x = fs::read_to_string(dir.join("X.csv")).unwrap();
    let mut lines = x.lines();
    assert_eq!(lines.next(), Some("time,node,x1,x2"));
    assert!(lines.next().unwrap().starts_with("0,root,1.0000000000000000e0,"));
    let leaf = x.lines().last().unwrap();
    assert!(leaf.starts_with("3,1.1.1,"), "{leaf}");
    let field = leaf.split(',').nth(2).unwrap();
    let mantissa = field.split('e').next().unwrap();
    assert_eq!(mantissa.trim_start_matches('-').len(), 18, "{field}");
    for name in ["Y.csv", "Z.csv", "N.csv", "gamma.csv", "P.csv", "summary.txt"] {
        assert!(dir.join(name).exists(), "{name}");
    }
    let _ = fs::remove_dir_all(dir);
}

#[test]
fn trinomial_paths_use_three_outcomes() {
    let dir = scratch("trinomial");
    let out = run_scenario("solve-bsde", "bsde_trinomial", Some(&dir));
    assert_eq!(out.status.code(), Some(0));
    let n = fs::read_to_string(dir.join("N.csv")).unwrap();
    assert!(n.lines().any(|l| l.starts_with("3,2.2.2,")));
    assert_eq!(n.lines().count(), 1 + 1 + 3 + 9 + 27);
    let _ = fs::remove_dir_all(dir);
}

#[test]
fn linear_report_prints_gamma_table_and_riccati_sequence() {
    let out = run_scenario("solve-linear", "linear_coupled", None);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("gamma table"));
    assert!(stdout.contains("P_t:"));
    assert!(stdout.contains("  t=3: "));
}

#[test]
fn compare_oracle_reports_small_differences() {
    let out = run_scenario("compare-oracle", "nonlinear_monotone", None);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let line = stdout
        .lines()
        .find(|l| l.starts_with("sup difference:"))
        .unwrap();
    let value: f64 = line
        .split_whitespace()
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();
    assert!(value <= 1e-6, "{line}");
}

#[test]
fn flags_override_the_scenario() {
    let out = run(&[
        "solve-nonlinear",
        scenario("nonlinear_monotone").to_str().unwrap(),
        "--delta-init",
        "0.25",
        "--seed",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("  2.5000000000000000e-1 2.5000000000000000e-1 "), "{stdout}");
    let strict = run(&[
        "solve-bsde",
        scenario("bsde_trinomial").to_str().unwrap(),
        "--tol",
        "0",
    ]);
    assert_eq!(strict.status.code(), Some(2));
}
