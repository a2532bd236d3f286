use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
name = "cli"
backends = ["exact", "hk"]

[model]
modes = 2
n_total = 30
tunneling = 10.0
interaction = 2.0

[preparation]
j_target = 4.0

[time_grid]
t_max = 2.0
steps = 40
unit = "plasma_periods"

[hk]
samples = 200
seed = 3
prefactor_cutoff = 100.0

[output]
dir = "cli"
"#;

fn hkbose(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hkbose"))
        .args(args)
        .env("HKBOSE_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_writes_into_output_root() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "c.toml", CONFIG);
    let out = hkbose(root.path(), &["run", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["exact.csv", "hk.csv", "comparison.csv", "metrics.csv", "manifest.toml"] {
        assert!(root.path().join("cli").join(f).exists(), "{f}");
    }
    assert!(String::from_utf8_lossy(&out.stdout).contains("hk"));
}

#[test]
fn manifest_reruns_identically() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "c.toml", CONFIG);
    assert_eq!(hkbose(root.path(), &["run", &cfg]).status.code(), Some(0));
    let manifest = root.path().join("cli/manifest.toml");
    let copy = root.path().join("m.toml");
    fs::copy(&manifest, &copy).unwrap();
    let first = fs::read(root.path().join("cli/hk.csv")).unwrap();
    let other = tempfile::tempdir().unwrap();
    let out = hkbose(other.path(), &["run", copy.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read(other.path().join("cli/hk.csv")).unwrap(), first);
    assert_eq!(fs::read(other.path().join("cli/manifest.toml")).unwrap(), fs::read(&manifest).unwrap());
}

#[test]
fn config_errors_exit_with_two() {
    let root = tempfile::tempdir().unwrap();
    let bad = write_config(root.path(), "bad.toml", &CONFIG.replace("seed = 3\n", ""));
    let out = hkbose(root.path(), &["run", &bad]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
    assert_eq!(hkbose(root.path(), &["run", "/nonexistent.toml"]).status.code(), Some(2));
    assert_eq!(hkbose(root.path(), &["preset", "fig9"]).status.code(), Some(2));
}

#[test]
fn numeric_failure_exits_with_three() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(
        root.path(),
        "c.toml",
        &CONFIG.replace("prefactor_cutoff = 100.0", "prefactor_cutoff = 1.0000001"),
    );
    let out = hkbose(root.path(), &["run", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert!(root.path().join("cli/exact.csv").exists());
}

#[test]
fn flagged_result_exits_with_four() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(
        root.path(),
        "c.toml",
        &CONFIG.replace("prefactor_cutoff = 100.0", "prefactor_cutoff = 1.5"),
    );
    let out = hkbose(root.path(), &["run", &cfg]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(root.path().join("cli/manifest.toml")).unwrap();
    assert!(manifest.contains("status = \"flagged\""));
}

#[test]
fn metrics_compares_two_csvs() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "c.toml", CONFIG);
    assert_eq!(hkbose(root.path(), &["run", &cfg]).status.code(), Some(0));
    let exact = root.path().join("cli/exact.csv");
    let hk = root.path().join("cli/hk.csv");
    let out = hkbose(root.path(), &["metrics", exact.to_str().unwrap(), exact.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(row[0], 0.0);

    let out = hkbose(
        root.path(),
        &["metrics", exact.to_str().unwrap(), hk.to_str().unwrap(), "--window", "0.0", "0.05"],
    );
    assert_eq!(out.status.code(), Some(0));

    let out = hkbose(
        root.path(),
        &["metrics", exact.to_str().unwrap(), hk.to_str().unwrap(), "--column", "raw_norm"],
    );
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("raw_norm"));

    let out = hkbose(
        root.path(),
        &["metrics", exact.to_str().unwrap(), hk.to_str().unwrap(), "--window", "0.0", "99.0"],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn schema_dump_is_a_valid_config() {
    let root = tempfile::tempdir().unwrap();
    let out = hkbose(root.path(), &["dump-config-schema"]);
    assert_eq!(out.status.code(), Some(0));
    let schema = write_config(root.path(), "schema.toml", &String::from_utf8_lossy(&out.stdout));
    let text = fs::read_to_string(&schema).unwrap();
    assert!(text.contains("[time_grid]") && text.contains("[hk]"));
    assert!(hkbose::experiment::ExperimentConfig::from_file(Path::new(&schema)).is_ok());
}
