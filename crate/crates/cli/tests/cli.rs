use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn fslora(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fslora"))
        .args(args)
        .env("FSLORA_OUT", out)
        .output()
        .expect("binary runs")
}

fn minimal() -> String {
    configs().join("minimal.toml").display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_produces_manifest_metrics_and_snapshot() {
    let out = tempfile::tempdir().unwrap();
    let o = fslora(&["run", "-c", &minimal()], out.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = out.path().join("fslora-s1");
    let mut files: Vec<String> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["manifest.json", "metrics.csv", "snapshot.bin"]);
}

#[test]
fn repeated_seed_gives_identical_csv() {
    let out = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let o = fslora(&["run", "-c", &minimal(), "--seed", "7", "--name", name], out.path());
        assert!(o.status.success());
    }
    let read = |n: &str| fs::read(out.path().join(n).join("metrics.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
}

#[test]
fn baseline_runs_share_the_metrics_schema() {
    let out = tempfile::tempdir().unwrap();
    let standard = configs().join("standard.toml").display().to_string();
    for method in ["fslora", "flexlora"] {
        let o = fslora(&["run", "-c", &standard, "--method", method, "--rounds", "2"], out.path());
        assert!(o.status.success(), "{method}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let header = |m: &str| {
        fs::read_to_string(out.path().join(format!("{m}-s0")).join("metrics.csv"))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert_eq!(header("fslora"), header("flexlora"));
}

#[test]
fn replay_reproduces_every_byte() {
    let out = tempfile::tempdir().unwrap();
    assert!(fslora(&["run", "-c", &minimal(), "--set", "federation.secure=true"], out.path()).status.success());
    let manifest = out.path().join("fslora-s1/manifest.json").display().to_string();
    assert!(fslora(&["run", "--replay", &manifest, "--name", "again"], out.path()).status.success());
    for f in ["manifest.json", "metrics.csv", "snapshot.bin"] {
        assert_eq!(
            fs::read(out.path().join("fslora-s1").join(f)).unwrap(),
            fs::read(out.path().join("again").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn bad_keys_are_listed_and_rejected() {
    let out = tempfile::tempdir().unwrap();
    let o = fslora(&["run", "-c", &minimal(), "--set", "clients.lrr=1", "--set", "tsk.m=3"], out.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("clients.lrr") && err.contains("tsk"), "{err}");
    assert!(!out.path().join("fslora-s1").exists());
}

#[test]
fn divergence_exits_nonzero_with_partial_metrics() {
    let out = tempfile::tempdir().unwrap();
    let standard = configs().join("standard.toml").display().to_string();
    let o = fslora(&["run", "-c", &standard, "--set", "clients.lr=0.08", "--rounds", "30"], out.path());
    assert_eq!(o.status.code(), Some(1));
    let csv = fs::read_to_string(out.path().join("fslora-s0/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn out_flag_overrides_the_environment() {
    let env_root = tempfile::tempdir().unwrap();
    let flag_root = tempfile::tempdir().unwrap();
    let flag = flag_root.path().display().to_string();
    assert!(fslora(&["run", "-c", &minimal(), "--out", &flag], env_root.path()).status.success());
    assert!(flag_root.path().join("fslora-s1/manifest.json").exists());
    assert!(!env_root.path().join("fslora-s1").exists());
}

#[test]
fn sweep_writes_summary() {
    let out = tempfile::tempdir().unwrap();
    let grid = out.path().join("grid.toml");
    fs::write(
        &grid,
        format!("base = \"{}\"\nks = [1, 2]\nseeds = [0, 1]\n", minimal().replace('\\', "/")),
    )
    .unwrap();
    let o = fslora(&["sweep", &grid.display().to_string()], out.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.path().join("grid/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn diagnose_writes_json_report() {
    let out = tempfile::tempdir().unwrap();
    let o = fslora(&["diagnose", "-c", &minimal(), "--states", "4", "--draws", "20"], out.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.path().join("diagnose-s1/diagnostics.json")).unwrap()).unwrap();
    assert_eq!(report["states"], 4);
    assert!(report["rho"].as_f64().unwrap() >= 0.0);
}

#[test]
fn validate_costs_reconciles() {
    let out = tempfile::tempdir().unwrap();
    let o = fslora(&["validate-costs"], out.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains(", 0 mismatches"));
}

#[test]
fn validate_only_runs_the_named_check() {
    let out = tempfile::tempdir().unwrap();
    let o = fslora(&["validate", "--only", "costs"], out.path());
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("PASS costs"));
    assert!(text.contains("1 checks, 0 failed"));
}

#[test]
fn dropped_sketch_mutation_is_caught() {
    let out = tempfile::tempdir().unwrap();
    let o = fslora(&["validate", "--only", "sketched-gradient", "--mutate", "drop-sketch"], out.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL sketched-gradient"));
}

#[test]
fn quick_validation_passes() {
    let out = tempfile::tempdir().unwrap();
    let o = fslora(&["validate", "--quick"], out.path());
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}
