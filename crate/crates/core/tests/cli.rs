use std::fs;
use std::path::Path;
use std::process::Command;

use ramp_core::cli::{run_with_args, EXIT_CHECK_FAILED, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use ramp_core::model_catalog::bundled_catalog;

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn ramp(workspace: &Path, args: &[&str]) -> Run {
    let mut argv = vec!["ramp", "--workspace", workspace.to_str().unwrap()];
    argv.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with_args(argv, &mut out, &mut err);
    Run { code, out: String::from_utf8(out).unwrap(), err: String::from_utf8(err).unwrap() }
}

const SMALL_PLAN: [&str; 6] = ["--batch-sizes", "8,64,512", "--betas", "0.3,0.7,1.0", "--replicates", "1"];

fn prepared(model: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ramp(dir.path(), &["enumerate", "--model", model]).code, EXIT_OK);
    let mut profile = vec!["profile", "--model", model];
    profile.extend_from_slice(&SMALL_PLAN);
    assert_eq!(ramp(dir.path(), &profile).code, EXIT_OK);
    let fit = ramp(dir.path(), &["fit", "--model", model]);
    assert_eq!(fit.code, EXIT_OK, "{}", fit.err);
    dir
}

#[test]
fn classify_check_passes_on_the_bundled_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let r = ramp(dir.path(), &["classify", "--check"]);
    assert_eq!(r.code, EXIT_OK, "{}{}", r.out, r.err);
    assert!(r.out.contains("8/8 rows match"));
    assert!(r.out.lines().any(|l| l.starts_with("mixtral") && l.contains("6144") && l.contains("GROUP_M")));
}

#[test]
fn classify_check_flags_an_edited_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let mut catalog = serde_json::to_value(bundled_catalog()).unwrap();
    catalog[0]["N"] = serde_json::json!(1024);
    let path = dir.path().join("catalog.json");
    fs::write(&path, catalog.to_string()).unwrap();
    let r = ramp(dir.path(), &["--catalog", path.to_str().unwrap(), "classify", "--check"]);
    assert_eq!(r.code, EXIT_CHECK_FAILED);
    assert!(r.out.contains("mismatch: olmoe"), "{}", r.out);

    let r = ramp(dir.path(), &["--catalog", path.to_str().unwrap(), "classify"]);
    assert_eq!(r.code, EXIT_OK);
}

#[test]
fn missing_artifacts_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let r = ramp(dir.path(), &["fit", "--model", "olmoe"]);
    assert_eq!(r.code, EXIT_DATA);
    assert!(r.err.contains("pool.json") || r.err.contains("trace.csv"), "{}", r.err);

    assert_eq!(ramp(dir.path(), &["enumerate", "--model", "olmoe"]).code, EXIT_OK);
    let r = ramp(dir.path(), &["fit", "--model", "olmoe"]);
    assert_eq!(r.code, EXIT_DATA);
    assert!(r.err.contains("trace.csv"), "{}", r.err);

    let r = ramp(dir.path(), &["enumerate", "--model", "gpt-moe"]);
    assert_eq!(r.code, EXIT_DATA);
    assert!(r.err.contains("olmoe"), "available models should be listed: {}", r.err);
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ramp(dir.path(), &["sample-routing", "--experts", "8", "-S", "4", "--beta", "0.5"]).code, EXIT_USAGE);
    assert_eq!(ramp(dir.path(), &["fit", "--model", "olmoe", "--variant", "p5"]).code, EXIT_USAGE);
    assert_eq!(ramp(dir.path(), &["profile", "--model", "olmoe", "--oracle", "gpu"]).code, EXIT_USAGE);
}

#[test]
fn enumerate_and_profile_are_idempotent() {
    let dir = prepared("qwen3");
    let model_dir = dir.path().join("qwen3");
    let pool = fs::read(model_dir.join("pool.json")).unwrap();
    let trace = fs::read(model_dir.join("trace.csv")).unwrap();

    assert_eq!(ramp(dir.path(), &["enumerate", "--model", "qwen3"]).code, EXIT_OK);
    let mut profile = vec!["--json", "profile", "--model", "qwen3"];
    profile.extend_from_slice(&SMALL_PLAN);
    let r = ramp(dir.path(), &profile);
    assert_eq!(r.code, EXIT_OK);
    let summary: serde_json::Value = serde_json::from_str(&r.out).unwrap();
    assert_eq!(summary["new_samples"], 0);

    assert_eq!(fs::read(model_dir.join("pool.json")).unwrap(), pool);
    assert_eq!(fs::read(model_dir.join("trace.csv")).unwrap(), trace);
    assert!(!model_dir.join(".lock").exists());
}

#[test]
fn dispatch_reads_histogram_files() {
    let dir = prepared("qwen3");
    let h = dir.path().join("h.csv");
    let uniform = vec!["16"; 128].join(",");

    fs::write(&h, format!("{uniform}\n")).unwrap();
    let bare = ramp(dir.path(), &["--json", "dispatch", "--model", "qwen3", "--histogram", h.to_str().unwrap()]);
    assert_eq!(bare.code, EXIT_OK, "{}", bare.err);
    let bare: serde_json::Value = serde_json::from_str(&bare.out).unwrap();
    assert_eq!(bare["assignments"], 2048);
    assert!((bare["beta"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    let header: Vec<String> = (0..128).map(|i| format!("c_{i}")).collect();
    fs::write(&h, format!("step,{}\n7,{uniform}\n", header.join(","))).unwrap();
    let headed = ramp(dir.path(), &["--json", "dispatch", "--model", "qwen3", "--histogram", h.to_str().unwrap()]);
    let headed: serde_json::Value = serde_json::from_str(&headed.out).unwrap();
    assert_eq!(headed["config"], bare["config"]);

    fs::write(&h, format!("{}\n", vec!["0"; 128].join(","))).unwrap();
    let empty = ramp(dir.path(), &["dispatch", "--model", "qwen3", "--histogram", h.to_str().unwrap()]);
    assert_eq!(empty.code, EXIT_OK, "{}", empty.err);
    assert!(empty.out.contains("grid 0 CTAs"));

    fs::write(&h, "1,2,x\n").unwrap();
    let bad = ramp(dir.path(), &["dispatch", "--model", "qwen3", "--histogram", h.to_str().unwrap()]);
    assert_eq!(bad.code, EXIT_DATA);

    fs::write(&h, "1,2,3\n").unwrap();
    let short = ramp(dir.path(), &["dispatch", "--model", "qwen3", "--histogram", h.to_str().unwrap()]);
    assert_eq!(short.code, EXIT_DATA);
    assert!(short.err.contains("128"), "{}", short.err);
}

#[test]
fn evaluate_writes_reports() {
    let dir = prepared("qwen3");
    let grid = ["--test-batch-sizes", "8,128", "--test-betas", "0.5,1.0", "--test-replicates", "1"];
    for mode in ["regret", "speedup", "curves"] {
        let mut args = vec!["evaluate", "--model", "qwen3", "--mode", mode];
        args.extend_from_slice(&grid);
        let r = ramp(dir.path(), &args);
        assert_eq!(r.code, EXIT_OK, "{mode}: {}", r.err);
    }
    let reports = dir.path().join("qwen3").join("reports");
    let regret = fs::read_to_string(reports.join("regret.csv")).unwrap();
    assert_eq!(regret.lines().count(), 1 + 4);
    for file in ["regret.json", "speedup.csv", "speedup.json", "omega_beta.csv", "staircase.csv", "crossover.csv"] {
        assert!(reports.join(file).is_file(), "{file}");
    }

    let trace = dir.path().join("qwen3").join("trace.csv");
    let oracle = format!("trace:{}", trace.display());
    let r = ramp(dir.path(), &["evaluate", "--model", "qwen3", "--mode", "regret", "--oracle", &oracle]);
    assert_eq!(r.code, EXIT_DATA);
}

#[test]
fn trace_oracle_profile_ingests_an_external_file() {
    let dir = prepared("qwen3");
    let source = dir.path().join("external.csv");
    fs::copy(dir.path().join("qwen3").join("trace.csv"), &source).unwrap();

    let other = tempfile::tempdir().unwrap();
    assert_eq!(ramp(other.path(), &["enumerate", "--model", "qwen3"]).code, EXIT_OK);
    let oracle = format!("trace:{}", source.display());
    let r = ramp(other.path(), &["profile", "--model", "qwen3", "--oracle", &oracle]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert_eq!(ramp(other.path(), &["fit", "--model", "qwen3"]).code, EXIT_OK);
    assert_eq!(
        fs::read(other.path().join("qwen3").join("coeffs.json")).unwrap(),
        fs::read(dir.path().join("qwen3").join("coeffs.json")).unwrap()
    );
}

#[test]
fn sample_routing_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["sample-routing", "--model", "olmoe", "-S", "32", "--beta", "0.6", "--count", "5"];
    let a = ramp(dir.path(), &args);
    assert_eq!(a.code, EXIT_OK, "{}", a.err);
    assert_eq!(a.out, ramp(dir.path(), &args).out);
    let lines: Vec<&str> = a.out.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0].contains("c_63"));

    let mut reseeded = vec!["--seed", "7"];
    reseeded.extend_from_slice(&args);
    assert_ne!(a.out, ramp(dir.path(), &reseeded).out);

    let r = ramp(dir.path(), &["sample-routing", "--experts", "256", "--top-k", "8", "-S", "8", "--beta", "0.8"]);
    assert_eq!(r.code, EXIT_DATA, "{}", r.out);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_ramp");
    let dir = tempfile::tempdir().unwrap();
    let ok = Command::new(bin).args(["classify", "--check"]).current_dir(dir.path()).output().unwrap();
    assert_eq!(ok.status.code(), Some(EXIT_OK));
    let usage = Command::new(bin).arg("enumerate").current_dir(dir.path()).output().unwrap();
    assert_eq!(usage.status.code(), Some(EXIT_USAGE));
    let data = Command::new(bin).args(["fit", "--model", "olmoe"]).current_dir(dir.path()).output().unwrap();
    assert_eq!(data.status.code(), Some(EXIT_DATA));
    assert!(String::from_utf8_lossy(&data.stderr).starts_with("error:"));
}
