use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn small_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.toml")
}

fn tokprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokprune"))
        .args(args)
        .env_remove("TOKPRUNE_REPORT_DIR")
        .output()
        .unwrap()
}

fn with_config(cmd: &str, extra: &[&str]) -> Output {
    let cfg = small_config();
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    tokprune(&args)
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    assert_eq!(code(out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = with_config("run", &[]);
    let b = with_config("run", &[]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert!(a.stdout.ends_with(b"}\n"));
    let other = with_config("run", &["--seed", "8"]);
    assert_ne!(a.stdout, other.stdout);
}

#[test]
fn mode_flag_switches_retention() {
    let fixed = json(&with_config("run", &["--mode", "fixed"]));
    assert_eq!(fixed["retained"]["stage3"], serde_json::json!([32, 16, 8]));
    assert!(fixed.get("suite").is_none());
    let adaptive = json(&with_config("run", &["--mode", "adaptive"]));
    assert_eq!(adaptive["suite"]["mode"], "adaptive");
    assert_eq!(adaptive["suite"]["instances"].as_array().unwrap().len(), 4);
}

#[test]
fn probe_file_reproduces_inline_probing() {
    let dir = tempfile::tempdir().unwrap();
    let probe = dir.path().join("probe.json");
    let out = with_config("probe", &["--out", probe.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(out.stdout.is_empty());
    let inline = with_config("run", &[]);
    let reused = with_config("run", &["--probe", probe.to_str().unwrap()]);
    assert_eq!(code(&reused), 0);
    assert_eq!(inline.stdout, reused.stdout);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p.to_str().unwrap().to_string()
    };
    let base = fs::read_to_string(small_config()).unwrap();

    // configuration
    assert_eq!(code(&tokprune(&["run"])), 1);
    assert_eq!(code(&tokprune(&["explode"])), 1);
    let bad_key = write("bad.toml", &base.replacen("k_heads = 2", "k_heads = 2\nheads = 3", 1));
    let out = tokprune(&["run", "--config", &bad_key]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage3.heads"));

    // runtime
    let cal = write("cal.toml", &base.replacen("[32.0, 16.0, 8.0]", "[60.0, 16.0, 8.0]", 1));
    assert_eq!(code(&tokprune(&["calibrate", "--config", &cal])), 2);
    let foreign = write("foreign.json", r#"{"tool_version":"0","seed":1,"profile":{"batch_size":1,"rel_tol":1e-6,"encoders":[]}}"#);
    assert_eq!(code(&with_config("run", &["--probe", &foreign])), 2);

    // IO and unreadable files
    let missing = dir.path().join("none.toml");
    assert_eq!(code(&tokprune(&["run", "--config", missing.to_str().unwrap()])), 3);
    let absent = dir.path().join("none.json");
    assert_eq!(code(&with_config("run", &["--probe", absent.to_str().unwrap()])), 3);
    let garbled = write("garbled.json", "{ not json");
    assert_eq!(code(&with_config("run", &["--probe", &garbled])), 3);
    fs::write(dir.path().join("wide.bin"), b"METEORT1\x01\x02").unwrap();
    let with_input = write("input.toml", &base.replacen("seed = 11", "seed = 11\ninput = \"wide.bin\"", 1));
    assert_eq!(code(&tokprune(&["run", "--config", &with_input])), 3);

    assert_eq!(code(&tokprune(&["--help"])), 0);
}

#[test]
fn clamp_warnings_do_not_change_the_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let base = fs::read_to_string(small_config()).unwrap();
    let p = dir.path().join("clamp.toml");
    fs::write(&p, base.replacen("fixed_counts = [32, 16, 8]", "fixed_counts = [90, 16, 8]", 1)).unwrap();
    let out = tokprune(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning: fixed count 90"));
}

#[test]
fn diag_writes_csv_alongside_json() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("diag.csv");
    let report = json(&with_config("diag", &["--csv", csv.to_str().unwrap()]));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "encoder_id,block,entropy,max_entropy,tau_next");
    assert_eq!(lines.len(), 1 + 2 * 6);
    let first = &report["encoders"][0];
    assert_eq!(first["entropy"].as_array().unwrap().len(), 6);
    assert_eq!(first["tau"].as_array().unwrap().len(), 5);
}

#[test]
fn report_dir_variable_redirects_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let out = Command::new(env!("CARGO_BIN_EXE_tokprune"))
        .args(["probe", "--config", cfg.to_str().unwrap()])
        .env("TOKPRUNE_REPORT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(out.stdout.is_empty());
    assert!(dir.path().join("probe.json").exists());

    let explicit = dir.path().join("elsewhere.json");
    let out = Command::new(env!("CARGO_BIN_EXE_tokprune"))
        .args(["diag", "--config", cfg.to_str().unwrap(), "--out", explicit.to_str().unwrap()])
        .env("TOKPRUNE_REPORT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(explicit.exists());
    assert!(!dir.path().join("diag.json").exists());
}

#[test]
fn calibrate_and_flops_reports() {
    let cal = with_config("calibrate", &[]);
    let report = json(&cal);
    assert!(String::from_utf8_lossy(&cal.stderr).starts_with("lambdas = ["));
    assert_eq!(report["layers"].as_array().unwrap().len(), 3);

    let flops = json(&with_config("flops", &[]));
    let reduction = flops["reference"]["reduction_fraction"].as_f64().unwrap();
    assert!((0.34..=0.64).contains(&reduction), "{reduction}");
    let configured = &flops["configured"];
    assert!(configured["total_flops"].as_u64().unwrap() < configured["baseline_total"].as_u64().unwrap());
}
