use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_ham-levy");

fn config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn ham(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("HAM_LEVY_WORKERS").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("terminated by signal")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const CHAOS: &str = "[experiment]\nkind = chaos-verify\n[run]\nn_replicates = 3000\nseed = 5\n";

const QCLT: &str = "[experiment]\nkind = qclt\n[model]\nkernel = gaussian\nnoise = rademacher\n[run]\np = 2\nT = 1\nR_list = 4, 8\nn_replicates = 200\nseed = 11\n";

fn csv_without_stamp(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with("# generated")).collect::<Vec<_>>().join("\n")
}

#[test]
fn riesz_below_p_window_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = QCLT.replace("kernel = gaussian", "kernel = riesz(alpha=0.5)").replace("p = 2", "p = 1.1");
    let cfg = config(dir.path(), "bad.cfg", &text);
    let o = ham(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("p:"), "{}", stderr(&o));
}

#[test]
fn zero_replicates_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "bad.cfg", &QCLT.replace("n_replicates = 200", "n_replicates = 0"));
    let o = ham(&["--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("n_replicates"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&ham(&["--format", "xml", "list-presets"])), 1);
    assert_eq!(code(&ham(&["run"])), 1);
    assert_eq!(code(&ham(&["run", "/nonexistent/config"])), 1);
    assert_eq!(code(&ham(&["--help"])), 0);
}

#[test]
fn passing_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "chaos.cfg", CHAOS);
    let out = dir.path().join("out");
    let o = ham(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("status=PASS"), "{stdout}");
    for f in ["chaos-verify.csv", "chaos-verify.json", "summary.txt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("chaos-verify.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["seed"], 5);
    assert!(fs::read_to_string(out.join("chaos-verify.csv")).unwrap().starts_with("# generated unix="));
}

#[test]
fn format_selects_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "chaos.cfg", CHAOS);
    let out = dir.path().join("json-only");
    let o = ham(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--format", "json"]);
    assert_eq!(code(&o), 0);
    assert!(out.join("chaos-verify.json").is_file());
    assert!(!out.join("chaos-verify.csv").exists());
}

#[test]
fn output_is_deterministic_across_workers_and_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "chaos.cfg", CHAOS);
    let cfg = cfg.to_str().unwrap();
    let run_in = |sub: &str, extra: &[&str], env: Option<&str>| {
        let out = dir.path().join(sub);
        let mut cmd = Command::new(BIN);
        cmd.args(["run", cfg, "--out", out.to_str().unwrap(), "--format", "csv"]).args(extra).env_remove("HAM_LEVY_WORKERS");
        if let Some(w) = env {
            cmd.env("HAM_LEVY_WORKERS", w);
        }
        assert_eq!(code(&cmd.output().unwrap()), 0);
        csv_without_stamp(&out.join("chaos-verify.csv"))
    };
    let one = run_in("w1", &["--workers", "1"], None);
    assert_eq!(one, run_in("w3", &["--workers", "3"], None));
    assert_eq!(one, run_in("env2", &[], Some("2")));
    assert_ne!(one, run_in("seed", &["--seed", "6"], None));
}

#[test]
fn list_presets_is_stable() {
    let a = ham(&["list-presets"]);
    let b = ham(&["list-presets"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert!(text.contains("rademacher") && text.contains("riesz(alpha=0.5)"), "{text}");
}

#[test]
fn pre_asymptotic_gamma_audit_fails_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let text = QCLT.replace("kind = qclt", "kind = gamma-audit").replace("R_list = 4, 8", "R_list = 4, 8, 16");
    let cfg = config(dir.path(), "gamma.cfg", &text);
    let o = ham(&["run", cfg.to_str().unwrap(), "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8(o.stdout).unwrap().contains("status=FAIL"));
}

#[test]
fn underpowered_qclt_is_inconclusive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "qclt.cfg", QCLT);
    let o = ham(&["run", cfg.to_str().unwrap(), "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8(o.stdout).unwrap().contains("status=INCONCLUSIVE"));
}
