use std::path::Path;
use std::process::Command;

fn header() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ham_levy.h")
}

#[test]
fn header_declares_the_api() {
    let text = std::fs::read_to_string(header()).expect("build.rs writes the header");
    for f in ["hl_config_parse", "hl_run", "hl_report_verdict", "hl_report_csv", "hl_last_error", "hl_string_free", "hl_report_free", "hl_config_free"] {
        assert!(text.contains(&format!("{f}(")), "missing {f}");
    }
    assert!(text.contains("typedef struct HlConfig HlConfig;"));
    assert!(text.contains("HL_VERDICT_INCONCLUSIVE = 3"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(out) = Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"]).arg(header()).output() else {
        eprintln!("no C compiler; skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
