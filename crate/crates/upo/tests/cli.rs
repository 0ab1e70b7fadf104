use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dir(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn upo(args: &[&str], config: &str, seed_env: Option<&str>) -> Output {
    let name: String = args.join("-").chars().filter(|c| c.is_ascii_alphanumeric() || *c == '-').collect();
    let path = dir(&format!("cli{name}"));
    let file = path.join("config.json");
    std::fs::write(&file, config.replace("OUT", &path.join("out").display().to_string())).unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_upo"));
    cmd.arg(args[0]).arg("--config").arg(&file).args(&args[1..]).env_remove("UPO_SEED");
    if let Some(s) = seed_env {
        cmd.env("UPO_SEED", s);
    }
    cmd.output().unwrap()
}

const SMALL: &str = r#"{"family": {"name": "factorized", "length": 3, "vocab": 2, "coupling": 0.7, "unary_strength": 1.0},
    "denoiser": {"kind": "tempered", "gamma": 0.5}, "verify": {"instances": 1, "draws": 1, "hidden": 3}, "output": "OUT"}"#;

#[test]
fn verify_passes_with_env_seed() {
    let out = upo(&["verify"], SMALL, Some("4"));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 failed"));
}

#[test]
fn missing_seed_is_a_config_error() {
    assert_eq!(upo(&["compare"], SMALL, None).status.code(), Some(2));
}

#[test]
fn bad_config_exits_2() {
    let bad = SMALL.replace("\"verify\"", "\"verifx\"");
    assert_eq!(upo(&["verify"], &bad, Some("1")).status.code(), Some(2));
    let out = upo(&["eval", "--trials", "0"], SMALL, Some("1"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("override trials = 0"));
}

#[test]
fn verify_failure_exits_1() {
    let latin =
        r#"{"seed": 1, "family": {"name": "latin4", "givens": 10}, "verify": {"instances": 1}, "output": "OUT"}"#;
    let out = upo(&["verify"], latin, None);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL enumerable"));
}

#[test]
fn overrides_reach_outputs() {
    let out = upo(&["compare", "--schedulers", r#"["confidence"]"#, "--trials", "5"], SMALL, Some("2"));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("confidence") && stdout.contains("(5 trials)"), "{stdout}");
}
