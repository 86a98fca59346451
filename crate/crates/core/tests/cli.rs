use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
rounds = 60
seeds = [0, 1]
output_dir = "out"

[problem]
kind = "quadratic"
n = 2
d_x = 4
d_y = 3
mu_g = 1.0
l_g = 4.0
seed = 5

[[algo]]
label = "nc"
algo = "nc-soba"
alpha = 0.1
beta = 0.2
gamma = 0.2

[[algo]]
label = "c"
algo = "c-soba"
alpha = 0.1
beta = 0.2
gamma = 0.2
upper = { kind = "rand-k", k = 2 }
lower = { kind = "rand-k", k = 1 }
"#;

fn soba(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soba"))
        .args(args)
        .current_dir(dir)
        .env_remove("SOBA_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

#[test]
fn run_then_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "exp.toml", CONFIG);
    let out = soba(&["run", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out_dir = dir.path().join("out");
    assert!(out_dir.join("manifest.json").is_file());
    let a = out_dir.join("nc/seed-0");
    let b = out_dir.join("c/seed-0");
    assert!(a.join("trace.csv").is_file() && b.join("trace.csv").is_file());
    let cmp = soba(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--target", "10"], dir.path());
    assert_eq!(cmp.status.code(), Some(0));
    let text = String::from_utf8_lossy(&cmp.stdout);
    assert!(text.contains("ratio A/B"), "{text}");
    let never = soba(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--target", "0"], dir.path());
    assert!(String::from_utf8_lossy(&never.stdout).contains("unreached"));
}

#[test]
fn output_root_can_be_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let root = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "exp.toml", CONFIG);
    let out = Command::new(env!("CARGO_BIN_EXE_soba"))
        .args(["run", &cfg])
        .current_dir(dir.path())
        .env("SOBA_OUTPUT_ROOT", root.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(root.path().join("out/manifest.json").is_file());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = CONFIG.replace("k = 2 }", "k = 9 }");
    let cfg = write(dir.path(), "bad.toml", &bad);
    let out = soba(&["run", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("algo[1]"));
    let junk = write(dir.path(), "junk.toml", "rounds = [");
    assert_eq!(soba(&["run", &junk], dir.path()).status.code(), Some(2));
}

#[test]
fn missing_file_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(soba(&["run", "nope.toml"], dir.path()).status.code(), Some(1));
}

#[test]
fn divergence_exits_3_and_keeps_partial_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "div.toml", &CONFIG.replacen("alpha = 0.1", "alpha = 500.0", 1));
    let out = soba(&["run", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.path().join("out/nc/seed-0/trace.csv").is_file());
    assert!(dir.path().join("out/c/seed-1/trace.csv").is_file());
}

#[test]
fn grid_search_failure_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{CONFIG}\n[grid]\nalpha = [500.0]\nbeta = [500.0]\ngamma = [500.0]\n");
    let cfg = write(dir.path(), "grid.toml", &text);
    assert_eq!(soba(&["grid", &cfg], dir.path()).status.code(), Some(4));
}

#[test]
fn grid_search_writes_selection() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{CONFIG}\n[grid]\nalpha = [0.01, 0.1]\nbeta = [0.1]\ngamma = [0.1, 0.5]\nrounds = 30\n");
    let cfg = write(dir.path(), "grid.toml", &text);
    let out = soba(&["grid", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let sel: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/grid.json")).unwrap()).unwrap();
    assert_eq!(sel["choices"].as_array().unwrap().len(), 2);
}
