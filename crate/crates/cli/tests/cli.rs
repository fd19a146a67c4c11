use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use transfer_risk::activations::{save_amat, ActivationMatrix};
use transfer_risk::matcore::RngStream;
use transfer_risk::pipeline::{Layout, RunConfig};
use transfer_risk::selection::select_pools;
use transfer_risk::similarity::{read_similarity_csv, LayerScope};

fn example() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.conf")
}

fn cli<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_transfer-risk"))
        .args(args)
        .output()
        .unwrap()
}

fn run_args(command: &str, out: &Path) -> Vec<String> {
    let config = example().display().to_string();
    let out = out.display().to_string();
    vec![command.into(), "--config".into(), config, "--out".into(), out]
}

#[test]
fn similarity_of_two_files_prints_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = RngStream::new(3);
    let x = rng.normal_matrix(30, 4);
    let a = dir.path().join("a.amat");
    let b = dir.path().join("b.amat");
    save_amat(&ActivationMatrix::new("a", 0, "p", x.clone()).unwrap(), &a).unwrap();
    save_amat(&ActivationMatrix::new("b", 1, "p", x.scale(2.0)).unwrap(), &b).unwrap();
    let out = cli(&["similarity", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("model_a,model_b,method"));
    assert!(lines[1].starts_with("a,b,cka_linear,0,1,"), "{}", lines[1]);
}

#[test]
fn inverted_thresholds_exit_2_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let mut args = run_args("run", &out_dir);
    args.extend(["--r1", "0.4", "--r2", "0.5"].map(String::from));
    let out = cli(&args);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!out_dir.join("models").exists());
}

#[test]
fn full_run_then_stage_commands() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = cli(&run_args("run", &out_dir));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("worst-case transfer rate"));

    let layout = Layout::new(&out_dir);
    let mut cfg = RunConfig::load(example()).unwrap();
    cfg.out = out_dir.clone();
    let records: Vec<_> = read_similarity_csv(layout.similarity())
        .unwrap()
        .into_iter()
        .filter(|r| r.scope == LayerScope::Aggregate)
        .collect();
    let expected = select_pools(&records, &cfg.policy().unwrap()).unwrap();
    let out = cli(&run_args("select", &out_dir));
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text, transfer_risk::selection::pools_text(&expected));

    std::fs::remove_file(layout.transfer()).unwrap();
    let out = cli(&run_args("report", &out_dir));
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hint:"));
}

#[test]
fn unknown_attack_name_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let mut args = run_args("run", &out_dir);
    args.extend(["--attack", "nope"].map(String::from));
    assert_eq!(cli(&args).status.code(), Some(2));
}
