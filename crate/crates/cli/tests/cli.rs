use std::fs;
use std::process::Command;

fn specdec() -> Command {
    Command::new(env!("CARGO_BIN_EXE_specdec"))
}

#[test]
fn run_writes_outputs_and_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(
        &cfg,
        "seed = 1\ntrials = 3\nmin_target_len = 5\nout_dir = \"ignored\"\n[model]\nvocab = 16\n[sweep]\nk = [4]\ndelta = [0.2]\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let st = specdec()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(&out)
        .args(["--seed", "7", "--mode", "vanilla"])
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let resolved = fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.contains("seed = 7"));
    assert!(resolved.contains("mode = \"vanilla\""));
    let csv = fs::read_to_string(out.join("stats.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().contains(",vanilla,tvd,l2,"));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[sweep]\ndelta = [1.5]\n").unwrap();
    let st = specdec().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&st.stderr).contains("sweep.delta"));

    fs::write(&cfg, "trials = 3\nunknown = 1\n").unwrap();
    let st = specdec().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&st.stderr).contains("line 2"));
}

#[test]
fn missing_files_exit_with_3() {
    let st = specdec()
        .args(["run", "--config", "/definitely/not/here.toml"])
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(3));
    let st = specdec()
        .args(["knn-check", "--codebook", "/definitely/not/here.bin"])
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(3));
}

#[test]
fn oracle_and_knn_checks_pass() {
    let st = specdec().args(["oracle", "--vanilla", "100", "--lantern", "30"]).output().unwrap();
    assert!(st.status.success());
    assert!(String::from_utf8_lossy(&st.stdout).contains("oracle checks passed"));
    let st = specdec()
        .args(["knn-check", "--count", "5", "--max-vocab", "40", "--measure", "cosine"])
        .output()
        .unwrap();
    assert!(st.status.success());
    assert!(String::from_utf8_lossy(&st.stdout).contains("mismatches 0"));
}

#[test]
fn replace_demo_reports_tvd() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "[model]\nvocab = 32\n").unwrap();
    let st = specdec()
        .args(["replace-demo", "--config"])
        .arg(&cfg)
        .args(["--k", "4", "--len", "20", "--seed", "3"])
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let text = String::from_utf8_lossy(&st.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with(char::is_numeric)).count(), 20);
    assert!(text.contains("mean_tvd = "));
}
