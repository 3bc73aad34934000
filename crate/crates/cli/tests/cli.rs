use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gbl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gbl"))
        .args(args)
        .current_dir(cwd)
        .env_remove("GBL_SEED")
        .env_remove("GBL_OUT")
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn gbl")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn only_run_dir(root: &Path) -> PathBuf {
    let dirs: Vec<_> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

#[test]
fn list_cases_shows_the_whole_registry() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gbl(&["list-cases"], tmp.path());
    assert!(o.status.success());
    let text = stdout(&o);
    let names: Vec<&str> = text.lines().skip(1).filter_map(|l| l.split_whitespace().next()).collect();
    assert_eq!(names.len(), 16);
    for n in ["case1", "case3b", "case5b", "case1-nc", "case5b-nc"] {
        assert!(names.contains(&n), "{n} missing");
    }
}

#[test]
fn exact_writes_profiles_metrics_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gbl(&["exact", "case2", "--out", "out"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("l2=0.000e0"));
    let run = only_run_dir(&tmp.path().join("out"));
    let csv = fs::read_to_string(run.join("case2-exact.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("x,t,u,phi,method,case,seed"));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("case,method,form,rescaled,l2,seeds"));
    assert_eq!(lines.next(), Some("case2,exact,conservative,false,0.0,1"));
    let manifest: toml::Table = fs::read_to_string(run.join("config.toml")).unwrap().parse().unwrap();
    assert_eq!(manifest["seed"].as_integer(), Some(1234));
    assert_eq!(manifest["case"]["name"].as_str(), Some("case2"));
}

#[test]
fn config_file_overrides_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("run.toml"),
        "seed = 7\nout = \"from-config\"\n[case]\nmobility = 3.0\n[case.eval]\nn_x = 11\n",
    )
    .unwrap();
    let o = gbl(&["exact", "case1", "--config", "run.toml"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = only_run_dir(&tmp.path().join("from-config"));
    let manifest: toml::Table = fs::read_to_string(run.join("config.toml")).unwrap().parse().unwrap();
    assert_eq!(manifest["seed"].as_integer(), Some(7));
    assert_eq!(manifest["case"]["mobility"].as_float(), Some(3.0));
    assert_eq!(manifest["case"]["eval"]["n_x"].as_integer(), Some(11));
    // untouched nested fields survive the merge
    assert!(manifest["case"]["eval"]["times"].as_array().is_some());
    assert_eq!(manifest["case"]["seeds"].as_array().unwrap()[0].as_integer(), Some(7));

    let o = gbl(&["exact", "case1", "--config", "run.toml", "--seed", "99", "--out", "flag"], tmp.path());
    assert!(o.status.success());
    let run = only_run_dir(&tmp.path().join("flag"));
    let manifest: toml::Table = fs::read_to_string(run.join("config.toml")).unwrap().parse().unwrap();
    assert_eq!(manifest["seed"].as_integer(), Some(99));
    assert_eq!(manifest["case"]["seeds"].as_array().unwrap()[0].as_integer(), Some(99));
}

#[test]
fn environment_supplies_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_gbl"))
        .args(["exact", "case1"])
        .current_dir(tmp.path())
        .env("GBL_SEED", "42")
        .env("GBL_OUT", "env-out")
        .output()
        .unwrap();
    assert!(o.status.success());
    let run = only_run_dir(&tmp.path().join("env-out"));
    let manifest: toml::Table = fs::read_to_string(run.join("config.toml")).unwrap().parse().unwrap();
    assert_eq!(manifest["seed"].as_integer(), Some(42));
}

#[test]
fn bad_inputs_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gbl(&["exact", "case9", "--out", "o"], tmp.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown case"));

    let o = gbl(&["weno", "case1-nc", "--out", "o"], tmp.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-conservative"));

    let o = gbl(&["eval", "case1", "--methods", "exact,magic", "--out", "o"], tmp.path());
    assert!(!o.status.success());

    fs::write(tmp.path().join("bad.toml"), "[case]\nmobility = \"two\"\n").unwrap();
    let o = gbl(&["exact", "case1", "--config", "bad.toml", "--out", "o"], tmp.path());
    assert!(!o.status.success());
}

#[test]
fn eval_compares_exact_and_weno() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gbl(&["eval", "case1", "--methods", "exact,weno5", "--out", "o"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let weno = text.lines().find(|l| l.contains("weno5")).expect("weno row");
    assert!(weno.contains("pass"), "{weno}");
    let run = only_run_dir(&tmp.path().join("o"));
    assert!(run.join("case1-weno5.csv").exists());
    assert!(run.join("case1-overlay.svg").exists());
}
