use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &["--test-points", "200", "--pmf-generations", "", "--steps1", "4000"];

fn ucv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ucv")).args(args).output().unwrap()
}

fn with_dir<'a>(cmd: &'a str, dir: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd, "--run-dir", dir];
    v.extend_from_slice(SMALL);
    v.extend_from_slice(extra);
    v
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_lists_subcommands() {
    let o = ucv(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for sub in ["train", "sample", "acquire", "al-run", "pmf", "baseline", "report"] {
        assert!(text.contains(sub), "{sub} missing");
    }
    let o = ucv(&["al-run", "--help"]);
    assert!(stdout(&o).contains("--gmm-reg-scale"));
}

#[test]
fn al_run_writes_run_directory_and_report_reads_it() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let d = dir.to_str().unwrap();
    let o = ucv(&with_dir("al-run", d, &["--generations", "2"]));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 2);
    for f in ["config.lock", "dataset.csv", "models", "trajectories", "reports/gen02.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let r = ucv(&["report", "--run-dir", d]);
    assert_eq!(r.status.code(), Some(0));
    assert_eq!(stdout(&r), stdout(&o));
    let j = ucv(&["report", "--run-dir", d, "--json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&j)).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
}

#[test]
fn stepwise_commands_match_al_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let (a, b) = (a.to_str().unwrap(), b.to_str().unwrap());
    assert!(ucv(&with_dir("al-run", a, &["--generations", "1"])).status.success());

    let t = ucv(&with_dir("train", b, &["--generations", "1"]));
    assert!(t.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&t)).unwrap();
    assert_eq!(v["generation"], 1);
    assert!(Path::new(b).join("models/gen01_production.json").exists());

    let s = ucv(&["sample", "--run-dir", b]);
    assert!(s.status.success(), "{}", String::from_utf8_lossy(&s.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&s)).unwrap();
    assert_eq!(v["runs"].as_array().unwrap().len(), 2);
    assert!(Path::new(b).join("trajectories/gen01_run1.csv").exists());

    let q = ucv(&["acquire", "--run-dir", b]);
    assert!(q.status.success(), "{}", String::from_utf8_lossy(&q.stderr));
    for f in ["dataset.csv", "reports/gen01.json"] {
        assert_eq!(
            std::fs::read(Path::new(a).join(f)).unwrap(),
            std::fs::read(Path::new(b).join(f)).unwrap(),
            "{f}"
        );
    }
    // every configured generation is done
    assert_eq!(ucv(&["acquire", "--run-dir", b]).status.code(), Some(2));
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("bad.cfg");
    std::fs::write(&file, "schema_version = 1\nno_such_key = 3\n").unwrap();
    let o = ucv(&["al-run", "--config", file.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));

    assert_eq!(ucv(&["al-run", "--alpha", "1.5"]).status.code(), Some(2));
    assert_eq!(ucv(&["al-run", "--method", "magic"]).status.code(), Some(2));
    assert_eq!(ucv(&["baseline", "--method", "gmm_cv"]).status.code(), Some(2));
    assert_eq!(ucv(&["al-run", "--no-such-flag", "1"]).status.code(), Some(2));

    let d = tmp.path().join("run");
    let d = d.to_str().unwrap();
    assert!(ucv(&with_dir("train", d, &[])).status.success());
    let o = ucv(&["train", "--run-dir", d, "--kt1", "2.0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_is_read() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("run.cfg");
    std::fs::write(
        &file,
        "schema_version = 1\npotential = double_well_nd\npotential_dim = 2\ntest_points = 100\ngenerations = 1\npmf_generations =\n",
    )
    .unwrap();
    let d = tmp.path().join("run");
    let o = ucv(&["al-run", "--config", file.to_str().unwrap(), "--run-dir", d.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lock = std::fs::read_to_string(d.join("config.lock")).unwrap();
    assert!(lock.contains("potential = double_well_nd"));
}

#[test]
fn degenerate_campaign_exits_3() {
    let o = ucv(&["al-run", "--test-points", "100", "--pmf-generations", "", "--generations", "1", "--cv-abort=-1e6"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("DEGENERATE"));
}

#[test]
fn baseline_defaults_to_bias_energy() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("run");
    let o = ucv(&with_dir("baseline", d.to_str().unwrap(), &["--generations", "1"]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lock = std::fs::read_to_string(d.join("config.lock")).unwrap();
    assert!(lock.contains("method = bias_energy"));
}

#[test]
fn pmf_prints_its_report() {
    let o = ucv(&[
        "pmf",
        "--potential",
        "double_well_nd",
        "--potential-dim",
        "1",
        "--test-points",
        "100",
        "--pmf-bins",
        "8",
        "--pmf-steps",
        "2000",
        "--pmf-equilibration",
        "200",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["pmf_mae"].as_f64().unwrap().is_finite());
    assert!(v["mbar_residual"].as_f64().unwrap() < 1e-6);
}
