use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dynbc(args: &[&str], config: Option<&str>, dir: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dynbc"));
    cmd.args(args).env_remove("DYNBC_OUT").current_dir(dir);
    if let Some(text) = config {
        let p = dir.join("run.toml");
        fs::write(&p, text).unwrap();
        cmd.arg("--config").arg(&p);
    }
    cmd.output().unwrap()
}

const SMALL: &str = "[geometry]\nn_r = 8\nn_phi = 16\n";

#[test]
fn unknown_subcommand_exits_one() {
    let d = tempfile::tempdir().unwrap();
    let o = dynbc(&["reconstruct"], None, d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown subcommand"));
}

#[test]
fn inverted_window_exits_one() {
    let d = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL}[window]\nt0 = 0.75\nt1 = 0.25\n");
    let o = dynbc(&["forward"], Some(&cfg), d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("window requires t0 < t1"));
}

#[test]
fn bad_key_is_named_in_the_error() {
    let d = tempfile::tempdir().unwrap();
    let o = dynbc(&["forward"], Some("[geometry]\nn_rr = 8\n"), d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("geometry.n_rr"));
}

#[test]
fn markov_forward_keeps_constants() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("markov");
    let cfg = format!("{SMALL}[coefficients]\npreset = \"markov\"\n[potentials]\npreset = \"markov\"\n[initial]\npreset = \"constant\"\nvalue = 1.0\n");
    let o = dynbc(&["forward", "--out", out.to_str().unwrap()], Some(&cfg), d.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("trajectory.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["t", "node", "rho", "phi", "y"]);
    let mut n = 0;
    for rec in rdr.records() {
        let y: f64 = rec.unwrap()[4].parse().unwrap();
        assert!((y - 1.0).abs() <= 1e-10, "{y}");
        n += 1;
    }
    assert!(n > 0);
}

#[test]
fn output_directory_precedence() {
    let d = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL}[output]\ndir = \"from_config\"\n");
    let o = dynbc(&["forward"], Some(&cfg), d.path());
    assert!(o.status.success());
    assert!(d.path().join("from_config/trajectory.csv").exists());

    let env_dir = d.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_dynbc"))
        .args(["forward", "--config", d.path().join("run.toml").to_str().unwrap()])
        .env("DYNBC_OUT", &env_dir)
        .current_dir(d.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(env_dir.join("trajectory.csv").exists());

    let flag_dir = d.path().join("from_flag");
    let o = Command::new(env!("CARGO_BIN_EXE_dynbc"))
        .args(["forward", "--config", d.path().join("run.toml").to_str().unwrap(), "--out"])
        .arg(&flag_dir)
        .env("DYNBC_OUT", &env_dir)
        .current_dir(d.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(flag_dir.join("trajectory.csv").exists());
}

#[test]
fn selftest_reports_every_check() {
    let d = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL}[harness]\nn_samples = 2\n");
    let o = dynbc(&["selftest", "--seed", "4"], Some(&cfg), d.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(d.path().join("out/selftest.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("check,value,threshold,pass"));
    assert!(lines.all(|l| l.ends_with(",true")));
}
