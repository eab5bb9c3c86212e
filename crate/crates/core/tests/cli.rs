use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn sufflab(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sufflab"));
    cmd.args(args);
    match threads {
        Some(n) => cmd.env("SUFFLAB_THREADS", n),
        None => cmd.env_remove("SUFFLAB_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const TOPIC: &str = r#"{"seed": 3, "n_grid": [96, 192], "m_grid": [200], "repetitions": 2, "epochs": 15, "head_steps": 40}"#;
const VMF: &str = r#"{"seed": 4, "n_grid": [160, 320], "repetitions": 2, "epochs": 4, "eval_batches": 20, "basis": "coordinate"}"#;

fn run_to(tag: &str, cfg: &str, out: &Path, threads: Option<&str>) -> (String, Option<String>) {
    let out_s = out.to_str().unwrap();
    let o = sufflab(&[tag, "--config", cfg, "--out", out_s, "--svg"], threads);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join(format!("{tag}.csv"))).unwrap();
    let svg = fs::read_to_string(out.join(format!("{tag}.svg"))).ok();
    (csv, svg)
}

#[test]
fn equivalence_passes_and_flip_fails() {
    let dir = TempDir::new().unwrap();
    let ok = write(dir.path(), "eq.json", r#"{"seed": 1, "instances": 10}"#);
    let o = sufflab(&["equivalence", "--config", &ok], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("ils_vs_cbs"));

    let bad = write(dir.path(), "flip.json", r#"{"seed": 1, "instances": 10, "inject_sign_flip": true}"#);
    let o = sufflab(&["equivalence", "--config", &bad], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    for (name, body) in [
        ("noseed.json", r#"{"instances": 10}"#),
        ("tag.json", r#"{"experiment": "vmf", "seed": 1}"#),
        ("syntax.json", "{seed: 1"),
    ] {
        let p = write(dir.path(), name, body);
        let o = sufflab(&["equivalence", "--config", &p], None);
        assert_eq!(o.status.code(), Some(2), "{name}");
    }
    let p = write(dir.path(), "oddd.json", r#"{"seed": 1, "d": 7}"#);
    assert_eq!(sufflab(&["vmf", "--config", &p], None).status.code(), Some(2));
    assert_eq!(sufflab(&["topic"], None).status.code(), Some(2));
    let p = write(dir.path(), "ok.json", r#"{"seed": 1}"#);
    assert_eq!(sufflab(&["equivalence", "--config", &p], Some("zero")).status.code(), Some(2));
}

#[test]
fn suff_prints_all_forms() {
    let dir = TempDir::new().unwrap();
    let joint = write(
        dir.path(),
        "j.json",
        r#"{"p": [[0.2, 0.05, 0.05], [0.05, 0.2, 0.05], [0.05, 0.05, 0.3]], "statistic": [0, 0, 1]}"#,
    );
    let o = sufflab(&["suff", "--joint", &joint, "--f", "chisq"], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout).to_string();
    let values: Vec<f64> = ["ils", "vfs", "cbs"]
        .iter()
        .map(|name| {
            let line = text.lines().find(|l| l.starts_with(&format!("{name} "))).expect(name);
            line.split_whitespace().nth(1).unwrap().parse().unwrap()
        })
        .collect();
    assert!(values[0] > 0.0);
    assert!(values.iter().all(|v| (v - values[0]).abs() < 1e-10), "{values:?}");
    assert!(text.contains("max_disagreement"));

    let o = sufflab(&["suff", "--joint", &joint, "--f", "tv"], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn topic_output_is_reproducible_across_runs_and_threads() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "topic.json", TOPIC);
    let a = run_to("topic", &cfg, &dir.path().join("a"), Some("1"));
    let b = run_to("topic", &cfg, &dir.path().join("b"), Some("4"));
    let c = run_to("topic", &cfg, &dir.path().join("c"), None);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert!(a.0.starts_with("experiment,method,param,rep,seed,metric,value,stderr\n"));
    assert!(a.1.unwrap().starts_with("<svg"));
}

#[test]
fn vmf_output_is_reproducible_across_runs_and_threads() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "vmf.json", VMF);
    let a = run_to("vmf", &cfg, &dir.path().join("a"), Some("1"));
    let b = run_to("vmf", &cfg, &dir.path().join("b"), Some("4"));
    assert_eq!(a, b);
    assert!(a.0.lines().filter(|l| l.contains(",trained,")).count() == 4);
}

#[test]
fn csv_goes_to_stdout_without_out_dir() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "vmf.json", VMF);
    let o = sufflab(&["vmf", "--config", &cfg], None);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.starts_with("experiment,method,param"));
    let (csv, _) = run_to("vmf", &cfg, &dir.path().join("o"), None);
    assert_eq!(text, csv);
}
