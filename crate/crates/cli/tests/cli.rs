use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stackcast"))
        .args(args)
        .env("STACKCAST_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn no_arguments_prints_usage() {
    let o = run(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(run(&["verify-lemma1", "--bogus"]).status.code(), Some(1));
}

#[test]
fn verify_lemma1_small() {
    let o = run(&["verify-lemma1", "--trials", "10", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("all checks passed"));
}

fn toy_csv(dir: &Path, binary: bool) -> std::path::PathBuf {
    let path = dir.join("toy.csv");
    let mut text = String::from("a,b,y\n");
    for i in 0..24 {
        let a = (i as f64 * 0.37).sin() * 2.0;
        let b = (i as f64 * 1.3).cos();
        let y = if binary {
            f64::from(a + 0.5 * b + 0.3 * ((i * 7) % 5) as f64 - 0.6 > 0.0)
        } else {
            1.5 * a - b + 0.1 * ((i * 7) % 5) as f64
        };
        text.push_str(&format!("{a},{b},{y}\n"));
    }
    std::fs::write(&path, text).unwrap();
    path
}

fn printed_weights(out: &str) -> Vec<f64> {
    out.lines()
        .skip_while(|l| !l.starts_with("candidate"))
        .skip(1)
        .take_while(|l| !l.starts_with("stacked"))
        .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn stack_fit_then_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_csv(dir.path(), false);
    let model = dir.path().join("model.json");
    let o = run(&[
        "stack-fit",
        "--data",
        data.to_str().unwrap(),
        "--outcome",
        "y",
        "--prior",
        "g",
        "--grid",
        "0.5,20",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let w = printed_weights(&stdout(&o));
    assert_eq!(w.len(), 2);
    assert!(w.iter().all(|&v| v >= 0.0));
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);

    let o = run(&[
        "predict",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 25);
}

#[test]
fn stack_fit_binary_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_csv(dir.path(), true);
    let model = dir.path().join("model.json");
    let o = run(&[
        "stack-fit",
        "--data",
        data.to_str().unwrap(),
        "--outcome",
        "y",
        "--prior",
        "iso",
        "--grid",
        "0.01:10:4:log",
        "--folds",
        "4",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).contains("family: logistic"));
    let o = run(&[
        "predict",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    let preds: Vec<f64> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| l.parse().unwrap())
        .collect();
    assert!(preds.iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn missing_data_file_is_runtime_error() {
    let o = run(&[
        "stack-fit",
        "--data",
        "/nonexistent/x.csv",
        "--outcome",
        "y",
        "--prior",
        "g",
        "--grid",
        "1",
        "--out",
        "/tmp/never.json",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_is_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "n_values = [30]\nr2_grid = [0.4]\nq = 50\ntest_size = 60\n",
    )
    .unwrap();
    let mut outs = Vec::new();
    for threads in ["1", "4"] {
        let csv = dir.path().join(format!("out{threads}.csv"));
        let o = run(&[
            "simulate-linear",
            "--config",
            cfg.to_str().unwrap(),
            "--reps",
            "6",
            "--seed",
            "9",
            "--threads",
            threads,
            "--no-timing",
            "--out-csv",
            csv.to_str().unwrap(),
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        outs.push(std::fs::read(&csv).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
    assert!(String::from_utf8_lossy(&outs[0]).starts_with("family,prior_family,n,r2,"));
}

#[test]
fn simulate_logistic_writes_svg() {
    let dir = tempfile::tempdir().unwrap();
    let svg = dir.path().join("p.svg");
    let o = run(&[
        "simulate-logistic",
        "--reps",
        "3",
        "--n",
        "40",
        "--r2",
        "0.3",
        "--out-svg",
        svg.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).starts_with("family,"));
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<polyline"));
}

#[test]
fn bad_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "unknown_key = 3\n").unwrap();
    let o = run(&["simulate-linear", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
