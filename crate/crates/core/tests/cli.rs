use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use luna::cli::RunConfig;

fn luna(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_luna"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

const MAJORITY: &str = r#"
dtype = "f64"
task = "majority"
min_len = 17
max_len = 17
d = 16
d_hidden = 32
l = 4
steps = 30
total_steps = 60
warmup_steps = 5
lr = 0.003
batch_size = 8
eval_every = 15
eval_size = 64
train_size = 512
val_size = 64
"#;

#[test]
fn gradcheck_passes_in_f64() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("g.toml"), "dtype = \"f64\"\n").unwrap();
    let o = luna(&["gradcheck", "--config", "g.toml"], dir.path());
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{out}");
    assert!(out.contains("luna_attend"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn gradcheck_refuses_f32() {
    let dir = tempfile::tempdir().unwrap();
    let o = luna(&["gradcheck"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("f64"));
}

#[test]
fn gradcheck_reports_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("g.toml"), "dtype = \"f64\"\ngradcheck_inject_fault = true\n").unwrap();
    let o = luna(&["gradcheck", "--config", "g.toml"], dir.path());
    assert_eq!(code(&o), 1);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("FAIL attend"), "{out}");
}

#[test]
fn bad_configs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "learning_rate = 0.1\n").unwrap();
    let o = luna(&["train", "--config", "bad.toml"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    assert_eq!(code(&luna(&["train", "--mechanism", "linear"], dir.path())), 2);
    assert_eq!(code(&luna(&["train", "--config", "missing.toml"], dir.path())), 2);
    assert_eq!(code(&luna(&["frobnicate"], dir.path())), 2);
}

#[test]
fn train_writes_a_complete_run_directory_and_eval_reproduces_it() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("maj.toml"), MAJORITY).unwrap();
    let o = luna(&["train", "--config", "maj.toml", "--seed", "9", "--out", "run"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = p.join("run");
    for f in ["config.toml", "seed", "git_describe", "metrics.jsonl", "eval.jsonl", "report.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert!(run.join("checkpoint").is_dir());

    let resolved = RunConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(resolved.seed, 9, "flags override the file");
    assert_eq!(fs::read_to_string(run.join("seed")).unwrap().trim(), "9");

    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 30);
    for (i, m) in lines.iter().enumerate() {
        assert_eq!(m["step"].as_u64().unwrap(), i as u64 + 1);
        for key in ["loss", "lr", "grad_norm", "wall_ms"] {
            assert!(m[key].as_f64().unwrap().is_finite(), "{key}");
        }
    }
    let evals = fs::read_to_string(run.join("eval.jsonl")).unwrap();
    assert_eq!(evals.lines().count(), 2);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    let final_acc = report["final_eval"]["accuracy"].as_f64().unwrap();
    let final_loss = report["final_eval"]["loss"].as_f64().unwrap();

    let o = luna(
        &["eval", "--config", "run/config.toml", "--checkpoint", "run/checkpoint", "--out", "ev"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let row: serde_json::Value =
        serde_json::from_str(fs::read_to_string(p.join("ev/eval.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(row["accuracy"].as_f64().unwrap(), final_acc);
    assert_eq!(row["loss"].as_f64().unwrap(), final_loss);
    assert_eq!(row["step"].as_u64().unwrap(), 30);

    // resume to the end of the schedule
    let extended = MAJORITY.replace("steps = 30\n", "steps = 60\n");
    fs::write(p.join("ext.toml"), extended).unwrap();
    let o = luna(
        &["train", "--config", "ext.toml", "--seed", "9", "--checkpoint", "run/checkpoint", "--out", "run2"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let resumed = fs::read_to_string(p.join("run2/metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(resumed.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"].as_u64().unwrap(), 31);
    assert_eq!(resumed.lines().count(), 30);

    // a checkpoint from a different architecture is refused
    let o = luna(
        &["train", "--config", "ext.toml", "--l", "8", "--checkpoint", "run/checkpoint", "--out", "run3"],
        p,
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("b.toml"),
        "bench_lengths = [32, 64]\nbench_reps = 2\nbench_warmup = 0\nd = 16\nd_hidden = 32\nl = 4\n",
    )
    .unwrap();
    let o = luna(&["bench", "--config", "b.toml", "--out", "bench"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(p.join("bench/bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "mechanism,length,wall_ms_median,wall_ms_iqr,peak_elements,allocs"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().any(|r| r.starts_with("fixed_proj,64,")));
    assert!(p.join("bench/bench.txt").is_file());
}
