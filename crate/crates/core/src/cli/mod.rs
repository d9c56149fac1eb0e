//! The `luna` command line: `gradcheck`, `train`, `eval` and `bench`.

mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::RunConfig;

use crate::bench;
use crate::error::{LunaError, Result};
use crate::gradsuite::{run_suite, SUITE_TOL};
use crate::layers::Pooling;
use crate::model::{evaluate, load_checkpoint, save_checkpoint, EvalReport, Mechanism, Trainer};
use crate::numerics::{DType, Scalar};
use crate::tasks::Split;

#[derive(Debug, Parser)]
#[command(name = "luna", version, about = "Nested linear attention: gradient checks, training, evaluation, benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference check of every differentiable operation (f64 only).
    Gradcheck(Common),
    /// Train a model; writes metrics, evaluation records and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate one or more checkpoints on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; repeat to compare several (e.g. one per pooling mode).
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
    },
    /// Time and count memory of one layer per mechanism over sequence lengths.
    Bench(Common),
}

/// Flags shared by every subcommand; they override the config file.
#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mechanism: Option<Mechanism>,
    #[arg(long)]
    pub l: Option<usize>,
    #[arg(long)]
    pub pooling: Option<Pooling>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl clap::ValueEnum for Mechanism {
    fn value_variants<'a>() -> &'a [Self] {
        &[Mechanism::Luna, Mechanism::Full, Mechanism::FixedProj]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            Mechanism::Luna => "luna",
            Mechanism::Full => "full",
            Mechanism::FixedProj => "fixed_proj",
        }))
    }
}

impl clap::ValueEnum for Pooling {
    fn value_variants<'a>() -> &'a [Self] {
        &[Pooling::Cls, Pooling::PMean]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            Pooling::Cls => "cls",
            Pooling::PMean => "p_mean",
        }))
    }
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(m) = self.mechanism {
            c.mechanism = m;
        }
        if let Some(l) = self.l {
            c.l = l;
        }
        if let Some(p) = self.pooling {
            c.pooling = p;
        }
        Ok(c)
    }

    fn out_dir(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(default))
    }
}

/// Exit status: 0 success, 1 a check failed, 2 bad configuration or I/O.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Gradcheck(common) => cmd_gradcheck(&common.resolve()?),
        Command::Train { common, checkpoint } => {
            let cfg = common.resolve()?;
            let out = common.out_dir("train");
            match cfg.dtype {
                DType::F32 => cmd_train::<f32>(&cfg, &out, checkpoint.as_deref()),
                DType::F64 => cmd_train::<f64>(&cfg, &out, checkpoint.as_deref()),
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let out = common.out_dir("eval");
            match cfg.dtype {
                DType::F32 => cmd_eval::<f32>(&cfg, common.pooling, &out, &checkpoint),
                DType::F64 => cmd_eval::<f64>(&cfg, common.pooling, &out, &checkpoint),
            }
        }
        Command::Bench(common) => {
            let cfg = common.resolve()?;
            cmd_bench(&cfg, &common.out_dir("bench"))
        }
    }
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<i32> {
    if cfg.dtype != DType::F64 {
        return Err(LunaError::Config(format!(
            "gradcheck needs dtype = \"f64\", config has {}",
            cfg.dtype
        )));
    }
    let start = Instant::now();
    let scale = if cfg.gradcheck_inject_fault { 1.01 } else { 1.0 };
    let entries = run_suite(scale)?;
    let mut failed = 0;
    for e in &entries {
        let status = if e.passed() { "ok  " } else { "FAIL" };
        println!(
            "{status} {:<34} max rel error {:.3e} over {} partials",
            e.name, e.report.max_rel_error, e.report.checked
        );
        failed += usize::from(!e.passed());
    }
    let worst = entries
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .expect("suite is not empty");
    let loc = worst.report.worst.as_ref().map_or(String::new(), |w| format!(" at {}[{}]", w.location, w.index));
    println!(
        "worst: {} {:.3e}{loc} (tolerance {SUITE_TOL:e}); {:.1}s",
        worst.name,
        worst.report.max_rel_error,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        eprintln!("{failed} of {} operations failed the gradient check", entries.len());
        return Ok(1);
    }
    Ok(0)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LunaError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| LunaError::io(path, e))
}

fn json_line<W: Write, T: Serialize>(w: &mut W, value: &T, path: &Path) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| LunaError::Format(e.to_string()))?;
    writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| LunaError::io(path, e))
}

/// `git describe` of the working directory, or `unknown` outside a repository.
pub fn git_describe() -> String {
    Process::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Creates the run directory with the resolved config, seed and source revision.
fn prepare_run_dir(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| LunaError::io(out, e))?;
    write_file(&out.join("config.toml"), &cfg.to_toml()?)?;
    write_file(&out.join("seed"), &format!("{}\n", cfg.seed))?;
    write_file(&out.join("git_describe"), &format!("{}\n", git_describe()))
}

#[derive(Debug, Serialize)]
struct TrainReport<'a> {
    task: String,
    mechanism: Mechanism,
    pooling: Pooling,
    params: usize,
    steps: u64,
    wall_s: f64,
    final_eval: &'a EvalReport,
}

pub fn cmd_train<T: Scalar>(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<i32> {
    cfg.validate()?;
    prepare_run_dir(out, cfg)?;
    let mut trainer = match resume {
        Some(dir) => {
            let mut ck = load_checkpoint::<T>(dir)?;
            if ck.model.config() != &cfg.model_config() {
                return Err(LunaError::Config(format!(
                    "checkpoint {} was trained with a different model config",
                    dir.display()
                )));
            }
            // moments and step count carry over; the schedule follows this run's config
            ck.optimizer.config = cfg.optim_config();
            Trainer::from_checkpoint(ck, cfg.task_spec(), cfg.train_config())?
        }
        None => Trainer::<T>::new(cfg.model_config(), cfg.optim_config(), cfg.task_spec(), cfg.train_config())?,
    };
    let metrics_path = out.join("metrics.jsonl");
    let eval_path = out.join("eval.jsonl");
    let mut metrics = create(&metrics_path)?;
    let mut evals = create(&eval_path)?;
    eprintln!(
        "training {} / {} ({} parameters) for {} steps",
        cfg.task,
        cfg.mechanism,
        trainer.model.param_count(),
        cfg.steps
    );
    let start = Instant::now();
    let last = trainer.run(
        |m| {
            if m.step % 100 == 0 {
                eprintln!("step {:>6}  loss {:.4}  lr {:.2e}  |g| {:.3}", m.step, m.loss, m.lr, m.grad_norm);
            }
            json_line(&mut metrics, m, &metrics_path)
        },
        |e| {
            eprintln!("eval step {:>6}  accuracy {:.4}  loss {:.4}", e.step, e.accuracy, e.loss);
            json_line(&mut evals, e, &eval_path)
        },
    )?;
    save_checkpoint(&out.join("checkpoint"), &trainer.model, &trainer.optimizer)?;
    let report = TrainReport {
        task: cfg.task.to_string(),
        mechanism: cfg.mechanism,
        pooling: cfg.pooling,
        params: trainer.model.param_count(),
        steps: trainer.step_count(),
        wall_s: start.elapsed().as_secs_f64(),
        final_eval: &last,
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| LunaError::Format(e.to_string()))?;
    write_file(&out.join("report.json"), &text)?;
    println!("{text}");
    Ok(0)
}

#[derive(Debug, Serialize)]
struct EvalRow {
    checkpoint: String,
    mechanism: Mechanism,
    pooling: Pooling,
    step: u64,
    examples: usize,
    accuracy: f64,
    loss: f64,
}

pub fn cmd_eval<T: Scalar>(
    cfg: &RunConfig,
    pooling: Option<Pooling>,
    out: &Path,
    checkpoints: &[PathBuf],
) -> Result<i32> {
    let task = cfg.task_spec();
    task.validate()?;
    fs::create_dir_all(out).map_err(|e| LunaError::io(out, e))?;
    let path = out.join("eval.jsonl");
    let mut file = create(&path)?;
    let mut rows = Vec::new();
    for dir in checkpoints {
        let ck = load_checkpoint::<T>(dir)?;
        let mc = ck.model.config();
        if let Some(p) = pooling {
            if mc.pooling != p {
                eprintln!("skipping {}: head was trained with {} pooling", dir.display(), mc.pooling);
                continue;
            }
        }
        let mut r = evaluate(&ck.model, &task, Split::Val, cfg.eval_size)?;
        r.step = ck.optimizer.step;
        let row = EvalRow {
            checkpoint: dir.display().to_string(),
            mechanism: mc.mechanism,
            pooling: mc.pooling,
            step: r.step,
            examples: r.examples,
            accuracy: r.accuracy,
            loss: r.loss,
        };
        println!(
            "{:<40} {:<10} {:<7} step {:>6}  accuracy {:.4}  loss {:.4}",
            row.checkpoint,
            row.mechanism.to_string(),
            row.pooling.to_string(),
            row.step, row.accuracy, row.loss
        );
        json_line(&mut file, &row, &path)?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(LunaError::Config("no checkpoint matched the requested pooling".into()));
    }
    let cls = rows.iter().find(|r| r.pooling == Pooling::Cls);
    let pm = rows.iter().find(|r| r.pooling == Pooling::PMean);
    if let (Some(c), Some(p)) = (cls, pm) {
        println!("p_mean - cls accuracy: {:+.2} points", 100.0 * (p.accuracy - c.accuracy));
    }
    Ok(0)
}

pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let bc = cfg.bench_config();
    bc.validate()?;
    prepare_run_dir(out, cfg)?;
    let report = bench::run(&bc)?;
    let text = report.pretty();
    print!("{text}");
    write_file(&out.join("bench.txt"), &text)?;
    let path = out.join("bench.csv");
    report.write_csv(create(&path)?)?;
    eprintln!("wrote {}", path.display());
    Ok(0)
}
