use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::Tying;
use crate::bench::BenchConfig;
use crate::error::{LunaError, Result};
use crate::layers::Pooling;
use crate::model::{Mechanism, Mode, ModelConfig, OptimConfig, TrainConfig};
use crate::numerics::{DType, Omega};
use crate::tasks::{TaskKind, TaskSpec};

/// Every knob of a run as one flat TOML table. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Element type for train/eval. `gradcheck` requires `f64`.
    pub dtype: DType,
    /// Seeds the parameters, dropout, batch order and the dataset.
    pub seed: u64,

    pub mode: Mode,
    pub mechanism: Mechanism,
    pub d: usize,
    pub d_hidden: usize,
    pub heads: usize,
    pub l: usize,
    pub layers: usize,
    pub tying: Tying,
    pub pack_omega: Omega,
    pub pooling: Pooling,
    pub dropout_attn: f64,
    pub dropout_hidden: f64,
    pub dropout_residual: f64,
    /// Longest model input; `0` sizes it from the task.
    pub n_max: usize,

    pub task: TaskKind,
    pub min_len: usize,
    pub max_len: usize,
    pub depth: usize,
    pub max_args: usize,
    pub nest_prob: f64,
    pub alphabet: usize,
    pub train_size: usize,
    pub val_size: usize,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: u64,
    /// End of the linear decay; `0` uses `steps`.
    pub total_steps: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,

    pub steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub eval_size: usize,

    pub bench_lengths: Vec<usize>,
    pub bench_mechanisms: Vec<Mechanism>,
    pub bench_reps: usize,
    pub bench_warmup: usize,
    pub bench_memory_budget: u64,

    /// Corrupts every analytic gradient in `gradcheck`, which must then fail.
    pub gradcheck_inject_fault: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TaskSpec::default();
        let o = OptimConfig::default();
        let r = TrainConfig::default();
        let b = BenchConfig::default();
        RunConfig {
            dtype: DType::F32,
            seed: 0,
            mode: m.mode,
            mechanism: m.mechanism,
            d: m.d,
            d_hidden: m.d_hidden,
            heads: m.heads,
            l: m.l,
            layers: m.layers,
            tying: m.tying,
            pack_omega: m.pack_omega,
            pooling: m.pooling,
            dropout_attn: 0.0,
            dropout_hidden: 0.0,
            dropout_residual: 0.0,
            n_max: 0,
            task: t.kind,
            min_len: t.min_len,
            max_len: t.max_len,
            depth: t.depth,
            max_args: t.max_args,
            nest_prob: t.nest_prob,
            alphabet: t.alphabet,
            train_size: t.train_size,
            val_size: t.val_size,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            adam_eps: o.eps,
            warmup_steps: o.warmup_steps,
            total_steps: 0,
            weight_decay: o.weight_decay,
            clip_norm: o.clip_norm,
            steps: r.steps,
            batch_size: r.batch_size,
            eval_every: r.eval_every,
            eval_size: r.eval_size,
            bench_lengths: b.lengths,
            bench_mechanisms: b.mechanisms,
            bench_reps: b.reps,
            bench_warmup: b.warmup,
            bench_memory_budget: b.memory_budget,
            gradcheck_inject_fault: false,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LunaError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LunaError::io(path, e))?;
        toml::from_str(&text).map_err(|e| LunaError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LunaError::Format(e.to_string()))
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task,
            min_len: self.min_len,
            max_len: self.max_len,
            depth: self.depth,
            max_args: self.max_args,
            nest_prob: self.nest_prob,
            alphabet: self.alphabet,
            seed: self.seed,
            train_size: self.train_size,
            val_size: self.val_size,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let task = self.task_spec();
        let n_max = match (self.n_max, self.mode) {
            (0, Mode::EncoderClassifier) => self.max_len + 1,
            (0, Mode::DecoderLm) => 2 * self.max_len + 1,
            (0, Mode::Seq2seq) => self.max_len + 1,
            (n, _) => n,
        };
        ModelConfig {
            mode: self.mode,
            mechanism: self.mechanism,
            d: self.d,
            d_hidden: self.d_hidden,
            heads: self.heads,
            l: self.l,
            layers: self.layers,
            vocab: task.vocab(),
            classes: task.classes().unwrap_or(2),
            n_max,
            tying: self.tying,
            pack_omega: self.pack_omega,
            pooling: self.pooling,
            dropout_attn: self.dropout_attn,
            dropout_hidden: self.dropout_hidden,
            dropout_residual: self.dropout_residual,
            seed: self.seed,
        }
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            warmup_steps: self.warmup_steps,
            total_steps: if self.total_steps == 0 { self.steps } else { self.total_steps },
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            eval_every: self.eval_every,
            eval_size: self.eval_size,
        }
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            lengths: self.bench_lengths.clone(),
            mechanisms: self.bench_mechanisms.clone(),
            reps: self.bench_reps,
            warmup: self.bench_warmup,
            d: self.d,
            d_hidden: self.d_hidden,
            heads: self.heads,
            l: self.l,
            memory_budget: self.bench_memory_budget,
            seed: self.seed,
        }
    }

    /// Checks every derived configuration.
    pub fn validate(&self) -> Result<()> {
        self.task_spec().validate()?;
        self.model_config().validate()?;
        self.optim_config().validate()?;
        if self.batch_size == 0 {
            return Err(LunaError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, back);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("lerning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("lerning_rate"));
    }

    #[test]
    fn partial_documents_keep_defaults() {
        let c = RunConfig::parse("task = \"listops_mini\"\nmax_len = 64\nmechanism = \"full\"\n").unwrap();
        assert_eq!(c.task, TaskKind::ListopsMini);
        assert_eq!(c.mechanism, Mechanism::Full);
        let m = c.model_config();
        assert_eq!(m.n_max, 65);
        assert_eq!(m.classes, 10);
        assert_eq!(c.optim_config().total_steps, c.steps);
    }
}
