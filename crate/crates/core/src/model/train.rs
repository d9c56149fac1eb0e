use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, Checkpoint, Mode, Model, ModelConfig, OptimConfig, OptimizerState};
use crate::error::{LunaError, Result};
use crate::numerics::{Dropout, Graph, RngState, Scalar};
use crate::tasks::{copy_lm_sequence, Example, Label, Split, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Validation pass every this many steps; `0` evaluates only at the end.
    pub eval_every: u64,
    /// Validation examples per pass (capped at the task's `val_size`).
    pub eval_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch_size: 16,
            eval_every: 0,
            eval_size: 500,
        }
    }
}

/// One JSON-lines metrics record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    pub examples: usize,
    pub accuracy: f64,
    pub loss: f64,
}

pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    pub task: TaskSpec,
    pub config: TrainConfig,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ModelConfig, optim: OptimConfig, task: TaskSpec, config: TrainConfig) -> Result<Self> {
        let model = Model::new(model)?;
        let optimizer = OptimizerState::new(optim, model.store())?;
        Self::from_parts(model, optimizer, task, config)
    }

    pub fn from_checkpoint(ck: Checkpoint<T>, task: TaskSpec, config: TrainConfig) -> Result<Self> {
        Self::from_parts(ck.model, ck.optimizer, task, config)
    }

    fn from_parts(model: Model<T>, optimizer: OptimizerState<T>, task: TaskSpec, config: TrainConfig) -> Result<Self> {
        task.validate()?;
        if config.batch_size == 0 {
            return Err(LunaError::Config("batch_size must be positive".into()));
        }
        check_compatible(model.config(), &task)?;
        Ok(Trainer {
            model,
            optimizer,
            task,
            config,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step
    }

    /// Training-split indices for update `step` (1-based); a pure function of the seed and step.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let mut r = RngState::new(self.model.config().seed).stream(&format!("batch/{step}"));
        (0..self.config.batch_size)
            .map(|_| r.random_range(0..self.task.train_size))
            .collect()
    }

    /// Samples the next batch and applies one update.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let next = self.optimizer.step + 1;
        let examples = self
            .batch_indices(next)
            .into_iter()
            .map(|i| self.task.example(Split::Train, i))
            .collect::<Result<Vec<_>>>()?;
        self.train_step(&examples)
    }

    /// Forward, backward, clip and update on `examples`.
    pub fn train_step(&mut self, examples: &[Example]) -> Result<StepMetrics> {
        let start = Instant::now();
        let step = self.optimizer.step + 1;
        let rows = self.model.assemble(examples)?;
        self.model.store_mut().clear_grads();
        let cfg = self.model.config().clone();
        let drop_rng = RngState::new(cfg.seed);
        let any_dropout = cfg.dropout_attn > 0.0 || cfg.dropout_hidden > 0.0 || cfg.dropout_residual > 0.0;
        let scale = 1.0 / rows.len() as f64;
        let mut total = 0.0;
        for (k, row) in rows.iter().enumerate() {
            let grads = {
                let dropout = Dropout::new(
                    &drop_rng,
                    format!("dropout/step{step}/ex{k}"),
                    cfg.dropout_attn,
                    cfg.dropout_hidden,
                    cfg.dropout_residual,
                );
                let mut g = Graph::with_params(self.model.store());
                let loss = self.model.row_loss(&mut g, row, any_dropout.then_some(&dropout))?;
                let value = g.value(loss).data()[0].to_f64_lossy();
                if !value.is_finite() {
                    return Err(LunaError::NonFinite(format!(
                        "loss is {value} at step {step}, example {k}"
                    )));
                }
                total += value;
                g.backward(loss)?
            };
            grads.accumulate_scaled_into(self.model.store_mut(), T::from_f64_lossy(scale));
        }
        let update = self.optimizer.apply(self.model.store_mut())?;
        Ok(StepMetrics {
            step,
            loss: total * scale,
            lr: update.lr,
            grad_norm: update.grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        let mut report = evaluate(&self.model, &self.task, Split::Val, self.config.eval_size)?;
        report.step = self.optimizer.step;
        Ok(report)
    }

    /// Runs until `config.steps` updates have been applied, reporting each
    /// step and each validation pass. Returns the final validation report.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
        mut on_eval: impl FnMut(&EvalReport) -> Result<()>,
    ) -> Result<EvalReport> {
        while self.optimizer.step < self.config.steps {
            let m = self.step()?;
            on_step(&m)?;
            if self.config.eval_every > 0 && m.step % self.config.eval_every == 0 && m.step < self.config.steps {
                on_eval(&self.evaluate()?)?;
            }
        }
        let last = self.evaluate()?;
        on_eval(&last)?;
        Ok(last)
    }
}

fn check_compatible(model: &ModelConfig, task: &TaskSpec) -> Result<()> {
    if model.vocab < task.vocab() {
        return Err(LunaError::Config(format!(
            "model vocab {} is smaller than the task's {}",
            model.vocab,
            task.vocab()
        )));
    }
    match (model.mode, task.classes()) {
        (Mode::EncoderClassifier, Some(c)) if c > model.classes => Err(LunaError::Config(format!(
            "task has {c} classes, model head has {}",
            model.classes
        ))),
        (Mode::EncoderClassifier, None) => Err(LunaError::Config(format!("task {} has no class labels", task.kind))),
        (Mode::DecoderLm | Mode::Seq2seq, Some(_)) => {
            Err(LunaError::Config(format!("task {} has no sequence targets", task.kind)))
        }
        _ => Ok(()),
    }
}

/// Accuracy and mean loss over the first `count` examples of `split`, one
/// example per forward pass with dropout off. Classifier accuracy is exact
/// label match; sequence accuracy is exact match of the greedy decode.
pub fn evaluate<T: Scalar>(model: &Model<T>, task: &TaskSpec, split: Split, count: usize) -> Result<EvalReport> {
    let n = count.min(task.split_len(split));
    if n == 0 {
        return Err(LunaError::Config("evaluation needs at least one example".into()));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for i in 0..n {
        let ex = task.example(split, i)?;
        let mut g = Graph::with_params(model.store());
        let hit = match (&ex.label, model.config().mode) {
            (Label::Class(c), Mode::EncoderClassifier) => {
                let logits = model.classify_graph(&mut g, &ex.tokens, None, None)?;
                let l = g.cross_entropy(logits, &[Some(*c)])?;
                loss += g.value(l).data()[0].to_f64_lossy();
                argmax(g.value(logits).data()) == *c
            }
            (Label::Sequence(target), mode @ (Mode::DecoderLm | Mode::Seq2seq)) => {
                let row = model.assemble(std::slice::from_ref(&ex))?.remove(0);
                let l = model.row_loss(&mut g, &row, None)?;
                loss += g.value(l).data()[0].to_f64_lossy();
                let decoded = if mode == Mode::DecoderLm {
                    let mut prefix = copy_lm_sequence(&ex.tokens);
                    prefix.truncate(ex.tokens.len() + 1);
                    model.greedy_continue(&prefix, target.len())?
                } else {
                    model.greedy_translate(&ex.tokens, target.len())?
                };
                decoded == *target
            }
            _ => return Err(LunaError::Config("task and model mode disagree".into())),
        };
        correct += usize::from(hit);
    }
    Ok(EvalReport {
        step: 0,
        examples: n,
        accuracy: correct as f64 / n as f64,
        loss: loss / n as f64,
    })
}
