//! Trains a decoder-only Luna model on the copy task, then asks it to
//! continue `source SEP` greedily.
//!
//! cargo run --release --example causal_copy [steps]

use luna::model::{Mode, ModelConfig, OptimConfig, TrainConfig, Trainer};
use luna::tasks::{Split, TaskSpec, SEP};

fn main() -> luna::Result<()> {
    let steps: u64 = std::env::args().nth(1).map_or(2500, |s| s.parse().expect("steps"));
    let task = TaskSpec::copy(4, 8, 4, 0);
    let model = ModelConfig {
        mode: Mode::DecoderLm,
        d: 64,
        d_hidden: 128,
        l: 8,
        n_max: 2 * task.max_len + 1,
        vocab: task.vocab(),
        dropout_attn: 0.0,
        dropout_hidden: 0.0,
        dropout_residual: 0.0,
        ..ModelConfig::default()
    };
    let optim = OptimConfig {
        lr: 2e-3,
        warmup_steps: steps / 10,
        total_steps: steps,
        ..OptimConfig::default()
    };
    let config = TrainConfig {
        steps,
        batch_size: 16,
        eval_every: (steps / 5).max(1),
        eval_size: 200,
    };
    let mut trainer = Trainer::<f32>::new(model, optim, task.clone(), config)?;
    trainer.run(
        |_| Ok(()),
        |e| {
            println!("step {:>5}  exact-match {:.1}%  loss {:.4}", e.step, 100.0 * e.accuracy, e.loss);
            Ok(())
        },
    )?;
    for i in 0..5 {
        let ex = task.example(Split::Val, i)?;
        let mut prefix = ex.tokens.clone();
        prefix.push(SEP);
        let out = trainer.model.greedy_continue(&prefix, ex.tokens.len())?;
        println!("{:?} -> {:?}", ex.tokens, out);
    }
    Ok(())
}
