//! Trains the same Luna classifier twice, once pooling the CLS row and once
//! averaging the final packed rows, and reports the paired difference.
//!
//! cargo run --release --example pooling_study [steps]

use luna::layers::Pooling;
use luna::model::{ModelConfig, OptimConfig, TrainConfig, Trainer};
use luna::tasks::TaskSpec;

fn main() -> luna::Result<()> {
    let steps: u64 = std::env::args().nth(1).map_or(2000, |s| s.parse().expect("steps"));
    let task = TaskSpec::listops(3, 64, 1);
    let mut acc = Vec::new();
    for pooling in [Pooling::Cls, Pooling::PMean] {
        let model = ModelConfig {
            pooling,
            d: 64,
            d_hidden: 128,
            n_max: 65,
            vocab: task.vocab(),
            classes: task.classes().expect("classes"),
            dropout_attn: 0.0,
            dropout_hidden: 0.0,
            dropout_residual: 0.0,
            seed: 1,
            ..ModelConfig::default()
        };
        let optim = OptimConfig {
            lr: 1e-3,
            warmup_steps: steps / 10,
            total_steps: steps,
            ..OptimConfig::default()
        };
        let config = TrainConfig {
            steps,
            batch_size: 16,
            eval_every: 0,
            eval_size: 500,
        };
        let mut trainer = Trainer::<f32>::new(model, optim, task.clone(), config)?;
        let last = trainer.run(|_| Ok(()), |_| Ok(()))?;
        println!("{:<7} accuracy {:.2}%", pooling.to_string(), 100.0 * last.accuracy);
        acc.push(last.accuracy);
    }
    println!("p_mean - cls: {:+.2} points", 100.0 * (acc[1] - acc[0]));
    Ok(())
}
