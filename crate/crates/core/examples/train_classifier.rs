//! Trains an encoder classifier on majority or listops_mini and prints the
//! validation accuracy as it goes.
//!
//! cargo run --release --example train_classifier [majority|listops] [luna|full|fixed_proj] [steps]

use luna::model::{Mechanism, ModelConfig, OptimConfig, TrainConfig, Trainer};
use luna::tasks::TaskSpec;

fn main() -> luna::Result<()> {
    let mut args = std::env::args().skip(1);
    let task_name = args.next().unwrap_or_else(|| "majority".into());
    let mechanism: Mechanism = args.next().map_or(Ok(Mechanism::Luna), |s| s.parse())?;
    let (task, default_steps, lr) = match task_name.as_str() {
        "majority" => (TaskSpec::majority(129, 0), 300, 2e-3),
        "listops" => (TaskSpec::listops(3, 128, 0), 3000, 1e-3),
        other => panic!("unknown task {other}"),
    };
    let steps: u64 = args.next().map_or(default_steps, |s| s.parse().expect("steps"));

    let model = ModelConfig {
        mechanism,
        d: 64,
        d_hidden: 128,
        n_max: task.max_len + 1,
        vocab: task.vocab(),
        classes: task.classes().expect("classification task"),
        dropout_attn: 0.0,
        dropout_hidden: 0.0,
        dropout_residual: 0.0,
        ..ModelConfig::default()
    };
    let optim = OptimConfig {
        lr,
        warmup_steps: steps / 10,
        total_steps: steps,
        ..OptimConfig::default()
    };
    let config = TrainConfig {
        steps,
        batch_size: 16,
        eval_every: (steps / 5).max(1),
        eval_size: 500,
    };
    let mut trainer = Trainer::<f32>::new(model, optim, task, config)?;
    println!("{} parameters", trainer.model.param_count());
    let mut running = 0.0;
    trainer.run(
        |m| {
            running = if m.step == 1 { m.loss } else { 0.95 * running + 0.05 * m.loss };
            if m.step % 50 == 0 {
                println!("step {:>5}  loss {running:.4}  lr {:.2e}", m.step, m.lr);
            }
            Ok(())
        },
        |e| {
            println!("eval {:>5}  accuracy {:.2}%", e.step, 100.0 * e.accuracy);
            Ok(())
        },
    )?;
    Ok(())
}
