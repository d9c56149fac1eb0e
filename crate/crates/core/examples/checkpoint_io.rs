//! Writes tensors in the LUNA1 binary format, trains a few steps, checkpoints,
//! reloads and resumes.
//!
//! cargo run --release --example checkpoint_io

use luna::model::{load_checkpoint, save_checkpoint, ModelConfig, OptimConfig, TrainConfig, Trainer};
use luna::numerics::{io, RngState, Tensor};
use luna::tasks::TaskSpec;

fn main() -> luna::Result<()> {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let dir = tmp.path();

    let t: Tensor<f64> = RngState::new(1).normal("t", &[2, 3], 1.0);
    let path = dir.join("t.luna");
    io::save(&path, &t)?;
    let bytes = io::encode(&t);
    println!("2x3 f64 tensor: {} bytes, header {:?}", bytes.len(), &bytes[..7]);
    assert_eq!(io::load::<f64>(&path)?, t);
    println!("loading it as f32 fails: {}", io::load::<f32>(&path).unwrap_err());

    let task = TaskSpec::majority(33, 0);
    let model = ModelConfig {
        n_max: 34,
        vocab: task.vocab(),
        ..ModelConfig::default()
    };
    let config = TrainConfig {
        steps: 20,
        batch_size: 8,
        eval_every: 0,
        eval_size: 100,
    };
    let mut trainer = Trainer::<f32>::new(model, OptimConfig::default(), task.clone(), config.clone())?;
    trainer.run(|_| Ok(()), |_| Ok(()))?;
    let ck = dir.join("checkpoint");
    save_checkpoint(&ck, &trainer.model, &trainer.optimizer)?;
    for entry in std::fs::read_dir(&ck).expect("checkpoint directory").flatten() {
        println!("  {}", entry.file_name().to_string_lossy());
    }

    let restored = load_checkpoint::<f32>(&ck)?;
    let mut resumed = Trainer::from_checkpoint(restored, task, TrainConfig { steps: 40, ..config })?;
    let a = trainer.step()?;
    let b = resumed.step()?;
    println!("step {} loss: original {:.6}, resumed {:.6}", a.step, a.loss, b.loss);
    assert_eq!(a.loss, b.loss);
    Ok(())
}
