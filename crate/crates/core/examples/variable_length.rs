//! One model instance classifies sequences of very different lengths without
//! any change to its parameters.
//!
//! cargo run --release --example variable_length

use luna::model::{Model, ModelConfig};
use luna::tasks::FIRST_SYMBOL;

fn main() -> luna::Result<()> {
    let model = Model::<f32>::new(ModelConfig {
        n_max: 2049,
        vocab: 5,
        ..ModelConfig::default()
    })?;
    println!("{} parameters", model.param_count());
    for n in [5, 37, 129, 1024, 2048] {
        let tokens: Vec<usize> = (0..n).map(|i| FIRST_SYMBOL + (i * 7 % 3) % 2).collect();
        let start = std::time::Instant::now();
        let (h, p) = model.encode(&tokens)?;
        let logits = model.classify(&tokens)?;
        println!(
            "n={n:>5}  H {:?}  P {:?}  logits {:?}  {:.1} ms",
            h.shape(),
            p.map(|p| p.shape().to_vec()),
            logits.data(),
            start.elapsed().as_secs_f64() * 1e3
        );
    }
    Ok(())
}
