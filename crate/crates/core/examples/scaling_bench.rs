//! Times one layer of each attention mechanism over growing sequence lengths
//! and prints the report, the memory fits and the CSV.
//!
//! cargo run --release --example scaling_bench [reps]

use luna::bench::{poly_fit, run, BenchConfig};
use luna::model::Mechanism;

fn main() -> luna::Result<()> {
    let reps = std::env::args().nth(1).map_or(Ok(9), |s| s.parse()).expect("reps must be an integer");
    let config = BenchConfig {
        reps,
        ..BenchConfig::default()
    };
    let report = run(&config)?;
    print!("{}", report.pretty());

    for mechanism in [Mechanism::Luna, Mechanism::Full] {
        let mem = report.series(mechanism, |r| r.peak_elements as f64);
        let lin = poly_fit(&mem, 1)?;
        let quad = poly_fit(&mem, 2)?;
        println!(
            "{mechanism}: peak-memory residual linear {:.2}% quadratic {:.2}%",
            100.0 * lin.rel_residual,
            100.0 * quad.rel_residual
        );
    }
    let n = *config.lengths.last().expect("lengths");
    if let (Some(l), Some(f)) = (report.get(Mechanism::Luna, n), report.get(Mechanism::Full, n)) {
        println!(
            "n={n}: luna/full peak {:.3}, speedup {:.2}x",
            l.peak_elements as f64 / f.peak_elements as f64,
            f.wall_ms_median / l.wall_ms_median
        );
    }
    println!();
    report.write_csv(std::io::stdout())
}
