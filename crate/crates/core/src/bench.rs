//! Wall-clock and counted-memory scaling of one attention layer versus
//! sequence length.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::Tying;
use crate::error::{LunaError, Result};
use crate::layers::{
    fixed_proj_layer, luna_encoder_layer, transformer_layer, FixedProjLayerParams, LunaLayerParams,
    TransformerLayerParams,
};
use crate::model::Mechanism;
use crate::numerics::{Graph, MemoryProbe, ParamStore, RngState, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub mechanisms: Vec<Mechanism>,
    pub reps: usize,
    pub warmup: usize,
    pub d: usize,
    pub d_hidden: usize,
    pub heads: usize,
    pub l: usize,
    /// Lengths whose estimated peak exceeds this many elements are skipped.
    pub memory_budget: u64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![512, 1024, 2048, 4096],
            mechanisms: vec![Mechanism::Luna, Mechanism::Full, Mechanism::FixedProj],
            reps: 9,
            warmup: 3,
            d: 64,
            d_hidden: 128,
            heads: 2,
            l: 16,
            memory_budget: 1 << 31,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.mechanisms.is_empty() {
            return Err(LunaError::Config("bench needs at least one length and one mechanism".into()));
        }
        if self.reps == 0 {
            return Err(LunaError::Config("bench reps must be positive".into()));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) || self.l == 0 || self.d_hidden < self.d {
            return Err(LunaError::Config("bench layer shape is invalid".into()));
        }
        Ok(())
    }

    /// Rough upper bound on live elements for one forward+backward pass.
    fn estimate(&self, mechanism: Mechanism, n: usize) -> u64 {
        let (n, d, h) = (n as u64, self.d as u64, self.heads as u64);
        let linear = 64 * n * (d + self.d_hidden as u64 + self.l as u64);
        match mechanism {
            Mechanism::Full => linear + 8 * h * n * n,
            _ => linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub mechanism: Mechanism,
    pub length: usize,
    pub reps: usize,
    pub wall_ms_median: f64,
    pub wall_ms_iqr: f64,
    pub peak_elements: u64,
    pub allocs: u64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub dtype: String,
    pub d: usize,
    pub d_hidden: usize,
    pub heads: usize,
    pub l: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub environment: Environment,
    pub records: Vec<BenchRecord>,
}

impl BenchReport {
    fn new(config: &BenchConfig) -> Self {
        BenchReport {
            environment: Environment {
                os: std::env::consts::OS.into(),
                arch: std::env::consts::ARCH.into(),
                threads: 1,
                dtype: "f32".into(),
                d: config.d,
                d_hidden: config.d_hidden,
                heads: config.heads,
                l: config.l,
            },
            records: Vec::new(),
        }
    }

    pub fn get(&self, mechanism: Mechanism, length: usize) -> Option<&BenchRecord> {
        self.records
            .iter()
            .find(|r| r.mechanism == mechanism && r.length == length && !r.skipped)
    }

    /// Measured `(length, value)` pairs for one mechanism, skipped lengths omitted.
    pub fn series(&self, mechanism: Mechanism, value: impl Fn(&BenchRecord) -> f64) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .filter(|r| r.mechanism == mechanism && !r.skipped)
            .map(|r| (r.length as f64, value(r)))
            .collect()
    }

    /// Fills in the memory columns of the matching records of `other`.
    pub fn merge_memory(&mut self, other: &BenchReport) {
        for r in &mut self.records {
            if let Some(m) = other
                .records
                .iter()
                .find(|m| m.mechanism == r.mechanism && m.length == r.length)
            {
                r.peak_elements = m.peak_elements;
                r.allocs = m.allocs;
                r.skipped |= m.skipped;
            }
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["mechanism", "length", "wall_ms_median", "wall_ms_iqr", "peak_elements", "allocs"])
            .map_err(csv_err)?;
        for r in &self.records {
            let (median, iqr) = if r.skipped {
                ("skipped".to_string(), "skipped".to_string())
            } else {
                (format!("{:.3}", r.wall_ms_median), format!("{:.3}", r.wall_ms_iqr))
            };
            w.write_record([
                r.mechanism.to_string(),
                r.length.to_string(),
                median,
                iqr,
                r.peak_elements.to_string(),
                r.allocs.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| LunaError::Format(e.to_string()))
    }

    pub fn pretty(&self) -> String {
        let e = &self.environment;
        let mut s = format!(
            "{} {} | {} | d={} d_hidden={} heads={} l={} | single thread\n",
            e.os, e.arch, e.dtype, e.d, e.d_hidden, e.heads, e.l
        );
        let _ = writeln!(
            s,
            "{:<11}{:>8}{:>14}{:>12}{:>16}{:>9}",
            "mechanism", "length", "median ms", "iqr ms", "peak elements", "allocs"
        );
        for r in &self.records {
            if r.skipped {
                let _ = writeln!(s, "{:<11}{:>8}   skipped (over memory budget)", r.mechanism.to_string(), r.length);
            } else {
                let _ = writeln!(
                    s,
                    "{:<11}{:>8}{:>14.2}{:>12.2}{:>16}{:>9}",
                    r.mechanism.to_string(),
                    r.length,
                    r.wall_ms_median,
                    r.wall_ms_iqr,
                    r.peak_elements,
                    r.allocs
                );
            }
        }
        s
    }
}

fn csv_err(e: csv::Error) -> LunaError {
    LunaError::Format(e.to_string())
}

/// One layer of each mechanism with its parameters and a fixed input.
struct Bench {
    store: ParamStore<f32>,
    layer: Layer,
    x: Tensor<f32>,
    p: Tensor<f32>,
}

enum Layer {
    Luna(LunaLayerParams),
    Full(TransformerLayerParams),
    FixedProj(FixedProjLayerParams),
}

impl Bench {
    fn new(config: &BenchConfig, mechanism: Mechanism, n: usize) -> Result<Self> {
        let c = config;
        let rng = RngState::new(c.seed);
        let mut store = ParamStore::new();
        let layer = match mechanism {
            Mechanism::Luna => Layer::Luna(LunaLayerParams::init(
                &mut store, &rng, "layer", c.d, c.d_hidden, c.heads, Tying::None,
            )?),
            Mechanism::Full => Layer::Full(TransformerLayerParams::init(
                &mut store, &rng, "layer", c.d, c.d_hidden, c.heads, Tying::None, false,
            )?),
            Mechanism::FixedProj => Layer::FixedProj(FixedProjLayerParams::init(
                &mut store, &rng, "layer", c.d, c.d_hidden, c.heads, c.l, n, Tying::None,
            )?),
        };
        Ok(Bench {
            store,
            layer,
            x: rng.normal(&format!("x/{n}"), &[n, c.d], 1.0),
            p: rng.normal("p", &[c.l, c.d], 1.0),
        })
    }

    /// Forward and backward through the layer with a sum loss.
    fn run(&self) -> Result<()> {
        let mut g = Graph::with_params(&self.store);
        let x = g.input(self.x.clone());
        let loss = match &self.layer {
            Layer::Luna(params) => {
                let p = g.input(self.p.clone());
                let (y, p2) = luna_encoder_layer(&mut g, x, p, params, None)?;
                let a = g.sum(y);
                let b = g.sum(p2);
                g.add(a, b)?
            }
            Layer::Full(params) => {
                let y = transformer_layer(&mut g, x, params, None, false, None, None)?;
                g.sum(y)
            }
            Layer::FixedProj(params) => {
                let y = fixed_proj_layer(&mut g, x, params, None, None)?;
                g.sum(y)
            }
        };
        g.backward(loss)?;
        Ok(())
    }
}

fn median_iqr(samples: &mut [f64]) -> (f64, f64) {
    samples.sort_by(f64::total_cmp);
    let q = |f: f64| {
        let pos = f * (samples.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        samples[lo] + (samples[hi] - samples[lo]) * (pos - lo as f64)
    };
    (q(0.5), q(0.75) - q(0.25))
}

fn skipped(mechanism: Mechanism, length: usize) -> BenchRecord {
    BenchRecord {
        mechanism,
        length,
        reps: 0,
        wall_ms_median: 0.0,
        wall_ms_iqr: 0.0,
        peak_elements: 0,
        allocs: 0,
        skipped: true,
    }
}

/// Median and IQR of forward+backward wall time, after `warmup` untimed passes.
pub fn time_scaling(config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    let mut report = BenchReport::new(config);
    for &mechanism in &config.mechanisms {
        for &n in &config.lengths {
            if config.estimate(mechanism, n) > config.memory_budget {
                report.records.push(skipped(mechanism, n));
                continue;
            }
            let bench = Bench::new(config, mechanism, n)?;
            for _ in 0..config.warmup {
                bench.run()?;
            }
            let mut times = Vec::with_capacity(config.reps);
            for _ in 0..config.reps {
                let start = Instant::now();
                bench.run()?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            let (median, iqr) = median_iqr(&mut times);
            report.records.push(BenchRecord {
                mechanism,
                length: n,
                reps: config.reps,
                wall_ms_median: median,
                wall_ms_iqr: iqr,
                peak_elements: 0,
                allocs: 0,
                skipped: false,
            });
        }
    }
    Ok(report)
}

/// Exact peak live elements and allocation count of one forward+backward
/// pass. Parameters and inputs are allocated before counting starts.
pub fn memory_count(config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    let mut report = BenchReport::new(config);
    for &mechanism in &config.mechanisms {
        for &n in &config.lengths {
            if config.estimate(mechanism, n) > config.memory_budget {
                report.records.push(skipped(mechanism, n));
                continue;
            }
            let bench = Bench::new(config, mechanism, n)?;
            let probe = MemoryProbe::start();
            bench.run()?;
            report.records.push(BenchRecord {
                mechanism,
                length: n,
                reps: 1,
                wall_ms_median: 0.0,
                wall_ms_iqr: 0.0,
                peak_elements: probe.peak_elements(),
                allocs: probe.allocations(),
                skipped: false,
            });
        }
    }
    Ok(report)
}

/// Timing and memory in one report.
pub fn run(config: &BenchConfig) -> Result<BenchReport> {
    let mut report = time_scaling(config)?;
    report.merge_memory(&memory_count(config)?);
    Ok(report)
}

/// Least-squares polynomial fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    /// Coefficients from the constant term upward.
    pub coeffs: Vec<f64>,
    /// Largest `|y - fit(x)| / |y|` over the fitted points.
    pub rel_residual: f64,
}

impl Fit {
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

/// Fits a polynomial of the given degree by solving the normal equations.
pub fn poly_fit(points: &[(f64, f64)], degree: usize) -> Result<Fit> {
    let k = degree + 1;
    if points.len() < k {
        return Err(LunaError::Contract(format!(
            "degree-{degree} fit needs at least {k} points, got {}",
            points.len()
        )));
    }
    // scale x to order one so the normal equations stay well conditioned
    let scale = points.iter().map(|p| p.0.abs()).fold(0.0, f64::max).max(1.0);
    let mut a = vec![vec![0.0; k + 1]; k];
    for &(x, y) in points {
        let xs = x / scale;
        let pows: Vec<f64> = (0..k).map(|i| xs.powi(i as i32)).collect();
        for i in 0..k {
            for j in 0..k {
                a[i][j] += pows[i] * pows[j];
            }
            a[i][k] += pows[i] * y;
        }
    }
    for col in 0..k {
        let pivot = (col..k)
            .max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))
            .expect("non-empty range");
        a.swap(col, pivot);
        if a[col][col].abs() < 1e-300 {
            return Err(LunaError::Contract("singular fit: x values are not distinct".into()));
        }
        for r in 0..k {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=k {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let coeffs: Vec<f64> = (0..k).map(|i| a[i][k] / a[i][i] / scale.powi(i as i32)).collect();
    let mut fit = Fit {
        coeffs,
        rel_residual: 0.0,
    };
    fit.rel_residual = points
        .iter()
        .map(|&(x, y)| (y - fit.eval(x)).abs() / y.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    Ok(fit)
}
