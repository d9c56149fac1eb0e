//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Takes several minutes in the test profile.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use common::*;
use luna::attention::{luna_attend, luna_causal, AttentionParams, Tying};
use luna::bench::{self, poly_fit, BenchConfig};
use luna::gradsuite::{run_suite, SUITE_TOL};
use luna::layers::Pooling;
use luna::model::{save_checkpoint, Mechanism, ModelConfig, OptimConfig, TrainConfig, Trainer};
use luna::numerics::{Graph, MemoryProbe, Omega, ParamStore, RngState, Tensor};
use luna::tasks::{majority_label, Example, Label, TaskSpec, FIRST_SYMBOL};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn weights(store: &ParamStore<f64>, p: &AttentionParams) -> (Mat, Mat, Mat) {
    (
        to_mat(store.get(p.wq)),
        to_mat(store.get(p.wk)),
        to_mat(store.get(p.wv)),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let entries = run_suite(1.0).expect("suite runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = entries
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .unwrap();
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
    outcome(
        failed.is_empty() && secs < 60.0,
        format!(
            "{} operations, worst {} at {:.2e} (< {SUITE_TOL:e}), failed {:?}, {secs:.1}s (< 60s)",
            entries.len(),
            worst.name,
            worst.report.max_rel_error,
            failed
        ),
    )
}

fn causal_instance(seed: u64, kind: Omega) -> f64 {
    let rng = RngState::new(seed);
    let mut draw = rng.stream("dims");
    let heads = [1usize, 2][draw.random_range(0..2)];
    let d = heads * draw.random_range(1..5);
    let n = draw.random_range(1..17);
    let l = draw.random_range(1..5);
    let mut store = ParamStore::new();
    let p = AttentionParams::init(&mut store, &rng, "attn", d, heads, Tying::None).unwrap();
    let x = random(&rng, "x", n, d, 1.0);
    let pm = random(&rng, "p", l, d, 1.0);
    let (wq, wk, wv) = weights(&store, &p);
    let name = if kind == Omega::Elu1 { "elu1" } else { "softplus" };
    let oracle = luna_causal_prefix(&to_mat(&x), &to_mat(&pm), &wq, &wk, &wv, heads, name);
    let mut g = Graph::with_params(&store);
    let (xv, pv) = (g.constant(x), g.constant(pm));
    let y = luna_causal(&mut g, xv, pv, &p, kind).unwrap();
    max_diff(&to_mat(g.value(y)), &oracle)
}

fn causal_future_is_invisible(seed: u64) -> bool {
    let rng = RngState::new(seed);
    let (n, d, t) = (12, 8, 5);
    let mut store = ParamStore::new();
    let p = AttentionParams::init(&mut store, &rng, "attn", d, 2, Tying::None).unwrap();
    let x = random(&rng, "x", n, d, 1.0);
    let pm = random(&rng, "p", 4, d, 1.0);
    let mut x2 = x.clone();
    let noise = random(&rng, "noise", n - t, d, 3.0);
    for (dst, src) in x2.data_mut()[t * d..].iter_mut().zip(noise.data()) {
        *dst += src;
    }
    let run = |x: Tensor<f64>, kind| {
        let mut g = Graph::with_params(&store);
        let (xv, pv) = (g.constant(x), g.constant(pm.clone()));
        let y = luna_causal(&mut g, xv, pv, &p, kind).unwrap();
        g.value(y).clone()
    };
    [Omega::Elu1, Omega::Softplus].into_iter().all(|kind| {
        let (a, b) = (run(x.clone(), kind), run(x2.clone(), kind));
        a.data()[..t * d] == b.data()[..t * d] && a.data()[t * d..] != b.data()[t * d..]
    })
}

fn causal_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..25 {
        for kind in [Omega::Elu1, Omega::Softplus] {
            worst = worst.max(causal_instance(7000 + i, kind));
        }
    }
    let invisible = (0..5).all(|s| causal_future_is_invisible(7100 + s));
    outcome(
        worst < 1e-10 && invisible,
        format!("50 instances, max |diff| {worst:.2e} (< 1e-10); future perturbation bit-identical past: {invisible}"),
    )
}

fn nested_instance(seed: u64) -> f64 {
    let rng = RngState::new(seed);
    let mut draw = rng.stream("dims");
    let heads = [1usize, 2][draw.random_range(0..2)];
    let d = heads * draw.random_range(1..5);
    let n = draw.random_range(1..20);
    let m = draw.random_range(1..20);
    let l = draw.random_range(1..6);
    let mut store = ParamStore::new();
    let pp = AttentionParams::init(&mut store, &rng, "pack", d, heads, Tying::None).unwrap();
    let up = AttentionParams::init(&mut store, &rng, "unpack", d, heads, Tying::None).unwrap();
    let x = random(&rng, "x", n, d, 1.0);
    let p = random(&rng, "p", l, d, 1.0);
    let c = random(&rng, "c", m, d, 1.0);
    let (pq, pk, pv) = weights(&store, &pp);
    let (uq, uk, uv) = weights(&store, &up);
    let yp_oracle = attention(&to_mat(&p), &to_mat(&c), &pq, &pk, &pv, heads, None);
    let yx_oracle = attention(&to_mat(&x), &yp_oracle, &uq, &uk, &uv, heads, None);
    let mut g = Graph::with_params(&store);
    let (xv, pvv, cv) = (g.constant(x), g.constant(p), g.constant(c));
    let (yx, yp) = luna_attend(&mut g, xv, pvv, cv, &pp, &up, None).unwrap();
    max_diff(&to_mat(g.value(yx)), &yx_oracle).max(max_diff(&to_mat(g.value(yp)), &yp_oracle))
}

/// Largest allocation and whether any tensor had both an `n` and an `m` extent.
fn nested_allocations(n: usize, m: usize) -> (u64, bool) {
    let rng = RngState::new(7300);
    let (l, d) = (4, 8);
    let mut store = ParamStore::new();
    let pp = AttentionParams::init(&mut store, &rng, "pack", d, 2, Tying::None).unwrap();
    let up = AttentionParams::init(&mut store, &rng, "unpack", d, 2, Tying::None).unwrap();
    let x = random(&rng, "x", n, d, 1.0);
    let p = random(&rng, "p", l, d, 1.0);
    let c = random(&rng, "c", m, d, 1.0);
    let probe = MemoryProbe::start_with_shapes();
    let mut g = Graph::with_params(&store);
    let (xv, pv, cv) = (g.input(x), g.input(p), g.input(c));
    let (yx, yp) = luna_attend(&mut g, xv, pv, cv, &pp, &up, None).unwrap();
    let a = g.sum(yx);
    let b = g.sum(yp);
    let loss = g.add(a, b).unwrap();
    let _grads = g.backward(loss).unwrap();
    let crossed = probe.shapes().iter().any(|s| s.contains(&n) && s.contains(&m));
    (probe.largest_allocation(), crossed)
}

fn nested_equivalence() -> Outcome {
    let worst = (0..50).map(|i| nested_instance(7200 + i)).fold(0.0, f64::max);
    let (n, m) = (53, 61);
    let (largest, crossed) = nested_allocations(n, m);
    let pass = worst < 1e-12 && !crossed && largest < (n * m) as u64;
    outcome(
        pass,
        format!(
            "50 instances, max |diff| {worst:.2e} (< 1e-12); n={n} m={m}: largest allocation {largest} elements, n x m tensor seen: {crossed}"
        ),
    )
}

fn complexity_scaling() -> Outcome {
    let start = Instant::now();
    let report = bench::run(&BenchConfig::default()).expect("bench runs");
    let peak = |mech| report.series(mech, |r| r.peak_elements as f64);
    let luna_lin = poly_fit(&peak(Mechanism::Luna), 1).unwrap().rel_residual;
    let full_lin = poly_fit(&peak(Mechanism::Full), 1).unwrap().rel_residual;
    let full_quad = poly_fit(&peak(Mechanism::Full), 2).unwrap().rel_residual;
    let luna = report.get(Mechanism::Luna, 4096).unwrap();
    let full = report.get(Mechanism::Full, 4096).unwrap();
    let ratio = luna.peak_elements as f64 / full.peak_elements as f64;
    let speedup = full.wall_ms_median / luna.wall_ms_median;
    let secs = start.elapsed().as_secs_f64();
    for mech in [Mechanism::Luna, Mechanism::Full] {
        let t = |n| report.get(mech, n).unwrap().wall_ms_median;
        println!(
            "     info: {mech} time t(2048)/t(512) = {:.2}, t(4096)/t(1024) = {:.2}",
            t(2048) / t(512),
            t(4096) / t(1024)
        );
    }
    let pass = luna_lin < 0.05 && full_lin >= 0.05 && full_quad < 0.05 && ratio <= 0.20 && speedup >= 3.0 && secs < 600.0;
    outcome(
        pass,
        format!(
            "peak fit residual: luna linear {:.2}% (< 5%), full linear {:.1}% / quadratic {:.2}%; peak ratio at 4096 {ratio:.3} (<= 0.20); speedup {speedup:.1}x (>= 3x); {secs:.0}s",
            100.0 * luna_lin,
            100.0 * full_lin,
            100.0 * full_quad
        ),
    )
}

struct RunResult {
    accuracy: f64,
    secs: f64,
}

fn train(task: TaskSpec, model: ModelConfig, optim: OptimConfig, config: TrainConfig) -> RunResult {
    let start = Instant::now();
    let mut t = Trainer::<f32>::new(model, optim, task, config).expect("valid config");
    let last = t.run(|_| Ok(()), |_| Ok(())).expect("training runs");
    RunResult {
        accuracy: last.accuracy,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn majority_run(mechanism: Mechanism) -> RunResult {
    let task = TaskSpec {
        val_size: 1000,
        ..TaskSpec::majority(129, 11)
    };
    let model = ModelConfig {
        mechanism,
        d: 32,
        d_hidden: 64,
        n_max: 130,
        vocab: task.vocab(),
        classes: 2,
        dropout_attn: 0.0,
        dropout_hidden: 0.0,
        dropout_residual: 0.0,
        seed: 11,
        ..ModelConfig::default()
    };
    let optim = OptimConfig {
        lr: 2e-3,
        warmup_steps: 30,
        total_steps: 300,
        ..OptimConfig::default()
    };
    let config = TrainConfig {
        steps: 300,
        batch_size: 16,
        eval_every: 0,
        eval_size: 1000,
    };
    train(task, model, optim, config)
}

fn listops_task() -> TaskSpec {
    TaskSpec {
        val_size: 2000,
        ..TaskSpec::listops(3, 128, 0)
    }
}

fn listops_run(mechanism: Mechanism, pooling: Pooling) -> RunResult {
    let task = listops_task();
    let model = ModelConfig {
        mechanism,
        pooling,
        d: 64,
        d_hidden: 128,
        heads: 2,
        l: 16,
        layers: 2,
        n_max: 129,
        vocab: task.vocab(),
        classes: task.classes().unwrap(),
        dropout_attn: 0.0,
        dropout_hidden: 0.0,
        dropout_residual: 0.0,
        seed: 0,
        ..ModelConfig::default()
    };
    let optim = OptimConfig {
        lr: 1e-3,
        warmup_steps: 1200,
        total_steps: 12000,
        ..OptimConfig::default()
    };
    let config = TrainConfig {
        steps: 12000,
        batch_size: 16,
        eval_every: 0,
        eval_size: 2000,
    };
    train(task, model, optim, config)
}

fn pct(x: f64) -> f64 {
    100.0 * x
}

fn trainability(listops_luna: &RunResult, listops_full: &RunResult) -> Outcome {
    let maj_luna = majority_run(Mechanism::Luna);
    let maj_full = majority_run(Mechanism::Full);
    let runs = [&maj_luna, &maj_full, listops_luna, listops_full];
    let slowest = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
    let pass = maj_luna.accuracy > 0.95
        && maj_full.accuracy > 0.95
        && listops_luna.accuracy > 0.60
        && listops_full.accuracy > 0.60
        && maj_luna.accuracy >= maj_full.accuracy - 0.02
        && listops_luna.accuracy >= listops_full.accuracy - 0.02
        && slowest < 600.0;
    outcome(
        pass,
        format!(
            "majority luna {:.1}% full {:.1}% (> 95%); listops luna {:.1}% full {:.1}% (> 60%); luna within 2 points of full; slowest run {slowest:.0}s (< 600s)",
            pct(maj_luna.accuracy),
            pct(maj_full.accuracy),
            pct(listops_luna.accuracy),
            pct(listops_full.accuracy)
        ),
    )
}

fn pooling_study(cls: &RunResult) -> Outcome {
    let p_mean = listops_run(Mechanism::Luna, Pooling::PMean);
    let diff = pct(p_mean.accuracy - cls.accuracy);
    let trained = cls.accuracy > 0.60 && p_mean.accuracy > 0.60;
    outcome(
        trained && diff.abs() <= 2.0,
        format!(
            "listops cls {:.1}%, p_mean {:.1}%, paired difference {diff:+.2} points (within +-2)",
            pct(cls.accuracy),
            pct(p_mean.accuracy)
        ),
    )
}

fn variable_length() -> Outcome {
    let model = ModelConfig {
        n_max: 1025,
        dropout_attn: 0.0,
        dropout_hidden: 0.0,
        dropout_residual: 0.0,
        ..ModelConfig::default()
    };
    let mut t = Trainer::<f32>::new(
        model,
        OptimConfig::default(),
        TaskSpec::majority(37, 0),
        TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let params = t.model.param_count();
    let mut notes = Vec::new();
    let mut ok = true;
    for n in [37, 129, 1024] {
        let batch: Vec<_> = (0..2).map(|i| bit_example(n, i)).collect();
        match t.train_step(&batch) {
            Ok(m) => {
                let h = t.model.encode(&batch[0].tokens).unwrap().0;
                ok &= m.loss.is_finite() && h.shape()[0] == n;
                notes.push(format!("n={n} loss {:.3}", m.loss));
            }
            Err(e) => {
                ok = false;
                notes.push(format!("n={n} error {e}"));
            }
        }
    }
    ok &= t.model.param_count() == params;
    outcome(ok, format!("one model instance: {}; parameter count unchanged", notes.join(", ")))
}

/// Majority-style example of any length (the generator itself only emits odd lengths).
fn bit_example(n: usize, index: u64) -> Example {
    let rng = RngState::new(7400 + index);
    let mut r = rng.stream("bits");
    let bits: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
    Example {
        tokens: bits.iter().map(|b| FIRST_SYMBOL + b).collect(),
        label: Label::Class(majority_label(&bits)),
    }
}

fn seeded_checkpoint(dir: &Path) {
    let task = TaskSpec::listops(3, 64, 5);
    let model = ModelConfig {
        d: 16,
        d_hidden: 32,
        l: 4,
        n_max: 65,
        vocab: task.vocab(),
        classes: task.classes().unwrap(),
        seed: 5,
        ..ModelConfig::default()
    };
    let optim = OptimConfig {
        warmup_steps: 5,
        total_steps: 25,
        ..OptimConfig::default()
    };
    let config = TrainConfig {
        steps: 25,
        batch_size: 4,
        eval_every: 0,
        eval_size: 16,
    };
    let mut t = Trainer::<f32>::new(model, optim, task, config).unwrap();
    t.run(|_| Ok(()), |_| Ok(())).unwrap();
    save_checkpoint(dir, &t.model, &t.optimizer).unwrap();
}

/// Relative paths of every file under `dir`, sorted.
fn files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    seeded_checkpoint(&a);
    seeded_checkpoint(&b);
    let names = files(&a);
    let mut bytes = 0;
    let mut identical = !names.is_empty() && files(&b) == names;
    for name in &names {
        let x = fs::read(a.join(name)).unwrap();
        bytes += x.len();
        identical &= fs::read(b.join(name)).ok().as_deref() == Some(x.as_slice());
    }
    outcome(
        identical,
        format!("two seeded runs with dropout, {} files / {bytes} bytes compared, identical: {identical}", names.len()),
    )
}

fn report(index: usize, name: &str, o: &Outcome) -> bool {
    println!("{} {index}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

/// Runs every criterion, or only those whose numbers are given as arguments.
fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |i: usize| selected.is_empty() || selected.contains(&i);
    let start = Instant::now();
    let mut results = Vec::new();
    let mut check = |i: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if want(i) {
            results.push(report(i, name, &f()));
        }
    };
    check(1, "gradient suite", &mut gradient_suite);
    check(2, "causal correctness", &mut causal_correctness);
    check(3, "nested attention equivalence", &mut nested_equivalence);
    check(4, "complexity scaling", &mut complexity_scaling);
    let listops_luna = (want(5) || want(6)).then(|| listops_run(Mechanism::Luna, Pooling::Cls));
    check(5, "trainability", &mut || {
        let full = listops_run(Mechanism::Full, Pooling::Cls);
        trainability(listops_luna.as_ref().unwrap(), &full)
    });
    check(6, "pooling study", &mut || pooling_study(listops_luna.as_ref().unwrap()));
    check(7, "variable length", &mut variable_length);
    check(8, "determinism", &mut determinism);
    let passed = results.iter().filter(|&&p| p).count();
    println!(
        "acceptance: {passed}/{} passed in {:.0}s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if passed != results.len() {
        std::process::exit(1);
    }
}
