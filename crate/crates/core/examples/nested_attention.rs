//! Packs a long context into a few rows, unpacks it at the query length and
//! shows that no query-by-context matrix is ever allocated.
//!
//! cargo run --release --example nested_attention

use luna::attention::{attend, luna_attend, AttentionParams, Tying};
use luna::numerics::{Graph, MemoryProbe, ParamStore, RngState};

fn main() -> luna::Result<()> {
    let (n, m, l, d, heads) = (300, 500, 8, 32, 4);
    let rng = RngState::new(3);
    let mut store = ParamStore::<f64>::new();
    let pack = AttentionParams::init(&mut store, &rng, "pack", d, heads, Tying::None)?;
    let unpack = AttentionParams::init(&mut store, &rng, "unpack", d, heads, Tying::None)?;
    let x = rng.normal("x", &[n, d], 1.0);
    let p = rng.normal("p", &[l, d], 1.0);
    let c = rng.normal("c", &[m, d], 1.0);

    let probe = MemoryProbe::start();
    let mut g = Graph::with_params(&store);
    let (xv, pv, cv) = (g.input(x.clone()), g.input(p), g.input(c.clone()));
    let (yx, yp) = luna_attend(&mut g, xv, pv, cv, &pack, &unpack, None)?;
    println!("Y_X {:?}  Y_P {:?}", g.shape(yx), g.shape(yp));
    let loss = g.sum(yx);
    g.backward(loss)?;
    println!(
        "nested: largest allocation {} elements, peak {} (n*m = {})",
        probe.largest_allocation(),
        probe.peak_elements(),
        n * m
    );
    drop(probe);

    let probe = MemoryProbe::start();
    let mut g = Graph::with_params(&store);
    let (xv, cv) = (g.input(x), g.input(c));
    let y = attend(&mut g, xv, cv, &pack, None)?;
    let loss = g.sum(y);
    g.backward(loss)?;
    println!(
        "full:   largest allocation {} elements, peak {}",
        probe.largest_allocation(),
        probe.peak_elements()
    );
    Ok(())
}
