//! The full finite-difference gradient suite, one entry per differentiable
//! operation, all at f64.

use crate::attention::{self, AttentionParams, AttnMask, Tying};
use crate::error::Result;
use crate::layers::{
    self, EncoderMemory, FfnParams, LayerNormParams, LunaDecoderLayerParams, LunaLayerParams, TransformerLayerParams,
};
use crate::model::{Mode, Model, ModelConfig};
use crate::numerics::{GradCheck, GradCheckReport, Graph, Omega, ParamStore, RngState, Tensor, Var};
use crate::tasks::{Example, Label};

/// Largest relative error any entry may report.
pub const SUITE_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < SUITE_TOL
    }
}

type LossFn<'a> = Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var> + 'a>;

struct Case<'a> {
    name: String,
    eps: f64,
    inputs: Vec<Tensor<f64>>,
    store: ParamStore<f64>,
    loss: LossFn<'a>,
}

/// `sum(y * R)` for a fixed random `R`, so every output element contributes
/// with a distinct weight.
fn project(g: &mut Graph<'_, f64>, y: Var, key: &str) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let r = RngState::new(7).normal(&format!("proj/{key}"), &shape, 1.0);
    let r = g.constant(r);
    let m = g.mul(y, r)?;
    Ok(g.sum(m))
}

fn inputs(seed: u64, shapes: &[(usize, usize)], scale: f64) -> Vec<Tensor<f64>> {
    let rng = RngState::new(seed);
    shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| rng.normal(&format!("in{i}"), &[r, c], scale))
        .collect()
}

fn attn_store(d: usize, heads: usize, tying: Tying) -> Result<(ParamStore<f64>, AttentionParams, AttentionParams)> {
    let mut store = ParamStore::new();
    let rng = RngState::new(101);
    let a = AttentionParams::init(&mut store, &rng, "pack", d, heads, tying)?;
    let b = AttentionParams::init(&mut store, &rng, "unpack", d, heads, tying)?;
    Ok((store, a, b))
}

/// Randomizes layer-norm gains and biases so they are not at their identity init.
fn scramble(store: &mut ParamStore<f64>, std: f64) {
    let rng = RngState::new(303);
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let t = store.get_mut(id);
        let noise: Tensor<f64> = rng.normal(&name, t.shape(), std);
        for (w, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *w += n;
        }
    }
}

fn cases() -> Result<Vec<Case<'static>>> {
    let mut out = Vec::new();
    let d = 4;

    for (heads, tying) in [(1, Tying::None), (2, Tying::TieQk), (2, Tying::TieKv)] {
        let (store, a, _) = attn_store(d, heads, tying)?;
        let mask = AttnMask::new(vec![true, false, true, true, true])?;
        out.push(Case {
            name: format!("attend h={heads} {tying:?}"),
            eps: 1e-6,
            inputs: inputs(1, &[(3, d), (5, d)], 1.0),
            store,
            loss: Box::new(move |g, v| {
                let y = attention::attend(g, v[0], v[1], &a, Some(&mask))?;
                project(g, y, "attend")
            }),
        });
    }
    {
        let (store, a, _) = attn_store(d, 2, Tying::None)?;
        out.push(Case {
            name: "attend causal".into(),
            eps: 1e-6,
            inputs: inputs(2, &[(5, d)], 1.0),
            store,
            loss: Box::new(move |g, v| {
                let y = attention::attend_causal(g, v[0], &a, None)?;
                project(g, y, "attend_causal")
            }),
        });
    }
    {
        let (store, a, _) = attn_store(d, 2, Tying::None)?;
        let mask = AttnMask::new(vec![true, true, true, false, true, true])?;
        out.push(Case {
            name: "pack".into(),
            eps: 1e-6,
            inputs: inputs(3, &[(2, d), (6, d)], 1.0),
            store,
            loss: Box::new(move |g, v| {
                let y = attention::pack(g, v[0], v[1], &a, Some(&mask))?;
                project(g, y, "pack")
            }),
        });
    }
    {
        let (store, _, b) = attn_store(d, 2, Tying::None)?;
        out.push(Case {
            name: "unpack".into(),
            eps: 1e-6,
            inputs: inputs(4, &[(6, d), (2, d)], 1.0),
            store,
            loss: Box::new(move |g, v| {
                let y = attention::unpack(g, v[0], v[1], &b)?;
                project(g, y, "unpack")
            }),
        });
    }
    for tying in [Tying::None, Tying::TieQk] {
        let (store, a, b) = attn_store(d, 2, tying)?;
        let mask = AttnMask::new(vec![true, true, false, true, true, false])?;
        // the packed state's gradients are small; a wider step keeps them above roundoff
        out.push(Case {
            name: format!("luna_attend {tying:?}"),
            eps: 1e-5,
            inputs: inputs(5, &[(5, d), (3, d), (6, d)], 2.5),
            store,
            loss: Box::new(move |g, v| {
                let (yx, yp) = attention::luna_attend(g, v[0], v[1], v[2], &a, &b, Some(&mask))?;
                let s = project(g, yx, "luna_x")?;
                let t = project(g, yp, "luna_p")?;
                g.add(s, t)
            }),
        });
    }
    out.push(Case {
        name: "causal_f".into(),
        eps: 1e-6,
        inputs: inputs(6, &[(6, 3), (6, 3), (6, 2)], 1.0),
        store: ParamStore::new(),
        loss: Box::new(|g, v| {
            let y = attention::causal_f(g, v[0], v[1], v[2])?;
            project(g, y, "causal_f")
        }),
    });
    for kind in [Omega::Elu1, Omega::Softplus] {
        let (store, a, _) = attn_store(d, 2, Tying::None)?;
        out.push(Case {
            name: format!("luna_causal {kind}"),
            eps: 1e-6,
            inputs: inputs(7, &[(6, d), (3, d)], 1.0),
            store,
            loss: Box::new(move |g, v| {
                let y = attention::luna_causal(g, v[0], v[1], &a, kind)?;
                project(g, y, "luna_causal")
            }),
        });
    }
    {
        let mut store = ParamStore::new();
        let f = FfnParams::init(&mut store, &RngState::new(8), "ffn", d, 6)?;
        scramble(&mut store, 0.3);
        out.push(Case {
            name: "ffn".into(),
            eps: 1e-6,
            inputs: inputs(9, &[(4, d)], 1.0),
            store,
            loss: Box::new(move |g, v| {
                let y = layers::ffn(g, v[0], &f)?;
                project(g, y, "ffn")
            }),
        });
    }
    {
        let mut store = ParamStore::new();
        let ln = LayerNormParams::init(&mut store, "ln", 5)?;
        scramble(&mut store, 0.3);
        out.push(Case {
            name: "layer_norm".into(),
            eps: 1e-5,
            inputs: inputs(10, &[(3, 5)], 1.0),
            store,
            loss: Box::new(move |g, v| {
                let y = ln.apply(g, v[0])?;
                project(g, y, "layer_norm")
            }),
        });
    }
    {
        let mut store = ParamStore::new();
        let p = LunaLayerParams::init(&mut store, &RngState::new(11), "enc", d, 8, 2, Tying::None)?;
        scramble(&mut store, 0.3);
        let mask = AttnMask::new(vec![true, true, true, true, false])?;
        out.push(Case {
            name: "luna_encoder_layer".into(),
            eps: 1e-5,
            inputs: inputs(12, &[(5, d), (2, d)], 1.0),
            store,
            loss: Box::new(move |g, v| {
                let (x, pp) = layers::luna_encoder_layer(g, v[0], v[1], &p, Some(&mask))?;
                let s = project(g, x, "enc_x")?;
                let t = project(g, pp, "enc_p")?;
                g.add(s, t)
            }),
        });
    }
    {
        let mut store = ParamStore::new();
        let p = LunaDecoderLayerParams::init(&mut store, &RngState::new(13), "dec", d, 8, 2, 3, Tying::None, false)?;
        scramble(&mut store, 1.0);
        let pid = p.p.expect("decoder-only layer owns P");
        out.push(Case {
            name: "luna_decoder_layer".into(),
            eps: 1e-5,
            inputs: inputs(14, &[(5, d)], 1.0),
            store,
            loss: Box::new(move |g, v| {
                let pv = g.param(pid);
                let (x, _) = layers::luna_decoder_layer(g, v[0], pv, None, &p, Omega::Softplus)?;
                project(g, x, "dec")
            }),
        });
    }
    {
        let mut store = ParamStore::new();
        let p = LunaDecoderLayerParams::init(&mut store, &RngState::new(15), "dec", d, 8, 2, 2, Tying::None, true)?;
        scramble(&mut store, 0.3);
        let mask = AttnMask::new(vec![true, true, true, false])?;
        out.push(Case {
            name: "luna_decoder_layer cross".into(),
            eps: 1e-5,
            inputs: inputs(16, &[(3, d), (2, d), (4, d)], 1.0),
            store,
            loss: Box::new(move |g, v| {
                let mem = EncoderMemory {
                    states: v[2],
                    mask: Some(&mask),
                };
                let (x, pp) = layers::luna_decoder_layer(g, v[0], v[1], Some(mem), &p, Omega::Elu1)?;
                let s = project(g, x, "cross_x")?;
                let t = project(g, pp, "cross_p")?;
                g.add(s, t)
            }),
        });
    }
    for causal in [false, true] {
        let mut store = ParamStore::new();
        let p = TransformerLayerParams::init(&mut store, &RngState::new(17), "tr", d, 8, 2, Tying::None, false)?;
        scramble(&mut store, 0.3);
        out.push(Case {
            name: format!("transformer_layer causal={causal}"),
            eps: 1e-5,
            inputs: inputs(18, &[(4, d)], 1.0),
            store,
            loss: Box::new(move |g, v| {
                let x = layers::transformer_layer(g, v[0], &p, None, causal, None, None)?;
                project(g, x, "tr")
            }),
        });
    }
    out.push(Case {
        name: "cross_entropy".into(),
        eps: 1e-5,
        inputs: inputs(19, &[(4, 5)], 2.0),
        store: ParamStore::new(),
        loss: Box::new(|g, v| g.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)])),
    });
    for (mode, label) in [
        (Mode::EncoderClassifier, Label::Class(1)),
        (Mode::DecoderLm, Label::Sequence(vec![5, 4, 6])),
        (Mode::Seq2seq, Label::Sequence(vec![5, 4, 6])),
    ] {
        let config = ModelConfig {
            mode,
            d,
            d_hidden: 8,
            heads: 2,
            l: 4,
            layers: 1,
            vocab: 7,
            classes: 3,
            n_max: 16,
            dropout_attn: 0.0,
            dropout_hidden: 0.0,
            dropout_residual: 0.0,
            seed: 21,
            ..ModelConfig::default()
        };
        let mut model = Model::<f64>::new(config)?;
        scramble(model.store_mut(), 0.7);
        let example = Example {
            tokens: vec![3, 6, 4, 5, 3, 6],
            label,
        };
        let row = model.assemble(std::slice::from_ref(&example))?.remove(0);
        let store = model.store().clone();
        out.push(Case {
            name: format!("model loss {mode:?}"),
            eps: 1e-5,
            inputs: Vec::new(),
            store,
            loss: Box::new(move |g, _| model.row_loss(g, &row, None)),
        });
    }
    Ok(out)
}

/// Runs every entry. `analytic_scale` other than 1.0 corrupts the analytic
/// side of each comparison and should make every entry fail.
pub fn run_suite(analytic_scale: f64) -> Result<Vec<SuiteEntry>> {
    cases()?
        .into_iter()
        .map(|case| {
            let check = GradCheck {
                eps: case.eps,
                analytic_scale,
            };
            let report = check.run(&case.inputs, Some(&case.store), &case.loss)?;
            Ok(SuiteEntry {
                name: case.name,
                report,
            })
        })
        .collect()
}
