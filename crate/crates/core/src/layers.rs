//! Encoder/decoder layers, feed-forward blocks, embeddings and pooling heads.
//!
//! Every layer uses post-LN residuals: `LN(sublayer(x) + x)`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionParams, AttnMask, Tying};
use crate::error::{LunaError, Result};
use crate::numerics::{
    Dropout, Graph, Omega, ParamId, ParamStore, RngState, Scalar, Tensor, Var, LAYER_NORM_EPS,
};

/// Standard deviation of the normal init used for position tables and `P`.
pub const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[d], T::one()))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Position-wise feed-forward block `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d: usize,
    pub d_hidden: usize,
}

impl FfnParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &RngState,
        prefix: &str,
        d: usize,
        d_hidden: usize,
    ) -> Result<Self> {
        if d_hidden < d {
            return Err(LunaError::Config(format!(
                "ffn hidden width {d_hidden} must be at least the model width {d}"
            )));
        }
        let w1 = format!("{prefix}.w1");
        let w2 = format!("{prefix}.w2");
        Ok(FfnParams {
            w1: store.add(w1.clone(), rng.xavier_uniform(&w1, &[d, d_hidden]))?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[d_hidden]))?,
            w2: store.add(w2.clone(), rng.xavier_uniform(&w2, &[d_hidden, d]))?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d]))?,
            d,
            d_hidden,
        })
    }
}

pub fn ffn<T: Scalar>(g: &mut Graph<'_, T>, x: Var, params: &FfnParams) -> Result<Var> {
    ffn_with(g, x, params, None)
}

fn ffn_with<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    params: &FfnParams,
    dropout: Option<&Dropout<'_>>,
) -> Result<Var> {
    let w1 = g.param(params.w1);
    let b1 = g.param(params.b1);
    let w2 = g.param(params.w2);
    let b2 = g.param(params.b2);
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let mut h = g.relu(h);
    if let Some(d) = dropout {
        h = d.apply(g, h, d.hidden, "ffn_hidden")?;
    }
    let out = g.matmul(h, w2)?;
    g.add_row(out, b2)
}

fn residual_norm<T: Scalar>(
    g: &mut Graph<'_, T>,
    branch: Var,
    skip: Var,
    ln: &LayerNormParams,
    dropout: Option<&Dropout<'_>>,
    site: &str,
) -> Result<Var> {
    let branch = match dropout {
        Some(d) => d.apply(g, branch, d.residual, site)?,
        None => branch,
    };
    let sum = g.add(branch, skip)?;
    ln.apply(g, sum)
}

/// One Luna encoder layer: nested attention, two post-LN residuals, FFN on the X path only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LunaLayerParams {
    pub pack: AttentionParams,
    pub unpack: AttentionParams,
    pub ffn: FfnParams,
    pub ln_x_attn: LayerNormParams,
    pub ln_p_attn: LayerNormParams,
    pub ln_ffn: LayerNormParams,
}

impl LunaLayerParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &RngState,
        prefix: &str,
        d: usize,
        d_hidden: usize,
        heads: usize,
        tying: Tying,
    ) -> Result<Self> {
        Ok(LunaLayerParams {
            pack: AttentionParams::init(store, rng, &format!("{prefix}.pack"), d, heads, tying)?,
            unpack: AttentionParams::init(store, rng, &format!("{prefix}.unpack"), d, heads, tying)?,
            ffn: FfnParams::init(store, rng, &format!("{prefix}.ffn"), d, d_hidden)?,
            ln_x_attn: LayerNormParams::init(store, &format!("{prefix}.ln_x_attn"), d)?,
            ln_p_attn: LayerNormParams::init(store, &format!("{prefix}.ln_p_attn"), d)?,
            ln_ffn: LayerNormParams::init(store, &format!("{prefix}.ln_ffn"), d)?,
        })
    }
}

/// Self-attention Luna layer (context = `x`). Returns `(X', P')`.
pub fn luna_encoder_layer<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    p: Var,
    params: &LunaLayerParams,
    mask: Option<&AttnMask>,
) -> Result<(Var, Var)> {
    luna_encoder_layer_with(g, x, p, params, mask, None)
}

pub(crate) fn luna_encoder_layer_with<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    p: Var,
    params: &LunaLayerParams,
    mask: Option<&AttnMask>,
    dropout: Option<&Dropout<'_>>,
) -> Result<(Var, Var)> {
    let (yx, yp) = attention::luna_attend_with(g, x, p, x, &params.pack, &params.unpack, mask, dropout)?;
    let xa = residual_norm(g, yx, x, &params.ln_x_attn, dropout, "res_x_attn")?;
    let pa = residual_norm(g, yp, p, &params.ln_p_attn, dropout, "res_p_attn")?;
    let h = ffn_with(g, xa, &params.ffn, dropout)?;
    let x_out = residual_norm(g, h, xa, &params.ln_ffn, dropout, "res_ffn")?;
    Ok((x_out, pa))
}

/// Luna cross-attention sublayer of a decoder layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossParams {
    pub pack: AttentionParams,
    pub unpack: AttentionParams,
    pub ln_x: LayerNormParams,
    pub ln_p: LayerNormParams,
}

/// Causal Luna decoder layer. `cross` is present only in encoder-decoder mode;
/// `p` is present only in decoder-only mode, where it is the layer's own `P`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LunaDecoderLayerParams {
    pub self_attn: AttentionParams,
    pub ln_self: LayerNormParams,
    pub cross: Option<CrossParams>,
    pub ffn: FfnParams,
    pub ln_ffn: LayerNormParams,
    pub p: Option<ParamId>,
}

impl LunaDecoderLayerParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &RngState,
        prefix: &str,
        d: usize,
        d_hidden: usize,
        heads: usize,
        l: usize,
        tying: Tying,
        with_cross: bool,
    ) -> Result<Self> {
        let cross = if with_cross {
            Some(CrossParams {
                pack: AttentionParams::init(store, rng, &format!("{prefix}.cross.pack"), d, heads, tying)?,
                unpack: AttentionParams::init(store, rng, &format!("{prefix}.cross.unpack"), d, heads, tying)?,
                ln_x: LayerNormParams::init(store, &format!("{prefix}.cross.ln_x"), d)?,
                ln_p: LayerNormParams::init(store, &format!("{prefix}.cross.ln_p"), d)?,
            })
        } else {
            None
        };
        let p = if with_cross {
            None
        } else {
            let key = format!("{prefix}.p");
            Some(store.add(key.clone(), rng.normal(&key, &[l, d], EMBED_STD))?)
        };
        Ok(LunaDecoderLayerParams {
            self_attn: AttentionParams::init(store, rng, &format!("{prefix}.self"), d, heads, tying)?,
            ln_self: LayerNormParams::init(store, &format!("{prefix}.ln_self"), d)?,
            cross,
            ffn: FfnParams::init(store, rng, &format!("{prefix}.ffn"), d, d_hidden)?,
            ln_ffn: LayerNormParams::init(store, &format!("{prefix}.ln_ffn"), d)?,
            p,
        })
    }
}

/// Encoder memory consumed by a decoder's cross-attention.
#[derive(Debug, Clone, Copy)]
pub struct EncoderMemory<'m> {
    pub states: Var,
    pub mask: Option<&'m AttnMask>,
}

/// Causal self-attention, optional Luna cross-attention that updates `P`, then FFN.
pub fn luna_decoder_layer<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    p: Var,
    enc_mem: Option<EncoderMemory<'_>>,
    params: &LunaDecoderLayerParams,
    pack_omega: Omega,
) -> Result<(Var, Var)> {
    luna_decoder_layer_with(g, x, p, enc_mem, params, pack_omega, None)
}

pub(crate) fn luna_decoder_layer_with<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    p: Var,
    enc_mem: Option<EncoderMemory<'_>>,
    params: &LunaDecoderLayerParams,
    pack_omega: Omega,
    dropout: Option<&Dropout<'_>>,
) -> Result<(Var, Var)> {
    let self_drop = dropout.map(|d| d.child("self"));
    let y = attention::luna_causal_with(g, x, p, &params.self_attn, pack_omega, self_drop.as_ref())?;
    let mut h = residual_norm(g, y, x, &params.ln_self, dropout, "res_self")?;
    let mut p_out = p;
    match (&params.cross, enc_mem) {
        (Some(cross), Some(mem)) => {
            let cross_drop = dropout.map(|d| d.child("cross"));
            let (yx, yp) = attention::luna_attend_with(
                g,
                h,
                p,
                mem.states,
                &cross.pack,
                &cross.unpack,
                mem.mask,
                cross_drop.as_ref(),
            )?;
            h = residual_norm(g, yx, h, &cross.ln_x, dropout, "res_cross_x")?;
            p_out = residual_norm(g, yp, p, &cross.ln_p, dropout, "res_cross_p")?;
        }
        (None, Some(_)) => {
            return Err(LunaError::Config(
                "decoder-only layer was given encoder memory".into(),
            ));
        }
        (Some(_), None) => {
            return Err(LunaError::Config(
                "encoder-decoder layer needs encoder memory".into(),
            ));
        }
        (None, None) => {}
    }
    let f = ffn_with(g, h, &params.ffn, dropout)?;
    let x_out = residual_norm(g, f, h, &params.ln_ffn, dropout, "res_ffn")?;
    Ok((x_out, p_out))
}

/// Post-LN softmax-attention layer, the full-attention baseline.
/// `cross` is used by encoder-decoder decoders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformerLayerParams {
    pub attn: AttentionParams,
    pub ln_attn: LayerNormParams,
    pub cross: Option<(AttentionParams, LayerNormParams)>,
    pub ffn: FfnParams,
    pub ln_ffn: LayerNormParams,
}

impl TransformerLayerParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &RngState,
        prefix: &str,
        d: usize,
        d_hidden: usize,
        heads: usize,
        tying: Tying,
        with_cross: bool,
    ) -> Result<Self> {
        let cross = if with_cross {
            Some((
                AttentionParams::init(store, rng, &format!("{prefix}.cross"), d, heads, tying)?,
                LayerNormParams::init(store, &format!("{prefix}.ln_cross"), d)?,
            ))
        } else {
            None
        };
        Ok(TransformerLayerParams {
            attn: AttentionParams::init(store, rng, &format!("{prefix}.attn"), d, heads, tying)?,
            ln_attn: LayerNormParams::init(store, &format!("{prefix}.ln_attn"), d)?,
            cross,
            ffn: FfnParams::init(store, rng, &format!("{prefix}.ffn"), d, d_hidden)?,
            ln_ffn: LayerNormParams::init(store, &format!("{prefix}.ln_ffn"), d)?,
        })
    }
}

/// `X_A = LN(attn(X, X) + X); X' = LN(FFN(X_A) + X_A)`, optionally causal.
pub fn transformer_layer<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    params: &TransformerLayerParams,
    mask: Option<&AttnMask>,
    causal: bool,
    enc_mem: Option<EncoderMemory<'_>>,
    dropout: Option<&Dropout<'_>>,
) -> Result<Var> {
    let self_drop = dropout.map(|d| d.child("self"));
    let y = attention::attend_with(g, x, x, &params.attn, mask, causal, self_drop.as_ref())?;
    let mut h = residual_norm(g, y, x, &params.ln_attn, dropout, "res_attn")?;
    match (&params.cross, enc_mem) {
        (Some((cross, ln)), Some(mem)) => {
            let cross_drop = dropout.map(|d| d.child("cross"));
            let y = attention::attend_with(g, h, mem.states, cross, mem.mask, false, cross_drop.as_ref())?;
            h = residual_norm(g, y, h, ln, dropout, "res_cross")?;
        }
        (None, None) => {}
        _ => {
            return Err(LunaError::Config(
                "cross-attention parameters and encoder memory must be supplied together".into(),
            ));
        }
    }
    let f = ffn_with(g, h, &params.ffn, dropout)?;
    residual_norm(g, f, h, &params.ln_ffn, dropout, "res_ffn")
}

/// Softmax attention over a context compressed by a learned `l x n_max`
/// projection (only the first `m` columns are used). Benchmark comparator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedProjLayerParams {
    pub attn: AttentionParams,
    pub proj: ParamId,
    pub ln_attn: LayerNormParams,
    pub ffn: FfnParams,
    pub ln_ffn: LayerNormParams,
}

impl FixedProjLayerParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &RngState,
        prefix: &str,
        d: usize,
        d_hidden: usize,
        heads: usize,
        l: usize,
        n_max: usize,
        tying: Tying,
    ) -> Result<Self> {
        let key = format!("{prefix}.proj");
        Ok(FixedProjLayerParams {
            attn: AttentionParams::init(store, rng, &format!("{prefix}.attn"), d, heads, tying)?,
            proj: store.add(key.clone(), rng.xavier_uniform(&key, &[l, n_max]))?,
            ln_attn: LayerNormParams::init(store, &format!("{prefix}.ln_attn"), d)?,
            ffn: FfnParams::init(store, rng, &format!("{prefix}.ffn"), d, d_hidden)?,
            ln_ffn: LayerNormParams::init(store, &format!("{prefix}.ln_ffn"), d)?,
        })
    }
}

pub fn fixed_proj_layer<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    params: &FixedProjLayerParams,
    mask: Option<&AttnMask>,
    dropout: Option<&Dropout<'_>>,
) -> Result<Var> {
    let m = g.shape(x)[0];
    let e = g.param(params.proj);
    let n_max = g.shape(e)[1];
    if m > n_max {
        return Err(LunaError::Input(format!(
            "fixed projection covers {n_max} positions, got {m}"
        )));
    }
    let e = if m == n_max { e } else { g.slice_cols(e, 0, m)? };
    let context = match mask {
        Some(mask) => {
            let d = g.shape(x)[1];
            let keep: Vec<f64> = mask
                .keep()
                .iter()
                .flat_map(|&k| std::iter::repeat_n(if k { 1.0 } else { 0.0 }, d))
                .collect();
            let keep = g.constant(Tensor::from_f64(&[m, d], &keep)?);
            g.mul(x, keep)?
        }
        None => x,
    };
    let projected = g.matmul(e, context)?;
    let self_drop = dropout.map(|d| d.child("self"));
    let y = attention::attend_with(g, x, projected, &params.attn, None, false, self_drop.as_ref())?;
    let h = residual_norm(g, y, x, &params.ln_attn, dropout, "res_attn")?;
    let f = ffn_with(g, h, &params.ffn, dropout)?;
    residual_norm(g, f, h, &params.ln_ffn, dropout, "res_ffn")
}

/// Token table, learned absolute positions, and optionally the first-layer `P`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingParams {
    pub token_table: ParamId,
    pub pos_table: ParamId,
    pub p_init: Option<ParamId>,
    pub vocab: usize,
    pub n_max: usize,
}

impl EmbeddingParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &RngState,
        prefix: &str,
        vocab: usize,
        n_max: usize,
        d: usize,
        l: Option<usize>,
    ) -> Result<Self> {
        let tok = format!("{prefix}.token_table");
        let pos = format!("{prefix}.pos_table");
        let token_table = store.add(tok.clone(), rng.xavier_uniform(&tok, &[vocab, d]))?;
        let pos_table = store.add(pos.clone(), rng.normal(&pos, &[n_max, d], EMBED_STD))?;
        let p_init = match l {
            Some(l) => {
                let key = format!("{prefix}.p_init");
                Some(store.add(key.clone(), rng.normal(&key, &[l, d], EMBED_STD))?)
            }
            None => None,
        };
        Ok(EmbeddingParams {
            token_table,
            pos_table,
            p_init,
            vocab,
            n_max,
        })
    }
}

/// Token plus position embeddings for `tokens`.
pub fn embed<T: Scalar>(g: &mut Graph<'_, T>, tokens: &[usize], params: &EmbeddingParams) -> Result<Var> {
    if tokens.is_empty() {
        return Err(LunaError::Input("empty token sequence".into()));
    }
    if tokens.len() > params.n_max {
        return Err(LunaError::Input(format!(
            "sequence length {} exceeds n_max {}",
            tokens.len(),
            params.n_max
        )));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t >= params.vocab) {
        return Err(LunaError::Input(format!(
            "token id {bad} out of range for vocabulary of {}",
            params.vocab
        )));
    }
    let table = g.param(params.token_table);
    let pos = g.param(params.pos_table);
    let tok = g.gather(table, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pe = g.gather(pos, &positions)?;
    g.add(tok, pe)
}

/// Sequence representation used by classification heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Final hidden state of a prepended `[CLS]` token (row 0).
    #[default]
    Cls,
    /// Column-wise mean of the final packed state `P`.
    PMean,
}

impl FromStr for Pooling {
    type Err = LunaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Pooling::Cls),
            "p_mean" => Ok(Pooling::PMean),
            other => Err(LunaError::Config(format!("unknown pooling mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Cls => "cls",
            Pooling::PMean => "p_mean",
        })
    }
}

/// Returns a `1 x d` pooled row.
pub fn pool<T: Scalar>(g: &mut Graph<'_, T>, h: Var, p_final: Option<Var>, mode: Pooling) -> Result<Var> {
    match mode {
        Pooling::Cls => g.slice_rows(h, 0, 1),
        Pooling::PMean => {
            let p = p_final.ok_or_else(|| {
                LunaError::Config("p_mean pooling needs a packed state; use a Luna encoder".into())
            })?;
            Ok(g.mean_rows(p))
        }
    }
}
