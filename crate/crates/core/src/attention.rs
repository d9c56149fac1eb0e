//! Softmax attention and the nested pack/unpack mechanism built from it.
//!
//! All functions record onto a [`Graph`], so outputs are differentiable with
//! respect to inputs and to the projection weights held in the graph's
//! [`ParamStore`](crate::numerics::ParamStore).

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LunaError, Result};
use crate::numerics::{Dropout, Graph, Omega, ParamId, ParamStore, RngState, Scalar, SoftmaxMask, Var};

/// Which projection matrices share storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tying {
    #[default]
    None,
    /// Query and key projections are one tensor.
    TieQk,
    /// Key and value projections are one tensor.
    TieKv,
}

impl FromStr for Tying {
    type Err = LunaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Tying::None),
            "tie_qk" => Ok(Tying::TieQk),
            "tie_kv" => Ok(Tying::TieKv),
            other => Err(LunaError::Config(format!("unknown tying mode '{other}'"))),
        }
    }
}

/// Query/key/value projections for one attention function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub d: usize,
    pub heads: usize,
    pub tying: Tying,
}

impl AttentionParams {
    /// Registers `d x d` projections under `prefix` with Xavier-uniform init.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &RngState,
        prefix: &str,
        d: usize,
        heads: usize,
        tying: Tying,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(LunaError::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        let mut add = |name: &str| {
            let key = format!("{prefix}.{name}");
            let w = rng.xavier_uniform(&key, &[d, d]);
            store.add(key, w)
        };
        let (wq, wk, wv) = match tying {
            Tying::None => (add("wq")?, add("wk")?, add("wv")?),
            Tying::TieQk => {
                let qk = add("wqk")?;
                (qk, qk, add("wv")?)
            }
            Tying::TieKv => {
                let kv = add("wkv")?;
                (add("wq")?, kv, kv)
            }
        };
        Ok(AttentionParams {
            wq,
            wk,
            wv,
            d,
            heads,
            tying,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Distinct trainable tensors, in registration order.
    pub fn tensors(&self) -> Vec<ParamId> {
        let mut ids = vec![self.wq, self.wk, self.wv];
        ids.sort();
        ids.dedup();
        ids
    }
}

/// Padding mask over context positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    context_keep: Vec<bool>,
}

impl AttnMask {
    pub fn new(context_keep: Vec<bool>) -> Result<Self> {
        if !context_keep.iter().any(|&k| k) {
            return Err(LunaError::Contract("mask keeps no context position".into()));
        }
        Ok(AttnMask { context_keep })
    }

    /// Keeps the first `len` of `total` positions.
    pub fn prefix(len: usize, total: usize) -> Result<Self> {
        Self::new((0..total).map(|i| i < len).collect())
    }

    pub fn keep(&self) -> &[bool] {
        &self.context_keep
    }

    pub fn len(&self) -> usize {
        self.context_keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.context_keep.is_empty()
    }

    fn softmax_mask(&self) -> SoftmaxMask {
        SoftmaxMask {
            keep: Some(self.context_keep.clone()),
            causal: false,
        }
    }
}

/// The fixed-length extra sequence threaded between layers.
///
/// `p` is the node on the graph; equality of two states is node identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackedState {
    pub p: Var,
    pub l: usize,
}

fn check_width<T: Scalar>(g: &Graph<'_, T>, op: &'static str, v: Var, params: &AttentionParams) -> Result<()> {
    let shape = g.shape(v);
    if shape.len() != 2 || shape[1] != params.d {
        return Err(LunaError::dim(op, shape, &[params.d, params.d]));
    }
    Ok(())
}

fn split_heads<T: Scalar>(g: &mut Graph<'_, T>, v: Var, heads: usize) -> Result<Vec<Var>> {
    if heads == 1 {
        return Ok(vec![v]);
    }
    let w = g.shape(v)[1] / heads;
    (0..heads).map(|h| g.slice_cols(v, h * w, w)).collect()
}

fn merge_heads<T: Scalar>(g: &mut Graph<'_, T>, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    g.concat_cols(parts)
}

/// Multi-head scaled dot-product attention of queries `x` over context `c`.
pub fn attend<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    c: Var,
    params: &AttentionParams,
    mask: Option<&AttnMask>,
) -> Result<Var> {
    attend_with(g, x, c, params, mask, false, None)
}

/// Attention with a causal mask (`x` and `c` must have equal length).
pub fn attend_causal<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    params: &AttentionParams,
    dropout: Option<&Dropout<'_>>,
) -> Result<Var> {
    attend_with(g, x, x, params, None, true, dropout)
}

pub(crate) fn attend_with<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    c: Var,
    params: &AttentionParams,
    mask: Option<&AttnMask>,
    causal: bool,
    dropout: Option<&Dropout<'_>>,
) -> Result<Var> {
    check_width(g, "attend", x, params)?;
    check_width(g, "attend", c, params)?;
    let m = g.shape(c)[0];
    let mut smask = match mask {
        Some(mask) if mask.len() != m => {
            return Err(LunaError::dim("attend mask", g.shape(c), &[mask.len()]));
        }
        Some(mask) => mask.softmax_mask(),
        None => SoftmaxMask::default(),
    };
    smask.causal = causal;
    if causal && g.shape(x)[0] != m {
        return Err(LunaError::dim("causal attend", g.shape(x), g.shape(c)));
    }

    let wq = g.param(params.wq);
    let wk = g.param(params.wk);
    let wv = g.param(params.wv);
    let q = g.matmul(x, wq)?;
    let k = g.matmul(c, wk)?;
    let v = g.matmul(c, wv)?;
    let scale = T::from_f64_lossy(1.0 / (params.head_dim() as f64).sqrt());

    let qs = split_heads(g, q, params.heads)?;
    let ks = split_heads(g, k, params.heads)?;
    let vs = split_heads(g, v, params.heads)?;
    let mut outs = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let scores = g.matmul_ex(qs[h], ks[h], false, true, scale)?;
        let mut probs = g.softmax(scores, Some(&smask))?;
        if let Some(d) = dropout {
            probs = d.apply(g, probs, d.attn, &format!("attn_probs/h{h}"))?;
        }
        outs.push(g.matmul(probs, vs[h])?);
    }
    merge_heads(g, &outs)
}

/// Packs a context of any length into `l` rows using `p` as the query.
pub fn pack<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: Var,
    c: Var,
    params: &AttentionParams,
    mask: Option<&AttnMask>,
) -> Result<Var> {
    attend(g, p, c, params, mask)
}

/// Reads the packed context back out at the length of `x`.
pub fn unpack<T: Scalar>(g: &mut Graph<'_, T>, x: Var, packed: Var, params: &AttentionParams) -> Result<Var> {
    attend(g, x, packed, params, None)
}

/// Nested attention: returns `(Y_X, Y_P)`.
///
/// Intermediates are at most `l x m` (pack) and `n x l` (unpack); no
/// `n x m` matrix is formed.
pub fn luna_attend<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    p: Var,
    c: Var,
    pack_params: &AttentionParams,
    unpack_params: &AttentionParams,
    mask: Option<&AttnMask>,
) -> Result<(Var, Var)> {
    luna_attend_with(g, x, p, c, pack_params, unpack_params, mask, None)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn luna_attend_with<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    p: Var,
    c: Var,
    pack_params: &AttentionParams,
    unpack_params: &AttentionParams,
    mask: Option<&AttnMask>,
    dropout: Option<&Dropout<'_>>,
) -> Result<(Var, Var)> {
    check_width(g, "luna_attend", x, unpack_params)?;
    check_width(g, "luna_attend", p, pack_params)?;
    if pack_params.d != unpack_params.d {
        return Err(LunaError::dim(
            "luna_attend",
            &[pack_params.d],
            &[unpack_params.d],
        ));
    }
    let pack_drop = dropout.map(|d| d.child("pack"));
    let unpack_drop = dropout.map(|d| d.child("unpack"));
    let yp = attend_with(g, p, c, pack_params, mask, false, pack_drop.as_ref())?;
    let yx = attend_with(g, x, yp, unpack_params, None, false, unpack_drop.as_ref())?;
    Ok((yx, yp))
}

/// Running-average prefix operator `F_t = (1/t) x_t sum_{j<=t} y_j^T z_j`.
pub fn causal_f<T: Scalar>(g: &mut Graph<'_, T>, x: Var, y: Var, z: Var) -> Result<Var> {
    g.causal_f(x, y, z)
}

/// Causal nested attention over `x` with a position-independent `p`.
///
/// Per head, with `Q = xW_Q`, `K = xW_K`, `V = xW_V` and `P` split into the
/// same column blocks:
///
/// ```text
/// A_pack^T = omega(K P^T / sqrt(d_head))            n x l
/// A_unpack = softmax_l(f(Q, K, A_pack^T))           n x l
/// Y        = f(A_unpack, A_pack^T, V)               n x d_head
/// ```
///
/// Row `t` of the output depends on rows `1..=t` of `x` and on `p` only.
pub fn luna_causal<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    p: Var,
    params: &AttentionParams,
    pack_omega: Omega,
) -> Result<Var> {
    luna_causal_with(g, x, p, params, pack_omega, None)
}

pub(crate) fn luna_causal_with<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    p: Var,
    params: &AttentionParams,
    pack_omega: Omega,
    dropout: Option<&Dropout<'_>>,
) -> Result<Var> {
    if pack_omega == Omega::Softmax {
        return Err(LunaError::Config(
            "softmax normalizes over the sequence and would leak future positions; use elu1 or softplus"
                .into(),
        ));
    }
    check_width(g, "luna_causal", x, params)?;
    check_width(g, "luna_causal", p, params)?;

    let wq = g.param(params.wq);
    let wk = g.param(params.wk);
    let wv = g.param(params.wv);
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let scale = T::from_f64_lossy(1.0 / (params.head_dim() as f64).sqrt());

    let qs = split_heads(g, q, params.heads)?;
    let ks = split_heads(g, k, params.heads)?;
    let vs = split_heads(g, v, params.heads)?;
    let ps = split_heads(g, p, params.heads)?;
    let mut outs = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let logits = g.matmul_ex(ks[h], ps[h], false, true, scale)?;
        let pack_t = g.omega(pack_omega, logits)?;
        let mixed = g.causal_f(qs[h], ks[h], pack_t)?;
        let mut unpack_attn = g.softmax(mixed, None)?;
        if let Some(d) = dropout {
            unpack_attn = d.apply(g, unpack_attn, d.attn, &format!("causal_probs/h{h}"))?;
        }
        outs.push(g.causal_f(unpack_attn, pack_t, vs[h])?);
    }
    merge_heads(g, &outs)
}

/// Splits a `[batch, n, d]` node into per-example `n x d` nodes.
pub fn split_batch<T: Scalar>(g: &mut Graph<'_, T>, v: Var) -> Result<Vec<Var>> {
    match *g.shape(v) {
        [_, _] => Ok(vec![v]),
        [b, n, d] => {
            let flat = g.reshape(v, &[b * n, d])?;
            (0..b).map(|i| g.slice_rows(flat, i * n, n)).collect()
        }
        ref other => Err(LunaError::Contract(format!(
            "expected rank 2 or 3, got shape {other:?}"
        ))),
    }
}

/// Inverse of [`split_batch`]: stacks equal-shape `n x d` nodes to `[batch, n, d]`.
pub fn stack_batch<T: Scalar>(g: &mut Graph<'_, T>, parts: &[Var]) -> Result<Var> {
    let shape = g.shape(parts[0]).to_vec();
    if parts.iter().any(|&p| g.shape(p) != shape.as_slice()) {
        return Err(LunaError::Contract("stack_batch parts differ in shape".into()));
    }
    let flat = g.concat_rows(parts)?;
    g.reshape(flat, &[parts.len(), shape[0], shape[1]])
}
