//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse, freeing intermediate
//! gradients as soon as they have been propagated.

use std::collections::HashMap;

use super::ops::{self, SoftmaxMask};
use super::{ParamId, ParamStore, RngState, Scalar, Tensor};
use crate::error::{LunaError, Result};

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        alpha: T,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        bias: Var,
    },
    Scale(Var, T),
    Relu(Var),
    Elu1(Var),
    Softplus(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        rstd: Tensor<T>,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MeanRows(Var),
    Sum(Var),
    Dropout {
        a: Var,
        mask: Tensor<T>,
    },
    CausalF {
        x: Var,
        y: Var,
        z: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<T>>,
    store: Option<&'p ParamStore<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Graph {
            nodes: Vec::new(),
            store: Some(store),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0]
            .value
            .dims2()
            .expect("graph values are matrices")
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, mut value: Tensor<T>, needs_grad: bool) -> Var {
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls with the same id
    /// return the same node, so tied weights share one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self
            .store
            .expect("Graph::param requires a graph built with_params");
        let v = self.leaf(store.get(id).clone(), true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_store(&self) -> Option<&'p ParamStore<T>> {
        self.store
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false, T::one())
    }

    /// `alpha * op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool, alpha: T) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(LunaError::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = Tensor::zeros(&[m, n]);
        ops::gemm(
            m,
            k,
            n,
            alpha,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            T::zero(),
            out.data_mut(),
        );
        Ok(self.push(out, Op::MatMul { a, b, ta, tb, alpha }, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(LunaError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims(a);
        if self.value(bias).len() != c {
            return Err(LunaError::dim("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).clone();
        out.clear_grad();
        for row in out.data_mut().chunks_exact_mut(c) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x = *x + *y);
        }
        Ok(self.push(out, Op::AddRow { a, bias }, &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn elu1(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::elu1);
        self.push(out, Op::Elu1(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    pub fn omega(&mut self, kind: ops::Omega, a: Var) -> Result<Var> {
        match kind {
            ops::Omega::Elu1 => Ok(self.elu1(a)),
            ops::Omega::Softplus => Ok(self.softplus(a)),
            ops::Omega::Softmax => self.softmax(a, None),
        }
    }

    /// Row softmax; masked entries get exactly zero probability.
    pub fn softmax(&mut self, a: Var, mask: Option<&SoftmaxMask>) -> Result<Var> {
        let (_, c) = self.dims(a);
        if let Some(keep) = mask.and_then(|m| m.keep.as_ref()) {
            if keep.len() != c {
                return Err(LunaError::dim("softmax mask", self.shape(a), &[keep.len()]));
            }
        }
        let mut out = self.value(a).clone();
        out.clear_grad();
        ops::softmax_rows_in_place(out.data_mut(), c, mask.filter(|m| !m.is_empty()))?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, d) = self.dims(x);
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(LunaError::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let mut xhat = Tensor::zeros(&[r, d]);
        let mut rstd = Tensor::zeros(&[r]);
        ops::layer_norm_forward(self.value(x).data(), d, eps, xhat.data_mut(), rstd.data_mut());
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Tensor::zeros(&[r, d]);
        for (o, xh) in out.data_mut().chunks_exact_mut(d).zip(xhat.data().chunks_exact(d)) {
            for j in 0..d {
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if width == 0 || start + width > c {
            return Err(LunaError::Contract(format!(
                "column slice {start}..{} out of range for {c} columns",
                start + width
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * width);
        for row in src.chunks_exact(c) {
            data.extend_from_slice(&row[start..start + width]);
        }
        let out = Tensor::from_parts(vec![r, width], data);
        Ok(self.push(out, Op::SliceCols { a, start }, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(LunaError::Contract("concat_cols parts differ in rows".into()));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_parts(vec![r, total], data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows { a, start }, &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims(parts[0]).1;
        if parts.iter().any(|&p| self.dims(p).1 != c) {
            return Err(LunaError::Contract("concat_rows parts differ in columns".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / c;
        let out = Tensor::from_parts(vec![rows, c], data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let mut out = self.value(a).clone().reshape(shape)?;
        out.clear_grad();
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if ids.is_empty() {
            return Err(LunaError::Input("gather with no indices".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(LunaError::Input(format!("row index {bad} out of range for {v} rows")));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Column-wise mean, returned as a `1 x cols` matrix.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let inv = T::one() / T::from_usize(r).expect("row count fits scalar");
        let mut out = vec![T::zero(); c];
        for row in self.value(a).data().chunks_exact(c) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o = *o + *x);
        }
        out.iter_mut().for_each(|o| *o = *o * inv);
        let out = Tensor::from_parts(vec![1, c], out);
        self.push(out, Op::MeanRows(a), &[a])
    }

    /// Sum of all elements as a `1 x 1` matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let out = Tensor::from_parts(vec![1, 1], vec![s]);
        self.push(out, Op::Sum(a), &[a])
    }

    /// Inverted dropout with a mask drawn from `rng.stream(key)`; identity at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &RngState, key: &str) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(LunaError::Config(format!("dropout rate {rate} must be < 1")));
        }
        let shape = self.shape(a).to_vec();
        let mask_data = rng.dropout_mask::<T>(key, self.value(a).len(), rate);
        let mask = Tensor::from_parts(shape.clone(), mask_data);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(x, m)| *x * *m)
            .collect();
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Dropout { a, mask }, &[a]))
    }

    /// Running-average prefix product `F_t = (1/t) x_t * sum_{j<=t} y_j^T z_j`.
    ///
    /// Uses a single `d1 x d2` accumulator; row `t` of the output depends
    /// only on rows `<= t` of the inputs.
    pub fn causal_f(&mut self, x: Var, y: Var, z: Var) -> Result<Var> {
        let (n, d1) = self.dims(x);
        let (ny, d1y) = self.dims(y);
        let (nz, d2) = self.dims(z);
        if n != ny || d1 != d1y {
            return Err(LunaError::dim("causal_f", self.shape(x), self.shape(y)));
        }
        if n != nz {
            return Err(LunaError::dim("causal_f", self.shape(x), self.shape(z)));
        }
        let out = causal_f_forward(
            self.value(x).data(),
            self.value(y).data(),
            self.value(z).data(),
            n,
            d1,
            d2,
        );
        Ok(self.push(out, Op::CausalF { x, y, z }, &[x, y, z]))
    }

    /// Mean token cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, v) = self.dims(logits);
        if targets.len() != r {
            return Err(LunaError::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(LunaError::Input(format!("target {bad} out of range for {v} classes")));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(LunaError::Contract("cross_entropy with no target positions".into()));
        }
        let mut probs = self.value(logits).clone();
        probs.clear_grad();
        let mut total = 0.0f64;
        for (row, t) in probs.data_mut().chunks_exact_mut(v).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            if let Some(t) = t {
                total += (lse - row[*t]).to_f64_lossy();
            }
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let loss = T::from_f64_lossy(total / count as f64);
        let out = Tensor::from_parts(vec![1, 1], vec![loss]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(LunaError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let params = self
            .param_vars
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb, alpha } => {
                let (ra, ca) = self.dims(a);
                let (rb, cb) = self.dims(b);
                let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
                let n = if tb { rb } else { cb };
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.nodes[a.0].needs_grad {
                    let da = self.grad_slot(grads, a);
                    if ta {
                        ops::gemm(k, n, m, alpha, bv, tb, gd, true, T::one(), da);
                    } else {
                        ops::gemm(m, n, k, alpha, gd, false, bv, !tb, T::one(), da);
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let db = self.grad_slot(grads, b);
                    if tb {
                        ops::gemm(n, m, k, alpha, gd, true, av, ta, T::one(), db);
                    } else {
                        ops::gemm(k, m, n, alpha, av, !ta, gd, false, T::one(), db);
                    }
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |da| axpy(da, gd, T::one()));
                self.accumulate(grads, b, |db| axpy(db, gd, T::one()));
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.accumulate(grads, a, |da| {
                    for ((d, g), y) in da.iter_mut().zip(gd).zip(bv) {
                        *d = *d + *g * *y;
                    }
                });
                self.accumulate(grads, b, |db| {
                    for ((d, g), x) in db.iter_mut().zip(gd).zip(av) {
                        *d = *d + *g * *x;
                    }
                });
            }
            &Op::AddRow { a, bias } => {
                let c = self.dims(a).1;
                self.accumulate(grads, a, |da| axpy(da, gd, T::one()));
                self.accumulate(grads, bias, |db| {
                    for row in gd.chunks_exact(c) {
                        axpy(db, row, T::one());
                    }
                });
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, |da| axpy(da, gd, s)),
            &Op::Relu(a) => {
                let x = self.value(a).data();
                self.accumulate(grads, a, |da| {
                    for ((d, g), x) in da.iter_mut().zip(gd).zip(x) {
                        if *x > T::zero() {
                            *d = *d + *g;
                        }
                    }
                });
            }
            &Op::Elu1(a) => {
                let x = self.value(a).data();
                self.accumulate(grads, a, |da| {
                    for ((d, g), x) in da.iter_mut().zip(gd).zip(x) {
                        *d = *d + *g * ops::elu1_grad(*x);
                    }
                });
            }
            &Op::Softplus(a) => {
                let x = self.value(a).data();
                self.accumulate(grads, a, |da| {
                    for ((d, g), x) in da.iter_mut().zip(gd).zip(x) {
                        *d = *d + *g * ops::sigmoid(*x);
                    }
                });
            }
            &Op::Softmax(a) => {
                let c = self.dims(a).1;
                let y = node.value.data();
                self.accumulate(grads, a, |da| {
                    for ((drow, grow), yrow) in da
                        .chunks_exact_mut(c)
                        .zip(gd.chunks_exact(c))
                        .zip(y.chunks_exact(c))
                    {
                        let dot = grow.iter().zip(yrow).map(|(g, y)| *g * *y).sum::<T>();
                        for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + *y * (*g - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.dims(*x).1;
                let gam = self.value(*gamma).data();
                let xh = xhat.data();
                self.accumulate(grads, *gamma, |dg| {
                    for (grow, xrow) in gd.chunks_exact(d).zip(xh.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + grow[j] * xrow[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |db| {
                    for grow in gd.chunks_exact(d) {
                        axpy(db, grow, T::one());
                    }
                });
                let dn = T::from_usize(d).expect("width fits scalar");
                self.accumulate(grads, *x, |dx| {
                    let rows = dx
                        .chunks_exact_mut(d)
                        .zip(gd.chunks_exact(d))
                        .zip(xh.chunks_exact(d))
                        .zip(rstd.data());
                    for (((dxrow, grow), xrow), &r) in rows {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = grow[j] * gam[j];
                            mean_dxh = mean_dxh + dxh;
                            mean_dxh_xh = mean_dxh_xh + dxh * xrow[j];
                        }
                        mean_dxh = mean_dxh / dn;
                        mean_dxh_xh = mean_dxh_xh / dn;
                        for j in 0..d {
                            let dxh = grow[j] * gam[j];
                            dxrow[j] = dxrow[j] + r * (dxh - mean_dxh - xrow[j] * mean_dxh_xh);
                        }
                    }
                });
            }
            &Op::SliceCols { a, start } => {
                let c = self.dims(a).1;
                let w = node.value.cols();
                self.accumulate(grads, a, |da| {
                    for (drow, grow) in da.chunks_exact_mut(c).zip(gd.chunks_exact(w)) {
                        axpy(&mut drow[start..start + w], grow, T::one());
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    self.accumulate(grads, p, |dp| {
                        for (drow, grow) in dp.chunks_exact_mut(w).zip(gd.chunks_exact(total)) {
                            axpy(drow, &grow[offset..offset + w], T::one());
                        }
                    });
                    offset += w;
                }
            }
            &Op::SliceRows { a, start } => {
                let c = self.dims(a).1;
                self.accumulate(grads, a, |da| {
                    axpy(&mut da[start * c..start * c + gd.len()], gd, T::one());
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |dp| {
                        axpy(dp, &gd[offset..offset + len], T::one());
                    });
                    offset += len;
                }
            }
            &Op::Reshape(a) => self.accumulate(grads, a, |da| axpy(da, gd, T::one())),
            Op::Gather { table, ids } => {
                let d = self.dims(*table).1;
                self.accumulate(grads, *table, |dt| {
                    for (&i, grow) in ids.iter().zip(gd.chunks_exact(d)) {
                        axpy(&mut dt[i * d..(i + 1) * d], grow, T::one());
                    }
                });
            }
            &Op::MeanRows(a) => {
                let (r, c) = self.dims(a);
                let inv = T::one() / T::from_usize(r).expect("row count fits scalar");
                self.accumulate(grads, a, |da| {
                    for drow in da.chunks_exact_mut(c) {
                        axpy(drow, gd, inv);
                    }
                });
            }
            &Op::Sum(a) => {
                let g0 = gd[0];
                self.accumulate(grads, a, |da| da.iter_mut().for_each(|d| *d = *d + g0));
            }
            Op::Dropout { a, mask } => {
                self.accumulate(grads, *a, |da| {
                    for ((d, g), m) in da.iter_mut().zip(gd).zip(mask.data()) {
                        *d = *d + *g * *m;
                    }
                });
            }
            &Op::CausalF { x, y, z } => {
                let (n, d1) = self.dims(x);
                let d2 = self.dims(z).1;
                let (dx, dy, dz) = causal_f_backward(
                    self.value(x).data(),
                    self.value(y).data(),
                    self.value(z).data(),
                    gd,
                    n,
                    d1,
                    d2,
                    [
                        self.nodes[x.0].needs_grad,
                        self.nodes[y.0].needs_grad,
                        self.nodes[z.0].needs_grad,
                    ],
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, x, |s| axpy(s, &dx, T::one()));
                }
                if let Some(dy) = dy {
                    self.accumulate(grads, y, |s| axpy(s, &dy, T::one()));
                }
                if let Some(dz) = dz {
                    self.accumulate(grads, z, |s| axpy(s, &dz, T::one()));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.dims(*logits).1;
                let count = targets.iter().flatten().count();
                let scale = gd[0] / T::from_usize(count).expect("count fits scalar");
                self.accumulate(grads, *logits, |dl| {
                    for ((drow, prow), t) in dl
                        .chunks_exact_mut(v)
                        .zip(probs.data().chunks_exact(v))
                        .zip(targets)
                    {
                        let Some(t) = t else { continue };
                        for (d, p) in drow.iter_mut().zip(prow) {
                            *d = *d + *p * scale;
                        }
                        drow[*t] = drow[*t] - scale;
                    }
                });
            }
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> &'g mut [T] {
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.shape(v)))
            .data_mut()
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if self.nodes[v.0].needs_grad {
            f(self.grad_slot(grads, v));
        }
    }
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], s: T) {
    for (d, x) in dst.iter_mut().zip(src) {
        *d = *d + *x * s;
    }
}

pub(crate) fn causal_f_forward<T: Scalar>(
    x: &[T],
    y: &[T],
    z: &[T],
    n: usize,
    d1: usize,
    d2: usize,
) -> Tensor<T> {
    let mut out = Tensor::zeros(&[n, d2]);
    let mut acc = vec![T::zero(); d1 * d2];
    let o = out.data_mut();
    for t in 0..n {
        let yt = &y[t * d1..(t + 1) * d1];
        let zt = &z[t * d2..(t + 1) * d2];
        for (a, &ya) in yt.iter().enumerate() {
            axpy(&mut acc[a * d2..(a + 1) * d2], zt, ya);
        }
        let inv = T::one() / T::from_usize(t + 1).expect("position fits scalar");
        let xt = &x[t * d1..(t + 1) * d1];
        let orow = &mut o[t * d2..(t + 1) * d2];
        for (a, &xa) in xt.iter().enumerate() {
            axpy(orow, &acc[a * d2..(a + 1) * d2], xa);
        }
        orow.iter_mut().for_each(|v| *v = *v * inv);
    }
    out
}

type CausalGrads<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);

/// Gradients of [`Graph::causal_f`].
///
/// A forward sweep rebuilds the prefix state `S_t` for `dx`, a reverse sweep
/// keeps the suffix sum `R_j = sum_{t>=j} (1/t) x_t^T g_t` for `dy`, `dz`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn causal_f_backward<T: Scalar>(
    x: &[T],
    y: &[T],
    z: &[T],
    g: &[T],
    n: usize,
    d1: usize,
    d2: usize,
    need: [bool; 3],
) -> CausalGrads<T> {
    let inv = |t: usize| T::one() / T::from_usize(t + 1).expect("position fits scalar");
    let dx = need[0].then(|| {
        let mut dx = vec![T::zero(); n * d1];
        let mut acc = vec![T::zero(); d1 * d2];
        for t in 0..n {
            let yt = &y[t * d1..(t + 1) * d1];
            let zt = &z[t * d2..(t + 1) * d2];
            for (a, &ya) in yt.iter().enumerate() {
                axpy(&mut acc[a * d2..(a + 1) * d2], zt, ya);
            }
            let gt = &g[t * d2..(t + 1) * d2];
            let s = inv(t);
            for a in 0..d1 {
                let dot: T = acc[a * d2..(a + 1) * d2]
                    .iter()
                    .zip(gt)
                    .map(|(p, q)| *p * *q)
                    .sum();
                dx[t * d1 + a] = dot * s;
            }
        }
        dx
    });
    let (dy, dz) = if need[1] || need[2] {
        let mut dy = vec![T::zero(); n * d1];
        let mut dz = vec![T::zero(); n * d2];
        let mut suffix = vec![T::zero(); d1 * d2];
        for t in (0..n).rev() {
            let s = inv(t);
            let xt = &x[t * d1..(t + 1) * d1];
            let gt = &g[t * d2..(t + 1) * d2];
            for (a, &xa) in xt.iter().enumerate() {
                axpy(&mut suffix[a * d2..(a + 1) * d2], gt, xa * s);
            }
            let yt = &y[t * d1..(t + 1) * d1];
            let zt = &z[t * d2..(t + 1) * d2];
            for a in 0..d1 {
                let r = &suffix[a * d2..(a + 1) * d2];
                dy[t * d1 + a] = r.iter().zip(zt).map(|(p, q)| *p * *q).sum();
                axpy(&mut dz[t * d2..(t + 1) * d2], r, yt[a]);
            }
        }
        (need[1].then_some(dy), need[2].then_some(dz))
    } else {
        (None, None)
    };
    (dx, dy, dz)
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// Adds every parameter gradient into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        self.accumulate_scaled_into(store, T::one());
    }

    pub fn accumulate_scaled_into(&self, store: &mut ParamStore<T>, scale: T) {
        let mut params = self.params.clone();
        params.sort();
        for (id, v) in params {
            if let Some(g) = self.get(v) {
                let slot = store.get_mut(id).grad_mut();
                axpy(slot, g.data(), scale);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_gradient_rule() {
        let mut g = Graph::new();
        let a = g.input(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.input(m(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        // dA = 1 * B^T, dB = A^T * 1
        assert_eq!(grads.get(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn transposed_matmul_matches_explicit_transpose() {
        let a = m(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, -1.0]]);
        let b = m(&[&[2.0, 1.0, 0.0], &[-1.0, 5.0, 2.0]]);
        let mut g = Graph::new();
        let va = g.input(a.clone());
        let vb = g.input(b.clone());
        let c = g.matmul_ex(va, vb, false, true, 0.5).unwrap();
        let expected = ops::matmul(&a, &b.transpose().unwrap()).unwrap().map(|v| v * 0.5);
        assert_eq!(g.value(c), &expected);
        let c2 = g.matmul_ex(va, vb, true, false, 1.0).unwrap();
        let expected = ops::matmul(&a.transpose().unwrap(), &b).unwrap();
        assert_eq!(g.value(c2), &expected);
    }

    #[test]
    fn tied_params_share_one_leaf() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::<f64>::eye(2)).unwrap();
        let mut g = Graph::with_params(&store);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b);
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        // d/dw sum(w*w) = 2w
        assert_eq!(grads.param(w).unwrap().data(), &[2.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(a), Err(LunaError::Contract(_))));
    }

    #[test]
    fn causal_f_single_step() {
        let mut g = Graph::<f64>::new();
        let x = g.input(m(&[&[2.0]]));
        let y = g.input(m(&[&[3.0]]));
        let z = g.input(m(&[&[4.0]]));
        let f = g.causal_f(x, y, z).unwrap();
        assert_eq!(g.value(f).data(), &[24.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let mut g = Graph::<f64>::new();
        let l = g.input(Tensor::zeros(&[3, 5]));
        let loss = g.cross_entropy(l, &[Some(0), Some(4), None]).unwrap();
        assert!((g.value(loss).data()[0] - 5f64.ln()).abs() < 1e-15);
        let empty = g.cross_entropy(l, &[None, None, None]);
        assert!(matches!(empty, Err(LunaError::Contract(_))));
    }
}
