//! Forward kernels shared by the plain tensor API and the autodiff graph.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{LunaError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Positive feature map / normalizer applied to attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Omega {
    /// `elu(x) + 1`
    Elu1,
    /// `ln(1 + e^x)`
    Softplus,
    /// Row softmax over the last axis.
    Softmax,
}

impl FromStr for Omega {
    type Err = LunaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elu1" | "elu" => Ok(Omega::Elu1),
            "softplus" => Ok(Omega::Softplus),
            "softmax" => Ok(Omega::Softmax),
            other => Err(LunaError::Config(format!("unknown activation kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for Omega {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Omega::Elu1 => "elu1",
            Omega::Softplus => "softplus",
            Omega::Softmax => "softmax",
        })
    }
}

#[inline]
pub(crate) fn elu1<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + T::one()
    } else {
        x.exp()
    }
}

#[inline]
pub(crate) fn elu1_grad<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Which columns of a score matrix may receive probability mass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SoftmaxMask {
    /// Column keep-flags (padding mask over the context axis).
    pub keep: Option<Vec<bool>>,
    /// Row `i` may only see columns `j <= i`.
    pub causal: bool,
}

impl SoftmaxMask {
    pub fn is_empty(&self) -> bool {
        self.keep.is_none() && !self.causal
    }

    #[inline]
    fn allows(&self, row: usize, col: usize) -> bool {
        (!self.causal || col <= row) && self.keep.as_ref().is_none_or(|k| k[col])
    }
}

/// In-place masked softmax over each row of a `rows x cols` buffer.
/// Masked entries become exactly zero. Rows with no admissible column are an error.
pub(crate) fn softmax_rows_in_place<T: Scalar>(
    data: &mut [T],
    cols: usize,
    mask: Option<&SoftmaxMask>,
) -> Result<()> {
    for (i, row) in data.chunks_exact_mut(cols).enumerate() {
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if mask.is_none_or(|m| m.allows(i, j)) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            return Err(LunaError::Contract(format!(
                "softmax row {i} has every column masked"
            )));
        }
        let mut sum = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if mask.is_none_or(|m| m.allows(i, j)) {
                *v = (*v - max).exp();
                sum = sum + *v;
            } else {
                *v = T::zero();
            }
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
    Ok(())
}

/// `c = alpha * op(a) op(b) + beta * c` with row-major operands.
///
/// `a` is stored `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm lhs buffer");
    assert_eq!(b.len(), k * n, "gemm rhs buffer");
    assert_eq!(c.len(), m * n, "gemm output buffer");
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: buffer lengths were checked against the extents above and the
    // strides address exactly those row-major layouts.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Standard matrix product.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if a.rank() != 2 || b.rank() != 2 || k != k2 {
        return Err(LunaError::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        false,
        b.data(),
        false,
        T::zero(),
        out.data_mut(),
    );
    Ok(out)
}

pub fn row_softmax<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let cols = m.cols();
    let mut out = m.clone();
    out.clear_grad();
    softmax_rows_in_place(out.data_mut(), cols, None)?;
    Ok(out)
}

pub fn omega<T: Scalar>(kind: Omega, m: &Tensor<T>) -> Result<Tensor<T>> {
    match kind {
        Omega::Elu1 => Ok(m.map(elu1)),
        Omega::Softplus => Ok(m.map(softplus)),
        Omega::Softmax => row_softmax(m),
    }
}

/// Per-row standardization (biased variance) followed by `gamma * x + beta`.
pub fn layer_norm<T: Scalar>(
    m: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let d = m.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(LunaError::dim("layer_norm", m.shape(), gamma.shape()));
    }
    let mut out = Tensor::zeros(m.shape());
    let mut xhat = vec![T::zero(); m.len()];
    let mut rstd = vec![T::zero(); m.len() / d];
    layer_norm_forward(m.data(), d, eps, &mut xhat, &mut rstd);
    for (o_row, x_row) in out.data_mut().chunks_exact_mut(d).zip(xhat.chunks_exact(d)) {
        for j in 0..d {
            o_row[j] = x_row[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(out)
}

pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &[T],
    d: usize,
    eps: f64,
    xhat: &mut [T],
    rstd: &mut [T],
) {
    let dn = T::from_usize(d).expect("width fits scalar");
    let eps = T::from_f64_lossy(eps);
    for ((row, out), r) in x
        .chunks_exact(d)
        .zip(xhat.chunks_exact_mut(d))
        .zip(rstd.iter_mut())
    {
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let inv = T::one() / (var + eps).sqrt();
        *r = inv;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
}
