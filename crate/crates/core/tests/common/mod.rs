//! Independent reference implementations on nested `Vec<f64>` matrices.
//! Nothing here calls into the crate's kernels.
#![allow(dead_code)]

use luna::numerics::{RngState, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor<f64> {
    let rows: Vec<&[f64]> = m.iter().map(|r| r.as_slice()).collect();
    Tensor::from_rows(&rows).unwrap()
}

pub fn random(rng: &RngState, key: &str, r: usize, c: usize, std: f64) -> Tensor<f64> {
    rng.normal(key, &[r, c], std)
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let k = b.len();
    let n = b[0].len();
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), k);
            (0..n).map(|j| (0..k).map(|t| row[t] * b[t][j]).sum()).collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn cols(a: &Mat, start: usize, w: usize) -> Mat {
    a.iter().map(|r| r[start..start + w].to_vec()).collect()
}

pub fn hcat(parts: &[Mat]) -> Mat {
    (0..parts[0].len())
        .map(|i| parts.iter().flat_map(|p| p[i].clone()).collect())
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn layer_norm(a: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

pub fn ffn(x: &Mat, w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]) -> Mat {
    let h: Mat = mm(x, w1)
        .into_iter()
        .map(|r| r.iter().zip(b1).map(|(v, b)| (v + b).max(0.0)).collect())
        .collect();
    mm(&h, w2)
        .into_iter()
        .map(|r| r.iter().zip(b2).map(|(v, b)| v + b).collect())
        .collect()
}

/// Multi-head softmax attention, written out element by element.
pub fn attention(x: &Mat, c: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, heads: usize, keep: Option<&[bool]>) -> Mat {
    let q = mm(x, wq);
    let k = mm(c, wk);
    let v = mm(c, wv);
    let d = wq.len();
    let w = d / heads;
    let mut out = vec![vec![0.0; d]; x.len()];
    for h in 0..heads {
        let off = h * w;
        for i in 0..x.len() {
            let mut logits = Vec::new();
            let mut idx = Vec::new();
            for j in 0..c.len() {
                if keep.is_some_and(|k| !k[j]) {
                    continue;
                }
                let dot: f64 = (0..w).map(|t| q[i][off + t] * k[j][off + t]).sum();
                logits.push(dot / (w as f64).sqrt());
                idx.push(j);
            }
            let probs = softmax_row(&logits);
            for (p, &j) in probs.iter().zip(&idx) {
                for t in 0..w {
                    out[i][off + t] += p * v[j][off + t];
                }
            }
        }
    }
    out
}

/// `F_t = (1/t) x_t sum_{j<=t} y_j^T z_j` by a double loop per t.
pub fn causal_f(x: &Mat, y: &Mat, z: &Mat) -> Mat {
    let n = x.len();
    let d1 = x[0].len();
    let d2 = z[0].len();
    let mut out = vec![vec![0.0; d2]; n];
    for t in 0..n {
        for b in 0..d2 {
            let mut s = 0.0;
            for j in 0..=t {
                for a in 0..d1 {
                    s += x[t][a] * y[j][a] * z[j][b];
                }
            }
            out[t][b] = s / (t + 1) as f64;
        }
    }
    out
}

pub fn omega(kind: &str, v: f64) -> f64 {
    match kind {
        "elu1" => {
            if v > 0.0 {
                v + 1.0
            } else {
                v.exp()
            }
        }
        "softplus" => (1.0 + v.exp()).ln(),
        _ => panic!("unsupported {kind}"),
    }
}

/// Causal Luna attention where every output row `t` is computed from the
/// prefix `x[..=t]` alone, with no running state shared between rows.
pub fn luna_causal_prefix(x: &Mat, p: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, heads: usize, kind: &str) -> Mat {
    let d = wq.len();
    let w = d / heads;
    let l = p.len();
    let mut out = vec![vec![0.0; d]; x.len()];
    for t in 0..x.len() {
        let prefix: Mat = x[..=t].to_vec();
        let q = mm(&prefix, wq);
        let k = mm(&prefix, wk);
        let v = mm(&prefix, wv);
        let len = (t + 1) as f64;
        for h in 0..heads {
            let off = h * w;
            // pack scores for every prefix position: a_pack[s][j]
            let a_pack: Mat = (0..l)
                .map(|s| {
                    (0..=t)
                        .map(|j| {
                            let dot: f64 = (0..w).map(|e| p[s][off + e] * k[j][off + e]).sum();
                            omega(kind, dot / (w as f64).sqrt())
                        })
                        .collect()
                })
                .collect();
            let mixed: Vec<f64> = (0..l)
                .map(|s| {
                    (0..=t)
                        .map(|j| {
                            let qk: f64 = (0..w).map(|e| q[t][off + e] * k[j][off + e]).sum();
                            qk * a_pack[s][j]
                        })
                        .sum::<f64>()
                        / len
                })
                .collect();
            let unpack = softmax_row(&mixed);
            for e in 0..w {
                let mut acc = 0.0;
                for j in 0..=t {
                    let weight: f64 = (0..l).map(|s| unpack[s] * a_pack[s][j]).sum();
                    acc += weight * v[j][off + e];
                }
                out[t][off + e] = acc / len;
            }
        }
    }
    out
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}
