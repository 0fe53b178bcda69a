//! Differentiable operations. Forward pass computes output data eagerly;
//! each op registers a closure computing the vector-Jacobian products for
//! its parents.

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngStream;

// ── elementwise ─────────────────────────────────────────────────────

fn check_same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{}: {:?} vs {:?}",
            op,
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|_, d| vec![d.to_vec(), d.to_vec()]),
    ))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "sub")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|_, d| vec![d.to_vec(), d.iter().map(|v| -v).collect()]),
    ))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|node, d| {
            let a = node.parents[0].data();
            let b = node.parents[1].data();
            vec![
                d.iter().zip(b).map(|(di, bi)| di * bi).collect(),
                d.iter().zip(a).map(|(di, ai)| di * ai).collect(),
            ]
        }),
    ))
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let data = a.data().iter().map(|x| x * c).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |_, d| vec![d.iter().map(|v| v * c).collect()]),
    )
}

/// Elementwise product with a constant mask or weight matrix; no gradient
/// flows to `c`.
pub fn mul_const(a: &Tensor, c: &[f64]) -> Result<Tensor> {
    if c.len() != a.numel() {
        return Err(Error::ShapeMismatch(format!(
            "mul_const: tensor has {} elements, mask has {}",
            a.numel(),
            c.len()
        )));
    }
    let data = a.data().iter().zip(c).map(|(x, y)| x * y).collect();
    let c = c.to_vec();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |_, d| vec![d.iter().zip(&c).map(|(di, ci)| di * ci).collect()]),
    ))
}

pub fn exp_elem(a: &Tensor) -> Tensor {
    let data: Vec<f64> = a.data().iter().map(|x| x.exp()).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(|node, d| vec![d.iter().zip(&node.data).map(|(di, oi)| di * oi).collect()]),
    )
}

/// Natural log; inputs must be strictly positive.
pub fn ln_elem(a: &Tensor) -> Result<Tensor> {
    if a.data().iter().any(|&x| x <= 0.0) {
        return Err(Error::NonFinite("ln of non-positive value"));
    }
    let data = a.data().iter().map(|x| x.ln()).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(|node, d| {
            let x = node.parents[0].data();
            vec![d.iter().zip(x).map(|(di, xi)| di / xi).collect()]
        }),
    ))
}

pub fn relu(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|x| x.max(0.0)).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(|node, d| {
            let x = node.parents[0].data();
            vec![d
                .iter()
                .zip(x)
                .map(|(di, xi)| if *xi > 0.0 { *di } else { 0.0 })
                .collect()]
        }),
    )
}

// ── reductions ──────────────────────────────────────────────────────

pub fn sum_all(a: &Tensor) -> Tensor {
    let s: f64 = a.data().iter().sum();
    Tensor::from_op(
        vec![1],
        vec![s],
        vec![a.clone()],
        Box::new(|node, d| vec![vec![d[0]; node.parents[0].numel()]]),
    )
}

pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.numel() as f64;
    scale(&sum_all(a), 1.0 / n)
}

/// Row sums of a 2-D tensor: [r, c] -> [r].
pub fn row_sum(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let data = a.data();
    let out: Vec<f64> = (0..r).map(|i| data[i * c..(i + 1) * c].iter().sum()).collect();
    Tensor::from_op(
        vec![r],
        out,
        vec![a.clone()],
        Box::new(move |_, d| {
            let mut g = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    g[i * c + j] = d[i];
                }
            }
            vec![g]
        }),
    )
}

/// Weighted sum with a constant coefficient vector: sum_k v[k] * a[k].
pub fn dot_const(a: &Tensor, v: &[f64]) -> Result<Tensor> {
    if v.len() != a.numel() {
        return Err(Error::ShapeMismatch(format!(
            "dot_const: tensor has {} elements, coefficients {}",
            a.numel(),
            v.len()
        )));
    }
    let s: f64 = a.data().iter().zip(v).map(|(x, y)| x * y).sum();
    let v = v.to_vec();
    Ok(Tensor::from_op(
        vec![1],
        vec![s],
        vec![a.clone()],
        Box::new(move |_, d| vec![v.iter().map(|vi| d[0] * vi).collect()]),
    ))
}

/// Weighted log reduction: sum of v[k] * ln(a[k]) over entries with
/// nonzero weight. Entries with v[k] == 0 are never evaluated, so exact
/// zeros in `a` are fine there.
pub fn ln_dot_const(a: &Tensor, v: &[f64]) -> Result<Tensor> {
    if v.len() != a.numel() {
        return Err(Error::ShapeMismatch(format!(
            "ln_dot_const: tensor has {} elements, coefficients {}",
            a.numel(),
            v.len()
        )));
    }
    let mut s = 0.0;
    for (x, w) in a.data().iter().zip(v) {
        if *w != 0.0 {
            if *x <= 0.0 {
                return Err(Error::NonFinite("log of non-positive value"));
            }
            s += w * x.ln();
        }
    }
    let v = v.to_vec();
    let x = a.data().to_vec();
    Ok(Tensor::from_op(
        vec![1],
        vec![s],
        vec![a.clone()],
        Box::new(move |_, d| {
            vec![v
                .iter()
                .zip(&x)
                .map(|(w, xk)| if *w == 0.0 { 0.0 } else { d[0] * w / xk })
                .collect()]
        }),
    ))
}

// ── matrix products ─────────────────────────────────────────────────

/// Raw row-major GEMM: c[m,n] (+)= a[m,k] * b[k,n], with optional
/// transposes interpreting a as [k,m] or b as [n,k].
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// [m, k] x [k, n] -> [m, n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(Error::ShapeMismatch(format!(
            "matmul: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
    Ok(Tensor::from_op(
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |node, d| {
            let a = node.parents[0].data();
            let b = node.parents[1].data();
            // dA = dC * B^T, dB = A^T * dC
            let mut da = vec![0.0; m * k];
            let mut db = vec![0.0; k * n];
            // dC[m,n] * (B^T)[n,k]: treat b as transposed [n,k] source.
            gemm(m, n, k, d, false, b, true, 0.0, &mut da);
            gemm(k, m, n, a, true, d, false, 0.0, &mut db);
            vec![da, db]
        }),
    ))
}

/// [m, k] x [n, k]^T -> [m, n]. Saves materializing the transpose; used
/// for logits against a tied embedding table.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "matmul_nt: {:?} x {:?}^T",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), true, 0.0, &mut out);
    Ok(Tensor::from_op(
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |node, d| {
            let a = node.parents[0].data();
            let b = node.parents[1].data();
            // out = A B^T: dA = dC * B, dB = dC^T * A
            let mut da = vec![0.0; m * k];
            let mut db = vec![0.0; n * k];
            gemm(m, n, k, d, false, b, false, 0.0, &mut da);
            gemm(n, m, k, d, true, a, false, 0.0, &mut db);
            vec![da, db]
        }),
    ))
}

/// Broadcast a bias row over every row of a 2-D tensor.
pub fn add_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || bias.shape() != [a.cols()] {
        return Err(Error::ShapeMismatch(format!(
            "add_bias: {:?} + {:?}",
            a.shape(),
            bias.shape()
        )));
    }
    let (r, c) = (a.rows(), a.cols());
    let b = bias.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| x + b[i % c])
        .collect();
    Ok(Tensor::from_op(
        vec![r, c],
        data,
        vec![a.clone(), bias.clone()],
        Box::new(move |_, d| {
            let mut db = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    db[j] += d[i * c + j];
                }
            }
            vec![d.to_vec(), db]
        }),
    ))
}

// ── row selection ───────────────────────────────────────────────────

/// Select rows of a 2-D tensor by index (repeats allowed); backward
/// scatter-adds into the source. Doubles as embedding lookup.
pub fn gather_rows(a: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (r, c) = (a.rows(), a.cols());
    for &i in idx {
        if i >= r {
            return Err(Error::ShapeMismatch(format!(
                "gather_rows: index {} out of {} rows",
                i, r
            )));
        }
    }
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(&a.data()[i * c..(i + 1) * c]);
    }
    let idx = idx.to_vec();
    Ok(Tensor::from_op(
        vec![idx.len(), c],
        data,
        vec![a.clone()],
        Box::new(move |_, d| {
            let mut g = vec![0.0; r * c];
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    g[i * c + j] += d[k * c + j];
                }
            }
            vec![g]
        }),
    ))
}

// ── normalization and regularization ────────────────────────────────

/// Numerically safe softmax over each row of a 2-D tensor.
pub fn row_softmax(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let x = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[i * c + j] = e;
            s += e;
        }
        for j in 0..c {
            out[i * c + j] /= s;
        }
    }
    Tensor::from_op(
        vec![r, c],
        out,
        vec![a.clone()],
        Box::new(move |node, d| {
            let p = &node.data;
            let mut g = vec![0.0; r * c];
            for i in 0..r {
                let base = i * c;
                let mut dot = 0.0;
                for j in 0..c {
                    dot += d[base + j] * p[base + j];
                }
                for j in 0..c {
                    g[base + j] = p[base + j] * (d[base + j] - dot);
                }
            }
            vec![g]
        }),
    )
}

/// Per-row normalization with learned gain and bias, eps inside the sqrt.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (r, c) = (x.rows(), x.cols());
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "layer_norm: x {:?}, gain {:?}, bias {:?}",
            x.shape(),
            gain.shape(),
            bias.shape()
        )));
    }
    let xd = x.data();
    let g = gain.data();
    let b = bias.data();
    let mut out = vec![0.0; r * c];
    let mut xhat = vec![0.0; r * c];
    let mut inv_std = vec![0.0; r];
    for i in 0..r {
        let row = &xd[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[i] = inv;
        for j in 0..c {
            let h = (row[j] - mean) * inv;
            xhat[i * c + j] = h;
            out[i * c + j] = g[j] * h + b[j];
        }
    }
    Ok(Tensor::from_op(
        vec![r, c],
        out,
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(move |node, d| {
            let g = node.parents[1].data();
            let mut dx = vec![0.0; r * c];
            let mut dg = vec![0.0; c];
            let mut db = vec![0.0; c];
            for i in 0..r {
                let base = i * c;
                let inv = inv_std[i];
                // dxhat = d * gain; fold the mean and variance paths:
                // dx = inv/c * (c*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
                let mut sum_dh = 0.0;
                let mut sum_dh_h = 0.0;
                for j in 0..c {
                    let dh = d[base + j] * g[j];
                    sum_dh += dh;
                    sum_dh_h += dh * xhat[base + j];
                    dg[j] += d[base + j] * xhat[base + j];
                    db[j] += d[base + j];
                }
                for j in 0..c {
                    let dh = d[base + j] * g[j];
                    dx[base + j] =
                        inv / c as f64 * (c as f64 * dh - sum_dh - xhat[base + j] * sum_dh_h);
                }
            }
            vec![dx, dg, db]
        }),
    ))
}

/// Inverted dropout: kept entries are scaled by 1/(1-rate) so the
/// expectation is unchanged; rate 0 passes through without drawing.
pub fn dropout_apply(x: &Tensor, rate: f64, stream: &mut RngStream) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidRate(rate));
    }
    if rate == 0.0 {
        let data = x.data().to_vec();
        return Ok(Tensor::from_op(
            x.shape().to_vec(),
            data,
            vec![x.clone()],
            Box::new(|_, d| vec![d.to_vec()]),
        ));
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if stream.next_f64() < rate { 0.0 } else { keep_scale })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |_, d| vec![d.iter().zip(&mask).map(|(di, mi)| di * mi).collect()]),
    ))
}

// ── cosine similarity ───────────────────────────────────────────────

fn row_norms(t: &Tensor, what: &str) -> Result<Vec<f64>> {
    let (r, c) = (t.rows(), t.cols());
    let d = t.data();
    let mut norms = Vec::with_capacity(r);
    for i in 0..r {
        let n = d[i * c..(i + 1) * c]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if n == 0.0 {
            let _ = what;
            return Err(Error::ZeroNormRow(i));
        }
        norms.push(n);
    }
    Ok(norms)
}

/// All-pairs cosine similarity between rows: [n, d] x [m, d] -> [n, m].
pub fn cosine_sim_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "cosine_sim_matrix: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, d, m) = (a.rows(), a.cols(), b.rows());
    let na = row_norms(a, "left")?;
    let nb = row_norms(b, "right")?;
    let ahat: Vec<f64> = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v / na[i / d])
        .collect();
    let bhat: Vec<f64> = b
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v / nb[i / d])
        .collect();
    let mut out = vec![0.0; n * m];
    gemm(n, d, m, &ahat, false, &bhat, true, 0.0, &mut out);
    Ok(Tensor::from_op(
        vec![n, m],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |node, dout| {
            let s = &node.data;
            // ds/da_i = (bhat_j - s_ij * ahat_i) / |a_i|
            let mut da = vec![0.0; n * d];
            let mut db = vec![0.0; m * d];
            // da_i = (1/|a_i|) [ sum_j d_ij bhat_j - (sum_j d_ij s_ij) ahat_i ]
            gemm(n, m, d, dout, false, &bhat, false, 0.0, &mut da);
            let mut row_ds: Vec<f64> = vec![0.0; n];
            for i in 0..n {
                for j in 0..m {
                    row_ds[i] += dout[i * m + j] * s[i * m + j];
                }
            }
            for i in 0..n {
                for k in 0..d {
                    da[i * d + k] = (da[i * d + k] - row_ds[i] * ahat[i * d + k]) / na[i];
                }
            }
            // db_j = (1/|b_j|) [ sum_i d_ij ahat_i - (sum_i d_ij s_ij) bhat_j ]
            gemm(m, n, d, dout, true, &ahat, false, 0.0, &mut db);
            let mut col_ds: Vec<f64> = vec![0.0; m];
            for i in 0..n {
                for j in 0..m {
                    col_ds[j] += dout[i * m + j] * s[i * m + j];
                }
            }
            for j in 0..m {
                for k in 0..d {
                    db[j * d + k] = (db[j * d + k] - col_ds[j] * bhat[j * d + k]) / nb[j];
                }
            }
            vec![da, db]
        }),
    ))
}

/// Row-by-row cosine similarity: [n, d] x [n, d] -> [n].
pub fn cosine_sim_pairs(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "cosine_sim_pairs")?;
    let (n, d) = (a.rows(), a.cols());
    let na = row_norms(a, "left")?;
    let nb = row_norms(b, "right")?;
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let dot: f64 = (0..d).map(|k| ad[i * d + k] * bd[i * d + k]).sum();
        out[i] = dot / (na[i] * nb[i]);
    }
    Ok(Tensor::from_op(
        vec![n],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |node, dout| {
            let s = &node.data;
            let ad = node.parents[0].data();
            let bd = node.parents[1].data();
            let mut da = vec![0.0; n * d];
            let mut db = vec![0.0; n * d];
            for i in 0..n {
                for k in 0..d {
                    let ahat = ad[i * d + k] / na[i];
                    let bhat = bd[i * d + k] / nb[i];
                    da[i * d + k] = dout[i] * (bhat - s[i] * ahat) / na[i];
                    db[i * d + k] = dout[i] * (ahat - s[i] * bhat) / nb[i];
                }
            }
            vec![da, db]
        }),
    ))
}

// ── attention ───────────────────────────────────────────────────────

/// One attention block within a batch: query rows [q_off, q_off+q_len)
/// attend to key/value rows [kv_off, kv_off+kv_len).
#[derive(Debug, Clone, Copy)]
pub struct AttnSpan {
    pub q_off: usize,
    pub q_len: usize,
    pub kv_off: usize,
    pub kv_len: usize,
}

/// Fused scaled dot-product attention over per-sentence spans with an
/// optional causal restriction and per-key validity mask. Inputs are the
/// already-projected q, k, v matrices [rows, d]; heads split d evenly.
///
/// Fusing the whole block keeps the graph one node per layer instead of
/// one per sentence, and the saved attention weights make the backward
/// pass exact: dS = A .* (dA - rowsum(dA .* A)).
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
    spans: &[AttnSpan],
    causal: bool,
    kv_valid: Option<&[bool]>,
) -> Result<Tensor> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d {
        return Err(Error::ShapeMismatch(format!(
            "attention: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "attention: {} heads do not divide width {}",
            n_heads, d
        )));
    }
    if let Some(valid) = kv_valid {
        if valid.len() != k.rows() {
            return Err(Error::ShapeMismatch(format!(
                "attention: {} kv rows, {} validity flags",
                k.rows(),
                valid.len()
            )));
        }
    }
    let dh = d / n_heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let q_rows = q.rows();

    let mut out = vec![0.0; q_rows * d];
    // Attention weights saved per (span, head), each q_len*kv_len.
    let mut saved: Vec<Vec<f64>> = Vec::with_capacity(spans.len() * n_heads);
    let kv_valid: Option<Vec<bool>> = kv_valid.map(|v| v.to_vec());

    for span in spans {
        for h in 0..n_heads {
            let hoff = h * dh;
            let mut weights = vec![0.0; span.q_len * span.kv_len];
            for qi in 0..span.q_len {
                let qrow = (span.q_off + qi) * d + hoff;
                let mut max = f64::NEG_INFINITY;
                let mut scores = vec![f64::NEG_INFINITY; span.kv_len];
                for kj in 0..span.kv_len {
                    if causal && kj > qi {
                        break;
                    }
                    if let Some(valid) = &kv_valid {
                        if !valid[span.kv_off + kj] {
                            continue;
                        }
                    }
                    let krow = (span.kv_off + kj) * d + hoff;
                    let mut dot = 0.0;
                    for t in 0..dh {
                        dot += qd[qrow + t] * kd[krow + t];
                    }
                    let s = dot * inv_sqrt;
                    scores[kj] = s;
                    if s > max {
                        max = s;
                    }
                }
                let orow = (span.q_off + qi) * d + hoff;
                if max == f64::NEG_INFINITY {
                    // Fully masked query row: contributes nothing.
                    continue;
                }
                let mut sum = 0.0;
                for kj in 0..span.kv_len {
                    if scores[kj] == f64::NEG_INFINITY {
                        continue;
                    }
                    let e = (scores[kj] - max).exp();
                    weights[qi * span.kv_len + kj] = e;
                    sum += e;
                }
                for kj in 0..span.kv_len {
                    let w = weights[qi * span.kv_len + kj] / sum;
                    weights[qi * span.kv_len + kj] = w;
                    if w != 0.0 {
                        let vrow = (span.kv_off + kj) * d + hoff;
                        for t in 0..dh {
                            out[orow + t] += w * vd[vrow + t];
                        }
                    }
                }
            }
            saved.push(weights);
        }
    }

    let spans_b = spans.to_vec();
    Ok(Tensor::from_op(
        vec![q_rows, d],
        out,
        vec![q.clone(), k.clone(), v.clone()],
        Box::new(move |node, dout| {
            let qd = node.parents[0].data();
            let kd = node.parents[1].data();
            let vd = node.parents[2].data();
            let mut dq = vec![0.0; node.parents[0].numel()];
            let mut dk = vec![0.0; node.parents[1].numel()];
            let mut dv = vec![0.0; node.parents[2].numel()];
            for (si, span) in spans_b.iter().enumerate() {
                for h in 0..n_heads {
                    let hoff = h * dh;
                    let a = &saved[si * n_heads + h];
                    for qi in 0..span.q_len {
                        let qrow = (span.q_off + qi) * d + hoff;
                        let orow = qrow;
                        // dA[qi, kj] = dout_row . v_kj ; rowdot = sum_kj dA*A
                        let mut rowdot = 0.0;
                        let arow = &a[qi * span.kv_len..(qi + 1) * span.kv_len];
                        let mut da = vec![0.0; span.kv_len];
                        for kj in 0..span.kv_len {
                            let w = arow[kj];
                            let vrow = (span.kv_off + kj) * d + hoff;
                            let mut dot = 0.0;
                            for t in 0..dh {
                                dot += dout[orow + t] * vd[vrow + t];
                                dv[vrow + t] += w * dout[orow + t];
                            }
                            da[kj] = dot;
                            rowdot += dot * w;
                        }
                        for kj in 0..span.kv_len {
                            let w = arow[kj];
                            if w == 0.0 {
                                continue;
                            }
                            let ds = w * (da[kj] - rowdot) * inv_sqrt;
                            let krow = (span.kv_off + kj) * d + hoff;
                            for t in 0..dh {
                                dq[qrow + t] += ds * kd[krow + t];
                                dk[krow + t] += ds * qd[qrow + t];
                            }
                        }
                    }
                }
            }
            vec![dq, dk, dv]
        }),
    ))
}
