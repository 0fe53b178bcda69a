//! Geometry diagnostics over the softmax embedding rows: uniformity,
//! mean pairwise distance (overall and per frequency bucket), the
//! partition-function isotropy statistics, and a 2-D PCA projection.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::RESERVED_TOKENS;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::{RngStream, StreamPurpose};

/// Content-token embedding rows; reserved rows are stripped on
/// extraction and never participate in any statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub v: usize,
    pub d: usize,
    pub w: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(v: usize, d: usize, w: Vec<f64>) -> Result<EmbeddingMatrix> {
        if w.len() != v * d || v < 2 || d < 1 {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {}x{} embedding matrix",
                w.len(),
                v,
                d
            )));
        }
        if !w.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("embedding matrix"));
        }
        Ok(EmbeddingMatrix { v, d, w })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.w[i * self.d..(i + 1) * self.d]
    }
}

/// Content rows of the (tied) softmax matrix.
pub fn softmax_embeddings(params: &ModelParams) -> Result<EmbeddingMatrix> {
    let m = params.softmax_matrix();
    let (rows, d) = (m.rows(), m.cols());
    let reserved = RESERVED_TOKENS.len();
    if rows <= reserved + 1 {
        return Err(Error::ShapeMismatch(format!("{} embedding rows is too few", rows)));
    }
    EmbeddingMatrix::new(rows - reserved, d, m.data()[reserved * d..].to_vec())
}

// ── pairwise statistics on normalized rows ──────────────────────────

/// Pair enumeration switches to seeded subsampling at this many rows.
const EXACT_PAIR_LIMIT: usize = 5000;
const SUBSAMPLE_PAIRS: usize = 1_000_000;

fn normalized_rows(emb: &EmbeddingMatrix, subset: &[usize]) -> Result<Vec<f64>> {
    let d = emb.d;
    let mut out = Vec::with_capacity(subset.len() * d);
    for &i in subset {
        let row = emb.row(i);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateRow(i));
        }
        out.extend(row.iter().map(|x| x / norm));
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean of `f(squared distance)` over unordered distinct pairs of the
/// normalized subset rows; exact when small, seeded-subsample above the
/// limit. Also returns the standard error of that mean.
fn pair_mean(rows: &[f64], n: usize, d: usize, f: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0.0;
    let mut visit = |i: usize, j: usize| {
        let v = f(sq_dist(&rows[i * d..(i + 1) * d], &rows[j * d..(j + 1) * d]));
        sum += v;
        sum_sq += v * v;
        count += 1.0;
    };
    if n <= EXACT_PAIR_LIMIT {
        for i in 0..n {
            for j in (i + 1)..n {
                visit(i, j);
            }
        }
    } else {
        let mut s = RngStream::new(0, StreamPurpose::Subsample);
        for _ in 0..SUBSAMPLE_PAIRS {
            let i = s.below(n);
            let mut j = s.below(n - 1);
            if j >= i {
                j += 1;
            }
            visit(i, j);
        }
    }
    let mean = sum / count;
    let var = (sum_sq / count - mean * mean).max(0.0);
    (mean, (var / count).sqrt())
}

/// Gaussian-potential uniformity of the normalized rows:
/// log mean over pairs of exp(-2 ||wi - wj||^2). Always <= 0; its
/// negation is the reported spread measure.
pub fn uniformity(emb: &EmbeddingMatrix) -> Result<f64> {
    let subset: Vec<usize> = (0..emb.v).collect();
    let rows = normalized_rows(emb, &subset)?;
    let (mean, _) = pair_mean(&rows, emb.v, emb.d, |d2| (-2.0 * d2).exp());
    Ok(mean.ln())
}

/// Subsampled estimate regardless of size, with the standard error of
/// the log-mean; used to validate the estimator against enumeration.
pub fn uniformity_subsampled(emb: &EmbeddingMatrix, pairs: usize, seed: u64) -> Result<(f64, f64)> {
    let subset: Vec<usize> = (0..emb.v).collect();
    let rows = normalized_rows(emb, &subset)?;
    let mut s = RngStream::new(seed, StreamPurpose::Subsample);
    let d = emb.d;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..pairs {
        let i = s.below(emb.v);
        let mut j = s.below(emb.v - 1);
        if j >= i {
            j += 1;
        }
        let v = (-2.0 * sq_dist(&rows[i * d..(i + 1) * d], &rows[j * d..(j + 1) * d])).exp();
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / pairs as f64;
    let var = (sum_sq / pairs as f64 - mean * mean).max(0.0);
    let se_mean = (var / pairs as f64).sqrt();
    Ok((mean.ln(), se_mean / mean))
}

/// Mean pairwise L2 distance over normalized rows of the subset.
pub fn avg_pairwise_distance(emb: &EmbeddingMatrix, subset: &[usize]) -> Result<f64> {
    if subset.len() < 2 {
        return Err(Error::SubsetTooSmall(subset.len()));
    }
    let rows = normalized_rows(emb, subset)?;
    let (mean, _) = pair_mean(&rows, subset.len(), emb.d, f64::sqrt);
    Ok(mean)
}

/// Within-bucket mean distances ordered frequent to rare; buckets with
/// fewer than two rows carry no value.
pub fn bucket_distance_report(
    emb: &EmbeddingMatrix,
    bucket_of: &[usize],
    n_buckets: usize,
) -> Result<Vec<Option<f64>>> {
    if bucket_of.len() != emb.v {
        return Err(Error::ShapeMismatch(format!(
            "{} bucket labels for {} rows",
            bucket_of.len(),
            emb.v
        )));
    }
    let mut report = Vec::with_capacity(n_buckets);
    for b in 0..n_buckets {
        let rows: Vec<usize> = (0..emb.v).filter(|&i| bucket_of[i] == b).collect();
        report.push(if rows.len() < 2 {
            None
        } else {
            Some(avg_pairwise_distance(emb, &rows)?)
        });
    }
    Ok(report)
}

// ── symmetric eigendecomposition ────────────────────────────────────

const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi on a symmetric matrix. Returns eigenvalues in
/// descending order with matching unit eigenvectors as rows.
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return Err(Error::ShapeMismatch(format!("{} values for {n}x{n}", a.len())));
    }
    let mut m = a.to_vec();
    for i in 0..n {
        for j in 0..n {
            if (m[i * n + j] - m[j * n + i]).abs() > 1e-9 * (1.0 + m[i * n + j].abs()) {
                return Err(Error::EigenFailure("matrix is not symmetric".into()));
            }
        }
    }
    // vecs starts as identity; rows end up as eigenvectors.
    let mut vecs = vec![0.0; n * n];
    for i in 0..n {
        vecs[i * n + i] = 1.0;
    }
    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off(&m) <= JACOBI_TOL * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() <= JACOBI_TOL * scale / (n * n) as f64 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vpk = vecs[p * n + k];
                    let vqk = vecs[q * n + k];
                    vecs[p * n + k] = c * vpk - s * vqk;
                    vecs[q * n + k] = s * vpk + c * vqk;
                }
            }
        }
    }
    if !converged && off(&m) > JACOBI_TOL * scale {
        return Err(Error::EigenFailure(format!(
            "off-diagonal norm {} after {} sweeps",
            off(&m),
            JACOBI_MAX_SWEEPS
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[j * n + j]
            .partial_cmp(&m[i * n + i])
            .unwrap()
            .then_with(|| {
                let sign = |r: usize| {
                    vecs[r * n..(r + 1) * n]
                        .iter()
                        .find(|x| **x != 0.0)
                        .map_or(0.0, |x| x.signum())
                };
                sign(j).partial_cmp(&sign(i)).unwrap()
            })
    });
    let values: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut rows = Vec::with_capacity(n * n);
    for &i in &order {
        rows.extend_from_slice(&vecs[i * n..(i + 1) * n]);
    }
    Ok((values, rows))
}

// ── isotropy ────────────────────────────────────────────────────────

/// Partition-function values F(c) = sum_i exp(c . w_i) over both signs
/// of every eigenvector of W^T W.
fn partition_values(emb: &EmbeddingMatrix) -> Result<Vec<f64>> {
    let d = emb.d;
    let mut gram = vec![0.0; d * d];
    for i in 0..emb.v {
        let row = emb.row(i);
        for a in 0..d {
            for b in 0..d {
                gram[a * d + b] += row[a] * row[b];
            }
        }
    }
    let (_, vecs) = symmetric_eigen(&gram, d)?;
    let mut f_values = Vec::with_capacity(2 * d);
    for k in 0..d {
        let c = &vecs[k * d..(k + 1) * d];
        for sign in [1.0, -1.0] {
            let mut f = 0.0;
            for i in 0..emb.v {
                let dot: f64 = emb.row(i).iter().zip(c).map(|(x, y)| x * y).sum();
                f += (sign * dot).exp();
            }
            f_values.push(f);
        }
    }
    Ok(f_values)
}

/// Min-to-max ratio of the partition function over eigendirections;
/// 1 means perfectly direction-independent mass.
pub fn isotropy_i1(emb: &EmbeddingMatrix) -> Result<f64> {
    let f = partition_values(emb)?;
    let min = f.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = f.iter().cloned().fold(0.0, f64::max);
    Ok(min / max)
}

/// Coefficient of variation (population) of the partition function.
pub fn isotropy_i2(emb: &EmbeddingMatrix) -> Result<f64> {
    let f = partition_values(emb)?;
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let var = f.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

// ── PCA ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaProjection {
    /// One (x, y) pair per embedding row.
    pub coords: Vec<[f64; 2]>,
    /// Variance along the two principal axes.
    pub explained: [f64; 2],
}

/// Project mean-centered rows onto the top two principal axes. Each
/// axis is oriented so its largest-magnitude component is positive.
pub fn pca_2d(emb: &EmbeddingMatrix) -> Result<PcaProjection> {
    if emb.v < 3 {
        return Err(Error::SubsetTooSmall(emb.v));
    }
    let (v, d) = (emb.v, emb.d);
    let mut mean = vec![0.0; d];
    for i in 0..v {
        for (m, x) in mean.iter_mut().zip(emb.row(i)) {
            *m += x / v as f64;
        }
    }
    let mut centered = Vec::with_capacity(v * d);
    for i in 0..v {
        let row = emb.row(i);
        centered.extend((0..d).map(|j| row[j] - mean[j]));
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..v {
        let row = &centered[i * d..(i + 1) * d];
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += row[a] * row[b] / (v - 1) as f64;
            }
        }
    }
    let (values, vecs) = symmetric_eigen(&cov, d)?;
    let mut axes = [vec![0.0; d], vec![0.0; d]];
    let mut explained = [0.0, 0.0];
    for k in 0..2.min(d) {
        let mut axis = vecs[k * d..(k + 1) * d].to_vec();
        let lead = axis
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if axis[lead] < 0.0 {
            for x in &mut axis {
                *x = -*x;
            }
        }
        axes[k] = axis;
        explained[k] = values[k];
    }
    let coords = (0..v)
        .map(|i| {
            let row = &centered[i * d..(i + 1) * d];
            let proj = |axis: &[f64]| row.iter().zip(axis).map(|(x, y)| x * y).sum::<f64>();
            [proj(&axes[0]), if d > 1 { proj(&axes[1]) } else { 0.0 }]
        })
        .collect();
    Ok(PcaProjection { coords, explained })
}

// ── report ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometryReport {
    pub neg_uniformity: f64,
    pub avg_distance: f64,
    pub i1: f64,
    pub i2: f64,
    /// Within-bucket mean distance, frequent first; null for buckets
    /// with fewer than two member rows.
    pub per_bucket_distance: Vec<Option<f64>>,
}

pub fn geometry_report(
    emb: &EmbeddingMatrix,
    bucket_of: &[usize],
    n_buckets: usize,
) -> Result<GeometryReport> {
    let all: Vec<usize> = (0..emb.v).collect();
    Ok(GeometryReport {
        neg_uniformity: -uniformity(emb)?,
        avg_distance: avg_pairwise_distance(emb, &all)?,
        i1: isotropy_i1(emb)?,
        i2: isotropy_i2(emb)?,
        per_bucket_distance: bucket_distance_report(emb, bucket_of, n_buckets)?,
    })
}

// ── embedding dump ──────────────────────────────────────────────────

pub fn write_embedding_dump(emb: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let mut out = format!("{} {}\n", emb.v, emb.d);
    for i in 0..emb.v {
        let line: Vec<String> = emb.row(i).iter().map(|x| format!("{x:.12e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_embedding_dump(path: &Path) -> Result<EmbeddingMatrix> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptyText)?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Msg(format!("bad dump header '{header}'"))))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(Error::Msg(format!("bad dump header '{header}'")));
    }
    let (v, d) = (dims[0], dims[1]);
    let mut w = Vec::with_capacity(v * d);
    for line in lines {
        for t in line.split_whitespace() {
            w.push(t.parse::<f64>().map_err(|_| Error::Msg(format!("bad float '{t}'")))?);
        }
    }
    EmbeddingMatrix::new(v, d, w)
}
