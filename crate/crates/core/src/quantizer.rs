//! Token-to-codebook assignment, angles and per-entry top-k neighbor sets.

use std::str::FromStr;

use rayon::prelude::*;

use crate::codebook::Codebook;
use crate::error::{shape_err, Error, Result};
use crate::probe;
use crate::tensor::{gemm, l2_norm, MatRef, Tensor};

pub const NORMALIZE_EPS: f64 = 1e-12;
pub const ANGLE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizeMode {
    /// Nearest entry by Euclidean distance.
    Euclidean,
    /// Largest cosine between l2-normalized token and entry.
    Spherical,
}

impl FromStr for QuantizeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "spherical" => Ok(Self::Spherical),
            _ => Err(Error::Config(format!("unknown quantize mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuantizationResult {
    pub indices: Vec<usize>,
    /// `N x d` raw codebook rows gathered by `indices`.
    pub quantized: Tensor,
    /// `N x K` cosines between normalized tokens and entries; spherical mode only.
    pub cos_table: Option<Tensor>,
    pub mode: QuantizeMode,
}

/// Per-entry positive token sets: `sets[j]` holds the `min(k, N)` tokens with
/// the largest cosine to entry `j`, by descending cosine then ascending index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSets {
    pub sets: Vec<Vec<usize>>,
}

impl NeighborSets {
    /// `member[j * n + i]` is true when token `i` is a positive of entry `j`.
    pub fn membership(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; self.sets.len() * n];
        for (j, set) in self.sets.iter().enumerate() {
            for &i in set {
                m[j * n + i] = true;
            }
        }
        m
    }
}

/// Divides each row by `max(||row||, eps)`.
pub fn normalize_rows(v: &Tensor, eps: f64) -> Tensor {
    probe::hit_normalize_rows();
    let mut out = v.clone();
    let cols = v.cols();
    for row in out.data_mut().chunks_mut(cols) {
        let n = l2_norm(row).max(eps);
        row.iter_mut().for_each(|x| *x /= n);
    }
    out
}

/// `a * b^T` for row-major `a: [n x d]`, `b: [k x d]`.
fn dot_table(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, d, k) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; n * k];
    gemm(
        n,
        d,
        k,
        MatRef::row_major(a.data(), d),
        MatRef::transposed(b.data(), d),
        &mut out,
        0.0,
    );
    Tensor::from_parts(vec![n, k], out)
}

/// First index of the row maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Assigns every token (row of `z`) to a codebook entry.
pub fn quantize(z: &Tensor, cb: &Codebook, mode: QuantizeMode) -> Result<QuantizationResult> {
    if cb.is_empty() {
        return Err(Error::Config("empty codebook".into()));
    }
    if z.rank() != 2 || z.cols() != cb.dim() {
        return shape_err(
            "quantize",
            format!("tokens {:?} vs codebook dim {}", z.dims(), cb.dim()),
        );
    }
    let k = cb.len();
    let (indices, cos_table) = match mode {
        QuantizeMode::Euclidean => {
            // argmin ||z - e||^2 = argmax (2 z.e - ||e||^2)
            let dots = dot_table(z, &cb.entries);
            let sq: Vec<f64> = cb.entries.row_norms().iter().map(|n| n * n).collect();
            let idx: Vec<usize> = dots
                .data()
                .par_chunks(k)
                .map(|row| {
                    let mut best = 0;
                    let mut best_v = f64::NEG_INFINITY;
                    for (j, (&dot, &s)) in row.iter().zip(&sq).enumerate() {
                        let v = 2.0 * dot - s;
                        if v > best_v {
                            best_v = v;
                            best = j;
                        }
                    }
                    best
                })
                .collect();
            (idx, None)
        }
        QuantizeMode::Spherical => {
            let zn = normalize_rows(z, NORMALIZE_EPS);
            let en = normalize_rows(&cb.entries, NORMALIZE_EPS);
            let cos = dot_table(&zn, &en);
            let idx: Vec<usize> = cos.data().par_chunks(k).map(argmax).collect();
            (idx, Some(cos))
        }
    };
    let quantized = gather(&cb.entries, &indices);
    Ok(QuantizationResult {
        indices,
        quantized,
        cos_table,
        mode,
    })
}

fn gather(entries: &Tensor, indices: &[usize]) -> Tensor {
    let d = entries.cols();
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend_from_slice(entries.row(i));
    }
    Tensor::from_parts(vec![indices.len(), d], data)
}

/// `arccos(clamp(cos, -1 + eps, 1 - eps))`, element-wise.
pub fn angles(cos_table: &Tensor, eps: f64) -> Tensor {
    cos_table.map(|c| c.clamp(-1.0 + eps, 1.0 - eps).acos())
}

/// For each codebook entry (column of `cos_table`), the `min(k, N)` tokens
/// with the largest cosine.
pub fn top_k_sets(cos_table: &Tensor, k: usize) -> Result<NeighborSets> {
    if k < 1 {
        return Err(Error::Config("top-k needs k >= 1".into()));
    }
    let (n, entries) = (cos_table.rows(), cos_table.cols());
    let keep = k.min(n);
    // One row-major pass; each entry keeps a sorted buffer of (cos, token).
    // A later token only displaces on a strictly larger cosine, so equal
    // cosines keep ascending token order.
    let mut sets: Vec<Vec<(f64, usize)>> = vec![Vec::with_capacity(keep + 1); entries];
    for (i, row) in cos_table.data().chunks_exact(entries).enumerate() {
        for (best, &c) in sets.iter_mut().zip(row) {
            if best.len() == keep && !(c > best[keep - 1].0) {
                continue;
            }
            let pos = best.partition_point(|&(b, _)| b >= c);
            best.insert(pos, (c, i));
            best.truncate(keep);
        }
    }
    let sets = sets
        .into_iter()
        .map(|b| b.into_iter().map(|(_, i)| i).collect())
        .collect();
    Ok(NeighborSets { sets })
}
