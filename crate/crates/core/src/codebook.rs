//! The learnable codebook, its ball-bounded norm schedule, usage accounting,
//! geometric diagnostics and post-hoc k-means reduction.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pnm;
use crate::probe;
use crate::tensor::{l2_norm, Tensor};

/// How the norm bound `M(t)` evolves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundMode {
    /// `M(t) = exp(alpha * t)`.
    Exponential,
    /// `M(t) = 1`.
    FixedOne,
    /// No bound; `M(t) = +inf`.
    Unbounded,
}

impl FromStr for BoundMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" => Ok(Self::Exponential),
            "fixed-one" => Ok(Self::FixedOne),
            "unbounded" => Ok(Self::Unbounded),
            _ => Err(Error::Config(format!("unknown bound mode '{s}'"))),
        }
    }
}

/// Radius of the feasible ball at step `t`.
pub fn norm_bound(t: u64, alpha: f64, mode: BoundMode) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::Contract(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(match mode {
        BoundMode::Exponential => (alpha * t as f64).exp(),
        BoundMode::FixedOne => 1.0,
        BoundMode::Unbounded => f64::INFINITY,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `K x d` entries.
    pub entries: Tensor,
    pub alpha: f64,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub usage_counts: Vec<u64>,
    pub bound_mode: BoundMode,
}

fn check_shape(k: usize, d: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::Config("codebook needs at least one entry".into()));
    }
    if d < 2 {
        return Err(Error::Config(format!(
            "codebook dimension must be >= 2 for angular structure, got {d}"
        )));
    }
    Ok(())
}

/// Codebook with rows drawn uniformly from `(-1, 1)^d` and l2-normalized onto
/// the unit sphere.
pub fn init_codebook(k: usize, d: usize, seed: u64) -> Result<Codebook> {
    check_shape(k, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(k * d);
    let mut row = vec![0.0; d];
    for _ in 0..k {
        loop {
            row.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            let n = l2_norm(&row);
            if n > 0.0 {
                data.extend(row.iter().map(|v| v / n));
                break;
            }
        }
    }
    Ok(Codebook::from_entries(
        Tensor::new(vec![k, d], data)?,
        0.0,
        BoundMode::Exponential,
    ))
}

/// Codebook with rows drawn uniformly from `(-1, 1)^d`, not normalized.
pub fn init_uniform(k: usize, d: usize, seed: u64) -> Result<Codebook> {
    check_shape(k, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(Codebook::from_entries(
        Tensor::new(vec![k, d], data)?,
        0.0,
        BoundMode::Unbounded,
    ))
}

impl Codebook {
    pub fn from_entries(entries: Tensor, alpha: f64, bound_mode: BoundMode) -> Self {
        let k = entries.rows();
        Self {
            entries,
            alpha,
            step: 0,
            usage_counts: vec![0; k],
            bound_mode,
        }
    }

    pub fn with_bound(mut self, alpha: f64, mode: BoundMode) -> Self {
        self.alpha = alpha;
        self.bound_mode = mode;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    /// `M(t)` at the current step.
    pub fn bound(&self) -> f64 {
        norm_bound(self.step, self.alpha, self.bound_mode).expect("alpha validated")
    }

    pub fn max_norm(&self) -> f64 {
        self.entries.row_norms().into_iter().fold(0.0, f64::max)
    }

    /// Rescales every row whose norm exceeds `M(t)` back onto the ball's
    /// surface. Rows inside the ball, including zero rows, are untouched.
    /// Returns the number of rescaled rows.
    pub fn apply_bound(&mut self) -> Result<usize> {
        probe::hit_apply_bound();
        if !self.entries.is_finite() {
            return Err(Error::CorruptState(format!(
                "non-finite codebook entry at step {}",
                self.step
            )));
        }
        let m = norm_bound(self.step, self.alpha, self.bound_mode)?;
        let mut rescaled = 0;
        for i in 0..self.len() {
            let row = self.entries.row_mut(i);
            let n = l2_norm(row);
            if n > m {
                row.iter_mut().for_each(|v| *v = *v / n * m);
                rescaled += 1;
            }
        }
        Ok(rescaled)
    }

    pub fn reset_usage(&mut self) {
        self.usage_counts.iter_mut().for_each(|c| *c = 0);
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage_counts[i] += 1;
        }
    }

    /// `(fraction of entries used, perplexity)` from the usage counters.
    /// Perplexity is 1 when nothing has been counted.
    pub fn usage_stats(&self) -> (f64, f64) {
        let total: u64 = self.usage_counts.iter().sum();
        let used = self.usage_counts.iter().filter(|&&c| c > 0).count();
        if total == 0 {
            return (0.0, 1.0);
        }
        let entropy: f64 = self
            .usage_counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum();
        (used as f64 / self.len() as f64, entropy.exp())
    }

    pub fn compute_stats(&self) -> CodebookStats {
        let k = self.len();
        let norms = self.entries.row_norms();
        let mut pairwise = vec![0.0; k * k];
        for i in 0..k {
            for j in i + 1..k {
                let d = self
                    .entries
                    .row(i)
                    .iter()
                    .zip(self.entries.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                pairwise[i * k + j] = d;
                pairwise[j * k + i] = d;
            }
        }
        let (usage_fraction, perplexity) = self.usage_stats();
        CodebookStats {
            zero_norm_rows: norms.iter().filter(|&&n| n == 0.0).count(),
            norms,
            pairwise: Tensor::from_parts(vec![k, k], pairwise),
            usage_fraction,
            perplexity,
        }
    }

    /// Writes `norms.csv`, `pairwise.csv`, `pairwise.pgm` and `usage.csv`.
    pub fn export_stats(&self, dir: &Path) -> Result<CodebookStats> {
        std::fs::create_dir_all(dir)?;
        let stats = self.compute_stats();
        let k = self.len();

        let mut norms = String::from("index,norm\n");
        for (i, n) in stats.norms.iter().enumerate() {
            writeln!(norms, "{i},{n}").unwrap();
        }
        std::fs::write(dir.join("norms.csv"), norms)?;

        let mut pairwise = String::new();
        for i in 0..k {
            let row: Vec<String> = stats.pairwise.row(i).iter().map(|v| v.to_string()).collect();
            pairwise.push_str(&row.join(","));
            pairwise.push('\n');
        }
        std::fs::write(dir.join("pairwise.csv"), pairwise)?;
        pnm::write_pgm(
            &dir.join("pairwise.pgm"),
            k,
            k,
            &pnm::min_max_scale(stats.pairwise.data()),
        )?;

        let mut usage = String::from("index,count\n");
        for (i, c) in self.usage_counts.iter().enumerate() {
            writeln!(usage, "{i},{c}").unwrap();
        }
        std::fs::write(dir.join("usage.csv"), usage)?;
        Ok(stats)
    }
}

/// Geometric and usage diagnostics of a codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookStats {
    pub norms: Vec<f64>,
    /// `K x K` Euclidean distances.
    pub pairwise: Tensor,
    pub usage_fraction: f64,
    pub perplexity: f64,
    pub zero_norm_rows: usize,
}

impl CodebookStats {
    pub fn min_norm(&self) -> f64 {
        self.norms.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_norm(&self) -> f64 {
        self.norms.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean_norm(&self) -> f64 {
        self.norms.iter().sum::<f64>() / self.norms.len() as f64
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Clusters the codebook rows into `k_target` centroids with Lloyd's
/// algorithm after farthest-point seeding. The seed only picks the first
/// center; chosen seeds are kept in row order, so `k_target == K` with
/// `iters == 0` returns the rows unchanged.
pub fn kmeans_reduce(cb: &Codebook, k_target: usize, iters: usize, seed: u64) -> Result<Codebook> {
    let k = cb.len();
    if k_target < 1 || k_target > k {
        return Err(Error::Config(format!(
            "k-means target must be in 1..={k}, got {k_target}"
        )));
    }
    let rows: Vec<&[f64]> = (0..k).map(|i| cb.entries.row(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen = vec![rng.gen_range(0..k)];
    let mut min_d: Vec<f64> = rows.iter().map(|r| sq_dist(r, rows[chosen[0]])).collect();
    let mut taken = vec![false; k];
    taken[chosen[0]] = true;
    while chosen.len() < k_target {
        let mut pick = None;
        for i in 0..k {
            if taken[i] {
                continue;
            }
            match pick {
                None => pick = Some(i),
                Some(p) if min_d[i] > min_d[p] => pick = Some(i),
                _ => {}
            }
        }
        let p = pick.expect("k_target <= K leaves a free row");
        taken[p] = true;
        chosen.push(p);
        for (i, r) in rows.iter().enumerate() {
            min_d[i] = min_d[i].min(sq_dist(r, rows[p]));
        }
    }
    chosen.sort_unstable();
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| rows[i].to_vec()).collect();

    let d = cb.dim();
    let mut assign = vec![usize::MAX; k];
    for _ in 0..iters {
        let mut changed = false;
        let mut dist = vec![0.0; k];
        for (i, r) in rows.iter().enumerate() {
            let (c, dd) = nearest(r, &centroids);
            changed |= assign[i] != c;
            assign[i] = c;
            dist[i] = dd;
        }
        let mut sums = vec![vec![0.0; d]; k_target];
        let mut counts = vec![0usize; k_target];
        for (i, r) in rows.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(r.iter()) {
                *s += v;
            }
        }
        for c in 0..k_target {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Re-seed from the point farthest from its centroid.
                let far = (0..k).fold(0, |best, i| if dist[i] > dist[best] { i } else { best });
                centroids[c] = rows[far].to_vec();
                dist[far] = 0.0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let data = centroids.concat();
    let mut out = Codebook::from_entries(
        Tensor::new(vec![k_target, d], data)?,
        cb.alpha,
        cb.bound_mode,
    );
    out.step = cb.step;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb_from(rows: &[&[f64]], mode: BoundMode) -> Codebook {
        Codebook::from_entries(Tensor::from_rows(rows).unwrap(), 0.0, mode)
    }

    #[test]
    fn init_is_unit_norm_and_deterministic() {
        let a = init_codebook(64, 8, 3).unwrap();
        for n in a.entries.row_norms() {
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(a, init_codebook(64, 8, 3).unwrap());
        assert_ne!(a, init_codebook(64, 8, 4).unwrap());
        let single = init_codebook(1, 2, 0).unwrap();
        assert!((single.entries.row_norms()[0] - 1.0).abs() < 1e-12);
        assert_eq!(a.step, 0);
        assert!(a.usage_counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn init_rejects_small_dim() {
        assert!(matches!(init_codebook(4, 1, 0), Err(Error::Config(_))));
        assert!(matches!(init_codebook(0, 4, 0), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_values() {
        assert_eq!(norm_bound(0, 1e-5, BoundMode::Exponential).unwrap(), 1.0);
        let e = norm_bound(100_000, 1e-5, BoundMode::Exponential).unwrap();
        assert!((e - std::f64::consts::E).abs() < 1e-12);
        assert_eq!(norm_bound(12345, 3e-4, BoundMode::FixedOne).unwrap(), 1.0);
        assert!(norm_bound(7, 3e-4, BoundMode::Unbounded).unwrap().is_infinite());
        assert!(norm_bound(7, -1.0, BoundMode::Exponential).is_err());
    }

    #[test]
    fn bound_rescales_outside_rows_only() {
        let mut cb = cb_from(&[&[3.0, 4.0], &[0.3, 0.4], &[0.0, 0.0]], BoundMode::FixedOne);
        assert_eq!(cb.apply_bound().unwrap(), 1);
        assert!((cb.entries.row(0)[0] - 0.6).abs() < 1e-15);
        assert!((cb.entries.row(0)[1] - 0.8).abs() < 1e-15);
        assert_eq!(cb.entries.row(1), &[0.3, 0.4]);
        assert_eq!(cb.entries.row(2), &[0.0, 0.0]);
        assert_eq!(cb.compute_stats().zero_norm_rows, 1);
    }

    #[test]
    fn bound_radius_two() {
        // alpha * t = ln 2
        let mut cb = cb_from(&[&[3.0, 4.0]], BoundMode::Exponential);
        cb.alpha = 2f64.ln();
        cb.step = 1;
        cb.apply_bound().unwrap();
        assert!((cb.entries.row(0)[0] - 1.2).abs() < 1e-12);
        assert!((cb.entries.row(0)[1] - 1.6).abs() < 1e-12);
    }

    #[test]
    fn bound_rejects_non_finite() {
        let mut cb = cb_from(&[&[f64::NAN, 1.0]], BoundMode::FixedOne);
        assert!(matches!(cb.apply_bound(), Err(Error::CorruptState(_))));
    }

    #[test]
    fn stats_identical_rows_and_usage() {
        let mut cb = cb_from(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]], BoundMode::Unbounded);
        let s = cb.compute_stats();
        assert!(s.pairwise.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.perplexity, 1.0);
        cb.record_usage(&[0, 1, 2, 0, 1, 2]);
        let s = cb.compute_stats();
        assert!((s.perplexity - 3.0).abs() < 1e-12);
        assert_eq!(s.usage_fraction, 1.0);
    }

    #[test]
    fn single_active_entry_usage() {
        let mut cb = init_codebook(512, 4, 1).unwrap();
        cb.record_usage(&[0; 100]);
        let s = cb.compute_stats();
        assert!((s.usage_fraction - 1.0 / 512.0).abs() < 1e-15);
        assert!((s.usage_fraction - 0.00195).abs() < 1e-5);
        assert_eq!(s.perplexity, 1.0);
    }

    #[test]
    fn kmeans_identity() {
        let cb = init_codebook(16, 4, 9).unwrap();
        let r = kmeans_reduce(&cb, 16, 0, 5).unwrap();
        assert_eq!(r.entries, cb.entries);
    }

    #[test]
    fn kmeans_two_clusters() {
        let cb = cb_from(
            &[&[0.0, 1.0], &[5.0, 5.0], &[0.0, 1.0], &[5.0, 5.0]],
            BoundMode::Unbounded,
        );
        for seed in 0..8 {
            let r = kmeans_reduce(&cb, 2, 10, seed).unwrap();
            let mut rows: Vec<Vec<f64>> = (0..2).map(|i| r.entries.row(i).to_vec()).collect();
            rows.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
            assert_eq!(rows, vec![vec![0.0, 1.0], vec![5.0, 5.0]]);
        }
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let cb = init_codebook(10, 3, 2).unwrap();
        let r = kmeans_reduce(&cb, 1, 5, 0).unwrap();
        for j in 0..3 {
            let mean: f64 = (0..10).map(|i| cb.entries.row(i)[j]).sum::<f64>() / 10.0;
            assert!((r.entries.row(0)[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_rejects_large_target() {
        let cb = init_codebook(4, 3, 2).unwrap();
        assert!(matches!(kmeans_reduce(&cb, 5, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn export_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut cb = init_codebook(5, 3, 0).unwrap();
        cb.record_usage(&[1, 1, 4]);
        cb.export_stats(dir.path()).unwrap();
        let norms = std::fs::read_to_string(dir.path().join("norms.csv")).unwrap();
        assert_eq!(norms.lines().count(), 6);
        let pairwise = std::fs::read_to_string(dir.path().join("pairwise.csv")).unwrap();
        assert_eq!(pairwise.lines().count(), 5);
        assert!(pairwise.lines().all(|l| l.split(',').count() == 5));
        let usage = std::fs::read_to_string(dir.path().join("usage.csv")).unwrap();
        assert!(usage.contains("1,2\n") && usage.contains("4,1\n"));
        let pgm = std::fs::read(dir.path().join("pairwise.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n5 5\n255\n"));
        assert_eq!(pgm.len(), b"P5\n5 5\n255\n".len() + 25);
    }
}
