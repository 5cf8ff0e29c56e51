//! The VQ objective, the arccosine additive-margin loss and the total loss.

use std::fmt;
use std::str::FromStr;

use crate::codebook::BoundMode;
use crate::error::{shape_err, Error, Result};
use crate::graph::{logsumexp_slice, FusedBackward, Graph, NodeId};
use crate::probe;
use crate::quantizer::{normalize_rows, NeighborSets, QuantizeMode, ANGLE_EPS, NORMALIZE_EPS};
use crate::tensor::{gemm, MatRef, Tensor};

/// Training recipe: which SAMP components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Euclidean quantization, unnormalized init, no bound, no ArcLoss.
    Vanilla,
    /// Spherical quantization only.
    CosineOnly,
    /// Euclidean quantization with spherical init and the exponential bound.
    BbnrOnly,
    /// Full recipe with the bound pinned to 1.
    FixedBound,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Vanilla,
        Variant::CosineOnly,
        Variant::BbnrOnly,
        Variant::FixedBound,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::CosineOnly => "cosine-only",
            Variant::BbnrOnly => "bbnr-only",
            Variant::FixedBound => "fixed-bound",
            Variant::Full => "full",
        }
    }

    pub fn quantize_mode(self) -> QuantizeMode {
        match self {
            Variant::Vanilla | Variant::BbnrOnly => QuantizeMode::Euclidean,
            _ => QuantizeMode::Spherical,
        }
    }

    pub fn bound_mode(self) -> BoundMode {
        match self {
            Variant::Vanilla | Variant::CosineOnly => BoundMode::Unbounded,
            Variant::BbnrOnly | Variant::Full => BoundMode::Exponential,
            Variant::FixedBound => BoundMode::FixedOne,
        }
    }

    /// Whether the codebook starts on the unit sphere.
    pub fn spherical_init(self) -> bool {
        self.bound_mode() != BoundMode::Unbounded
    }

    pub fn uses_arc(self) -> bool {
        matches!(self, Variant::FixedBound | Variant::Full)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Commitment weight.
    pub beta: f64,
    /// Logit scale.
    pub s: f64,
    /// Additive angular margin in radians.
    pub m: f64,
    /// Positives per codebook entry.
    pub k: usize,
    pub gamma0: f64,
    /// Per-step decay of the ArcLoss weight.
    pub lambda: f64,
    pub variant: Variant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.25,
            s: 10.0,
            m: 0.1,
            k: 3,
            gamma0: 1.0,
            lambda: 5e-4,
            variant: Variant::Full,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.beta > 0.0) {
            return bad("beta must be > 0");
        }
        if !(self.s > 0.0) {
            return bad("s must be > 0");
        }
        if !(self.m >= 0.0) {
            return bad("m must be >= 0");
        }
        if self.k < 1 {
            return bad("k must be >= 1");
        }
        if !(self.gamma0 >= 0.0) {
            return bad("gamma0 must be >= 0");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        Ok(())
    }
}

/// Scalar terms of one step's objective. `arc`, `gamma_t` and `m_t` are absent
/// when the variant has no ArcLoss or no bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub codebook_term: f64,
    pub commit_term: f64,
    pub arc: Option<f64>,
    pub gamma_t: Option<f64>,
    pub m_t: Option<f64>,
}

/// Graph nodes of the three VQ terms.
#[derive(Debug, Clone, Copy)]
pub struct VqTerms {
    pub total: NodeId,
    pub recon: NodeId,
    pub codebook: NodeId,
    pub commit: NodeId,
    pub beta: f64,
}

/// `mean((x - x_hat)^2) + mean((z_q - sg(z_e))^2) + beta * mean((sg(z_q) - z_e)^2)`.
///
/// `z_q` should be rows gathered from the codebook parameter so the second
/// term's gradient lands on the codebook.
pub fn vq_loss(
    g: &mut Graph,
    x: &Tensor,
    x_hat: NodeId,
    z_e: NodeId,
    z_q: NodeId,
    beta: f64,
) -> Result<VqTerms> {
    if g.value(x_hat).dims() != x.dims() {
        return shape_err(
            "vq_loss",
            format!("x {:?} vs x_hat {:?}", x.dims(), g.value(x_hat).dims()),
        );
    }
    if g.value(z_e).dims() != g.value(z_q).dims() {
        return shape_err(
            "vq_loss",
            format!(
                "z_e {:?} vs z_q {:?}",
                g.value(z_e).dims(),
                g.value(z_q).dims()
            ),
        );
    }
    let xc = g.constant(x.clone());
    let diff = g.sub(xc, x_hat)?;
    let sq = g.square(diff)?;
    let recon = g.mean(sq)?;

    let ze_sg = g.detach(z_e)?;
    let diff = g.sub(z_q, ze_sg)?;
    let sq = g.square(diff)?;
    let codebook = g.mean(sq)?;

    let zq_sg = g.detach(z_q)?;
    let diff = g.sub(zq_sg, z_e)?;
    let sq = g.square(diff)?;
    let commit = g.mean(sq)?;

    let sum = g.add(recon, codebook)?;
    let weighted = g.scale(commit, beta)?;
    let total = g.add(sum, weighted)?;
    Ok(VqTerms {
        total,
        recon,
        codebook,
        commit,
        beta,
    })
}

/// `gamma0 * exp(-lambda * t)`.
pub fn gamma_schedule(t: u64, gamma0: f64, lambda: f64) -> f64 {
    gamma0 * (-lambda * t as f64).exp()
}

/// Result of [`arc_loss`].
#[derive(Debug, Clone, Copy)]
pub struct ArcLossOutput {
    pub node: NodeId,
    pub value: f64,
    /// Positive pairs whose margin-shifted angle exceeds pi.
    pub margin_overflow: usize,
}

struct ArcBackward {
    /// `N x d` normalized tokens.
    z_hat: Tensor,
    norms: Vec<f64>,
    /// `K x d` normalized entries.
    e_hat: Tensor,
    /// `K x N` derivative of the loss with respect to each cosine.
    dcos: Vec<f64>,
}

impl FusedBackward for ArcBackward {
    fn name(&self) -> &'static str {
        "arc_loss"
    }

    fn backward(&self, upstream: &Tensor, _parents: &[&Tensor]) -> Vec<Option<Tensor>> {
        let (n, d) = (self.z_hat.rows(), self.z_hat.cols());
        let k = self.e_hat.rows();
        // dL/dz_hat = dcos^T e_hat
        let mut gz = vec![0.0; n * d];
        gemm(
            n,
            k,
            d,
            MatRef::transposed(&self.dcos, n),
            MatRef::row_major(self.e_hat.data(), d),
            &mut gz,
            0.0,
        );
        let up = upstream.item();
        for (i, row) in gz.chunks_mut(d).enumerate() {
            let zh = self.z_hat.row(i);
            let norm = self.norms[i];
            if norm > NORMALIZE_EPS {
                let radial: f64 = row.iter().zip(zh).map(|(a, b)| a * b).sum();
                for (v, h) in row.iter_mut().zip(zh) {
                    *v = up * (*v - radial * h) / norm;
                }
            } else {
                row.iter_mut().for_each(|v| *v *= up / NORMALIZE_EPS);
            }
        }
        vec![Some(Tensor::from_parts(vec![n, d], gz)), None]
    }
}

/// ArcLoss over the tokens `z` (`N x d`) against a stop-gradient copy of the
/// codebook. Positive logits are `s cos(theta + m)` for tokens in each entry's
/// neighbor set, negatives `s cos(theta)`; the loss is the mean over entries of
/// `-log(sum_pos exp / sum_all exp)`. Only `z` receives a gradient.
pub fn arc_loss(
    g: &mut Graph,
    z: NodeId,
    codebook: NodeId,
    sets: &NeighborSets,
    s: f64,
    m: f64,
) -> Result<ArcLossOutput> {
    probe::hit_arc_loss();
    let zv = g.value(z);
    let ev = g.value(codebook);
    if zv.rank() != 2 || ev.rank() != 2 || zv.cols() != ev.cols() {
        return shape_err(
            "arc_loss",
            format!("tokens {:?} vs codebook {:?}", zv.dims(), ev.dims()),
        );
    }
    let (n, k) = (zv.rows(), ev.rows());
    if sets.sets.len() != k {
        return Err(Error::Contract(format!(
            "neighbor sets cover {} entries, codebook has {k}",
            sets.sets.len()
        )));
    }
    if sets.sets.iter().any(|s| s.is_empty() || s.iter().any(|&i| i >= n)) {
        return Err(Error::Contract("neighbor sets must be non-empty and in range".into()));
    }
    let norms = zv.row_norms();
    let z_hat = normalize_rows(zv, NORMALIZE_EPS);
    let e_hat = normalize_rows(ev, NORMALIZE_EPS);
    let d = zv.cols();
    // cos^T: K x N
    let mut cos_t = vec![0.0; k * n];
    gemm(
        k,
        d,
        n,
        MatRef::row_major(e_hat.data(), d),
        MatRef::transposed(z_hat.data(), d),
        &mut cos_t,
        0.0,
    );
    let member = sets.membership(n);
    let (cos_m, sin_m) = (m.cos(), m.sin());
    let lo = -1.0 + ANGLE_EPS;
    let hi = 1.0 - ANGLE_EPS;

    let mut total = 0.0;
    let mut overflow = 0;
    let mut dcos = vec![0.0; k * n];
    let mut logits = vec![0.0; n];
    let mut pos_logits = Vec::new();
    for j in 0..k {
        let row = &cos_t[j * n..(j + 1) * n];
        let is_pos = &member[j * n..(j + 1) * n];
        pos_logits.clear();
        for i in 0..n {
            let c = row[i].clamp(lo, hi);
            logits[i] = if is_pos[i] {
                let sin = (1.0 - c * c).sqrt();
                if c.acos() + m > std::f64::consts::PI {
                    overflow += 1;
                }
                let l = s * (c * cos_m - sin * sin_m);
                pos_logits.push(l);
                l
            } else {
                s * c
            };
        }
        let lse_all = logsumexp_slice(&logits);
        let lse_pos = logsumexp_slice(&pos_logits);
        total += lse_all - lse_pos;

        let out = &mut dcos[j * n..(j + 1) * n];
        for i in 0..n {
            let raw = row[i];
            if raw < lo || raw > hi {
                continue;
            }
            let p_all = (logits[i] - lse_all).exp();
            if is_pos[i] {
                let p_pos = (logits[i] - lse_pos).exp();
                let sin = (1.0 - raw * raw).sqrt();
                let dlogit = s * (cos_m + raw * sin_m / sin);
                out[i] = (p_all - p_pos) * dlogit / k as f64;
            } else {
                out[i] = p_all * s / k as f64;
            }
        }
    }
    let value = total / k as f64;
    let cb_sg = g.detach(codebook)?;
    let node = g.fused(
        &[z, cb_sg],
        Tensor::scalar(value),
        Box::new(ArcBackward {
            z_hat,
            norms,
            e_hat,
            dcos,
        }),
    );
    Ok(ArcLossOutput {
        node,
        value,
        margin_overflow: overflow,
    })
}

/// `L_VQ + gamma(t) * L_A`. The ArcLoss part must be present exactly when the
/// variant uses it. `m_t` in the breakdown is left for the caller.
pub fn total_loss(
    g: &mut Graph,
    vq: &VqTerms,
    arc: Option<NodeId>,
    cfg: &LossConfig,
    t: u64,
) -> Result<(NodeId, LossBreakdown)> {
    let mut breakdown = LossBreakdown {
        total: 0.0,
        recon: g.value(vq.recon).item(),
        codebook_term: g.value(vq.codebook).item(),
        commit_term: g.value(vq.commit).item(),
        arc: None,
        gamma_t: None,
        m_t: None,
    };
    let total = match (cfg.variant.uses_arc(), arc) {
        (false, None) => vq.total,
        (true, Some(arc)) => {
            let gamma = gamma_schedule(t, cfg.gamma0, cfg.lambda);
            breakdown.arc = Some(g.value(arc).item());
            breakdown.gamma_t = Some(gamma);
            let weighted = g.scale(arc, gamma)?;
            g.add(vq.total, weighted)?
        }
        (true, None) => {
            return Err(Error::Config(format!(
                "variant {} requires the ArcLoss term",
                cfg.variant
            )))
        }
        (false, Some(_)) => {
            return Err(Error::Config(format!(
                "variant {} takes no ArcLoss term",
                cfg.variant
            )))
        }
    };
    breakdown.total = g.value(total).item();
    Ok((total, breakdown))
}
