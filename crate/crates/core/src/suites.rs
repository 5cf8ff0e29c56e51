//! Finite-difference suites behind `arcvq gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, grad_check_with, GradCheckReport, Stencil};
use crate::graph::{Graph, NodeId, OpKind};
use crate::losses::arc_loss;
use crate::model::PatchAutoencoder;
use crate::quantizer::{normalize_rows, top_k_sets};
use crate::tensor::Tensor;

pub const OPS_TOL: f64 = 1e-6;
pub const ARC_TOL: f64 = 1e-4;
pub const PIPELINE_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Ops,
    ArcLoss,
    Pipeline,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Self::Ops),
            "arcloss" => Ok(Self::ArcLoss),
            "pipeline" => Ok(Self::Pipeline),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!(
                "unknown suite '{s}' (ops, arcloss, pipeline, all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }

    fn from_report(suite: &'static str, name: String, r: GradCheckReport, tol: f64) -> Self {
        Self {
            suite,
            name,
            max_rel_err: r.max_rel_err,
            tol,
            coordinates: r.coordinates,
        }
    }
}

pub fn run(suite: Suite) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Ops | Suite::All) {
        out.extend(ops_suite(0)?);
    }
    if matches!(suite, Suite::ArcLoss | Suite::All) {
        out.extend(arcloss_suite(0)?);
    }
    if matches!(suite, Suite::Pipeline | Suite::All) {
        out.extend(pipeline_suite(0)?);
    }
    Ok(out)
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Keeps values at least `gap` away from every point in `kinks`.
fn avoid(t: Tensor, kinks: &[f64], gap: f64) -> Tensor {
    t.map(|v| {
        let mut v = v;
        for &k in kinks {
            if (v - k).abs() < gap {
                v = if v >= k { k + gap } else { k - gap };
            }
        }
        v
    })
}

/// Every op, each reduced to a scalar through a random linear functional so
/// no coordinate's gradient is trivially symmetric.
pub fn ops_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-6;
    let mut out = Vec::new();

    let cases: Vec<(&str, OpKind, Vec<Tensor>)> = vec![
        ("add", OpKind::Add, vec![uniform(&mut rng, &[3, 4], -2.0, 2.0), uniform(&mut rng, &[3, 4], -2.0, 2.0)]),
        ("sub", OpKind::Sub, vec![uniform(&mut rng, &[3, 4], -2.0, 2.0), uniform(&mut rng, &[3, 4], -2.0, 2.0)]),
        ("mul", OpKind::Mul, vec![uniform(&mut rng, &[3, 4], -2.0, 2.0), uniform(&mut rng, &[3, 4], -2.0, 2.0)]),
        ("scale", OpKind::Scale(-1.7), vec![uniform(&mut rng, &[5], -2.0, 2.0)]),
        ("matmul", OpKind::MatMul, vec![uniform(&mut rng, &[3, 4], -2.0, 2.0), uniform(&mut rng, &[4, 2], -2.0, 2.0)]),
        ("add_bias", OpKind::AddBias, vec![uniform(&mut rng, &[3, 4], -2.0, 2.0), uniform(&mut rng, &[4], -2.0, 2.0)]),
        ("relu", OpKind::Relu, vec![avoid(uniform(&mut rng, &[3, 4], -2.0, 2.0), &[0.0], 0.05)]),
        ("tanh", OpKind::Tanh, vec![uniform(&mut rng, &[3, 4], -2.0, 2.0)]),
        ("square", OpKind::Square, vec![uniform(&mut rng, &[3, 4], -2.0, 2.0)]),
        ("sqrt", OpKind::Sqrt, vec![uniform(&mut rng, &[3, 4], 0.25, 2.0)]),
        (
            "clamp",
            OpKind::Clamp { lo: -1.0, hi: 1.0 },
            vec![avoid(uniform(&mut rng, &[3, 4], -2.0, 2.0), &[-1.0, 1.0], 0.05)],
        ),
        ("reshape", OpKind::Reshape(vec![2, 6]), vec![uniform(&mut rng, &[3, 4], -2.0, 2.0)]),
        ("transpose", OpKind::Transpose, vec![uniform(&mut rng, &[3, 4], -2.0, 2.0)]),
        ("sum", OpKind::Sum, vec![uniform(&mut rng, &[3, 4], -2.0, 2.0)]),
        ("mean", OpKind::Mean, vec![uniform(&mut rng, &[3, 4], -2.0, 2.0)]),
        ("logsumexp", OpKind::LogSumExp, vec![uniform(&mut rng, &[3, 4], -2.0, 2.0)]),
    ];
    for (name, kind, inputs) in cases {
        let probe = {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = inputs.iter().map(|x| g.constant(x.clone())).collect();
            let y = g.apply(kind.clone(), &ids)?;
            g.value(y).dims().to_vec()
        };
        let w = uniform(&mut rng, &probe, -1.0, 1.0);
        let report = grad_check(
            |g, ids| {
                let y = g.apply(kind.clone(), ids)?;
                let wc = g.constant(w.clone());
                let p = g.mul(y, wc)?;
                g.sum(p)
            },
            &inputs,
            eps,
            OPS_TOL,
        )?;
        out.push(CheckResult::from_report("ops", name.to_string(), report, OPS_TOL));
    }

    // A node used twice accumulates both paths.
    let x = uniform(&mut rng, &[4], -2.0, 2.0);
    let report = grad_check(
        |g, ids| {
            let t = g.tanh(ids[0])?;
            let m = g.mul(t, ids[0])?;
            let s = g.square(ids[0])?;
            let a = g.add(m, s)?;
            g.sum(a)
        },
        &[x],
        eps,
        OPS_TOL,
    )?;
    out.push(CheckResult::from_report("ops", "fan-out".into(), report, OPS_TOL));

    let src = uniform(&mut rng, &[4, 3], -2.0, 2.0);
    let w = uniform(&mut rng, &[5, 3], -1.0, 1.0);
    let report = grad_check(
        |g, ids| {
            let r = g.gather_rows(ids[0], &[2, 0, 2, 3, 2])?;
            let wc = g.constant(w.clone());
            let p = g.mul(r, wc)?;
            g.sum(p)
        },
        &[src],
        eps,
        OPS_TOL,
    )?;
    out.push(CheckResult::from_report("ops", "gather_rows".into(), report, OPS_TOL));
    Ok(out)
}

/// ArcLoss settings: `s`, `m`, `k`.
pub const ARC_GRID: [(f64, f64, usize); 27] = {
    let ss = [5.0, 10.0, 20.0];
    let ms = [0.1, 0.5, 1.0];
    let ks = [1, 3, 8];
    let mut out = [(0.0, 0.0, 0); 27];
    let mut i = 0;
    while i < 27 {
        out[i] = (ss[i / 9], ms[(i / 3) % 3], ks[i % 3]);
        i += 1;
    }
    out
};

/// Token coordinates are drawn from `(-8, 8)`.
pub const ARC_TOKEN_SCALE: f64 = 8.0;
/// Step for the Richardson stencil. Some token coordinates carry gradients
/// around 1e-6 of the loss at `s = 20`, below what a plain central difference
/// resolves to 1e-4 at any step size.
pub const ARC_EPS: f64 = 2e-2;

/// One random ArcLoss instance: `(tokens, codebook)`.
pub fn arc_instance(seed: u64, n: usize, k: usize, d: usize) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = uniform(&mut rng, &[n, d], -1.0, 1.0).map(|v| v * ARC_TOKEN_SCALE);
    let e = uniform(&mut rng, &[k, d], -1.0, 1.0);
    (z, e)
}

/// 100 configurations cycling through [`ARC_GRID`].
pub fn arcloss_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for i in 0..100u64 {
        let (s, m, k) = ARC_GRID[i as usize % ARC_GRID.len()];
        let (z, e) = arc_instance(seed.wrapping_mul(1000).wrapping_add(i), 12, 6, 5);
        let cos = {
            let zh = normalize_rows(&z, 1e-12);
            let eh = normalize_rows(&e, 1e-12);
            zh.matmul(&eh.transpose()?)?
        };
        let sets = top_k_sets(&cos, k)?;
        let report = grad_check_with(
            |g, ids| {
                let cb = g.constant(e.clone());
                Ok(arc_loss(g, ids[0], cb, &sets, s, m)?.node)
            },
            &[z],
            ARC_EPS,
            ARC_TOL,
            Stencil::Richardson,
        )?;
        out.push(CheckResult::from_report(
            "arcloss",
            format!("#{i:02} s={s} m={m} k={k}"),
            report,
            ARC_TOL,
        ));
    }
    Ok(out)
}

/// Reconstruction loss through the straight-through estimator, checked for
/// every encoder and decoder parameter.
///
/// The straight-through forward value does not depend on the encoder, so a
/// plain finite difference would see zero encoder gradient. The numeric side
/// therefore evaluates `z(theta) + (q - z(theta0))`: equal to `q` at the
/// checked point and with exactly the derivative the estimator assigns.
pub fn pipeline_suite(seed: u64) -> Result<Vec<CheckResult>> {
    pipeline_suite_with(seed, PIPELINE_EPS, Stencil::Central)
}

pub const PIPELINE_EPS: f64 = 1e-5;

pub fn pipeline_suite_with(seed: u64, eps: f64, stencil: Stencil) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for inst in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(inst));
        let model = PatchAutoencoder::new(8, 4, 3, 5, rng.gen())?;
        let x = uniform(&mut rng, &[2, 8, 8], 0.0, 1.0);
        let z0 = {
            let mut g = Graph::new();
            let p = model.bind_frozen(&mut g);
            let z = model.encode(&mut g, &p, &x)?;
            g.value(z).clone()
        };
        let codebook = uniform(&mut rng, &[4, 3], -1.0, 1.0);
        // nearest entries give a realistic q
        let q = {
            let mut data = Vec::with_capacity(z0.numel());
            for i in 0..z0.rows() {
                let best = (0..codebook.rows())
                    .min_by(|&a, &b| {
                        let da: f64 = z0.row(i).iter().zip(codebook.row(a)).map(|(u, v)| (u - v) * (u - v)).sum();
                        let db: f64 = z0.row(i).iter().zip(codebook.row(b)).map(|(u, v)| (u - v) * (u - v)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                data.extend_from_slice(codebook.row(best));
            }
            Tensor::new(z0.dims().to_vec(), data)?
        };
        let delta = q.zip_map(&z0, |a, b| a - b);

        let recon = |g: &mut Graph, ids: &[NodeId], x_hat: NodeId| -> Result<NodeId> {
            let _ = ids;
            let xc = g.constant(x.clone());
            let d = g.sub(xc, x_hat)?;
            let sq = g.square(d)?;
            g.mean(sq)
        };
        let bound = |ids: &[NodeId]| crate::model::BoundParams { ids: ids.to_vec() };

        // analytic side: the real straight-through graph
        let mut g = Graph::new();
        let ids: Vec<NodeId> = model.params.iter().map(|p| g.param(p.clone())).collect();
        let z = model.encode(&mut g, &bound(&ids), &x)?;
        let st = g.quantize_ste(z, q.clone())?;
        let x_hat = model.decode(&mut g, &bound(&ids), st)?;
        let loss = recon(&mut g, &ids, x_hat)?;
        g.backward(loss)?;
        let analytic: Vec<Tensor> = ids
            .iter()
            .zip(&model.params)
            .map(|(&id, p)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(p.dims())))
            .collect();

        // numeric side: frozen-offset surrogate, checked by the harness
        let report = grad_check_with(
            |g, ids| {
                let z = model.encode(g, &bound(ids), &x)?;
                let dc = g.constant(delta.clone());
                let qz = g.add(z, dc)?;
                let x_hat = model.decode(g, &bound(ids), qz)?;
                recon(g, ids, x_hat)
            },
            &model.params,
            eps,
            PIPELINE_TOL,
            stencil,
        )?;
        // The surrogate's analytic gradient must equal the straight-through one.
        let mut g2 = Graph::new();
        let ids2: Vec<NodeId> = model.params.iter().map(|p| g2.param(p.clone())).collect();
        let z2 = model.encode(&mut g2, &bound(&ids2), &x)?;
        let dc = g2.constant(delta.clone());
        let qz = g2.add(z2, dc)?;
        let x_hat2 = model.decode(&mut g2, &bound(&ids2), qz)?;
        let loss2 = recon(&mut g2, &ids2, x_hat2)?;
        g2.backward(loss2)?;
        let mut ste_gap = 0.0f64;
        for (a, &id) in analytic.iter().zip(&ids2) {
            let b = g2.grad(id).expect("param gradient");
            for (u, v) in a.data().iter().zip(b.data()) {
                ste_gap = ste_gap.max(crate::gradcheck::rel_err(*u, *v));
            }
        }
        out.push(CheckResult {
            suite: "pipeline",
            name: format!("instance {inst}"),
            max_rel_err: report.max_rel_err.max(ste_gap),
            tol: PIPELINE_TOL,
            coordinates: report.coordinates,
        });
    }
    Ok(out)
}

/// Text table of results, one line per check.
pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = format!("{:<9} {:<28} {:>12} {:>9} {}\n", "suite", "check", "max_rel_err", "tol", "result");
    for r in results {
        s.push_str(&format!(
            "{:<9} {:<28} {:>12.3e} {:>9.0e} {}\n",
            r.suite,
            r.name,
            r.max_rel_err,
            r.tol,
            if r.pass() { "ok" } else { "FAIL" }
        ));
    }
    s
}
