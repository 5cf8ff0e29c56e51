//! Reconstruction metrics and PCA latent-map rendering.

use crate::codebook::Codebook;
use crate::error::{shape_err, Error, Result};
use crate::pnm::min_max_scale;
use crate::tensor::{dot, l2_norm, Tensor};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub usage_fraction: f64,
    pub perplexity: f64,
    /// Images were smaller than the SSIM window and used global statistics.
    pub ssim_global_fallback: bool,
}

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return shape_err(op, format!("{:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_dims("mse", x, y)?;
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.numel() as f64)
}

pub fn l1(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_dims("l1", x, y)?;
    Ok(x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.numel() as f64)
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP`] when the MSE is zero.
pub fn psnr(x: &Tensor, y: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Contract(format!("peak must be positive, got {peak}")));
    }
    Ok(psnr_from_mse(mse(x, y)?, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
    }
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" Gaussian filter of an `h x w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut horiz = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            horiz[r * ow + c] = (0..n).map(|t| k[t] * img[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|t| k[t] * horiz[(r + t) * ow + c]).sum();
        }
    }
    out
}

fn ssim_formula(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// SSIM of two single-channel `h x w` images with values in `[0, 1]`.
/// Returns the score and whether the global-statistics fallback was used.
pub fn ssim_image(x: &[f64], y: &[f64], h: usize, w: usize) -> (f64, bool) {
    assert_eq!(x.len(), h * w);
    assert_eq!(y.len(), h * w);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        let n = (h * w) as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let vx = x.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>() / n;
        let vy = y.iter().map(|a| (a - my) * (a - my)).sum::<f64>() / n;
        let cxy = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
        return (ssim_formula(mx, my, vx, vy, cxy), true);
    }
    let k = gaussian_kernel();
    let xx: Vec<f64> = x.iter().map(|a| a * a).collect();
    let yy: Vec<f64> = y.iter().map(|a| a * a).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, h, w, &k);
    let my = filter_valid(y, h, w, &k);
    let sxx = filter_valid(&xx, h, w, &k);
    let syy = filter_valid(&yy, h, w, &k);
    let sxy = filter_valid(&xy, h, w, &k);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            ssim_formula(a, b, sxx[i] - a * a, syy[i] - b * b, sxy[i] - a * b)
        })
        .sum();
    (total / mx.len() as f64, false)
}

/// Mean SSIM over a `[B x H x W]` batch (or a single `[H x W]` image).
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(ssim_with_fallback(x, y)?.0)
}

pub fn ssim_with_fallback(x: &Tensor, y: &Tensor) -> Result<(f64, bool)> {
    same_dims("ssim", x, y)?;
    let (b, h, w) = match x.dims() {
        [h, w] => (1, *h, *w),
        [b, h, w] => (*b, *h, *w),
        d => return shape_err("ssim", format!("expected 2-D or 3-D images, got {d:?}")),
    };
    let px = h * w;
    let mut total = 0.0;
    let mut fallback = false;
    for i in 0..b {
        let (s, f) = ssim_image(
            &x.data()[i * px..(i + 1) * px],
            &y.data()[i * px..(i + 1) * px],
            h,
            w,
        );
        total += s;
        fallback |= f;
    }
    Ok((total / b as f64, fallback))
}

/// Top principal directions of the mean-centered rows of `rows` (`n x d`),
/// found by power iteration on the covariance with deflation. Always returns
/// `count` orthonormal vectors of length `d` (`count <= d`).
pub fn principal_components(rows: &Tensor, count: usize, iters: usize) -> Vec<Vec<f64>> {
    let (n, d) = (rows.rows(), rows.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(rows.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let c: Vec<f64> = rows.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect();
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += c[a] * c[b] / n as f64;
            }
        }
    }
    let orthogonalize = |v: &mut Vec<f64>, basis: &[Vec<f64>]| {
        for u in basis {
            let p = dot(v, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
        }
    };
    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(count);
    for c in 0..count.min(d) {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.01 * ((i * 7 + c * 3) % 11) as f64).collect();
        orthogonalize(&mut v, &comps);
        for _ in 0..iters {
            let mut next: Vec<f64> = (0..d).map(|a| dot(&cov[a * d..(a + 1) * d], &v)).collect();
            orthogonalize(&mut next, &comps);
            let nn = l2_norm(&next);
            if nn < 1e-300 {
                break;
            }
            next.iter_mut().for_each(|x| *x /= nn);
            v = next;
        }
        // Re-project twice for numerical orthogonality; fall back to a basis
        // vector when the remaining covariance is null.
        orthogonalize(&mut v, &comps);
        orthogonalize(&mut v, &comps);
        let mut nv = l2_norm(&v);
        if nv < 1e-8 {
            for e in 0..d {
                let mut basis = vec![0.0; d];
                basis[e] = 1.0;
                orthogonalize(&mut basis, &comps);
                orthogonalize(&mut basis, &comps);
                if l2_norm(&basis) > 1e-3 {
                    v = basis;
                    break;
                }
            }
            nv = l2_norm(&v);
        }
        v.iter_mut().for_each(|x| *x /= nv);
        comps.push(v);
    }
    comps
}

/// Colors each token of an `h x w` grid by the top-3 principal coordinates of
/// its assigned codebook entry, min-max scaled per channel. Returns
/// `[h x w x 3]`.
pub fn latent_map_rgb(indices: &[usize], cb: &Codebook, grid: (usize, usize)) -> Result<Tensor> {
    let (h, w) = grid;
    if indices.len() != h * w {
        return shape_err(
            "latent_map_rgb",
            format!("{} tokens for a {h} x {w} grid", indices.len()),
        );
    }
    if let Some(bad) = indices.iter().find(|&&i| i >= cb.len()) {
        return shape_err("latent_map_rgb", format!("index {bad} outside codebook"));
    }
    let comps = principal_components(&cb.entries, 3, 100);
    let mut channels = vec![vec![0.0; h * w]; 3];
    for (c, comp) in comps.iter().enumerate() {
        let proj: Vec<f64> = indices.iter().map(|&i| dot(cb.entries.row(i), comp)).collect();
        channels[c] = min_max_scale(&proj);
    }
    let mut rgb = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        for ch in &channels {
            rgb.push(ch[p]);
        }
    }
    Tensor::new(vec![h, w, 3], rgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{init_codebook, BoundMode};

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Tensor::new(vec![h, w], data).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = img(4, 4, |r, c| (r + c) as f64 / 8.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let z = Tensor::zeros(&[10, 10]);
        let b = Tensor::full(&[10, 10], 0.1);
        assert!((psnr(&z, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let one = Tensor::ones(&[3, 3]);
        assert_eq!(psnr(&Tensor::zeros(&[3, 3]), &one, 1.0).unwrap(), 0.0);
        assert!(psnr(&z, &one, 1.0).is_err());
    }

    #[test]
    fn ssim_self_is_one() {
        let a = img(28, 28, |r, c| ((r * 3 + c * 5) % 13) as f64 / 12.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let g = Tensor::full(&[16, 16], 0.5);
        assert!((ssim(&g, &g).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_inversion_is_negative() {
        let a = img(16, 16, |r, c| if (r / 2 + c / 3) % 2 == 0 { 1.0 } else { 0.0 });
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 0.0);
    }

    #[test]
    fn ssim_small_image_falls_back() {
        let a = img(8, 8, |r, c| (r * c) as f64 / 49.0);
        let (s, fb) = ssim_with_fallback(&a, &a).unwrap();
        assert!(fb);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_entry_map_is_constant() {
        let cb = init_codebook(8, 5, 3).unwrap();
        let m = latent_map_rgb(&[4; 6], &cb, (2, 3)).unwrap();
        assert!(m.data().iter().all(|&v| v == m.data()[0]));
    }

    #[test]
    fn components_orthonormal() {
        let cb = init_codebook(40, 6, 8).unwrap();
        let comps = principal_components(&cb.entries, 3, 100);
        for a in 0..3 {
            for b in 0..3 {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot(&comps[a], &comps[b]) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn line_codebook_has_one_channel() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let cb = Codebook::from_entries(Tensor::from_rows(&refs).unwrap(), 0.0, BoundMode::Unbounded);
        let idx: Vec<usize> = (0..6).collect();
        let m = latent_map_rgb(&idx, &cb, (2, 3)).unwrap();
        let ch = |c: usize| -> Vec<f64> { (0..6).map(|p| m.data()[p * 3 + c]).collect() };
        assert!(ch(0).iter().any(|&v| v > 0.5));
        assert!(ch(1).iter().all(|&v| v == ch(1)[0]));
        assert!(ch(2).iter().all(|&v| v == ch(2)[0]));
        let comps = principal_components(&cb.entries, 3, 100);
        for a in 0..3 {
            assert!((l2_norm(&comps[a]) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn low_dim_pads_zero_channels() {
        let cb = init_codebook(5, 2, 1).unwrap();
        let m = latent_map_rgb(&[0, 1, 2, 3], &cb, (2, 2)).unwrap();
        assert!((0..4).all(|p| m.data()[p * 3 + 2] == 0.0));
    }
}
