//! Binary PGM (P5) and PPM (P6) writers.

use std::io::{self, Write};
use std::path::Path;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale image from values in `[0, 1]`, row-major `height x width`.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> io::Result<()> {
    assert_eq!(values.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    std::fs::File::create(path)?.write_all(&out)
}

/// RGB image from interleaved values in `[0, 1]`, row-major `height x width x 3`.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[f64]) -> io::Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().map(|&v| to_byte(v)));
    std::fs::File::create(path)?.write_all(&out)
}

/// Min-max scales `values` into `[0, 1]`; a constant input maps to zeros.
pub fn min_max_scale(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 1e-12) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / range).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&p, 2, 1, &[0.0, 1.0]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes, b"P5\n2 1\n255\n\x00\xff");
    }

    #[test]
    fn scale_guard() {
        assert_eq!(min_max_scale(&[3.0, 3.0]), vec![0.0, 0.0]);
        assert_eq!(min_max_scale(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }
}
