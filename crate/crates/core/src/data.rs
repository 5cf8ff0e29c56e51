//! IDX image/label files and a synthetic grating dataset.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `M x H x H`, pixels in `[0, 1]`.
    pub images: Tensor,
    pub labels: Option<Vec<u8>>,
    pub side: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copies the listed images into a `[B x H x H]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let px = self.side * self.side;
        let mut data = Vec::with_capacity(indices.len() * px);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * px..(i + 1) * px]);
        }
        Tensor::new(vec![indices.len(), self.side, self.side], data).expect("non-empty batch")
    }

    /// The first `n` images (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        Dataset {
            images: self.batch(&idx),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
            side: self.side,
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("{} is truncated at byte {}", self.what, self.bytes.len()),
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_end(&mut bytes)?;
    Ok(bytes)
}

/// Parses big-endian IDX image data (and optional labels).
pub fn parse_idx(images: &[u8], labels: Option<&[u8]>) -> Result<Dataset> {
    let mut r = Reader {
        bytes: images,
        pos: 0,
        what: "image file",
    };
    let magic = r.u32()?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "image file magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"
        )));
    }
    let (m, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if m == 0 || h == 0 || h != w {
        return Err(Error::Format(format!(
            "need at least one square image, got {m} x {h} x {w}"
        )));
    }
    let pixels: Vec<f64> = r
        .take(m * h * w)?
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels = match labels {
        None => None,
        Some(bytes) => {
            let mut r = Reader {
                bytes,
                pos: 0,
                what: "label file",
            };
            let magic = r.u32()?;
            if magic != LABEL_MAGIC {
                return Err(Error::Format(format!(
                    "label file magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"
                )));
            }
            let n = r.u32()? as usize;
            if n != m {
                return Err(Error::Consistency(format!(
                    "{m} images but {n} labels"
                )));
            }
            Some(r.take(n)?.to_vec())
        }
    };
    Ok(Dataset {
        images: Tensor::new(vec![m, h, w], pixels)?,
        labels,
        side: h,
    })
}

pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let images = read_all(images_path)?;
    let labels = labels_path.map(read_all).transpose()?;
    parse_idx(&images, labels.as_deref())
}

fn to_byte(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_idx_images(ds: &Dataset) -> Vec<u8> {
    let dims = ds.images.dims();
    let mut out = Vec::with_capacity(16 + ds.images.numel());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(ds.images.data().iter().map(|&p| to_byte(p)));
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes the images (pixels rounded to the nearest `1/255`) and, when present
/// and a path is given, the labels.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: Option<&Path>) -> Result<()> {
    std::fs::File::create(images_path)?.write_all(&encode_idx_images(ds))?;
    if let (Some(labels), Some(path)) = (&ds.labels, labels_path) {
        std::fs::File::create(path)?.write_all(&encode_idx_labels(labels))?;
    }
    Ok(())
}

/// Template `c` of `clusters`: a sinusoidal grating with its own orientation
/// and frequency.
fn template(c: usize, clusters: usize, side: usize) -> Vec<f64> {
    let angle = std::f64::consts::PI * c as f64 / clusters as f64;
    let freq = 1.0 + 0.75 * (c % 4) as f64;
    let phase = 0.9 * c as f64;
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        for col in 0..side {
            let u = (col as f64 * ca + r as f64 * sa) / side as f64;
            out.push(0.5 + 0.5 * (std::f64::consts::TAU * freq * u + phase).sin());
        }
    }
    out
}

/// `m` images assigned round-robin to `clusters` grating templates, with
/// uniform noise of amplitude 0.1, clamped to `[0, 1]` and stored at 8-bit
/// precision.
pub fn synth_dataset(m: usize, side: usize, clusters: usize, seed: u64) -> Result<Dataset> {
    synth_dataset_with_noise(m, side, clusters, 0.1, seed)
}

pub fn synth_dataset_with_noise(
    m: usize,
    side: usize,
    clusters: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if clusters < 1 || m < 1 || side < 1 {
        return Err(Error::Config(
            "synthetic data needs at least one image, one cluster and side >= 1".into(),
        ));
    }
    let templates: Vec<Vec<f64>> = (0..clusters).map(|c| template(c, clusters, side)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(m * side * side);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let c = i % clusters;
        labels.push((c % 256) as u8);
        for &t in &templates[c] {
            let n = if noise > 0.0 {
                rng.gen_range(-noise..noise)
            } else {
                0.0
            };
            data.push(f64::from(to_byte(t + n)) / 255.0);
        }
    }
    Ok(Dataset {
        images: Tensor::new(vec![m, side, side], data)?,
        labels: Some(labels),
        side,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 4, 0, 0, 0, 4];
        b.extend((0..32u8).map(|i| i * 8));
        b[16 + 31] = 255;
        b
    }

    #[test]
    fn parses_hand_built_fixture() {
        let ds = parse_idx(&fixture(), None).unwrap();
        assert_eq!(ds.images.dims(), &[2, 4, 4]);
        assert_eq!(ds.side, 4);
        let expect: Vec<f64> = (0..32u32)
            .map(|i| if i == 31 { 1.0 } else { f64::from(i * 8) / 255.0 })
            .collect();
        assert_eq!(ds.images.data(), expect.as_slice());
        assert_eq!(ds.images.data()[0], 0.0);
    }

    #[test]
    fn rejects_wrong_magic() {
        let mut b = fixture();
        b[3] = 0x01;
        assert!(matches!(parse_idx(&b, None), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_is_io_error() {
        let b = fixture();
        assert!(matches!(parse_idx(&b[..20], None), Err(Error::Io(_))));
    }

    #[test]
    fn label_count_mismatch() {
        let labels = encode_idx_labels(&[1, 2, 3]);
        assert!(matches!(
            parse_idx(&fixture(), Some(&labels)),
            Err(Error::Consistency(_))
        ));
        let labels = encode_idx_labels(&[7, 9]);
        let ds = parse_idx(&fixture(), Some(&labels)).unwrap();
        assert_eq!(ds.labels, Some(vec![7, 9]));
    }

    #[test]
    fn synth_properties() {
        let a = synth_dataset(400, 8, 4, 11).unwrap();
        assert_eq!(a, synth_dataset(400, 8, 4, 11).unwrap());
        let labels = a.labels.as_ref().unwrap();
        for c in 0..4u8 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 100);
        }
        assert!(a.images.data().iter().all(|&p| (0.0..=1.0).contains(&p)));

        let flat = synth_dataset_with_noise(5, 8, 1, 0.0, 3).unwrap();
        let px = 64;
        for i in 1..5 {
            assert_eq!(
                &flat.images.data()[..px],
                &flat.images.data()[i * px..(i + 1) * px]
            );
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(7, 12, 3, 5).unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        write_idx(&ds, &ip, Some(&lp)).unwrap();
        assert_eq!(load_idx(&ip, Some(&lp)).unwrap(), ds);
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_idx(Path::new("/nonexistent/x.idx"), None).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.idx"));
    }
}
