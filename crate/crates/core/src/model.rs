//! Per-patch MLP encoder/decoder.
//!
//! An `H x H` image is cut into non-overlapping `p x p` patches, giving a
//! `(H/p) x (H/p)` token grid. Each patch goes through a shared
//! `linear -> tanh -> linear` map to a `d`-vector and back. Tokens are ordered
//! batch-major, then grid row, then grid column.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const PARAM_NAMES: [&str; 8] = [
    "encoder.w1",
    "encoder.b1",
    "encoder.w2",
    "encoder.b2",
    "decoder.w1",
    "decoder.b1",
    "decoder.w2",
    "decoder.b2",
];

#[derive(Debug, Clone, PartialEq)]
pub struct PatchAutoencoder {
    pub patch: usize,
    pub dim: usize,
    pub hidden: usize,
    pub side: usize,
    /// Weights and biases in [`PARAM_NAMES`] order.
    pub params: Vec<Tensor>,
}

/// Parameter nodes of one model bound into a graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub ids: Vec<NodeId>,
}

impl PatchAutoencoder {
    pub fn new(side: usize, patch: usize, dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        check_geometry(side, patch)?;
        if dim < 1 || hidden < 1 {
            return Err(Error::Config("token and hidden widths must be >= 1".into()));
        }
        let pix = patch * patch;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut linear = |fan_in: usize, fan_out: usize| -> Tensor {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Tensor::from_parts(vec![fan_in, fan_out], data)
        };
        let params = vec![
            linear(pix, hidden),
            Tensor::zeros(&[hidden]),
            linear(hidden, dim),
            Tensor::zeros(&[dim]),
            linear(dim, hidden),
            Tensor::zeros(&[hidden]),
            linear(hidden, pix),
            Tensor::zeros(&[pix]),
        ];
        Ok(Self {
            patch,
            dim,
            hidden,
            side,
            params,
        })
    }

    /// Tokens per image.
    pub fn tokens_per_image(&self) -> usize {
        let g = self.side / self.patch;
        g * g
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.side / self.patch;
        (g, g)
    }

    /// Adds every parameter to `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            ids: self.params.iter().map(|p| g.param(p.clone())).collect(),
        }
    }

    /// Adds every parameter to `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            ids: self.params.iter().map(|p| g.constant(p.clone())).collect(),
        }
    }

    fn check_images(&self, x: &Tensor) -> Result<usize> {
        check_geometry(self.side, self.patch)?;
        if x.rank() != 3 || x.dims()[1] != self.side || x.dims()[2] != self.side {
            return shape_err(
                "encode",
                format!("expected [B x {s} x {s}] images, got {:?}", x.dims(), s = self.side),
            );
        }
        Ok(x.dims()[0])
    }

    /// Encodes a `[B x H x H]` batch to `[N x d]` tokens.
    pub fn encode(&self, g: &mut Graph, p: &BoundParams, x: &Tensor) -> Result<NodeId> {
        self.check_images(x)?;
        let patches = g.constant(patchify(x, self.patch)?);
        let h = g.matmul(patches, p.ids[0])?;
        let h = g.add_bias(h, p.ids[1])?;
        let h = g.tanh(h)?;
        let z = g.matmul(h, p.ids[2])?;
        g.add_bias(z, p.ids[3])
    }

    /// Decodes `[N x d]` tokens back to a `[B x H x H]` batch.
    pub fn decode(&self, g: &mut Graph, p: &BoundParams, z_q: NodeId) -> Result<NodeId> {
        let n = g.value(z_q).rows();
        let per = self.tokens_per_image();
        if g.value(z_q).rank() != 2 || n % per != 0 || g.value(z_q).cols() != self.dim {
            return shape_err(
                "decode",
                format!(
                    "token tensor {:?} is not B x {per} tokens of dim {}",
                    g.value(z_q).dims(),
                    self.dim
                ),
            );
        }
        let batch = n / per;
        let h = g.matmul(z_q, p.ids[4])?;
        let h = g.add_bias(h, p.ids[5])?;
        let h = g.tanh(h)?;
        let out = g.matmul(h, p.ids[6])?;
        let out = g.add_bias(out, p.ids[7])?;
        let index = unpatchify_index(batch, self.side, self.patch);
        g.gather(out, index, &[batch, self.side, self.side])
    }
}

fn check_geometry(side: usize, patch: usize) -> Result<()> {
    if patch == 0 || side == 0 || side % patch != 0 {
        return Err(Error::Config(format!(
            "image side {side} is not divisible by patch size {patch}"
        )));
    }
    Ok(())
}

/// `[B x H x H]` images to `[N x p*p]` patch rows in token order.
pub fn patchify(x: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, side) = (x.dims()[0], x.dims()[1]);
    check_geometry(side, patch)?;
    let index = unpatchify_index(b, side, patch);
    // unpatchify maps image position -> patch-row position; invert it.
    let mut data = vec![0.0; x.numel()];
    for (img_pos, &patch_pos) in index.iter().enumerate() {
        data[patch_pos] = x.data()[img_pos];
    }
    Ok(Tensor::from_parts(vec![data.len() / (patch * patch), patch * patch], data))
}

/// For each pixel of the `[B x H x H]` output, its flat position in the
/// `[N x p*p]` patch-row layout.
fn unpatchify_index(batch: usize, side: usize, patch: usize) -> Vec<usize> {
    let g = side / patch;
    let pix = patch * patch;
    let mut index = Vec::with_capacity(batch * side * side);
    for b in 0..batch {
        for r in 0..side {
            for c in 0..side {
                let token = b * g * g + (r / patch) * g + c / patch;
                index.push(token * pix + (r % patch) * patch + c % patch);
            }
        }
    }
    index
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_batch(b: usize, side: usize) -> Tensor {
        let data = (0..b * side * side).map(|i| (i % 17) as f64 / 16.0).collect();
        Tensor::new(vec![b, side, side], data).unwrap()
    }

    #[test]
    fn token_counts() {
        let m = PatchAutoencoder::new(28, 4, 64, 16, 0).unwrap();
        assert_eq!(m.tokens_per_image(), 49);
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let z = m.encode(&mut g, &p, &image_batch(2, 28)).unwrap();
        assert_eq!(g.value(z).dims(), &[98, 64]);
        let x = m.decode(&mut g, &p, z).unwrap();
        assert_eq!(g.value(x).dims(), &[2, 28, 28]);
    }

    #[test]
    fn indivisible_side_rejected() {
        assert!(matches!(
            PatchAutoencoder::new(30, 4, 8, 8, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn patch_order_is_row_major() {
        // 1 image, 4x4, patch 2: token 1 is the top-right 2x2 block.
        let x = Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.dims(), &[4, 4]);
        assert_eq!(p.row(0), &[0., 1., 4., 5.]);
        assert_eq!(p.row(1), &[2., 3., 6., 7.]);
        assert_eq!(p.row(2), &[8., 9., 12., 13.]);
    }

    #[test]
    fn zero_weights_give_zero_tokens_and_images() {
        let mut m = PatchAutoencoder::new(8, 4, 3, 5, 1).unwrap();
        m.params.iter_mut().for_each(|t| t.data_mut().fill(0.0));
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let z = m.encode(&mut g, &p, &image_batch(1, 8)).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
        let x = m.decode(&mut g, &p, z).unwrap();
        assert!(g.value(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_round_trips_patch_layout() {
        let m = PatchAutoencoder::new(8, 4, 3, 5, 1).unwrap();
        let x = image_batch(2, 8);
        let patches = patchify(&x, 4).unwrap();
        let mut g = Graph::new();
        let src = g.constant(patches);
        let back = g
            .gather(src, unpatchify_index(2, 8, 4), &[2, 8, 8])
            .unwrap();
        assert_eq!(g.value(back), &x);
        assert_eq!(m.grid(), (2, 2));
    }

    #[test]
    fn decode_rejects_bad_token_count() {
        let m = PatchAutoencoder::new(8, 4, 3, 5, 1).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let z = g.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(m.decode(&mut g, &p, z), Err(Error::Shape { .. })));
    }
}
