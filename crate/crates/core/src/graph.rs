//! Arena-backed reverse-mode differentiation.
//!
//! A [`Graph`] owns every node created during one forward pass. Nodes only
//! ever reference nodes created before them, so the arena order is a
//! topological order and the parent graph is acyclic by construction.
//! [`Graph::backward`] walks the arena from the root towards index zero and
//! accumulates gradients additively into every node that requires them.
//!
//! ```
//! use arcvq::graph::Graph;
//! use arcvq::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::from_vec(vec![3.0]));
//! let sq = g.square(x).unwrap();
//! let root = g.sum(sq).unwrap();
//! g.backward(root).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
//! ```

use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, MatRef, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Public operation tags accepted by [`Graph::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    /// `[m x n] + [n]` broadcast over rows.
    AddBias,
    Relu,
    Tanh,
    Square,
    Sqrt,
    Clamp { lo: f64, hi: f64 },
    Reshape(Vec<usize>),
    Transpose,
    Sum,
    Mean,
    /// Reduction over the last axis.
    LogSumExp,
    Detach,
}

/// Backward rule of a fused node: maps the upstream gradient to one optional
/// gradient per parent.
pub trait FusedBackward {
    fn name(&self) -> &'static str;
    fn backward(&self, upstream: &Tensor, parents: &[&Tensor]) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Kind(OpKind),
    /// Forward takes the second operand's value; gradient flows to the first.
    StraightThrough,
    /// `out[i] = in[index[i]]`; backward scatter-adds.
    Gather(Vec<usize>),
    Fused(Box<dyn FusedBackward>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Leaf => write!(f, "leaf"),
            Op::Kind(k) => write!(f, "{k:?}"),
            Op::StraightThrough => write!(f, "straight-through"),
            Op::Gather(idx) => write!(f, "gather[{}]", idx.len()),
            Op::Fused(b) => write!(f, "fused:{}", b.name()),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    parents: Vec<NodeId>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: Vec<NodeId>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            parents,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, Vec::new(), true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, Vec::new(), false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].parents
    }

    pub fn op_name(&self, id: NodeId) -> String {
        format!("{:?}", self.nodes[id.0].op)
    }

    fn any_requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&p| self.nodes[p.0].requires_grad)
    }

    /// Builds a node for `kind` applied to `inputs`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul | OpKind::AddBias => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Contract(format!(
                "{kind:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        let value = forward_value(&kind, &inputs.iter().map(|&i| self.value(i)).collect::<Vec<_>>())?;
        let requires = match kind {
            OpKind::Detach => false,
            _ => self.any_requires(inputs),
        };
        Ok(self.push(value, Op::Kind(kind), inputs.to_vec(), requires))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(OpKind::AddBias, &[a, bias])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Tanh, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Square, &[a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sqrt, &[a])
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.apply(OpKind::Clamp { lo, hi }, &[a])
    }

    pub fn reshape(&mut self, a: NodeId, dims: &[usize]) -> Result<NodeId> {
        self.apply(OpKind::Reshape(dims.to_vec()), &[a])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Transpose, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mean, &[a])
    }

    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::LogSumExp, &[a])
    }

    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Detach, &[a])
    }

    /// Straight-through quantization: the node's value is `q_values`, and the
    /// upstream gradient reaches `z` unchanged. `q_values` enters as a
    /// constant and never receives a gradient.
    pub fn quantize_ste(&mut self, z: NodeId, q_values: Tensor) -> Result<NodeId> {
        if self.value(z).dims() != q_values.dims() {
            return shape_err(
                "quantize_ste",
                format!("z {:?} vs q {:?}", self.value(z).dims(), q_values.dims()),
            );
        }
        let requires = self.requires_grad(z);
        Ok(self.push(q_values, Op::StraightThrough, vec![z], requires))
    }

    /// Flat gather: `out.data[i] = src.data[index[i]]`, shaped as `dims`.
    pub fn gather(&mut self, src: NodeId, index: Vec<usize>, dims: &[usize]) -> Result<NodeId> {
        let n = self.value(src).numel();
        if index.iter().any(|&i| i >= n) {
            return shape_err("gather", format!("index out of range for {n} elements"));
        }
        if dims.iter().product::<usize>() != index.len() {
            return shape_err(
                "gather",
                format!("dims {dims:?} do not hold {} elements", index.len()),
            );
        }
        let src_data = self.value(src).data();
        let data = index.iter().map(|&i| src_data[i]).collect();
        let value = Tensor::new(dims.to_vec(), data)?;
        let requires = self.requires_grad(src);
        Ok(self.push(value, Op::Gather(index), vec![src], requires))
    }

    /// Rows of a 2-D node selected by `rows` (repeats allowed).
    pub fn gather_rows(&mut self, src: NodeId, rows: &[usize]) -> Result<NodeId> {
        let v = self.value(src);
        if v.rank() != 2 {
            return shape_err("gather_rows", format!("expected 2-D, got {:?}", v.dims()));
        }
        let (r, c) = (v.rows(), v.cols());
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return shape_err("gather_rows", format!("row {bad} out of range for {r} rows"));
        }
        let index = rows.iter().flat_map(|&i| i * c..(i + 1) * c).collect();
        self.gather(src, index, &[rows.len(), c])
    }

    /// Node with a precomputed value and a hand-written backward rule.
    pub fn fused(
        &mut self,
        inputs: &[NodeId],
        value: Tensor,
        backward: Box<dyn FusedBackward>,
    ) -> NodeId {
        let requires = self.any_requires(inputs);
        self.push(value, Op::Fused(backward), inputs.to_vec(), requires)
    }

    /// Clears all gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Accumulates d(root)/d(node) into every reachable node that requires a
    /// gradient. `root` must be a scalar.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got dims {:?}",
                self.value(root).dims()
            )));
        }
        if !self.requires_grad(root) {
            return Ok(());
        }
        accumulate(&mut self.nodes[root.0].grad, Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(upstream) = node.grad.as_ref() else {
                continue;
            };
            if !node.requires_grad || node.parents.is_empty() {
                continue;
            }
            let parent_vals: Vec<&Tensor> = node.parents.iter().map(|p| &before[p.0].value).collect();
            let contributions = parent_grads(&node.op, &node.value, upstream, &parent_vals);
            for (p, g) in node.parents.iter().zip(contributions) {
                let parent = &mut before[p.0];
                if let (Some(g), true) = (g, parent.requires_grad) {
                    accumulate(&mut parent.grad, g);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return shape_err(op, format!("{:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

fn forward_value(kind: &OpKind, x: &[&Tensor]) -> Result<Tensor> {
    Ok(match kind {
        OpKind::Add => {
            same_dims("add", x[0], x[1])?;
            x[0].zip_map(x[1], |a, b| a + b)
        }
        OpKind::Sub => {
            same_dims("sub", x[0], x[1])?;
            x[0].zip_map(x[1], |a, b| a - b)
        }
        OpKind::Mul => {
            same_dims("mul", x[0], x[1])?;
            x[0].zip_map(x[1], |a, b| a * b)
        }
        OpKind::Scale(c) => x[0].map(|a| a * c),
        OpKind::MatMul => x[0].matmul(x[1])?,
        OpKind::AddBias => {
            let (a, b) = (x[0], x[1]);
            if a.rank() != 2 || b.numel() != a.cols() {
                return shape_err(
                    "add_bias",
                    format!("matrix {:?} with bias {:?}", a.dims(), b.dims()),
                );
            }
            let c = a.cols();
            let mut out = a.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += b.data()[i % c];
            }
            out
        }
        OpKind::Relu => x[0].map(|a| a.max(0.0)),
        OpKind::Tanh => x[0].map(f64::tanh),
        OpKind::Square => x[0].map(|a| a * a),
        OpKind::Sqrt => x[0].map(f64::sqrt),
        OpKind::Clamp { lo, hi } => {
            if lo > hi {
                return Err(Error::Contract(format!("clamp bounds {lo} > {hi}")));
            }
            x[0].map(|a| a.clamp(*lo, *hi))
        }
        OpKind::Reshape(dims) => x[0].reshape(dims)?,
        OpKind::Transpose => x[0].transpose()?,
        OpKind::Sum => Tensor::scalar(x[0].sum()),
        OpKind::Mean => Tensor::scalar(x[0].sum() / x[0].numel() as f64),
        OpKind::LogSumExp => {
            let t = x[0];
            let n = t.cols();
            let outer = t.numel() / n;
            let data: Vec<f64> = t.data().chunks(n).map(logsumexp_slice).collect();
            let dims = if t.rank() == 1 {
                vec![1]
            } else {
                t.dims()[..t.rank() - 1].to_vec()
            };
            debug_assert_eq!(data.len(), outer);
            Tensor::from_parts(dims, data)
        }
        OpKind::Detach => x[0].clone(),
    })
}

/// Numerically stable `ln(sum(exp(v)))`.
pub fn logsumexp_slice(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn parent_grads(op: &Op, out: &Tensor, g: &Tensor, x: &[&Tensor]) -> Vec<Option<Tensor>> {
    match op {
        Op::Leaf => Vec::new(),
        Op::StraightThrough => vec![Some(g.clone())],
        Op::Gather(index) => {
            let mut acc = vec![0.0; x[0].numel()];
            for (gi, &src) in g.data().iter().zip(index) {
                acc[src] += gi;
            }
            vec![Some(Tensor::from_parts(x[0].dims().to_vec(), acc))]
        }
        Op::Fused(b) => b.backward(g, x),
        Op::Kind(kind) => kind_grads(kind, out, g, x),
    }
}

fn kind_grads(kind: &OpKind, out: &Tensor, g: &Tensor, x: &[&Tensor]) -> Vec<Option<Tensor>> {
    match kind {
        OpKind::Add => vec![Some(g.clone()), Some(g.clone())],
        OpKind::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
        OpKind::Mul => vec![
            Some(g.zip_map(x[1], |a, b| a * b)),
            Some(g.zip_map(x[0], |a, b| a * b)),
        ],
        OpKind::Scale(c) => vec![Some(g.map(|v| v * c))],
        OpKind::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            // dA = G B^T, dB = A^T G
            let mut da = vec![0.0; m * k];
            gemm(
                m,
                n,
                k,
                MatRef::row_major(g.data(), n),
                MatRef::transposed(b.data(), n),
                &mut da,
                0.0,
            );
            let mut db = vec![0.0; k * n];
            gemm(
                k,
                m,
                n,
                MatRef::transposed(a.data(), k),
                MatRef::row_major(g.data(), n),
                &mut db,
                0.0,
            );
            vec![
                Some(Tensor::from_parts(a.dims().to_vec(), da)),
                Some(Tensor::from_parts(b.dims().to_vec(), db)),
            ]
        }
        OpKind::AddBias => {
            let c = x[0].cols();
            let mut db = vec![0.0; c];
            for row in g.data().chunks(c) {
                for (acc, v) in db.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![
                Some(g.clone()),
                Some(Tensor::from_parts(x[1].dims().to_vec(), db)),
            ]
        }
        OpKind::Relu => vec![Some(g.zip_map(x[0], |gv, a| if a > 0.0 { gv } else { 0.0 }))],
        OpKind::Tanh => vec![Some(g.zip_map(out, |gv, t| gv * (1.0 - t * t)))],
        OpKind::Square => vec![Some(g.zip_map(x[0], |gv, a| 2.0 * a * gv))],
        OpKind::Sqrt => vec![Some(g.zip_map(out, |gv, r| gv * 0.5 / r))],
        OpKind::Clamp { lo, hi } => vec![Some(g.zip_map(x[0], |gv, a| {
            if a >= *lo && a <= *hi {
                gv
            } else {
                0.0
            }
        }))],
        OpKind::Reshape(_) => vec![Some(Tensor::from_parts(
            x[0].dims().to_vec(),
            g.data().to_vec(),
        ))],
        OpKind::Transpose => vec![Some(g.transpose().expect("2-D"))],
        OpKind::Sum => vec![Some(Tensor::full(x[0].dims(), g.item()))],
        OpKind::Mean => vec![Some(Tensor::full(x[0].dims(), g.item() / x[0].numel() as f64))],
        OpKind::LogSumExp => {
            let n = x[0].cols();
            let mut dx = vec![0.0; x[0].numel()];
            for (r, (chunk, dchunk)) in x[0].data().chunks(n).zip(dx.chunks_mut(n)).enumerate() {
                let lse = out.data()[r];
                let gr = g.data()[r];
                for (d, v) in dchunk.iter_mut().zip(chunk) {
                    *d = gr * (v - lse).exp();
                }
            }
            vec![Some(Tensor::from_parts(x[0].dims().to_vec(), dx))]
        }
        OpKind::Detach => vec![None],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1., 2.]));
        let b = g.constant(t(&[2], &[3., 4.]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4., 6.]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3));
        let a = t(&[3, 3], &[1., -2., 3., 0.5, 5., 6., 7., 8., -9.]);
        let an = g.constant(a.clone());
        let c = g.matmul(i, an).unwrap();
        assert_eq!(g.value(c), &a);
    }

    #[test]
    fn logsumexp_of_zeros() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0., 0.]));
        let l = g.logsumexp(a).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
        assert!((g.value(l).item() - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn logsumexp_large_values_stable() {
        assert!((logsumexp_slice(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn shape_errors_name_op() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1., 2.]));
        let b = g.constant(t(&[3], &[1., 2., 3.]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
        let m = g.constant(t(&[2, 3], &[0.; 6]));
        let err = g.matmul(m, m).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[1., -3., 0.5, 2.]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Tensor::ones(&[2, 2]));
    }

    #[test]
    fn square_grad() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[3.]));
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.]);
    }

    #[test]
    fn detached_factor_is_constant() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[2.]));
        let d = g.detach(x).unwrap();
        let p = g.mul(d, x).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.]);
        assert!(g.grad(d).is_none());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn ste_forward_and_backward() {
        let mut g = Graph::new();
        let z = g.param(t(&[1, 2], &[1., 1.]));
        let q = g.quantize_ste(z, t(&[1, 2], &[0., 2.])).unwrap();
        assert_eq!(g.value(q).data(), &[0., 2.]);
        let w = g.constant(t(&[1, 2], &[0.3, -1.7]));
        let p = g.mul(q, w).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(z).unwrap().data(), &[0.3, -1.7]);
        assert_eq!(g.parents(q), &[z]);
    }

    #[test]
    fn ste_dims_checked() {
        let mut g = Graph::new();
        let z = g.param(t(&[1, 2], &[1., 1.]));
        assert!(g.quantize_ste(z, t(&[2, 1], &[0., 2.])).is_err());
    }

    #[test]
    fn gather_rows_scatters_back() {
        let mut g = Graph::new();
        let cb = g.param(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let rows = g.gather_rows(cb, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(rows).data(), &[5., 6., 1., 2., 5., 6.]);
        let s = g.sum(rows).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(cb).unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn fan_out_accumulates() {
        // x used twice: sum(x*x + x) vs single-use sum(square(x) + x)
        let x0 = t(&[3], &[0.5, -1.25, 2.0]);
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let xx = g.mul(x, x).unwrap();
        let y = g.add(xx, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();

        let mut h = Graph::new();
        let xh = h.param(x0);
        let sq = h.square(xh).unwrap();
        let sh = h.sum(sq).unwrap();
        h.backward(sh).unwrap();
        let expect: Vec<f64> = h.grad(xh).unwrap().data().iter().map(|v| v + 1.0).collect();
        assert_eq!(g.grad(x).unwrap().data(), expect.as_slice());
    }

    #[test]
    fn relu_subgradient_zero_at_origin() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[0., 1.]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0., 1.]);
    }
}
