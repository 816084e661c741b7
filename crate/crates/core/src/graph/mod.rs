//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records operations as they are built (define-by-run); node ids
//! are append-ordered, so the node list is always topologically sorted. Each
//! node holds its materialized output, which makes three things cheap:
//!
//! * `backward` walks the list in reverse and applies each kernel's chain
//!   rule, accumulating into the leaf tensors' gradient slots (additive
//!   across calls until `zero_grad`);
//! * `forward` re-evaluates the whole graph against new leaf bindings, which
//!   is what the finite-difference oracle uses to probe a loss;
//! * replaying with identical inputs reproduces bit-identical values, since
//!   every kernel uses a pinned reduction order (see `kernels`).
//!
//! The kernel set is closed and deliberately minimal: matmul, add, mul (and
//! the two broadcast forms a ViT needs), constant scale, tanh-GELU, pre-affine
//! layer norm (eps 1e-5 by default), softmax, token mean-pool, reshape /
//! permute / row-gather data movement, and a fused soft-target cross-entropy.
//! Attention is composed from these rather than being its own kernel.

pub mod kernels;

use std::collections::HashMap;

use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// lhs (..., m, k) x rhs (k, n) with the weight shared over leading dims.
    MatMulShared,
    /// lhs (l, ..., m, k) x rhs (l, ..., k, n), slab by slab.
    MatMulBatched,
    Add,
    /// rhs shape is a suffix of lhs shape, tiled over the leading dims.
    AddBcast,
    Mul,
    /// rhs is (d,), lhs (..., d).
    MulBcastLast,
    /// rhs is (b,), lhs (b, ...): per-sample scalar.
    MulBcastSample,
    Scale(f64),
    Gelu,
    LayerNorm { eps: f64 },
    Softmax,
    MeanTokens,
    Reshape,
    Permute(Vec<usize>),
    GatherRows(Vec<usize>),
    /// inputs: [logits (b, k), targets (b, k)]; output scalar. Gradient flows
    /// to the logits only; targets are labels.
    SoftCrossEntropy,
    Sum,
}

struct Node<T: Scalar> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    needs_grad: bool,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown input name '{0}'")]
    UnknownInput(String),
    #[error("node {node}: shape mismatch, expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        node: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node id {0} out of range")]
    BadNodeId(usize),
}

#[derive(Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    names: HashMap<String, NodeId>,
}

impl<T: Scalar> Graph<T> {
    pub const LAYER_NORM_EPS: f64 = 1e-5;

    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            names: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a named leaf. The tensor's `requires_grad` flag decides
    /// whether `backward` populates its gradient slot.
    pub fn input(&mut self, name: &str, tensor: Tensor<T>) -> NodeId {
        let id = self.leaf(tensor);
        self.names.insert(name.to_string(), id);
        id
    }

    /// Unnamed leaf (constants such as masks and soft targets).
    pub fn leaf(&mut self, tensor: Tensor<T>) -> NodeId {
        let needs = tensor.requires_grad;
        self.push(Op::Leaf, vec![], tensor, needs)
    }

    pub fn by_name(&self, name: &str) -> Result<NodeId, GraphError> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| GraphError::UnknownInput(name.to_string()))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated on a leaf, if any.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor<T>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        id
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn any_needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn bad_shape(&self, expected: &[usize], actual: &[usize]) -> ! {
        panic!(
            "node {}: shape mismatch, expected {:?}, got {:?}",
            self.nodes.len(),
            expected,
            actual
        );
    }

    // ---- op builders --------------------------------------------------------

    /// Matrix product. Accepts rhs of rank 2 (shared weight) or rhs whose
    /// leading dims match the lhs (batched).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs rank >= 2");
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let batched = sb.len() > 2;
        if batched {
            if sb[..sb.len() - 2] != sa[..sa.len() - 2] || sb[sb.len() - 2] != k {
                self.bad_shape(&sa, &sb);
            }
        } else if sb[0] != k {
            self.bad_shape(&[k, sb[1]], &sb);
        }
        let n = sb[sb.len() - 1];
        let l: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa.clone();
        let last = out_shape.len() - 1;
        out_shape[last] = n;
        let mut out = Tensor::zeros(&out_shape);
        {
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            if batched {
                kernels::matmul_batched(m, k, n, av, bv, out.data_mut());
            } else {
                kernels::matmul_shared(l, m, k, n, av, bv, out.data_mut());
            }
        }
        let needs = self.any_needs_grad(&[a, b]);
        let op = if batched {
            Op::MatMulBatched
        } else {
            Op::MatMulShared
        };
        self.push(op, vec![a, b], out, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        if sa != sb {
            self.bad_shape(&sa, &sb);
        }
        let mut out = Tensor::zeros(&sa);
        kernels::add(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            out.data_mut(),
        );
        let needs = self.any_needs_grad(&[a, b]);
        self.push(Op::Add, vec![a, b], out, needs)
    }

    /// `a + b` where b's shape is a strict suffix of a's shape.
    pub fn add_bcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        if sb.is_empty() || sb.len() >= sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            self.bad_shape(&sa, &sb);
        }
        let mut out = Tensor::zeros(&sa);
        kernels::add_bcast(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            out.data_mut(),
        );
        let needs = self.any_needs_grad(&[a, b]);
        self.push(Op::AddBcast, vec![a, b], out, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        if sa != sb {
            self.bad_shape(&sa, &sb);
        }
        let mut out = Tensor::zeros(&sa);
        kernels::mul(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            out.data_mut(),
        );
        let needs = self.any_needs_grad(&[a, b]);
        self.push(Op::Mul, vec![a, b], out, needs)
    }

    /// `a * b` with b of shape (d,) matching a's last dim.
    pub fn mul_bcast_last(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        if sb.len() != 1 || sa.last() != sb.last() {
            self.bad_shape(&sa, &sb);
        }
        let mut out = Tensor::zeros(&sa);
        kernels::mul_bcast_last(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            out.data_mut(),
        );
        let needs = self.any_needs_grad(&[a, b]);
        self.push(Op::MulBcastLast, vec![a, b], out, needs)
    }

    /// `a * b` with b of shape (batch,) matching a's first dim.
    pub fn mul_bcast_sample(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        if sb.len() != 1 || sa.first() != sb.first() {
            self.bad_shape(&sa, &sb);
        }
        let mut out = Tensor::zeros(&sa);
        kernels::mul_bcast_sample(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            out.data_mut(),
        );
        let needs = self.any_needs_grad(&[a, b]);
        self.push(Op::MulBcastSample, vec![a, b], out, needs)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let sa = self.shape_of(a).to_vec();
        let mut out = Tensor::zeros(&sa);
        kernels::scale(
            self.nodes[a.0].value.data(),
            T::from_f64(factor),
            out.data_mut(),
        );
        let needs = self.nodes[a.0].needs_grad;
        self.push(Op::Scale(factor), vec![a], out, needs)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let sa = self.shape_of(a).to_vec();
        let mut out = Tensor::zeros(&sa);
        kernels::gelu(self.nodes[a.0].value.data(), out.data_mut());
        let needs = self.nodes[a.0].needs_grad;
        self.push(Op::Gelu, vec![a], out, needs)
    }

    /// Pre-affine normalization over the last dim with the default eps.
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        self.layer_norm_eps(a, Self::LAYER_NORM_EPS)
    }

    pub fn layer_norm_eps(&mut self, a: NodeId, eps: f64) -> NodeId {
        let sa = self.shape_of(a).to_vec();
        let d = *sa.last().expect("layer_norm needs rank >= 1");
        let mut out = Tensor::zeros(&sa);
        kernels::layer_norm(
            self.nodes[a.0].value.data(),
            d,
            T::from_f64(eps),
            out.data_mut(),
        );
        let needs = self.nodes[a.0].needs_grad;
        self.push(Op::LayerNorm { eps }, vec![a], out, needs)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let sa = self.shape_of(a).to_vec();
        let d = *sa.last().expect("softmax needs rank >= 1");
        let mut out = Tensor::zeros(&sa);
        kernels::softmax(self.nodes[a.0].value.data(), d, out.data_mut());
        let needs = self.nodes[a.0].needs_grad;
        self.push(Op::Softmax, vec![a], out, needs)
    }

    /// (b, n, d) -> (b, d) mean over tokens.
    pub fn mean_tokens(&mut self, a: NodeId) -> NodeId {
        let sa = self.shape_of(a).to_vec();
        assert_eq!(sa.len(), 3, "mean_tokens expects (batch, tokens, dim)");
        let (n, d) = (sa[1], sa[2]);
        let mut out = Tensor::zeros(&[sa[0], d]);
        kernels::mean_tokens(self.nodes[a.0].value.data(), n, d, out.data_mut());
        let needs = self.nodes[a.0].needs_grad;
        self.push(Op::MeanTokens, vec![a], out, needs)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let value = self.nodes[a.0].value.reshaped(shape);
        let needs = self.nodes[a.0].needs_grad;
        self.push(Op::Reshape, vec![a], value, needs)
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> NodeId {
        let sa = self.shape_of(a).to_vec();
        let (data, out_shape) = kernels::permute(self.nodes[a.0].value.data(), &sa, perm);
        let needs = self.nodes[a.0].needs_grad;
        self.push(
            Op::Permute(perm.to_vec()),
            vec![a],
            Tensor::new(&out_shape, data),
            needs,
        )
    }

    /// Row gather from a (rows, cols) matrix by a constant index list.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let sa = self.shape_of(a).to_vec();
        assert_eq!(sa.len(), 2, "gather_rows expects a matrix");
        let c = sa[1];
        if let Some(&bad) = indices.iter().find(|&&i| i >= sa[0]) {
            panic!("gather_rows: index {bad} out of range for {} rows", sa[0]);
        }
        let mut out = Tensor::zeros(&[indices.len(), c]);
        kernels::gather_rows(self.nodes[a.0].value.data(), c, indices, out.data_mut());
        let needs = self.nodes[a.0].needs_grad;
        self.push(Op::GatherRows(indices.to_vec()), vec![a], out, needs)
    }

    /// Fused mean soft-target cross-entropy; `targets` rows must sum to one.
    pub fn soft_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        let sl = self.shape_of(logits).to_vec();
        let st = self.shape_of(targets).to_vec();
        if sl != st || sl.len() != 2 {
            self.bad_shape(&sl, &st);
        }
        let k = sl[1];
        let loss = kernels::soft_cross_entropy(
            self.nodes[logits.0].value.data(),
            self.nodes[targets.0].value.data(),
            k,
        );
        let needs = self.nodes[logits.0].needs_grad;
        self.push(
            Op::SoftCrossEntropy,
            vec![logits, targets],
            Tensor::scalar(loss),
            needs,
        )
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = kernels::sum_all(self.nodes[a.0].value.data());
        let needs = self.nodes[a.0].needs_grad;
        self.push(Op::Sum, vec![a], Tensor::scalar(total), needs)
    }

    /// Dropout composed from a Bernoulli mask constant; identity in eval mode
    /// or at rate zero (no node is recorded in those cases).
    pub fn dropout(
        &mut self,
        a: NodeId,
        rate: f64,
        train: bool,
        rng: &mut impl rand::Rng,
    ) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        if !train || rate == 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let inv = T::from_f64(1.0 / keep);
        let n = self.nodes[a.0].value.numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    inv
                } else {
                    T::ZERO
                }
            })
            .collect();
        let shape = self.shape_of(a).to_vec();
        let m = self.leaf(Tensor::new(&shape, mask));
        self.mul(a, m)
    }

    // ---- execution ----------------------------------------------------------

    /// Re-evaluate every non-leaf node against new values for the named
    /// leaves. Unbound leaves keep their current values.
    pub fn forward(&mut self, bindings: &[(&str, &Tensor<T>)]) -> Result<(), GraphError> {
        for (name, tensor) in bindings {
            let id = self.by_name(name)?;
            if self.shape_of(id) != tensor.shape() {
                return Err(GraphError::ShapeMismatch {
                    node: id.0,
                    expected: self.shape_of(id).to_vec(),
                    actual: tensor.shape().to_vec(),
                });
            }
            self.nodes[id.0]
                .value
                .data_mut()
                .copy_from_slice(tensor.data());
        }
        self.recompute();
        Ok(())
    }

    /// Overwrite one leaf coordinate in place (the finite-difference probe
    /// nudges single coordinates between replays).
    pub fn set_leaf_value(&mut self, id: NodeId, index: usize, v: T) {
        debug_assert!(matches!(self.nodes[id.0].op, Op::Leaf));
        self.nodes[id.0].value.data_mut()[index] = v;
    }

    pub fn leaf_value_at(&self, id: NodeId, index: usize) -> T {
        self.nodes[id.0].value.data()[index]
    }

    /// Recompute all non-leaf values in topological (insertion) order.
    pub fn recompute(&mut self) {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (done, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let input = |id: NodeId| -> &Tensor<T> { &done[id.0].value };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMulShared => {
                    let a = input(node.inputs[0]);
                    let b = input(node.inputs[1]);
                    let sa = a.shape();
                    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                    let n = b.shape()[1];
                    let l: usize = sa[..sa.len() - 2].iter().product();
                    kernels::matmul_shared(l, m, k, n, a.data(), b.data(), node.value.data_mut());
                }
                Op::MatMulBatched => {
                    let a = input(node.inputs[0]);
                    let b = input(node.inputs[1]);
                    let sa = a.shape();
                    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                    let n = *b.shape().last().unwrap();
                    kernels::matmul_batched(m, k, n, a.data(), b.data(), node.value.data_mut());
                }
                Op::Add => kernels::add(
                    input(node.inputs[0]).data(),
                    input(node.inputs[1]).data(),
                    node.value.data_mut(),
                ),
                Op::AddBcast => kernels::add_bcast(
                    input(node.inputs[0]).data(),
                    input(node.inputs[1]).data(),
                    node.value.data_mut(),
                ),
                Op::Mul => kernels::mul(
                    input(node.inputs[0]).data(),
                    input(node.inputs[1]).data(),
                    node.value.data_mut(),
                ),
                Op::MulBcastLast => kernels::mul_bcast_last(
                    input(node.inputs[0]).data(),
                    input(node.inputs[1]).data(),
                    node.value.data_mut(),
                ),
                Op::MulBcastSample => kernels::mul_bcast_sample(
                    input(node.inputs[0]).data(),
                    input(node.inputs[1]).data(),
                    node.value.data_mut(),
                ),
                Op::Scale(f) => kernels::scale(
                    input(node.inputs[0]).data(),
                    T::from_f64(*f),
                    node.value.data_mut(),
                ),
                Op::Gelu => kernels::gelu(input(node.inputs[0]).data(), node.value.data_mut()),
                Op::LayerNorm { eps } => {
                    let a = input(node.inputs[0]);
                    let d = *a.shape().last().unwrap();
                    kernels::layer_norm(a.data(), d, T::from_f64(*eps), node.value.data_mut());
                }
                Op::Softmax => {
                    let a = input(node.inputs[0]);
                    let d = *a.shape().last().unwrap();
                    kernels::softmax(a.data(), d, node.value.data_mut());
                }
                Op::MeanTokens => {
                    let a = input(node.inputs[0]);
                    let (n, d) = (a.shape()[1], a.shape()[2]);
                    kernels::mean_tokens(a.data(), n, d, node.value.data_mut());
                }
                Op::Reshape => {
                    let src = input(node.inputs[0]).data().to_vec();
                    node.value.data_mut().copy_from_slice(&src);
                }
                Op::Permute(perm) => {
                    let a = input(node.inputs[0]);
                    let (data, _) = kernels::permute(a.data(), a.shape(), perm);
                    node.value.data_mut().copy_from_slice(&data);
                }
                Op::GatherRows(indices) => {
                    let a = input(node.inputs[0]);
                    let c = a.shape()[1];
                    kernels::gather_rows(a.data(), c, indices, node.value.data_mut());
                }
                Op::SoftCrossEntropy => {
                    let z = input(node.inputs[0]);
                    let t = input(node.inputs[1]);
                    let k = z.shape()[1];
                    let loss = kernels::soft_cross_entropy(z.data(), t.data(), k);
                    node.value.data_mut()[0] = loss;
                }
                Op::Sum => {
                    let total = kernels::sum_all(input(node.inputs[0]).data());
                    node.value.data_mut()[0] = total;
                }
            }
        }
    }

    /// Apply the chain rule from a scalar loss down to every leaf that
    /// requires gradients. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), GraphError> {
        if loss.0 >= self.nodes.len() {
            return Err(GraphError::BadNodeId(loss.0));
        }
        if !self.nodes[loss.0].value.shape().is_empty() {
            return Err(GraphError::NonScalarLoss(
                self.nodes[loss.0].value.shape().to_vec(),
            ));
        }
        // Scratch gradient per node, freed as soon as it has been consumed.
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.nodes[i].value.requires_grad {
                    self.nodes[i].value.accumulate_grad(&g);
                }
                continue;
            }
            if !self.nodes[i].needs_grad {
                continue;
            }
            let inputs = self.nodes[i].inputs.clone();
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => unreachable!(),
                Op::MatMulShared => {
                    let (a, b) = (inputs[0], inputs[1]);
                    let sa = self.shape_of(a).to_vec();
                    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                    let n = self.shape_of(b)[1];
                    let l: usize = sa[..sa.len() - 2].iter().product();
                    let mut da = vec![T::ZERO; l * m * k];
                    let mut db = vec![T::ZERO; k * n];
                    kernels::matmul_shared_backward(
                        l,
                        m,
                        k,
                        n,
                        self.nodes[a.0].value.data(),
                        self.nodes[b.0].value.data(),
                        &g,
                        &mut da,
                        &mut db,
                    );
                    accum(&mut grads, a, da);
                    accum(&mut grads, b, db);
                }
                Op::MatMulBatched => {
                    let (a, b) = (inputs[0], inputs[1]);
                    let sa = self.shape_of(a).to_vec();
                    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                    let n = *self.shape_of(b).last().unwrap();
                    let mut da = vec![T::ZERO; self.nodes[a.0].value.numel()];
                    let mut db = vec![T::ZERO; self.nodes[b.0].value.numel()];
                    kernels::matmul_batched_backward(
                        m,
                        k,
                        n,
                        self.nodes[a.0].value.data(),
                        self.nodes[b.0].value.data(),
                        &g,
                        &mut da,
                        &mut db,
                    );
                    accum(&mut grads, a, da);
                    accum(&mut grads, b, db);
                }
                Op::Add => {
                    accum(&mut grads, inputs[0], g.clone());
                    accum(&mut grads, inputs[1], g);
                }
                Op::AddBcast => {
                    let (a, b) = (inputs[0], inputs[1]);
                    let mut db = vec![T::ZERO; self.nodes[b.0].value.numel()];
                    kernels::add_bcast_backward_rhs(&g, &mut db);
                    accum(&mut grads, a, g);
                    accum(&mut grads, b, db);
                }
                Op::Mul => {
                    let (a, b) = (inputs[0], inputs[1]);
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let mut da = vec![T::ZERO; g.len()];
                    let mut db = vec![T::ZERO; g.len()];
                    for j in 0..g.len() {
                        da[j] = g[j] * bv[j];
                        db[j] = g[j] * av[j];
                    }
                    accum(&mut grads, a, da);
                    accum(&mut grads, b, db);
                }
                Op::MulBcastLast => {
                    let (a, b) = (inputs[0], inputs[1]);
                    let mut da = vec![T::ZERO; g.len()];
                    let mut db = vec![T::ZERO; self.nodes[b.0].value.numel()];
                    kernels::mul_bcast_last_backward(
                        self.nodes[a.0].value.data(),
                        self.nodes[b.0].value.data(),
                        &g,
                        &mut da,
                        &mut db,
                    );
                    accum(&mut grads, a, da);
                    accum(&mut grads, b, db);
                }
                Op::MulBcastSample => {
                    let (a, b) = (inputs[0], inputs[1]);
                    let mut da = vec![T::ZERO; g.len()];
                    let mut db = vec![T::ZERO; self.nodes[b.0].value.numel()];
                    kernels::mul_bcast_sample_backward(
                        self.nodes[a.0].value.data(),
                        self.nodes[b.0].value.data(),
                        &g,
                        &mut da,
                        &mut db,
                    );
                    accum(&mut grads, a, da);
                    accum(&mut grads, b, db);
                }
                Op::Scale(f) => {
                    let factor = T::from_f64(f);
                    let mut da = g;
                    for d in da.iter_mut() {
                        *d *= factor;
                    }
                    accum(&mut grads, inputs[0], da);
                }
                Op::Gelu => {
                    let a = inputs[0];
                    let mut da = vec![T::ZERO; g.len()];
                    kernels::gelu_backward(self.nodes[a.0].value.data(), &g, &mut da);
                    accum(&mut grads, a, da);
                }
                Op::LayerNorm { eps } => {
                    let a = inputs[0];
                    let d = *self.shape_of(a).last().unwrap();
                    let mut da = vec![T::ZERO; g.len()];
                    kernels::layer_norm_backward(
                        self.nodes[a.0].value.data(),
                        d,
                        T::from_f64(eps),
                        &g,
                        &mut da,
                    );
                    accum(&mut grads, a, da);
                }
                Op::Softmax => {
                    let a = inputs[0];
                    let d = *self.shape_of(a).last().unwrap();
                    let mut da = vec![T::ZERO; g.len()];
                    kernels::softmax_backward(self.nodes[i].value.data(), d, &g, &mut da);
                    accum(&mut grads, a, da);
                }
                Op::MeanTokens => {
                    let a = inputs[0];
                    let sa = self.shape_of(a).to_vec();
                    let (n, d) = (sa[1], sa[2]);
                    let mut da = vec![T::ZERO; self.nodes[a.0].value.numel()];
                    kernels::mean_tokens_backward(n, d, &g, &mut da);
                    accum(&mut grads, a, da);
                }
                Op::Reshape => {
                    accum(&mut grads, inputs[0], g);
                }
                Op::Permute(perm) => {
                    let a = inputs[0];
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let inv = kernels::invert_perm(&perm);
                    let (gperm, _) = kernels::permute(&g, &out_shape, &inv);
                    accum(&mut grads, a, gperm);
                }
                Op::GatherRows(indices) => {
                    let a = inputs[0];
                    let c = self.shape_of(a)[1];
                    let mut da = vec![T::ZERO; self.nodes[a.0].value.numel()];
                    kernels::gather_rows_backward(c, &indices, &g, &mut da);
                    accum(&mut grads, a, da);
                }
                Op::SoftCrossEntropy => {
                    let (z, t) = (inputs[0], inputs[1]);
                    let k = self.shape_of(z)[1];
                    let mut dz = vec![T::ZERO; self.nodes[z.0].value.numel()];
                    kernels::soft_cross_entropy_backward(
                        self.nodes[z.0].value.data(),
                        self.nodes[t.0].value.data(),
                        k,
                        g[0],
                        &mut dz,
                    );
                    accum(&mut grads, z, dz);
                }
                Op::Sum => {
                    let a = inputs[0];
                    let da = vec![g[0]; self.nodes[a.0].value.numel()];
                    accum(&mut grads, a, da);
                }
            }
        }
        Ok(())
    }
}

/// Add `delta` into a node's scratch gradient, taking ownership when the slot
/// is still empty. Handles ops whose two inputs are the same node, since each
/// contribution is accumulated separately.
fn accum<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, delta: Vec<T>) {
    match &mut grads[id.0] {
        Some(buf) => {
            for (d, x) in buf.iter_mut().zip(&delta) {
                *d += *x;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_passthrough() {
        let mut g = Graph::<f64>::new();
        let eye = g.leaf(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let x = g.leaf(Tensor::new(&[2, 2], vec![3.0, -1.0, 0.5, 2.0]));
        let y = g.matmul(eye, x);
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn softmax_uniform_on_constant_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[1, 3], vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x);
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layernorm_of_constant_row_is_zero() {
        // Zero variance: the eps-regularized formula maps everything to 0.
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[1, 4], vec![5.0; 4]));
        let y = g.layer_norm(x);
        for &v in g.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        // loss = sum(x*x), x = [1,2,3] -> grad [2,4,6]
        let mut g = Graph::<f64>::new();
        let x = g.input("x", Tensor::new(&[3, 1], vec![1.0, 2.0, 3.0]).with_grad());
        let sq = g.mul(x, x);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn cross_entropy_softmax_gradient_closed_form() {
        // grad_z = softmax(z) - onehot(k)
        let z_data = vec![0.3, -1.2, 2.0, 0.1];
        let mut g = Graph::<f64>::new();
        let z = g.input("z", Tensor::new(&[1, 4], z_data.clone()).with_grad());
        let t = g.leaf(Tensor::new(&[1, 4], vec![0.0, 0.0, 1.0, 0.0]));
        let loss = g.soft_cross_entropy(z, t);
        g.backward(loss).unwrap();
        let sm = {
            let mut out = vec![0.0; 4];
            kernels::softmax(&z_data, 4, &mut out);
            out
        };
        let grad = g.grad(z).unwrap();
        for i in 0..4 {
            let expect = sm[i] - if i == 2 { 1.0 } else { 0.0 };
            assert!((grad[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn two_backward_passes_double_the_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", Tensor::new(&[2, 1], vec![1.0, 2.0]).with_grad());
        let sq = g.mul(x, x);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn forward_replay_is_bit_identical() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", Tensor::new(&[2, 2], vec![0.4, -0.7, 1.1, 0.2]));
        let w = g.leaf(Tensor::new(&[2, 2], vec![0.3, 0.9, -0.5, 0.1]));
        let h = g.matmul(x, w);
        let a = g.gelu(h);
        let y = g.softmax(a);
        let first = g.value(y).data().to_vec();
        let rebind = Tensor::new(&[2, 2], vec![0.4, -0.7, 1.1, 0.2]);
        g.forward(&[("x", &rebind)]).unwrap();
        assert_eq!(g.value(y).data(), &first[..]);
        g.forward(&[("x", &rebind)]).unwrap();
        assert_eq!(g.value(y).data(), &first[..]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[2, 1], vec![1.0, 2.0]).with_grad());
        let y = g.mul(x, x);
        assert!(matches!(
            g.backward(y),
            Err(GraphError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn forward_rejects_unknown_name_and_bad_shape() {
        let mut g = Graph::<f64>::new();
        let _ = g.input("x", Tensor::new(&[2], vec![1.0, 2.0]));
        let bad = Tensor::new(&[3], vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            g.forward(&[("y", &bad)]),
            Err(GraphError::UnknownInput(_))
        ));
        assert!(matches!(
            g.forward(&[("x", &bad)]),
            Err(GraphError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]));
        let mut rng = crate::rng::rng_for(crate::rng::Stream::DropPath, &[0]);
        let y = g.dropout(x, 0.5, false, &mut rng);
        assert_eq!(x, y);
    }
}
