//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an arena of eagerly evaluated tensor nodes: builder
//! methods run the forward computation immediately and record the op, so
//! node creation order is a topological order and [`Graph::backward`] is a
//! single reverse sweep over the arena. Gradients only flow through nodes
//! that transitively depend on trainable parameters.
//!
//! The op set is fused around what the detection pipeline needs: matrix
//! products, row gather / grouped reductions for per-voxel aggregation, a
//! sparse-convolution primitive driven by a precomputed [`KernelMap`], and
//! scalar-valued focal / L1 losses. Each builder validates shapes and
//! returns a structured [`AutodiffError`] instead of panicking.

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, Ix2, Ix3};
use thiserror::Error;

use crate::scalar::Scalar;

pub mod gradcheck;
pub mod nn;
pub mod optim;
mod params;

pub use params::{ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: needs at least one input")]
    EmptyInputList { op: &'static str },
    #[error("backward root must hold exactly one element, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("parameter {name:?} registered twice")]
    DuplicateParam { name: String },
    #[error("unknown parameter {name:?}")]
    UnknownParam { name: String },
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Gather/scatter plan for one sparse convolution: for kernel offset slot
/// `k`, `pairs[k]` lists `(input_row, output_row)` contributions.
#[derive(Debug, Clone)]
pub struct KernelMap {
    pub n_out: usize,
    pub pairs: Vec<Vec<(usize, usize)>>,
}

enum Op<S: Scalar> {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    MulScalar(NodeId, S),
    Relu(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows(NodeId, Rc<Vec<usize>>),
    ScatterAddRows {
        input: NodeId,
        targets: Rc<Vec<usize>>,
    },
    GroupMax {
        input: NodeId,
        /// Winning input row per (group, column); -1 marks an empty group.
        argmax: Array2<i64>,
    },
    GroupMean {
        input: NodeId,
        members: Rc<Vec<Vec<usize>>>,
    },
    SumAll(NodeId),
    L1Sum {
        input: NodeId,
        target: Array2<S>,
    },
    FocalLoss {
        logits: NodeId,
        targets: Array2<S>,
        gamma: S,
        alpha: S,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Array1<S>,
        var: Array1<S>,
        eps: S,
        /// True when `mean`/`var` were computed from this batch (training),
        /// so backward must account for their dependence on the input.
        batch_stats: bool,
    },
    SparseConv {
        input: NodeId,
        weight: NodeId,
        kmap: Rc<KernelMap>,
    },
}

struct Node<S: Scalar> {
    value: ArrayD<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Arena of eagerly evaluated tensor nodes; see the module docs.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<ArrayD<S>>>,
    bindings: Vec<(ParamId, NodeId)>,
}

fn as2<S: Scalar>(a: &ArrayD<S>) -> ArrayView2<'_, S> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("node validated as 2-d at construction")
}

/// Numerically stable `ln(1 + e^x)`.
fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Elementwise [`sigmoid`] over a tensor.
pub fn sigmoid_array<S: Scalar>(x: &ArrayD<S>) -> ArrayD<S> {
    x.mapv(sigmoid)
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<S>, op: Op<S>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<S> {
        &self.nodes[id.0].value
    }

    /// Value of a node validated (at construction) to be 2-d.
    pub fn value2(&self, id: NodeId) -> ArrayView2<'_, S> {
        as2(&self.nodes[id.0].value)
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> S {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1);
        *v.iter().next().expect("scalar node")
    }

    /// Gradient of `id` from the last [`Graph::backward`] call, if any
    /// flowed to it.
    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn constant(&mut self, value: ArrayD<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant2(&mut self, value: Array2<S>) -> NodeId {
        self.constant(value.into_dyn())
    }

    /// Leaf bound to a stored parameter; its gradient is added back into
    /// the store by [`Graph::accumulate_grads`].
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> NodeId {
        let node = self.push(store.value(id).clone(), Op::Leaf, store.is_trainable(id));
        self.bindings.push((id, node));
        node
    }

    fn dims(&self, id: NodeId) -> Vec<usize> {
        self.nodes[id.0].value.shape().to_vec()
    }

    fn expect_2d(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), AutodiffError> {
        let s = self.nodes[id.0].value.shape();
        if s.len() == 2 {
            Ok((s[0], s[1]))
        } else {
            Err(AutodiffError::BadShape {
                op,
                expected: "a 2-d tensor",
                got: s.to_vec(),
            })
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (n, k) = self.expect_2d("matmul", a)?;
        let (k2, m) = self.expect_2d("matmul", b)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![n, k],
                rhs: vec![k2, m],
            });
        }
        let value = as2(&self.nodes[a.0].value)
            .dot(&as2(&self.nodes[b.0].value))
            .into_dyn();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul(a, b), ng))
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        make: impl Fn(NodeId, NodeId) -> Op<S>,
        eval: impl Fn(&ArrayD<S>, &ArrayD<S>) -> ArrayD<S>,
    ) -> Result<NodeId, AutodiffError> {
        if self.dims(a) != self.dims(b) {
            return Err(AutodiffError::ShapeMismatch {
                op: op_name,
                lhs: self.dims(a),
                rhs: self.dims(b),
            });
        }
        let value = eval(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, make(a, b), ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary_same_shape("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary_same_shape("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary_same_shape("mul", a, b, Op::Mul, |x, y| x * y)
    }

    /// `[N, M] + [M]` row-broadcast bias.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (_, m) = self.expect_2d("add_bias", x)?;
        let bs = self.dims(bias);
        if bs != [m] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: self.dims(x),
                rhs: bs,
            });
        }
        let b1 = self.nodes[bias.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("bias checked 1-d");
        let value = (&as2(&self.nodes[x.0].value) + &b1.insert_axis(Axis(0))).into_dyn();
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddBias(x, bias), ng))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: S) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v * c);
        let ng = self.needs(a);
        self.push(value, Op::MulScalar(a, c), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v.max(S::zero()));
        let ng = self.needs(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Horizontal concatenation of 2-d nodes with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        self.concat(parts, Axis(1), "concat_cols", Op::ConcatCols)
    }

    /// Vertical concatenation of 2-d nodes with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        self.concat(parts, Axis(0), "concat_rows", Op::ConcatRows)
    }

    fn concat(
        &mut self,
        parts: &[NodeId],
        axis: Axis,
        op_name: &'static str,
        make: impl Fn(Vec<NodeId>) -> Op<S>,
    ) -> Result<NodeId, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::EmptyInputList { op: op_name });
        }
        let other = Axis(1 - axis.0);
        let (r0, c0) = self.expect_2d(op_name, parts[0])?;
        let first = [r0, c0];
        for &p in &parts[1..] {
            let (r, c) = self.expect_2d(op_name, p)?;
            if [r, c][other.0] != first[other.0] {
                return Err(AutodiffError::ShapeMismatch {
                    op: op_name,
                    lhs: first.to_vec(),
                    rhs: vec![r, c],
                });
            }
        }
        let views: Vec<ArrayView2<'_, S>> =
            parts.iter().map(|p| as2(&self.nodes[p.0].value)).collect();
        let value = ndarray::concatenate(axis, &views)
            .expect("shapes validated above")
            .into_dyn();
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(value, make(parts.to_vec()), ng))
    }

    /// Row gather; indices may repeat, which makes this double as a
    /// group-to-member broadcast. Backward scatter-adds.
    pub fn gather_rows(
        &mut self,
        a: NodeId,
        indices: Rc<Vec<usize>>,
    ) -> Result<NodeId, AutodiffError> {
        let (n, c) = self.expect_2d("gather_rows", a)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: n,
            });
        }
        let src = as2(&self.nodes[a.0].value);
        let mut out = Array2::<S>::zeros((indices.len(), c));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).assign(&src.row(i));
        }
        let ng = self.needs(a);
        Ok(self.push(out.into_dyn(), Op::GatherRows(a, indices), ng))
    }

    /// Scatter-add of input rows into an `[n_out, C]` zero tensor:
    /// `out[targets[i]] += input[i]`. The adjoint of [`Graph::gather_rows`].
    pub fn scatter_add_rows(
        &mut self,
        input: NodeId,
        targets: Rc<Vec<usize>>,
        n_out: usize,
    ) -> Result<NodeId, AutodiffError> {
        let (n, c) = self.expect_2d("scatter_add_rows", input)?;
        if targets.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_add_rows",
                lhs: vec![n, c],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n_out) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "scatter_add_rows",
                index: bad,
                len: n_out,
            });
        }
        let src = as2(&self.nodes[input.0].value);
        let mut out = Array2::<S>::zeros((n_out, c));
        for (r, &t) in targets.iter().enumerate() {
            let mut orow = out.row_mut(t);
            orow += &src.row(r);
        }
        let ng = self.needs(input);
        Ok(self.push(out.into_dyn(), Op::ScatterAddRows { input, targets }, ng))
    }

    /// Per-group column-wise max over member rows. Empty groups produce a
    /// zero row. Ties go to the earliest listed member, so callers that
    /// need a deterministic winner should list members in ascending order.
    pub fn group_max(
        &mut self,
        a: NodeId,
        members: Rc<Vec<Vec<usize>>>,
    ) -> Result<NodeId, AutodiffError> {
        let (n, c) = self.expect_2d("group_max", a)?;
        self.check_members("group_max", &members, n)?;
        let src = as2(&self.nodes[a.0].value);
        let g = members.len();
        let mut out = Array2::<S>::zeros((g, c));
        let mut argmax = Array2::<i64>::from_elem((g, c), -1);
        for (gi, group) in members.iter().enumerate() {
            for ci in 0..c {
                let mut best: Option<(S, usize)> = None;
                for &row in group {
                    let v = src[(row, ci)];
                    if best.map_or(true, |(bv, _)| v > bv) {
                        best = Some((v, row));
                    }
                }
                if let Some((bv, br)) = best {
                    out[(gi, ci)] = bv;
                    argmax[(gi, ci)] = br as i64;
                }
            }
        }
        let ng = self.needs(a);
        drop(members);
        Ok(self.push(out.into_dyn(), Op::GroupMax { input: a, argmax }, ng))
    }

    /// Per-group column-wise mean over member rows; empty groups produce a
    /// zero row.
    pub fn group_mean(
        &mut self,
        a: NodeId,
        members: Rc<Vec<Vec<usize>>>,
    ) -> Result<NodeId, AutodiffError> {
        let (n, c) = self.expect_2d("group_mean", a)?;
        self.check_members("group_mean", &members, n)?;
        let src = as2(&self.nodes[a.0].value);
        let mut out = Array2::<S>::zeros((members.len(), c));
        for (gi, group) in members.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let inv = S::one() / S::from_usize(group.len()).unwrap();
            for &row in group {
                let mut orow = out.row_mut(gi);
                orow.scaled_add(inv, &src.row(row));
            }
        }
        let ng = self.needs(a);
        Ok(self.push(out.into_dyn(), Op::GroupMean { input: a, members }, ng))
    }

    fn check_members(
        &self,
        op: &'static str,
        members: &[Vec<usize>],
        n: usize,
    ) -> Result<(), AutodiffError> {
        for group in members {
            if let Some(&bad) = group.iter().find(|&&i| i >= n) {
                return Err(AutodiffError::IndexOutOfRange {
                    op,
                    index: bad,
                    len: n,
                });
            }
        }
        Ok(())
    }

    /// Sum of all elements, as a `[1]` node.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        let ng = self.needs(a);
        self.push(ArrayD::from_elem(vec![1], s), Op::SumAll(a), ng)
    }

    /// `sum(|input - target|)` against a constant target, as a `[1]` node.
    pub fn l1_sum(&mut self, input: NodeId, target: Array2<S>) -> Result<NodeId, AutodiffError> {
        let (n, c) = self.expect_2d("l1_sum", input)?;
        if target.dim() != (n, c) {
            return Err(AutodiffError::ShapeMismatch {
                op: "l1_sum",
                lhs: vec![n, c],
                rhs: target.shape().to_vec(),
            });
        }
        let x = as2(&self.nodes[input.0].value);
        let mut s = S::zero();
        ndarray::Zip::from(&x).and(&target).for_each(|a, b| {
            s += (*a - *b).abs();
        });
        let ng = self.needs(input);
        Ok(self.push(
            ArrayD::from_elem(vec![1], s),
            Op::L1Sum { input, target },
            ng,
        ))
    }

    /// Sigmoid focal loss against a constant 0/1 target matrix: summed
    /// over columns, averaged over rows, as a `[1]` node. `alpha` weights
    /// the positive class, `1 - alpha` the negative class; `gamma` is the
    /// focusing exponent. Empty input yields zero.
    pub fn focal_loss(
        &mut self,
        logits: NodeId,
        targets: Array2<S>,
        gamma: S,
        alpha: S,
    ) -> Result<NodeId, AutodiffError> {
        let (n, c) = self.expect_2d("focal_loss", logits)?;
        if targets.dim() != (n, c) {
            return Err(AutodiffError::ShapeMismatch {
                op: "focal_loss",
                lhs: vec![n, c],
                rhs: targets.shape().to_vec(),
            });
        }
        let x = as2(&self.nodes[logits.0].value);
        let mut total = S::zero();
        ndarray::Zip::from(&x).and(&targets).for_each(|&xi, &t| {
            let p = sigmoid(xi);
            let log_p = -softplus(-xi);
            let log_1mp = -softplus(xi);
            total += if t > S::lit(0.5) {
                -alpha * (S::one() - p).powf(gamma) * log_p
            } else {
                -(S::one() - alpha) * p.powf(gamma) * log_1mp
            };
        });
        let value = if n == 0 {
            S::zero()
        } else {
            total / S::from_usize(n).unwrap()
        };
        let ng = self.needs(logits);
        Ok(self.push(
            ArrayD::from_elem(vec![1], value),
            Op::FocalLoss {
                logits,
                targets,
                gamma,
                alpha,
            },
            ng,
        ))
    }

    /// Normalizes `[N, C]` rows with the supplied per-column statistics and
    /// applies the affine `gamma`/`beta`. When `batch_stats` is true the
    /// statistics are treated as functions of the input in backward
    /// (training); otherwise they are constants (inference).
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Array1<S>,
        var: Array1<S>,
        eps: S,
        batch_stats: bool,
    ) -> Result<NodeId, AutodiffError> {
        let (_, c) = self.expect_2d("batch_norm", input)?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.dims(id) != [c] {
                let _ = name;
                return Err(AutodiffError::ShapeMismatch {
                    op: "batch_norm",
                    lhs: vec![c],
                    rhs: self.dims(id),
                });
            }
        }
        if mean.len() != c || var.len() != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "batch_norm",
                lhs: vec![c],
                rhs: vec![mean.len(), var.len()],
            });
        }
        let x = as2(&self.nodes[input.0].value);
        let g1 = self.nodes[gamma.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("gamma checked 1-d");
        let b1 = self.nodes[beta.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("beta checked 1-d");
        let inv_std = var.mapv(|v| S::one() / (v + eps).sqrt());
        let mut out = Array2::<S>::zeros(x.dim());
        for (mut orow, xrow) in out.outer_iter_mut().zip(x.outer_iter()) {
            for ci in 0..c {
                orow[ci] = (xrow[ci] - mean[ci]) * inv_std[ci] * g1[ci] + b1[ci];
            }
        }
        let ng = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out.into_dyn(),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                var,
                eps,
                batch_stats,
            },
            ng,
        ))
    }

    /// Sparse convolution: `weight` is `[K, C_in, C_out]` and `kmap` routes
    /// input rows to output rows per kernel slot.
    pub fn sparse_conv(
        &mut self,
        input: NodeId,
        weight: NodeId,
        kmap: Rc<KernelMap>,
    ) -> Result<NodeId, AutodiffError> {
        let (n_in, c_in) = self.expect_2d("sparse_conv", input)?;
        let ws = self.dims(weight);
        if ws.len() != 3 || ws[0] != kmap.pairs.len() || ws[1] != c_in {
            return Err(AutodiffError::BadShape {
                op: "sparse_conv",
                expected: "weight of shape [n_kernel_offsets, c_in, c_out]",
                got: ws,
            });
        }
        let c_out = ws[2];
        for pairs in &kmap.pairs {
            for &(i, o) in pairs {
                if i >= n_in {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "sparse_conv",
                        index: i,
                        len: n_in,
                    });
                }
                if o >= kmap.n_out {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "sparse_conv",
                        index: o,
                        len: kmap.n_out,
                    });
                }
            }
        }
        let x = as2(&self.nodes[input.0].value);
        let w = self.nodes[weight.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("weight checked 3-d");
        let mut out = Array2::<S>::zeros((kmap.n_out, c_out));
        for (k, pairs) in kmap.pairs.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let mut gathered = Array2::<S>::zeros((pairs.len(), c_in));
            for (r, &(i, _)) in pairs.iter().enumerate() {
                gathered.row_mut(r).assign(&x.row(i));
            }
            let prod = gathered.dot(&w.index_axis(Axis(0), k));
            for (r, &(_, o)) in pairs.iter().enumerate() {
                let mut orow = out.row_mut(o);
                orow += &prod.row(r);
            }
        }
        let ng = self.needs(input) || self.needs(weight);
        Ok(self.push(
            out.into_dyn(),
            Op::SparseConv {
                input,
                weight,
                kmap,
            },
            ng,
        ))
    }

    /// Reverse sweep from a single-element root. Node gradients are
    /// queryable via [`Graph::grad`] afterwards; parameter gradients reach
    /// the store only through [`Graph::accumulate_grads`].
    pub fn backward(&mut self, root: NodeId) -> Result<(), AutodiffError> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot {
                shape: self.dims(root),
            });
        }
        let mut grads: Vec<Option<ArrayD<S>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.shape(), S::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn add_grad(&self, grads: &mut [Option<ArrayD<S>>], id: NodeId, delta: ArrayD<S>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &ArrayD<S>, grads: &mut [Option<ArrayD<S>>]) {
        let g0 = || *g.iter().next().expect("scalar grad");
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let g2 = as2(g);
                let av = as2(&self.nodes[a.0].value);
                let bv = as2(&self.nodes[b.0].value);
                if self.nodes[a.0].needs_grad {
                    self.add_grad(grads, *a, g2.dot(&bv.t()).into_dyn());
                }
                if self.nodes[b.0].needs_grad {
                    self.add_grad(grads, *b, av.t().dot(&g2).into_dyn());
                }
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.add_grad(grads, *a, g * &self.nodes[b.0].value);
                }
                if self.nodes[b.0].needs_grad {
                    self.add_grad(grads, *b, g * &self.nodes[a.0].value);
                }
            }
            Op::AddBias(x, bias) => {
                self.add_grad(grads, *x, g.clone());
                if self.nodes[bias.0].needs_grad {
                    let g2 = as2(g);
                    self.add_grad(grads, *bias, g2.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::MulScalar(a, c) => {
                self.add_grad(grads, *a, g.mapv(|v| v * *c));
            }
            Op::Relu(a) => {
                let mask = &self.nodes[a.0].value;
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(mask).for_each(|dv, &xv| {
                    if xv <= S::zero() {
                        *dv = S::zero();
                    }
                });
                self.add_grad(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let g2 = as2(g);
                let mut col = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    if self.nodes[p.0].needs_grad {
                        let slice = g2.slice(ndarray::s![.., col..col + w]).to_owned();
                        self.add_grad(grads, *p, slice.into_dyn());
                    }
                    col += w;
                }
            }
            Op::ConcatRows(parts) => {
                let g2 = as2(g);
                let mut row = 0;
                for p in parts {
                    let h = self.nodes[p.0].value.shape()[0];
                    if self.nodes[p.0].needs_grad {
                        let slice = g2.slice(ndarray::s![row..row + h, ..]).to_owned();
                        self.add_grad(grads, *p, slice.into_dyn());
                    }
                    row += h;
                }
            }
            Op::GatherRows(a, indices) => {
                let g2 = as2(g);
                let mut d = Array2::<S>::zeros((self.nodes[a.0].value.shape()[0], g2.ncols()));
                for (r, &src) in indices.iter().enumerate() {
                    let mut drow = d.row_mut(src);
                    drow += &g2.row(r);
                }
                self.add_grad(grads, *a, d.into_dyn());
            }
            Op::ScatterAddRows { input, targets } => {
                let g2 = as2(g);
                let mut d = Array2::<S>::zeros((targets.len(), g2.ncols()));
                for (r, &t) in targets.iter().enumerate() {
                    d.row_mut(r).assign(&g2.row(t));
                }
                self.add_grad(grads, *input, d.into_dyn());
            }
            Op::GroupMax { input, argmax } => {
                let g2 = as2(g);
                let shape = (self.nodes[input.0].value.shape()[0], g2.ncols());
                let mut d = Array2::<S>::zeros(shape);
                for ((gi, ci), &row) in argmax.indexed_iter() {
                    if row >= 0 {
                        d[(row as usize, ci)] += g2[(gi, ci)];
                    }
                }
                self.add_grad(grads, *input, d.into_dyn());
            }
            Op::GroupMean { input, members } => {
                let g2 = as2(g);
                let shape = (self.nodes[input.0].value.shape()[0], g2.ncols());
                let mut d = Array2::<S>::zeros(shape);
                for (gi, group) in members.iter().enumerate() {
                    if group.is_empty() {
                        continue;
                    }
                    let inv = S::one() / S::from_usize(group.len()).unwrap();
                    for &row in group {
                        let mut drow = d.row_mut(row);
                        drow.scaled_add(inv, &g2.row(gi));
                    }
                }
                self.add_grad(grads, *input, d.into_dyn());
            }
            Op::SumAll(a) => {
                let d = ArrayD::from_elem(self.nodes[a.0].value.shape(), g0());
                self.add_grad(grads, *a, d);
            }
            Op::L1Sum { input, target } => {
                let x = as2(&self.nodes[input.0].value);
                let scale = g0();
                let mut d = Array2::<S>::zeros(x.dim());
                ndarray::Zip::from(&mut d)
                    .and(&x)
                    .and(target)
                    .for_each(|dv, &a, &b| {
                        let diff = a - b;
                        *dv = if diff > S::zero() {
                            scale
                        } else if diff < S::zero() {
                            -scale
                        } else {
                            S::zero()
                        };
                    });
                self.add_grad(grads, *input, d.into_dyn());
            }
            Op::FocalLoss {
                logits,
                targets,
                gamma,
                alpha,
            } => {
                let x = as2(&self.nodes[logits.0].value);
                let n = x.nrows();
                if n == 0 {
                    return;
                }
                let scale = g0() / S::from_usize(n).unwrap();
                let (gam, al) = (*gamma, *alpha);
                let mut d = Array2::<S>::zeros(x.dim());
                ndarray::Zip::from(&mut d)
                    .and(&x)
                    .and(targets)
                    .for_each(|dv, &xi, &t| {
                        let p = sigmoid(xi);
                        let log_p = -softplus(-xi);
                        let log_1mp = -softplus(xi);
                        let q = S::one() - p;
                        *dv = scale
                            * if t > S::lit(0.5) {
                                al * q.powf(gam) * (gam * p * log_p - q)
                            } else {
                                (S::one() - al) * p.powf(gam) * (p - gam * q * log_1mp)
                            };
                    });
                self.add_grad(grads, *logits, d.into_dyn());
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                var,
                eps,
                batch_stats,
            } => {
                let g2 = as2(g);
                let x = as2(&self.nodes[input.0].value);
                let gam = self.nodes[gamma.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .expect("gamma 1-d");
                let n = x.nrows();
                let c = x.ncols();
                let inv_std = var.mapv(|v| S::one() / (v + *eps).sqrt());
                // xhat and per-column reductions of the incoming gradient
                let mut sum_dy = Array1::<S>::zeros(c);
                let mut sum_dy_xhat = Array1::<S>::zeros(c);
                for r in 0..n {
                    for ci in 0..c {
                        let xhat = (x[(r, ci)] - mean[ci]) * inv_std[ci];
                        sum_dy[ci] += g2[(r, ci)];
                        sum_dy_xhat[ci] += g2[(r, ci)] * xhat;
                    }
                }
                if self.nodes[beta.0].needs_grad {
                    self.add_grad(grads, *beta, sum_dy.clone().into_dyn());
                }
                if self.nodes[gamma.0].needs_grad {
                    self.add_grad(grads, *gamma, sum_dy_xhat.clone().into_dyn());
                }
                if self.nodes[input.0].needs_grad {
                    let mut d = Array2::<S>::zeros(x.dim());
                    if *batch_stats && n > 0 {
                        let inv_n = S::one() / S::from_usize(n).unwrap();
                        for r in 0..n {
                            for ci in 0..c {
                                let xhat = (x[(r, ci)] - mean[ci]) * inv_std[ci];
                                d[(r, ci)] = gam[ci]
                                    * inv_std[ci]
                                    * (g2[(r, ci)]
                                        - inv_n * sum_dy[ci]
                                        - xhat * inv_n * sum_dy_xhat[ci]);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for ci in 0..c {
                                d[(r, ci)] = gam[ci] * inv_std[ci] * g2[(r, ci)];
                            }
                        }
                    }
                    self.add_grad(grads, *input, d.into_dyn());
                }
            }
            Op::SparseConv {
                input,
                weight,
                kmap,
            } => {
                let g2 = as2(g);
                let x = as2(&self.nodes[input.0].value);
                let w = self.nodes[weight.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix3>()
                    .expect("weight 3-d");
                let (c_in, c_out) = (x.ncols(), g2.ncols());
                let need_in = self.nodes[input.0].needs_grad;
                let need_w = self.nodes[weight.0].needs_grad;
                let mut d_in = Array2::<S>::zeros(x.dim());
                let mut d_w = ndarray::Array3::<S>::zeros(w.dim());
                for (k, pairs) in kmap.pairs.iter().enumerate() {
                    if pairs.is_empty() {
                        continue;
                    }
                    let mut gx = Array2::<S>::zeros((pairs.len(), c_in));
                    let mut go = Array2::<S>::zeros((pairs.len(), c_out));
                    for (r, &(i, o)) in pairs.iter().enumerate() {
                        gx.row_mut(r).assign(&x.row(i));
                        go.row_mut(r).assign(&g2.row(o));
                    }
                    if need_w {
                        let dw = gx.t().dot(&go);
                        let mut slot = d_w.index_axis_mut(Axis(0), k);
                        slot += &dw;
                    }
                    if need_in {
                        let di = go.dot(&w.index_axis(Axis(0), k).t());
                        for (r, &(i, _)) in pairs.iter().enumerate() {
                            let mut drow = d_in.row_mut(i);
                            drow += &di.row(r);
                        }
                    }
                }
                if need_in {
                    self.add_grad(grads, *input, d_in.into_dyn());
                }
                if need_w {
                    self.add_grad(grads, *weight, d_w.into_dyn());
                }
            }
        }
    }

    /// Adds the gradients of every param-bound leaf into the store.
    /// Store gradients accumulate across calls until explicitly zeroed.
    pub fn accumulate_grads(&self, store: &mut ParamStore<S>) {
        for &(pid, node) in &self.bindings {
            if let Some(g) = self.grad(node) {
                store.add_grad(pid, g);
            }
        }
    }
}
