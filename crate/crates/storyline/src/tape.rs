//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] is rebuilt for every forward pass (define-by-run). Each
//! operation validates shapes, computes its output eagerly, checks the result
//! is finite, and — when the tape is recording — appends a node holding the
//! input snapshots its backward rule needs. [`Tape::backward`] walks the
//! nodes once in reverse, accumulating vector-Jacobian products; a tape is
//! consumed by that single call and cannot be replayed.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{NodeRef, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Elementwise nonlinearity applied by [`Tape::activation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Selu,
    Tanh,
    Sigmoid,
}

/// Fixed self-normalizing scale, `lambda` in the SELU definition.
pub const SELU_LAMBDA: f64 = 1.0507009873554805;
/// Fixed negative-branch coefficient, `alpha` in the SELU definition.
pub const SELU_ALPHA: f64 = 1.6732632423543772;

impl Activation {
    pub fn apply<R: Scalar>(self, x: R) -> R {
        match self {
            Activation::Relu => {
                if x > R::zero() {
                    x
                } else {
                    R::zero()
                }
            }
            Activation::Selu => {
                let lambda = R::from_f64(SELU_LAMBDA);
                let alpha = R::from_f64(SELU_ALPHA);
                if x > R::zero() {
                    lambda * x
                } else {
                    lambda * alpha * (x.exp() - R::one())
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => {
                // Evaluate the branch whose exponential cannot overflow.
                if x >= R::zero() {
                    R::one() / (R::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (R::one() + e)
                }
            }
        }
    }

    /// Derivative recovered from the activation *output* `y`.
    fn grad_from_output<R: Scalar>(self, y: R) -> R {
        match self {
            Activation::Relu => {
                if y > R::zero() {
                    R::one()
                } else {
                    R::zero()
                }
            }
            Activation::Selu => {
                let lambda = R::from_f64(SELU_LAMBDA);
                let alpha = R::from_f64(SELU_ALPHA);
                if y > R::zero() {
                    lambda
                } else {
                    // y = lambda*alpha*(e^x - 1)  =>  dy/dx = lambda*alpha*e^x = y + lambda*alpha
                    y + lambda * alpha
                }
            }
            Activation::Tanh => R::one() - y * y,
            Activation::Sigmoid => y * (R::one() - y),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "selu" => Ok(Activation::Selu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

enum Op<R: Scalar> {
    Leaf,
    /// C = A·B with A `m×k`, B `k×n`.
    Matmul {
        a: usize,
        b: usize,
        a_data: Arc<Vec<R>>,
        b_data: Arc<Vec<R>>,
        m: usize,
        k: usize,
        n: usize,
    },
    /// C = A·Bᵀ with A `m×k`, B `n×k`.
    MatmulNt {
        a: usize,
        b: usize,
        a_data: Arc<Vec<R>>,
        b_data: Arc<Vec<R>>,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape {
        x: usize,
    },
    /// Select row `index` of a rank-2 input.
    Row {
        x: usize,
        index: usize,
        rows: usize,
        width: usize,
    },
    /// Stack rank-1 inputs of equal width into a rank-2 output.
    StackRows {
        xs: Vec<usize>,
        width: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
        shapes: Vec<Vec<usize>>,
    },
    Add {
        a: usize,
        b: usize,
    },
    /// Broadcast-add a rank-1 bias over the rows of a rank-2 input.
    AddBias {
        x: usize,
        bias: usize,
        rows: usize,
        cols: usize,
    },
    Mul {
        a: usize,
        b: usize,
        a_data: Arc<Vec<R>>,
        b_data: Arc<Vec<R>>,
    },
    Scale {
        x: usize,
        factor: R,
    },
    AddScalar {
        x: usize,
    },
    Activation {
        x: usize,
        kind: Activation,
        y_data: Arc<Vec<R>>,
    },
    Softmax {
        x: usize,
        axis: usize,
        y_data: Arc<Vec<R>>,
    },
    /// Mean token negative log-likelihood over the valid rows of a `T×V`
    /// logit matrix. `probs` holds the softmax of every valid row.
    CrossEntropy {
        logits: usize,
        probs: Vec<R>,
        targets: Vec<usize>,
        valid: Vec<bool>,
        vocab: usize,
        count: usize,
    },
    Sum {
        x: usize,
        numel: usize,
    },
}

struct Node<R: Scalar> {
    op: Op<R>,
    shape: Vec<usize>,
    /// Whether any differentiable leaf feeds this node.
    needs_grad: bool,
}

/// A single-use gradient tape over scalars of type `R`.
pub struct Tape<R: Scalar> {
    id: u64,
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
    recording: bool,
    used: bool,
}

impl<R: Scalar> Tape<R> {
    /// A recording tape for a forward pass that will be differentiated.
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            used: false,
        }
    }

    /// A non-recording tape: same operations, no graph, no gradients.
    pub fn inference() -> Self {
        let mut t = Tape::new();
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Register `t` as a differentiable leaf and return the bound copy.
    pub fn watch(&mut self, t: &Tensor<R>) -> Tensor<R> {
        let bound = t.detached().with_grad();
        if !self.recording {
            return bound;
        }
        let index = self.push_node(Op::Leaf, bound.shape().to_vec(), true);
        bound.with_node(NodeRef {
            tape_id: self.id,
            index,
        })
    }

    fn push_node(&mut self, op: Op<R>, shape: Vec<usize>, needs_grad: bool) -> usize {
        self.nodes.push(Node {
            op,
            shape,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    /// Resolve the node of an input tensor, registering constants as leaves.
    /// Errors if the tensor belongs to a different tape.
    fn bind(&mut self, t: &Tensor<R>) -> Result<Option<usize>> {
        match t.node {
            Some(r) if r.tape_id == self.id => Ok(Some(r.index)),
            Some(_) => Err(Error::Tape(
                "input tensor belongs to a different tape".into(),
            )),
            None => {
                if self.recording {
                    Ok(Some(self.push_node(
                        Op::Leaf,
                        t.shape().to_vec(),
                        t.requires_grad(),
                    )))
                } else {
                    Ok(None)
                }
            }
        }
    }

    fn node_needs(&self, idx: Option<usize>) -> bool {
        idx.is_some_and(|i| self.nodes[i].needs_grad)
    }

    fn finish(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<R>,
        make_op: impl FnOnce() -> Op<R>,
        needs: bool,
    ) -> Result<Tensor<R>> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite(op_name));
        }
        let out = Tensor::from_parts(shape.clone(), data);
        if self.recording {
            let index = self.push_node(make_op(), shape, needs);
            Ok(out.with_node(NodeRef {
                tape_id: self.id,
                index,
            }))
        } else {
            Ok(out)
        }
    }

    // ---- operations ------------------------------------------------------

    /// Matrix product of `a` (`m×k`) and `b` (`k×n`).
    pub fn matmul(&mut self, a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            for kk in 0..k {
                let aik = ad[i * k + kk];
                let brow = &bd[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + aik * brow[j];
                }
            }
        }
        let (an, bn) = (self.bind(a)?, self.bind(b)?);
        let needs = self.node_needs(an) || self.node_needs(bn);
        let (a_data, b_data) = (a.data_arc(), b.data_arc());
        self.finish(
            "matmul",
            vec![m, n],
            out,
            || Op::Matmul {
                a: an.unwrap_or(0),
                b: bn.unwrap_or(0),
                a_data,
                b_data,
                m,
                k,
                n,
            },
            needs,
        )
    }

    /// Matrix product with transposed right operand: `a` (`m×k`) times
    /// `b`ᵀ where `b` is `n×k`. Saves materializing transposes of weights.
    pub fn matmul_nt(&mut self, a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bd[j * k..(j + 1) * k];
                let mut acc = R::zero();
                for kk in 0..k {
                    acc = acc + arow[kk] * brow[kk];
                }
                out[i * n + j] = acc;
            }
        }
        let (an, bn) = (self.bind(a)?, self.bind(b)?);
        let needs = self.node_needs(an) || self.node_needs(bn);
        let (a_data, b_data) = (a.data_arc(), b.data_arc());
        self.finish(
            "matmul_nt",
            vec![m, n],
            out,
            || Op::MatmulNt {
                a: an.unwrap_or(0),
                b: bn.unwrap_or(0),
                a_data,
                b_data,
                m,
                k,
                n,
            },
            needs,
        )
    }

    /// View with a new shape of identical element count.
    pub fn reshape(&mut self, x: &Tensor<R>, shape: &[usize]) -> Result<Tensor<R>> {
        if shape.iter().product::<usize>() != x.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let xn = self.bind(x)?;
        let needs = self.node_needs(xn);
        self.finish(
            "reshape",
            shape.to_vec(),
            x.data().to_vec(),
            || Op::Reshape { x: xn.unwrap_or(0) },
            needs,
        )
    }

    /// Row `index` of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&mut self, x: &Tensor<R>, index: usize) -> Result<Tensor<R>> {
        if x.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "row",
                lhs: x.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        let (rows, width) = (x.shape()[0], x.shape()[1]);
        if index >= rows {
            return Err(Error::IndexOutOfRange {
                op: "row",
                index,
                bound: rows,
            });
        }
        let data = x.data()[index * width..(index + 1) * width].to_vec();
        let xn = self.bind(x)?;
        let needs = self.node_needs(xn);
        self.finish(
            "row",
            vec![width],
            data,
            || Op::Row {
                x: xn.unwrap_or(0),
                index,
                rows,
                width,
            },
            needs,
        )
    }

    /// Stack rank-1 tensors of equal width into a rank-2 tensor.
    pub fn stack_rows(&mut self, xs: &[&Tensor<R>]) -> Result<Tensor<R>> {
        if xs.is_empty() {
            return Err(Error::Degenerate("stack_rows of zero tensors".into()));
        }
        let width = xs[0].numel();
        let mut data = Vec::with_capacity(xs.len() * width);
        for x in xs {
            if x.rank() != 1 || x.numel() != width {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![width],
                    rhs: x.shape().to_vec(),
                });
            }
            data.extend_from_slice(x.data());
        }
        let mut ids = Vec::with_capacity(xs.len());
        let mut needs = false;
        for x in xs {
            let n = self.bind(x)?;
            needs |= self.node_needs(n);
            ids.push(n.unwrap_or(0));
        }
        self.finish(
            "stack_rows",
            vec![xs.len(), width],
            data,
            || Op::StackRows { xs: ids, width },
            needs,
        )
    }

    /// Concatenate tensors of equal rank along `axis` (rank 1 or 2).
    pub fn concat(&mut self, xs: &[&Tensor<R>], axis: usize) -> Result<Tensor<R>> {
        if xs.is_empty() {
            return Err(Error::Degenerate("concat of zero tensors".into()));
        }
        let rank = xs[0].rank();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(Error::Config(format!(
                "concat supports rank 1-2, got rank {rank} axis {axis}"
            )));
        }
        for x in xs {
            if x.rank() != rank {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: xs[0].shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
            for d in 0..rank {
                if d != axis && x.shape()[d] != xs[0].shape()[d] {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: xs[0].shape().to_vec(),
                        rhs: x.shape().to_vec(),
                    });
                }
            }
        }
        let mut shape = xs[0].shape().to_vec();
        shape[axis] = xs.iter().map(|x| x.shape()[axis]).sum();
        let mut data = vec![R::zero(); shape.iter().product()];
        if axis == 0 {
            let mut at = 0;
            for x in xs {
                data[at..at + x.numel()].copy_from_slice(x.data());
                at += x.numel();
            }
        } else {
            // rank 2, axis 1: interleave row segments
            let rows = shape[0];
            let total_w = shape[1];
            let mut col_at = 0;
            for x in xs {
                let w = x.shape()[1];
                for r in 0..rows {
                    data[r * total_w + col_at..r * total_w + col_at + w]
                        .copy_from_slice(&x.data()[r * w..(r + 1) * w]);
                }
                col_at += w;
            }
        }
        let mut ids = Vec::with_capacity(xs.len());
        let mut needs = false;
        let shapes: Vec<Vec<usize>> = xs.iter().map(|x| x.shape().to_vec()).collect();
        for x in xs {
            let n = self.bind(x)?;
            needs |= self.node_needs(n);
            ids.push(n.unwrap_or(0));
        }
        self.finish(
            "concat",
            shape,
            data,
            || Op::Concat {
                xs: ids,
                axis,
                shapes,
            },
            needs,
        )
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let (an, bn) = (self.bind(a)?, self.bind(b)?);
        let needs = self.node_needs(an) || self.node_needs(bn);
        self.finish(
            "add",
            a.shape().to_vec(),
            data,
            || Op::Add {
                a: an.unwrap_or(0),
                b: bn.unwrap_or(0),
            },
            needs,
        )
    }

    /// Add a rank-1 bias to every row of a rank-2 tensor.
    pub fn add_bias(&mut self, x: &Tensor<R>, bias: &Tensor<R>) -> Result<Tensor<R>> {
        if x.rank() != 2 || bias.rank() != 1 || x.shape()[1] != bias.numel() {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let bd = bias.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % cols])
            .collect();
        let (xn, bn) = (self.bind(x)?, self.bind(bias)?);
        let needs = self.node_needs(xn) || self.node_needs(bn);
        self.finish(
            "add_bias",
            vec![rows, cols],
            data,
            || Op::AddBias {
                x: xn.unwrap_or(0),
                bias: bn.unwrap_or(0),
                rows,
                cols,
            },
            needs,
        )
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&mut self, a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let (an, bn) = (self.bind(a)?, self.bind(b)?);
        let needs = self.node_needs(an) || self.node_needs(bn);
        let (a_data, b_data) = (a.data_arc(), b.data_arc());
        self.finish(
            "mul",
            a.shape().to_vec(),
            data,
            || Op::Mul {
                a: an.unwrap_or(0),
                b: bn.unwrap_or(0),
                a_data,
                b_data,
            },
            needs,
        )
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: &Tensor<R>, factor: R) -> Result<Tensor<R>> {
        let data = x.data().iter().map(|&v| v * factor).collect();
        let xn = self.bind(x)?;
        let needs = self.node_needs(xn);
        self.finish(
            "scale",
            x.shape().to_vec(),
            data,
            || Op::Scale {
                x: xn.unwrap_or(0),
                factor,
            },
            needs,
        )
    }

    /// Add a constant to every element.
    pub fn add_scalar(&mut self, x: &Tensor<R>, value: R) -> Result<Tensor<R>> {
        let data = x.data().iter().map(|&v| v + value).collect();
        let xn = self.bind(x)?;
        let needs = self.node_needs(xn);
        self.finish(
            "add_scalar",
            x.shape().to_vec(),
            data,
            || Op::AddScalar { x: xn.unwrap_or(0) },
            needs,
        )
    }

    /// Apply an elementwise nonlinearity.
    pub fn activation(&mut self, kind: Activation, x: &Tensor<R>) -> Result<Tensor<R>> {
        let data: Vec<R> = x.data().iter().map(|&v| kind.apply(v)).collect();
        let xn = self.bind(x)?;
        let needs = self.node_needs(xn);
        let out = self.finish(
            "activation",
            x.shape().to_vec(),
            data,
            || Op::Activation {
                x: xn.unwrap_or(0),
                kind,
                y_data: Arc::new(Vec::new()),
            },
            needs,
        )?;
        // Patch the saved output snapshot in after construction so `finish`
        // keeps a single buffer allocation.
        if self.recording {
            if let Some(last) = self.nodes.last_mut() {
                if let Op::Activation { y_data, .. } = &mut last.op {
                    *y_data = out.data_arc();
                }
            }
        }
        Ok(out)
    }

    /// Numerically stable softmax along `axis` of a rank-1 or rank-2 tensor.
    /// Every slice along the axis is shifted by its maximum before
    /// exponentiation, so inputs anywhere in the finite range are safe.
    pub fn softmax(&mut self, x: &Tensor<R>, axis: usize) -> Result<Tensor<R>> {
        let rank = x.rank();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(Error::Config(format!(
                "softmax supports rank 1-2, got rank {rank} axis {axis}"
            )));
        }
        let mut data = vec![R::zero(); x.numel()];
        for_each_slice(x.shape(), axis, |idx| {
            let xd = x.data();
            let mut m = R::neg_infinity();
            for &i in idx {
                if xd[i] > m {
                    m = xd[i];
                }
            }
            let mut sum = R::zero();
            for &i in idx {
                let e = (xd[i] - m).exp();
                data[i] = e;
                sum = sum + e;
            }
            for &i in idx {
                data[i] = data[i] / sum;
            }
        });
        let xn = self.bind(x)?;
        let needs = self.node_needs(xn);
        let out = self.finish(
            "softmax",
            x.shape().to_vec(),
            data,
            || Op::Softmax {
                x: xn.unwrap_or(0),
                axis,
                y_data: Arc::new(Vec::new()),
            },
            needs,
        )?;
        if self.recording {
            if let Some(last) = self.nodes.last_mut() {
                if let Op::Softmax { y_data, .. } = &mut last.op {
                    *y_data = out.data_arc();
                }
            }
        }
        Ok(out)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`T×V`), counting only positions where `valid` is true.
    pub fn cross_entropy(
        &mut self,
        logits: &Tensor<R>,
        targets: &[usize],
        valid: &[bool],
    ) -> Result<Tensor<R>> {
        if logits.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        let (t_len, vocab) = (logits.shape()[0], logits.shape()[1]);
        if targets.len() != t_len || valid.len() != t_len {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![t_len],
                rhs: vec![targets.len(), valid.len()],
            });
        }
        let count = valid.iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(Error::Degenerate(
                "cross_entropy over zero valid positions".into(),
            ));
        }
        let mut probs = vec![R::zero(); t_len * vocab];
        let mut nll = R::zero();
        for t in 0..t_len {
            if !valid[t] {
                continue;
            }
            if targets[t] >= vocab {
                return Err(Error::IndexOutOfRange {
                    op: "cross_entropy",
                    index: targets[t],
                    bound: vocab,
                });
            }
            let row = logits.row_slice(t);
            let mut m = R::neg_infinity();
            for &v in row {
                if v > m {
                    m = v;
                }
            }
            let mut sum = R::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[t * vocab + j] = e;
                sum = sum + e;
            }
            for j in 0..vocab {
                probs[t * vocab + j] = probs[t * vocab + j] / sum;
            }
            // log-sum-exp minus target logit
            nll = nll + (m + sum.ln()) - row[targets[t]];
        }
        let loss = nll / R::from_f64(count as f64);
        let ln = self.bind(logits)?;
        let needs = self.node_needs(ln);
        let targets = targets.to_vec();
        let valid = valid.to_vec();
        self.finish(
            "cross_entropy",
            Vec::new(),
            vec![loss],
            || Op::CrossEntropy {
                logits: ln.unwrap_or(0),
                probs,
                targets,
                valid,
                vocab,
                count,
            },
            needs,
        )
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&mut self, x: &Tensor<R>) -> Result<Tensor<R>> {
        let total = x.data().iter().copied().fold(R::zero(), |a, b| a + b);
        let xn = self.bind(x)?;
        let needs = self.node_needs(xn);
        let numel = x.numel();
        self.finish(
            "sum",
            Vec::new(),
            vec![total],
            || Op::Sum {
                x: xn.unwrap_or(0),
                numel,
            },
            needs,
        )
    }

    // ---- backward --------------------------------------------------------

    /// Run reverse accumulation from a scalar `loss` produced on this tape.
    /// Consumes the tape's single backward use.
    pub fn backward(&mut self, loss: &Tensor<R>) -> Result<()> {
        if !self.recording {
            return Err(Error::Tape("backward on a non-recording tape".into()));
        }
        if self.used {
            return Err(Error::Tape("backward already run on this tape".into()));
        }
        let node = match loss.node {
            Some(r) if r.tape_id == self.id => r.index,
            Some(_) => return Err(Error::Tape("loss belongs to a different tape".into())),
            None => return Err(Error::Tape("loss was not produced on this tape".into())),
        };
        if loss.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        self.used = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[node] = Some(vec![R::one()]);

        for i in (0..=node).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(up) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &up);
            // Leaves keep their accumulated gradient for lookup.
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(up);
            }
        }
        Ok(())
    }

    /// Gradient of the loss with respect to a tensor watched on this tape.
    /// `None` until `backward` has run, and for tensors off the loss path.
    pub fn grad(&self, t: &Tensor<R>) -> Option<Tensor<R>> {
        let r = t.node?;
        if r.tape_id != self.id {
            return None;
        }
        let g = self.grads.get(r.index)?.as_ref()?;
        Some(Tensor::from_parts(
            self.nodes[r.index].shape.clone(),
            g.clone(),
        ))
    }

    fn accumulate(&mut self, idx: usize, contribution: impl Iterator<Item = R>) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        let numel: usize = self.nodes[idx].shape.iter().product();
        let slot = self.grads[idx].get_or_insert_with(|| vec![R::zero(); numel]);
        for (g, c) in slot.iter_mut().zip(contribution) {
            *g = *g + c;
        }
    }

    fn propagate(&mut self, idx: usize, up: &[R]) {
        // `Op` variants are detached from `self.nodes` via a temporary swap so
        // accumulation can borrow the tape mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul {
                a,
                b,
                a_data,
                b_data,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let mut da = vec![R::zero(); m * k];
                for i in 0..m {
                    for j in 0..n {
                        let u = up[i * n + j];
                        for kk in 0..k {
                            da[i * k + kk] = da[i * k + kk] + u * b_data[kk * n + j];
                        }
                    }
                }
                self.accumulate(*a, da.into_iter());
                let mut db = vec![R::zero(); k * n];
                for i in 0..m {
                    for kk in 0..k {
                        let av = a_data[i * k + kk];
                        for j in 0..n {
                            db[kk * n + j] = db[kk * n + j] + av * up[i * n + j];
                        }
                    }
                }
                self.accumulate(*b, db.into_iter());
            }
            Op::MatmulNt {
                a,
                b,
                a_data,
                b_data,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let mut da = vec![R::zero(); m * k];
                for i in 0..m {
                    for j in 0..n {
                        let u = up[i * n + j];
                        for kk in 0..k {
                            da[i * k + kk] = da[i * k + kk] + u * b_data[j * k + kk];
                        }
                    }
                }
                self.accumulate(*a, da.into_iter());
                let mut db = vec![R::zero(); n * k];
                for j in 0..n {
                    for i in 0..m {
                        let u = up[i * n + j];
                        for kk in 0..k {
                            db[j * k + kk] = db[j * k + kk] + u * a_data[i * k + kk];
                        }
                    }
                }
                self.accumulate(*b, db.into_iter());
            }
            Op::Reshape { x } => {
                self.accumulate(*x, up.iter().copied());
            }
            Op::Row {
                x,
                index,
                rows,
                width,
            } => {
                let (index, rows, width) = (*index, *rows, *width);
                let x = *x;
                let iter = (0..rows * width).map(|i| {
                    if i / width == index {
                        up[i % width]
                    } else {
                        R::zero()
                    }
                });
                self.accumulate(x, iter);
            }
            Op::StackRows { xs, width } => {
                for (j, &x) in xs.iter().enumerate() {
                    self.accumulate(x, up[j * width..(j + 1) * width].iter().copied());
                }
            }
            Op::Concat { xs, axis, shapes } => {
                if *axis == 0 {
                    let mut at = 0;
                    for (&x, shape) in xs.iter().zip(shapes) {
                        let numel: usize = shape.iter().product();
                        self.accumulate(x, up[at..at + numel].iter().copied());
                        at += numel;
                    }
                } else {
                    let rows = shapes[0][0];
                    let total_w: usize = shapes.iter().map(|s| s[1]).sum();
                    let mut col_at = 0;
                    for (&x, shape) in xs.iter().zip(shapes) {
                        let w = shape[1];
                        let base = col_at;
                        let iter = (0..rows * w)
                            .map(move |i| up[(i / w) * total_w + base + (i % w)])
                            .collect::<Vec<_>>();
                        self.accumulate(x, iter.into_iter());
                        col_at += w;
                    }
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, up.iter().copied());
                self.accumulate(*b, up.iter().copied());
            }
            Op::AddBias {
                x,
                bias,
                rows,
                cols,
            } => {
                self.accumulate(*x, up.iter().copied());
                let (rows, cols) = (*rows, *cols);
                let mut db = vec![R::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        db[c] = db[c] + up[r * cols + c];
                    }
                }
                self.accumulate(*bias, db.into_iter());
            }
            Op::Mul {
                a,
                b,
                a_data,
                b_data,
            } => {
                let da: Vec<R> = up.iter().zip(b_data.iter()).map(|(&u, &v)| u * v).collect();
                self.accumulate(*a, da.into_iter());
                let db: Vec<R> = up.iter().zip(a_data.iter()).map(|(&u, &v)| u * v).collect();
                self.accumulate(*b, db.into_iter());
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                self.accumulate(*x, up.iter().map(move |&u| u * f));
            }
            Op::AddScalar { x } => {
                self.accumulate(*x, up.iter().copied());
            }
            Op::Activation { x, kind, y_data } => {
                let k = *kind;
                let dx: Vec<R> = up
                    .iter()
                    .zip(y_data.iter())
                    .map(|(&u, &y)| u * k.grad_from_output(y))
                    .collect();
                self.accumulate(*x, dx.into_iter());
            }
            Op::Softmax { x, axis, y_data } => {
                let shape = self.nodes[idx].shape.clone();
                let mut dx = vec![R::zero(); y_data.len()];
                for_each_slice(&shape, *axis, |idxs| {
                    let mut dot = R::zero();
                    for &i in idxs {
                        dot = dot + up[i] * y_data[i];
                    }
                    for &i in idxs {
                        dx[i] = y_data[i] * (up[i] - dot);
                    }
                });
                self.accumulate(*x, dx.into_iter());
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                valid,
                vocab,
                count,
            } => {
                let u = up[0] / R::from_f64(*count as f64);
                let vocab = *vocab;
                let mut dl = vec![R::zero(); probs.len()];
                for t in 0..targets.len() {
                    if !valid[t] {
                        continue;
                    }
                    for j in 0..vocab {
                        let indicator = if j == targets[t] { R::one() } else { R::zero() };
                        dl[t * vocab + j] = u * (probs[t * vocab + j] - indicator);
                    }
                }
                self.accumulate(*logits, dl.into_iter());
            }
            Op::Sum { x, numel } => {
                let u = up[0];
                self.accumulate(*x, std::iter::repeat_n(u, *numel));
            }
        }
        self.nodes[idx].op = op;
    }
}

impl<R: Scalar> Default for Tape<R> {
    fn default() -> Self {
        Tape::new()
    }
}

/// Invoke `f` with the flat indices of each slice along `axis`.
fn for_each_slice(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    match (shape.len(), axis) {
        (1, 0) => {
            let idx: Vec<usize> = (0..shape[0]).collect();
            f(&idx);
        }
        (2, 1) => {
            let (rows, cols) = (shape[0], shape[1]);
            for r in 0..rows {
                let idx: Vec<usize> = (r * cols..(r + 1) * cols).collect();
                f(&idx);
            }
        }
        (2, 0) => {
            let (rows, cols) = (shape[0], shape[1]);
            for c in 0..cols {
                let idx: Vec<usize> = (0..rows).map(|r| r * cols + c).collect();
                f(&idx);
            }
        }
        _ => unreachable!("rank/axis validated by callers"),
    }
}
