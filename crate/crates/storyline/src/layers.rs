//! Neural building blocks: linear maps, GRU cells, bidirectional GRUs,
//! embedded-Gaussian non-local (self-attention) blocks and the two-layer
//! output head. Parameters are plain tensors; a layer is bound to a tape for
//! one forward pass via its `watch` method.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Activation, Tape};
use crate::tensor::Tensor;

/// Weight-initialization family. Draws are made in `f64` and rounded into the
/// working precision, so the same seed yields the same parameters at every
/// width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Uniform on `(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`; used
    /// ahead of tanh/sigmoid nonlinearities (GRU gates, output head).
    XavierUniform,
    /// Normal with variance `1 / fan_in`; used ahead of SELU activations
    /// (non-local projections), which assume unit-variance inputs.
    LecunNormal,
}

/// Initialize a `rows×cols` weight matrix; `fan_in = cols`, `fan_out = rows`.
pub fn init_matrix<R: Scalar>(
    rng: &mut ChaCha20Rng,
    rows: usize,
    cols: usize,
    kind: InitKind,
) -> Tensor<R> {
    let (fan_in, fan_out) = (cols as f64, rows as f64);
    let data: Vec<R> = match kind {
        InitKind::XavierUniform => {
            let bound = (6.0 / (fan_in + fan_out)).sqrt();
            (0..rows * cols)
                .map(|_| R::from_f64(rng.gen_range(-bound..bound)))
                .collect()
        }
        InitKind::LecunNormal => {
            let normal = Normal::new(0.0, (1.0 / fan_in).sqrt()).expect("positive std");
            (0..rows * cols)
                .map(|_| R::from_f64(normal.sample(rng)))
                .collect()
        }
    };
    Tensor::from_parts(vec![rows, cols], data).with_grad()
}

/// Affine map `y = W·x (+ b)` with `W` stored `out×in`.
#[derive(Debug, Clone)]
pub struct LinearMap<R: Scalar> {
    pub weight: Tensor<R>,
    pub bias: Option<Tensor<R>>,
}

impl<R: Scalar> LinearMap<R> {
    pub fn init(
        rng: &mut ChaCha20Rng,
        out_dim: usize,
        in_dim: usize,
        kind: InitKind,
        with_bias: bool,
    ) -> Self {
        LinearMap {
            weight: init_matrix(rng, out_dim, in_dim, kind),
            bias: with_bias.then(|| Tensor::zeros(&[out_dim]).with_grad()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Apply to a rank-1 vector or row-wise to a rank-2 tensor.
    pub fn apply(&self, tape: &mut Tape<R>, x: &Tensor<R>) -> Result<Tensor<R>> {
        match x.rank() {
            1 => {
                let row = tape.reshape(x, &[1, x.numel()])?;
                let mut y = tape.matmul_nt(&row, &self.weight)?;
                if let Some(b) = &self.bias {
                    y = tape.add_bias(&y, b)?;
                }
                tape.reshape(&y, &[self.out_dim()])
            }
            2 => {
                let mut y = tape.matmul_nt(x, &self.weight)?;
                if let Some(b) = &self.bias {
                    y = tape.add_bias(&y, b)?;
                }
                Ok(y)
            }
            _ => Err(Error::ShapeMismatch {
                op: "linear_apply",
                lhs: x.shape().to_vec(),
                rhs: self.weight.shape().to_vec(),
            }),
        }
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<R>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<R>)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }

    fn watch(&self, tape: &mut Tape<R>) -> Self {
        LinearMap {
            weight: tape.watch(&self.weight),
            bias: self.bias.as_ref().map(|b| tape.watch(b)),
        }
    }
}

/// Standard GRU cell with update gate `z`, reset gate `r` and candidate state:
///
/// ```text
/// z = sigmoid(Wz x + Uz h + bz)
/// r = sigmoid(Wr x + Ur h + br)
/// c = tanh(Wh x + Uh (r ∘ h) + bh)
/// h' = (1 - z) ∘ h + z ∘ c
/// ```
#[derive(Debug, Clone)]
pub struct GruCell<R: Scalar> {
    pub w_z: Tensor<R>,
    pub u_z: Tensor<R>,
    pub b_z: Tensor<R>,
    pub w_r: Tensor<R>,
    pub u_r: Tensor<R>,
    pub b_r: Tensor<R>,
    pub w_h: Tensor<R>,
    pub u_h: Tensor<R>,
    pub b_h: Tensor<R>,
}

impl<R: Scalar> GruCell<R> {
    pub fn init(rng: &mut ChaCha20Rng, hidden: usize, input: usize) -> Self {
        let w = |rng: &mut ChaCha20Rng| init_matrix(rng, hidden, input, InitKind::XavierUniform);
        let u = |rng: &mut ChaCha20Rng| init_matrix(rng, hidden, hidden, InitKind::XavierUniform);
        let b = || Tensor::zeros(&[hidden]).with_grad();
        GruCell {
            w_z: w(rng),
            u_z: u(rng),
            b_z: b(),
            w_r: w(rng),
            u_r: u(rng),
            b_r: b(),
            w_h: w(rng),
            u_h: u(rng),
            b_h: b(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.shape()[1]
    }

    /// One recurrence step on rank-1 state and input.
    pub fn step(&self, tape: &mut Tape<R>, h_prev: &Tensor<R>, x: &Tensor<R>) -> Result<Tensor<R>> {
        let (h, d) = (self.hidden_dim(), self.input_dim());
        if h_prev.rank() != 1 || h_prev.numel() != h || x.rank() != 1 || x.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "gru_step",
                lhs: h_prev.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        let x_row = tape.reshape(x, &[1, d])?;
        let h_row = tape.reshape(h_prev, &[1, h])?;

        let gate = |tape: &mut Tape<R>,
                    w: &Tensor<R>,
                    u: &Tensor<R>,
                    b: &Tensor<R>,
                    state: &Tensor<R>,
                    kind: Activation|
         -> Result<Tensor<R>> {
            let from_x = tape.matmul_nt(&x_row, w)?;
            let from_h = tape.matmul_nt(state, u)?;
            let pre = tape.add(&from_x, &from_h)?;
            let pre = tape.add_bias(&pre, b)?;
            let pre = tape.reshape(&pre, &[w.shape()[0]])?;
            tape.activation(kind, &pre)
        };

        let z = gate(
            tape,
            &self.w_z,
            &self.u_z,
            &self.b_z,
            &h_row,
            Activation::Sigmoid,
        )?;
        let r = gate(
            tape,
            &self.w_r,
            &self.u_r,
            &self.b_r,
            &h_row,
            Activation::Sigmoid,
        )?;
        let rh = tape.mul(&r, h_prev)?;
        let rh_row = tape.reshape(&rh, &[1, h])?;
        let c = gate(
            tape,
            &self.w_h,
            &self.u_h,
            &self.b_h,
            &rh_row,
            Activation::Tanh,
        )?;

        let keep = {
            let neg_z = tape.scale(&z, -R::one())?;
            tape.add_scalar(&neg_z, R::one())?
        };
        let carried = tape.mul(&keep, h_prev)?;
        let updated = tape.mul(&z, &c)?;
        tape.add(&carried, &updated)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<R>)>) {
        for (name, t) in [
            ("w_z", &self.w_z),
            ("u_z", &self.u_z),
            ("b_z", &self.b_z),
            ("w_r", &self.w_r),
            ("u_r", &self.u_r),
            ("b_r", &self.b_r),
            ("w_h", &self.w_h),
            ("u_h", &self.u_h),
            ("b_h", &self.b_h),
        ] {
            out.push((format!("{prefix}.{name}"), t));
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<R>)>) {
        for (name, t) in [
            ("w_z", &mut self.w_z),
            ("u_z", &mut self.u_z),
            ("b_z", &mut self.b_z),
            ("w_r", &mut self.w_r),
            ("u_r", &mut self.u_r),
            ("b_r", &mut self.b_r),
            ("w_h", &mut self.w_h),
            ("u_h", &mut self.u_h),
            ("b_h", &mut self.b_h),
        ] {
            out.push((format!("{prefix}.{name}"), t));
        }
    }

    fn watch(&self, tape: &mut Tape<R>) -> Self {
        GruCell {
            w_z: tape.watch(&self.w_z),
            u_z: tape.watch(&self.u_z),
            b_z: tape.watch(&self.b_z),
            w_r: tape.watch(&self.w_r),
            u_r: tape.watch(&self.u_r),
            b_r: tape.watch(&self.b_r),
            w_h: tape.watch(&self.w_h),
            u_h: tape.watch(&self.u_h),
            b_h: tape.watch(&self.b_h),
        }
    }
}

/// Bidirectional GRU over a `T×D` sequence. Both directions start from a zero
/// state; output row `t` is the concatenation `[forward_t ; backward_t]`.
#[derive(Debug, Clone)]
pub struct BiGru<R: Scalar> {
    pub fwd: GruCell<R>,
    pub bwd: GruCell<R>,
}

impl<R: Scalar> BiGru<R> {
    pub fn init(rng: &mut ChaCha20Rng, hidden: usize, input: usize) -> Self {
        BiGru {
            fwd: GruCell::init(rng, hidden, input),
            bwd: GruCell::init(rng, hidden, input),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.fwd.hidden_dim()
    }

    /// `T×D -> T×2H`.
    pub fn forward(&self, tape: &mut Tape<R>, seq: &Tensor<R>) -> Result<Tensor<R>> {
        if seq.rank() != 2 || seq.shape()[1] != self.fwd.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "bigru_forward",
                lhs: seq.shape().to_vec(),
                rhs: vec![0, self.fwd.input_dim()],
            });
        }
        let t_len = seq.shape()[0];
        if t_len == 0 {
            return Err(Error::Degenerate("bigru over an empty sequence".into()));
        }
        let h = self.hidden_dim();

        let mut forward_states = Vec::with_capacity(t_len);
        let mut state = Tensor::zeros(&[h]);
        for t in 0..t_len {
            let x = tape.row(seq, t)?;
            state = self.fwd.step(tape, &state, &x)?;
            forward_states.push(state.clone());
        }
        let mut backward_states = vec![None; t_len];
        let mut state = Tensor::zeros(&[h]);
        for t in (0..t_len).rev() {
            let x = tape.row(seq, t)?;
            state = self.bwd.step(tape, &state, &x)?;
            backward_states[t] = Some(state.clone());
        }

        let mut rows = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let b = backward_states[t].take().expect("filled above");
            rows.push(tape.concat(&[&forward_states[t], &b], 0)?);
        }
        let refs: Vec<&Tensor<R>> = rows.iter().collect();
        tape.stack_rows(&refs)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<R>)>) {
        self.fwd.params(&format!("{prefix}.fwd"), out);
        self.bwd.params(&format!("{prefix}.bwd"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<R>)>) {
        self.fwd.params_mut(&format!("{prefix}.fwd"), out);
        self.bwd.params_mut(&format!("{prefix}.bwd"), out);
    }

    fn watch(&self, tape: &mut Tape<R>) -> Self {
        BiGru {
            fwd: self.fwd.watch(tape),
            bwd: self.bwd.watch(tape),
        }
    }
}

/// Embedded-Gaussian non-local block over a `T×D` sequence:
///
/// ```text
/// A = softmax_over_keys((X·Wθᵀ)(X·Wφᵀ)ᵀ)
/// Z = (A · (X·Wgᵀ))·Wzᵀ + X
/// ```
///
/// All four projections are bias-free; with `Wz = 0` the block is exactly the
/// identity, which is how training starts gently when it is stacked on a
/// residual path.
#[derive(Debug, Clone)]
pub struct NonLocalBlock<R: Scalar> {
    pub theta: Tensor<R>,
    pub phi: Tensor<R>,
    pub g: Tensor<R>,
    pub z: Tensor<R>,
}

impl<R: Scalar> NonLocalBlock<R> {
    pub fn init(rng: &mut ChaCha20Rng, dim: usize, inner: usize) -> Self {
        NonLocalBlock {
            theta: init_matrix(rng, inner, dim, InitKind::LecunNormal),
            phi: init_matrix(rng, inner, dim, InitKind::LecunNormal),
            g: init_matrix(rng, inner, dim, InitKind::LecunNormal),
            z: init_matrix(rng, dim, inner, InitKind::LecunNormal),
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.shape()[1]
    }

    pub fn inner_dim(&self) -> usize {
        self.theta.shape()[0]
    }

    fn validate(&self, x: &Tensor<R>) -> Result<()> {
        if x.rank() != 2 || x.shape()[1] != self.dim() || x.shape()[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "nonlocal_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![0, self.dim()],
            });
        }
        Ok(())
    }

    /// The `T×T` attention map `A` (each row sums to 1).
    pub fn attention(&self, tape: &mut Tape<R>, x: &Tensor<R>) -> Result<Tensor<R>> {
        self.validate(x)?;
        let q = tape.matmul_nt(x, &self.theta)?;
        let k = tape.matmul_nt(x, &self.phi)?;
        let logits = tape.matmul_nt(&q, &k)?;
        tape.softmax(&logits, 1)
    }

    /// `T×D -> T×D` with residual connection.
    pub fn forward(&self, tape: &mut Tape<R>, x: &Tensor<R>) -> Result<Tensor<R>> {
        let a = self.attention(tape, x)?;
        let v = tape.matmul_nt(x, &self.g)?;
        let mixed = tape.matmul(&a, &v)?;
        let projected = tape.matmul_nt(&mixed, &self.z)?;
        tape.add(&projected, x)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<R>)>) {
        out.push((format!("{prefix}.theta"), &self.theta));
        out.push((format!("{prefix}.phi"), &self.phi));
        out.push((format!("{prefix}.g"), &self.g));
        out.push((format!("{prefix}.z"), &self.z));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<R>)>) {
        out.push((format!("{prefix}.theta"), &mut self.theta));
        out.push((format!("{prefix}.phi"), &mut self.phi));
        out.push((format!("{prefix}.g"), &mut self.g));
        out.push((format!("{prefix}.z"), &mut self.z));
    }

    fn watch(&self, tape: &mut Tape<R>) -> Self {
        NonLocalBlock {
            theta: tape.watch(&self.theta),
            phi: tape.watch(&self.phi),
            g: tape.watch(&self.g),
            z: tape.watch(&self.z),
        }
    }
}

/// Two-layer vocabulary head: `logits = W_out · tanh(W_w·h + b_w) + b_out`.
#[derive(Debug, Clone)]
pub struct OutputHead<R: Scalar> {
    pub proj: LinearMap<R>,
    pub out: LinearMap<R>,
}

impl<R: Scalar> OutputHead<R> {
    pub fn init(rng: &mut ChaCha20Rng, hidden: usize, mid: usize, vocab: usize) -> Self {
        OutputHead {
            proj: LinearMap::init(rng, mid, hidden, InitKind::XavierUniform, true),
            out: LinearMap::init(rng, vocab, mid, InitKind::XavierUniform, true),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.out.out_dim()
    }

    /// Vocabulary logits for one rank-1 decoder state.
    pub fn logits(&self, tape: &mut Tape<R>, h: &Tensor<R>) -> Result<Tensor<R>> {
        let mid = self.proj.apply(tape, h)?;
        let act = tape.activation(Activation::Tanh, &mid)?;
        self.out.apply(tape, &act)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<R>)>) {
        self.proj.params(&format!("{prefix}.proj"), out);
        self.out.params(&format!("{prefix}.out"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<R>)>) {
        self.proj.params_mut(&format!("{prefix}.proj"), out);
        self.out.params_mut(&format!("{prefix}.out"), out);
    }

    fn watch(&self, tape: &mut Tape<R>) -> Self {
        OutputHead {
            proj: self.proj.watch(tape),
            out: self.out.watch(tape),
        }
    }
}

// Parameter traversal is used by the model, optimizer and checkpoints; the
// free functions below give the module-private helpers one public doorway.
pub(crate) mod visit {
    use super::*;

    pub fn linear<'a, R: Scalar>(
        l: &'a LinearMap<R>,
        prefix: &str,
        out: &mut Vec<(String, &'a Tensor<R>)>,
    ) {
        l.params(prefix, out);
    }

    pub fn linear_mut<'a, R: Scalar>(
        l: &'a mut LinearMap<R>,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor<R>)>,
    ) {
        l.params_mut(prefix, out);
    }

    pub fn linear_watch<R: Scalar>(l: &LinearMap<R>, tape: &mut Tape<R>) -> LinearMap<R> {
        l.watch(tape)
    }

    pub fn bigru<'a, R: Scalar>(
        l: &'a BiGru<R>,
        prefix: &str,
        out: &mut Vec<(String, &'a Tensor<R>)>,
    ) {
        l.params(prefix, out);
    }

    pub fn bigru_mut<'a, R: Scalar>(
        l: &'a mut BiGru<R>,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor<R>)>,
    ) {
        l.params_mut(prefix, out);
    }

    pub fn bigru_watch<R: Scalar>(l: &BiGru<R>, tape: &mut Tape<R>) -> BiGru<R> {
        l.watch(tape)
    }

    pub fn gru<'a, R: Scalar>(
        l: &'a GruCell<R>,
        prefix: &str,
        out: &mut Vec<(String, &'a Tensor<R>)>,
    ) {
        l.params(prefix, out);
    }

    pub fn gru_mut<'a, R: Scalar>(
        l: &'a mut GruCell<R>,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor<R>)>,
    ) {
        l.params_mut(prefix, out);
    }

    pub fn gru_watch<R: Scalar>(l: &GruCell<R>, tape: &mut Tape<R>) -> GruCell<R> {
        l.watch(tape)
    }

    pub fn nonlocal_block<'a, R: Scalar>(
        l: &'a NonLocalBlock<R>,
        prefix: &str,
        out: &mut Vec<(String, &'a Tensor<R>)>,
    ) {
        l.params(prefix, out);
    }

    pub fn nonlocal_mut<'a, R: Scalar>(
        l: &'a mut NonLocalBlock<R>,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor<R>)>,
    ) {
        l.params_mut(prefix, out);
    }

    pub fn nonlocal_watch<R: Scalar>(l: &NonLocalBlock<R>, tape: &mut Tape<R>) -> NonLocalBlock<R> {
        l.watch(tape)
    }

    pub fn head<'a, R: Scalar>(
        l: &'a OutputHead<R>,
        prefix: &str,
        out: &mut Vec<(String, &'a Tensor<R>)>,
    ) {
        l.params(prefix, out);
    }

    pub fn head_mut<'a, R: Scalar>(
        l: &'a mut OutputHead<R>,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor<R>)>,
    ) {
        l.params_mut(prefix, out);
    }

    pub fn head_watch<R: Scalar>(l: &OutputHead<R>, tape: &mut Tape<R>) -> OutputHead<R> {
        l.watch(tape)
    }
}
