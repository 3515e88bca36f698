//! Tape of recorded operations and its reverse sweep.
//!
//! Nodes are appended in execution order, so the node index is already a
//! topological order; `backward` walks it once in reverse. Every public op
//! returns `Result` and, in builds with debug assertions, rejects outputs
//! containing NaN or infinity.
//!
//! Broadcasting follows one rule only: operands must have equal rank and
//! every axis must either match or be 1 on one side. There is no implicit
//! rank promotion.

use std::rc::Rc;

use super::kernels::{
    axis_blocks, batched_gemm, broadcast_grad, broadcast_shape, broadcast_zip, inverse_perm,
    permute,
};
use super::{numel, Float, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Abs,
    Exp,
    Ln,
    Gelu,
    Sigmoid,
    Relu,
    Recip,
    Sqrt,
    Square,
}

/// Elementwise op selector for [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Binary(BinaryKind),
    Unary(UnaryKind),
    Scale(f64),
    AddScalar(f64),
    ClampMin(f64),
}

/// Value-preserving rearrangement selector for [`Graph::movement`].
#[derive(Debug, Clone, PartialEq)]
pub enum Movement {
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Flip(usize),
    PadEdge {
        axis: usize,
        before: usize,
        after: usize,
    },
    Roll {
        axis: usize,
        shift: isize,
    },
}

/// Axis reduction selector for [`Graph::reduce`]. Reductions keep the
/// reduced axis with extent 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
    L2Norm,
}

enum Op<T> {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    Scale(Var, T),
    AddScalar(Var),
    ClampMin(Var, T),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Flip {
        x: Var,
        axis: usize,
    },
    PadEdge {
        x: Var,
        axis: usize,
        before: usize,
    },
    Roll {
        x: Var,
        axis: usize,
        shift: usize,
    },
    Sum {
        x: Var,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Max {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    L2Norm {
        x: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        axis: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves that requested them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn gelu<T: Float>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * k * x * x)
}

fn unary_fwd<T: Float>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Abs => x.abs(),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Ln => x.ln(),
        UnaryKind::Gelu => gelu(x),
        UnaryKind::Sigmoid => T::one() / (T::one() + (-x).exp()),
        UnaryKind::Relu => x.max(T::zero()),
        UnaryKind::Recip => x.recip(),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Square => x * x,
    }
}

/// d(out)/d(in) given input `x` and output `y`.
fn unary_deriv<T: Float>(kind: UnaryKind, x: T, y: T) -> T {
    match kind {
        UnaryKind::Neg => -T::one(),
        UnaryKind::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        UnaryKind::Exp => y,
        UnaryKind::Ln => x.recip(),
        UnaryKind::Gelu => gelu_grad(x),
        UnaryKind::Sigmoid => y * (T::one() - y),
        UnaryKind::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        UnaryKind::Recip => -y * y,
        UnaryKind::Sqrt => T::from_f64(0.5) / y,
        UnaryKind::Square => T::from_f64(2.0) * x,
    }
}

fn op_name(kind: UnaryKind) -> &'static str {
    match kind {
        UnaryKind::Neg => "neg",
        UnaryKind::Abs => "abs",
        UnaryKind::Exp => "exp",
        UnaryKind::Ln => "ln",
        UnaryKind::Gelu => "gelu",
        UnaryKind::Sigmoid => "sigmoid",
        UnaryKind::Relu => "relu",
        UnaryKind::Recip => "recip",
        UnaryKind::Sqrt => "sqrt",
        UnaryKind::Square => "square",
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::spec(
            op,
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    Ok(())
}

fn with_axis(shape: &[usize], axis: usize, len: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = len;
    s
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: Rc::new(t.data().to_vec()),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_parts(n.shape.clone(), n.data.as_ref().clone())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        self.push_rc(name, shape, Rc::new(data), op, inputs)
    }

    fn push_rc(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Rc<Vec<T>>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), data.len());
        if cfg!(debug_assertions) && !all_finite(&data) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (Elementwise::Binary(k), Some(b)) => self.binary(k, a, b),
            (Elementwise::Binary(_), None) => Err(TensorError::spec(
                "elementwise",
                "binary op needs two operands",
            )),
            (Elementwise::Unary(k), None) => self.unary(k, a),
            (Elementwise::Scale(s), None) => self.scale(a, T::from_f64(s)),
            (Elementwise::AddScalar(s), None) => self.add_scalar(a, T::from_f64(s)),
            (Elementwise::ClampMin(lo), None) => self.clamp_min(a, T::from_f64(lo)),
            (_, Some(_)) => Err(TensorError::spec(
                "elementwise",
                "unary op given two operands",
            )),
        }
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (ash, bsh) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(ash, bsh).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        })?;
        let (ad, bd) = (self.data(a), self.data(b));
        let data = match kind {
            BinaryKind::Add => broadcast_zip(ad, ash, bd, bsh, &out_shape, |x, y| x + y),
            BinaryKind::Sub => broadcast_zip(ad, ash, bd, bsh, &out_shape, |x, y| x - y),
            BinaryKind::Mul => broadcast_zip(ad, ash, bd, bsh, &out_shape, |x, y| x * y),
            BinaryKind::Div => broadcast_zip(ad, ash, bd, bsh, &out_shape, |x, y| x / y),
        };
        self.push(name, out_shape, data, Op::Binary(kind, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| unary_fwd(kind, x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op_name(kind), shape, data, Op::Unary(kind, a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, a)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Ln, a)
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Gelu, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Recip, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, a)
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, a)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, data, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x + s).collect();
        let shape = self.shape(a).to_vec();
        self.push("add_scalar", shape, data, Op::AddScalar(a), &[a])
    }

    /// `max(x, lo)`; the gradient passes where `x >= lo`.
    pub fn clamp_min(&mut self, a: Var, lo: T) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x.max(lo)).collect();
        let shape = self.shape(a).to_vec();
        self.push("clamp_min", shape, data, Op::ClampMin(a, lo), &[a])
    }

    // ---- products ----------------------------------------------------------

    /// Batched matrix product `[..., m, k] × [..., k, n]` with equal batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = ash.len();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        };
        if r < 2 || bsh.len() != r || ash[..r - 2] != bsh[..r - 2] || ash[r - 1] != bsh[r - 2] {
            return Err(mismatch());
        }
        let (m, k, n) = (ash[r - 2], ash[r - 1], bsh[r - 1]);
        let batch = numel(&ash[..r - 2]);
        let mut out = vec![T::zero(); batch * m * n];
        batched_gemm(
            batch,
            m,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            false,
            &mut out,
            false,
        );
        let mut shape = ash[..r - 2].to_vec();
        shape.extend([m, n]);
        self.push("matmul", shape, out, Op::MatMul(a, b), &[a, b])
    }

    /// Affine map over the trailing axis: `x·wᵀ + b` with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        let wsh = self.shape(w).to_vec();
        let Some(&inp) = xsh.last() else {
            return Err(TensorError::spec("linear", "rank-0 input"));
        };
        if wsh.len() != 2 || wsh[1] != inp {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: xsh,
                rhs: wsh,
            });
        }
        let out_f = wsh[0];
        if let Some(b) = b {
            if self.shape(b) != [out_f] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    lhs: wsh,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = numel(&xsh) / inp;
        let mut out = vec![T::zero(); rows * out_f];
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_exact_mut(out_f) {
                row.copy_from_slice(bd);
            }
        }
        // w stored [out, in] is wᵀ viewed transposed
        batched_gemm(
            1,
            rows,
            inp,
            out_f,
            self.data(x),
            false,
            self.data(w),
            true,
            &mut out,
            b.is_some(),
        );
        let mut shape = xsh;
        *shape.last_mut().unwrap() = out_f;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", shape, out, Op::Linear { x, w, b }, &inputs)
    }

    // ---- movement ----------------------------------------------------------

    pub fn movement(&mut self, kind: Movement, x: Var) -> Result<Var> {
        match kind {
            Movement::Reshape(s) => self.reshape(x, &s),
            Movement::Permute(p) => self.permute(x, &p),
            Movement::Slice { axis, start, len } => self.slice(x, axis, start, len),
            Movement::Flip(axis) => self.flip(x, axis),
            Movement::PadEdge {
                axis,
                before,
                after,
            } => self.pad_edge(x, axis, before, after),
            Movement::Roll { axis, shift } => self.roll(x, axis, shift),
        }
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xsh = self.shape(x);
        if numel(shape) != numel(xsh) || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: xsh.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = Rc::clone(&self.nodes[x.0].data);
        self.push_rc("reshape", shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        let mut seen = vec![false; xsh.len()];
        if perm.len() != xsh.len()
            || perm
                .iter()
                .any(|&p| p >= xsh.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::spec(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", xsh.len()),
            ));
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            let data = Rc::clone(&self.nodes[x.0].data);
            return self.push_rc("permute", xsh, data, Op::Reshape(x), &[x]);
        }
        let out = permute(self.data(x), &xsh, perm);
        let shape = perm.iter().map(|&p| xsh[p]).collect();
        self.push("permute", shape, out, Op::Permute(x, perm.to_vec()), &[x])
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::spec("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        check_axis("slice", &xsh, axis)?;
        if len == 0 || start + len > xsh[axis] {
            return Err(TensorError::spec(
                "slice",
                format!(
                    "range {start}..{} outside extent {}",
                    start + len,
                    xsh[axis]
                ),
            ));
        }
        let (outer, l, inner) = axis_blocks(&xsh, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * l + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let shape = with_axis(&xsh, axis, len);
        self.push("slice", shape, out, Op::Slice { x, axis, start }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(TensorError::spec("concat", "no inputs"));
        };
        let base_shape = self.shape(first).to_vec();
        check_axis("concat", &base_shape, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base_shape.len()
                || s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base_shape,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_blocks(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let l = self.shape(v)[axis];
                let d = self.data(v);
                out.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let shape = with_axis(&base_shape, axis, total);
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        check_axis("flip", &xsh, axis)?;
        let out = flip_data(self.data(x), &xsh, axis);
        self.push("flip", xsh, out, Op::Flip { x, axis }, &[x])
    }

    /// Extends `axis` by replicating its first/last entries.
    pub fn pad_edge(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        check_axis("pad_edge", &xsh, axis)?;
        if before == 0 && after == 0 {
            let data = Rc::clone(&self.nodes[x.0].data);
            return self.push_rc("pad_edge", xsh, data, Op::Reshape(x), &[x]);
        }
        let (outer, l, inner) = axis_blocks(&xsh, axis);
        let nl = l + before + after;
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * nl * inner);
        for o in 0..outer {
            for j in 0..nl {
                let sj = j.saturating_sub(before).min(l - 1);
                let base = (o * l + sj) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let shape = with_axis(&xsh, axis, nl);
        self.push(
            "pad_edge",
            shape,
            out,
            Op::PadEdge { x, axis, before },
            &[x],
        )
    }

    /// Cyclic shift: element `i` moves to `(i + shift) mod len`.
    pub fn roll(&mut self, x: Var, axis: usize, shift: isize) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        check_axis("roll", &xsh, axis)?;
        let l = xsh[axis] as isize;
        let s = shift.rem_euclid(l) as usize;
        if s == 0 {
            let data = Rc::clone(&self.nodes[x.0].data);
            return self.push_rc("roll", xsh, data, Op::Reshape(x), &[x]);
        }
        let out = roll_data(self.data(x), &xsh, axis, s);
        self.push("roll", xsh, out, Op::Roll { x, axis, shift: s }, &[x])
    }

    // ---- reductions --------------------------------------------------------

    pub fn reduce(&mut self, kind: Reduction, x: Var, axes: &[usize]) -> Result<Var> {
        if axes.is_empty() {
            return Err(TensorError::spec("reduce", "empty axis set"));
        }
        if kind == Reduction::Max || kind == Reduction::L2Norm {
            if axes.len() != 1 {
                return Err(TensorError::spec(
                    "reduce",
                    "max/l2-norm take exactly one axis",
                ));
            }
        }
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut v = x;
        for &ax in &sorted {
            v = match kind {
                Reduction::Sum => self.sum(v, ax)?,
                Reduction::Mean => self.mean(v, ax)?,
                Reduction::Max => self.max(v, ax)?,
                Reduction::L2Norm => self.l2_norm(v, ax)?,
            };
        }
        Ok(v)
    }

    fn reduce_axis(
        &self,
        name: &'static str,
        x: Var,
        axis: usize,
        f: impl Fn(&[T], usize, usize) -> T,
    ) -> Result<(Vec<usize>, Vec<T>)> {
        let xsh = self.shape(x);
        check_axis(name, xsh, axis)?;
        let (outer, l, inner) = axis_blocks(xsh, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let block = &src[o * l * inner..(o + 1) * l * inner];
            for i in 0..inner {
                out.push(f(block, i, inner));
            }
        }
        Ok((with_axis(xsh, axis, 1), out))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce_axis("sum", x, axis, |b, i, inner| {
            b.iter().skip(i).step_by(inner).copied().sum()
        })?;
        self.push("sum", shape, out, Op::Sum { x, axis }, &[x])
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce_axis("mean", x, axis, |b, i, inner| {
            let n = T::from_f64((b.len() / inner) as f64);
            b.iter().skip(i).step_by(inner).copied().sum::<T>() / n
        })?;
        self.push("mean", shape, out, Op::Mean { x, axis }, &[x])
    }

    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        check_axis("max", &xsh, axis)?;
        let (outer, l, inner) = axis_blocks(&xsh, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut bv = src[o * l * inner + i];
                for j in 1..l {
                    let v = src[(o * l + j) * inner + i];
                    if v > bv {
                        bv = v;
                        best = j;
                    }
                }
                out.push(bv);
                argmax.push(best);
            }
        }
        let shape = with_axis(&xsh, axis, 1);
        self.push("max", shape, out, Op::Max { x, axis, argmax }, &[x])
    }

    pub fn l2_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce_axis("l2_norm", x, axis, |b, i, inner| {
            b.iter()
                .skip(i)
                .step_by(inner)
                .map(|&v| v * v)
                .sum::<T>()
                .sqrt()
        })?;
        self.push("l2_norm", shape, out, Op::L2Norm { x, axis }, &[x])
    }

    /// Sum over every element; result shape `[1]`.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = numel(self.shape(x));
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    /// Mean over every element; result shape `[1]`.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = numel(self.shape(x));
        let flat = self.reshape(x, &[n])?;
        self.mean(flat, 0)
    }

    // ---- normalization -----------------------------------------------------

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        check_axis("softmax", &xsh, axis)?;
        let (outer, l, inner) = axis_blocks(&xsh, axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * l + j) * inner + i;
                let mut m = src[at(0)];
                for j in 1..l {
                    m = m.max(src[at(j)]);
                }
                let mut s = T::zero();
                for j in 0..l {
                    let e = (src[at(j)] - m).exp();
                    out[at(j)] = e;
                    s += e;
                }
                for j in 0..l {
                    out[at(j)] = out[at(j)] / s;
                }
            }
        }
        self.push("softmax", xsh, out, Op::Softmax { x, axis }, &[x])
    }

    /// Normalizes along `axis` to zero mean / unit (population) variance,
    /// then applies `gain` and `offset`, both shaped `[extent]`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        offset: Var,
        axis: usize,
        eps: T,
    ) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        check_axis("layer_norm", &xsh, axis)?;
        let (outer, l, inner) = axis_blocks(&xsh, axis);
        if self.shape(gain) != [l] || self.shape(offset) != [l] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: xsh,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let src = self.data(x);
        let (gd, od) = (self.data(gain), self.data(offset));
        let nl = T::from_f64(l as f64);
        let mut out = vec![T::zero(); src.len()];
        let mut means = Vec::with_capacity(outer * inner);
        let mut rstds = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * l + j) * inner + i;
                let mut mu = T::zero();
                for j in 0..l {
                    mu += src[at(j)];
                }
                mu = mu / nl;
                let mut var = T::zero();
                for j in 0..l {
                    let d = src[at(j)] - mu;
                    var += d * d;
                }
                let rstd = (var / nl + eps).sqrt().recip();
                for j in 0..l {
                    out[at(j)] = (src[at(j)] - mu) * rstd * gd[j] + od[j];
                }
                means.push(mu);
                rstds.push(rstd);
            }
        }
        self.push(
            "layer_norm",
            xsh,
            out,
            Op::LayerNorm {
                x,
                gain,
                offset,
                axis,
                mean: means,
                rstd: rstds,
            },
            &[x, gain, offset],
        )
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if numel(self.shape(loss)) != 1 {
            return Err(TensorError::spec(
                "backward",
                format!("loss must have one element, got {:?}", self.shape(loss)),
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(n, || None);
        let mut leaves: Vec<Option<Tensor<T>>> = Vec::new();
        leaves.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, gy, &mut grads, &mut leaves, i);
        }
        Ok(Gradients { grads: leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        gy: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaves: &mut [Option<Tensor<T>>],
        idx: usize,
    ) {
        let y = &node.data;
        match &node.op {
            Op::Leaf => {
                leaves[idx] = Some(Tensor::from_parts(node.shape.clone(), gy));
            }
            Op::Binary(kind, a, b) => {
                let (ash, bsh) = (self.shape(*a), self.shape(*b));
                let (ad, bd) = (self.data(*a), self.data(*b));
                let os = &node.shape;
                let (ga, gb) = match kind {
                    BinaryKind::Add => (
                        broadcast_grad(&gy, ad, ash, bd, bsh, os, 0, |d, _, _| d),
                        broadcast_grad(&gy, ad, ash, bd, bsh, os, 1, |d, _, _| d),
                    ),
                    BinaryKind::Sub => (
                        broadcast_grad(&gy, ad, ash, bd, bsh, os, 0, |d, _, _| d),
                        broadcast_grad(&gy, ad, ash, bd, bsh, os, 1, |d, _, _| -d),
                    ),
                    BinaryKind::Mul => (
                        broadcast_grad(&gy, ad, ash, bd, bsh, os, 0, |d, _, y| d * y),
                        broadcast_grad(&gy, ad, ash, bd, bsh, os, 1, |d, x, _| d * x),
                    ),
                    BinaryKind::Div => (
                        broadcast_grad(&gy, ad, ash, bd, bsh, os, 0, |d, _, y| d / y),
                        broadcast_grad(&gy, ad, ash, bd, bsh, os, 1, |d, x, y| -d * x / (y * y)),
                    ),
                };
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Unary(kind, a) => {
                let x = self.data(*a);
                let g = gy
                    .iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(&d, (&xv, &yv))| d * unary_deriv(*kind, xv, yv))
                    .collect();
                self.accumulate(grads, *a, g);
            }
            Op::Scale(a, s) => {
                let g = gy.iter().map(|&d| d * *s).collect();
                self.accumulate(grads, *a, g);
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, *a, gy),
            Op::ClampMin(a, lo) => {
                let x = self.data(*a);
                let g = gy
                    .iter()
                    .zip(x)
                    .map(|(&d, &xv)| if xv >= *lo { d } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, g);
            }
            Op::MatMul(a, b) => {
                let (ash, bsh) = (self.shape(*a), self.shape(*b));
                let r = ash.len();
                let (m, k, n) = (ash[r - 2], ash[r - 1], bsh[r - 1]);
                let batch = numel(&ash[..r - 2]);
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![T::zero(); batch * m * k];
                    batched_gemm(
                        batch,
                        m,
                        n,
                        k,
                        &gy,
                        false,
                        self.data(*b),
                        true,
                        &mut ga,
                        false,
                    );
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![T::zero(); batch * k * n];
                    batched_gemm(
                        batch,
                        k,
                        m,
                        n,
                        self.data(*a),
                        true,
                        &gy,
                        false,
                        &mut gb,
                        false,
                    );
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let wsh = self.shape(*w);
                let (out_f, inp) = (wsh[0], wsh[1]);
                let rows = gy.len() / out_f;
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![T::zero(); rows * inp];
                    batched_gemm(
                        1,
                        rows,
                        out_f,
                        inp,
                        &gy,
                        false,
                        self.data(*w),
                        false,
                        &mut gx,
                        false,
                    );
                    self.accumulate(grads, *x, gx);
                }
                if self.nodes[w.0].requires_grad {
                    let mut gw = vec![T::zero(); out_f * inp];
                    batched_gemm(
                        1,
                        out_f,
                        rows,
                        inp,
                        &gy,
                        true,
                        self.data(*x),
                        false,
                        &mut gw,
                        false,
                    );
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.nodes[b.0].requires_grad {
                        let mut gb = vec![T::zero(); out_f];
                        for row in gy.chunks_exact(out_f) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::Permute(a, perm) => {
                let g = permute(&gy, &node.shape, &inverse_perm(perm));
                self.accumulate(grads, *a, g);
            }
            Op::Slice { x, axis, start } => {
                let xsh = self.shape(*x);
                let (outer, l, inner) = axis_blocks(xsh, *axis);
                let len = node.shape[*axis];
                let mut g = vec![T::zero(); numel(xsh)];
                for o in 0..outer {
                    let dst = (o * l + start) * inner;
                    g[dst..dst + len * inner]
                        .copy_from_slice(&gy[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_blocks(&node.shape, *axis);
                let mut offset = 0;
                for v in xs {
                    let l = self.shape(*v)[*axis];
                    if self.nodes[v.0].requires_grad {
                        let mut g = Vec::with_capacity(outer * l * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            g.extend_from_slice(&gy[base..base + l * inner]);
                        }
                        self.accumulate(grads, *v, g);
                    }
                    offset += l;
                }
            }
            Op::Flip { x, axis } => {
                let g = flip_data(&gy, &node.shape, *axis);
                self.accumulate(grads, *x, g);
            }
            Op::PadEdge { x, axis, before } => {
                let xsh = self.shape(*x);
                let (outer, l, inner) = axis_blocks(xsh, *axis);
                let nl = node.shape[*axis];
                let mut g = vec![T::zero(); numel(xsh)];
                for o in 0..outer {
                    for j in 0..nl {
                        let sj = j.saturating_sub(*before).min(l - 1);
                        let src = (o * nl + j) * inner;
                        let dst = (o * l + sj) * inner;
                        for t in 0..inner {
                            g[dst + t] += gy[src + t];
                        }
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Roll { x, axis, shift } => {
                let l = node.shape[*axis];
                let g = roll_data(&gy, &node.shape, *axis, l - shift);
                self.accumulate(grads, *x, g);
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let xsh = self.shape(*x);
                let (outer, l, inner) = axis_blocks(xsh, *axis);
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    T::one() / T::from_f64(l as f64)
                } else {
                    T::one()
                };
                let mut g = vec![T::zero(); numel(xsh)];
                for o in 0..outer {
                    for j in 0..l {
                        for i in 0..inner {
                            g[(o * l + j) * inner + i] = gy[o * inner + i] * scale;
                        }
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Max { x, axis, argmax } => {
                let xsh = self.shape(*x);
                let (outer, l, inner) = axis_blocks(xsh, *axis);
                let mut g = vec![T::zero(); numel(xsh)];
                for o in 0..outer {
                    for i in 0..inner {
                        let j = argmax[o * inner + i];
                        g[(o * l + j) * inner + i] = gy[o * inner + i];
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::L2Norm { x, axis } => {
                let xsh = self.shape(*x);
                let xd = self.data(*x);
                let (outer, l, inner) = axis_blocks(xsh, *axis);
                let mut g = vec![T::zero(); numel(xsh)];
                for o in 0..outer {
                    for i in 0..inner {
                        let nrm = y[o * inner + i];
                        if nrm > T::zero() {
                            let s = gy[o * inner + i] / nrm;
                            for j in 0..l {
                                let at = (o * l + j) * inner + i;
                                g[at] = s * xd[at];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Softmax { x, axis } => {
                let (outer, l, inner) = axis_blocks(&node.shape, *axis);
                let mut g = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * l + j) * inner + i;
                        let mut dot = T::zero();
                        for j in 0..l {
                            dot += gy[at(j)] * y[at(j)];
                        }
                        for j in 0..l {
                            g[at(j)] = y[at(j)] * (gy[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                axis,
                mean,
                rstd,
            } => {
                let xd = self.data(*x);
                let gd = self.data(*gain);
                let (outer, l, inner) = axis_blocks(&node.shape, *axis);
                let nl = T::from_f64(l as f64);
                let mut gx = vec![T::zero(); xd.len()];
                let mut ggain = vec![T::zero(); l];
                let mut goff = vec![T::zero(); l];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * l + j) * inner + i;
                        let (mu, rs) = (mean[o * inner + i], rstd[o * inner + i]);
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..l {
                            let xh = (xd[at(j)] - mu) * rs;
                            let d = gy[at(j)];
                            ggain[j] += d * xh;
                            goff[j] += d;
                            let dxh = d * gd[j];
                            s1 += dxh;
                            s2 += dxh * xh;
                        }
                        s1 = s1 / nl;
                        s2 = s2 / nl;
                        for j in 0..l {
                            let xh = (xd[at(j)] - mu) * rs;
                            let dxh = gy[at(j)] * gd[j];
                            gx[at(j)] = rs * (dxh - s1 - xh * s2);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gain, ggain);
                self.accumulate(grads, *offset, goff);
            }
        }
    }
}

fn flip_data<T: Copy>(src: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, l, inner) = axis_blocks(shape, axis);
    let mut out = Vec::with_capacity(src.len());
    for o in 0..outer {
        for j in (0..l).rev() {
            let base = (o * l + j) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
    }
    out
}

fn roll_data<T: Copy>(src: &[T], shape: &[usize], axis: usize, shift: usize) -> Vec<T> {
    let (outer, l, inner) = axis_blocks(shape, axis);
    let mut out = Vec::with_capacity(src.len());
    for o in 0..outer {
        for j in 0..l {
            let sj = (j + l - shift % l) % l;
            let base = (o * l + sj) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
    }
    out
}

/// Branch-free scan so the check vectorizes; it runs after every op in
/// debug and test builds.
fn all_finite<T: Float>(data: &[T]) -> bool {
    data.iter().fold(true, |ok, v| ok & v.is_finite())
}
