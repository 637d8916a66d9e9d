use std::cell::RefCell;

use super::{axis_extents, broadcast_shape, broadcast_source_index, Tensor};
use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Mat};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Neg,
    Exp,
    Log,
    Relu,
    Softplus,
    Sigmoid,
    Tanh,
    Square,
    Sqrt,
    Cos,
    Sin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    Scale(usize, F),
    MatMul(usize, usize),
    Conv1d { input: usize, kernel: usize, bias: usize, pad: usize },
    Sum { a: usize, axis: usize },
    Max { a: usize, argmax: Vec<usize> },
    LogSumExp { a: usize, axis: usize },
    Reshape(usize),
    Transpose(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { a: usize, axis: usize, start: usize },
    Gather { a: usize, index: Vec<usize> },
    SpdSolve { a: usize, b: usize, chol: Cholesky<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records operations in topological order; node ids only ever grow.
pub struct Tape<F> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// A handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients produced by one backward sweep, indexed by node id.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_, F>) -> Tensor<F> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&v.shape()),
        }
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::with_capacity(256)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let mut value = value;
        value.requires_grad = false;
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id }
    }

    /// Registers a leaf, trainable iff `t.requires_grad()`.
    pub fn leaf(&self, t: Tensor<F>) -> Var<'_, F> {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&self, t: Tensor<F>) -> Var<'_, F> {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&self, t: Tensor<F>) -> Var<'_, F> {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&self, v: F) -> Var<'_, F> {
        self.constant(Tensor::scalar(v))
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape.clone();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(&shape, F::one()));
        for id in (0..=loss.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], id: usize, g: Tensor<F>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(g.data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to_shape<F: Scalar>(g: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    if g.shape == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape);
    let map = broadcast_source_index(&g.shape, shape);
    for (i, &src) in map.iter().enumerate() {
        out.data[src] += g.data[i];
    }
    out
}

fn backprop_node<F: Scalar>(
    nodes: &[Node<F>],
    id: usize,
    g: &Tensor<F>,
    grads: &mut [Option<Tensor<F>>],
) -> Result<()> {
    let node = &nodes[id];
    let rg = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let va = &nodes[*a].value;
            let vb = &nodes[*b].value;
            let ia = broadcast_source_index(&g.shape, &va.shape);
            let ib = broadcast_source_index(&g.shape, &vb.shape);
            if rg(*a) {
                let full: Vec<F> = match kind {
                    Binary::Add | Binary::Sub => g.data.clone(),
                    Binary::Mul => g.data.iter().zip(&ib).map(|(&gi, &j)| gi * vb.data[j]).collect(),
                    Binary::Div => g.data.iter().zip(&ib).map(|(&gi, &j)| gi / vb.data[j]).collect(),
                };
                let t = Tensor { shape: g.shape.clone(), data: full, requires_grad: false };
                accumulate(grads, *a, reduce_to_shape(&t, &va.shape));
            }
            if rg(*b) {
                let full: Vec<F> = match kind {
                    Binary::Add => g.data.clone(),
                    Binary::Sub => g.data.iter().map(|&x| -x).collect(),
                    Binary::Mul => g.data.iter().zip(&ia).map(|(&gi, &j)| gi * va.data[j]).collect(),
                    Binary::Div => g
                        .data
                        .iter()
                        .zip(ia.iter().zip(&ib))
                        .map(|(&gi, (&ja, &jb))| -gi * va.data[ja] / (vb.data[jb] * vb.data[jb]))
                        .collect(),
                };
                let t = Tensor { shape: g.shape.clone(), data: full, requires_grad: false };
                accumulate(grads, *b, reduce_to_shape(&t, &vb.shape));
            }
        }
        Op::Unary(kind, a) => {
            if rg(*a) {
                let x = &nodes[*a].value.data;
                let y = &node.value.data;
                let one = F::one();
                let two = F::lit(2.0);
                let data: Vec<F> = (0..x.len())
                    .map(|i| {
                        let d = match kind {
                            Unary::Neg => -one,
                            Unary::Exp => y[i],
                            Unary::Log => one / x[i],
                            Unary::Relu => {
                                if x[i] > F::zero() {
                                    one
                                } else {
                                    F::zero()
                                }
                            }
                            Unary::Softplus | Unary::Sigmoid => {
                                let s = sigmoid(x[i]);
                                if *kind == Unary::Softplus {
                                    s
                                } else {
                                    s * (one - s)
                                }
                            }
                            Unary::Tanh => one - y[i] * y[i],
                            Unary::Square => two * x[i],
                            Unary::Sqrt => one / (two * y[i]),
                            Unary::Cos => -x[i].sin(),
                            Unary::Sin => x[i].cos(),
                        };
                        g.data[i] * d
                    })
                    .collect();
                accumulate(grads, *a, Tensor { shape: g.shape.clone(), data, requires_grad: false });
            }
        }
        Op::Scale(a, s) => {
            if rg(*a) {
                accumulate(grads, *a, g.map(|x| x * *s));
            }
        }
        Op::MatMul(a, b) => {
            let va = &nodes[*a].value;
            let vb = &nodes[*b].value;
            let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
            if rg(*a) {
                let mut ga = Tensor::zeros(&[m, k]);
                for i in 0..m {
                    for p in 0..k {
                        let mut s = F::zero();
                        for j in 0..n {
                            s += g.data[i * n + j] * vb.data[p * n + j];
                        }
                        ga.data[i * k + p] = s;
                    }
                }
                accumulate(grads, *a, ga);
            }
            if rg(*b) {
                let mut gb = Tensor::zeros(&[k, n]);
                for i in 0..m {
                    for p in 0..k {
                        let av = va.data[i * k + p];
                        for j in 0..n {
                            gb.data[p * n + j] += av * g.data[i * n + j];
                        }
                    }
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::Conv1d { input, kernel, bias, pad } => {
            let x = &nodes[*input].value;
            let w = &nodes[*kernel].value;
            let (batch, c_in, l_in) = conv_dims(&x.shape);
            let (c_out, k) = (w.shape[0], w.shape[2]);
            let l_out = node.value.shape[node.value.shape.len() - 1];
            if rg(*bias) {
                let mut gb = Tensor::zeros(&[c_out]);
                for bt in 0..batch {
                    for o in 0..c_out {
                        let row = &g.data[(bt * c_out + o) * l_out..(bt * c_out + o + 1) * l_out];
                        gb.data[o] += row.iter().copied().sum::<F>();
                    }
                }
                accumulate(grads, *bias, gb);
            }
            let gx_needed = rg(*input);
            let gw_needed = rg(*kernel);
            let mut gx = if gx_needed { Some(Tensor::zeros(&x.shape)) } else { None };
            let mut gw = if gw_needed { Some(Tensor::zeros(&w.shape)) } else { None };
            for bt in 0..batch {
                for o in 0..c_out {
                    let grow = &g.data[(bt * c_out + o) * l_out..(bt * c_out + o + 1) * l_out];
                    for c in 0..c_in {
                        let xbase = (bt * c_in + c) * l_in;
                        for kk in 0..k {
                            let (j0, j1) = conv_valid_range(l_in, l_out, kk, *pad);
                            if j0 >= j1 {
                                continue;
                            }
                            let widx = (o * c_in + c) * k + kk;
                            let shift = kk as isize - *pad as isize;
                            if let Some(gw) = gw.as_mut() {
                                let mut s = F::zero();
                                for j in j0..j1 {
                                    s += grow[j] * x.data[xbase + (j as isize + shift) as usize];
                                }
                                gw.data[widx] += s;
                            }
                            if let Some(gx) = gx.as_mut() {
                                let wv = w.data[widx];
                                for j in j0..j1 {
                                    gx.data[xbase + (j as isize + shift) as usize] += grow[j] * wv;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(gx) = gx {
                accumulate(grads, *input, gx);
            }
            if let Some(gw) = gw {
                accumulate(grads, *kernel, gw);
            }
        }
        Op::Sum { a, axis } => {
            if rg(*a) {
                let shape = &nodes[*a].value.shape;
                let (outer, n, inner) = axis_extents(shape, *axis);
                let mut ga = Tensor::zeros(shape);
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            ga.data[(o * n + i) * inner + j] = g.data[o * inner + j];
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
        }
        Op::Max { a, argmax } => {
            if rg(*a) {
                let mut ga = Tensor::zeros(&nodes[*a].value.shape);
                for (i, &src) in argmax.iter().enumerate() {
                    ga.data[src] += g.data[i];
                }
                accumulate(grads, *a, ga);
            }
        }
        Op::LogSumExp { a, axis } => {
            if rg(*a) {
                let x = &nodes[*a].value;
                let (outer, n, inner) = axis_extents(&x.shape, *axis);
                let mut ga = Tensor::zeros(&x.shape);
                for o in 0..outer {
                    for j in 0..inner {
                        let y = node.value.data[o * inner + j];
                        let gy = g.data[o * inner + j];
                        for i in 0..n {
                            let idx = (o * n + i) * inner + j;
                            ga.data[idx] = gy * (x.data[idx] - y).exp();
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
        }
        Op::Reshape(a) => {
            if rg(*a) {
                let mut t = g.clone();
                t.shape = nodes[*a].value.shape.clone();
                accumulate(grads, *a, t);
            }
        }
        Op::Transpose(a) => {
            if rg(*a) {
                let (r, c) = (g.shape[0], g.shape[1]);
                let mut t = Tensor::zeros(&[c, r]);
                for i in 0..r {
                    for j in 0..c {
                        t.data[j * r + i] = g.data[i * c + j];
                    }
                }
                accumulate(grads, *a, t);
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = axis_extents(&g.shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let pshape = &nodes[p].value.shape;
                let n = pshape[*axis];
                if rg(p) {
                    let mut t = Tensor::zeros(pshape);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * n * inner;
                        t.data[dst..dst + n * inner].copy_from_slice(&g.data[src..src + n * inner]);
                    }
                    accumulate(grads, p, t);
                }
                offset += n;
            }
        }
        Op::Narrow { a, axis, start } => {
            if rg(*a) {
                let shape = &nodes[*a].value.shape;
                let (outer, total, inner) = axis_extents(shape, *axis);
                let n = g.shape[*axis];
                let mut t = Tensor::zeros(shape);
                for o in 0..outer {
                    let dst = (o * total + start) * inner;
                    let src = o * n * inner;
                    t.data[dst..dst + n * inner].copy_from_slice(&g.data[src..src + n * inner]);
                }
                accumulate(grads, *a, t);
            }
        }
        Op::Gather { a, index } => {
            if rg(*a) {
                let mut t = Tensor::zeros(&nodes[*a].value.shape);
                for (i, &src) in index.iter().enumerate() {
                    t.data[src] += g.data[i];
                }
                accumulate(grads, *a, t);
            }
        }
        Op::SpdSolve { a, b, chol } => {
            let x = &node.value;
            let n = chol.dim();
            let k = if x.shape.len() == 1 { 1 } else { x.shape[1] };
            // G_B = A^{-1} G, G_A = -G_B X^T
            let gmat = Mat::from_vec(n, k, g.data.clone())?;
            let gb = chol.solve_mat(&gmat)?;
            if rg(*a) {
                let mut ga = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    for j in 0..n {
                        let mut s = F::zero();
                        for c in 0..k {
                            s += gb[(i, c)] * x.data[j * k + c];
                        }
                        ga.data[i * n + j] = -s;
                    }
                }
                accumulate(grads, *a, ga);
            }
            if rg(*b) {
                let t = Tensor { shape: x.shape.clone(), data: gb.into_vec(), requires_grad: false };
                accumulate(grads, *b, t);
            }
        }
    }
    Ok(())
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

fn conv_dims(shape: &[usize]) -> (usize, usize, usize) {
    if shape.len() == 2 {
        (1, shape[0], shape[1])
    } else {
        (shape[0], shape[1], shape[2])
    }
}

/// Output positions `j` for which input index `j + k - pad` is in range.
#[inline]
fn conv_valid_range(l_in: usize, l_out: usize, k: usize, pad: usize) -> (usize, usize) {
    let j0 = pad.saturating_sub(k);
    let j1 = (l_in + pad).saturating_sub(k).min(l_out);
    (j0, j1)
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Tensor<F> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    /// First element; convenient for scalar losses.
    pub fn item(&self) -> F {
        self.tape.nodes.borrow()[self.id].value.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    fn with<R>(&self, f: impl FnOnce(&Tensor<F>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn same_tape(&self, other: &Var<'t, F>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn binary(self, other: Var<'t, F>, kind: Binary) -> Result<Var<'t, F>> {
        self.same_tape(&other);
        let out = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            let op_name = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            };
            let shape = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| {
                Error::shape(op_name, format!("cannot broadcast {:?} with {:?}", a.shape, b.shape))
            })?;
            let fast = a.shape == b.shape;
            let (ia, ib) = if fast {
                (Vec::new(), Vec::new())
            } else {
                (broadcast_source_index(&shape, &a.shape), broadcast_source_index(&shape, &b.shape))
            };
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                let (x, y) = if fast { (a.data[i], b.data[i]) } else { (a.data[ia[i]], b.data[ib[i]]) };
                let v = match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => {
                        if y == F::zero() {
                            return Err(Error::domain("div", "division by zero"));
                        }
                        x / y
                    }
                };
                data.push(v);
            }
            Tensor { shape, data, requires_grad: false }
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, Op::Binary(kind, self.id, other.id), rg))
    }

    pub fn add(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, Binary::Div)
    }

    fn unary(self, kind: Unary) -> Var<'t, F> {
        let out = self.with(|x| {
            x.map(|v| match kind {
                Unary::Neg => -v,
                Unary::Exp => v.exp(),
                Unary::Log => v.ln(),
                Unary::Relu => v.max(F::zero()),
                Unary::Softplus => softplus(v),
                Unary::Sigmoid => sigmoid(v),
                Unary::Tanh => v.tanh(),
                Unary::Square => v * v,
                Unary::Sqrt => v.sqrt(),
                Unary::Cos => v.cos(),
                Unary::Sin => v.sin(),
            })
        });
        let rg = self.requires_grad();
        self.tape.push(out, Op::Unary(kind, self.id), rg)
    }

    pub fn neg(self) -> Var<'t, F> {
        self.unary(Unary::Neg)
    }

    pub fn exp(self) -> Var<'t, F> {
        self.unary(Unary::Exp)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(self) -> Result<Var<'t, F>> {
        if let Some(bad) = self.with(|x| x.data.iter().copied().find(|v| !(*v > F::zero()))) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        Ok(self.unary(Unary::Log))
    }

    /// Square root; every entry must be strictly positive so the derivative exists.
    pub fn sqrt(self) -> Result<Var<'t, F>> {
        if let Some(bad) = self.with(|x| x.data.iter().copied().find(|v| !(*v > F::zero()))) {
            return Err(Error::domain("sqrt", format!("non-positive input {bad}")));
        }
        Ok(self.unary(Unary::Sqrt))
    }

    pub fn relu(self) -> Var<'t, F> {
        self.unary(Unary::Relu)
    }

    pub fn softplus(self) -> Var<'t, F> {
        self.unary(Unary::Softplus)
    }

    pub fn sigmoid(self) -> Var<'t, F> {
        self.unary(Unary::Sigmoid)
    }

    pub fn tanh(self) -> Var<'t, F> {
        self.unary(Unary::Tanh)
    }

    pub fn square(self) -> Var<'t, F> {
        self.unary(Unary::Square)
    }

    pub fn cos(self) -> Var<'t, F> {
        self.unary(Unary::Cos)
    }

    pub fn sin(self) -> Var<'t, F> {
        self.unary(Unary::Sin)
    }

    /// Multiplies by a constant.
    pub fn scale(self, s: F) -> Var<'t, F> {
        let out = self.with(|x| x.map(|v| v * s));
        let rg = self.requires_grad();
        self.tape.push(out, Op::Scale(self.id, s), rg)
    }

    pub fn add_scalar(self, s: F) -> Var<'t, F> {
        let c = self.tape.scalar(s);
        self.add(c).expect("scalar broadcasts")
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(&other);
        let out = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}: inner dimensions must agree", a.shape, b.shape),
                ));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut data = vec![F::zero(); m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a.data[i * k + p];
                    if av == F::zero() {
                        continue;
                    }
                    let brow = &b.data[p * n..(p + 1) * n];
                    let orow = &mut data[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Tensor { shape: vec![m, n], data, requires_grad: false }
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), rg))
    }

    /// `input [.., F_in] · weight [F_in, F_out] + bias [F_out]`.
    pub fn affine(self, weight: Var<'t, F>, bias: Var<'t, F>) -> Result<Var<'t, F>> {
        let shape = self.shape();
        let wshape = weight.shape();
        let bshape = bias.shape();
        if shape.is_empty() || wshape.len() != 2 || shape[shape.len() - 1] != wshape[0] {
            return Err(Error::shape(
                "affine",
                format!("input {shape:?} against weight {wshape:?}: F_in must agree"),
            ));
        }
        if bshape != [wshape[1]] {
            return Err(Error::shape(
                "affine",
                format!("bias {bshape:?} does not match F_out = {}", wshape[1]),
            ));
        }
        let f_in = wshape[0];
        let rows = shape.iter().product::<usize>() / f_in;
        let flat = self.reshape(&[rows, f_in])?;
        let y = flat.matmul(weight)?.add(bias)?;
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = wshape[1];
        y.reshape(&out_shape)
    }

    /// Cross-correlation with zero padding. `self` is `[C_in, L]` or
    /// `[B, C_in, L]`, `kernel` is `[C_out, C_in, K]` with odd `K`, `bias` is `[C_out]`.
    pub fn conv1d(self, kernel: Var<'t, F>, bias: Var<'t, F>, pad: usize) -> Result<Var<'t, F>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let w = &nodes[kernel.id].value;
            let b = &nodes[bias.id].value;
            if x.shape.len() != 2 && x.shape.len() != 3 {
                return Err(Error::shape("conv1d", format!("input rank must be 2 or 3, got {:?}", x.shape)));
            }
            if w.shape.len() != 3 {
                return Err(Error::shape("conv1d", format!("kernel must be [C_out, C_in, K], got {:?}", w.shape)));
            }
            let (batch, c_in, l_in) = conv_dims(&x.shape);
            let (c_out, wc_in, k) = (w.shape[0], w.shape[1], w.shape[2]);
            if wc_in != c_in {
                return Err(Error::shape(
                    "conv1d",
                    format!("C_in: input has {c_in} channels, kernel expects {wc_in}"),
                ));
            }
            if k % 2 == 0 {
                return Err(Error::shape("conv1d", format!("K: kernel width {k} must be odd")));
            }
            if b.shape != [c_out] {
                return Err(Error::shape("conv1d", format!("C_out: bias {:?} vs {c_out} outputs", b.shape)));
            }
            if l_in + 2 * pad < k {
                return Err(Error::shape(
                    "conv1d",
                    format!("L: length {l_in} with padding {pad} is shorter than kernel {k}"),
                ));
            }
            let l_out = l_in + 2 * pad - k + 1;
            let mut data = vec![F::zero(); batch * c_out * l_out];
            for bt in 0..batch {
                for o in 0..c_out {
                    let orow = &mut data[(bt * c_out + o) * l_out..(bt * c_out + o + 1) * l_out];
                    orow.iter_mut().for_each(|v| *v = b.data[o]);
                    for c in 0..c_in {
                        let xrow = &x.data[(bt * c_in + c) * l_in..(bt * c_in + c + 1) * l_in];
                        for kk in 0..k {
                            let wv = w.data[(o * c_in + c) * k + kk];
                            let (j0, j1) = conv_valid_range(l_in, l_out, kk, pad);
                            if j0 >= j1 {
                                continue;
                            }
                            let s0 = j0 + kk - pad;
                            for (ov, &xv) in orow[j0..j1].iter_mut().zip(&xrow[s0..s0 + (j1 - j0)]) {
                                *ov += wv * xv;
                            }
                        }
                    }
                }
            }
            let shape = if x.shape.len() == 2 { vec![c_out, l_out] } else { vec![batch, c_out, l_out] };
            Tensor { shape, data, requires_grad: false }
        };
        let rg = self.requires_grad() || kernel.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(out, Op::Conv1d { input: self.id, kernel: kernel.id, bias: bias.id, pad }, rg))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
        }
        if shape[axis] == 0 {
            return Err(Error::shape(op, format!("empty axis {axis} in {shape:?}")));
        }
        Ok(shape)
    }

    fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
        let mut s = shape.to_vec();
        if keepdim {
            s[axis] = 1;
        } else {
            s.remove(axis);
        }
        s
    }

    pub fn sum(self, axis: usize, keepdim: bool) -> Result<Var<'t, F>> {
        let shape = self.check_axis("sum", axis)?;
        let (outer, n, inner) = axis_extents(&shape, axis);
        let out = self.with(|x| {
            let mut data = vec![F::zero(); outer * inner];
            for o in 0..outer {
                for i in 0..n {
                    for j in 0..inner {
                        data[o * inner + j] += x.data[(o * n + i) * inner + j];
                    }
                }
            }
            Tensor { shape: Self::reduced_shape(&shape, axis, keepdim), data, requires_grad: false }
        });
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::Sum { a: self.id, axis }, rg))
    }

    pub fn mean(self, axis: usize, keepdim: bool) -> Result<Var<'t, F>> {
        let n = self.check_axis("mean", axis)?[axis];
        Ok(self.sum(axis, keepdim)?.scale(F::one() / F::from_usize_lossy(n)))
    }

    pub fn sum_all(self) -> Var<'t, F> {
        let n = self.with(|x| x.numel());
        let flat = self.reshape(&[n]).expect("flatten");
        if n == 0 {
            return self.tape.scalar(F::zero());
        }
        flat.sum(0, false).expect("non-empty")
    }

    pub fn mean_all(self) -> Var<'t, F> {
        let n = self.with(|x| x.numel()).max(1);
        self.sum_all().scale(F::one() / F::from_usize_lossy(n))
    }

    pub fn max(self, axis: usize, keepdim: bool) -> Result<Var<'t, F>> {
        let shape = self.check_axis("max", axis)?;
        let (outer, n, inner) = axis_extents(&shape, axis);
        let (out, argmax) = self.with(|x| {
            let mut data = Vec::with_capacity(outer * inner);
            let mut arg = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for j in 0..inner {
                    let mut best = (o * n) * inner + j;
                    for i in 1..n {
                        let idx = (o * n + i) * inner + j;
                        if x.data[idx] > x.data[best] {
                            best = idx;
                        }
                    }
                    data.push(x.data[best]);
                    arg.push(best);
                }
            }
            (Tensor { shape: Self::reduced_shape(&shape, axis, keepdim), data, requires_grad: false }, arg)
        });
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::Max { a: self.id, argmax }, rg))
    }

    /// Max-shifted `log Σ exp` along `axis`.
    pub fn log_sum_exp(self, axis: usize, keepdim: bool) -> Result<Var<'t, F>> {
        let shape = self.check_axis("log_sum_exp", axis)?;
        let (outer, n, inner) = axis_extents(&shape, axis);
        let out = self.with(|x| {
            let mut data = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| x.data[(o * n + i) * inner + j];
                    let m = (0..n).map(at).fold(F::neg_infinity(), F::max);
                    if m == F::neg_infinity() {
                        data.push(m);
                        continue;
                    }
                    let s: F = (0..n).map(|i| (at(i) - m).exp()).sum();
                    data.push(m + s.ln());
                }
            }
            Tensor { shape: Self::reduced_shape(&shape, axis, keepdim), data, requires_grad: false }
        });
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::LogSumExp { a: self.id, axis }, rg))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, F>> {
        Ok(self.log_softmax(axis)?.exp())
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t, F>> {
        let lse = self.log_sum_exp(axis, true)?;
        self.sub(lse)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, F>> {
        let t = self.value().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(t, Op::Reshape(self.id), rg))
    }

    pub fn transpose(self) -> Result<Var<'t, F>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape("transpose", format!("needs a matrix, got {shape:?}")));
        }
        let (r, c) = (shape[0], shape[1]);
        let out = self.with(|x| {
            let mut data = vec![F::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = x.data[i * c + j];
                }
            }
            Tensor { shape: vec![c, r], data, requires_grad: false }
        });
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::Transpose(self.id), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tape = first.tape;
        let out = {
            let nodes = tape.nodes.borrow();
            let base = &nodes[first.id].value.shape;
            if axis >= base.len() {
                return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
            }
            let mut total = 0;
            for p in parts {
                let s = &nodes[p.id].value.shape;
                let compatible = s.len() == base.len()
                    && s.iter().zip(base).enumerate().all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(Error::shape("concat", format!("{s:?} incompatible with {base:?}")));
                }
                total += s[axis];
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let (outer, _, inner) = axis_extents(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let n = v.shape[axis] * inner;
                    data.extend_from_slice(&v.data[o * n..(o + 1) * n]);
                }
            }
            Tensor { shape, data, requires_grad: false }
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(out, Op::Concat { parts: ids, axis }, rg))
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, F>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, total, inner) = axis_extents(&shape, axis);
        let out = self.with(|x| {
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * total + start) * inner;
                data.extend_from_slice(&x.data[s..s + len * inner]);
            }
            let mut s = shape.clone();
            s[axis] = len;
            Tensor { shape: s, data, requires_grad: false }
        });
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::Narrow { a: self.id, axis, start }, rg))
    }

    /// Picks flat elements by index into a tensor of `shape`.
    pub fn gather(self, index: &[usize], shape: &[usize]) -> Result<Var<'t, F>> {
        let n = self.with(|x| x.numel());
        if index.iter().any(|&i| i >= n) || index.len() != shape.iter().product::<usize>() {
            return Err(Error::shape("gather", format!("bad index set for {n} elements")));
        }
        let out = self.with(|x| Tensor {
            shape: shape.to_vec(),
            data: index.iter().map(|&i| x.data[i]).collect(),
            requires_grad: false,
        });
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::Gather { a: self.id, index: index.to_vec() }, rg))
    }

    /// Solves `A X = B` for symmetric positive-definite `A = self` (`[n, n]`),
    /// with `B` of shape `[n]` or `[n, k]`. Jitter from the standard ladder
    /// is added when the plain factorisation fails.
    pub fn spd_solve(self, b: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(&b);
        let (chol, x) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let bv = &nodes[b.id].value;
            if a.shape.len() != 2 || a.shape[0] != a.shape[1] {
                return Err(Error::shape("spd_solve", format!("A must be square, got {:?}", a.shape)));
            }
            let n = a.shape[0];
            if bv.shape.is_empty() || bv.shape.len() > 2 || bv.shape[0] != n {
                return Err(Error::shape("spd_solve", format!("B {:?} for A of size {n}", bv.shape)));
            }
            let k = if bv.shape.len() == 1 { 1 } else { bv.shape[1] };
            let am = Mat::from_vec(n, n, a.data.clone())?;
            let chol = match Cholesky::new(&am) {
                Ok(c) => c,
                Err(_) => Cholesky::with_jitter(&am)?,
            };
            let xm = chol.solve_mat(&Mat::from_vec(n, k, bv.data.clone())?)?;
            let x = Tensor { shape: bv.shape.clone(), data: xm.into_vec(), requires_grad: false };
            (chol, x)
        };
        let rg = self.requires_grad() || b.requires_grad();
        Ok(self.tape.push(x, Op::SpdSolve { a: self.id, b: b.id, chol }, rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let w = tape.constant(t(&[1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        assert_eq!(x.conv1d(w, b, 0).unwrap().value().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_box_kernel_with_padding() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let w = tape.constant(t(&[1, 1, 3], &[1.0, 1.0, 1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        assert_eq!(x.conv1d(w, b, 1).unwrap().value().data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 4], &[1.0, -2.0, 3.0, 0.5, 7.0, 1.0, 1.0, 2.0]));
        let w = tape.constant(Tensor::zeros(&[3, 2, 3]));
        let b = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let y = x.conv1d(w, b, 1).unwrap().value();
        assert_eq!(y.shape(), &[3, 4]);
        for (o, bias) in [0.5, -1.0, 2.0].iter().enumerate() {
            assert!(y.data()[o * 4..(o + 1) * 4].iter().all(|v| v == bias));
        }
    }

    #[test]
    fn conv_shape_errors_name_the_dimension() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 5]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let err = x.conv1d(w, b, 1).unwrap_err().to_string();
        assert!(err.contains("C_in"), "{err}");
        let w = tape.constant(Tensor::zeros(&[1, 2, 4]));
        let err = x.conv1d(w, b, 1).unwrap_err().to_string();
        assert!(err.contains("K"), "{err}");
    }

    #[test]
    fn affine_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        assert_eq!(x.affine(w, b).unwrap().value().data(), &[3.0]);

        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zb = tape.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(x.affine(eye, zb).unwrap().value().data(), &[1.0, 2.0]);

        let zw = tape.constant(Tensor::zeros(&[2, 3]));
        let bb = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let xs = tape.constant(Tensor::zeros(&[4, 2]));
        let y = xs.affine(zw, bb).unwrap().value();
        assert_eq!(y.shape(), &[4, 3]);
        assert_eq!(&y.data()[9..12], &[1.0, 2.0, 3.0]);

        let bad = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(x.affine(bad, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn pointwise_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1.0, 0.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0]);
        let sp = x.softplus().value();
        assert!((sp.data()[1] - 2f64.ln()).abs() < 1e-15);
        let one = tape.scalar(1.0);
        assert_eq!(x.mul(one).unwrap().value().data(), x.value().data());
        assert!(matches!(x.log(), Err(Error::Domain { .. })));
        let zero = tape.scalar(0.0);
        assert!(matches!(one.div(zero), Err(Error::Domain { .. })));
    }

    #[test]
    fn reduction_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(x.sum(0, false).unwrap().item(), 6.0);
        let big = tape.constant(t(&[2], &[1000.0, 1000.0]));
        let lse = big.log_sum_exp(0, false).unwrap().item();
        assert!((lse - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let v = tape.constant(Tensor::full(&[7], -3.25));
        let lse = v.log_sum_exp(0, false).unwrap().item();
        assert!((lse - (-3.25 + 7f64.ln())).abs() < 1e-12);
        let empty = tape.constant(Tensor::zeros(&[0]));
        assert!(empty.sum(0, false).is_err());
        assert!(x.sum(1, false).is_err());
    }

    #[test]
    fn backward_square_and_constant() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = x.square();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item().unwrap(), 6.0);

        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let c = tape.scalar(5.0);
        let zero_x = x.scale(0.0);
        let y = c.add(zero_x).unwrap();
        assert_eq!(tape.backward(y).unwrap().wrt(x).item().unwrap(), 0.0);
    }

    #[test]
    fn backward_relu_sum() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[-1.0, 2.0]));
        let y = x.relu().sum_all();
        assert_eq!(tape.backward(y).unwrap().wrt(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x.square()), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn concat_and_narrow_round_trip() {
        let tape = Tape::new();
        let a = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(t(&[2, 1], &[5.0, 6.0]));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = c.narrow(1, 2, 1).unwrap();
        assert_eq!(back.value().data(), &[5.0, 6.0]);
        let g = tape.backward(back.sum_all()).unwrap();
        assert_eq!(g.wrt(b).data(), &[1.0, 1.0]);
        assert_eq!(g.wrt(a).data(), &[0.0; 4]);
    }

    #[test]
    fn spd_solve_matches_direct() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[4.0, 1.0, 1.0, 3.0]));
        let b = tape.constant(t(&[2], &[1.0, 2.0]));
        let x = a.spd_solve(b).unwrap().value();
        assert!((4.0 * x.data()[0] + x.data()[1] - 1.0).abs() < 1e-12);
        assert!((x.data()[0] + 3.0 * x.data()[1] - 2.0).abs() < 1e-12);
    }
}
