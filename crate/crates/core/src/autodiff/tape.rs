use crate::error::{shape_err, Error, Result};

use super::real::{MatView, Real};
use super::tensor::{axis_split, Tensor};

/// Normalization epsilon shared by group and instance normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log { a: Var, eps: T },
    Neg(Var),
    Scale { a: Var, c: T },
    AddConst(Var),
    Softmax { a: Var, axis: usize },
    MaxReduce { a: Var, axis: usize, argmax: Vec<usize> },
    MeanReduce { a: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Norm { a: Var, groups: usize, inv_std: Vec<T> },
    GatherRows { a: Var, idx: Vec<usize> },
    GatherElems { a: Var, idx: Vec<(usize, usize)> },
    Reshape(Var),
    Bce { p: Var, targets: Vec<T>, eps: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to a parameter leaf. Parameters the
    /// loss does not depend on have an all-zero gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a
/// topological order of the computation graph.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_axis<T: Real>(op: &'static str, a: &Tensor<T>, axis: usize) -> Result<()> {
    if axis >= a.rank() {
        return Err(shape_err(op, format!("axis {} on shape {:?}", axis, a.shape())));
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn matrix_dims<T: Real>(t: &Tensor<T>, transposed: bool) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(shape_err("matmul", format!("rank-2 operand expected, got {:?}", t.shape())));
    }
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Ok(if transposed { (c, r) } else { (r, c) })
}

fn view<T: Real>(t: &Tensor<T>, transposed: bool) -> MatView<'_, T> {
    let v = MatView::row_major(t.data(), t.shape()[0], t.shape()[1]);
    if transposed {
        v.t()
    } else {
        v
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------------
    // forward ops
    // ---------------------------------------------------------------------

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims(va, ta)?;
        let (k2, n) = matrix_dims(vb, tb)?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?} (ta={}, tb={})", va.shape(), vb.shape(), ta, tb),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm_raw(view(va, ta), view(vb, tb), T::zero(), out.data_mut(), n as isize, 1);
        self.push("matmul", out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.numel() == 1 && va.numel() != 1 {
            let s = vb.item();
            return Ok(Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x, s)).collect())?);
        }
        same_shape(name, va, vb)?;
        Tensor::new(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    /// Elementwise sum; `b` may be a single-element tensor broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub { a, b }, &[a, b])
    }

    /// Elementwise (Hadamard) product; `b` may be a broadcast scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul { a, b }, &[a, b])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.value(*first).shape().to_vec();
        check_axis("concat", self.value(*first), axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != base.len() || s.iter().enumerate().any(|(d, &e)| d != axis && e != base[d]) {
                return Err(shape_err("concat", format!("{:?} vs {:?} on axis {}", base, s, axis)));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
            .expect("same length")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, |x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, |x| x.exp());
        self.push("exp", out, Op::Exp(a), &[a])
    }

    /// `ln(a + eps)`.
    pub fn log(&mut self, a: Var, eps: T) -> Result<Var> {
        let out = self.unary(a, |x| (x + eps).ln());
        self.push("log", out, Op::Log { a, eps }, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, |x| -x);
        self.push("neg", out, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.unary(a, |x| x * c);
        self.push("scale", out, Op::Scale { a, c }, &[a])
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.unary(a, |x| x + c);
        self.push("add_const", out, Op::AddConst(a), &[a])
    }

    /// Softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        check_axis("softmax", va, axis)?;
        let (outer, len, inner) = axis_split(va.shape(), axis);
        let src = va.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let mut m = T::neg_infinity();
                for l in 0..len {
                    m = m.max(src[at(l)]);
                }
                let mut z = T::zero();
                for l in 0..len {
                    let e = (src[at(l)] - m).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        let out = Tensor::new(va.shape().to_vec(), out)?;
        self.push("softmax", out, Op::Softmax { a, axis }, &[a])
    }

    /// Maximum along `axis`; the argmax (lowest index on ties) is recorded
    /// and receives the whole gradient.
    pub fn max_reduce(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        check_axis("max_reduce", va, axis)?;
        let (outer, len, inner) = axis_split(va.shape(), axis);
        if len == 0 {
            return Err(shape_err("max_reduce", "empty axis"));
        }
        let src = va.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = 0;
                let mut bv = src[base];
                for l in 1..len {
                    let v = src[base + l * inner];
                    if v > bv {
                        bv = v;
                        best = l;
                    }
                }
                out.push(bv);
                argmax.push(best);
            }
        }
        let out = Tensor::new(reduced_shape(va.shape(), axis), out)?;
        self.push("max_reduce", out, Op::MaxReduce { a, axis, argmax }, &[a])
    }

    pub fn mean_reduce(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        check_axis("mean_reduce", va, axis)?;
        let (outer, len, inner) = axis_split(va.shape(), axis);
        let src = va.data();
        let inv = T::one() / T::of(len as f64);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let s: T = (0..len).map(|l| src[base + l * inner]).sum();
                out.push(s * inv);
            }
        }
        let out = Tensor::new(reduced_shape(va.shape(), axis), out)?;
        self.push("mean_reduce", out, Op::MeanReduce { a, axis }, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.numel() == 0 {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let out = Tensor::scalar(va.sum() / T::of(va.numel() as f64));
        self.push("mean", out, Op::MeanAll(a), &[a])
    }

    /// Fully connected layer `x · wᵀ + b` with `w` shaped `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (rows, fan_in) = matrix_dims(vx, false)?;
        let (fan_out, w_in) = matrix_dims(vw, false)?;
        if fan_in != w_in {
            return Err(shape_err("linear", format!("input {:?} vs weight {:?}", vx.shape(), vw.shape())));
        }
        let mut out = Tensor::zeros(&[rows, fan_out]);
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != [fan_out] {
                return Err(shape_err("linear", format!("bias {:?} for {} outputs", vb.shape(), fan_out)));
            }
            for r in 0..rows {
                out.data_mut()[r * fan_out..(r + 1) * fan_out].copy_from_slice(vb.data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm_raw(view(vx, false), view(vw, true), beta, out.data_mut(), fan_out as isize, 1);
        let inputs: Vec<Var> = std::iter::once(x).chain(Some(w)).chain(b).collect();
        self.push("linear", out, Op::Linear { x, w, b }, &inputs)
    }

    /// Group normalization of a `[rows, channels]` tensor: statistics per
    /// group of `channels / groups` channels, pooled over all rows.
    pub fn group_norm(&mut self, a: Var, groups: usize) -> Result<Var> {
        let va = self.value(a);
        let (rows, ch) = matrix_dims(va, false)?;
        if groups == 0 || ch % groups != 0 {
            return Err(shape_err("group_norm", format!("{} channels into {} groups", ch, groups)));
        }
        let cg = ch / groups;
        let n = T::of((rows * cg) as f64);
        let src = va.data();
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(groups);
        for g in 0..groups {
            let cols = g * cg..(g + 1) * cg;
            let mut mean = T::zero();
            for r in 0..rows {
                for c in cols.clone() {
                    mean += src[r * ch + c];
                }
            }
            mean /= n;
            let mut var = T::zero();
            for r in 0..rows {
                for c in cols.clone() {
                    let d = src[r * ch + c] - mean;
                    var += d * d;
                }
            }
            var /= n;
            let is = T::one() / (var + T::of(NORM_EPS)).sqrt();
            for r in 0..rows {
                for c in cols.clone() {
                    out[r * ch + c] = (src[r * ch + c] - mean) * is;
                }
            }
            inv_std.push(is);
        }
        let out = Tensor::new(va.shape().to_vec(), out)?;
        self.push("group_norm", out, Op::Norm { a, groups, inv_std }, &[a])
    }

    /// Per-channel normalization over the rows of a `[rows, channels]` tensor.
    pub fn instance_norm(&mut self, a: Var) -> Result<Var> {
        let ch = matrix_dims(self.value(a), false)?.1;
        self.group_norm(a, ch.max(1))
    }

    /// Select rows of a rank-2 tensor; repeated indices accumulate gradient.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = matrix_dims(va, false)?;
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            if r >= rows {
                return Err(Error::InvalidArgument(format!("gather_rows: row {} of {}", r, rows)));
            }
            data.extend_from_slice(va.row(r));
        }
        let out = Tensor::new(vec![idx.len(), cols], data)?;
        self.push(
            "gather_rows",
            out,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        )
    }

    /// Pick individual entries `(row, col)` of a rank-2 tensor into a vector.
    pub fn gather_elems(&mut self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = matrix_dims(va, false)?;
        let mut data = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= rows || c >= cols {
                return Err(Error::InvalidArgument(format!(
                    "gather_elems: ({}, {}) outside {}x{}",
                    r, c, rows, cols
                )));
            }
            data.push(va.at(r, c));
        }
        let out = Tensor::new(vec![idx.len()], data)?;
        self.push(
            "gather_elems",
            out,
            Op::GatherElems {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &[T], eps: T) -> Result<Var> {
        let vp = self.value(p);
        if vp.numel() != targets.len() || targets.is_empty() {
            return Err(shape_err(
                "binary_cross_entropy",
                format!("{} predictions vs {} targets", vp.numel(), targets.len()),
            ));
        }
        let n = T::of(targets.len() as f64);
        let total: T = vp
            .data()
            .iter()
            .zip(targets)
            .map(|(&q, &t)| t * (q + eps).ln() + (T::one() - t) * (T::one() - q + eps).ln())
            .sum();
        let out = Tensor::scalar(-total / n);
        self.push(
            "binary_cross_entropy",
            out,
            Op::Bce {
                p,
                targets: targets.to_vec(),
                eps,
            },
            &[p],
        )
    }

    // ---------------------------------------------------------------------
    // backward
    // ---------------------------------------------------------------------

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.needs(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        slot.as_mut().map(Tensor::data_mut)
    }

    fn acc_elementwise(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl Fn(usize) -> T) {
        if let Some(buf) = self.acc(grads, v) {
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot += f(k);
            }
        }
    }

    /// Gradient for the second operand of a possibly-broadcast binary op.
    fn acc_broadcast_rhs(&self, grads: &mut [Option<Tensor<T>>], a: Var, b: Var, f: impl Fn(usize) -> T) {
        let broadcast = self.value(b).numel() == 1 && self.value(a).numel() != 1;
        if broadcast {
            let n = self.value(a).numel();
            if let Some(buf) = self.acc(grads, b) {
                buf[0] += (0..n).map(f).sum();
            }
        } else {
            self.acc_elementwise(grads, b, f);
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = matrix_dims(va, *ta).expect("checked in forward");
                let n = vb.shape()[if *tb { 0 } else { 1 }];
                let dc = MatView::row_major(gd, m, n);
                let op_a = view(va, *ta);
                let op_b = view(vb, *tb);
                if let Some(buf) = self.acc(grads, *a) {
                    let (rs, cs) = if *ta { (1, m as isize) } else { (k as isize, 1) };
                    T::gemm_raw(dc, op_b.t(), T::one(), buf, rs, cs);
                }
                if let Some(buf) = self.acc(grads, *b) {
                    let (rs, cs) = if *tb { (1, k as isize) } else { (n as isize, 1) };
                    T::gemm_raw(op_a.t(), dc, T::one(), buf, rs, cs);
                }
            }
            Op::Add { a, b } => {
                self.acc_elementwise(grads, *a, |k| gd[k]);
                self.acc_broadcast_rhs(grads, *a, *b, |k| gd[k]);
            }
            Op::Sub { a, b } => {
                self.acc_elementwise(grads, *a, |k| gd[k]);
                self.acc_broadcast_rhs(grads, *a, *b, |k| -gd[k]);
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let bscalar = vb.len() == 1 && va.len() != 1;
                self.acc_elementwise(grads, *a, |k| gd[k] * if bscalar { vb[0] } else { vb[k] });
                self.acc_broadcast_rhs(grads, *a, *b, |k| gd[k] * va[k]);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.value(v).shape()[*axis];
                    if let Some(buf) = self.acc(grads, v) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            for q in 0..len * inner {
                                buf[dst + q] += gd[src + q];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.acc_elementwise(grads, *a, |k| if x[k] > T::zero() { gd[k] } else { T::zero() });
            }
            Op::Sigmoid(a) => self.acc_elementwise(grads, *a, |k| gd[k] * y[k] * (T::one() - y[k])),
            Op::Exp(a) => self.acc_elementwise(grads, *a, |k| gd[k] * y[k]),
            Op::Log { a, eps } => {
                let x = self.value(*a).data();
                self.acc_elementwise(grads, *a, |k| gd[k] / (x[k] + *eps));
            }
            Op::Neg(a) => self.acc_elementwise(grads, *a, |k| -gd[k]),
            Op::Scale { a, c } => self.acc_elementwise(grads, *a, |k| gd[k] * *c),
            Op::AddConst(a) => self.acc_elementwise(grads, *a, |k| gd[k]),
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                if let Some(buf) = self.acc(grads, *a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| o * len * inner + l * inner + i;
                            let dot: T = (0..len).map(|l| gd[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                buf[at(l)] += y[at(l)] * (gd[at(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaxReduce { a, axis, argmax } => {
                let (outer, len, inner) = axis_split(self.value(*a).shape(), *axis);
                if let Some(buf) = self.acc(grads, *a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = o * inner + i;
                            buf[o * len * inner + argmax[r] * inner + i] += gd[r];
                        }
                    }
                }
            }
            Op::MeanReduce { a, axis } => {
                let (outer, len, inner) = axis_split(self.value(*a).shape(), *axis);
                let inv = T::one() / T::of(len as f64);
                if let Some(buf) = self.acc(grads, *a) {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                buf[o * len * inner + l * inner + i] += gd[o * inner + i] * inv;
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => self.acc_elementwise(grads, *a, |_| gd[0]),
            Op::MeanAll(a) => {
                let inv = T::one() / T::of(self.value(*a).numel() as f64);
                self.acc_elementwise(grads, *a, |_| gd[0] * inv);
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (rows, fan_in) = (vx.shape()[0], vx.shape()[1]);
                let fan_out = vw.shape()[0];
                let dy = MatView::row_major(gd, rows, fan_out);
                if let Some(buf) = self.acc(grads, *x) {
                    T::gemm_raw(dy, view(vw, false), T::one(), buf, fan_in as isize, 1);
                }
                if let Some(buf) = self.acc(grads, *w) {
                    T::gemm_raw(dy.t(), view(vx, false), T::one(), buf, fan_in as isize, 1);
                }
                if let Some(b) = b {
                    if let Some(buf) = self.acc(grads, *b) {
                        for r in 0..rows {
                            for (c, slot) in buf.iter_mut().enumerate() {
                                *slot += gd[r * fan_out + c];
                            }
                        }
                    }
                }
            }
            Op::Norm { a, groups, inv_std } => {
                let shape = node.value.shape();
                let (rows, ch) = (shape[0], shape[1]);
                let cg = ch / groups;
                let n = T::of((rows * cg) as f64);
                if let Some(buf) = self.acc(grads, *a) {
                    for (gi, &is) in inv_std.iter().enumerate() {
                        let cols = gi * cg..(gi + 1) * cg;
                        let mut mean_g = T::zero();
                        let mut mean_gy = T::zero();
                        for r in 0..rows {
                            for c in cols.clone() {
                                let k = r * ch + c;
                                mean_g += gd[k];
                                mean_gy += gd[k] * y[k];
                            }
                        }
                        mean_g /= n;
                        mean_gy /= n;
                        for r in 0..rows {
                            for c in cols.clone() {
                                let k = r * ch + c;
                                buf[k] += is * (gd[k] - mean_g - y[k] * mean_gy);
                            }
                        }
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                let cols = node.value.shape()[1];
                if let Some(buf) = self.acc(grads, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..cols {
                            buf[src * cols + c] += gd[r * cols + c];
                        }
                    }
                }
            }
            Op::GatherElems { a, idx } => {
                let cols = self.value(*a).shape()[1];
                if let Some(buf) = self.acc(grads, *a) {
                    for (k, &(r, c)) in idx.iter().enumerate() {
                        buf[r * cols + c] += gd[k];
                    }
                }
            }
            Op::Reshape(a) => self.acc_elementwise(grads, *a, |k| gd[k]),
            Op::Bce { p, targets, eps } => {
                let q = self.value(*p).data();
                let n = T::of(targets.len() as f64);
                self.acc_elementwise(grads, *p, |k| {
                    let t = targets[k];
                    -gd[0] * (t / (q[k] + *eps) - (T::one() - t) / (T::one() - q[k] + *eps)) / n
                });
            }
        }
    }
}
