// Wengert-style tape: every op appends a node holding its output value and
// the ids of its inputs; `backward` replays the list in reverse once.

use super::{
    gelu, gelu_grad, matmul_at_raw, matmul_bt_raw, matmul_dims, matmul_raw, transpose_raw, Real,
    Result, Tensor, TensorError,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Bias entries at or below this are treated as masked by `softmax`.
const MASKED_BIAS: f64 = -1e8;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, T),
    MulConst(Var, Vec<T>),
    AddConst(Var),
    Softmax(Var),
    Gelu(Var),
    Columns(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    NormalizeRows(Var),
    RowCosine(Var, Var),
    Clamp(Var, T, T),
    TopKMean(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Focal {
        input: Var,
        target: Vec<bool>,
        alpha: T,
        gamma: T,
        eps: T,
    },
    Dice {
        input: Var,
        target: Vec<bool>,
        eps: T,
    },
    Bce {
        input: Var,
        label: bool,
        eps: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Affine(..) => "affine",
            Op::MulConst(..) => "mul_const",
            Op::AddConst(..) => "add_const",
            Op::Softmax(..) => "softmax",
            Op::Gelu(..) => "gelu",
            Op::Columns(..) => "columns",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::NormalizeRows(..) => "normalize_rows",
            Op::RowCosine(..) => "row_cosine",
            Op::Clamp(..) => "clamp",
            Op::TopKMean(..) => "topk_mean",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Focal { .. } => "focal_loss",
            Op::Dice { .. } => "dice_loss",
            Op::Bce { .. } => "bce_loss",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    masked_rows: usize,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            masked_rows: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Softmax rows whose every bias entry was masked.
    pub fn masked_row_warnings(&self) -> usize {
        self.masked_rows
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims("matmul", self.value(a).shape(), self.value(b).shape())?;
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, data)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a·bᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::Shape {
                op: "matmul_bt",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let data = matmul_bt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, data)?, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        self.push(t, Op::Transpose(a), &[a])
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        let c = va.cols();
        if vr.len() != c {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: va.shape().to_vec(),
                rhs: vr.shape().to_vec(),
            });
        }
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, &b) in chunk.iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, Op::AddRow(a, row), &[a, row])
    }

    /// `scale·a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, b) = (T::of(scale), T::of(shift));
        let va = self.value(a);
        let data = va.data().iter().map(|&x| s * x + b).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, Op::Affine(a, s), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    /// Element-wise product with a constant buffer of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var> {
        let va = self.value(a);
        if c.len() != va.len() {
            return Err(TensorError::Shape {
                op: "mul_const",
                lhs: va.shape().to_vec(),
                rhs: vec![c.len()],
            });
        }
        let data = va.data().iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, Op::MulConst(a, c), &[a])
    }

    /// Element-wise sum with a constant buffer of the same shape.
    pub fn add_const(&mut self, a: Var, c: &[T]) -> Result<Var> {
        let va = self.value(a);
        if c.len() != va.len() {
            return Err(TensorError::Shape {
                op: "add_const",
                lhs: va.shape().to_vec(),
                rhs: vec![c.len()],
            });
        }
        let data = va.data().iter().zip(c).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, Op::AddConst(a), &[a])
    }

    /// Softmax over the last axis of `x + bias`, shifted by the row max.
    ///
    /// Bias is a constant; rows whose bias is fully masked come out uniform
    /// and bump [`Tape::masked_row_warnings`].
    pub fn softmax(&mut self, x: Var, bias: Option<&Tensor<T>>) -> Result<Var> {
        let vx = self.value(x);
        if let Some(b) = bias {
            if b.shape() != vx.shape() {
                return Err(TensorError::Shape {
                    op: "softmax",
                    lhs: vx.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let c = vx.cols();
        let mut data = vec![T::zero(); vx.len()];
        let mut masked = 0;
        let threshold = T::of(MASKED_BIAS);
        for r in 0..vx.rows() {
            let xs = vx.row(r);
            let out = &mut data[r * c..(r + 1) * c];
            for (j, o) in out.iter_mut().enumerate() {
                *o = xs[j] + bias.map_or(T::zero(), |b| b.row(r)[j]);
            }
            if let Some(b) = bias {
                if b.row(r).iter().all(|&v| v <= threshold) {
                    masked += 1;
                }
            }
            let mx = out.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for o in out.iter_mut() {
                *o = (*o - mx).exp();
                s += *o;
            }
            for o in out.iter_mut() {
                *o = *o / s;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.masked_rows += masked;
        self.push(t, Op::Softmax(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(t, Op::Gelu(x), &[x])
    }

    /// Column block `[start, start+len)` of a matrix.
    pub fn columns(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        if vx.shape().len() != 2 || start + len > c {
            return Err(TensorError::Contract(format!(
                "columns {start}..{} out of range for shape {:?}",
                start + len,
                vx.shape()
            )));
        }
        let mut data = Vec::with_capacity(vx.rows() * len);
        for r in 0..vx.rows() {
            data.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let t = Tensor::matrix(vx.rows(), len, data)?;
        self.push(t, Op::Columns(x, start), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, data)?;
        self.push(t, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= vx.rows()) {
            return Err(TensorError::Contract(format!(
                "row {bad} out of range for {} rows",
                vx.rows()
            )));
        }
        let t = vx.select_rows(idx);
        self.push(t, Op::GatherRows(x, idx.to_vec()), &[x])
    }

    /// Scales each row to unit norm; rows with squared norm below 1e-12 map
    /// to zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let mut out = vx.clone();
        for r in 0..vx.rows() {
            let n = row_norm(vx.row(r));
            let row = out.row_mut(r);
            match n {
                Some(n) => row.iter_mut().for_each(|v| *v = *v / n),
                None => row.iter_mut().for_each(|v| *v = T::zero()),
            }
        }
        self.push(out, Op::NormalizeRows(x), &[x])
    }

    /// Row-wise cosine similarity of two same-shape matrices.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_cosine", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = (0..va.rows())
            .map(|r| super::cosine(va.row(r), vb.row(r)))
            .collect();
        self.push(Tensor::vector(data), Op::RowCosine(a, b), &[a, b])
    }

    /// Gradient passes through where `lo <= x <= hi`, zero elsewhere.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (l, h) = (T::of(lo), T::of(hi));
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.max(l).min(h)).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(t, Op::Clamp(x, l, h), &[x])
    }

    /// Mean of the `k` largest entries (ties resolved toward lower index).
    pub fn topk_mean(&mut self, x: Var, k: usize) -> Result<Var> {
        let vx = self.value(x);
        if k == 0 || k > vx.len() {
            return Err(TensorError::Contract(format!(
                "top-{k} of {} entries",
                vx.len()
            )));
        }
        let idx = top_k_indices(vx.data(), k);
        let s: T = idx.iter().map(|&i| vx.data()[i]).sum();
        let t = Tensor::scalar(s / T::of(k as f64));
        self.push(t, Op::TopKMean(x, idx), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.is_empty() {
            return Err(TensorError::Contract("mean of an empty tensor".into()));
        }
        let s: T = vx.data().iter().copied().sum();
        let t = Tensor::scalar(s / T::of(vx.len() as f64));
        self.push(t, Op::Mean(x), &[x])
    }

    /// Mean focal loss of probabilities `a` against binary `target`.
    pub fn focal_loss(
        &mut self,
        a: Var,
        target: &[bool],
        alpha: f64,
        gamma: f64,
        eps: f64,
    ) -> Result<Var> {
        let va = self.value(a);
        if va.len() != target.len() || target.is_empty() {
            return Err(TensorError::Shape {
                op: "focal_loss",
                lhs: va.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let (alpha, gamma, eps) = (T::of(alpha), T::of(gamma), T::of(eps));
        let mut total = T::zero();
        for (&v, &y) in va.data().iter().zip(target) {
            let (pt, at) = focal_terms(v, y, alpha);
            let pc = pt.max(eps).min(T::one() - eps);
            total += -at * (T::one() - pc).powf(gamma) * pc.ln();
        }
        let t = Tensor::scalar(total / T::of(target.len() as f64));
        self.push(
            t,
            Op::Focal {
                input: a,
                target: target.to_vec(),
                alpha,
                gamma,
                eps,
            },
            &[a],
        )
    }

    /// `1 - (2·Σa·m + eps) / (Σa + Σm + eps)`.
    pub fn dice_loss(&mut self, a: Var, target: &[bool], eps: f64) -> Result<Var> {
        let va = self.value(a);
        if va.len() != target.len() {
            return Err(TensorError::Shape {
                op: "dice_loss",
                lhs: va.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let eps = T::of(eps);
        let (inter, denom) = dice_sums(va.data(), target, eps);
        let t = Tensor::scalar(T::one() - (T::of(2.0) * inter + eps) / denom);
        self.push(
            t,
            Op::Dice {
                input: a,
                target: target.to_vec(),
                eps,
            },
            &[a],
        )
    }

    /// Binary cross-entropy of a scalar probability.
    pub fn bce_loss(&mut self, p: Var, label: bool, eps: f64) -> Result<Var> {
        let vp = self.value(p);
        if vp.len() != 1 {
            return Err(TensorError::Contract(format!(
                "bce expects a scalar, got shape {:?}",
                vp.shape()
            )));
        }
        let eps = T::of(eps);
        let pc = vp.data()[0].max(eps).min(T::one() - eps);
        let l = if label { -pc.ln() } else { -(T::one() - pc).ln() };
        self.push(
            Tensor::scalar(l),
            Op::Bce {
                input: p,
                label,
                eps,
            },
            &[p],
        )
    }

    /// Reverse pass from a scalar node. Gradients from a previous call are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        if grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, f: &dyn Fn(&mut [T])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                acc(*a, &|buf| add_into(buf, &matmul_bt_raw(g, vb.data(), m, n, k)));
                acc(*b, &|buf| add_into(buf, &matmul_at_raw(va.data(), g, m, k, n)));
            }
            Op::MatMulBt(a, b) => {
                // c = a·bᵀ: da = g·b, db = gᵀ·a
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
                acc(*a, &|buf| add_into(buf, &matmul_raw(g, vb.data(), m, n, k)));
                acc(*b, &|buf| add_into(buf, &matmul_at_raw(g, va.data(), m, n, k)));
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                acc(*a, &|buf| add_into(buf, &transpose_raw(g, m, n)));
            }
            Op::Add(a, b) => {
                acc(*a, &|buf| add_into(buf, g));
                acc(*b, &|buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|buf| add_into(buf, g));
                acc(*b, &|buf| buf.iter_mut().zip(g).for_each(|(x, &d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|buf| {
                    for ((x, &d), &y) in buf.iter_mut().zip(g).zip(vb) {
                        *x += d * y;
                    }
                });
                acc(*b, &|buf| {
                    for ((x, &d), &y) in buf.iter_mut().zip(g).zip(va) {
                        *x += d * y;
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &|buf| add_into(buf, g));
                let c = out.cols();
                acc(*row, &|buf| {
                    for chunk in g.chunks(c) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::Affine(a, s) => {
                acc(*a, &|buf| buf.iter_mut().zip(g).for_each(|(x, &d)| *x += *s * d));
            }
            Op::MulConst(a, c) => {
                acc(*a, &|buf| {
                    for ((x, &d), &k) in buf.iter_mut().zip(g).zip(c) {
                        *x += d * k;
                    }
                });
            }
            Op::AddConst(a) => acc(*a, &|buf| add_into(buf, g)),
            Op::Softmax(x) => {
                let c = out.cols();
                acc(*x, &|buf| {
                    for ((bx, gy), y) in buf.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c))
                    {
                        let s: T = gy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                        for ((b, &dy), &yy) in bx.iter_mut().zip(gy).zip(y) {
                            *b += yy * (dy - s);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                acc(*x, &|buf| {
                    for ((b, &d), &v) in buf.iter_mut().zip(g).zip(vx) {
                        *b += d * gelu_grad(v);
                    }
                });
            }
            Op::Columns(x, start) => {
                let (len, c) = (out.cols(), self.value(*x).cols());
                acc(*x, &|buf| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_into(&mut buf[r * c + start..r * c + start + len], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    acc(*p, &|buf| {
                        for (r, br) in buf.chunks_mut(w).enumerate() {
                            add_into(br, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::GatherRows(x, idx) => {
                let c = out.cols();
                acc(*x, &|buf| {
                    for (k, &r) in idx.iter().enumerate() {
                        add_into(&mut buf[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::NormalizeRows(x) => {
                let vx = self.value(*x);
                let c = vx.cols();
                acc(*x, &|buf| {
                    for r in 0..vx.rows() {
                        let Some(n) = row_norm(vx.row(r)) else { continue };
                        let y = out.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let yg: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((b, &d), &yy) in buf[r * c..(r + 1) * c].iter_mut().zip(gr).zip(y) {
                            *b += (d - yy * yg) / n;
                        }
                    }
                });
            }
            Op::RowCosine(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let c = va.cols();
                let eps = T::of(1e-12);
                let grad_of = |x: &Tensor<T>, y: &Tensor<T>, buf: &mut [T]| {
                    for r in 0..x.rows() {
                        let (xr, yr) = (x.row(r), y.row(r));
                        let (nx, ny) = (super::norm(xr), super::norm(yr));
                        if nx < eps || ny < eps {
                            continue;
                        }
                        let cs = out.data()[r];
                        let d = g[r];
                        for ((bv, &xv), &yv) in buf[r * c..(r + 1) * c].iter_mut().zip(xr).zip(yr) {
                            *bv += d * (yv / (nx * ny) - cs * xv / (nx * nx));
                        }
                    }
                };
                acc(*a, &|buf| grad_of(va, vb, buf));
                acc(*b, &|buf| grad_of(vb, va, buf));
            }
            Op::Clamp(x, lo, hi) => {
                let vx = self.value(*x).data();
                acc(*x, &|buf| {
                    for ((b, &d), &v) in buf.iter_mut().zip(g).zip(vx) {
                        if v >= *lo && v <= *hi {
                            *b += d;
                        }
                    }
                });
            }
            Op::TopKMean(x, idx) => {
                let share = g[0] / T::of(idx.len() as f64);
                acc(*x, &|buf| idx.iter().for_each(|&i| buf[i] += share));
            }
            Op::Sum(x) => acc(*x, &|buf| buf.iter_mut().for_each(|b| *b += g[0])),
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len() as f64);
                acc(*x, &|buf| buf.iter_mut().for_each(|b| *b += g[0] / n));
            }
            Op::Focal {
                input,
                target,
                alpha,
                gamma,
                eps,
            } => {
                let va = self.value(*input).data();
                let n = T::of(target.len() as f64);
                acc(*input, &|buf| {
                    for ((b, &v), &y) in buf.iter_mut().zip(va).zip(target) {
                        let (pt, at) = focal_terms(v, y, *alpha);
                        if pt < *eps || pt > T::one() - *eps {
                            continue;
                        }
                        let q = T::one() - pt;
                        let dl_dp =
                            at * (*gamma * q.powf(*gamma - T::one()) * pt.ln() - q.powf(*gamma) / pt);
                        let sign = if y { T::one() } else { -T::one() };
                        *b += g[0] * sign * dl_dp / n;
                    }
                });
            }
            Op::Dice { input, target, eps } => {
                let va = self.value(*input).data();
                let (inter, denom) = dice_sums(va, target, *eps);
                let two = T::of(2.0);
                acc(*input, &|buf| {
                    for (b, &y) in buf.iter_mut().zip(target) {
                        let m = if y { T::one() } else { T::zero() };
                        *b += g[0] * -(two * m * denom - (two * inter + *eps)) / (denom * denom);
                    }
                });
            }
            Op::Bce { input, label, eps } => {
                let p = self.value(*input).data()[0];
                if p >= *eps && p <= T::one() - *eps {
                    let d = if *label {
                        -T::one() / p
                    } else {
                        T::one() / (T::one() - p)
                    };
                    acc(*input, &|buf| buf[0] += g[0] * d);
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn row_norm<T: Real>(r: &[T]) -> Option<T> {
    let sq = super::dot(r, r);
    if sq < T::of(1e-12) {
        None
    } else {
        Some(sq.sqrt())
    }
}

/// `(p_t, alpha_t)` for one patch.
fn focal_terms<T: Real>(v: T, positive: bool, alpha: T) -> (T, T) {
    if positive {
        (v, alpha)
    } else {
        (T::one() - v, T::one() - alpha)
    }
}

fn dice_sums<T: Real>(a: &[T], target: &[bool], eps: T) -> (T, T) {
    let mut inter = T::zero();
    let mut sa = T::zero();
    let mut sm = T::zero();
    for (&v, &y) in a.iter().zip(target) {
        sa += v;
        if y {
            inter += v;
            sm += T::one();
        }
    }
    (inter, sa + sm + eps)
}

/// Indices of the `k` largest values, descending, ties to the lower index.
pub(crate) fn top_k_indices<T: Real>(v: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| {
        v[j].partial_cmp(&v[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_sum_gradient_is_input() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[&[1.0, 2.0, 3.0]]));
        let x = tape.constant(t(&[&[0.5], &[-1.0], &[2.0]]));
        let y = tape.matmul(w, x).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.5, -1.0, 2.0]);
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn squared_norm_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x, None).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }

        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let bias = Tensor::vector(vec![0.0, -1e9]);
        let y = tape.softmax(x, Some(&bias)).unwrap();
        let d = tape.value(y).data();
        assert!(d[0] > 1.0 - 1e-6 && d[1] < 1e-6);
        assert_eq!(tape.masked_row_warnings(), 0);

        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.softmax(x, None).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (k, &v) in tape.value(y).data().iter().enumerate() {
            assert!((v as f64 - ((k + 1) as f64).exp() / z).abs() < 1e-6);
        }
    }

    #[test]
    fn fully_masked_row_is_uniform_and_counted() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::vector(vec![0.3, -0.2, 1.0, 0.0]));
        let bias = Tensor::vector(vec![-1e9; 4]);
        let y = tape.softmax(x, Some(&bias)).unwrap();
        let s: f32 = tape.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
        assert_eq!(tape.masked_row_warnings(), 1);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::vector(vec![f32::MAX, f32::MAX]));
        assert!(matches!(
            tape.sum(x),
            Err(TensorError::NonFinite { op: "sum" })
        ));
    }

    #[test]
    fn focal_closed_form() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::vector(vec![0.5]));
        let l = tape.focal_loss(a, &[true], 0.25, 2.0, 1e-6).unwrap();
        let want = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((tape.value(l).data()[0] - want).abs() < 1e-12);
        assert!((want - 0.04332).abs() < 1e-5);
    }

    #[test]
    fn topk_ties_go_to_lower_index() {
        assert_eq!(top_k_indices(&[1.0f32, 3.0, 3.0, 2.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[5.0f32, 5.0, 5.0], 1), vec![0]);
    }
}
