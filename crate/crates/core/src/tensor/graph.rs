use super::kernels::{self, ConvDims};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Abs(Var),
    Relu(Var),
    Reshape(Var),
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, d_in: usize, d_out: usize },
    Conv1d { x: Var, kernel: Var, dims: ConvDims },
    Softmax(Var),
    CosineRows { a: Var, b: Var, dim: usize, eps: f64 },
    CosineScores { q: Var, keys: Var, rows: usize, heads: usize, slots: usize, dim: usize, eps: f64 },
    Concat { a: Var, b: Var, rows: usize, wa: usize, wb: usize },
    Mean { x: Var, outer: usize, len: usize, inner: usize },
    Narrow { x: Var, outer: usize, len: usize, start: usize, width: usize, inner: usize },
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<F> },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

/// Recording of the operations of one forward pass.
///
/// Nodes are stored in recording order, which is also a topological order.
/// [`Graph::backward`] visits them once each, newest first.
#[derive(Debug)]
pub struct Graph<F = f32> {
    nodes: Vec<Node<F>>,
}

impl<F> Default for Graph<F> {
    fn default() -> Self {
        Graph { nodes: Vec::new() }
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Gradient buffer of an input node, or None if it carries no gradient.
fn grad_slot<'a, F: Element>(
    nodes: &[Node<F>],
    grads: &'a mut [Option<Vec<F>>],
    v: Var,
) -> Option<&'a mut Vec<F>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); node.value.numel()]))
}

fn add_into<F: Element>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}

fn leading_shape(shape: &[usize]) -> Vec<usize> {
    let lead = shape[..shape.len() - 1].to_vec();
    if lead.is_empty() {
        vec![1]
    } else {
        lead
    }
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` cut off from the graph: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if it took part in a backward pass.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn unary(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(out, op, &[x])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (F::of(scale), F::of(shift));
        self.unary(x, Op::Affine { x, scale }, |v| s * v + t)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(F::zero()))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    /// `x·W + b` over the last axis of `x`; leading axes are kept.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let d_in = *sx.last().expect("non-empty shape");
        if sw.len() != 2 || sw[0] != d_in {
            return Err(mismatch("linear", &sx, &sw));
        }
        let d_out = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(mismatch("linear(bias)", &sw, self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / d_in;
        let mut data = kernels::matmul(self.value(x).data(), self.value(w).data(), rows, d_in, d_out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in data.chunks_mut(d_out) {
                add_into(row, bias);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = d_out;
        let out = Tensor::new(shape, data)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Linear { x, w, b, rows, d_in, d_out }, &inputs))
    }

    /// Same-length dilated 1-D convolution along time.
    ///
    /// `x` is `[T, C_in]` or `[B, T, C_in]`, `kernel` is `[k, C_in, C_out]` with odd
    /// `k`. Frames outside the sequence are zeros; tap `j` reads frame
    /// `t + (j - (k-1)/2) * dilation`.
    pub fn conv1d_dilated(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sk.len() != 3 {
            return Err(mismatch("conv1d", &sx, &sk));
        }
        let taps = sk[0];
        if taps % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv1d kernel size must be odd for a centered tap, got {taps}"
            )));
        }
        if dilation == 0 {
            return Err(Error::InvalidArgument("conv1d dilation must be >= 1".into()));
        }
        let (batch, time, c_in) = match sx.as_slice() {
            [t, c] => (1, *t, *c),
            [b, t, c] => (*b, *t, *c),
            _ => return Err(mismatch("conv1d", &sx, &sk)),
        };
        if c_in != sk[1] {
            return Err(mismatch("conv1d", &sx, &sk));
        }
        let dims = ConvDims {
            batch,
            time,
            c_in,
            c_out: sk[2],
            taps,
            dilation,
        };
        let data = kernels::conv1d(self.value(x).data(), self.value(kernel).data(), dims);
        let mut shape = sx;
        *shape.last_mut().unwrap() = dims.c_out;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Conv1d { x, kernel, dims }, &[x, kernel]))
    }

    // ---- normalisation and similarity ---------------------------------------

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = *tx.shape().last().unwrap();
        let mut data = vec![F::zero(); tx.numel()];
        let mut exps = vec![0.0f64; n];
        for (row, out) in tx.data().chunks(n).zip(data.chunks_mut(n)) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.f64()));
            let mut denom = 0.0f64;
            for (e, &v) in exps.iter_mut().zip(row) {
                *e = (v.f64() - max).exp();
                denom += *e;
            }
            for (o, e) in out.iter_mut().zip(&exps) {
                *o = F::of(e / denom);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Cosine similarity of matching rows along the last axis:
    /// `a·b / (max(|a|, eps) · max(|b|, eps))`. Output drops the last axis
    /// (a single pair gives shape `[1]`).
    pub fn cosine_sim(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("cosine_sim", ta.shape(), tb.shape()));
        }
        let dim = *ta.shape().last().unwrap();
        let data = ta
            .data()
            .chunks(dim)
            .zip(tb.data().chunks(dim))
            .map(|(x, y)| {
                let na = kernels::norm(x).max(eps);
                let nb = kernels::norm(y).max(eps);
                F::of(kernels::dot(x, y) / (na * nb))
            })
            .collect();
        let out = Tensor::new(leading_shape(ta.shape()), data)?;
        Ok(self.push(out, Op::CosineRows { a, b, dim, eps }, &[a, b]))
    }

    /// Per-head cosine similarity of every query against every key slot.
    ///
    /// `queries` is `[R, h, D]`, `keys` is `[h, N, D]`; output is `[R, h, N]`.
    pub fn cosine_scores(&mut self, queries: Var, keys: Var, eps: f64) -> Result<Var> {
        let (sq, sk) = (self.shape(queries).to_vec(), self.shape(keys).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sq[1] != sk[0] || sq[2] != sk[2] {
            return Err(mismatch("cosine_scores", &sq, &sk));
        }
        let (rows, heads, dim, slots) = (sq[0], sq[1], sq[2], sk[1]);
        let q = self.value(queries).data();
        let k = self.value(keys).data();
        let key_norms: Vec<f64> = k.chunks(dim).map(|r| kernels::norm(r).max(eps)).collect();
        let mut data = vec![F::zero(); rows * heads * slots];
        for r in 0..rows {
            for h in 0..heads {
                let qv = &q[(r * heads + h) * dim..][..dim];
                let nq = kernels::norm(qv).max(eps);
                for n in 0..slots {
                    let kv = &k[(h * slots + n) * dim..][..dim];
                    data[(r * heads + h) * slots + n] =
                        F::of(kernels::dot(qv, kv) / (nq * key_norms[h * slots + n]));
                }
            }
        }
        let out = Tensor::new(vec![rows, heads, slots], data)?;
        let op = Op::CosineScores {
            q: queries,
            keys,
            rows,
            heads,
            slots,
            dim,
            eps,
        };
        Ok(self.push(out, op, &[queries, keys]))
    }

    // ---- shape and reductions -------------------------------------------------

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(mismatch("concat_last", &sa, &sb));
        }
        let (wa, wb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = self.value(a).numel() / wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(rows * (wa + wb));
        for r in 0..rows {
            data.extend_from_slice(&da[r * wa..(r + 1) * wa]);
            data.extend_from_slice(&db[r * wb..(r + 1) * wb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = wa + wb;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat { a, b, rows, wa, wb }, &[a, b]))
    }

    fn split_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::InvalidArgument(format!(
                "{op}: axis {axis} out of range for shape {s:?}"
            )));
        }
        let outer = s[..axis].iter().product();
        let inner = s[axis + 1..].iter().product();
        Ok((outer, s[axis], inner))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.split_axis(x, axis, "mean_axis")?;
        let src = self.value(x).data();
        let mut data = vec![F::zero(); outer * inner];
        let mut acc = vec![0.0f64; inner];
        for o in 0..outer {
            acc.fill(0.0);
            for l in 0..len {
                let row = &src[(o * len + l) * inner..][..inner];
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v.f64());
            }
            for (d, a) in data[o * inner..][..inner].iter_mut().zip(&acc) {
                *d = F::of(a / len as f64);
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Mean { x, outer, len, inner }, &[x]))
    }

    /// Slice `[start, start + width)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, width: usize) -> Result<Var> {
        let (outer, len, inner) = self.split_axis(x, axis, "narrow")?;
        if width == 0 || start + width > len {
            return Err(Error::InvalidArgument(format!(
                "narrow: window [{start}, {}) outside axis of length {len}",
                start + width
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * len + start) * inner..(o * len + start + width) * inner]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = width;
        let out = Tensor::new(shape, data)?;
        let op = Op::Narrow {
            x,
            outer,
            len,
            start,
            width,
            inner,
        };
        Ok(self.push(out, op, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        self.push(Tensor::scalar(F::of(s)), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean cross-entropy of `logits` (`[C]` or `[B, C]`) against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let (rows, classes) = match s.as_slice() {
            [c] => (1, *c),
            [b, c] => (*b, *c),
            _ => return Err(mismatch("cross_entropy", &s, &[labels.len()])),
        };
        if labels.len() != rows {
            return Err(mismatch("cross_entropy", &s, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let src = self.value(logits).data();
        let mut probs = vec![F::zero(); rows * classes];
        let mut total = 0.0f64;
        for (r, &label) in labels.iter().enumerate() {
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.f64()));
            let denom: f64 = row.iter().map(|&v| (v.f64() - max).exp()).sum();
            let lse = max + denom.ln();
            total += lse - row[label].f64();
            for (p, &v) in probs[r * classes..].iter_mut().zip(row) {
                *p = F::of((v.f64() - lse).exp());
            }
        }
        let out = Tensor::scalar(F::of(total / rows as f64));
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(out, op, &[logits]))
    }

    // ---- backward ------------------------------------------------------------------

    /// Accumulate `d loss / d node` into every node that depends on a
    /// gradient-carrying leaf. Repeated calls add up until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape(loss).to_vec(),
                reason: "backward needs a scalar loss".into(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match &mut node.grad {
                Some(acc) => add_into(acc, &g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$d:ident| $body:block) => {
                if let Some($d) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_grad!(*a, |d| { add_into(d, g) });
                with_grad!(*b, |d| { add_into(d, g) });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                with_grad!(*a, |d| {
                    for ((x, &gy), &bv) in d.iter_mut().zip(g).zip(vb) {
                        *x += gy * bv;
                    }
                });
                with_grad!(*b, |d| {
                    for ((x, &gy), &av) in d.iter_mut().zip(g).zip(va) {
                        *x += gy * av;
                    }
                });
            }
            Op::Affine { x, scale } => {
                let s = F::of(*scale);
                with_grad!(*x, |d| { d.iter_mut().zip(g).for_each(|(a, &gy)| *a += s * gy) });
            }
            Op::Abs(x) => {
                let vx = val(*x);
                with_grad!(*x, |d| {
                    for ((a, &gy), &xv) in d.iter_mut().zip(g).zip(vx) {
                        if xv > F::zero() {
                            *a += gy;
                        } else if xv < F::zero() {
                            *a -= gy;
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x);
                with_grad!(*x, |d| {
                    for ((a, &gy), &xv) in d.iter_mut().zip(g).zip(vx) {
                        if xv > F::zero() {
                            *a += gy;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                with_grad!(*x, |d| { add_into(d, g) });
            }
            Op::Matmul { a, b, m, k, n } => {
                let (va, vb) = (val(*a), val(*b));
                with_grad!(*a, |d| { kernels::matmul_grad_lhs(g, vb, *m, *k, *n, d) });
                with_grad!(*b, |d| { kernels::matmul_grad_rhs(va, g, *m, *k, *n, d) });
            }
            Op::Linear { x, w, b, rows, d_in, d_out } => {
                let (vx, vw) = (val(*x), val(*w));
                with_grad!(*x, |d| { kernels::matmul_grad_lhs(g, vw, *rows, *d_in, *d_out, d) });
                with_grad!(*w, |d| { kernels::matmul_grad_rhs(vx, g, *rows, *d_in, *d_out, d) });
                if let Some(b) = b {
                    with_grad!(*b, |d| {
                        let mut acc = vec![0.0f64; *d_out];
                        for row in g.chunks(*d_out) {
                            acc.iter_mut().zip(row).for_each(|(s, v)| *s += v.f64());
                        }
                        d.iter_mut().zip(&acc).for_each(|(o, s)| *o += F::of(*s));
                    });
                }
            }
            Op::Conv1d { x, kernel, dims } => {
                let (vx, vk) = (val(*x), val(*kernel));
                with_grad!(*x, |d| { kernels::conv1d_grad_input(g, vk, *dims, d) });
                with_grad!(*kernel, |d| { kernels::conv1d_grad_kernel(vx, g, *dims, d) });
            }
            Op::Softmax(x) => {
                let n = *nodes[i].value.shape().last().unwrap();
                with_grad!(*x, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let inner = kernels::dot(grow, yrow);
                        for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += F::of(yv.f64() * (gv.f64() - inner));
                        }
                    }
                });
            }
            Op::CosineRows { a, b, dim, eps } => {
                let (va, vb) = (val(*a), val(*b));
                let (dim, eps) = (*dim, *eps);
                let rows = va.len() / dim;
                let mut ga = vec![F::zero(); va.len()];
                let mut gb = vec![F::zero(); vb.len()];
                for r in 0..rows {
                    let (x, y) = (&va[r * dim..][..dim], &vb[r * dim..][..dim]);
                    let (rx, ry) = (kernels::norm(x), kernels::norm(y));
                    let (nx, ny) = (rx.max(eps), ry.max(eps));
                    let c = kernels::dot(x, y) / (nx * ny);
                    let gr = g[r].f64();
                    let cx = if rx > eps { c / (nx * nx) } else { 0.0 };
                    let cy = if ry > eps { c / (ny * ny) } else { 0.0 };
                    for j in 0..dim {
                        let (xj, yj) = (x[j].f64(), y[j].f64());
                        ga[r * dim + j] = F::of(gr * (yj / (nx * ny) - cx * xj));
                        gb[r * dim + j] = F::of(gr * (xj / (nx * ny) - cy * yj));
                    }
                }
                with_grad!(*a, |d| { add_into(d, &ga) });
                with_grad!(*b, |d| { add_into(d, &gb) });
            }
            Op::CosineScores { q, keys, rows, heads, slots, dim, eps } => {
                let (vq, vk) = (val(*q), val(*keys));
                let (rows, heads, slots, dim, eps) = (*rows, *heads, *slots, *dim, *eps);
                let key_raw: Vec<f64> = vk.chunks(dim).map(kernels::norm).collect();
                let mut dq = vec![F::zero(); vq.len()];
                let mut dk = vec![0.0f64; vk.len()];
                let mut acc = vec![0.0f64; dim];
                for r in 0..rows {
                    for h in 0..heads {
                        let qv = &vq[(r * heads + h) * dim..][..dim];
                        let rq = kernels::norm(qv);
                        let nq = rq.max(eps);
                        acc.fill(0.0);
                        let mut gs = 0.0f64;
                        for n in 0..slots {
                            let idx = (r * heads + h) * slots + n;
                            let gv = g[idx].f64();
                            if gv == 0.0 {
                                continue;
                            }
                            let kidx = h * slots + n;
                            let nk = key_raw[kidx].max(eps);
                            let kv = &vk[kidx * dim..][..dim];
                            let s = kernels::dot(qv, kv) / (nq * nk);
                            gs += gv * s;
                            let ck = if key_raw[kidx] > eps { gv * s / (nk * nk) } else { 0.0 };
                            let cq = gv / (nq * nk);
                            let dkrow = &mut dk[kidx * dim..][..dim];
                            for j in 0..dim {
                                let kj = kv[j].f64();
                                acc[j] += gv * kj / nk;
                                dkrow[j] += cq * qv[j].f64() - ck * kj;
                            }
                        }
                        let cq = if rq > eps { gs / (nq * nq) } else { 0.0 };
                        let dqrow = &mut dq[(r * heads + h) * dim..][..dim];
                        for j in 0..dim {
                            dqrow[j] = F::of(acc[j] / nq - cq * qv[j].f64());
                        }
                    }
                }
                with_grad!(*q, |d| { add_into(d, &dq) });
                with_grad!(*keys, |d| { d.iter_mut().zip(&dk).for_each(|(o, v)| *o += F::of(*v)) });
            }
            Op::Concat { a, b, rows, wa, wb } => {
                let w = wa + wb;
                with_grad!(*a, |d| {
                    for r in 0..*rows {
                        add_into(&mut d[r * wa..(r + 1) * wa], &g[r * w..r * w + wa]);
                    }
                });
                with_grad!(*b, |d| {
                    for r in 0..*rows {
                        add_into(&mut d[r * wb..(r + 1) * wb], &g[r * w + wa..(r + 1) * w]);
                    }
                });
            }
            Op::Mean { x, outer, len, inner } => {
                let inv = F::of(1.0 / *len as f64);
                with_grad!(*x, |d| {
                    for o in 0..*outer {
                        let grow = &g[o * inner..(o + 1) * inner];
                        for l in 0..*len {
                            let drow = &mut d[(o * len + l) * inner..][..*inner];
                            drow.iter_mut().zip(grow).for_each(|(a, &v)| *a += v * inv);
                        }
                    }
                });
            }
            Op::Narrow { x, outer, len, start, width, inner } => {
                with_grad!(*x, |d| {
                    for o in 0..*outer {
                        let dst = &mut d[(o * len + start) * inner..(o * len + start + width) * inner];
                        add_into(dst, &g[o * width * inner..(o + 1) * width * inner]);
                    }
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |d| { d.iter_mut().for_each(|a| *a += g[0]) });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let rows = labels.len();
                let classes = probs.len() / rows;
                let scale = g[0] / F::of(rows as f64);
                with_grad!(*logits, |d| {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { F::one() } else { F::zero() };
                            d[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                });
            }
        }
    }
}
