use std::collections::HashMap;

use super::ops::{
    gelu_grad_scalar, gelu_scalar, matmul_acc, matmul_nt_acc, matmul_tn_acc, normalize_rows,
    softmax_rows,
};
use super::{lit, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, s: T },
    Gather { table: Var, ids: Vec<usize> },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Gelu { x: Var },
    MulConst { x: Var, factor: Vec<T> },
    MeanRows { x: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records primitive applications in execution order for reverse-mode
/// differentiation. Every input of a node has a smaller index than the node.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    bound: HashMap<usize, Var>,
    checked: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
            checked: false,
        }
    }

    /// A tape that fails any operation producing NaN or infinity.
    pub fn checked() -> Self {
        Tape {
            checked: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Leaf registered once per `key`; later calls return the same handle.
    pub fn bind(&mut self, key: usize, make: impl FnOnce() -> Tensor<T>) -> Var {
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.leaf(make());
        self.bound.insert(key, v);
        v
    }

    pub fn bound(&self, key: usize) -> Option<Var> {
        self.bound.get(&key).copied()
    }

    fn matrix_dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// `x W + b` for `x[n, k]`, `W[k, m]`, `b[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, k) = self.matrix_dims(x);
        let ws = self.shape(w);
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::shape("linear", self.shape(x), ws));
        }
        let m = ws[1];
        let mut out = vec![T::zero(); n * m];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != m {
                return Err(Error::shape("linear bias", ws, bv.shape()));
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv.data());
            }
        }
        matmul_acc(self.value(x).data(), self.value(w).data(), &mut out, n, k, m);
        let shape = out_shape(self.shape(x), m);
        self.push("linear", Tensor::new(shape, out)?, Op::Linear { x, w, b })
    }

    /// `a[n, k] * b[k, m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims(a);
        let (k2, m) = self.matrix_dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); n * m];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        self.push("matmul", Tensor::new(vec![n, m], out)?, Op::MatMul { a, b })
    }

    /// `a[n, k] * b[m, k]^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims(a);
        let (m, k2) = self.matrix_dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); n * m];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        self.push("matmul_nt", Tensor::new(vec![n, m], out)?, Op::MatMulNt { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", t, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * s).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("scale", t, Op::Scale { x, s })
    }

    /// Row lookup `table[ids[i], :]`; the product of a one-hot matrix with `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, e) = self.matrix_dims(table);
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::invalid(format!(
                    "row index {id} out of range for table with {v} rows"
                )));
            }
            out.extend_from_slice(src.row(id));
        }
        let t = Tensor::new(vec![ids.len(), e], out)?;
        self.push("gather_rows", t, Op::Gather { table, ids: ids.to_vec() })
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.matrix_dims(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            if self.matrix_dims(p).0 != n {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            total += self.matrix_dims(p).1;
        }
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![n, total], out)?;
        self.push("concat_cols", t, Op::ConcatCols { parts: parts.to_vec() })
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.matrix_dims(parts[0]).1;
        let mut out = Vec::new();
        for &p in parts {
            if self.matrix_dims(p).1 != c {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / c;
        let t = Tensor::new(vec![rows, c], out)?;
        self.push("concat_rows", t, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.matrix_dims(x);
        if start + len > c {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![n, len], out)?;
        self.push("slice_cols", t, Op::SliceCols { x, start })
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims(x);
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::shape("select_rows", self.shape(x), &[r]));
            }
            out.extend_from_slice(src.row(r));
        }
        let t = Tensor::new(vec![rows.len(), c], out)?;
        self.push("select_rows", t, Op::SelectRows { x, rows: rows.to_vec() })
    }

    /// Softmax over the last axis. Columns with `mask[j] == false` receive
    /// probability zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let out = softmax_rows(xv.data(), xv.cols(), mask)?;
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("softmax", t, Op::Softmax { x })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let h = xv.cols();
        if h == 0 {
            return Err(Error::invalid("layer_norm over an empty hidden axis"));
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.numel() != h || bv.numel() != h {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let (xhat, inv_std) = normalize_rows(xv.data(), h, lit(eps));
        let mut out = xhat.clone();
        for row in out.chunks_mut(h) {
            for ((o, &g), &b) in row.iter_mut().zip(gv.data()).zip(bv.data()) {
                *o = *o * g + b;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("layer_norm", t, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_scalar(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("gelu", t, Op::Gelu { x })
    }

    /// Elementwise product with a constant (non-differentiated) factor.
    pub fn mul_const(&mut self, x: Var, factor: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if factor.len() != xv.numel() {
            return Err(Error::shape("mul_const", xv.shape(), &[factor.len()]));
        }
        let data = xv.data().iter().zip(&factor).map(|(&a, &b)| a * b).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("mul_const", t, Op::MulConst { x, factor })
    }

    /// Mean over the listed rows, as a `[1, cols]` matrix.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims(x);
        if rows.is_empty() {
            return Err(Error::invalid("mean over zero rows"));
        }
        let src = self.value(x);
        let mut out = vec![T::zero(); c];
        for &r in rows {
            if r >= n {
                return Err(Error::shape("mean_rows", src.shape(), &[r]));
            }
            for (o, &v) in out.iter_mut().zip(src.row(r)) {
                *o += v;
            }
        }
        let inv = T::one() / lit(rows.len() as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let t = Tensor::new(vec![1, c], out)?;
        self.push("mean_rows", t, Op::MeanRows { x, rows: rows.to_vec() })
    }

    /// `-sum_n log softmax(logits_n)[label_n]`, a `[1]` tensor.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", lv.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        let probs = softmax_rows(lv.data(), c, None)?;
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[label];
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        )
    }

    /// Reverse sweep from a scalar `loss`, seeded with d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let len = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, k) = self.matrix_dims(*x);
                let m = node.value.cols();
                matmul_nt_acc(g, self.value(*w).data(), self.slot(grads, *x), n, m, k);
                matmul_tn_acc(self.value(*x).data(), g, self.slot(grads, *w), n, k, m);
                if let Some(b) = b {
                    let gb = self.slot(grads, *b);
                    for row in g.chunks(m) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (n, k) = self.matrix_dims(*a);
                let m = node.value.cols();
                matmul_nt_acc(g, self.value(*b).data(), self.slot(grads, *a), n, m, k);
                matmul_tn_acc(self.value(*a).data(), g, self.slot(grads, *b), n, k, m);
            }
            Op::MatMulNt { a, b } => {
                let (n, k) = self.matrix_dims(*a);
                let m = node.value.cols();
                // C = A B^T: dA = G B, dB = G^T A
                matmul_acc(g, self.value(*b).data(), self.slot(grads, *a), n, m, k);
                matmul_tn_acc(g, self.value(*a).data(), self.slot(grads, *b), n, m, k);
            }
            Op::Add { a, b } => {
                add_into(self.slot(grads, *a), g);
                add_into(self.slot(grads, *b), g);
            }
            Op::Scale { x, s } => {
                for (o, &v) in self.slot(grads, *x).iter_mut().zip(g) {
                    *o += v * *s;
                }
            }
            Op::Gather { table, ids } => {
                let e = node.value.cols();
                let gt = self.slot(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * e..(id + 1) * e], &g[r * e..(r + 1) * e]);
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (n, c) = self.matrix_dims(p);
                    let gp = self.slot(grads, p);
                    for r in 0..n {
                        let src = &g[r * total + offset..r * total + offset + c];
                        add_into(&mut gp[r * c..(r + 1) * c], src);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    add_into(self.slot(grads, p), &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (n, c) = self.matrix_dims(*x);
                let len = node.value.cols();
                let gx = self.slot(grads, *x);
                for r in 0..n {
                    add_into(&mut gx[r * c + start..r * c + start + len], &g[r * len..(r + 1) * len]);
                }
            }
            Op::SelectRows { x, rows } => {
                let c = node.value.cols();
                let gx = self.slot(grads, *x);
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut gx[r * c..(r + 1) * c], &g[i * c..(i + 1) * c]);
                }
            }
            Op::Softmax { x } => {
                let c = node.value.cols();
                let gx = self.slot(grads, *x);
                for ((y, gy), out) in node
                    .value
                    .data()
                    .chunks(c)
                    .zip(g.chunks(c))
                    .zip(gx.chunks_mut(c))
                {
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for ((o, &yj), &gj) in out.iter_mut().zip(y).zip(gy) {
                        *o += yj * (gj - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let h = node.value.cols();
                let hn = lit::<T>(h as f64);
                let gain_v = self.value(*gain).data();
                {
                    let gg = self.slot(grads, *gain);
                    for (gr, xr) in g.chunks(h).zip(xhat.chunks(h)) {
                        for ((o, &a), &b) in gg.iter_mut().zip(gr).zip(xr) {
                            *o += a * b;
                        }
                    }
                }
                {
                    let gb = self.slot(grads, *bias);
                    for gr in g.chunks(h) {
                        add_into(gb, gr);
                    }
                }
                let gx = self.slot(grads, *x);
                for (r, ((gr, xr), out)) in g
                    .chunks(h)
                    .zip(xhat.chunks(h))
                    .zip(gx.chunks_mut(h))
                    .enumerate()
                {
                    // dxhat = g * gain; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..h {
                        let d = gr[j] * gain_v[j];
                        sum_d += d;
                        sum_dx += d * xr[j];
                    }
                    let mean_d = sum_d / hn;
                    let mean_dx = sum_dx / hn;
                    for j in 0..h {
                        let d = gr[j] * gain_v[j];
                        out[j] += inv_std[r] * (d - mean_d - xr[j] * mean_dx);
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                for ((o, &v), &gv) in self.slot(grads, *x).iter_mut().zip(xv).zip(g) {
                    *o += gv * gelu_grad_scalar(v);
                }
            }
            Op::MulConst { x, factor } => {
                for ((o, &f), &gv) in self.slot(grads, *x).iter_mut().zip(factor).zip(g) {
                    *o += gv * f;
                }
            }
            Op::MeanRows { x, rows } => {
                let c = node.value.cols();
                let inv = T::one() / lit(rows.len() as f64);
                let gx = self.slot(grads, *x);
                for &r in rows {
                    for (o, &v) in gx[r * c..(r + 1) * c].iter_mut().zip(g) {
                        *o += v * inv;
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).cols();
                let gl = self.slot(grads, *logits);
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == label { T::one() } else { T::zero() };
                        gl[r * c + j] += g[0] * (probs[r * c + j] - target);
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn out_shape(input: &[usize], last: usize) -> Vec<usize> {
    let mut s = input.to_vec();
    if s.len() == 1 {
        s = vec![1, last];
    } else {
        *s.last_mut().unwrap() = last;
    }
    s
}

/// Gradients from one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        let shape = tape.value(v).shape().to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }
}
