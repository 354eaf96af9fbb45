//! A small reverse-mode automatic differentiation tape over dense row-major
//! matrices.
//!
//! Every model in the crate (encoder, language model, interface) records its
//! forward pass on a [`Graph`]. Parameters are bound as borrowed leaves so that
//! building a graph never copies weights; only leaves created with
//! [`Graph::param`] (and anything downstream of them) receive gradients.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-5;

/// Dense row-major matrix of 64-bit floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length does not match shape");
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`, with transposition expressed via strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    // a is m×k (or k×m when transposed), b is k×n (or n×k when transposed).
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: slice lengths are checked by the callers' shape assertions and the
    // strides above describe exactly those row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let mut out = Tensor::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, &a.data, false, &b.data, false, &mut out.data, 0.0);
    out
}

fn gelu_scalar(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

pub fn gelu(x: f64) -> f64 {
    gelu_scalar(x).0
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CausalSoftmax(Var),
    ColSlice { x: Var, start: usize },
    RowSlice { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    MeanRows(Var),
    /// Source row of each column's maximum.
    MaxRows(Var, Vec<usize>),
    SumAll(Var),
    PickLogProbs { logits: Var, picks: Vec<(usize, usize)> },
    FloorAt { x: Var, floor: f64 },
    SigmoidBce { x: Var, targets: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recording tape. The lifetime ties borrowed parameter leaves to their owner.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Owned constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Borrowed constant, e.g. a frozen weight.
    pub fn frozen(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: &'a Tensor, trainable: bool) -> Var {
        if trainable {
            self.param(t)
        } else {
            self.frozen(t)
        }
    }

    /// Owned trainable leaf (used when differentiating with respect to inputs).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows, t.cols)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(out), Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.cols, "matmul_bt shape mismatch");
        let mut out = Tensor::zeros(ta.rows, tb.rows);
        gemm(ta.rows, ta.cols, tb.rows, &ta.data, false, &tb.data, true, &mut out.data, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(out), Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(out), Op::Add(a, b), ng)
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.rows, 1);
        assert_eq!(ta.cols, tr.cols, "add_row shape mismatch");
        let mut out = ta.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&tr.data) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(Cow::Owned(out), Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| gelu_scalar(x).0).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::Gelu(a), ng)
    }

    /// Row-wise layer normalization with affine `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols;
        assert_eq!(tg.cols, d);
        assert_eq!(tb.cols, d);
        let mut out = Tensor::zeros(tx.rows, d);
        let mut xhat = vec![0.0; tx.rows * d];
        let mut rstd = vec![0.0; tx.rows];
        for r in 0..tx.rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out.data[r * d + c] = h * tg.data[c] + tb.data[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(Cow::Owned(out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    /// Row softmax of a square score matrix with entries above the diagonal masked out.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.rows, ta.cols, "causal softmax needs a square matrix");
        let n = ta.rows;
        let mut out = Tensor::zeros(n, n);
        for i in 0..n {
            let row = &ta.row(i)[..=i];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..=i {
                let e = (row[j] - max).exp();
                out.data[i * n + j] = e;
                sum += e;
            }
            for j in 0..=i {
                out.data[i * n + j] /= sum;
            }
        }
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::CausalSoftmax(a), ng)
    }

    pub fn col_slice(&mut self, x: Var, start: usize, width: usize) -> Var {
        let tx = self.value(x);
        assert!(start + width <= tx.cols);
        let mut out = Tensor::zeros(tx.rows, width);
        for r in 0..tx.rows {
            out.row_mut(r).copy_from_slice(&tx.row(r)[start..start + width]);
        }
        let ng = self.ng(x);
        self.push(Cow::Owned(out), Op::ColSlice { x, start }, ng)
    }

    pub fn row_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        assert!(start + len <= tx.rows);
        let out = Tensor::from_vec(
            len,
            tx.cols,
            tx.data[start * tx.cols..(start + len) * tx.cols].to_vec(),
        );
        let ng = self.ng(x);
        self.push(Cow::Owned(out), Op::RowSlice { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.rows, rows);
            for r in 0..rows {
                out.row_mut(r)[off..off + tp.cols].copy_from_slice(tp.row(r));
            }
            off += tp.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.cols, cols, "concat_rows width mismatch");
            data.extend_from_slice(&tp.data);
            rows += tp.rows;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Cow::Owned(Tensor::from_vec(rows, cols, data)), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tt = self.value(table);
        let mut out = Tensor::zeros(ids.len(), tt.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tt.row(id));
        }
        let ng = self.ng(table);
        self.push(Cow::Owned(out), Op::GatherRows { table, ids: ids.to_vec() }, ng)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut out = Tensor::zeros(1, tx.cols);
        for r in 0..tx.rows {
            for (o, v) in out.data.iter_mut().zip(tx.row(r)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / tx.rows as f64);
        let ng = self.ng(x);
        self.push(Cow::Owned(out), Op::MeanRows(x), ng)
    }

    /// Column-wise maximum over rows; the gradient goes to the first maximal row.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (out, arg) = max_rows(tx);
        let ng = self.ng(x);
        self.push(Cow::Owned(out), Op::MaxRows(x, arg), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let ng = self.ng(x);
        self.push(Cow::Owned(Tensor::from_vec(1, 1, vec![s])), Op::SumAll(x), ng)
    }

    /// Log-softmax of the given logit rows evaluated at the picked tokens;
    /// returns a `picks.len() × 1` column.
    pub fn pick_log_probs(&mut self, logits: Var, picks: &[(usize, usize)]) -> Var {
        let tl = self.value(logits);
        let mut out = Tensor::zeros(picks.len(), 1);
        for (i, &(r, tok)) in picks.iter().enumerate() {
            out.data[i] = log_softmax_at(tl.row(r), tok);
        }
        let ng = self.ng(logits);
        self.push(Cow::Owned(out), Op::PickLogProbs { logits, picks: picks.to_vec() }, ng)
    }

    /// Elementwise `max(x, floor)`; the gradient is zero wherever `x < floor`.
    pub fn floor_at(&mut self, x: Var, floor: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data.iter().map(|&v| if v < floor { floor } else { v }).collect();
        let out = Tensor::from_vec(tx.rows, tx.cols, data);
        let ng = self.ng(x);
        self.push(Cow::Owned(out), Op::FloorAt { x, floor }, ng)
    }

    /// Summed binary cross-entropy of logits `x` against 0/1 `targets`.
    pub fn sigmoid_bce(&mut self, x: Var, targets: &[f64]) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.len(), targets.len(), "sigmoid_bce target count");
        let s = tx.data.iter().zip(targets).map(|(&v, &t)| softplus(v) - t * v).sum();
        let ng = self.ng(x);
        self.push(Cow::Owned(Tensor::from_vec(1, 1, vec![s])), Op::SigmoidBce { x, targets: targets.to_vec() }, ng)
    }

    /// Sum of scalar nodes.
    pub fn add_scalars(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        grads[loss.0] = Some(Tensor::from_vec(1, 1, vec![1.0]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            // keep intermediate gradients only for leaves
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let ga = acc(grads, *a, ta.rows, ta.cols);
                    // dA = dC · Bᵀ
                    gemm(ta.rows, tb.cols, ta.cols, &g.data, false, &tb.data, true, &mut ga.data, 1.0);
                }
                if self.ng(*b) {
                    let gb = acc(grads, *b, tb.rows, tb.cols);
                    // dB = Aᵀ · dC
                    gemm(tb.rows, ta.rows, tb.cols, &ta.data, true, &g.data, false, &mut gb.data, 1.0);
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let ga = acc(grads, *a, ta.rows, ta.cols);
                    // dA = dC · B
                    gemm(ta.rows, tb.rows, ta.cols, &g.data, false, &tb.data, false, &mut ga.data, 1.0);
                }
                if self.ng(*b) {
                    let gb = acc(grads, *b, tb.rows, tb.cols);
                    // dB = dCᵀ · A
                    gemm(tb.rows, ta.rows, tb.cols, &g.data, true, &ta.data, false, &mut gb.data, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        acc(grads, v, g.rows, g.cols).add_assign(g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    acc(grads, *a, g.rows, g.cols).add_assign(g);
                }
                if self.ng(*row) {
                    let gr = acc(grads, *row, 1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in gr.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = acc(grads, *a, g.rows, g.cols);
                for (o, v) in ga.data.iter_mut().zip(&g.data) {
                    *o += s * v;
                }
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let ga = acc(grads, *a, g.rows, g.cols);
                for ((o, &x), v) in ga.data.iter_mut().zip(&ta.data).zip(&g.data) {
                    *o += gelu_scalar(x).1 * v;
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = g.cols;
                let tg = self.value(*gamma);
                if self.ng(*gamma) {
                    let gg = acc(grads, *gamma, 1, d);
                    for r in 0..g.rows {
                        for c in 0..d {
                            gg.data[c] += g.data[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if self.ng(*beta) {
                    let gb = acc(grads, *beta, 1, d);
                    for r in 0..g.rows {
                        for c in 0..d {
                            gb.data[c] += g.data[r * d + c];
                        }
                    }
                }
                if self.ng(*x) {
                    let gx = acc(grads, *x, g.rows, d);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..g.rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..d {
                            let v = g.data[r * d + c] * tg.data[c];
                            dxhat[c] = v;
                            m1 += v;
                            m2 += v * xhat[r * d + c];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for c in 0..d {
                            gx.data[r * d + c] += rstd[r] * (dxhat[c] - m1 - xhat[r * d + c] * m2);
                        }
                    }
                }
            }
            Op::CausalSoftmax(a) => {
                let n = g.rows;
                let ga = acc(grads, *a, n, n);
                for r in 0..n {
                    let p = &out.data[r * n..r * n + r + 1];
                    let dp = &g.data[r * n..r * n + r + 1];
                    let dot: f64 = p.iter().zip(dp).map(|(x, y)| x * y).sum();
                    for j in 0..=r {
                        ga.data[r * n + j] += p[j] * (dp[j] - dot);
                    }
                }
            }
            Op::ColSlice { x, start } => {
                let tx = self.value(*x);
                let gx = acc(grads, *x, tx.rows, tx.cols);
                for r in 0..g.rows {
                    let dst = &mut gx.row_mut(r)[*start..*start + g.cols];
                    for (o, v) in dst.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::RowSlice { x, start } => {
                let tx = self.value(*x);
                let gx = acc(grads, *x, tx.rows, tx.cols);
                let off = start * tx.cols;
                for (o, v) in gx.data[off..off + g.data.len()].iter_mut().zip(&g.data) {
                    *o += v;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let tp = self.value(p);
                    if self.ng(p) {
                        let gp = acc(grads, p, tp.rows, tp.cols);
                        for r in 0..g.rows {
                            for (o, v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + tp.cols]) {
                                *o += v;
                            }
                        }
                    }
                    off += tp.cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let tp = self.value(p);
                    if self.ng(p) {
                        let gp = acc(grads, p, tp.rows, tp.cols);
                        let src = &g.data[off * g.cols..(off + tp.rows) * g.cols];
                        for (o, v) in gp.data.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                    off += tp.rows;
                }
            }
            Op::GatherRows { table, ids } => {
                let tt = self.value(*table);
                let gt = acc(grads, *table, tt.rows, tt.cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::MeanRows(x) => {
                let tx = self.value(*x);
                let gx = acc(grads, *x, tx.rows, tx.cols);
                let inv = 1.0 / tx.rows as f64;
                for r in 0..tx.rows {
                    for (o, v) in gx.row_mut(r).iter_mut().zip(&g.data) {
                        *o += v * inv;
                    }
                }
            }
            Op::MaxRows(x, arg) => {
                let tx = self.value(*x);
                let gx = acc(grads, *x, tx.rows, tx.cols);
                for (c, &r) in arg.iter().enumerate() {
                    gx.data[r * tx.cols + c] += g.data[c];
                }
            }
            Op::SumAll(x) => {
                let tx = self.value(*x);
                let gx = acc(grads, *x, tx.rows, tx.cols);
                let s = g.data[0];
                for o in &mut gx.data {
                    *o += s;
                }
            }
            Op::PickLogProbs { logits, picks } => {
                let tl = self.value(*logits);
                let gl = acc(grads, *logits, tl.rows, tl.cols);
                for (i, &(r, tok)) in picks.iter().enumerate() {
                    let up = g.data[i];
                    if up == 0.0 {
                        continue;
                    }
                    let row = tl.row(r);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    let dst = gl.row_mut(r);
                    for (c, o) in dst.iter_mut().enumerate() {
                        let p = (row[c] - max).exp() / z;
                        let target = if c == tok { 1.0 } else { 0.0 };
                        *o += up * (target - p);
                    }
                }
            }
            Op::FloorAt { x, floor } => {
                let tx = self.value(*x);
                let gx = acc(grads, *x, tx.rows, tx.cols);
                for ((o, &v), gv) in gx.data.iter_mut().zip(&tx.data).zip(&g.data) {
                    if v >= *floor {
                        *o += gv;
                    }
                }
            }
            Op::SigmoidBce { x, targets } => {
                let tx = self.value(*x);
                let gx = acc(grads, *x, tx.rows, tx.cols);
                let up = g.data[0];
                for ((o, &v), &t) in gx.data.iter_mut().zip(&tx.data).zip(targets) {
                    *o += up * (1.0 / (1.0 + (-v).exp()) - t);
                }
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn acc(grads: &mut [Option<Tensor>], v: Var, rows: usize, cols: usize) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

/// Numerically stable `log softmax(row)[tok]`.
/// Column-wise maximum of `t` and the first row attaining it.
pub fn max_rows(t: &Tensor) -> (Tensor, Vec<usize>) {
    let mut out = Tensor::filled(1, t.cols, f64::NEG_INFINITY);
    let mut arg = vec![0; t.cols];
    for r in 0..t.rows {
        for (c, &v) in t.row(r).iter().enumerate() {
            if v > out.data[c] {
                out.data[c] = v;
                arg[c] = r;
            }
        }
    }
    (out, arg)
}

pub fn log_softmax_at(row: &[f64], tok: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    row[tok] - max - z.ln()
}

/// Result of [`Graph::backward`]; gradients are retained for leaves only.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    /// Central-difference check of d(loss)/d(leaf) for a graph-building closure.
    fn check<F>(inputs: Vec<Tensor>, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
        let loss = f(&mut g, &vars);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.rows, t.cols));
            for i in 0..t.len() {
                let eval = |delta: f64| {
                    let mut perturbed = inputs.clone();
                    perturbed[k].data[i] += delta;
                    let mut g = Graph::new();
                    let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
                    let l = f(&mut g, &vars);
                    g.value(l).data[0]
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data[i];
                let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                assert!(err < 1e-5 || (a - numeric).abs() < 1e-9, "input {k}[{i}]: analytic {a} vs numeric {numeric}");
            }
        }
    }

    #[test]
    fn max_rows_gradient_follows_the_maximum() {
        check(vec![rand_tensor(5, 3, 7), rand_tensor(3, 2, 8)], |g, v| {
            let m = g.max_rows(v[0]);
            let p = g.matmul(m, v[1]);
            let q = g.gelu(p);
            g.sum_all(q)
        });
        let t = Tensor::from_vec(3, 2, vec![1.0, 5.0, 4.0, 5.0, -2.0, 0.0]);
        assert_eq!(max_rows(&t), (Tensor::from_vec(1, 2, vec![4.0, 5.0]), vec![1, 0]));
    }

    #[test]
    fn matmul_and_transposed_matmul_gradients() {
        check(vec![rand_tensor(3, 4, 1), rand_tensor(4, 2, 2), rand_tensor(5, 4, 3)], |g, v| {
            let ab = g.matmul(v[0], v[1]);
            let ac_t = g.matmul_bt(v[0], v[2]);
            let s1 = g.sum_all(ab);
            let sq = g.gelu(ac_t);
            let s2 = g.sum_all(sq);
            g.add(s1, s2)
        });
    }

    #[test]
    fn layer_norm_softmax_and_slicing_gradients() {
        check(
            vec![rand_tensor(4, 6, 4), rand_tensor(1, 6, 5), rand_tensor(1, 6, 6), rand_tensor(4, 4, 7)],
            |g, v| {
                let ln = g.layer_norm(v[0], v[1], v[2]);
                let left = g.col_slice(ln, 1, 4);
                let p = g.causal_softmax(v[3]);
                let mixed = g.matmul(p, left);
                let rows = g.row_slice(mixed, 1, 2);
                let cat = g.concat_rows(&[rows, left]);
                let both = g.concat_cols(&[cat, cat]);
                let w = g.gelu(both);
                let m = g.mean_rows(w);
                g.sum_all(m)
            },
        );
    }

    #[test]
    fn sigmoid_bce_gradient_and_value() {
        check(vec![rand_tensor(2, 3, 9)], |g, v| g.sigmoid_bce(v[0], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(1, 2, vec![0.0, 0.0]));
        let l = g.sigmoid_bce(x, &[1.0, 0.0]);
        assert!((g.value(l).data[0] - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn log_prob_gather_and_floor_gradients() {
        check(vec![rand_tensor(5, 3, 8), rand_tensor(3, 7, 9)], |g, v| {
            let rows = g.gather_rows(v[0], &[4, 0, 4, 2]);
            let bias = g.row_slice(v[1], 0, 1);
            let logits = g.matmul(rows, v[1]);
            let logits = g.add_row(logits, bias);
            let lp = g.pick_log_probs(logits, &[(0, 1), (1, 6), (3, 0), (3, 3)]);
            let s = g.sum_all(lp);
            let floored = g.floor_at(s, -1e6);
            g.scale(floored, -0.5)
        });
    }

    #[test]
    fn floor_blocks_gradient_below_bound() {
        let x = Tensor::from_vec(1, 1, vec![-5.0]);
        let mut g = Graph::new();
        let v = g.param(&x);
        let y = g.floor_at(v, -0.5);
        assert_eq!(g.value(y).data[0], -0.5);
        let grads = g.backward(y);
        assert_eq!(grads.get(v).map(|t| t.data[0]).unwrap_or(0.0), 0.0);
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_and_mask_future() {
        let s = rand_tensor(5, 5, 11);
        let mut g = Graph::new();
        let v = g.constant(s);
        let p = g.causal_softmax(v);
        let t = g.value(p);
        for r in 0..5 {
            let sum: f64 = t.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for c in r + 1..5 {
                assert_eq!(t.get(r, c), 0.0);
            }
        }
    }
}
