use std::cell::{Ref, RefCell};

use super::{gemm, NumError, Tensor};

/// Additive constant in the masked softmax denominator.
pub const SOFTMAX_EPS: f64 = 1e-12;
/// Rows whose weighted exponential mass falls below this are blacked out.
pub const BLACKOUT_THRESHOLD: f64 = 1e-9;

type Result<T> = std::result::Result<T, NumError>;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Minimum(usize, usize),
    MatMul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Clamp(usize, f64, f64),
    Scale(usize, f64),
    AddScalar(usize),
    SmoothL1(usize),
    Reshape(usize),
    PairSum {
        left: usize,
        right: usize,
        n: usize,
    },
    MaskedSoftmax {
        scores: usize,
        weights: usize,
        saved: Box<SoftmaxSaved>,
    },
    BlockMatMul {
        alpha: usize,
        values: usize,
        n: usize,
    },
    RowEntropy(usize),
}

struct SoftmaxSaved {
    /// exp(s - m) for every entry
    shifted: Vec<f64>,
    /// per-row denominator; 0 marks a blacked-out row
    denom: Vec<f64>,
    /// per-row column of the shift m (usize::MAX when the row has no weight)
    argmax: Vec<usize>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Tape of one forward computation.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    track: bool,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            track: true,
        }
    }

    /// A graph that never records gradients; leaves are treated as constants.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            track: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, self.track)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    pub fn zero_grads(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Reverse sweep from a scalar output; leaf gradients accumulate.
    pub fn backward(&self, output: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let out_shape = nodes[output.id].value.shape();
        if out_shape != [1, 1] {
            return Err(NumError::NonScalar(out_shape));
        }
        if !nodes[output.id].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(output.id + 1, || None);
        adj[output.id] = Some(vec![1.0]);
        for id in (0..=output.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = nodes[id].op {
                let node = &mut nodes[id];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => {
                        let [r, c] = node.value.shape();
                        node.grad = Some(Tensor::new(r, c, g)?);
                    }
                }
                continue;
            }
            backprop(&nodes[..], id, &g, &mut adj);
        }
        Ok(())
    }
}

fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(adj[id].get_or_insert_with(|| vec![0.0; len]))
}

fn accum_scaled(nodes: &[Node], adj: &mut [Option<Vec<f64>>], id: usize, g: &[f64], f: impl Fn(usize, f64) -> f64) {
    if let Some(s) = slot(nodes, adj, id) {
        for (k, (a, &gk)) in s.iter_mut().zip(g).enumerate() {
            *a += f(k, gk);
        }
    }
}

fn accum_with(nodes: &[Node], adj: &mut [Option<Vec<f64>>], id: usize, f: impl Fn(usize) -> f64) {
    if let Some(s) = slot(nodes, adj, id) {
        for (k, a) in s.iter_mut().enumerate() {
            *a += f(k);
        }
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let y = nodes[id].value.data();
    let val = |i: usize| nodes[i].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            accum_scaled(nodes, adj, a, g, |_, gk| gk);
            accum_scaled(nodes, adj, b, g, |_, gk| gk);
        }
        &Op::Sub(a, b) => {
            accum_scaled(nodes, adj, a, g, |_, gk| gk);
            accum_scaled(nodes, adj, b, g, |_, gk| -gk);
        }
        &Op::Mul(a, b) => {
            let (va, vb) = (val(a), val(b));
            accum_scaled(nodes, adj, a, g, |k, gk| gk * vb[k]);
            accum_scaled(nodes, adj, b, g, |k, gk| gk * va[k]);
        }
        &Op::Minimum(a, b) => {
            let (va, vb) = (val(a), val(b));
            accum_scaled(nodes, adj, a, g, |k, gk| if va[k] <= vb[k] { gk } else { 0.0 });
            accum_scaled(nodes, adj, b, g, |k, gk| if va[k] <= vb[k] { 0.0 } else { gk });
        }
        &Op::MatMul(a, b) => {
            let [m, k] = nodes[a].value.shape();
            let n = nodes[b].value.cols();
            if let Some(s) = slot(nodes, adj, a) {
                // dA = G · Bᵀ
                gemm(m, n, k, g, false, val(b), true, s, 1.0);
            }
            if let Some(s) = slot(nodes, adj, b) {
                // dB = Aᵀ · G
                gemm(k, m, n, val(a), true, g, false, s, 1.0);
            }
        }
        &Op::AddRow(a, r) => {
            accum_scaled(nodes, adj, a, g, |_, gk| gk);
            let cols = nodes[r].value.cols();
            if let Some(s) = slot(nodes, adj, r) {
                for (k, gk) in g.iter().enumerate() {
                    s[k % cols] += gk;
                }
            }
        }
        &Op::MulRow(a, r) => {
            let cols = nodes[r].value.cols();
            let (va, vr) = (val(a), val(r));
            accum_scaled(nodes, adj, a, g, |k, gk| gk * vr[k % cols]);
            if let Some(s) = slot(nodes, adj, r) {
                for (k, gk) in g.iter().enumerate() {
                    s[k % cols] += gk * va[k];
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                accum_scaled(nodes, adj, p, &g[offset..offset + len], |_, gk| gk);
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let total = nodes[id].value.cols();
            let mut col0 = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(s) = slot(nodes, adj, p) {
                    for (k, a) in s.iter_mut().enumerate() {
                        let (r, c) = (k / w, k % w);
                        *a += g[r * total + col0 + c];
                    }
                }
                col0 += w;
            }
        }
        &Op::Sum(a) => accum_with(nodes, adj, a, |_| g[0]),
        &Op::Mean(a) => {
            let n = nodes[a].value.len() as f64;
            accum_with(nodes, adj, a, |_| g[0] / n)
        }
        &Op::SumCols(a) => {
            let cols = nodes[a].value.cols();
            if let Some(s) = slot(nodes, adj, a) {
                for (k, v) in s.iter_mut().enumerate() {
                    *v += g[k / cols];
                }
            }
        }
        &Op::Exp(a) => accum_scaled(nodes, adj, a, g, |k, gk| gk * y[k]),
        &Op::Log(a) => {
            let va = val(a);
            accum_scaled(nodes, adj, a, g, |k, gk| gk / va[k])
        }
        &Op::Tanh(a) => accum_scaled(nodes, adj, a, g, |k, gk| gk * (1.0 - y[k] * y[k])),
        &Op::Relu(a) => {
            let va = val(a);
            accum_scaled(nodes, adj, a, g, |k, gk| if va[k] > 0.0 { gk } else { 0.0 })
        }
        &Op::LeakyRelu(a, slope) => {
            let va = val(a);
            accum_scaled(nodes, adj, a, g, |k, gk| if va[k] > 0.0 { gk } else { slope * gk })
        }
        &Op::Sigmoid(a) => accum_scaled(nodes, adj, a, g, |k, gk| gk * y[k] * (1.0 - y[k])),
        &Op::Clamp(a, lo, hi) => {
            let va = val(a);
            accum_scaled(nodes, adj, a, g, |k, gk| {
                if va[k] >= lo && va[k] <= hi {
                    gk
                } else {
                    0.0
                }
            })
        }
        &Op::Scale(a, c) => accum_scaled(nodes, adj, a, g, |_, gk| gk * c),
        &Op::AddScalar(a) => accum_scaled(nodes, adj, a, g, |_, gk| gk),
        &Op::SmoothL1(a) => {
            let va = val(a);
            accum_scaled(nodes, adj, a, g, |k, gk| {
                let x = va[k];
                if x.abs() < 1.0 {
                    gk * x
                } else {
                    gk * x.signum()
                }
            })
        }
        &Op::Reshape(a) => accum_scaled(nodes, adj, a, g, |_, gk| gk),
        &Op::PairSum { left, right, n } => {
            let h = nodes[left].value.cols();
            let blocks = nodes[left].value.rows() / n;
            if let Some(s) = slot(nodes, adj, left) {
                for b in 0..blocks {
                    for i in 0..n {
                        let dst = &mut s[(b * n + i) * h..(b * n + i + 1) * h];
                        for j in 0..n {
                            let src = &g[((b * n + i) * n + j) * h..][..h];
                            for (d, v) in dst.iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            if let Some(s) = slot(nodes, adj, right) {
                for b in 0..blocks {
                    for i in 0..n {
                        for j in 0..n {
                            let src = &g[((b * n + i) * n + j) * h..][..h];
                            let dst = &mut s[(b * n + j) * h..(b * n + j + 1) * h];
                            for (d, v) in dst.iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
        Op::MaskedSoftmax {
            scores,
            weights,
            saved,
        } => {
            let (scores, weights) = (*scores, *weights);
            let cols = nodes[scores].value.cols();
            let w = val(weights);
            let rows = y.len() / cols;
            // g_u[k] = (g[k] - Σ_j g[j] α[j]) / Z with u = w·exp(s - m)
            let mut gu = vec![0.0; y.len()];
            let mut gm = vec![0.0; rows];
            for r in 0..rows {
                let z = saved.denom[r];
                if z == 0.0 {
                    continue;
                }
                let range = r * cols..(r + 1) * cols;
                let dot: f64 = g[range.clone()].iter().zip(&y[range.clone()]).map(|(a, b)| a * b).sum();
                for k in range {
                    gu[k] = (g[k] - dot) / z;
                }
                gm[r] = -dot * SOFTMAX_EPS / z;
            }
            if let Some(s) = slot(nodes, adj, scores) {
                for r in 0..rows {
                    if saved.denom[r] == 0.0 {
                        continue;
                    }
                    for c in 0..cols {
                        let k = r * cols + c;
                        s[k] += gu[k] * w[k] * saved.shifted[k];
                    }
                    s[r * cols + saved.argmax[r]] += gm[r];
                }
            }
            if let Some(s) = slot(nodes, adj, weights) {
                for k in 0..y.len() {
                    s[k] += gu[k] * saved.shifted[k];
                }
            }
        }
        &Op::BlockMatMul { alpha, values, n } => {
            let h = nodes[values].value.cols();
            let blocks = nodes[values].value.rows() / n;
            let (va, vv) = (val(alpha), val(values));
            if let Some(s) = slot(nodes, adj, alpha) {
                for b in 0..blocks {
                    for i in 0..n {
                        let gi = &g[(b * n + i) * h..][..h];
                        for j in 0..n {
                            let vj = &vv[(b * n + j) * h..][..h];
                            s[(b * n + i) * n + j] += gi.iter().zip(vj).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
            }
            if let Some(s) = slot(nodes, adj, values) {
                for b in 0..blocks {
                    for i in 0..n {
                        let gi = &g[(b * n + i) * h..][..h];
                        for j in 0..n {
                            let a = va[(b * n + i) * n + j];
                            if a == 0.0 {
                                continue;
                            }
                            let dst = &mut s[(b * n + j) * h..][..h];
                            for (d, x) in dst.iter_mut().zip(gi) {
                                *d += a * x;
                            }
                        }
                    }
                }
            }
        }
        &Op::RowEntropy(a) => {
            let cols = nodes[a].value.cols();
            let va = val(a);
            accum_with(nodes, adj, a, |k| {
                let p = va[k];
                if p > 0.0 {
                    -g[k / cols] * (p.ln() + 1.0)
                } else {
                    0.0
                }
            })
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> [usize; 2] {
        self.graph.value_ref(self.id).shape()
    }

    pub fn value(&self) -> Tensor {
        self.graph.value_ref(self.id).clone()
    }

    /// Borrow of the forward value; drop before recording further ops.
    pub fn value_ref(&self) -> Ref<'g, Tensor> {
        self.graph.value_ref(self.id)
    }

    pub fn item(&self) -> f64 {
        self.graph.value_ref(self.id).data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad(*self)
    }

    fn check_same(&self, other: &Var<'g>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(NumError::ShapeMismatch { op, lhs: a, rhs: b });
        }
        Ok(())
    }

    fn binary(&self, other: &Var<'g>, op: &'static str, f: impl Fn(f64, f64) -> f64, mk: fn(usize, usize) -> Op) -> Result<Var<'g>> {
        self.check_same(other, op)?;
        let out = {
            let a = self.value_ref();
            let b = other.value_ref();
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.rows(), a.cols(), data)?
        };
        let rg = self.graph.requires(&[self.id, other.id]);
        Ok(self.graph.push(out, mk(self.id, other.id), rg))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'g> {
        let out = self.value_ref().map(f);
        let rg = self.graph.requires(&[self.id]);
        self.graph.push(out, op, rg)
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "minimum", f64::min, Op::Minimum)
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let out = self.value_ref().matmul(&other.value_ref())?;
        let rg = self.graph.requires(&[self.id, other.id]);
        Ok(self.graph.push(out, Op::MatMul(self.id, other.id), rg))
    }

    fn row_broadcast(&self, row: &Var<'g>, op: &'static str, f: impl Fn(f64, f64) -> f64, mk: fn(usize, usize) -> Op) -> Result<Var<'g>> {
        let (a, r) = (self.shape(), row.shape());
        if r[0] != 1 || r[1] != a[1] {
            return Err(NumError::ShapeMismatch { op, lhs: a, rhs: r });
        }
        let out = {
            let av = self.value_ref();
            let rv = row.value_ref();
            let rd = rv.data();
            let data = av.data().iter().enumerate().map(|(k, &x)| f(x, rd[k % a[1]])).collect();
            Tensor::new(a[0], a[1], data)?
        };
        let rg = self.graph.requires(&[self.id, row.id]);
        Ok(self.graph.push(out, mk(self.id, row.id), rg))
    }

    /// Adds a `1×cols` row to every row.
    pub fn add_row(&self, row: &Var<'g>) -> Result<Var<'g>> {
        self.row_broadcast(row, "add_row", |a, b| a + b, Op::AddRow)
    }

    /// Multiplies every row elementwise by a `1×cols` row.
    pub fn mul_row(&self, row: &Var<'g>) -> Result<Var<'g>> {
        self.row_broadcast(row, "mul_row", |a, b| a * b, Op::MulRow)
    }

    pub fn concat_rows(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| NumError::Invalid("concat_rows of nothing".into()))?;
        let graph = first.graph;
        let cols = first.shape()[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value_ref();
            if v.cols() != cols {
                return Err(NumError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape(),
                    rhs: v.shape(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = graph.requires(&ids);
        Ok(graph.push(Tensor::new(rows, cols, data)?, Op::ConcatRows(ids), rg))
    }

    pub fn concat_cols(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| NumError::Invalid("concat_cols of nothing".into()))?;
        let graph = first.graph;
        let rows = first.shape()[0];
        for p in parts {
            if p.shape()[0] != rows {
                return Err(NumError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first.shape(),
                    rhs: p.shape(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut data = vec![0.0; rows * total];
        let mut col0 = 0;
        for p in parts {
            let v = p.value_ref();
            let w = v.cols();
            for r in 0..rows {
                data[r * total + col0..r * total + col0 + w].copy_from_slice(v.row(r));
            }
            col0 += w;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = graph.requires(&ids);
        Ok(graph.push(Tensor::new(rows, total, data)?, Op::ConcatCols(ids), rg))
    }

    pub fn sum(&self) -> Var<'g> {
        let s = self.value_ref().data().iter().sum();
        let rg = self.graph.requires(&[self.id]);
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Var<'g> {
        let m = {
            let v = self.value_ref();
            v.data().iter().sum::<f64>() / v.len() as f64
        };
        let rg = self.graph.requires(&[self.id]);
        self.graph.push(Tensor::scalar(m), Op::Mean(self.id), rg)
    }

    /// Row sums as an `rows×1` column.
    pub fn sum_cols(&self) -> Var<'g> {
        let out = {
            let v = self.value_ref();
            let sums: Vec<f64> = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
            Tensor::column_vector(&sums)
        };
        let rg = self.graph.requires(&[self.id]);
        self.graph.push(out, Op::SumCols(self.id), rg)
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'g>> {
        if let Some((index, &value)) = self.value_ref().data().iter().enumerate().find(|(_, &x)| !(x > 0.0)) {
            return Err(NumError::Domain { op: "log", index, value });
        }
        Ok(self.unary(f64::ln, Op::Log(self.id)))
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g> {
        self.unary(move |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(self.id, slope))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(self.id),
        )
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(move |x| x.clamp(lo, hi), Op::Clamp(self.id, lo, hi))
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        self.unary(move |x| x * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        self.unary(move |x| x + c, Op::AddScalar(self.id))
    }

    /// Huber loss with unit threshold, elementwise.
    pub fn smooth_l1(&self) -> Var<'g> {
        self.unary(
            |x| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 },
            Op::SmoothL1(self.id),
        )
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Var<'g>> {
        let data = self.value_ref().data().to_vec();
        let t = Tensor::new(rows, cols, data)?;
        let rg = self.graph.requires(&[self.id]);
        Ok(self.graph.push(t, Op::Reshape(self.id), rg))
    }

    /// For consecutive blocks of `n` rows, emits row `(b, i, j) = left[b·n+i] + right[b·n+j]`.
    pub fn pair_sum(&self, right: &Var<'g>, n: usize) -> Result<Var<'g>> {
        let (ls, rs) = (self.shape(), right.shape());
        if ls != rs || n == 0 || ls[0] % n != 0 {
            return Err(NumError::ShapeMismatch {
                op: "pair_sum",
                lhs: ls,
                rhs: rs,
            });
        }
        let h = ls[1];
        let blocks = ls[0] / n;
        let out = {
            let l = self.value_ref();
            let r = right.value_ref();
            let mut data = Vec::with_capacity(blocks * n * n * h);
            for b in 0..blocks {
                for i in 0..n {
                    let li = l.row(b * n + i);
                    for j in 0..n {
                        let rj = r.row(b * n + j);
                        data.extend(li.iter().zip(rj).map(|(x, y)| x + y));
                    }
                }
            }
            Tensor::new(blocks * n * n, h, data)?
        };
        let rg = self.graph.requires(&[self.id, right.id]);
        Ok(self.graph.push(out, Op::PairSum { left: self.id, right: right.id, n }, rg))
    }

    /// Row-wise softmax with multiplicative edge weights:
    /// `α_ij = w_ij·exp(s_ij − m_i) / (ε + Σ_k w_ik·exp(s_ik − m_i))`, `m_i` the
    /// max score over positive-weight entries. Rows whose weighted mass is below
    /// [`BLACKOUT_THRESHOLD`] come out all-zero.
    pub fn masked_softmax(&self, weights: &Var<'g>) -> Result<Var<'g>> {
        self.check_same(weights, "masked_softmax")?;
        let [rows, cols] = self.shape();
        let (out, saved) = {
            let s = self.value_ref();
            let w = weights.value_ref();
            let (s, w) = (s.data(), w.data());
            let mut alpha = vec![0.0; rows * cols];
            let mut shifted = vec![0.0; rows * cols];
            let mut denom = vec![0.0; rows];
            let mut argmax = vec![usize::MAX; rows];
            for r in 0..rows {
                let range = r * cols..(r + 1) * cols;
                let mut best = f64::NEG_INFINITY;
                for c in 0..cols {
                    let k = r * cols + c;
                    if w[k] > 0.0 && (argmax[r] == usize::MAX || s[k] > best) {
                        best = s[k];
                        argmax[r] = c;
                    }
                }
                if argmax[r] == usize::MAX {
                    continue;
                }
                let mut mass = 0.0;
                for k in range.clone() {
                    shifted[k] = (s[k] - best).exp();
                    mass += w[k] * shifted[k];
                }
                if mass < BLACKOUT_THRESHOLD {
                    continue;
                }
                let z = SOFTMAX_EPS + mass;
                denom[r] = z;
                for k in range {
                    alpha[k] = w[k] * shifted[k] / z;
                }
            }
            (
                Tensor::new(rows, cols, alpha)?,
                SoftmaxSaved {
                    shifted,
                    denom,
                    argmax,
                },
            )
        };
        let rg = self.graph.requires(&[self.id, weights.id]);
        Ok(self.graph.push(
            out,
            Op::MaskedSoftmax {
                scores: self.id,
                weights: weights.id,
                saved: Box::new(saved),
            },
            rg,
        ))
    }

    /// Per-block product: for `self` of shape `(B·n)×n` and `values` of shape
    /// `(B·n)×h`, block `b` of the output is `self_b · values_b`.
    pub fn block_matmul(&self, values: &Var<'g>, n: usize) -> Result<Var<'g>> {
        let (a, v) = (self.shape(), values.shape());
        if n == 0 || a[1] != n || a[0] != v[0] || a[0] % n != 0 {
            return Err(NumError::ShapeMismatch {
                op: "block_matmul",
                lhs: a,
                rhs: v,
            });
        }
        let h = v[1];
        let blocks = a[0] / n;
        let out = {
            let av = self.value_ref();
            let vv = values.value_ref();
            let mut data = vec![0.0; a[0] * h];
            for b in 0..blocks {
                for i in 0..n {
                    let dst = &mut data[(b * n + i) * h..(b * n + i + 1) * h];
                    for j in 0..n {
                        let w = av.get(b * n + i, j);
                        if w == 0.0 {
                            continue;
                        }
                        for (d, x) in dst.iter_mut().zip(vv.row(b * n + j)) {
                            *d += w * x;
                        }
                    }
                }
            }
            Tensor::new(a[0], h, data)?
        };
        let rg = self.graph.requires(&[self.id, values.id]);
        Ok(self.graph.push(out, Op::BlockMatMul { alpha: self.id, values: values.id, n }, rg))
    }

    /// Shannon entropy (nats) of each row as a `rows×1` column, `0·ln 0 = 0`.
    pub fn row_entropy(&self) -> Result<Var<'g>> {
        let out = {
            let v = self.value_ref();
            if let Some((index, &value)) = v.data().iter().enumerate().find(|(_, &x)| x < 0.0 || !x.is_finite()) {
                return Err(NumError::Domain {
                    op: "row_entropy",
                    index,
                    value,
                });
            }
            let h: Vec<f64> = (0..v.rows())
                .map(|r| v.row(r).iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum())
                .collect();
            Tensor::column_vector(&h)
        };
        let rg = self.graph.requires(&[self.id]);
        Ok(self.graph.push(out, Op::RowEntropy(self.id), rg))
    }
}
