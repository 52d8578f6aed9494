use super::{Tensor, EPS_NORM};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    SignedSqrt(Var),
    Relu(Var),
    LogSumExpRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows(Var),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    RowDot(Var, Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in execution order; `backward` replays them in reverse.
///
/// A tape is single-use per step: build it, call [`Tape::backward`] once, read
/// the gradients, drop it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `C = A * B` for row-major matrices, optionally reading A or B transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    // a is m x k (or k x m when transposed); b is k x n (or n x k).
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked by the callers against m, k, n.
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

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as an input. Gradients are tracked iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Records a constant (never receives a gradient).
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_grad(false), Op::Leaf, false)
    }

    /// Copies `v` into a new constant node, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone().with_grad(false);
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Returns the recorded tensor, including any gradient filled in by
    /// `backward`.
    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = Tensor::new(shape, data)?;
        let ng = self.ng(inputs);
        Ok(self.push(value, op, ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if dims(self.value(a)) != dims(self.value(b)) {
            return Err(Error::InvalidShape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(Error::InvalidShape(format!("matmul: {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        self.record(vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.record(shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul_elementwise(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul_elementwise", Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `1 x c` row to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = dims(self.value(a));
        let rt = self.value(row);
        if rt.len() != c || rt.rows() != 1 {
            return Err(Error::InvalidShape(format!(
                "add_row: {r}x{c} with row of shape {:?}",
                rt.shape()
            )));
        }
        let bias = rt.data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_exact_mut(c) {
            for (x, b) in chunk.iter_mut().zip(&bias) {
                *x += b;
            }
        }
        self.record(vec![r, c], data, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        let shape = t.shape().to_vec();
        self.record(shape, data, Op::Scale(a, c), &[a])
    }

    /// Stacks `b` below `a`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = dims(self.value(a));
        let (rb, cb) = dims(self.value(b));
        if ca != cb {
            return Err(Error::InvalidShape(format!("concat_rows: {ra}x{ca} over {rb}x{cb}")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        self.record(vec![ra + rb, ca], data, Op::ConcatRows(a, b), &[a, b])
    }

    /// Places `b` to the right of `a`, row by row.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = dims(self.value(a));
        let (rb, cb) = dims(self.value(b));
        if ra != rb {
            return Err(Error::InvalidShape(format!("concat_cols: {ra}x{ca} beside {rb}x{cb}")));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(self.value(a).row(r));
            data.extend_from_slice(self.value(b).row(r));
        }
        self.record(vec![ra, ca + cb], data, Op::ConcatCols(a, b), &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.record(shape, data, op, &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// `sign(x) * sqrt(|x|)`.
    pub fn signed_sqrt(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::SignedSqrt(a), |x| x.signum() * x.abs().sqrt())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Row-wise log-sum-exp; returns a length-`rows` vector.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = dims(t);
        let data = (0..r).map(|i| lse(t.row(i))).collect();
        debug_assert!(c > 0);
        self.record(vec![r], data, Op::LogSumExpRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = dims(t);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row(i);
            let m = lse(row);
            data.extend(row.iter().map(|x| x - m));
        }
        let shape = t.shape().to_vec();
        self.record(shape, data, Op::LogSoftmaxRows(a), &[a])
    }

    /// Scales each row to unit L2 norm; rows with norm below [`EPS_NORM`]
    /// are rejected.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = dims(t);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row(i);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n >= EPS_NORM) {
                return Err(Error::DegenerateInput(format!("row {i} has norm {n:e}")));
            }
            data.extend(row.iter().map(|x| x / n));
        }
        let shape = t.shape().to_vec();
        self.record(shape, data, Op::L2NormalizeRows(a), &[a])
    }

    /// Mean over rows; returns `1 x cols`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = dims(t);
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (o, x) in data.iter_mut().zip(t.row(i)) {
                *o += x;
            }
        }
        data.iter_mut().for_each(|x| *x /= r as f64);
        self.record(vec![1, c], data, Op::MeanRows(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.record(vec![1], vec![s], Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.record(vec![1], vec![s], Op::MeanAll(a), &[a])
    }

    /// Sum across columns of each row; returns a length-`rows` vector.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let r = t.rows();
        let data = (0..r).map(|i| t.row(i).iter().sum()).collect();
        self.record(vec![r], data, Op::SumCols(a), &[a])
    }

    /// Per-row dot product of two equally shaped matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let r = ta.rows();
        let data = (0..r)
            .map(|i| ta.row(i).iter().zip(tb.row(i)).map(|(x, y)| x * y).sum())
            .collect();
        self.record(vec![r], data, Op::RowDot(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = dims(t);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        self.record(vec![c, r], data, Op::Transpose(a), &[a])
    }

    /// Row lookup: output row `i` is `table[indices[i]]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (r, c) = dims(t);
        if indices.is_empty() {
            return Err(Error::InvalidShape("gather_rows: empty index list".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::InvalidShape(format!("gather_rows: index {i} >= {r} rows")));
            }
            data.extend_from_slice(t.row(i));
        }
        let shape = if t.shape().len() == 1 {
            vec![indices.len()]
        } else {
            vec![indices.len(), c]
        };
        self.record(shape, data, Op::GatherRows(table, indices.to_vec()), &[table])
    }

    /// Picks column `indices[i]` from row `i`; returns a length-`rows` vector.
    pub fn pick_per_row(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = dims(t);
        if indices.len() != r {
            return Err(Error::InvalidShape(format!(
                "pick_per_row: {} indices for {r} rows",
                indices.len()
            )));
        }
        let mut data = Vec::with_capacity(r);
        for (i, &j) in indices.iter().enumerate() {
            if j >= c {
                return Err(Error::InvalidShape(format!("pick_per_row: column {j} >= {c}")));
            }
            data.push(t.data()[i * c + j]);
        }
        self.record(vec![r], data, Op::PickPerRow(a, indices.to_vec()), &[a])
    }

    /// Reverse sweep from a scalar `loss`. Fills the gradient of every
    /// tracked node; repeated uses of a node accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            self.nodes[idx].value.set_grad(g);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;

        // Accumulates `delta` into the gradient slot of `v`.
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(val(*a));
                let n = val(*b).cols();
                if wants(*a) {
                    let bd = val(*b).data();
                    acc(grads, *a, m * k, |s| gemm(m, n, k, g, false, bd, true, s, 1.0));
                }
                if wants(*b) {
                    let ad = val(*a).data();
                    acc(grads, *b, k * n, |s| gemm(k, m, n, ad, true, g, false, s, 1.0));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if wants(v) {
                        acc(grads, v, g.len(), |d| {
                            d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g)
                        });
                    }
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    acc(grads, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
                if wants(*row) {
                    let c = out.cols();
                    acc(grads, *row, c, |d| {
                        for chunk in g.chunks_exact(c) {
                            d.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if wants(v) {
                        let od = val(other).data();
                        acc(grads, v, g.len(), |d| {
                            for ((d, g), o) in d.iter_mut().zip(g).zip(od) {
                                *d += g * o;
                            }
                        });
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    acc(grads, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g));
                }
            }
            Op::ConcatRows(a, b) => {
                let la = val(*a).len();
                if wants(*a) {
                    acc(grads, *a, la, |d| d.iter_mut().zip(&g[..la]).for_each(|(d, g)| *d += g));
                }
                if wants(*b) {
                    let lb = val(*b).len();
                    acc(grads, *b, lb, |d| d.iter_mut().zip(&g[la..]).for_each(|(d, g)| *d += g));
                }
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = dims(val(*a));
                let cb = val(*b).cols();
                let w = ca + cb;
                if wants(*a) {
                    acc(grads, *a, r * ca, |d| {
                        for i in 0..r {
                            for j in 0..ca {
                                d[i * ca + j] += g[i * w + j];
                            }
                        }
                    });
                }
                if wants(*b) {
                    acc(grads, *b, r * cb, |d| {
                        for i in 0..r {
                            for j in 0..cb {
                                d[i * cb + j] += g[i * w + ca + j];
                            }
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let x = val(*a).data();
                    acc(grads, *a, g.len(), |d| {
                        for ((d, g), &x) in d.iter_mut().zip(g).zip(x) {
                            let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            *d += g * (0.5 * (1.0 + t) + 0.5 * x * dt);
                        }
                    });
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    let y = out.data();
                    acc(grads, *a, g.len(), |d| {
                        for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                            *d += g * y * (1.0 - y);
                        }
                    });
                }
            }
            Op::SignedSqrt(a) => {
                if wants(*a) {
                    let x = val(*a).data();
                    acc(grads, *a, g.len(), |d| {
                        for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                            *d += g * 0.5 / x.abs().max(EPS_NORM).sqrt();
                        }
                    });
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let x = val(*a).data();
                    acc(grads, *a, g.len(), |d| {
                        for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                            if *x > 0.0 {
                                *d += g;
                            }
                        }
                    });
                }
            }
            Op::LogSumExpRows(a) => {
                if wants(*a) {
                    let t = val(*a);
                    let (r, c) = dims(t);
                    acc(grads, *a, r * c, |d| {
                        for i in 0..r {
                            let m = out.data()[i];
                            for (dj, x) in d[i * c..(i + 1) * c].iter_mut().zip(t.row(i)) {
                                *dj += g[i] * (x - m).exp();
                            }
                        }
                    });
                }
            }
            Op::LogSoftmaxRows(a) => {
                if wants(*a) {
                    let (r, c) = dims(out);
                    acc(grads, *a, r * c, |d| {
                        for i in 0..r {
                            let gi = &g[i * c..(i + 1) * c];
                            let gsum: f64 = gi.iter().sum();
                            for ((dj, gj), y) in d[i * c..(i + 1) * c].iter_mut().zip(gi).zip(out.row(i)) {
                                *dj += gj - y.exp() * gsum;
                            }
                        }
                    });
                }
            }
            Op::L2NormalizeRows(a) => {
                if wants(*a) {
                    let x = val(*a);
                    let (r, c) = dims(x);
                    acc(grads, *a, r * c, |d| {
                        for i in 0..r {
                            let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                            let y = out.row(i);
                            let gi = &g[i * c..(i + 1) * c];
                            let dot: f64 = y.iter().zip(gi).map(|(y, g)| y * g).sum();
                            for ((dj, gj), yj) in d[i * c..(i + 1) * c].iter_mut().zip(gi).zip(y) {
                                *dj += (gj - yj * dot) / n;
                            }
                        }
                    });
                }
            }
            Op::MeanRows(a) => {
                if wants(*a) {
                    let (r, c) = dims(val(*a));
                    let inv = 1.0 / r as f64;
                    acc(grads, *a, r * c, |d| {
                        for chunk in d.chunks_exact_mut(c) {
                            chunk.iter_mut().zip(g).for_each(|(d, g)| *d += g * inv);
                        }
                    });
                }
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                if wants(*a) {
                    let len = val(*a).len();
                    let s = if matches!(node.op, Op::MeanAll(_)) {
                        g[0] / len as f64
                    } else {
                        g[0]
                    };
                    acc(grads, *a, len, |d| d.iter_mut().for_each(|d| *d += s));
                }
            }
            Op::SumCols(a) => {
                if wants(*a) {
                    let (r, c) = dims(val(*a));
                    acc(grads, *a, r * c, |d| {
                        for (i, chunk) in d.chunks_exact_mut(c).enumerate() {
                            chunk.iter_mut().for_each(|d| *d += g[i]);
                        }
                    });
                }
            }
            Op::RowDot(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if wants(v) {
                        let o = val(other);
                        let (r, c) = dims(o);
                        acc(grads, v, r * c, |d| {
                            for i in 0..r {
                                for (dj, oj) in d[i * c..(i + 1) * c].iter_mut().zip(o.row(i)) {
                                    *dj += g[i] * oj;
                                }
                            }
                        });
                    }
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (r, c) = dims(val(*a));
                    acc(grads, *a, r * c, |d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
            }
            Op::GatherRows(table, indices) => {
                if wants(*table) {
                    let (r, c) = dims(val(*table));
                    acc(grads, *table, r * c, |d| {
                        for (k, &i) in indices.iter().enumerate() {
                            for j in 0..c {
                                d[i * c + j] += g[k * c + j];
                            }
                        }
                    });
                }
            }
            Op::PickPerRow(a, indices) => {
                if wants(*a) {
                    let (r, c) = dims(val(*a));
                    acc(grads, *a, r * c, |d| {
                        for (i, &j) in indices.iter().enumerate() {
                            d[i * c + j] += g[i];
                        }
                    });
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted log-sum-exp.
pub(crate) fn lse(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
