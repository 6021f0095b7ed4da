//! Reverse-mode autodiff over 2-D f64 arrays.
//!
//! A [`Tape`] records one forward pass; `backward` walks the node list in
//! reverse and accumulates gradients. Sequences are stored as `(len, dim)`
//! matrices. Everything the toy transformer stack needs is expressed with the
//! small op set below; there is no broadcasting beyond the explicit
//! row-broadcast ops.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    /// `x (n,d) + row (1,d)` broadcast over rows.
    AddRow(Var, Var),
    /// `a + c * b`, same shapes.
    AddScaled(Var, Var, f64),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    /// Row lookup into an embedding table.
    GatherRows(Var, Vec<usize>),
    /// Add a constant matrix (e.g. causal mask); no gradient into it.
    AddConst(Var),
    Dropout {
        x: Var,
        mask: Array2<f64>,
    },
    /// Mean negative log-softmax of `targets[i]` over `logits` row `rows[i]`.
    NllMean {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
    },
}

struct Node {
    data: Array2<f64>,
    grad: Option<Array2<f64>>,
    requires_grad: bool,
    op: Op,
}

/// One forward pass worth of computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, data: Array2<f64>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            data,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn data(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn leaf(&mut self, data: Array2<f64>, requires_grad: bool) -> Var {
        self.push(data, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, data: Array2<f64>) -> Var {
        self.leaf(data, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.data(a).dot(self.data(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, rg, Op::Matmul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.data(a) + self.data(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, rg, Op::Add(a, b))
    }

    pub fn add_scaled(&mut self, a: Var, b: Var, c: f64) -> Var {
        let out = self.data(a) + &(self.data(b) * c);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, rg, Op::AddScaled(a, b, c))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        debug_assert_eq!(self.data(row).nrows(), 1);
        let out = self.data(x) + self.data(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(out, rg, Op::AddRow(x, row))
    }

    pub fn add_const(&mut self, x: Var, c: &Array2<f64>) -> Var {
        let out = self.data(x) + c;
        let rg = self.rg(x);
        self.push(out, rg, Op::AddConst(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.data(x) * c;
        let rg = self.rg(x);
        self.push(out, rg, Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.data(x).mapv(gelu);
        let rg = self.rg(x);
        self.push(out, rg, Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.data(x));
        let rg = self.rg(x);
        self.push(out, rg, Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xd = self.data(x);
        let d = xd.ncols() as f64;
        let mut mean = Vec::with_capacity(xd.nrows());
        let mut inv_std = Vec::with_capacity(xd.nrows());
        let mut out = xd.clone();
        for mut row in out.rows_mut() {
            let m = row.sum() / d;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d;
            let is = 1.0 / (var + 1e-5).sqrt();
            row.mapv_inplace(|v| (v - m) * is);
            mean.push(m);
            inv_std.push(is);
        }
        let gd = self.data(gain);
        let bd = self.data(bias);
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * gd[[0, j]] + bd[[0, j]];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            },
        )
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.data(x).t().to_owned();
        let rg = self.rg(x);
        self.push(out, rg, Op::Transpose(x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        debug_assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.data(*v).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("row concat shape mismatch");
        let rg = parts.iter().any(|v| self.rg(*v));
        self.push(out, rg, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.data(x).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(x);
        self.push(out, rg, Op::SliceRows(x, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.data(*v).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("col concat shape mismatch");
        let rg = parts.iter().any(|v| self.rg(*v));
        self.push(out, rg, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.data(x).slice(s![.., start..end]).to_owned();
        let rg = self.rg(x);
        self.push(out, rg, Op::SliceCols(x, start, end))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let td = self.data(table);
        let mut out = Array2::zeros((ids.len(), td.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&td.row(id));
        }
        let rg = self.rg(table);
        self.push(out, rg, Op::GatherRows(table, ids.to_vec()))
    }

    /// Dropout on the adapter input path. `mask` entries are 0 or 1/(1-p).
    pub fn dropout(&mut self, x: Var, mask: Array2<f64>) -> Var {
        let out = self.data(x) * &mask;
        let rg = self.rg(x);
        self.push(out, rg, Op::Dropout { x, mask })
    }

    /// Mean negative log-likelihood of `targets` at the given logit rows.
    /// Output is a `(1,1)` scalar node.
    pub fn nll_mean(&mut self, logits: Var, rows: &[usize], targets: &[usize]) -> Var {
        assert_eq!(rows.len(), targets.len());
        assert!(!rows.is_empty());
        let ld = self.data(logits);
        let mut total = 0.0;
        for (&r, &t) in rows.iter().zip(targets) {
            total -= log_softmax_entry(&ld.row(r).to_owned(), t);
        }
        let out = Array2::from_elem((1, 1), total / rows.len() as f64);
        let rg = self.rg(logits);
        self.push(
            out,
            rg,
            Op::NllMean {
                logits,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
            },
        )
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let d = self.data(v);
        debug_assert_eq!(d.dim(), (1, 1));
        d[[0, 0]]
    }

    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.data(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite values in {what}")))
        }
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&mut self, loss: Var) {
        debug_assert_eq!(self.data(loss).dim(), (1, 1));
        self.nodes[loss.0].grad = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.take().unwrap();
            self.apply_backward(i, &g);
            self.nodes[i].grad = Some(g);
        }
    }

    fn accum(&mut self, v: Var, delta: &Array2<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => *g += delta,
            slot => *slot = Some(delta.clone()),
        }
    }

    fn apply_backward(&mut self, i: usize, g: &Array2<f64>) {
        // Temporarily take the op to satisfy the borrow checker.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::AddConst(_) => {
                if let Op::AddConst(x) = &op {
                    self.accum(*x, g);
                }
            }
            Op::Matmul(a, b) => {
                if self.rg(*a) {
                    let da = g.dot(&self.data(*b).t());
                    self.accum(*a, &da);
                }
                if self.rg(*b) {
                    let db = self.data(*a).t().dot(g);
                    self.accum(*b, &db);
                }
            }
            Op::Add(a, b) => {
                self.accum(*a, g);
                self.accum(*b, g);
            }
            Op::AddScaled(a, b, c) => {
                self.accum(*a, g);
                if self.rg(*b) {
                    let db = g * *c;
                    self.accum(*b, &db);
                }
            }
            Op::AddRow(x, row) => {
                self.accum(*x, g);
                if self.rg(*row) {
                    let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accum(*row, &summed);
                }
            }
            Op::Scale(x, c) => {
                let dx = g * *c;
                self.accum(*x, &dx);
            }
            Op::Gelu(x) => {
                let dx = self.data(*x).mapv(gelu_grad) * g;
                self.accum(*x, &dx);
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[i].data;
                let gy = g * y;
                let rowsum = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                let dx = gy - y * &rowsum;
                self.accum(*x, &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            } => {
                let xd = self.data(*x);
                let gaind = self.data(*gain);
                let d = xd.ncols() as f64;
                let mut dx = Array2::zeros(xd.dim());
                let mut dgain = Array2::zeros((1, xd.ncols()));
                let mut dbias = Array2::zeros((1, xd.ncols()));
                for r in 0..xd.nrows() {
                    let m = mean[r];
                    let is = inv_std[r];
                    // xhat and upstream-through-gain for this row
                    let xhat: Vec<f64> = xd.row(r).iter().map(|v| (v - m) * is).collect();
                    let dxhat: Vec<f64> = (0..xd.ncols())
                        .map(|j| g[[r, j]] * gaind[[0, j]])
                        .collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d;
                    let mean_dxhat_xhat = dxhat
                        .iter()
                        .zip(&xhat)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / d;
                    for j in 0..xd.ncols() {
                        dx[[r, j]] = is * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgain[[0, j]] += g[[r, j]] * xhat[j];
                        dbias[[0, j]] += g[[r, j]];
                    }
                }
                self.accum(*x, &dx);
                self.accum(*gain, &dgain);
                self.accum(*bias, &dbias);
            }
            Op::Transpose(x) => {
                let dx = g.t().to_owned();
                self.accum(*x, &dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.data(*p).nrows();
                    let dp = g.slice(s![start..start + n, ..]).to_owned();
                    self.accum(*p, &dp);
                    start += n;
                }
            }
            Op::SliceRows(x, start, end) => {
                if self.rg(*x) {
                    let mut dx = Array2::zeros(self.data(*x).dim());
                    dx.slice_mut(s![*start..*end, ..]).assign(g);
                    self.accum(*x, &dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.data(*p).ncols();
                    let dp = g.slice(s![.., start..start + n]).to_owned();
                    self.accum(*p, &dp);
                    start += n;
                }
            }
            Op::SliceCols(x, start, end) => {
                if self.rg(*x) {
                    let mut dx = Array2::zeros(self.data(*x).dim());
                    dx.slice_mut(s![.., *start..*end]).assign(g);
                    self.accum(*x, &dx);
                }
            }
            Op::GatherRows(table, ids) => {
                if self.rg(*table) {
                    let mut dt = Array2::zeros(self.data(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(id);
                        row += &g.row(r);
                    }
                    self.accum(*table, &dt);
                }
            }
            Op::Dropout { x, mask } => {
                let dx = g * mask;
                self.accum(*x, &dx);
            }
            Op::NllMean {
                logits,
                rows,
                targets,
            } => {
                if self.rg(*logits) {
                    let gscale = g[[0, 0]] / rows.len() as f64;
                    let ld = self.data(*logits);
                    let mut dl = Array2::zeros(ld.dim());
                    for (&r, &t) in rows.iter().zip(targets) {
                        let probs = softmax_row(&ld.row(r).to_owned());
                        for j in 0..ld.ncols() {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[[r, j]] += gscale * (probs[j] - onehot);
                        }
                    }
                    self.accum(*logits, &dl);
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Row-wise stable softmax (pure helper, also used outside the tape).
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn softmax_row(row: &ndarray::Array1<f64>) -> ndarray::Array1<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e = row.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e.mapv_inplace(|v| v / sum);
    e
}

/// `log softmax(row)[t]`, numerically stable.
pub fn log_softmax_entry(row: &ndarray::Array1<f64>, t: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[t] - lse
}
