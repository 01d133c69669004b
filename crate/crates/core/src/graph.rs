//! Reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Values are kept
//! on the nodes; [`Graph::backward`] walks the tape in reverse and returns
//! gradients for trainable parameter leaves. Higher-rank views (segmented
//! arrays, attention maps) are expressed through [`Graph::gather`], which
//! selects elements by flat index and scatters gradients back.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Silu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    MeanAll(Var),
    MeanRows(Var),
    GroupSumRows(Var, usize),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Conv3x3 {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    Rnn {
        x: Var,
        w_in: Var,
        w_rec: Var,
        bias: Var,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

const LN_EPS: f64 = 1e-5;

/// Gradients of trainable parameters, keyed by parameter id.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: HashMap<ParamId, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.map.get(&id)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Array2<f64>> {
        self.map.get_mut(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.map.keys().copied()
    }

    /// Adds `scale * other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        let mut ids: Vec<_> = other.map.keys().copied().collect();
        ids.sort();
        for id in ids {
            let g = &other.map[&id];
            match self.map.get_mut(&id) {
                Some(acc) => acc.scaled_add(scale, g),
                None => {
                    self.map.insert(id, g * scale);
                }
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.map
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    cached: HashMap<(usize, ParamId), Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "not a scalar node");
        val[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that gradients are tracked for but which is not a parameter.
    /// Used by tests probing input sensitivities.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Inserts a parameter leaf. Parameters of a frozen store become
    /// constants; trainable ones are tracked and reported by [`Graph::backward`].
    /// Repeated requests for the same parameter reuse one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.instance(), id);
        if let Some(&v) = self.cached.get(&key) {
            return v;
        }
        let value = store.value(id).clone();
        let v = if store.is_frozen() {
            self.constant(value)
        } else {
            let v = self.push(value, Op::Leaf, true);
            self.params.push((id, v));
            v
        };
        self.cached.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul {:?} x {:?}",
            va.dim(),
            vb.dim()
        );
        let out = va.dot(vb);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let out = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape");
        let out = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape");
        let out = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `a + row`, with the 1×m `row` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.nrows(), 1, "add_row expects a single row");
        assert_eq!(va.ncols(), vr.ncols(), "add_row width");
        let out = va + vr;
        let rg = self.rg(&[a, row]);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// `a * col`, with the n×1 `col` broadcast over the columns of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert_eq!(vc.ncols(), 1, "mul_col expects a single column");
        assert_eq!(va.nrows(), vc.nrows(), "mul_col height");
        let out = va * vc;
        let rg = self.rg(&[a, col]);
        self.push(out, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().as_standard_layout().into_owned();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise standardisation to zero mean and unit variance.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LayerNormRows(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanAll(a), rg)
    }

    /// Mean over rows: n×m → 1×m.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mean_axis(Axis(0))
            .unwrap()
            .insert_axis(Axis(0));
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanRows(a), rg)
    }

    /// Sums consecutive groups of `group` rows: n×m → (n/group)×m.
    pub fn group_sum_rows(&mut self, a: Var, group: usize) -> Var {
        let v = self.value(a);
        let (n, m) = v.dim();
        assert!(group > 0 && n % group == 0, "group_sum_rows {n} by {group}");
        let out = v
            .to_shape(((n / group, group, m), ndarray::Order::RowMajor))
            .unwrap()
            .sum_axis(Axis(1));
        let rg = self.rg(&[a]);
        self.push(out, Op::GroupSumRows(a, group), rg)
    }

    /// Builds a `rows × cols` node whose element `k` (row-major) is the
    /// element at flat index `indices[k]` of `a`. Indices may repeat.
    pub fn gather(&mut self, a: Var, rows: usize, cols: usize, indices: Vec<usize>) -> Var {
        assert_eq!(indices.len(), rows * cols, "gather index count");
        let src = self.value(a).as_standard_layout();
        let flat = src.as_slice().unwrap();
        let data: Vec<f64> = indices.iter().map(|&i| flat[i]).collect();
        let out = Array2::from_shape_vec((rows, cols), data).unwrap();
        let rg = self.rg(&[a]);
        self.push(out, Op::Gather(a, indices), rg)
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (_, m) = self.shape(a);
        let idx = (start * m..end * m).collect();
        self.gather(a, end - start, m, idx)
    }

    /// Re-lays `a` in the given row order.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let (_, m) = self.shape(a);
        let idx = rows.iter().flat_map(|&r| r * m..(r + 1) * m).collect();
        self.gather(a, rows.len(), m, idx)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(n * m, rows * cols, "reshape size");
        self.gather(a, rows, cols, (0..n * m).collect())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows widths");
        let rg = self.rg(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols heights");
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Single-map 3×3 convolution over the (time, channel) plane with stride
    /// 1 and replication padding; `bias` is 1×1.
    pub fn conv3x3(&mut self, x: Var, kernel: Var, bias: Var) -> Var {
        assert_eq!(self.shape(kernel), (3, 3), "conv kernel must be 3x3");
        assert_eq!(self.shape(bias), (1, 1), "conv bias must be 1x1");
        let out = conv3x3_forward(self.value(x), self.value(kernel), self.value(bias)[[0, 0]]);
        let rg = self.rg(&[x, kernel, bias]);
        self.push(out, Op::Conv3x3 { x, kernel, bias }, rg)
    }

    /// Elman recurrence `h_t = tanh(x_t W + h_{t-1} U + b)` with `h_{-1} = 0`.
    pub fn rnn_tanh(&mut self, x: Var, w_in: Var, w_rec: Var, bias: Var) -> Var {
        let (vx, vw, vu, vb) = (
            self.value(x),
            self.value(w_in),
            self.value(w_rec),
            self.value(bias),
        );
        let hidden = vw.ncols();
        assert_eq!(vx.ncols(), vw.nrows(), "rnn input width");
        assert_eq!(vu.dim(), (hidden, hidden), "rnn recurrent shape");
        assert_eq!(vb.dim(), (1, hidden), "rnn bias shape");
        let pre = vx.dot(vw) + vb;
        let mut out = Array2::zeros((vx.nrows(), hidden));
        for t in 0..vx.nrows() {
            let mut a = pre.row(t).to_owned();
            if t > 0 {
                a += &out.row(t - 1).dot(vu);
            }
            out.row_mut(t).assign(&a.mapv(f64::tanh));
        }
        let rg = self.rg(&[x, w_in, w_rec, bias]);
        self.push(
            out,
            Op::Rnn {
                x,
                w_in,
                w_rec,
                bias,
            },
            rg,
        )
    }

    /// Backpropagates from the 1×1 node `loss` and returns the gradients of
    /// every trainable parameter leaf that influenced it.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut out = Gradients::default();
        for &(id, v) in &self.params {
            if v.0 <= loss.0 {
                if let Some(g) = grads[v.0].take() {
                    out.map.insert(id, g);
                }
            }
        }
        out
    }

    /// Gradient of `loss` with respect to an arbitrary node.
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Option<Array2<f64>> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (wrt.0 + 1..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
        }
        grads.get_mut(wrt.0).and_then(Option::take)
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Array2<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if rg(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    acc(*a, g * val(*b));
                }
                if rg(*b) {
                    acc(*b, g * val(*a));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if rg(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, col) => {
                if rg(*a) {
                    acc(*a, g * val(*col));
                }
                if rg(*col) {
                    let d = (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*col, d);
                }
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::Transpose(a) => acc(*a, g.t().as_standard_layout().into_owned()),
            Op::Silu(a) => {
                let d = Zip::from(g).and(val(*a)).map_collect(|&g, &x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                });
                acc(*a, d);
            }
            Op::Tanh(a) => {
                let d = Zip::from(g)
                    .and(&node.value)
                    .map_collect(|&g, &y| g * (1.0 - y * y));
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let d = Zip::from(g)
                    .and(&node.value)
                    .map_collect(|&g, &y| g * y * (1.0 - y));
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*a, y * &(g - &dot));
            }
            Op::LayerNormRows(a) => {
                let x = val(*a);
                let y = &node.value;
                let n = x.ncols() as f64;
                let mut d = Array2::zeros(x.dim());
                for r in 0..x.nrows() {
                    let xr = x.row(r);
                    let mean = xr.sum() / n;
                    let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mg = gr.sum() / n;
                    let mgy = gr.dot(&yr) / n;
                    d.row_mut(r).assign(&((&gr - mg - &(&yr * mgy)) * inv));
                }
                acc(*a, d);
            }
            Op::MeanAll(a) => {
                let (n, m) = val(*a).dim();
                acc(*a, Array2::from_elem((n, m), g[[0, 0]] / (n * m) as f64));
            }
            Op::MeanRows(a) => {
                let n = val(*a).nrows();
                let row = g / n as f64;
                let d = row.broadcast(val(*a).dim()).unwrap().to_owned();
                acc(*a, d);
            }
            Op::GroupSumRows(a, group) => {
                let (n, m) = val(*a).dim();
                let mut d = Array2::zeros((n, m));
                for r in 0..n {
                    d.row_mut(r).assign(&g.row(r / group));
                }
                acc(*a, d);
            }
            Op::Gather(a, indices) => {
                let src = val(*a);
                let mut d = Array2::<f64>::zeros(src.dim());
                let gs = g.as_standard_layout();
                let gflat = gs.as_slice().unwrap();
                let flat = d.as_slice_mut().unwrap();
                for (k, &idx) in indices.iter().enumerate() {
                    flat[idx] += gflat[k];
                }
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = val(*p).nrows();
                    if rg(*p) {
                        acc(*p, g.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let m = val(*p).ncols();
                    if rg(*p) {
                        acc(*p, g.slice(s![.., start..start + m]).to_owned());
                    }
                    start += m;
                }
            }
            Op::Conv3x3 { x, kernel, bias } => {
                let vx = val(*x);
                let vk = val(*kernel);
                let (t, c) = vx.dim();
                if rg(*x) {
                    let mut dx = Array2::zeros((t, c));
                    for i in 0..t {
                        for j in 0..c {
                            let gij = g[[i, j]];
                            for (di, ii) in neighbours(i, t).into_iter().enumerate() {
                                for (dj, jj) in neighbours(j, c).into_iter().enumerate() {
                                    dx[[ii, jj]] += vk[[di, dj]] * gij;
                                }
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if rg(*kernel) {
                    let mut dk = Array2::zeros((3, 3));
                    for i in 0..t {
                        let rows = neighbours(i, t);
                        for j in 0..c {
                            let cols = neighbours(j, c);
                            let gij = g[[i, j]];
                            for di in 0..3 {
                                for dj in 0..3 {
                                    dk[[di, dj]] += gij * vx[[rows[di], cols[dj]]];
                                }
                            }
                        }
                    }
                    acc(*kernel, dk);
                }
                if rg(*bias) {
                    acc(*bias, Array2::from_elem((1, 1), g.sum()));
                }
            }
            Op::Rnn {
                x,
                w_in,
                w_rec,
                bias,
            } => {
                let (vx, vw, vu) = (val(*x), val(*w_in), val(*w_rec));
                let h = &node.value;
                let (t_len, hidden) = h.dim();
                let mut da = Array2::zeros((t_len, hidden));
                let mut carry = ndarray::Array1::<f64>::zeros(hidden);
                for t in (0..t_len).rev() {
                    let dh = &g.row(t) + &carry;
                    let a = Zip::from(&dh)
                        .and(h.row(t))
                        .map_collect(|&d, &y| d * (1.0 - y * y));
                    carry = vu.dot(&a);
                    da.row_mut(t).assign(&a);
                }
                if rg(*x) {
                    acc(*x, da.dot(&vw.t()));
                }
                if rg(*w_in) {
                    acc(*w_in, vx.t().dot(&da));
                }
                if rg(*w_rec) && t_len > 1 {
                    let prev = h.slice(s![..t_len - 1, ..]);
                    acc(*w_rec, prev.t().dot(&da.slice(s![1.., ..])));
                }
                if rg(*bias) {
                    acc(*bias, da.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Clamped indices of `i - 1, i, i + 1` inside `0..n`.
#[inline]
fn neighbours(i: usize, n: usize) -> [usize; 3] {
    [i.saturating_sub(1), i, (i + 1).min(n - 1)]
}

pub(crate) fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

pub(crate) fn conv3x3_forward(x: &Array2<f64>, k: &Array2<f64>, bias: f64) -> Array2<f64> {
    let (t, c) = x.dim();
    let mut out = Array2::from_elem((t, c), bias);
    for i in 0..t {
        let rows = neighbours(i, t);
        for j in 0..c {
            let cols = neighbours(j, c);
            let mut acc = 0.0;
            for di in 0..3 {
                for dj in 0..3 {
                    acc += k[[di, dj]] * x[[rows[di], cols[dj]]];
                }
            }
            out[[i, j]] += acc;
        }
    }
    out
}
