//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op appends one node holding its forward value; node ids are
//! therefore a topological order and [`Graph::backward`] is a single reverse
//! sweep. A graph is built per forward pass and thrown away afterwards.

use rand::Rng;

use super::params::{ParamId, ParameterSet};
use super::tensor::{matmul_raw, shape_err, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Relu(usize),
    Tanh(usize),
    Concat(Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    SoftmaxRows(usize),
    Embedding { table: usize, indices: Vec<usize> },
    SegmentSum { x: usize, group: usize },
    Conv { seq: usize, filters: usize, bias: usize, batch: usize, len: usize, span: usize },
    MaxOverTime { x: usize, argmax: Vec<usize> },
    Dropout { x: usize, mask: Vec<f64> },
    RowDot(usize, usize),
    Sum(usize),
    Mse(usize, usize),
    GatherCols { x: usize, index: Vec<usize> },
}

#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    bindings: Vec<Option<ParamId>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        self.bindings.push(None);
        Var(self.values.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs = inputs.iter().any(|&i| self.needs_grad[i]);
        self.push(value, op, needs)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Adds a parameter as a gradient-carrying leaf bound to `id`.
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> Var {
        let v = self.leaf(params.value(id).clone(), true);
        self.bindings[v.0] = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient accumulated at `v` by the last backward sweep, if any.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::from_parts(self.values[v.0].shape().to_vec(), g.clone()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        Ok(self.derived(Tensor::from_parts(vec![m, n], out), Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.values[a.0];
        if t.rank() != 2 {
            return shape_err("transpose", format!("{:?}", t.shape()));
        }
        let out = t.transposed();
        Ok(self.derived(out, Op::Transpose(a.0), &[a.0]))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return shape_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.derived(out, op, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.values[a.0];
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        self.derived(out, op, &[a.0])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a.0, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a.0))
    }

    /// Adds vector `b[n]` to every row of `x[.., n]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (&self.values[x.0], &self.values[b.0]);
        let (_, n) = tx.dims2();
        if tb.len() != n {
            return shape_err("add_row", format!("{:?} + {:?}", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        Ok(self.derived(out, Op::AddRow(x.0, b.0), &[x.0, b.0]))
    }

    /// Concatenates along the last axis; all leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(v) => &self.values[v.0],
            None => return Err(TensorError::EmptyInput("concat")),
        };
        let lead = &first.shape()[..first.rank() - 1];
        let rows: usize = lead.iter().product();
        let mut width = 0;
        for v in parts {
            let s = self.values[v.0].shape();
            if &s[..s.len() - 1] != lead {
                return shape_err("concat", format!("{:?} vs {:?}", first.shape(), s));
            }
            width += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for v in parts {
                data.extend_from_slice(self.values[v.0].row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        Ok(self.derived(Tensor::from_parts(shape, data), Op::Concat(ids.clone()), &ids))
    }

    /// Stacks 2-D tensors with equal column counts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(v) => self.values[v.0].dims2().1,
            None => return Err(TensorError::EmptyInput("concat_rows")),
        };
        let mut data = Vec::new();
        for v in parts {
            let t = &self.values[v.0];
            if t.rank() != 2 || t.shape()[1] != cols {
                return shape_err("concat_rows", format!("{:?} with {cols} columns", t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols;
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        Ok(self.derived(Tensor::from_parts(vec![rows, cols], data), Op::ConcatRows(ids.clone()), &ids))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.values[a.0].clone().reshaped(shape)?;
        Ok(self.derived(out, Op::Reshape(a.0), &[a.0]))
    }

    /// Row-wise softmax with per-row max subtraction. A vector is one row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.values[a.0];
        if t.data().iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFiniteInput("softmax_rows"));
        }
        let (_, n) = t.dims2();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        Ok(self.derived(out, Op::SoftmaxRows(a.0), &[a.0]))
    }

    /// Gathers rows of `table[N, D]`; output is `[indices.len(), D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = &self.values[table.0];
        if t.rank() != 2 {
            return shape_err("embedding", format!("table shape {:?}", t.shape()));
        }
        if indices.is_empty() {
            return Err(TensorError::EmptyInput("embedding"));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(TensorError::IndexOutOfRange { index: i, len: n });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_parts(vec![indices.len(), d], data);
        Ok(self.derived(out, Op::Embedding { table: table.0, indices: indices.to_vec() }, &[table.0]))
    }

    /// Sums consecutive groups of `group` rows: `[B·group, D] -> [B, D]`.
    pub fn segment_sum(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = &self.values[x.0];
        let (rows, d) = t.dims2();
        if group == 0 || rows % group != 0 {
            return shape_err("segment_sum", format!("{rows} rows in groups of {group}"));
        }
        let b = rows / group;
        let mut data = vec![0.0; b * d];
        for (r, row) in t.data().chunks(d).enumerate() {
            for (o, &v) in data[(r / group) * d..(r / group + 1) * d].iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(self.derived(Tensor::from_parts(vec![b, d], data), Op::SegmentSum { x: x.0, group }, &[x.0]))
    }

    /// Full-width text convolution over a batch of sequences.
    ///
    /// `seq[B, L, D]`, `filters[F, w, D]`, `bias[F]` gives `[B, L-w+1, F]`
    /// where `out[b,t,f] = bias[f] + Σ_{u<w, d<D} seq[b,t+u,d]·filters[f,u,d]`.
    pub fn conv_text_bank(&mut self, seq: Var, filters: Var, bias: Var) -> Result<Var> {
        let (ts, tf, tb) = (&self.values[seq.0], &self.values[filters.0], &self.values[bias.0]);
        if ts.rank() != 3 || tf.rank() != 3 || ts.shape()[2] != tf.shape()[2] {
            return shape_err("conv_text", format!("seq {:?} filters {:?}", ts.shape(), tf.shape()));
        }
        let (batch, len, dim) = (ts.shape()[0], ts.shape()[1], ts.shape()[2]);
        let (nf, w) = (tf.shape()[0], tf.shape()[1]);
        if tb.len() != nf {
            return shape_err("conv_text", format!("{nf} filters but {} biases", tb.len()));
        }
        if w > len {
            return Err(TensorError::WindowTooLarge { window: w, len });
        }
        let steps = len - w + 1;
        let span = w * dim;
        let mut out = Vec::with_capacity(batch * steps * nf);
        for b in 0..batch {
            for t in 0..steps {
                let start = (b * len + t) * dim;
                let window = &ts.data()[start..start + span];
                for f in 0..nf {
                    let filt = &tf.data()[f * span..(f + 1) * span];
                    let dot: f64 = window.iter().zip(filt).map(|(x, y)| x * y).sum();
                    out.push(tb.data()[f] + dot);
                }
            }
        }
        let value = Tensor::from_parts(vec![batch, steps, nf], out);
        let op = Op::Conv { seq: seq.0, filters: filters.0, bias: bias.0, batch, len, span };
        Ok(self.derived(value, op, &[seq.0, filters.0, bias.0]))
    }

    /// Single-filter text convolution: `seq[L, D]`, `filter[w, D]`, scalar
    /// `bias` gives `[L-w+1]`.
    pub fn conv_text(&mut self, seq: Var, filter: Var, bias: Var) -> Result<Var> {
        let (ls, lf) = (self.values[seq.0].shape().to_vec(), self.values[filter.0].shape().to_vec());
        if ls.len() != 2 || lf.len() != 2 || self.values[bias.0].len() != 1 {
            return shape_err("conv_text", format!("seq {ls:?} filter {lf:?}"));
        }
        let s = self.reshape(seq, &[1, ls[0], ls[1]])?;
        let f = self.reshape(filter, &[1, lf[0], lf[1]])?;
        let out = self.conv_text_bank(s, f, bias)?;
        let steps = self.values[out.0].len();
        self.reshape(out, &[steps])
    }

    /// Max over the time axis of `x[B, T, F]`, giving `[B, F]`. The gradient
    /// goes to the first maximal position.
    pub fn max_over_time_bank(&mut self, x: Var) -> Result<Var> {
        let t = &self.values[x.0];
        if t.rank() != 3 {
            return shape_err("max_over_time", format!("{:?}", t.shape()));
        }
        let (b, steps, f) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut out = Vec::with_capacity(b * f);
        let mut argmax = Vec::with_capacity(b * f);
        for bi in 0..b {
            for fi in 0..f {
                let mut best = (bi * steps) * f + fi;
                for ti in 1..steps {
                    let idx = (bi * steps + ti) * f + fi;
                    if t.data()[idx] > t.data()[best] {
                        best = idx;
                    }
                }
                out.push(t.data()[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::from_parts(vec![b, f], out);
        Ok(self.derived(value, Op::MaxOverTime { x: x.0, argmax }, &[x.0]))
    }

    /// Maximum of a vector as a `[1]` tensor.
    pub fn max_over_time(&mut self, x: Var) -> Result<Var> {
        let n = self.values[x.0].len();
        if self.values[x.0].rank() != 1 {
            return shape_err("max_over_time", format!("{:?}", self.values[x.0].shape()));
        }
        let r = self.reshape(x, &[1, n, 1])?;
        let m = self.max_over_time_bank(r)?;
        self.reshape(m, &[1])
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidRate(rate));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = &self.values[x.0];
        let mask: Vec<f64> =
            (0..t.len()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.derived(out, Op::Dropout { x: x.0, mask }, &[x.0]))
    }

    /// Row-wise inner products of `a[B, n]` and `b[B, n]`, giving `[B]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return shape_err("row_dot", format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let (m, n) = ta.dims2();
        let out = (0..m)
            .map(|i| ta.data()[i * n..(i + 1) * n].iter().zip(&tb.data()[i * n..(i + 1) * n]).map(|(x, y)| x * y).sum())
            .collect();
        Ok(self.derived(Tensor::from_parts(vec![m], out), Op::RowDot(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data().iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    /// Mean squared difference of two equally shaped tensors.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (&self.values[pred.0], &self.values[target.0]);
        if tp.shape() != tt.shape() {
            return shape_err("mse_loss", format!("{:?} vs {:?}", tp.shape(), tt.shape()));
        }
        let n = tp.len() as f64;
        let s: f64 = tp.data().iter().zip(tt.data()).map(|(p, t)| (p - t) * (p - t)).sum();
        Ok(self.derived(Tensor::scalar(s / n), Op::Mse(pred.0, target.0), &[pred.0, target.0]))
    }

    /// `out[i, j] = x[i, index[i·n + j]]` for `x[m, p]`, giving `[m, n]`.
    pub fn gather_cols(&mut self, x: Var, index: &[usize], n: usize) -> Result<Var> {
        let t = &self.values[x.0];
        let (m, p) = t.dims2();
        if index.len() != m * n {
            return shape_err("gather_cols", format!("{} indices for {m}x{n}", index.len()));
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                let c = index[i * n + j];
                if c >= p {
                    return Err(TensorError::IndexOutOfRange { index: c, len: p });
                }
                data.push(t.data()[i * p + c]);
            }
        }
        let out = Tensor::from_parts(vec![m, n], data);
        Ok(self.derived(out, Op::GatherCols { x: x.0, index: index.to_vec() }, &[x.0]))
    }

    // ---- reverse sweep ----

    /// Propagates `∂loss/∂node` to every node that requires a gradient.
    ///
    /// Leaf gradients accumulate across calls; intermediate gradients are
    /// recomputed on each call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(TensorError::NotScalarLoss(self.values[loss.0].shape().to_vec()));
        }
        for (i, op) in self.ops.iter().enumerate() {
            if !matches!(op, Op::Leaf) {
                self.grads[i] = None;
            }
        }
        if !self.needs_grad[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let Graph { values, grads, ops, needs_grad, .. } = self;
        for i in (0..=loss.0).rev() {
            if matches!(ops[i], Op::Leaf) || !needs_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&ops[i], &g, &values[i], values, grads, needs_grad);
            grads[i] = Some(g);
        }
        Ok(())
    }

    /// Adds the gradients of every parameter leaf into `params`.
    pub fn accumulate_into(&self, params: &mut ParameterSet) {
        for (i, b) in self.bindings.iter().enumerate() {
            if let (Some(id), Some(g)) = (b, &self.grads[i]) {
                params.accumulate_grad(*id, g);
            }
        }
    }

    /// Clears all gradients, including leaves.
    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }
}

fn buf<'a>(grads: &'a mut [Option<Vec<f64>>], needs: &[bool], values: &[Tensor], j: usize) -> Option<&'a mut Vec<f64>> {
    if !needs[j] {
        return None;
    }
    Some(grads[j].get_or_insert_with(|| vec![0.0; values[j].len()]))
}

fn backprop(
    op: &Op,
    g: &[f64],
    out: &Tensor,
    values: &[Tensor],
    grads: &mut [Option<Vec<f64>>],
    needs: &[bool],
) {
    macro_rules! acc {
        ($j:expr, |$b:ident| $body:block) => {
            if let Some($b) = buf(grads, needs, values, $j) $body
        };
    }
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (&values[*a], &values[*b]);
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            acc!(*a, |ga| {
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &tb.data()[p * n..(p + 1) * n];
                        ga[i * k + p] += gi.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            });
            acc!(*b, |gb| {
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = ta.data()[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(gi) {
                            *o += aip * gv;
                        }
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (m, n) = values[*a].dims2();
            acc!(*a, |ga| {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            acc!(*a, |ga| { add_into(ga, g) });
            acc!(*b, |gb| { add_into(gb, g) });
        }
        Op::Sub(a, b) => {
            acc!(*a, |ga| { add_into(ga, g) });
            acc!(*b, |gb| {
                for (o, v) in gb.iter_mut().zip(g) {
                    *o -= v;
                }
            });
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (&values[*a], &values[*b]);
            acc!(*a, |ga| {
                for ((o, gv), y) in ga.iter_mut().zip(g).zip(tb.data()) {
                    *o += gv * y;
                }
            });
            acc!(*b, |gb| {
                for ((o, gv), x) in gb.iter_mut().zip(g).zip(ta.data()) {
                    *o += gv * x;
                }
            });
        }
        Op::Scale(a, c) => acc!(*a, |ga| {
            for (o, v) in ga.iter_mut().zip(g) {
                *o += c * v;
            }
        }),
        Op::AddRow(x, b) => {
            let n = values[*b].len();
            acc!(*x, |gx| { add_into(gx, g) });
            acc!(*b, |gb| {
                for row in g.chunks(n) {
                    add_into(gb, row);
                }
            });
        }
        Op::Relu(a) => acc!(*a, |ga| {
            for ((o, gv), y) in ga.iter_mut().zip(g).zip(out.data()) {
                if *y > 0.0 {
                    *o += gv;
                }
            }
        }),
        Op::Tanh(a) => acc!(*a, |ga| {
            for ((o, gv), y) in ga.iter_mut().zip(g).zip(out.data()) {
                *o += gv * (1.0 - y * y);
            }
        }),
        Op::Concat(parts) => {
            let (rows, width) = out.dims2();
            let mut off = 0;
            for &p in parts {
                let w = values[p].dims2().1;
                acc!(p, |gp| {
                    for r in 0..rows {
                        add_into(&mut gp[r * w..(r + 1) * w], &g[r * width + off..r * width + off + w]);
                    }
                });
                off += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = values[p].len();
                acc!(p, |gp| { add_into(gp, &g[off..off + len]) });
                off += len;
            }
        }
        Op::Reshape(a) => acc!(*a, |ga| { add_into(ga, g) }),
        Op::SoftmaxRows(a) => {
            let (_, n) = out.dims2();
            acc!(*a, |ga| {
                for ((go, gr), yr) in ga.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((o, gv), y) in go.iter_mut().zip(gr).zip(yr) {
                        *o += y * (gv - dot);
                    }
                }
            });
        }
        Op::Embedding { table, indices } => {
            let d = values[*table].shape()[1];
            acc!(*table, |gt| {
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                }
            });
        }
        Op::SegmentSum { x, group } => {
            let d = out.dims2().1;
            acc!(*x, |gx| {
                for (r, row) in gx.chunks_mut(d).enumerate() {
                    add_into(row, &g[(r / group) * d..(r / group + 1) * d]);
                }
            });
        }
        Op::Conv { seq, filters, bias, batch, len, span } => {
            let steps = out.shape()[1];
            let nf = out.shape()[2];
            let dim = values[*seq].shape()[2];
            let (ts, tf) = (&values[*seq], &values[*filters]);
            acc!(*seq, |gs| {
                for b in 0..*batch {
                    for t in 0..steps {
                        let start = (b * len + t) * dim;
                        for f in 0..nf {
                            let gv = g[(b * steps + t) * nf + f];
                            let filt = &tf.data()[f * span..(f + 1) * span];
                            for (o, w) in gs[start..start + span].iter_mut().zip(filt) {
                                *o += gv * w;
                            }
                        }
                    }
                }
            });
            acc!(*filters, |gf| {
                for b in 0..*batch {
                    for t in 0..steps {
                        let start = (b * len + t) * dim;
                        let window = &ts.data()[start..start + span];
                        for f in 0..nf {
                            let gv = g[(b * steps + t) * nf + f];
                            for (o, x) in gf[f * span..(f + 1) * span].iter_mut().zip(window) {
                                *o += gv * x;
                            }
                        }
                    }
                }
            });
            acc!(*bias, |gb| {
                for row in g.chunks(nf) {
                    add_into(gb, row);
                }
            });
        }
        Op::MaxOverTime { x, argmax } => acc!(*x, |gx| {
            for (&src, gv) in argmax.iter().zip(g) {
                gx[src] += gv;
            }
        }),
        Op::Dropout { x, mask } => acc!(*x, |gx| {
            for ((o, gv), m) in gx.iter_mut().zip(g).zip(mask) {
                *o += gv * m;
            }
        }),
        Op::RowDot(a, b) => {
            let (ta, tb) = (&values[*a], &values[*b]);
            let n = ta.dims2().1;
            acc!(*a, |ga| {
                for (i, gv) in g.iter().enumerate() {
                    for (o, y) in ga[i * n..(i + 1) * n].iter_mut().zip(&tb.data()[i * n..(i + 1) * n]) {
                        *o += gv * y;
                    }
                }
            });
            acc!(*b, |gb| {
                for (i, gv) in g.iter().enumerate() {
                    for (o, x) in gb[i * n..(i + 1) * n].iter_mut().zip(&ta.data()[i * n..(i + 1) * n]) {
                        *o += gv * x;
                    }
                }
            });
        }
        Op::Sum(a) => acc!(*a, |ga| {
            for o in ga.iter_mut() {
                *o += g[0];
            }
        }),
        Op::Mse(p, t) => {
            let (tp, tt) = (&values[*p], &values[*t]);
            let scale = 2.0 * g[0] / tp.len() as f64;
            acc!(*p, |gp| {
                for ((o, x), y) in gp.iter_mut().zip(tp.data()).zip(tt.data()) {
                    *o += scale * (x - y);
                }
            });
            acc!(*t, |gt| {
                for ((o, x), y) in gt.iter_mut().zip(tp.data()).zip(tt.data()) {
                    *o -= scale * (x - y);
                }
            });
        }
        Op::GatherCols { x, index } => {
            let (m, n) = out.dims2();
            let p = values[*x].dims2().1;
            acc!(*x, |gx| {
                for i in 0..m {
                    for j in 0..n {
                        gx[i * p + index[i * n + j]] += g[i * n + j];
                    }
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}
