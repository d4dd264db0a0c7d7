use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Relu => x.max(T::zero()),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `a [m×n] + b [1×n]`, `b` broadcast over rows.
    AddRow(usize, usize),
    Scale(usize, T),
    Act(usize, Activation),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    SliceCols {
        src: usize,
        start: usize,
    },
    SliceRows {
        src: usize,
        start: usize,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
        frozen_row: Option<usize>,
    },
    MeanRows(usize),
    MaxOverTime {
        src: usize,
        argmax: Vec<usize>,
    },
    Unfold {
        src: usize,
    },
    Sum(usize),
    SumSquares(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        label: usize,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of every operation evaluated in one forward pass.
///
/// Nodes are only ever appended, so each record's inputs precede it and the
/// tape is already in topological order.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{name} produced a non-finite value")));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", value, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    /// Adds the row vector `b [1×n]` to every row of `a [m×n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_rank2("add_row")?;
        if bv.shape() != [1, av.cols()] {
            return Err(Error::Dimension(format!(
                "add_row of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, &y) in value.row_slice_mut(r).iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        self.push("add_row", value, Op::AddRow(a.0, b.0), &[a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push("scale", value, Op::Scale(a.0, factor), &[a.0])
    }

    pub fn apply_activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| kind.apply(v));
        self.push("activation", value, Op::Act(x.0, kind), &[x.0])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply_activation(Activation::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply_activation(Activation::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply_activation(Activation::Relu, x)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::Dimension(format!(
                    "cannot concat {base:?} with {s:?} along axis {axis}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat", value, Op::Concat { parts: idx.clone(), axis }, &idx)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(src);
        v.expect_rank2("slice_cols")?;
        if start + len > v.cols() {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} of {:?}",
                start + len,
                v.shape()
            )));
        }
        let mut data = Vec::with_capacity(v.rows() * len);
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row_slice(r)[start..start + len]);
        }
        let value = Tensor::matrix(v.rows(), len, data)?;
        self.push("slice_cols", value, Op::SliceCols { src: src.0, start }, &[src.0])
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(src);
        v.expect_rank2("slice_rows")?;
        if start + len > v.rows() {
            return Err(Error::Dimension(format!(
                "row slice {start}..{} of {:?}",
                start + len,
                v.shape()
            )));
        }
        let c = v.cols();
        let value = Tensor::matrix(len, c, v.data()[start * c..(start + len) * c].to_vec())?;
        self.push("slice_rows", value, Op::SliceRows { src: src.0, start }, &[src.0])
    }

    /// Row gather `table[ids]`. Gradient for `frozen_row` is never accumulated.
    pub fn gather(&mut self, table: Var, ids: &[usize], frozen_row: Option<usize>) -> Result<Var> {
        let t = self.value(table);
        t.expect_rank2("gather")?;
        let (v, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(format!("token id {id} out of range for {v} rows")));
            }
            data.extend_from_slice(t.row_slice(id));
        }
        let value = Tensor::matrix(ids.len(), d, data)?;
        let op = Op::Gather {
            table: table.0,
            ids: ids.to_vec(),
            frozen_row,
        };
        self.push("gather", value, op, &[table.0])
    }

    /// Column-wise mean of a matrix, as a `1 × cols` row.
    pub fn mean_rows(&mut self, src: Var) -> Result<Var> {
        let v = self.value(src);
        v.expect_rank2("mean_rows")?;
        if v.rows() == 0 {
            return Err(Error::Input("mean over zero rows".into()));
        }
        let n = T::from_count(v.rows());
        let mut out = vec![T::zero(); v.cols()];
        for r in 0..v.rows() {
            for (o, &x) in out.iter_mut().zip(v.row_slice(r)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= n;
        }
        self.push("mean_rows", Tensor::row(out), Op::MeanRows(src.0), &[src.0])
    }

    /// Per-column maximum over the time (row) axis. Ties go to the first row.
    pub fn max_over_time(&mut self, src: Var) -> Result<Var> {
        let v = self.value(src);
        v.expect_rank2("max_over_time")?;
        if v.rows() == 0 {
            return Err(Error::Dimension("max_over_time on an empty time axis".into()));
        }
        let mut argmax = vec![0; v.cols()];
        let mut best = v.row_slice(0).to_vec();
        for r in 1..v.rows() {
            for (c, &x) in v.row_slice(r).iter().enumerate() {
                if x > best[c] {
                    best[c] = x;
                    argmax[c] = r;
                }
            }
        }
        let op = Op::MaxOverTime {
            src: src.0,
            argmax,
        };
        self.push("max_over_time", Tensor::row(best), op, &[src.0])
    }

    /// Stacks every window of `window` consecutive rows into one row:
    /// `[n × d] → [(n − window + 1) × window·d]`.
    pub fn unfold(&mut self, src: Var, window: usize) -> Result<Var> {
        let v = self.value(src);
        v.expect_rank2("unfold")?;
        let (n, d) = (v.rows(), v.cols());
        if window == 0 || window > n {
            return Err(Error::Dimension(format!(
                "window {window} does not fit a sequence of {n} rows"
            )));
        }
        let steps = n - window + 1;
        let mut data = Vec::with_capacity(steps * window * d);
        for i in 0..steps {
            data.extend_from_slice(&v.data()[i * d..(i + window) * d]);
        }
        let value = Tensor::matrix(steps, window * d, data)?;
        self.push("unfold", value, Op::Unfold { src: src.0 }, &[src.0])
    }

    pub fn sum(&mut self, src: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(src).sum());
        self.push("sum", value, Op::Sum(src.0), &[src.0])
    }

    pub fn sum_squares(&mut self, src: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(src).sum_squares());
        self.push("sum_squares", value, Op::SumSquares(src.0), &[src.0])
    }

    /// `−log softmax(logits)[label]`, evaluated with max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(Error::Input(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let probs = softmax(z);
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let log_norm = z.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
        let loss = log_norm - z[label];
        let op = Op::SoftmaxCrossEntropy {
            logits: logits.0,
            label,
            probs,
        };
        self.push("softmax_cross_entropy", Tensor::scalar(loss), op, &[logits.0])
    }

    /// Reverse sweep from a scalar `loss`. Gradients of trainable leaves are
    /// added to whatever they already hold, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let seed = self.value(loss);
        if seed.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                seed.shape()
            )));
        }
        let seed = Tensor::full(seed.shape(), T::one());
        let mut adj: Vec<Option<Tensor<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if !g.is_finite() {
                        return Err(Error::Numeric("non-finite gradient".into()));
                    }
                    match &mut self.grads[i] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot @ None => *slot = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a].requires_grad {
                        let ga = g.matmul(&self.nodes[b].value.transpose()?)?;
                        accumulate(&mut adj, a, ga)?;
                    }
                    if self.nodes[b].requires_grad {
                        let gb = self.nodes[a].value.transpose()?.matmul(&g)?;
                        accumulate(&mut adj, b, gb)?;
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[b].requires_grad {
                        accumulate(&mut adj, b, g.clone())?;
                    }
                    accumulate(&mut adj, a, g)?;
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[b].requires_grad {
                        accumulate(&mut adj, b, g.map(|x| -x))?;
                    }
                    accumulate(&mut adj, a, g)?;
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a].requires_grad {
                        let ga = g.zip_map(&self.nodes[b].value, |x, y| x * y)?;
                        accumulate(&mut adj, a, ga)?;
                    }
                    if self.nodes[b].requires_grad {
                        let gb = g.zip_map(&self.nodes[a].value, |x, y| x * y)?;
                        accumulate(&mut adj, b, gb)?;
                    }
                }
                Op::AddRow(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[b].requires_grad {
                        let mut gb = vec![T::zero(); g.cols()];
                        for r in 0..g.rows() {
                            for (o, &x) in gb.iter_mut().zip(g.row_slice(r)) {
                                *o += x;
                            }
                        }
                        accumulate(&mut adj, b, Tensor::row(gb))?;
                    }
                    accumulate(&mut adj, a, g)?;
                }
                Op::Scale(a, factor) => {
                    let f = *factor;
                    accumulate(&mut adj, *a, g.map(|x| x * f))?;
                }
                Op::Act(a, kind) => {
                    let a = *a;
                    let input = &self.nodes[a].value;
                    let output = &node.value;
                    let mut ga = g;
                    for ((gx, &x), &y) in ga.data_mut().iter_mut().zip(input.data()).zip(output.data()) {
                        *gx *= kind.derivative(x, y);
                    }
                    accumulate(&mut adj, a, ga)?;
                }
                Op::Concat { parts, axis } => {
                    let shape = g.shape().to_vec();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let total = shape[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let pshape = self.nodes[p].value.shape().to_vec();
                        let chunk = pshape[*axis] * inner;
                        if self.nodes[p].requires_grad {
                            let mut data = Vec::with_capacity(outer * chunk);
                            for o in 0..outer {
                                let start = o * total + offset;
                                data.extend_from_slice(&g.data()[start..start + chunk]);
                            }
                            accumulate(&mut adj, p, Tensor::new(pshape, data)?)?;
                        }
                        offset += chunk;
                    }
                }
                Op::SliceCols { src, start } => {
                    let src = *src;
                    let mut gs = Tensor::zeros(self.nodes[src].value.shape());
                    for r in 0..g.rows() {
                        gs.row_slice_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row_slice(r));
                    }
                    accumulate(&mut adj, src, gs)?;
                }
                Op::SliceRows { src, start } => {
                    let src = *src;
                    let mut gs = Tensor::zeros(self.nodes[src].value.shape());
                    let c = g.cols();
                    gs.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut adj, src, gs)?;
                }
                Op::Gather {
                    table,
                    ids,
                    frozen_row,
                } => {
                    let table = *table;
                    let mut gt = Tensor::zeros(self.nodes[table].value.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        if Some(id) == *frozen_row {
                            continue;
                        }
                        for (o, &x) in gt.row_slice_mut(id).iter_mut().zip(g.row_slice(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut adj, table, gt)?;
                }
                Op::MeanRows(src) => {
                    let src = *src;
                    let rows = self.nodes[src].value.rows();
                    let n = T::from_count(rows);
                    let mut gs = Tensor::zeros(self.nodes[src].value.shape());
                    for r in 0..rows {
                        for (o, &x) in gs.row_slice_mut(r).iter_mut().zip(g.data()) {
                            *o = x / n;
                        }
                    }
                    accumulate(&mut adj, src, gs)?;
                }
                Op::MaxOverTime { src, argmax } => {
                    let src = *src;
                    let mut gs = Tensor::zeros(self.nodes[src].value.shape());
                    let cols = gs.cols();
                    for (c, &r) in argmax.iter().enumerate() {
                        gs.data_mut()[r * cols + c] = g.data()[c];
                    }
                    accumulate(&mut adj, src, gs)?;
                }
                Op::Unfold { src } => {
                    let src = *src;
                    let mut gs = Tensor::zeros(self.nodes[src].value.shape());
                    let d = gs.cols();
                    let width = g.cols();
                    for i in 0..g.rows() {
                        let dst = &mut gs.data_mut()[i * d..i * d + width];
                        for (o, &x) in dst.iter_mut().zip(g.row_slice(i)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut adj, src, gs)?;
                }
                Op::Sum(src) => {
                    let src = *src;
                    let upstream = g.data()[0];
                    let gs = Tensor::full(self.nodes[src].value.shape(), upstream);
                    accumulate(&mut adj, src, gs)?;
                }
                Op::SumSquares(src) => {
                    let src = *src;
                    let two_g = T::lit(2.0) * g.data()[0];
                    let gs = self.nodes[src].value.map(|x| two_g * x);
                    accumulate(&mut adj, src, gs)?;
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let upstream = g.data()[0];
                    let mut d = probs.clone();
                    d[*label] -= T::one();
                    for x in &mut d {
                        *x *= upstream;
                    }
                    let shape = self.nodes[*logits].value.shape().to_vec();
                    accumulate(&mut adj, *logits, Tensor::new(shape, d)?)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) -> Result<()> {
    match &mut adj[idx] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Numerically stable softmax of a flat slice.
pub(crate) fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = z.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::finite_difference_check;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, -1.0, 1.0, &mut rng)
    }

    /// Runs `build` on a fresh tape over leaves holding `inputs`, returning the
    /// loss and the analytic gradient of every input.
    fn eval<F>(inputs: &[Tensor<f64>], build: &F) -> Result<(f64, Vec<Tensor<f64>>)>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let value = tape.value(loss).data()[0];
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, grads))
    }

    fn check<F>(inputs: Vec<Tensor<f64>>, build: F) -> f64
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let (_, analytic) = eval(&inputs, &build).unwrap();
        let mut params = inputs;
        finite_difference_check(|p| eval(p, &build).map(|r| r.0), &mut params, &analytic, 1e-5).unwrap()
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let err = check(vec![rand_tensor(&[3, 4], 1), rand_tensor(&[4, 2], 2)], |t, v| {
            let c = t.matmul(v[0], v[1])?;
            let w = t.constant(rand_tensor(&[3, 2], 3));
            let p = t.mul(c, w)?;
            t.sum(p)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn concat_values_and_identity() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = t.constant(Tensor::new(vec![1], vec![3.0]).unwrap());
        let c = t.concat(&[a, b], 0).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);

        let empty = t.constant(Tensor::new(vec![0], vec![]).unwrap());
        let same = t.concat(&[a, empty], 0).unwrap();
        assert_eq!(t.value(same), t.value(a));
    }

    #[test]
    fn concat_rejects_mismatched_rows() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(t.concat(&[a, b], 1), Err(Error::Dimension(_))));
        assert!(t.concat(&[a, b], 0).is_ok());
    }

    #[test]
    fn concat_gradient_split() {
        let err = check(vec![rand_tensor(&[2, 3], 4), rand_tensor(&[2, 2], 5)], |t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            let w = t.constant(rand_tensor(&[2, 5], 6));
            let p = t.mul(c, w)?;
            let s = t.tanh(p)?;
            t.sum(s)
        });
        assert!(err < 1e-6, "{err}");
        let err = check(vec![rand_tensor(&[1, 3], 7), rand_tensor(&[2, 3], 8)], |t, v| {
            let c = t.concat(&[v[0], v[1]], 0)?;
            let w = t.constant(rand_tensor(&[3, 3], 9));
            let p = t.mul(c, w)?;
            t.sum_squares(p)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn activation_values() {
        let mut t = Tape::<f64>::new();
        let z = t.param(Tensor::row(vec![0.0]));
        let y = t.tanh(z).unwrap();
        assert_eq!(t.value(y).data(), &[0.0]);
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(z).unwrap().data(), &[1.0]);

        let mut t = Tape::<f64>::new();
        let z = t.constant(Tensor::row(vec![0.0]));
        let y = t.sigmoid(z).unwrap();
        assert_eq!(t.value(y).data(), &[0.5]);
    }

    #[test]
    fn unknown_activation_is_config_error() {
        assert!(matches!("gelu".parse::<Activation>(), Err(Error::Config(_))));
        assert_eq!("relu".parse::<Activation>().unwrap(), Activation::Relu);
    }

    #[test]
    fn relu_gradient_is_positivity_indicator() {
        let x = Tensor::row(vec![-0.7, 0.3, -0.2, 0.9, 0.5]);
        let mut t = Tape::<f64>::new();
        let v = t.param(x.clone());
        let y = t.relu(v).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(v).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 1.0]);

        let err = check(vec![x], |t, v| {
            let y = t.relu(v[0])?;
            t.sum_squares(y)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn every_activation_matches_finite_differences() {
        for kind in [Activation::Tanh, Activation::Sigmoid, Activation::Relu] {
            let err = check(vec![rand_tensor(&[3, 4], 11)], |t, v| {
                let y = t.apply_activation(kind, v[0])?;
                let w = t.constant(rand_tensor(&[3, 4], 12));
                let p = t.mul(y, w)?;
                t.sum(p)
            });
            assert!(err < 1e-5, "{kind:?}: {err}");
        }
    }

    #[test]
    fn max_over_time_routes_to_argmax() {
        let mut t = Tape::<f64>::new();
        let c = t.param(Tensor::matrix(3, 1, vec![1.0, 5.0, 3.0]).unwrap());
        let m = t.max_over_time(c).unwrap();
        assert_eq!(t.value(m).data(), &[5.0]);
        let s = t.sum(m).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(c).unwrap().data(), &[0.0, 1.0, 0.0]);

        let mut t = Tape::<f64>::new();
        let c = t.param(Tensor::matrix(3, 1, vec![2.0, 2.0, 2.0]).unwrap());
        let m = t.max_over_time(c).unwrap();
        assert_eq!(t.value(m).data(), &[2.0]);
    }

    #[test]
    fn max_over_time_tie_takes_first() {
        let mut t = Tape::<f64>::new();
        let c = t.param(Tensor::matrix(2, 1, vec![4.0, 4.0]).unwrap());
        let m = t.max_over_time(c).unwrap();
        let s = t.sum(m).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(c).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn max_over_time_empty_axis() {
        let mut t = Tape::<f64>::new();
        let c = t.param(Tensor::new(vec![0, 2], vec![]).unwrap());
        assert!(matches!(t.max_over_time(c), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_cross_entropy_values() {
        let mut t = Tape::<f64>::new();
        let z = t.constant(Tensor::row(vec![0.3, 0.3, 0.3]));
        let l = t.softmax_cross_entropy(z, 1).unwrap();
        assert!((t.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);

        let z = t.constant(Tensor::row(vec![10.0, -10.0]));
        let l = t.softmax_cross_entropy(z, 0).unwrap();
        assert!(t.value(l).data()[0] < 1e-8);

        assert!(matches!(t.softmax_cross_entropy(z, 2), Err(Error::Input(_))));
    }

    #[test]
    fn softmax_cross_entropy_survives_large_logits() {
        let mut t = Tape::<f64>::new();
        let z = t.param(Tensor::row(vec![1000.0, 0.0]));
        let l = t.softmax_cross_entropy(z, 1).unwrap();
        assert!((t.value(l).data()[0] - 1000.0).abs() < 1e-9);
        t.backward(l).unwrap();
        assert!(t.grad(z).unwrap().is_finite());
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let err = check(vec![rand_tensor(&[1, 5], 13)], |t, v| t.softmax_cross_entropy(v[0], 3));
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn backward_on_sum_and_quadratic() {
        let x = rand_tensor(&[1, 4], 14);
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let s = t.sum(v).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(v).unwrap().data(), &[1.0; 4]);

        let mut t = Tape::new();
        let v = t.param(x.clone());
        let q = t.sum_squares(v).unwrap();
        t.backward(q).unwrap();
        let expected: Vec<f64> = x.data().iter().map(|a| 2.0 * a).collect();
        assert_eq!(t.grad(v).unwrap().data(), &expected[..]);
    }

    #[test]
    fn backward_accumulates_additively() {
        let mut t = Tape::new();
        let a = t.param(rand_tensor(&[2, 3], 15));
        let b = t.param(rand_tensor(&[3, 2], 16));
        let c = t.matmul(a, b).unwrap();
        let y = t.tanh(c).unwrap();
        let l = t.sum_squares(y).unwrap();
        t.backward(l).unwrap();
        let once = t.grad(a).unwrap().clone();
        t.backward(l).unwrap();
        let twice = t.grad(a).unwrap();
        for (x, y) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * x, *y);
        }
        t.zero_grad();
        assert!(t.grad(a).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::<f64>::new();
        let a = t.param(Tensor::zeros(&[1, 2]));
        assert!(matches!(t.backward(a), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.param(rand_tensor(&[1, 3], 17));
        let k = t.constant(rand_tensor(&[1, 3], 18));
        let p = t.mul(a, k).unwrap();
        let s = t.sum(p).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(k).is_none());
        assert_eq!(t.grad(a).unwrap(), t.value(k));
    }

    #[test]
    fn gather_scatters_and_skips_frozen_row() {
        let mut t = Tape::<f64>::new();
        let table = t.param(rand_tensor(&[5, 2], 19));
        let rows = t.gather(table, &[0, 3, 4, 3], Some(0)).unwrap();
        let s = t.sum(rows).unwrap();
        t.backward(s).unwrap();
        let g = t.grad(table).unwrap();
        assert_eq!(g.row_slice(0), &[0.0, 0.0]);
        assert_eq!(g.row_slice(3), &[2.0, 2.0]);
        assert_eq!(g.row_slice(4), &[1.0, 1.0]);
        assert!(matches!(t.gather(table, &[5], None), Err(Error::Input(_))));
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let err = check(vec![rand_tensor(&[5, 3], 20), rand_tensor(&[1, 4], 21)], |t, v| {
            let u = t.unfold(v[0], 2)?; // [4 × 6]
            let s = t.slice_cols(u, 1, 4)?;
            let r = t.slice_rows(s, 1, 3)?;
            let b = t.add_row(r, v[1])?;
            let m = t.mean_rows(b)?;
            let q = t.scale(m, 0.7)?;
            let d = t.sub(q, v[1])?;
            t.sum_squares(d)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_forward_is_numeric_error() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::row(vec![f64::MAX]));
        assert!(matches!(t.scale(a, 10.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let a = t.param(rand_tensor(&[3, 3], 22));
            let b = t.param(rand_tensor(&[3, 3], 23));
            let c = t.matmul(a, b).unwrap();
            let d = t.sigmoid(c).unwrap();
            t.value(d).clone()
        };
        assert_eq!(run(), run());
    }
}
