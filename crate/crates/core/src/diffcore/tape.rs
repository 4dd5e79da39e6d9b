use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Concat(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of primitive operations for reverse-mode differentiation.
///
/// Entries are appended in evaluation order, so parents always precede children.
/// An operation whose inputs are all constant is stored as a constant leaf.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn rows_cols(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

/// True when `small` equals a trailing slice of `big`.
fn broadcasts_into(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
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

    /// Records a copy of `tensor`; it participates in differentiation when
    /// `tensor.requires_grad()` is set.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, tensor.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(shape.to_vec(), t.into_data(), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape node shapes are consistent")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let ((m, k), (k2, n)) = match (rows_cols(sa), rows_cols(sb)) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}"))),
        };
        debug_assert_eq!(k, k2);
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                row.iter_mut().zip(brow).for_each(|(o, y)| *o += x * y);
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if !broadcasts_into(sa, sb) {
            return Err(Error::dim(name, format!("{sa:?} with {sb:?}")));
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let period = bv.len().max(1);
        let out = av.iter().enumerate().map(|(i, x)| f(*x, bv[i % period])).collect();
        Ok((sa.clone(), out))
    }

    /// `a + b`, where `b` may omit leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.elementwise("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.elementwise("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.elementwise("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let n = &self.nodes[a.0];
        let out = n.value.iter().map(|x| x * factor).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, out, Op::Scale(a, factor), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = &self.nodes[a.0];
        let out = n.value.iter().map(|x| f(*x)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, out, op, rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let width = last_dim(&n.shape);
        let mut out = n.value.clone();
        for row in out.chunks_mut(width.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|x| *x = (*x - max).exp());
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= total);
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, out, Op::Softmax(a), rg)
    }

    /// Numerically stable `log(softmax(a))` over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let width = last_dim(&n.shape);
        let mut out = n.value.clone();
        for row in out.chunks_mut(width.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, out, Op::LogSoftmax(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let total = n.value.iter().sum();
        let rg = n.requires_grad;
        self.push(Vec::new(), vec![total], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = &self.nodes[a.0];
        if n.value.is_empty() {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let m = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let rg = n.requires_grad;
        Ok(self.push(Vec::new(), vec![m], Op::Mean(a), rg))
    }

    /// Column-wise mean of a `[m, n]` matrix, giving `[1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let n = &self.nodes[a.0];
        let (m, cols) = match rows_cols(&n.shape) {
            Some((m, c)) if m > 0 => (m, c),
            _ => return Err(Error::dim("mean_rows", format!("{:?}", n.shape))),
        };
        let mut out = vec![0.0; cols];
        for row in n.value.chunks(cols.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = n.requires_grad;
        Ok(self.push(vec![1, cols], out, Op::MeanRows(a), rg))
    }

    /// Concatenates along the first dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let tail = self.nodes[first.0].shape.get(1..).unwrap_or(&[]).to_vec();
        if self.nodes[first.0].shape.is_empty() {
            return Err(Error::dim("concat", "scalar input"));
        }
        let mut lead = 0;
        let mut out = Vec::new();
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim("concat", format!("{s:?} against trailing {tail:?}")));
            }
            lead += s[0];
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.any_grad(parts);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), rg))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let n = &self.nodes[a.0];
        let (m, c) = rows_cols(&n.shape)
            .filter(|(m, _)| start < end && end <= *m)
            .ok_or_else(|| Error::dim("slice_rows", format!("{:?}[{start}..{end}]", n.shape)))?;
        let _ = m;
        let out = n.value[start * c..end * c].to_vec();
        let rg = n.requires_grad;
        Ok(self.push(vec![end - start, c], out, Op::SliceRows(a, start), rg))
    }

    /// Selects rows of a `[m, n]` table by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let n = &self.nodes[table.0];
        let (m, c) = rows_cols(&n.shape).ok_or_else(|| Error::dim("gather_rows", format!("{:?}", n.shape)))?;
        if let Some(bad) = ids.iter().find(|&&i| i >= m) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {:?}", n.shape)));
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&n.value[i * c..(i + 1) * c]);
        }
        let rg = n.requires_grad;
        Ok(self.push(vec![ids.len(), c], out, Op::GatherRows(table, ids.to_vec()), rg))
    }

    /// Selects entries of the last dimension by index.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = &self.nodes[a.0];
        let width = last_dim(&n.shape);
        if n.shape.is_empty() || idx.iter().any(|&i| i >= width) {
            return Err(Error::dim("gather_cols", format!("{idx:?} from {:?}", n.shape)));
        }
        let mut out = Vec::with_capacity(n.value.len() / width.max(1) * idx.len());
        for row in n.value.chunks(width) {
            out.extend(idx.iter().map(|&i| row[i]));
        }
        let mut shape = n.shape.clone();
        *shape.last_mut().unwrap() = idx.len();
        let rg = n.requires_grad;
        Ok(self.push(shape, out, Op::GatherCols(a, idx.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[a.0];
        if shape.iter().product::<usize>() != n.value.len() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", n.shape)));
        }
        let (out, rg) = (n.value.clone(), n.requires_grad);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let n = &self.nodes[a.0];
        let (m, c) = rows_cols(&n.shape).ok_or_else(|| Error::dim("transpose", format!("{:?}", n.shape)))?;
        let mut out = vec![0.0; m * c];
        for i in 0..m {
            for j in 0..c {
                out[j * m + i] = n.value[i * c + j];
            }
        }
        let rg = n.requires_grad;
        Ok(self.push(vec![c, m], out, Op::Transpose(a), rg))
    }

    /// Reverse pass from a scalar `loss`. A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("backward called twice on the same tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, delta: impl IntoIterator<Item = (usize, f64)>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        for (i, d) in delta {
            slot[i] += d;
        }
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(&self.nodes[a.0].shape).unwrap();
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    let bv = &self.nodes[b.0].value;
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] = (0..n).map(|j| g[i * n + j] * bv[p * n + j]).sum();
                        }
                    }
                    self.add_grad(a, ga.into_iter().enumerate());
                }
                if self.nodes[b.0].requires_grad {
                    let av = &self.nodes[a.0].value;
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            gb[p * n..(p + 1) * n].iter_mut().zip(grow).for_each(|(o, y)| *o += x * y);
                        }
                    }
                    self.add_grad(b, gb.into_iter().enumerate());
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.add_grad(a, g.iter().copied().enumerate());
                let period = self.nodes[b.0].value.len().max(1);
                self.add_grad(b, g.iter().enumerate().map(|(i, x)| (i % period, sign * x)));
            }
            Op::Mul(a, b) => {
                let period = self.nodes[b.0].value.len().max(1);
                if self.nodes[a.0].requires_grad {
                    let bv = &self.nodes[b.0].value;
                    let ga: Vec<f64> = g.iter().enumerate().map(|(i, x)| x * bv[i % period]).collect();
                    self.add_grad(a, ga.into_iter().enumerate());
                }
                if self.nodes[b.0].requires_grad {
                    let av = &self.nodes[a.0].value;
                    let gb: Vec<(usize, f64)> =
                        g.iter().enumerate().map(|(i, x)| (i % period, x * av[i])).collect();
                    self.add_grad(b, gb);
                }
            }
            Op::Scale(a, f) => self.add_grad(a, g.iter().map(|x| x * f).enumerate()),
            Op::Softmax(a) => {
                let width = last_dim(&self.nodes[id].shape).max(1);
                let y = &self.nodes[id].value;
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(width).zip(y.chunks(width)).zip(ga.chunks_mut(width)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    out.iter_mut().enumerate().for_each(|(j, o)| *o = yr[j] * (gr[j] - dot));
                }
                self.add_grad(a, ga.into_iter().enumerate());
            }
            Op::LogSoftmax(a) => {
                let width = last_dim(&self.nodes[id].shape).max(1);
                let y = &self.nodes[id].value;
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(width).zip(y.chunks(width)).zip(ga.chunks_mut(width)) {
                    let total: f64 = gr.iter().sum();
                    out.iter_mut().enumerate().for_each(|(j, o)| *o = gr[j] - yr[j].exp() * total);
                }
                self.add_grad(a, ga.into_iter().enumerate());
            }
            Op::Log(a) => {
                let av = &self.nodes[a.0].value;
                let ga: Vec<f64> = g.iter().zip(av).map(|(x, v)| x / v).collect();
                self.add_grad(a, ga.into_iter().enumerate());
            }
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                let ga: Vec<f64> = g.iter().zip(y).map(|(x, v)| x * v).collect();
                self.add_grad(a, ga.into_iter().enumerate());
            }
            Op::Relu(a) => {
                let av = &self.nodes[a.0].value;
                let ga: Vec<f64> = g.iter().zip(av).map(|(x, v)| if *v > 0.0 { *x } else { 0.0 }).collect();
                self.add_grad(a, ga.into_iter().enumerate());
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                let ga: Vec<f64> = g.iter().zip(y).map(|(x, v)| x * (1.0 - v * v)).collect();
                self.add_grad(a, ga.into_iter().enumerate());
            }
            Op::Sum(a) => {
                let len = self.nodes[a.0].value.len();
                self.add_grad(a, (0..len).map(|i| (i, g[0])));
            }
            Op::Mean(a) => {
                let len = self.nodes[a.0].value.len();
                let d = g[0] / len as f64;
                self.add_grad(a, (0..len).map(|i| (i, d)));
            }
            Op::MeanRows(a) => {
                let (m, c) = rows_cols(&self.nodes[a.0].shape).unwrap();
                let inv = 1.0 / m as f64;
                self.add_grad(a, (0..m * c).map(|i| (i, g[i % c] * inv)));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    self.add_grad(p, (0..len).map(|i| (i, g[offset + i])));
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let c = self.nodes[a.0].shape[1];
                let base = start * c;
                self.add_grad(a, g.iter().enumerate().map(|(i, x)| (base + i, *x)));
            }
            Op::GatherRows(t, ids) => {
                let c = self.nodes[t.0].shape[1];
                let pairs: Vec<(usize, f64)> = ids
                    .iter()
                    .enumerate()
                    .flat_map(|(r, &row)| (0..c).map(move |j| (row * c + j, g[r * c + j])))
                    .collect();
                self.add_grad(t, pairs);
            }
            Op::GatherCols(a, idx) => {
                let width = last_dim(&self.nodes[a.0].shape);
                let k = idx.len();
                let pairs: Vec<(usize, f64)> = g
                    .iter()
                    .enumerate()
                    .map(|(i, x)| ((i / k) * width + idx[i % k], *x))
                    .collect();
                self.add_grad(a, pairs);
            }
            Op::Reshape(a) => self.add_grad(a, g.iter().copied().enumerate()),
            Op::Transpose(a) => {
                let (m, c) = rows_cols(&self.nodes[a.0].shape).unwrap();
                self.add_grad(a, (0..m * c).map(|i| (i, g[(i % c) * m + i / c])));
            }
        }
    }

    /// Gradient of the last backward pass with respect to `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds this tape's gradient for `v` into `target`'s gradient buffer.
    ///
    /// A leaf that requires grad but was not reached gets a zero gradient, so
    /// that every trainable ancestor carries a populated buffer after backward.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        if !self.consumed {
            return Err(Error::Usage("gradients read before backward".into()));
        }
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; target.len()]),
        }
    }
}
