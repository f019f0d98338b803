//! Recorded computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its value and the handles of its inputs; [`Graph::backward`]
//! walks the nodes in reverse creation order, which is a valid topological
//! order because inputs always precede their consumers.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf { requires_grad: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Exp(Var),
    Square(Var),
    Clamp { x: Var, lo: f32, hi: f32 },
    Minimum(Var, Var),
    Maximum(Var, Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Reshape(Var),
    TransposeLast2(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Gather { table: Var, ids: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    MaskedSoftmax { x: Var, mask: Vec<bool> },
    LogSoftmax(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Visibility pattern of a causal mask: entry `(i, j)` is visible iff `j <= i`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n <= k / n).collect()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input (model parameter).
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(
            value,
            Op::Leaf {
                requires_grad: true,
            },
        )
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(
            value,
            Op::Leaf {
                requires_grad: false,
            },
        )
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        self.same_shape(a, b, op_name(&op))?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(value, op)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Result<Var> {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())?;
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Minimum(a, b), f32::min)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Maximum(a, b), f32::max)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        self.map(a, Op::Scale(a, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        self.map(a, Op::AddScalar(a), |v| v + c)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), f32::exp)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Square(a), |v| v * v)
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Result<Var> {
        if lo > hi {
            return Err(Error::Contract(format!("clamp bounds {lo} > {hi}")));
        }
        self.map(a, Op::Clamp { x: a, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f32 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let s: f32 = x.data().iter().sum::<f32>() / x.len() as f32;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Sums over the trailing dimension.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let width = x.last_dim();
        let data = x.data().chunks(width).map(|r| r.iter().sum()).collect();
        let shape = x.shape()[..x.rank().saturating_sub(1)].to_vec();
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::SumRows(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push(value, Op::Reshape(a))
    }

    /// Swaps the two trailing dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() < 2 {
            return Err(Error::Shape(format!(
                "transpose of rank-{} tensor",
                x.rank()
            )));
        }
        let r = x.rank();
        let (m, n) = (x.shape()[r - 2], x.shape()[r - 1]);
        let mut shape = x.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let mut data = vec![0.0; x.len()];
        for (src, dst) in x.data().chunks(m * n).zip(data.chunks_mut(m * n)) {
            transpose_into(src, dst, m, n);
        }
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::TransposeLast2(a))
    }

    /// Matrix product of `[m, k] x [k, n]`, or batched `[b, m, k] x [b, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            mm(
                &x.data()[i * m * k..(i + 1) * m * k],
                &y.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if x.rank() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b))
    }

    /// Adds `bias` (shape `[m]`) to every row of `x` (shape `[n, m]`).
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if xs.len() != 2 || bs != [xs[1]] {
            return Err(Error::Shape(format!("row bias {bs:?} for input {xs:?}")));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(b.len())
            .flat_map(|row| row.iter().zip(b).map(|(p, q)| p + q))
            .collect();
        let value = Tensor::new(xs.to_vec(), data)?;
        self.push(value, Op::AddRowBias(x, bias))
    }

    /// Gathers rows of a `[rows, width]` table. The backward pass scatters
    /// gradients additively, so repeated ids accumulate.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape(format!(
                "lookup table has shape {:?}",
                t.shape()
            )));
        }
        let (rows, width) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(Error::Contract(format!(
                    "id {id} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(&t.data()[id * width..(id + 1) * width]);
        }
        let value = Tensor::new(vec![ids.len(), width], data)?;
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Selects one column per row: `out[r] = x[r, idx[r]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] != idx.len() {
            return Err(Error::Shape(format!(
                "pick {} indices from {:?}",
                idx.len(),
                t.shape()
            )));
        }
        let width = t.shape()[1];
        let mut data = Vec::with_capacity(idx.len());
        for (r, &c) in idx.iter().enumerate() {
            if c >= width {
                return Err(Error::Contract(format!(
                    "column {c} out of range for width {width}"
                )));
            }
            data.push(t.data()[r * width + c]);
        }
        self.push(
            Tensor::vector(data),
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Row-wise softmax over the trailing `n x n` block(s) of `scores`;
    /// entries where `mask` is false get exactly zero weight.
    pub fn masked_softmax_rows(&mut self, scores: Var, mask: &[bool]) -> Result<Var> {
        let s = self.value(scores);
        let r = s.rank();
        if r < 2 || s.shape()[r - 1] != s.shape()[r - 2] || mask.len() != s.last_dim().pow(2) {
            return Err(Error::Shape(format!(
                "masked softmax of {:?} with mask of {} entries",
                s.shape(),
                mask.len()
            )));
        }
        let n = s.last_dim();
        if mask.chunks(n).any(|row| !row.iter().any(|&v| v)) {
            return Err(Error::Contract(
                "softmax row with every entry masked".into(),
            ));
        }
        let mut out = vec![0.0; s.len()];
        for (src, dst) in s.data().chunks(n * n).zip(out.chunks_mut(n * n)) {
            for i in 0..n {
                let row_mask = &mask[i * n..(i + 1) * n];
                softmax_into(
                    &src[i * n..(i + 1) * n],
                    row_mask,
                    &mut dst[i * n..(i + 1) * n],
                );
            }
        }
        let value = Tensor::new(s.shape().to_vec(), out)?;
        self.push(
            value,
            Op::MaskedSoftmax {
                x: scores,
                mask: mask.to_vec(),
            },
        )
    }

    /// Log-softmax over the trailing dimension.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        let mut out = vec![0.0; t.len()];
        for (row, dst) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            log_softmax_into(row, dst);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(value, Op::LogSoftmax(x))
    }

    /// Reverse-mode derivatives of the scalar `loss` with respect to every
    /// node. Every [`Graph::param`] leaf receives an entry, zero if the loss
    /// does not depend on it; constants receive none.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }

        for (node, grad) in self.nodes.iter().zip(grads.iter_mut()) {
            match node.op {
                Op::Leaf {
                    requires_grad: true,
                } if grad.is_none() => {
                    *grad = Some(Tensor::zeros(node.value.shape()));
                }
                Op::Leaf {
                    requires_grad: false,
                } => *grad = None,
                _ => {}
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.data(), self.shape(*a));
                accumulate(grads, *b, g.data(), self.shape(*b));
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, gd, self.shape(*a));
                let neg: Vec<f32> = gd.iter().map(|v| -v).collect();
                accumulate(grads, *b, &neg, self.shape(*b));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let ga: Vec<f32> = gd.iter().zip(y).map(|(g, y)| g * y).collect();
                let gb: Vec<f32> = gd.iter().zip(x).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, &ga, self.shape(*a));
                accumulate(grads, *b, &gb, self.shape(*b));
            }
            Op::Scale(a, c) => {
                let ga: Vec<f32> = gd.iter().map(|g| g * c).collect();
                accumulate(grads, *a, &ga, self.shape(*a));
            }
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(grads, *a, gd, self.shape(*a)),
            Op::Exp(a) => {
                let y = node.value.data();
                let ga: Vec<f32> = gd.iter().zip(y).map(|(g, y)| g * y).collect();
                accumulate(grads, *a, &ga, self.shape(*a));
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let ga: Vec<f32> = gd.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect();
                accumulate(grads, *a, &ga, self.shape(*a));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let ga: Vec<f32> = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v < *lo || v > *hi { 0.0 } else { g })
                    .collect();
                accumulate(grads, *x, &ga, self.shape(*x));
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let take_min = matches!(node.op, Op::Minimum(..));
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; gd.len()];
                let mut gb = vec![0.0; gd.len()];
                for i in 0..gd.len() {
                    // ties route to the first argument
                    let first = if take_min { x[i] <= y[i] } else { x[i] >= y[i] };
                    if first {
                        ga[i] = gd[i];
                    } else {
                        gb[i] = gd[i];
                    }
                }
                accumulate(grads, *a, &ga, self.shape(*a));
                accumulate(grads, *b, &gb, self.shape(*b));
            }
            Op::Sum(a) => {
                let ga = vec![gd[0]; self.value(*a).len()];
                accumulate(grads, *a, &ga, self.shape(*a));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let ga = vec![gd[0] / n as f32; n];
                accumulate(grads, *a, &ga, self.shape(*a));
            }
            Op::SumRows(a) => {
                let width = self.value(*a).last_dim();
                let ga: Vec<f32> = gd
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g, width))
                    .collect();
                accumulate(grads, *a, &ga, self.shape(*a));
            }
            Op::TransposeLast2(a) => {
                let s = node.value.shape();
                let r = s.len();
                let (m, n) = (s[r - 2], s[r - 1]);
                let mut ga = vec![0.0; gd.len()];
                for (src, dst) in gd.chunks(m * n).zip(ga.chunks_mut(m * n)) {
                    transpose_into(src, dst, m, n);
                }
                accumulate(grads, *a, &ga, self.shape(*a));
            }
            Op::MatMul(a, b) => {
                let (batch, m, k, n) = matmul_dims(self.shape(*a), self.shape(*b))?;
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; x.len()];
                let mut gb = vec![0.0; y.len()];
                for i in 0..batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    // dA = dC · Bᵀ, dB = Aᵀ · dC
                    mm_nt(
                        gi,
                        &y[i * k * n..(i + 1) * k * n],
                        &mut ga[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                    mm_tn(
                        &x[i * m * k..(i + 1) * m * k],
                        gi,
                        &mut gb[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                accumulate(grads, *a, &ga, self.shape(*a));
                accumulate(grads, *b, &gb, self.shape(*b));
            }
            Op::AddRowBias(x, b) => {
                let width = self.value(*b).len();
                let mut gb = vec![0.0; width];
                for row in gd.chunks(width) {
                    for (acc, g) in gb.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                accumulate(grads, *x, gd, self.shape(*x));
                accumulate(grads, *b, &gb, self.shape(*b));
            }
            Op::Gather { table, ids } => {
                let width = self.value(*table).shape()[1];
                let slot = grad_slot(grads, *table, self.shape(*table));
                let dst = slot.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..width {
                        dst[id * width + c] += gd[r * width + c];
                    }
                }
            }
            Op::Pick { x, idx } => {
                let width = self.value(*x).shape()[1];
                let slot = grad_slot(grads, *x, self.shape(*x));
                let dst = slot.data_mut();
                for (r, &c) in idx.iter().enumerate() {
                    dst[r * width + c] += gd[r];
                }
            }
            Op::MaskedSoftmax { x, mask } => {
                let n = node.value.last_dim();
                let y = node.value.data();
                let mut ga = vec![0.0; gd.len()];
                for row in 0..gd.len() / n {
                    let span = row * n..(row + 1) * n;
                    let (yr, gr) = (&y[span.clone()], &gd[span.clone()]);
                    let row_mask = &mask[(row % n) * n..(row % n + 1) * n];
                    let dot: f32 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        if row_mask[j] {
                            ga[row * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                accumulate(grads, *x, &ga, self.shape(*x));
            }
            Op::LogSoftmax(x) => {
                let n = node.value.last_dim();
                let y = node.value.data();
                let mut ga = vec![0.0; gd.len()];
                for ((yr, gr), out) in y.chunks(n).zip(gd.chunks(n)).zip(ga.chunks_mut(n)) {
                    let total: f32 = gr.iter().sum();
                    for j in 0..n {
                        out[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                accumulate(grads, *x, &ga, self.shape(*x));
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if the loss depends on it
    /// (leaves always have an entry).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: &[f32], shape: &[usize]) {
    let slot = grad_slot(grads, v, shape);
    for (acc, x) in slot.data_mut().iter_mut().zip(g) {
        *acc += x;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Exp(..) => "exp",
        Op::Square(..) => "square",
        Op::Clamp { .. } => "clamp",
        Op::Minimum(..) => "minimum",
        Op::Maximum(..) => "maximum",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::SumRows(..) => "sum_rows",
        Op::Reshape(..) => "reshape",
        Op::TransposeLast2(..) => "transpose",
        Op::MatMul(..) => "matmul",
        Op::AddRowBias(..) => "add_row_bias",
        Op::Gather { .. } => "embedding_lookup",
        Op::Pick { .. } => "pick",
        Op::MaskedSoftmax { .. } => "masked_softmax_rows",
        Op::LogSoftmax(..) => "log_softmax_rows",
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let dims = match (a, b) {
        (&[m, k], &[k2, n]) if k == k2 => Some((1, m, k, n)),
        (&[ba, m, k], &[bb, k2, n]) if ba == bb && k == k2 => Some((ba, m, k, n)),
        _ => None,
    };
    dims.ok_or_else(|| Error::Shape(format!("matmul of {a:?} and {b:?}")))
}

/// `out[m,n] = a[m,k] · b[k,n]`
fn mm(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += a[m,n] · b[k,n]ᵀ`
fn mm_nt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let br = &b[p * n..(p + 1) * n];
            out[i * k + p] += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f32>();
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
fn mm_tn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_into(src: &[f32], dst: &mut [f32], m: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            dst[j * m + i] = src[i * n + j];
        }
    }
}

/// Numerically stable log-softmax of one row. Shared by the graph op and by
/// callers that need bit-identical log-probabilities outside a graph.
pub fn log_softmax_into(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f32>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

fn softmax_into(row: &[f32], mask: &[bool], out: &mut [f32]) {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0;
    for ((o, &v), &m) in out.iter_mut().zip(row).zip(mask) {
        *o = if m { (v - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}
