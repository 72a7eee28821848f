//! Define-by-run autodiff tape. Every op evaluates eagerly, records itself in
//! the arena, and `backward` replays the tape once in reverse. Handles are
//! plain indices, so they are `Copy` and never dangle while the graph lives.

use crate::error::{LeapError, Result};
use crate::scalar::{fl, Scalar};
use crate::tensor::kernels;
use crate::tensor::TensorData;

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
}

enum Op<F: Scalar> {
    Leaf,
    Add(usize, usize),
    /// `[r, c] + [c]`, the row vector broadcast over every row.
    AddRow(usize, usize),
    Sub(usize, usize),
    /// Elementwise product; the right side may be a scalar.
    Mul(usize, usize),
    /// Elementwise quotient; the right side may be a scalar.
    Div(usize, usize),
    Scale(usize, F),
    AddConst(usize, F),
    Matmul(usize, usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    /// Per-row sum of a matrix, producing a vector of row totals.
    SumRows(usize),
    /// `out[r, c] = x[r, c] * s[r]` with `s` a vector of per-row factors.
    ScaleRows(usize, usize),
    Sqrt(usize),
    Log(usize),
    Sigmoid(usize),
    Gelu(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    ClampMin(usize, F),
    ClampMax(usize, F),
    /// Mean over the first `rows` rows, producing a vector of column means.
    MeanRowsPrefix { x: usize, rows: usize },
    /// Row lookup into a table; the backward pass scatter-adds.
    GatherRows { table: usize, indices: Vec<usize> },
    /// `[n, n] -> [n, n-1]`: each row with its diagonal entry removed.
    OffDiagonal(usize),
    /// Stack equal-length vectors as the rows of a matrix.
    StackRows(Vec<usize>),
    /// Identity forward, barrier backward: gradients never flow through.
    Detach,
}

struct Node<F: Scalar> {
    op: Op<F>,
    value: TensorData<F>,
    needs_grad: bool,
}

/// Gradients keyed by tensor handle, produced by [`Graph::backward`].
/// Interior-node gradients are dropped during the reverse sweep; only leaf
/// gradients remain afterwards.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<TensorData<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, t: Tensor) -> Option<&TensorData<F>> {
        self.grads.get(t.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, t: Tensor) -> Option<TensorData<F>> {
        self.grads.get_mut(t.id).and_then(|g| g.take())
    }
}

/// Arena of recorded operations. Build one per training step, run the ops,
/// call [`Graph::backward`] on a scalar loss, then drop the whole graph.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    check_finite: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), check_finite: true }
    }

    pub fn with_capacity(n: usize) -> Self {
        Graph { nodes: Vec::with_capacity(n), check_finite: true }
    }

    /// Finiteness checking validates every op output and turns the first
    /// NaN or infinity into an error. On by default; the latency harness
    /// turns it off.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients accumulate here.
    pub fn param(&mut self, value: TensorData<F>) -> Tensor {
        self.push_unchecked(Op::Leaf, value, true)
    }

    /// Frozen leaf: everything derived only from constants is skipped by the
    /// backward sweep.
    pub fn constant(&mut self, value: TensorData<F>) -> Tensor {
        self.push_unchecked(Op::Leaf, value, false)
    }

    pub fn value(&self, t: Tensor) -> &TensorData<F> {
        &self.nodes[t.id].value
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        self.nodes[t.id].value.shape()
    }

    pub fn scalar_value(&self, t: Tensor) -> F {
        self.nodes[t.id].value.scalar_value()
    }

    fn needs(&self, t: Tensor) -> bool {
        self.nodes[t.id].needs_grad
    }

    fn val(&self, t: Tensor) -> &TensorData<F> {
        &self.nodes[t.id].value
    }

    fn push_unchecked(&mut self, op: Op<F>, value: TensorData<F>, needs_grad: bool) -> Tensor {
        self.nodes.push(Node { op, value, needs_grad });
        Tensor { id: self.nodes.len() - 1 }
    }

    fn push(&mut self, op: Op<F>, value: TensorData<F>, needs_grad: bool, name: &'static str) -> Result<Tensor> {
        if self.check_finite && !value.all_finite() {
            return Err(LeapError::NonFinite(name));
        }
        Ok(self.push_unchecked(op, value, needs_grad))
    }

    fn same_shape(&self, a: Tensor, b: Tensor, op: &str) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(LeapError::dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.val(a).shape(),
                self.val(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "add")?;
        let data: Vec<F> =
            self.val(a).data().iter().zip(self.val(b).data()).map(|(&x, &y)| x + y).collect();
        let value = TensorData::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a.id, b.id), value, needs, "add")
    }

    pub fn add_row(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let cols = self.val(a).cols();
        if self.val(b).shape().len() != 1 || self.val(b).numel() != cols {
            return Err(LeapError::dimension(format!(
                "add_row: expected row vector of length {cols}, got {:?}",
                self.val(b).shape()
            )));
        }
        let rows = self.val(a).rows();
        let mut data = self.val(a).data().to_vec();
        let bd = self.val(b).data();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bd[c];
            }
        }
        let value = TensorData::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::AddRow(a.id, b.id), value, needs, "add_row")
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<F> =
            self.val(a).data().iter().zip(self.val(b).data()).map(|(&x, &y)| x - y).collect();
        let value = TensorData::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a.id, b.id), value, needs, "sub")
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let data: Vec<F> = if self.val(b).is_scalar() && !self.val(a).is_scalar() {
            let s = self.val(b).scalar_value();
            self.val(a).data().iter().map(|&x| x * s).collect()
        } else {
            self.same_shape(a, b, "mul")?;
            self.val(a).data().iter().zip(self.val(b).data()).map(|(&x, &y)| x * y).collect()
        };
        let value = TensorData::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a.id, b.id), value, needs, "mul")
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let data: Vec<F> = if self.val(b).is_scalar() && !self.val(a).is_scalar() {
            let s = self.val(b).scalar_value();
            self.val(a).data().iter().map(|&x| x / s).collect()
        } else {
            self.same_shape(a, b, "div")?;
            self.val(a).data().iter().zip(self.val(b).data()).map(|(&x, &y)| x / y).collect()
        };
        let value = TensorData::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Div(a.id, b.id), value, needs, "div")
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let c: F = fl(c);
        let data: Vec<F> = self.val(a).data().iter().map(|&x| x * c).collect();
        let value = TensorData::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(Op::Scale(a.id, c), value, needs, "scale")
    }

    pub fn add_const(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let c: F = fl(c);
        let data: Vec<F> = self.val(a).data().iter().map(|&x| x + c).collect();
        let value = TensorData::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(Op::AddConst(a.id, c), value, needs, "add_const")
    }

    /// Matrix product. The left side may be a vector, treated as a single
    /// row; the output is then a vector too.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.val(b).shape().len() != 2 {
            return Err(LeapError::dimension(format!(
                "matmul: right side must be a matrix, got {:?}",
                self.val(b).shape()
            )));
        }
        let (m, k) = (self.val(a).rows(), self.val(a).cols());
        let (bk, n) = (self.val(b).rows(), self.val(b).cols());
        if k != bk {
            return Err(LeapError::dimension(format!(
                "matmul: inner dims {k} and {bk} differ ({:?} x {:?})",
                self.val(a).shape(),
                self.val(b).shape()
            )));
        }
        let mut data = vec![F::zero(); m * n];
        kernels::matmul(self.val(a).data(), self.val(b).data(), &mut data, m, k, n);
        let shape = if self.val(a).shape().len() == 1 { vec![n] } else { vec![m, n] };
        let value = TensorData::new(shape, data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a.id, b.id), value, needs, "matmul")
    }

    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor> {
        if self.val(a).shape().len() != 2 {
            return Err(LeapError::dimension(format!(
                "transpose: expected matrix, got {:?}",
                self.val(a).shape()
            )));
        }
        let (r, c) = (self.val(a).rows(), self.val(a).cols());
        let mut data = vec![F::zero(); r * c];
        kernels::transpose(self.val(a).data(), r, c, &mut data);
        let value = TensorData::new(vec![c, r], data)?;
        let needs = self.needs(a);
        self.push(Op::Transpose(a.id), value, needs, "transpose")
    }

    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        let total = self.val(a).data().iter().fold(F::zero(), |acc, &x| acc + x);
        let needs = self.needs(a);
        self.push(Op::Sum(a.id), TensorData::scalar(total), needs, "sum")
    }

    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        let n = self.val(a).numel();
        if n == 0 {
            return Err(LeapError::degenerate("mean of empty tensor"));
        }
        let total = self.val(a).data().iter().fold(F::zero(), |acc, &x| acc + x);
        let value = TensorData::scalar(total / fl::<F>(n as f64));
        let needs = self.needs(a);
        self.push(Op::Mean(a.id), value, needs, "mean")
    }

    pub fn sum_rows(&mut self, a: Tensor) -> Result<Tensor> {
        let (r, c) = (self.val(a).rows(), self.val(a).cols());
        let mut data = vec![F::zero(); r];
        for (i, row) in self.val(a).data().chunks_exact(c).enumerate() {
            data[i] = row.iter().fold(F::zero(), |acc, &x| acc + x);
        }
        let needs = self.needs(a);
        self.push(Op::SumRows(a.id), TensorData::vector(data), needs, "sum_rows")
    }

    pub fn scale_rows(&mut self, a: Tensor, s: Tensor) -> Result<Tensor> {
        let (r, c) = (self.val(a).rows(), self.val(a).cols());
        if self.val(s).shape().len() != 1 || self.val(s).numel() != r {
            return Err(LeapError::dimension(format!(
                "scale_rows: expected factor vector of length {r}, got {:?}",
                self.val(s).shape()
            )));
        }
        let mut data = self.val(a).data().to_vec();
        let sd = self.val(s).data();
        for (i, row) in data.chunks_exact_mut(c).enumerate() {
            for v in row {
                *v = *v * sd[i];
            }
        }
        let value = TensorData::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(s);
        self.push(Op::ScaleRows(a.id, s.id), value, needs, "scale_rows")
    }

    pub fn sqrt(&mut self, a: Tensor) -> Result<Tensor> {
        let data: Vec<F> = self.val(a).data().iter().map(|&x| x.sqrt()).collect();
        let value = TensorData::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(Op::Sqrt(a.id), value, needs, "sqrt")
    }

    pub fn log(&mut self, a: Tensor) -> Result<Tensor> {
        let data: Vec<F> = self.val(a).data().iter().map(|&x| x.ln()).collect();
        let value = TensorData::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(Op::Log(a.id), value, needs, "log")
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Result<Tensor> {
        let data: Vec<F> = self.val(a).data().iter().map(|&x| kernels::sigmoid(x)).collect();
        let value = TensorData::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a.id), value, needs, "sigmoid")
    }

    pub fn gelu(&mut self, a: Tensor) -> Result<Tensor> {
        let data: Vec<F> = self.val(a).data().iter().map(|&x| kernels::gelu(x)).collect();
        let value = TensorData::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(Op::Gelu(a.id), value, needs, "gelu")
    }

    pub fn softmax_rows(&mut self, a: Tensor) -> Result<Tensor> {
        let (r, c) = (self.val(a).rows(), self.val(a).cols());
        let mut data = self.val(a).data().to_vec();
        kernels::softmax_rows(&mut data, r, c);
        let value = TensorData::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(Op::SoftmaxRows(a.id), value, needs, "softmax_rows")
    }

    pub fn layer_norm(&mut self, x: Tensor, gain: Tensor, bias: Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = (self.val(x).rows(), self.val(x).cols());
        if self.val(gain).numel() != c || self.val(bias).numel() != c {
            return Err(LeapError::dimension(format!(
                "layer_norm: gain/bias must have length {c}, got {} and {}",
                self.val(gain).numel(),
                self.val(bias).numel()
            )));
        }
        let mut out = vec![F::zero(); r * c];
        let mut mean = vec![F::zero(); r];
        let mut rstd = vec![F::zero(); r];
        kernels::layer_norm_rows(
            self.val(x).data(),
            self.val(gain).data(),
            self.val(bias).data(),
            &mut out,
            &mut mean,
            &mut rstd,
            r,
            c,
            fl(eps),
        );
        let value = TensorData::new(self.val(x).shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(Op::LayerNorm { x: x.id, gain: gain.id, bias: bias.id, mean, rstd }, value, needs, "layer_norm")
    }

    pub fn clamp_min(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let c: F = fl(c);
        let data: Vec<F> = self.val(a).data().iter().map(|&x| if x < c { c } else { x }).collect();
        let value = TensorData::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(Op::ClampMin(a.id, c), value, needs, "clamp_min")
    }

    pub fn clamp_max(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let c: F = fl(c);
        let data: Vec<F> = self.val(a).data().iter().map(|&x| if x > c { c } else { x }).collect();
        let value = TensorData::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(Op::ClampMax(a.id, c), value, needs, "clamp_max")
    }

    /// Column means over the first `rows` rows. Padding tokens sit at the end
    /// of a sequence, so pooling over a prefix excludes them.
    pub fn mean_rows_prefix(&mut self, a: Tensor, rows: usize) -> Result<Tensor> {
        let (r, c) = (self.val(a).rows(), self.val(a).cols());
        if rows == 0 || rows > r {
            return Err(LeapError::dimension(format!(
                "mean_rows_prefix: prefix {rows} outside 1..={r}"
            )));
        }
        let mut data = vec![F::zero(); c];
        kernels::mean_rows_prefix(self.val(a).data(), c, rows, &mut data);
        let needs = self.needs(a);
        self.push(Op::MeanRowsPrefix { x: a.id, rows }, TensorData::vector(data), needs, "mean_rows_prefix")
    }

    pub fn gather_rows(&mut self, table: Tensor, indices: &[usize]) -> Result<Tensor> {
        if self.val(table).shape().len() != 2 {
            return Err(LeapError::dimension(format!(
                "gather_rows: table must be a matrix, got {:?}",
                self.val(table).shape()
            )));
        }
        let (r, c) = (self.val(table).rows(), self.val(table).cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(LeapError::dimension(format!(
                "gather_rows: index {bad} out of range for {r} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&self.val(table).data()[i * c..(i + 1) * c]);
        }
        let value = TensorData::new(vec![indices.len(), c], data)?;
        let needs = self.needs(table);
        self.push(Op::GatherRows { table: table.id, indices: indices.to_vec() }, value, needs, "gather_rows")
    }

    /// Drop the diagonal of a square matrix, keeping each row's remaining
    /// entries in order.
    pub fn off_diagonal(&mut self, a: Tensor) -> Result<Tensor> {
        let (r, c) = (self.val(a).rows(), self.val(a).cols());
        if self.val(a).shape().len() != 2 || r != c {
            return Err(LeapError::dimension(format!(
                "off_diagonal: expected square matrix, got {:?}",
                self.val(a).shape()
            )));
        }
        if r < 2 {
            return Err(LeapError::degenerate("off_diagonal needs at least a 2x2 matrix"));
        }
        let src = self.val(a).data();
        let mut data = Vec::with_capacity(r * (c - 1));
        for i in 0..r {
            for j in 0..c {
                if j != i {
                    data.push(src[i * c + j]);
                }
            }
        }
        let value = TensorData::new(vec![r, c - 1], data)?;
        let needs = self.needs(a);
        self.push(Op::OffDiagonal(a.id), value, needs, "off_diagonal")
    }

    pub fn stack_rows(&mut self, rows: &[Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(LeapError::degenerate("stack_rows of zero vectors"));
        }
        let c = self.val(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * c);
        let mut needs = false;
        for &t in rows {
            if self.val(t).shape().len() != 1 || self.val(t).numel() != c {
                return Err(LeapError::dimension(format!(
                    "stack_rows: expected vectors of length {c}, got {:?}",
                    self.val(t).shape()
                )));
            }
            data.extend_from_slice(self.val(t).data());
            needs |= self.needs(t);
        }
        let value = TensorData::new(vec![rows.len(), c], data)?;
        let ids = rows.iter().map(|t| t.id).collect();
        self.push(Op::StackRows(ids), value, needs, "stack_rows")
    }

    /// Stop-gradient: the value passes through, the backward sweep does not.
    pub fn detach(&mut self, a: Tensor) -> Result<Tensor> {
        let value = self.val(a).clone();
        self.push(Op::Detach, value, false, "detach")
    }

    pub fn dot(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    pub fn norm(&mut self, a: Tensor) -> Result<Tensor> {
        let sq = self.mul(a, a)?;
        let s = self.sum(sq)?;
        self.sqrt(s)
    }

    /// Cosine similarity of two vectors as a graph scalar. Errors eagerly if
    /// either vector has effectively zero norm.
    pub fn cosine_sim(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "cosine_sim")?;
        let tiny: F = fl(1e-30);
        let na = kernels::l2_norm(self.val(a).data());
        let nb = kernels::l2_norm(self.val(b).data());
        if na < tiny || nb < tiny {
            return Err(LeapError::degenerate(format!(
                "cosine_sim: vector norms {:e} and {:e} too close to zero",
                na.to_f64().unwrap_or(0.0),
                nb.to_f64().unwrap_or(0.0)
            )));
        }
        let na_t = self.norm(a)?;
        let nb_t = self.norm(b)?;
        let denom = self.mul(na_t, nb_t)?;
        let num = self.dot(a, b)?;
        self.div(num, denom)
    }

    /// Vector scaled to unit norm. Errors eagerly on effectively zero norm.
    pub fn normalize(&mut self, a: Tensor) -> Result<Tensor> {
        let tiny: F = fl(1e-30);
        if kernels::l2_norm(self.val(a).data()) < tiny {
            return Err(LeapError::degenerate("normalize: vector norm too close to zero"));
        }
        let n = self.norm(a)?;
        self.div(a, n)
    }

    /// Every row scaled to unit norm. Errors eagerly if any row has
    /// effectively zero norm.
    pub fn normalize_rows(&mut self, a: Tensor) -> Result<Tensor> {
        let sq = self.mul(a, a)?;
        let ss = self.sum_rows(sq)?;
        let norms = self.sqrt(ss)?;
        let tiny: F = fl(1e-30);
        if let Some((i, _)) = self.val(norms).data().iter().enumerate().find(|(_, &n)| n < tiny) {
            return Err(LeapError::degenerate(format!(
                "normalize_rows: row {i} has norm too close to zero"
            )));
        }
        let ones = self.constant(TensorData::vector(vec![F::one(); self.val(norms).numel()]));
        let recip = self.div(ones, norms)?;
        self.scale_rows(a, recip)
    }

    /// Reverse sweep from a scalar loss. Returns the accumulated gradients;
    /// leaves created with [`Graph::constant`] and everything behind a
    /// [`Graph::detach`] get none.
    pub fn backward(&self, loss: Tensor) -> Result<Gradients<F>> {
        if !self.val(loss).is_scalar() {
            return Err(LeapError::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let mut grads: Vec<Option<TensorData<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(TensorData::scalar(F::one()));

        for i in (0..=loss.id).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, g.data(), &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Lazily allocate the gradient buffer for node `id` and return it.
    fn buf<'a>(&self, grads: &'a mut [Option<TensorData<F>>], id: usize) -> &'a mut [F] {
        if grads[id].is_none() {
            grads[id] = Some(TensorData::zeros(self.nodes[id].value.shape().to_vec()));
        }
        grads[id].as_mut().unwrap().data_mut()
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<TensorData<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                if self.nodes[*a].needs_grad {
                    let da = self.buf(grads, *a);
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if self.nodes[*b].needs_grad {
                    let db = self.buf(grads, *b);
                    for (d, &gi) in db.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::AddRow(a, b) => {
                let cols = self.nodes[*b].value.numel();
                if self.nodes[*a].needs_grad {
                    let da = self.buf(grads, *a);
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if self.nodes[*b].needs_grad {
                    let db = self.buf(grads, *b);
                    for (idx, &gi) in g.iter().enumerate() {
                        db[idx % cols] += gi;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[*a].needs_grad {
                    let da = self.buf(grads, *a);
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if self.nodes[*b].needs_grad {
                    let db = self.buf(grads, *b);
                    for (d, &gi) in db.iter_mut().zip(g) {
                        *d -= gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let scalar_rhs = self.nodes[*b].value.is_scalar() && !self.nodes[*a].value.is_scalar();
                if scalar_rhs {
                    let s = self.nodes[*b].value.scalar_value();
                    if self.nodes[*a].needs_grad {
                        let da = self.buf(grads, *a);
                        for (d, &gi) in da.iter_mut().zip(g) {
                            *d += gi * s;
                        }
                    }
                    if self.nodes[*b].needs_grad {
                        let av = &self.nodes[*a].value;
                        let acc = kernels::dot(g, av.data());
                        self.buf(grads, *b)[0] += acc;
                    }
                } else {
                    if self.nodes[*a].needs_grad {
                        let bv = self.nodes[*b].value.data();
                        let da = self.buf(grads, *a);
                        for ((d, &gi), &y) in da.iter_mut().zip(g).zip(bv) {
                            *d += gi * y;
                        }
                    }
                    if self.nodes[*b].needs_grad {
                        let av = self.nodes[*a].value.data();
                        let db = self.buf(grads, *b);
                        for ((d, &gi), &x) in db.iter_mut().zip(g).zip(av) {
                            *d += gi * x;
                        }
                    }
                }
            }
            Op::Div(a, b) => {
                let scalar_rhs = self.nodes[*b].value.is_scalar() && !self.nodes[*a].value.is_scalar();
                if scalar_rhs {
                    let s = self.nodes[*b].value.scalar_value();
                    if self.nodes[*a].needs_grad {
                        let da = self.buf(grads, *a);
                        for (d, &gi) in da.iter_mut().zip(g) {
                            *d += gi / s;
                        }
                    }
                    if self.nodes[*b].needs_grad {
                        let av = self.nodes[*a].value.data();
                        let mut acc = F::zero();
                        for (&gi, &x) in g.iter().zip(av) {
                            acc += gi * x;
                        }
                        self.buf(grads, *b)[0] -= acc / (s * s);
                    }
                } else {
                    if self.nodes[*a].needs_grad {
                        let bv = self.nodes[*b].value.data();
                        let da = self.buf(grads, *a);
                        for ((d, &gi), &y) in da.iter_mut().zip(g).zip(bv) {
                            *d += gi / y;
                        }
                    }
                    if self.nodes[*b].needs_grad {
                        let av = self.nodes[*a].value.data();
                        let bv = self.nodes[*b].value.data();
                        let db = self.buf(grads, *b);
                        for (((d, &gi), &x), &y) in db.iter_mut().zip(g).zip(av).zip(bv) {
                            *d -= gi * x / (y * y);
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[*a].needs_grad {
                    let c = *c;
                    let da = self.buf(grads, *a);
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi * c;
                    }
                }
            }
            Op::AddConst(a, _) => {
                if self.nodes[*a].needs_grad {
                    let da = self.buf(grads, *a);
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let n = self.nodes[*b].value.cols();
                if self.nodes[*a].needs_grad {
                    let bv = self.nodes[*b].value.data().to_vec();
                    let da = self.buf(grads, *a);
                    kernels::matmul_a_bt_acc(g, &bv, da, m, n, k);
                }
                if self.nodes[*b].needs_grad {
                    let av = self.nodes[*a].value.data().to_vec();
                    let db = self.buf(grads, *b);
                    kernels::matmul_at_b_acc(&av, g, db, k, m, n);
                }
            }
            Op::Transpose(a) => {
                if self.nodes[*a].needs_grad {
                    let (r, c) = (node.value.rows(), node.value.cols());
                    let mut gt = vec![F::zero(); r * c];
                    kernels::transpose(g, r, c, &mut gt);
                    let da = self.buf(grads, *a);
                    for (d, &gi) in da.iter_mut().zip(&gt) {
                        *d += gi;
                    }
                }
            }
            Op::Sum(a) => {
                if self.nodes[*a].needs_grad {
                    let gi = g[0];
                    let da = self.buf(grads, *a);
                    for d in da.iter_mut() {
                        *d += gi;
                    }
                }
            }
            Op::Mean(a) => {
                if self.nodes[*a].needs_grad {
                    let n = self.nodes[*a].value.numel();
                    let gi = g[0] / fl::<F>(n as f64);
                    let da = self.buf(grads, *a);
                    for d in da.iter_mut() {
                        *d += gi;
                    }
                }
            }
            Op::SumRows(a) => {
                if self.nodes[*a].needs_grad {
                    let c = self.nodes[*a].value.cols();
                    let da = self.buf(grads, *a);
                    for (i, row) in da.chunks_exact_mut(c).enumerate() {
                        for d in row {
                            *d += g[i];
                        }
                    }
                }
            }
            Op::ScaleRows(a, s) => {
                let c = self.nodes[*a].value.cols();
                if self.nodes[*a].needs_grad {
                    let sv = self.nodes[*s].value.data().to_vec();
                    let da = self.buf(grads, *a);
                    for (i, (row, grow)) in da.chunks_exact_mut(c).zip(g.chunks_exact(c)).enumerate() {
                        for (d, &gi) in row.iter_mut().zip(grow) {
                            *d += gi * sv[i];
                        }
                    }
                }
                if self.nodes[*s].needs_grad {
                    let av = self.nodes[*a].value.data();
                    let mut ds_local = vec![F::zero(); self.nodes[*s].value.numel()];
                    for (i, (arow, grow)) in av.chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
                        ds_local[i] = kernels::dot(arow, grow);
                    }
                    let ds = self.buf(grads, *s);
                    for (d, &v) in ds.iter_mut().zip(&ds_local) {
                        *d += v;
                    }
                }
            }
            Op::Sqrt(a) => {
                if self.nodes[*a].needs_grad {
                    let tiny: F = fl(1e-15);
                    let half: F = fl(0.5);
                    let yv = node.value.data().to_vec();
                    let da = self.buf(grads, *a);
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(&yv) {
                        if y > tiny {
                            *d += gi * half / y;
                        }
                    }
                }
            }
            Op::Log(a) => {
                if self.nodes[*a].needs_grad {
                    let xv = self.nodes[*a].value.data().to_vec();
                    let da = self.buf(grads, *a);
                    for ((d, &gi), &x) in da.iter_mut().zip(g).zip(&xv) {
                        *d += gi / x;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.nodes[*a].needs_grad {
                    let yv = node.value.data().to_vec();
                    let da = self.buf(grads, *a);
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(&yv) {
                        *d += gi * y * (F::one() - y);
                    }
                }
            }
            Op::Gelu(a) => {
                if self.nodes[*a].needs_grad {
                    let xv = self.nodes[*a].value.data().to_vec();
                    let da = self.buf(grads, *a);
                    for ((d, &gi), &x) in da.iter_mut().zip(g).zip(&xv) {
                        *d += gi * kernels::gelu_grad(x);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.nodes[*a].needs_grad {
                    let c = node.value.cols();
                    let yv = node.value.data().to_vec();
                    let da = self.buf(grads, *a);
                    for ((drow, grow), yrow) in
                        da.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(yv.chunks_exact(c))
                    {
                        let s = kernels::dot(grow, yrow);
                        for ((d, &gi), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gi - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let c = node.value.cols();
                let xv = self.nodes[*x].value.data();
                let gv = self.nodes[*gain].value.data();
                let inv_c = F::one() / fl::<F>(c as f64);
                if self.nodes[*bias].needs_grad {
                    let mut db_local = vec![F::zero(); c];
                    for grow in g.chunks_exact(c) {
                        for (d, &gi) in db_local.iter_mut().zip(grow) {
                            *d += gi;
                        }
                    }
                    let db = self.buf(grads, *bias);
                    for (d, &v) in db.iter_mut().zip(&db_local) {
                        *d += v;
                    }
                }
                if self.nodes[*gain].needs_grad {
                    let mut dg_local = vec![F::zero(); c];
                    for ((grow, xrow), (&m, &rs)) in
                        g.chunks_exact(c).zip(xv.chunks_exact(c)).zip(mean.iter().zip(rstd.iter()))
                    {
                        for (j, (d, &gi)) in dg_local.iter_mut().zip(grow).enumerate() {
                            *d += gi * (xrow[j] - m) * rs;
                        }
                    }
                    let dg = self.buf(grads, *gain);
                    for (d, &v) in dg.iter_mut().zip(&dg_local) {
                        *d += v;
                    }
                }
                if self.nodes[*x].needs_grad {
                    let mut dx_local = vec![F::zero(); xv.len()];
                    for (r, (grow, xrow)) in g.chunks_exact(c).zip(xv.chunks_exact(c)).enumerate() {
                        let (m, rs) = (mean[r], rstd[r]);
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..c {
                            let nh = (xrow[j] - m) * rs;
                            let dn = grow[j] * gv[j];
                            m1 += dn;
                            m2 += dn * nh;
                        }
                        m1 = m1 * inv_c;
                        m2 = m2 * inv_c;
                        let drow = &mut dx_local[r * c..(r + 1) * c];
                        for j in 0..c {
                            let nh = (xrow[j] - m) * rs;
                            let dn = grow[j] * gv[j];
                            drow[j] = rs * (dn - m1 - nh * m2);
                        }
                    }
                    let dx = self.buf(grads, *x);
                    for (d, &v) in dx.iter_mut().zip(&dx_local) {
                        *d += v;
                    }
                }
            }
            Op::ClampMin(a, c) => {
                if self.nodes[*a].needs_grad {
                    let c = *c;
                    let xv = self.nodes[*a].value.data().to_vec();
                    let da = self.buf(grads, *a);
                    for ((d, &gi), &x) in da.iter_mut().zip(g).zip(&xv) {
                        if x > c {
                            *d += gi;
                        }
                    }
                }
            }
            Op::ClampMax(a, c) => {
                if self.nodes[*a].needs_grad {
                    let c = *c;
                    let xv = self.nodes[*a].value.data().to_vec();
                    let da = self.buf(grads, *a);
                    for ((d, &gi), &x) in da.iter_mut().zip(g).zip(&xv) {
                        if x < c {
                            *d += gi;
                        }
                    }
                }
            }
            Op::MeanRowsPrefix { x, rows } => {
                if self.nodes[*x].needs_grad {
                    let c = self.nodes[*x].value.cols();
                    let inv = F::one() / fl::<F>(*rows as f64);
                    let dx = self.buf(grads, *x);
                    for row in dx.chunks_exact_mut(c).take(*rows) {
                        for (d, &gi) in row.iter_mut().zip(g) {
                            *d += gi * inv;
                        }
                    }
                }
            }
            Op::GatherRows { table, indices } => {
                if self.nodes[*table].needs_grad {
                    let c = self.nodes[*table].value.cols();
                    let dt = self.buf(grads, *table);
                    for (t, &row) in indices.iter().enumerate() {
                        let dst = &mut dt[row * c..(row + 1) * c];
                        let src = &g[t * c..(t + 1) * c];
                        for (d, &gi) in dst.iter_mut().zip(src) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::OffDiagonal(a) => {
                if self.nodes[*a].needs_grad {
                    let n = self.nodes[*a].value.rows();
                    let da = self.buf(grads, *a);
                    for i in 0..n {
                        for j in 0..n - 1 {
                            let col = if j < i { j } else { j + 1 };
                            da[i * n + col] += g[i * (n - 1) + j];
                        }
                    }
                }
            }
            Op::StackRows(ids) => {
                let c = node.value.cols();
                for (i, &src) in ids.iter().enumerate() {
                    if self.nodes[src].needs_grad {
                        let d = self.buf(grads, src);
                        for (dv, &gi) in d.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *dv += gi;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(g: &mut Graph<f64>, v: f64) -> Tensor {
        g.param(TensorData::scalar(v))
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = scalar_param(&mut g, 3.0);
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.scalar_value(y), 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_gradient_closed_form() {
        // loss = sum(A B) gives dA = ones * B^T and dB = A^T * ones.
        let mut g = Graph::<f64>::new();
        let a = g.param(TensorData::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = g.param(TensorData::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0]).unwrap());
        let p = g.matmul(a, b).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        // dA[i][p] = sum_j B[p][j]
        let da = grads.get(a).unwrap().data();
        for i in 0..2 {
            assert!((da[i * 3] - (-0.5)).abs() < 1e-12);
            assert!((da[i * 3 + 1] - 2.0).abs() < 1e-12);
            assert!((da[i * 3 + 2] - 4.0).abs() < 1e-12);
        }
        // dB[p][j] = sum_i A[i][p]
        let db = grads.get(b).unwrap().data();
        assert_eq!(db, &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn vector_matmul_shapes() {
        let mut g = Graph::<f64>::new();
        let v = g.param(TensorData::vector(vec![1.0, 2.0]));
        let w = g.param(TensorData::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let out = g.matmul(v, w).unwrap();
        assert_eq!(g.shape(out), &[3]);
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 0.0]);
    }

    #[test]
    fn cosine_self_is_one_and_antipodal_minus_one() {
        let mut g = Graph::<f64>::new();
        let a = g.param(TensorData::vector(vec![0.3, -0.7, 1.2]));
        let c = g.cosine_sim(a, a).unwrap();
        assert!((g.scalar_value(c) - 1.0).abs() < 1e-12);

        let b = g.scale(a, -1.0).unwrap();
        let d = g.cosine_sim(a, b).unwrap();
        assert!((g.scalar_value(d) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_vector_is_degenerate_error() {
        let mut g = Graph::<f64>::new();
        let a = g.param(TensorData::vector(vec![0.0, 0.0]));
        let b = g.param(TensorData::vector(vec![1.0, 0.0]));
        assert!(matches!(g.cosine_sim(a, b), Err(LeapError::Degenerate(_))));
    }

    #[test]
    fn detach_blocks_gradient_exactly() {
        // loss = sum(detach(x) * x): only the live factor receives gradient,
        // so d/dx = detach(x) = x, not 2x.
        let mut g = Graph::<f64>::new();
        let x = g.param(TensorData::vector(vec![1.0, 2.0, 3.0]));
        let frozen = g.detach(x).unwrap();
        let p = g.mul(frozen, x).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0, 3.0]);
        assert!(grads.get(frozen).is_none());
    }

    #[test]
    fn detach_is_idempotent() {
        let mut g = Graph::<f64>::new();
        let x = g.param(TensorData::vector(vec![0.5, -1.5]));
        let once = g.detach(x).unwrap();
        let twice = g.detach(once).unwrap();
        assert_eq!(g.value(once), g.value(twice));

        let p1 = g.mul(once, x).unwrap();
        let l1 = g.sum(p1).unwrap();
        let p2 = g.mul(twice, x).unwrap();
        let l2 = g.sum(p2).unwrap();
        let g1 = g.backward(l1).unwrap();
        let g2 = g.backward(l2).unwrap();
        assert_eq!(g1.get(x).unwrap().data(), g2.get(x).unwrap().data());
    }

    #[test]
    fn fully_detached_loss_has_no_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.param(TensorData::vector(vec![1.0, 2.0]));
        let frozen = g.detach(x).unwrap();
        let loss = g.sum(frozen).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(TensorData::scalar(2.0));
        let c = g.constant(TensorData::scalar(5.0));
        let p = g.mul(x, c).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.param(TensorData::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(LeapError::Contract(_))));
    }

    #[test]
    fn division_by_zero_is_caught() {
        let mut g = Graph::<f64>::new();
        let a = g.param(TensorData::scalar(1.0));
        let b = g.param(TensorData::scalar(0.0));
        assert!(matches!(g.div(a, b), Err(LeapError::NonFinite(_))));
    }

    #[test]
    fn off_diagonal_forward_and_backward() {
        let mut g = Graph::<f64>::new();
        let a = g.param(
            TensorData::matrix(3, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap(),
        );
        let od = g.off_diagonal(a).unwrap();
        assert_eq!(g.shape(od), &[3, 2]);
        assert_eq!(g.value(od).data(), &[2.0, 3.0, 4.0, 6.0, 7.0, 8.0]);
        let loss = g.sum(od).unwrap();
        let grads = g.backward(loss).unwrap();
        // Diagonal entries never contribute.
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn gather_rows_accumulates_duplicate_indices() {
        let mut g = Graph::<f64>::new();
        let table = g.param(TensorData::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let picked = g.gather_rows(table, &[1, 1, 2]).unwrap();
        assert_eq!(g.value(picked).data(), &[3.0, 4.0, 3.0, 4.0, 5.0, 6.0]);
        let loss = g.sum(picked).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(table).unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_rows_prefix_ignores_suffix() {
        let mut g = Graph::<f64>::new();
        let x = g.param(TensorData::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 100.0, 100.0]).unwrap());
        let pooled = g.mean_rows_prefix(x, 2).unwrap();
        assert_eq!(g.value(pooled).data(), &[2.0, 3.0]);
        let loss = g.sum(pooled).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.5, 0.5, 0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn normalize_rows_unit_norm() {
        let mut g = Graph::<f64>::new();
        let x = g.param(TensorData::matrix(2, 3, vec![3.0, 0.0, 4.0, 0.0, 2.0, 0.0]).unwrap());
        let n = g.normalize_rows(x).unwrap();
        let d = g.value(n).data();
        assert!((kernels::l2_norm(&d[0..3]) - 1.0).abs() < 1e-12);
        assert!((kernels::l2_norm(&d[3..6]) - 1.0).abs() < 1e-12);
        assert!((d[0] - 0.6).abs() < 1e-12);
        assert!((d[2] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn stack_rows_routes_gradients_to_sources() {
        let mut g = Graph::<f64>::new();
        let a = g.param(TensorData::vector(vec![1.0, 2.0]));
        let b = g.param(TensorData::vector(vec![3.0, 4.0]));
        let m = g.stack_rows(&[a, b]).unwrap();
        assert_eq!(g.shape(m), &[2, 2]);
        let w = g.constant(TensorData::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap());
        let p = g.mul(m, w).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.param(TensorData::vector(vec![1.0, 2.0]));
        let b = g.param(TensorData::vector(vec![1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "unhelpful message: {msg}");
    }
}
