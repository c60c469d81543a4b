use super::kernels::{self, split_axis};
use super::{Element, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a user-defined op: receives the input values,
/// the output value and the output gradient, returns one gradient per input.
pub type CustomVjp<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>>>;

enum Op<T: Element> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(T, T)> },
    Gelu(Var),
    LeakyRelu(Var, T),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    Mean(Var),
    Sum(Var),
    Custom { inputs: Vec<Var>, vjp: CustomVjp<T> },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Define-by-run record of primitive operations. Nodes are appended in
/// execution order, so the vector itself is a topological order.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044_715;

fn mismatch(op: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.into(),
        actual: actual.into(),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Gradient of the last `backward` call; `None` for values that do not
    /// require grad or before any backward pass.
    pub fn grad(&self, var: Var) -> Option<&Tensor<T>> {
        self.nodes[var.0].grad.as_ref()
    }

    /// Clears gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch(
                "matmul",
                format!("[n, k] x [k, m] with lhs {sa:?}"),
                format!("rhs {sb:?}"),
            ));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        let value = Tensor::new([n, m], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch(
                op,
                format!("rhs shape equal to a suffix of {sa:?}"),
                format!("{sb:?}"),
            ));
        }
        Ok(())
    }

    /// Elementwise `a + b`; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let nb = vb.numel();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb.data()[i % nb])
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise `a * b` with the same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let nb = vb.numel();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vb.data()[i % nb])
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * factor).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Scale(a, factor), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(mismatch("concat", format!("axis < {}", base.len()), format!("axis {axis}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(mismatch(
                    "concat",
                    format!("shapes matching {base:?} except axis {axis}"),
                    format!("{s:?}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let val = self.value(v);
                let chunk = val.shape()[axis] * inner;
                data.extend_from_slice(&val.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries of `input` starting at `start` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(mismatch(
                "slice",
                format!("range within axis {axis} of {s:?}"),
                format!("start {start}, len {len}"),
            ));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Slice { input, axis, start }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape.to_vec())?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 2 {
            return Err(mismatch("transpose", "rank 2", format!("{s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let value = Tensor::new([c, r], transpose2(self.value(input).data(), r, c))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Transpose(input), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input);
        let d = *v.shape().last().ok_or_else(|| mismatch("softmax", "rank >= 1", "rank 0"))?;
        let mut data = v.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Softmax(input), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx.shape().last().ok_or_else(|| mismatch("layer_norm", "rank >= 1", "rank 0"))?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [d] {
                return Err(mismatch(
                    "layer_norm",
                    format!("{name} of shape [{d}]"),
                    format!("{:?}", self.shape(p)),
                ));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let mut stats = Vec::with_capacity(vx.numel() / d);
        let mut data = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            stats.push((mean, rstd));
            data.extend(
                row.iter()
                    .zip(g.iter().zip(b))
                    .map(|(&v, (&gi, &bi))| (v - mean) * rstd * gi + bi),
            );
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, stats }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input);
        let data = v.data().iter().map(|&x| gelu(x)).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Gelu(input), rg))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Result<Var> {
        let v = self.value(input);
        let data = v
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { x * slope })
            .collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::LeakyRelu(input, slope), rg))
    }

    /// Mean cross-entropy of `logits` (`[classes]` or `[batch, classes]`)
    /// against integer labels. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let (rows, classes) = match *v.shape() {
            [c] => (1, c),
            [r, c] => (r, c),
            _ => return Err(mismatch("cross_entropy", "[classes] or [batch, classes]", format!("{:?}", v.shape()))),
        };
        if labels.len() != rows {
            return Err(mismatch(
                "cross_entropy",
                format!("{rows} labels"),
                format!("{} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::InvalidLabel { label: bad, classes });
        }
        let mut total = T::zero();
        for (row, &label) in v.data().chunks_exact(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total += lse - row[label];
        }
        let value = Tensor::scalar(total / T::from_usize(rows).unwrap());
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input);
        let value = Tensor::scalar(v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).unwrap());
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Mean(input), rg))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(input).data().iter().copied().sum::<T>());
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Sum(input), rg))
    }

    /// Records an op whose forward value was computed by the caller and
    /// whose backward rule is `vjp`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, vjp: CustomVjp<T>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                vjp,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`. Afterwards every node that requires
    /// grad holds a gradient; nodes the loss does not depend on hold zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let loss_shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].as_ref() else { continue };
            let g = g.clone();
            self.propagate(i, &g, &mut grads)?;
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                let shape = node.value.shape().to_vec();
                let data = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                node.grad = Some(Tensor::new(shape, data)?);
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.wants(*a) {
                    accumulate(grads, *a, kernels::matmul_bt(g, vb.data(), n, m, k));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * m];
                    kernels::matmul_at_acc(va.data(), g, &mut db, k, m);
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    let nb = self.value(*b).numel();
                    let mut db = vec![T::zero(); nb];
                    for (idx, &gi) in g.iter().enumerate() {
                        db[idx % nb] += gi;
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let nb = vb.len();
                if self.wants(*a) {
                    let da = g.iter().enumerate().map(|(idx, &gi)| gi * vb[idx % nb]).collect();
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); nb];
                    for (idx, (&gi, &ai)) in g.iter().zip(va).enumerate() {
                        db[idx % nb] += gi * ai;
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, factor) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().map(|&gi| gi * *factor).collect());
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                let row = node.value.shape()[*axis] * inner;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let base = o * row + offset;
                            dv.extend_from_slice(&g[base..base + len]);
                        }
                        accumulate(grads, v, dv);
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                if self.wants(*input) {
                    let in_shape = self.shape(*input);
                    let (outer, n, inner) = split_axis(in_shape, *axis);
                    let len = node.value.shape()[*axis] * inner;
                    let mut dx = vec![T::zero(); outer * n * inner];
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        dx[base..base + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                    }
                    accumulate(grads, *input, dx);
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let s = node.value.shape();
                    accumulate(grads, *a, transpose2(g, s[0], s[1]));
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let y = node.value.data();
                    let d = *node.value.shape().last().unwrap();
                    let mut dx = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks_exact(d).zip(g.chunks_exact(d)) {
                        let s = kernels::dot(yr, gr);
                        dx.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - s)));
                    }
                    accumulate(grads, *a, dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let vx = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let inv_d = T::one() / T::from_usize(d).unwrap();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = Vec::with_capacity(vx.len());
                for ((xr, gr), &(mean, rstd)) in vx.chunks_exact(d).zip(g.chunks_exact(d)).zip(stats) {
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * gam[j];
                        dgamma[j] += gr[j] * xhat;
                        dbeta[j] += gr[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let (m1, m2) = (sum_dxhat * inv_d, sum_dxhat_xhat * inv_d);
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * rstd;
                        dx.push(rstd * (gr[j] * gam[j] - m1 - xhat * m2));
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    accumulate(grads, *a, x.iter().zip(g).map(|(&xi, &gi)| gi * gelu_grad(xi)).collect());
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    let dx = x
                        .iter()
                        .zip(g)
                        .map(|(&xi, &gi)| if xi > T::zero() { gi } else { gi * *slope })
                        .collect();
                    accumulate(grads, *a, dx);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if self.wants(*logits) {
                    let v = self.value(*logits).data();
                    let classes = v.len() / labels.len();
                    let scale = g[0] / T::from_usize(labels.len()).unwrap();
                    let mut dx = v.to_vec();
                    for (row, &label) in dx.chunks_exact_mut(classes).zip(labels) {
                        softmax_in_place(row);
                        row[label] -= T::one();
                        for r in row.iter_mut() {
                            *r *= scale;
                        }
                    }
                    accumulate(grads, *logits, dx);
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).numel();
                    accumulate(grads, *a, vec![g[0] / T::from_usize(n).unwrap(); n]);
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, vec![g[0]; self.value(*a).numel()]);
                }
            }
            Op::Custom { inputs, vjp } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                let input_grads = vjp(&values, &node.value, &gt);
                if input_grads.len() != inputs.len() {
                    return Err(mismatch(
                        "custom",
                        format!("{} input gradients", inputs.len()),
                        format!("{}", input_grads.len()),
                    ));
                }
                for (&v, dv) in inputs.iter().zip(input_grads) {
                    if dv.shape() != self.shape(v) {
                        return Err(mismatch("custom", format!("{:?}", self.shape(v)), format!("{:?}", dv.shape())));
                    }
                    if self.wants(v) {
                        accumulate(grads, v, dv.into_vec());
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], var: Var, contrib: Vec<T>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn transpose2<T: Element>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn gelu<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(GELU_COEF);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(GELU_COEF);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}
