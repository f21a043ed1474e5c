//! Tape of recorded tensor operations and the reverse sweep over it.

use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumSquares(Var),
    Dot(Var, Tensor),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Tensor },
    SoftCe { logits: Var, targets: Tensor, probs: Tensor },
    GaussianKl { mu: Var, log_var: Var },
    Reparam { mu: Var, log_var: Var, eps: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order since
/// every op only refers to earlier nodes.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a grad-enabled node, or a consistency error.
    pub fn require(&self, v: Var) -> Result<&Tensor> {
        self.get(v)
            .ok_or_else(|| Error::Consistency(format!("no gradient recorded for node {}", v.0)))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Grad-enabled leaf (a parameter or an input being optimized).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if !self.value(a).is_matrix() {
            return Err(Error::shape(format!(
                "transpose of non-matrix {:?}",
                self.value(a).shape()
            )));
        }
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    /// Adds a length-`m` bias to every row of a `[B×m]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if !xv.is_matrix() || bv.len() != xv.cols() {
            return Err(Error::shape(format!(
                "bias {:?} against input {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        let bias = bv.data().to_vec();
        for i in 0..out.rows() {
            for (o, bb) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    /// `x·W + b` for `x: [B×n]`, `W: [n×m]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape(format!(
                "linear layer input {xs:?} does not fit weight {ws:?}"
            )));
        }
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Elementwise product with a fixed tensor (masks, known factors).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        same_shape(self.value(a), &c, "mul_const")?;
        let out = self.value(a).zip_map(&c, |x, y| x * y);
        let ng = self.ng(a);
        Ok(self.push(out, Op::MulConst(a, c), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v < 0.0 { 0.0 } else { v });
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input lies inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(out, Op::Clamp(a, lo, hi), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum_squares());
        let ng = self.ng(a);
        self.push(out, Op::SumSquares(a), ng)
    }

    /// `Σ a ⊙ c` for a fixed `c`; its gradient with respect to `a` is `c`.
    ///
    /// This is how a party turns a received `∂ℓ/∂out` message into a local
    /// backward pass.
    pub fn dot_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        same_shape(self.value(a), &c, "dot_const")?;
        let out = Tensor::scalar(
            self.value(a)
                .data()
                .iter()
                .zip(c.data())
                .map(|(x, y)| x * y)
                .sum(),
        );
        let ng = self.ng(a);
        Ok(self.push(out, Op::Dot(a, c), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat of zero parts"));
        };
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if !v.is_matrix() || v.rows() != rows {
                return Err(Error::shape(format!(
                    "concat part {:?} against {rows} rows",
                    v.shape()
                )));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if !v.is_matrix() || start >= end || end > v.cols() {
            return Err(Error::shape(format!(
                "column slice {start}..{end} of {:?}",
                v.shape()
            )));
        }
        let cols: Vec<usize> = (start..end).collect();
        let out = v.select_cols(&cols);
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    /// Mean softmax cross-entropy over the batch.
    ///
    /// Returns the scalar loss node and the row-wise softmax probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Tensor)> {
        let lv = self.value(logits);
        if !lv.is_matrix() || lv.rows() != labels.len() {
            return Err(Error::shape(format!(
                "logits {:?} against {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let (b, c) = (lv.rows(), lv.cols());
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Label {
                    row: i,
                    label: y,
                    classes: c,
                });
            }
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[y];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let probs = Tensor::matrix(b, c, probs)?;
        let ng = self.ng(logits);
        let node = self.push(
            Tensor::scalar(loss / b as f64),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs: probs.clone(),
            },
            ng,
        );
        Ok((node, probs))
    }

    /// Mean cross-entropy against target distributions (rows of `targets`).
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let lv = self.value(logits);
        if !lv.is_matrix() || lv.shape() != targets.shape() {
            return Err(Error::shape(format!(
                "logits {:?} against targets {:?}",
                lv.shape(),
                targets.shape()
            )));
        }
        let (b, c) = (lv.rows(), lv.cols());
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for i in 0..b {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (v, q) in row.iter().zip(targets.row(i)) {
                loss += q * (lse - v);
            }
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let probs = Tensor::matrix(b, c, probs)?;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::SoftCe {
                logits,
                targets: targets.clone(),
                probs,
            },
            ng,
        ))
    }

    /// Batch-mean KL divergence from `N(μ, exp(log_var))` to `N(0, I)`.
    pub fn gaussian_kl(&mut self, mu: Var, log_var: Var) -> Result<Var> {
        let (m, l) = (self.value(mu), self.value(log_var));
        same_shape(m, l, "gaussian_kl")?;
        let b = m.rows() as f64;
        let total: f64 = m
            .data()
            .iter()
            .zip(l.data())
            .map(|(&mu, &lv)| 0.5 * (mu * mu + lv.exp() - 1.0 - lv))
            .sum();
        let ng = self.ng(mu) || self.ng(log_var);
        Ok(self.push(Tensor::scalar(total / b), Op::GaussianKl { mu, log_var }, ng))
    }

    /// `μ + ε ⊙ exp(½·log_var)` with fresh standard-normal `ε`.
    pub fn reparam_sample(&mut self, mu: Var, log_var: Var, rng: &mut Rng) -> Result<Var> {
        let shape = self.value(mu).shape().to_vec();
        let n = self.value(mu).len();
        let eps = Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())?;
        self.reparam_with_noise(mu, log_var, eps)
    }

    /// Reparameterized sample with caller-supplied noise.
    pub fn reparam_with_noise(&mut self, mu: Var, log_var: Var, eps: Tensor) -> Result<Var> {
        let (m, l) = (self.value(mu), self.value(log_var));
        same_shape(m, l, "reparam_sample")?;
        same_shape(m, &eps, "reparam_sample noise")?;
        let data = m
            .data()
            .iter()
            .zip(l.data())
            .zip(eps.data())
            .map(|((&mu, &lv), &e)| mu + e * (0.5 * lv).exp())
            .collect();
        let out = Tensor::new(m.shape().to_vec(), data)?;
        let ng = self.ng(mu) || self.ng(log_var);
        Ok(self.push(out, Op::Reparam { mu, log_var, eps }, ng))
    }

    /// Reverse sweep from a scalar node.
    ///
    /// Every grad-enabled leaf gets an entry; leaves the loss does not depend
    /// on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Leaf => {
                    if grads[i].is_none() {
                        grads[i] = Some(Tensor::zeros(node.value.shape()));
                    }
                }
                _ => {}
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let acc = |v: Var, d: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let d = g.matmul(&self.value(*b).transpose())?;
                    acc(*a, d, grads);
                }
                if self.ng(*b) {
                    let d = self.value(*a).transpose().matmul(g)?;
                    acc(*b, d, grads);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose(), grads),
            Op::AddBias(x, b) => {
                acc(*x, g.clone(), grads);
                if self.ng(*b) {
                    let d = Tensor::new(self.value(*b).shape().to_vec(), g.col_sums())?;
                    acc(*b, d, grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.scale(-1.0), grads);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(bv, |x, y| x * y), grads);
                acc(*b, g.zip_map(av, |x, y| x * y), grads);
            }
            Op::MulConst(a, c) => acc(*a, g.zip_map(c, |x, y| x * y), grads),
            Op::Scale(a, s) => acc(*a, g.scale(*s), grads),
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                acc(*a, d, grads);
            }
            Op::Exp(a) => acc(*a, g.zip_map(out, |x, y| x * y), grads),
            Op::Clamp(a, lo, hi) => {
                let d = g.zip_map(self.value(*a), |gv, x| {
                    if x >= *lo && x <= *hi {
                        gv
                    } else {
                        0.0
                    }
                });
                acc(*a, d, grads);
            }
            Op::Sum(a) => {
                let s = g.item();
                acc(*a, Tensor::full(self.value(*a).shape(), s), grads);
            }
            Op::SumSquares(a) => {
                let s = g.item();
                acc(*a, self.value(*a).scale(2.0 * s), grads);
            }
            Op::Dot(a, c) => acc(*a, c.scale(g.item()), grads),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let cols: Vec<usize> = (offset..offset + w).collect();
                    acc(p, g.select_cols(&cols), grads);
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut d = Tensor::zeros(src.shape());
                let w = g.cols();
                for i in 0..g.rows() {
                    d.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                acc(*a, d, grads);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let s = g.item() / labels.len() as f64;
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    let row = d.row_mut(i);
                    // p_y − 1 as −Σ_{j≠y} p_j keeps its sign when p_y rounds to 1
                    row[y] = -row.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, p)| p).sum::<f64>();
                    for v in row.iter_mut() {
                        *v *= s;
                    }
                }
                acc(*logits, d, grads);
            }
            Op::SoftCe {
                logits,
                targets,
                probs,
            } => {
                // (p·Σq − q)/B; Σq = 1 for proper distributions
                let s = g.item() / probs.rows() as f64;
                let mut d = probs.clone();
                for i in 0..d.rows() {
                    let mass: f64 = targets.row(i).iter().sum();
                    for (v, q) in d.row_mut(i).iter_mut().zip(targets.row(i)) {
                        *v = s * (*v * mass - q);
                    }
                }
                acc(*logits, d, grads);
            }
            Op::GaussianKl { mu, log_var } => {
                let s = g.item() / self.value(*mu).rows() as f64;
                acc(*mu, self.value(*mu).scale(s), grads);
                let d = self.value(*log_var).map(|lv| s * 0.5 * (lv.exp() - 1.0));
                acc(*log_var, d, grads);
            }
            Op::Reparam { mu, log_var, eps } => {
                acc(*mu, g.clone(), grads);
                if self.ng(*log_var) {
                    let lv = self.value(*log_var);
                    let mut d = g.zip_map(eps, |gv, e| gv * e);
                    for (dv, l) in d.data_mut().iter_mut().zip(lv.data()) {
                        *dv *= 0.5 * (0.5 * l).exp();
                    }
                    acc(*log_var, d, grads);
                }
            }
        }
        Ok(())
    }
}

/// `θ ← θ − lr·g` over matched parameter and gradient lists.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Option<&Tensor>], lr: f64) -> Result<()> {
    sgd_step_clipped(params, grads, lr, None)
}

/// [`sgd_step`] with each gradient tensor first scaled down to 2-norm at
/// most `clip`.
pub fn sgd_step_clipped(
    params: &mut [&mut Tensor],
    grads: &[Option<&Tensor>],
    lr: f64,
    clip: Option<f64>,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Consistency(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let g = g.ok_or_else(|| Error::Consistency(format!("missing gradient for parameter {i}")))?;
        if !p.same_shape(g) {
            return Err(Error::shape(format!(
                "parameter {i} {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let scale = match clip {
            Some(c) => {
                let n = g.norm();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * (scale * gv);
        }
    }
    Ok(())
}
