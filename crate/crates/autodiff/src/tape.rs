//! Recording tape and the differentiable operations built on it.
//!
//! Nodes are appended in execution order, so the node vector is already a
//! topological order: every op's inputs precede it. Backward walks the
//! vector once in reverse.

use rand::Rng;

use crate::real::{gemm, MatRef};
use crate::tensor::matrix_dims;
use crate::{Error, ParamId, ParamStore, Real, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Concat { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    AddRow { x: Var, row: Var },
    Tanh(Var),
    Relu(Var),
    Dropout { x: Var, mask: Vec<T> },
    PointNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    MaxPool { x: Var, argmax: Vec<usize> },
    SoftmaxCe { logits: Var, probs: Vec<T>, targets: Vec<usize> },
    WeightedMse { pred: Var, target: Vec<T>, weights: Vec<T>, denom: T },
    Sum(Var),
    Combine { terms: Vec<(Var, T)> },
}

struct Node<T> {
    rows: usize,
    cols: usize,
    /// `None` for parameter nodes, whose values live in the store.
    value: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-pass record of executed operations.
///
/// A tape borrows the parameter store read-only, so parameter values are
/// never copied onto it. Dropout is active only when the tape was built
/// with [`Tape::training`].
pub struct Tape<'p, T: Real> {
    params: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
    rng: Option<Box<dyn rand::RngCore + 'p>>,
}

impl<'p, T: Real> Default for Tape<'p, T> {
    fn default() -> Self {
        Tape { params: None, param_vars: Vec::new(), nodes: Vec::new(), rng: None }
    }
}

fn check_finite<T: Real>(op: &'static str, values: &[T]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn mismatch(op: &'static str, expected: String, got: String) -> Error {
    Error::ShapeMismatch { op, expected, got }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Evaluation tape over a parameter store.
    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Tape { params: Some(params), param_vars: vec![None; params.len()], ..Self::default() }
    }

    /// Training tape: dropout masks are drawn from `rng`.
    pub fn training<R: rand::RngCore + 'p>(params: &'p ParamStore<T>, rng: R) -> Self {
        Tape { rng: Some(Box::new(rng)), ..Self::with_params(params) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value: Some(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(values), _) => values,
            (None, Op::Param(id)) => self.params.expect("param node without store").get(*id).data(),
            (None, _) => unreachable!("only parameter nodes borrow their values"),
        }
    }

    /// `(rows, cols)` of a recorded value.
    pub fn dims(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let (r, c) = self.dims(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("dims consistent")
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn input(&mut self, t: &Tensor<T>, requires_grad: bool) -> Result<Var> {
        check_finite("input", t.data())?;
        let (r, c) = matrix_dims(t.shape());
        Ok(self.push(r, c, t.data().to_vec(), Op::Input, requires_grad))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(mismatch("constant", format!("{}", rows * cols), format!("{}", data.len())));
        }
        check_finite("constant", &data)?;
        Ok(self.push(rows, cols, data, Op::Input, false))
    }

    /// Parameter handle; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.params.expect("tape built without a parameter store");
        let (rows, cols) = matrix_dims(store.get(id).shape());
        self.nodes.push(Node { rows, cols, value: None, op: Op::Param(id), requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `y = x W + b` for `x: [B, I]`, `W: [I, O]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, i) = self.dims(x);
        let (wi, o) = self.dims(w);
        if wi != i {
            return Err(mismatch("linear", format!("weight rows = {i} (input width)"), format!("weight {wi}x{o}")));
        }
        if let Some(b) = b {
            let (br, bc) = self.dims(b);
            if br * bc != o {
                return Err(mismatch("linear", format!("bias length {o}"), format!("bias {br}x{bc}")));
            }
        }
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = b {
            let bias = self.value(b);
            for row in out.chunks_exact_mut(o) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(MatRef::new(self.value(x), n, i), MatRef::new(self.value(w), i, o), beta, &mut out);
        check_finite("linear", &out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(n, o, out, Op::Linear { x, w, b }, rg))
    }

    /// Column-wise concatenation. Single-row parts are broadcast to the
    /// common row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty { op: "concat" });
        }
        let rows = parts.iter().map(|&p| self.dims(p).0).max().unwrap_or(1);
        for &p in parts {
            let r = self.dims(p).0;
            if r != rows && r != 1 {
                return Err(mismatch("concat", format!("{rows} rows or 1"), format!("{r} rows")));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = vec![T::zero(); rows * cols];
        let mut offset = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            let src = self.value(p);
            for r in 0..rows {
                let sr = if pr == 1 { 0 } else { r };
                out[r * cols + offset..r * cols + offset + pc].copy_from_slice(&src[sr * pc..(sr + 1) * pc]);
            }
            offset += pc;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(rows, cols, out, Op::Concat { parts: parts.to_vec() }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if start + len > cols {
            return Err(mismatch("slice_cols", format!("range within {cols} columns"), format!("{start}..{}", start + len)));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(rows, len, out, Op::SliceCols { x, start }, rg))
    }

    /// Rows `start..start + len` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if start + len > rows {
            return Err(mismatch("slice_rows", format!("range within {rows} rows"), format!("{start}..{}", start + len)));
        }
        let out = self.value(x)[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(x);
        Ok(self.push(len, cols, out, Op::SliceRows { x, start }, rg))
    }

    /// Adds the single row `row` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, c) = self.dims(x);
        let (rr, rc) = self.dims(row);
        if rr * rc != c {
            return Err(mismatch("add_row", format!("row of length {c}"), format!("{rr}x{rc}")));
        }
        let r = self.value(row);
        let mut out = self.value(x).to_vec();
        for orow in out.chunks_exact_mut(c) {
            add_into(orow, r);
        }
        check_finite("add_row", &out)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(n, c, out, Op::AddRow { x, row }, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let out: Vec<T> = self.value(x).iter().map(|v| v.tanh()).collect();
        check_finite("tanh", &out)?;
        let rg = self.rg(x);
        Ok(self.push(r, c, out, Op::Tanh(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let out: Vec<T> = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let rg = self.rg(x);
        Ok(self.push(r, c, out, Op::Relu(x), rg))
    }

    /// Inverted dropout: zero each entry with probability `p`, scale
    /// survivors by `1/(1-p)`. Identity on evaluation tapes.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.nodes[x.0].rows * self.nodes[x.0].cols;
        let mask: Vec<T> = (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let (r, c) = self.dims(x);
        let out: Vec<T> = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let rg = self.rg(x);
        Ok(self.push(r, c, out, Op::Dropout { x, mask }, rg))
    }

    /// Per-channel standardization over the rows (points) of `x`, followed
    /// by a learned scale and shift. With fewer than two rows the
    /// statistics are undefined and only scale and shift are applied.
    pub fn point_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c) = self.dims(x);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let (r, cc) = self.dims(v);
            if r * cc != c {
                return Err(mismatch("point_norm", format!("{name} length {c}"), format!("{r}x{cc}")));
            }
        }
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = vec![T::zero(); n * c];
        let (xhat, inv_std) = if n >= 2 {
            let nf = T::from_f64(n as f64);
            let mut mean = vec![T::zero(); c];
            for row in xs.chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m = *m + v;
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / nf);
            let mut var = vec![T::zero(); c];
            for row in xs.chunks_exact(c) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - m;
                    *s = *s + d * d;
                }
            }
            let eps = T::from_f64(eps);
            let inv: Vec<T> = var.iter().map(|&s| T::one() / (s / nf + eps).sqrt()).collect();
            let mut xhat = vec![T::zero(); n * c];
            for ((row, hrow), orow) in xs.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(out.chunks_exact_mut(c)) {
                for j in 0..c {
                    let h = (row[j] - mean[j]) * inv[j];
                    hrow[j] = h;
                    orow[j] = g[j] * h + b[j];
                }
            }
            (xhat, inv)
        } else {
            for (row, orow) in xs.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
                for j in 0..c {
                    orow[j] = g[j] * row[j] + b[j];
                }
            }
            (xs.to_vec(), Vec::new())
        };
        check_finite("point_norm", &out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(n, c, out, Op::PointNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Channel-wise maximum over rows; ties resolve to the smallest row.
    pub fn max_pool(&mut self, x: Var) -> Result<(Var, Vec<usize>)> {
        let (n, c) = self.dims(x);
        if n == 0 {
            return Err(Error::Empty { op: "max_pool" });
        }
        let xs = self.value(x);
        let mut out = xs[..c].to_vec();
        let mut argmax = vec![0usize; c];
        for (r, row) in xs.chunks_exact(c).enumerate().skip(1) {
            for j in 0..c {
                if row[j] > out[j] {
                    out[j] = row[j];
                    argmax[j] = r;
                }
            }
        }
        let rg = self.rg(x);
        let v = self.push(1, c, out, Op::MaxPool { x, argmax: argmax.clone() }, rg);
        Ok((v, argmax))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, k) = self.dims(logits);
        if targets.len() != b {
            return Err(mismatch("softmax_cross_entropy", format!("{b} targets"), format!("{}", targets.len())));
        }
        if b == 0 {
            return Err(Error::Empty { op: "softmax_cross_entropy" });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::TargetOutOfRange { target: t, classes: k });
        }
        let xs = self.value(logits);
        let mut probs = vec![T::zero(); b * k];
        let mut total = T::zero();
        for ((row, prow), &t) in xs.chunks_exact(k).zip(probs.chunks_exact_mut(k)).zip(targets) {
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut z = T::zero();
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - m).exp();
                z = z + *p;
            }
            prow.iter_mut().for_each(|p| *p = *p / z);
            total = total + (z.ln() + m - row[t]);
        }
        let loss = total / T::from_f64(b as f64);
        check_finite("softmax_cross_entropy", &[loss])?;
        let rg = self.rg(logits);
        Ok(self.push(1, 1, vec![loss], Op::SoftmaxCe { logits, probs, targets: targets.to_vec() }, rg))
    }

    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let n = self.value(pred).len();
        self.weighted_mse(pred, target, &vec![T::one(); n])
    }

    /// `sum(w * (pred - target)^2) / sum(w)`; zero when all weights are zero.
    pub fn weighted_mse(&mut self, pred: Var, target: &[T], weights: &[T]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() || p.len() != weights.len() {
            return Err(mismatch(
                "mse",
                format!("{} targets and weights", p.len()),
                format!("{} targets, {} weights", target.len(), weights.len()),
            ));
        }
        check_finite("mse", target)?;
        let denom = weights.iter().fold(T::zero(), |a, &w| a + w);
        let loss = if denom > T::zero() {
            p.iter()
                .zip(target)
                .zip(weights)
                .fold(T::zero(), |a, ((&p, &t), &w)| a + w * (p - t) * (p - t))
                / denom
        } else {
            T::zero()
        };
        check_finite("mse", &[loss])?;
        let rg = self.rg(pred);
        let op = Op::WeightedMse { pred, target: target.to_vec(), weights: weights.to_vec(), denom };
        Ok(self.push(1, 1, vec![loss], op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().fold(T::zero(), |a, &v| a + v);
        check_finite("sum", &[s])?;
        let rg = self.rg(x);
        Ok(self.push(1, 1, vec![s], Op::Sum(x), rg))
    }

    /// `sum_i c_i * x_i` over same-shaped values.
    pub fn combine(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::Empty { op: "combine" });
        };
        let (r, c) = self.dims(first);
        let mut out = vec![T::zero(); r * c];
        for &(v, coeff) in terms {
            if self.dims(v) != (r, c) {
                return Err(mismatch("combine", format!("{r}x{c}"), format!("{:?}", self.dims(v))));
            }
            for (o, &x) in out.iter_mut().zip(self.value(v)) {
                *o = *o + coeff * x;
            }
        }
        check_finite("combine", &out)?;
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(r, c, out, Op::Combine { terms: terms.to_vec() }, rg))
    }

    /// Hash of every discrete branch taken so far: ReLU activity patterns
    /// and max-pool winners. Two evaluations with equal signatures lie on
    /// the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(_) => {
                    i.hash(&mut h);
                    for v in node.value.as_deref().unwrap_or(&[]) {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(Error::NotScalar { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut params = vec![None; self.params.map_or(0, |p| p.len())];
        for (i, pv) in self.param_vars.iter().enumerate() {
            if let Some(v) = pv {
                params[i] = grads[v.0].clone();
            }
        }
        Ok(Gradients { nodes: grads, params, dims: self.nodes.iter().map(|n| n.rows * n.cols).collect() })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (n, i) = self.dims(*x);
                let o = cols;
                if self.rg(*x) {
                    let acc = grad_slot(grads, *x, n * i);
                    gemm(MatRef::new(g, n, o), MatRef::new(self.value(*w), i, o).t(), T::one(), acc);
                }
                if self.rg(*w) {
                    let acc = grad_slot(grads, *w, i * o);
                    gemm(MatRef::new(self.value(*x), n, i).t(), MatRef::new(g, n, o), T::one(), acc);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let acc = grad_slot(grads, b, o);
                    for row in g.chunks_exact(o) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.dims(p);
                    if self.rg(p) {
                        let acc = grad_slot(grads, p, pr * pc);
                        for r in 0..rows {
                            let dst = if pr == 1 { 0 } else { r };
                            let src = &g[r * cols + offset..r * cols + offset + pc];
                            for (a, &v) in acc[dst * pc..(dst + 1) * pc].iter_mut().zip(src) {
                                *a = *a + v;
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::SliceCols { x, start } => {
                if self.rg(*x) {
                    let (xr, xc) = self.dims(*x);
                    let acc = grad_slot(grads, *x, xr * xc);
                    for r in 0..rows {
                        for j in 0..cols {
                            acc[r * xc + start + j] = acc[r * xc + start + j] + g[r * cols + j];
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if self.rg(*x) {
                    let (xr, xc) = self.dims(*x);
                    let acc = grad_slot(grads, *x, xr * xc);
                    add_into(&mut acc[start * xc..(start + rows) * xc], g);
                }
            }
            Op::AddRow { x, row } => {
                if self.rg(*x) {
                    add_into(grad_slot(grads, *x, g.len()), g);
                }
                if self.rg(*row) {
                    let acc = grad_slot(grads, *row, cols);
                    for grow in g.chunks_exact(cols) {
                        add_into(acc, grow);
                    }
                }
            }
            Op::Tanh(x) => {
                if self.rg(*x) {
                    let y = node.value.as_deref().expect("owned");
                    let acc = grad_slot(grads, *x, y.len());
                    for ((a, &gy), &yv) in acc.iter_mut().zip(g).zip(y) {
                        *a = *a + gy * (T::one() - yv * yv);
                    }
                }
            }
            Op::Relu(x) => {
                if self.rg(*x) {
                    let y = node.value.as_deref().expect("owned");
                    let acc = grad_slot(grads, *x, y.len());
                    for ((a, &gy), &yv) in acc.iter_mut().zip(g).zip(y) {
                        if yv > T::zero() {
                            *a = *a + gy;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.rg(*x) {
                    let acc = grad_slot(grads, *x, mask.len());
                    for ((a, &gy), &m) in acc.iter_mut().zip(g).zip(mask) {
                        *a = *a + gy * m;
                    }
                }
            }
            Op::PointNorm { x, gamma, beta, xhat, inv_std } => {
                let c = cols;
                let n = rows;
                let gam = self.value(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        dgamma[j] = dgamma[j] + grow[j] * hrow[j];
                        dbeta[j] = dbeta[j] + grow[j];
                    }
                }
                if self.rg(*x) {
                    let acc = grad_slot(grads, *x, n * c);
                    if inv_std.is_empty() {
                        for (arow, grow) in acc.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                            for j in 0..c {
                                arow[j] = arow[j] + grow[j] * gam[j];
                            }
                        }
                    } else {
                        // dxhat = g * gamma; sums of dxhat and dxhat*xhat equal
                        // gamma*dbeta and gamma*dgamma respectively.
                        let nf = T::from_f64(n as f64);
                        for ((arow, grow), hrow) in acc.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                            for j in 0..c {
                                let dxh = grow[j] * gam[j];
                                let term = nf * dxh - gam[j] * dbeta[j] - hrow[j] * gam[j] * dgamma[j];
                                arow[j] = arow[j] + inv_std[j] / nf * term;
                            }
                        }
                    }
                }
                if self.rg(*gamma) {
                    add_into(grad_slot(grads, *gamma, c), &dgamma);
                }
                if self.rg(*beta) {
                    add_into(grad_slot(grads, *beta, c), &dbeta);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.rg(*x) {
                    let (xr, xc) = self.dims(*x);
                    let acc = grad_slot(grads, *x, xr * xc);
                    for (j, &r) in argmax.iter().enumerate() {
                        acc[r * xc + j] = acc[r * xc + j] + g[j];
                    }
                }
            }
            Op::SoftmaxCe { logits, probs, targets } => {
                if self.rg(*logits) {
                    let (b, k) = self.dims(*logits);
                    let scale = g[0] / T::from_f64(b as f64);
                    let acc = grad_slot(grads, *logits, b * k);
                    for ((arow, prow), &t) in acc.chunks_exact_mut(k).zip(probs.chunks_exact(k)).zip(targets) {
                        for j in 0..k {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            arow[j] = arow[j] + scale * (prow[j] - onehot);
                        }
                    }
                }
            }
            Op::WeightedMse { pred, target, weights, denom } => {
                if self.rg(*pred) && *denom > T::zero() {
                    let p = self.value(*pred);
                    let scale = g[0] * T::from_f64(2.0) / *denom;
                    let acc = grad_slot(grads, *pred, p.len());
                    for (((a, &pv), &t), &w) in acc.iter_mut().zip(p).zip(target).zip(weights) {
                        *a = *a + scale * w * (pv - t);
                    }
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    let len = self.value(*x).len();
                    let acc = grad_slot(grads, *x, len);
                    acc.iter_mut().for_each(|a| *a = *a + g[0]);
                }
            }
            Op::Combine { terms } => {
                for &(v, coeff) in terms {
                    if self.rg(v) {
                        let acc = grad_slot(grads, v, g.len());
                        for (a, &gv) in acc.iter_mut().zip(g) {
                            *a = *a + coeff * gv;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn grad_slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(acc: &mut [T], src: &[T]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a = *a + s;
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: Vec<Option<Vec<T>>>,
    dims: Vec<usize>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a recorded value; zeros if unreached.
    pub fn wrt(&self, v: Var) -> Vec<T> {
        self.nodes[v.0].clone().unwrap_or_else(|| vec![T::zero(); self.dims[v.0]])
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into `acc` (laid out like the store).
    pub fn accumulate_into(&self, acc: &mut [Vec<T>]) {
        for (a, g) in acc.iter_mut().zip(&self.params) {
            if let Some(g) = g {
                add_into(a, g);
            }
        }
    }

    /// Parameter gradients in store order, zero-filled where unreached.
    pub fn into_param_grads(self, store: &ParamStore<T>) -> Vec<Vec<T>> {
        let mut out = store.zero_grads();
        self.accumulate_into(&mut out);
        out
    }
}
