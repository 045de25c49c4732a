//! Wengert tape: reverse-mode AD over dense f64 tensors.
//!
//! Operations record their output value plus a backward closure onto a
//! linear tape. Nodes are appended in execution order, so the tape is
//! already topologically sorted; `backward` walks it once in reverse.
//!
//! Double-backward policy: calling `backward` twice on the same tape is an
//! error (the tape does not reset gradients implicitly).

use std::cell::{Cell, RefCell};

use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{CoreError, Result};
use crate::rng::rng_from_seed;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&[f64], &mut GradBufs)>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Per-node gradient buffers, populated during the reverse sweep.
pub struct GradBufs {
    bufs: Vec<Vec<f64>>,
}

impl GradBufs {
    fn accumulate(&mut self, node: usize, grad: &[f64]) {
        let buf = &mut self.bufs[node];
        if buf.is_empty() {
            return; // node does not require grad
        }
        for (b, g) in buf.iter_mut().zip(grad) {
            *b += g;
        }
    }

    fn buf_mut(&mut self, node: usize) -> &mut [f64] {
        &mut self.bufs[node]
    }

    fn wants(&self, node: usize) -> bool {
        !self.bufs[node].is_empty()
    }
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Option<GradBufs>>,
    backward_done: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(None),
            backward_done: Cell::new(false),
        }
    }

    fn push(&self, value: Tensor, requires_grad: bool, backward: Option<BackwardFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// Register a leaf. Gradients are collected only for `requires_grad` leaves
    /// (and interior nodes on a path to one).
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    /// Register a non-differentiable constant.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    /// Copy a value out of the graph: same data, no gradient path.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    /// Clone of the value at `v`.
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub(crate) fn var_requires_grad(&self, v: Var) -> bool {
        self.requires_grad(v)
    }

    /// Record a scalar loss node with one differentiable parent. The closure
    /// adds the parent gradient contribution into the provided buffer.
    pub(crate) fn push_scalar_loss<F>(&self, parent: Var, value: f64, back: Option<F>) -> Var
    where
        F: Fn(&[f64], &mut [f64]) + 'static,
    {
        let rg = self.requires_grad(parent);
        let backward: Option<BackwardFn> = match (rg, back) {
            (true, Some(back)) => Some(Box::new(move |g, grads| {
                let buf = grads.buf_mut(parent.0);
                if !buf.is_empty() {
                    back(g, buf);
                }
            })),
            _ => None,
        };
        self.push(Tensor::scalar(value), rg, backward)
    }

    /// Record a scalar loss node with two differentiable parents.
    pub(crate) fn push_scalar_loss2<F>(&self, p1: Var, p2: Var, value: f64, back: F) -> Var
    where
        F: Fn(&[f64], Option<&mut [f64]>, Option<&mut [f64]>) + 'static,
    {
        let rg = self.requires_grad(p1) || self.requires_grad(p2);
        let backward: Option<BackwardFn> = if rg {
            Some(Box::new(move |g, grads| {
                if p1.0 == p2.0 {
                    let b = grads.buf_mut(p1.0);
                    if !b.is_empty() {
                        // same operand on both sides: apply each contribution in turn
                        back(g, Some(b), None);
                        let b = grads.buf_mut(p1.0);
                        back(g, None, Some(b));
                    }
                    return;
                }
                let (lo, hi) = (p1.0.min(p2.0), p1.0.max(p2.0));
                let (head, tail) = grads.bufs.split_at_mut(hi);
                let (mut blo, mut bhi) = (&mut head[lo], &mut tail[0]);
                if p1.0 > p2.0 {
                    std::mem::swap(&mut blo, &mut bhi);
                }
                let g1 = if blo.is_empty() { None } else { Some(&mut blo[..]) };
                let g2 = if bhi.is_empty() { None } else { Some(&mut bhi[..]) };
                back(g, g1, g2);
            }))
        } else {
            None
        };
        self.push(Tensor::scalar(value), rg, backward)
    }

    fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// Run the reverse sweep from a scalar loss. Errors if called twice.
    pub fn backward(&self, loss: Var) -> Result<()> {
        if self.backward_done.get() {
            return Err(CoreError::InvalidInput(
                "backward already ran on this tape".into(),
            ));
        }
        self.backward_done.set(true);

        let nodes = self.nodes.borrow();
        if !nodes[loss.0].value.is_scalar() {
            return Err(CoreError::shape("backward root must be a scalar"));
        }

        let mut grads = GradBufs {
            bufs: nodes
                .iter()
                .map(|n| {
                    if n.requires_grad {
                        vec![0.0; n.value.numel()]
                    } else {
                        Vec::new()
                    }
                })
                .collect(),
        };
        if grads.wants(loss.0) {
            grads.buf_mut(loss.0)[0] = 1.0;
        }

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Some(back) = &node.backward {
                let g = std::mem::take(&mut grads.bufs[idx]);
                back(&g, &mut grads);
                grads.bufs[idx] = g;
            }
        }

        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }

    /// Gradient of the last `backward` root with respect to `v`.
    /// `None` if backward has not run or `v` carries no gradient.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let bufs = grads.as_ref()?;
        if !bufs.wants(v.0) {
            return None;
        }
        let shape = self.shape(v);
        Some(Tensor::new(shape, bufs.bufs[v.0].clone()).expect("grad shape"))
    }

    // ───────────────────────── elementwise ─────────────────────────

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    fn zip_op(
        &self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        df: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Var> {
        let (shape, av, bv) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(CoreError::shape(format!(
                    "{name}: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            (ta.shape().to_vec(), ta.data().to_vec(), tb.data().to_vec())
        };
        let out: Vec<f64> = av.iter().zip(&bv).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let back: Option<BackwardFn> = if rg {
            Some(Box::new(move |g, grads| {
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for i in 0..av.len() {
                    let (da, db) = df(av[i], bv[i], g[i]);
                    ga[i] = da;
                    gb[i] = db;
                }
                grads.accumulate(a.0, &ga);
                grads.accumulate(b.0, &gb);
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::new(shape, out)?, rg, back))
    }

    /// `c * a` for a constant scalar.
    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary_op(a, move |x| c * x, move |_, g| c * g)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary_op(a, move |x| x + c, |_, g| g)
    }

    /// GELU (tanh approximation).
    pub fn gelu(&self, a: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let f = |x: f64| 0.5 * x * (1.0 + (C * (x + 0.044715 * x.powi(3))).tanh());
        let df = |x: f64, g: f64| {
            let u = C * (x + 0.044715 * x.powi(3));
            let t = u.tanh();
            let du = C * (1.0 + 3.0 * 0.044715 * x * x);
            g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
        };
        self.unary_op(a, f, df)
    }

    fn unary_op(
        &self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let (shape, av) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            (t.shape().to_vec(), t.data().to_vec())
        };
        let out: Vec<f64> = av.iter().map(|&x| f(x)).collect();
        let rg = self.requires_grad(a);
        let back: Option<BackwardFn> = if rg {
            Some(Box::new(move |g, grads| {
                let ga: Vec<f64> = av.iter().zip(g).map(|(&x, &gg)| df(x, gg)).collect();
                grads.accumulate(a.0, &ga);
            }))
        } else {
            None
        };
        self.push(Tensor::new(shape, out).expect("unary shape"), rg, back)
    }

    /// Add a constant tensor (no gradient through `c`). Used for additive masks.
    pub fn add_const(&self, a: Var, c: &Tensor) -> Result<Var> {
        let (shape, av) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.shape() != c.shape() {
                return Err(CoreError::shape(format!(
                    "add_const: {:?} vs {:?}",
                    t.shape(),
                    c.shape()
                )));
            }
            (t.shape().to_vec(), t.data().to_vec())
        };
        let out: Vec<f64> = av.iter().zip(c.data()).map(|(&x, &y)| x + y).collect();
        let rg = self.requires_grad(a);
        let back: Option<BackwardFn> = if rg {
            Some(Box::new(move |g, grads| grads.accumulate(a.0, g)))
        } else {
            None
        };
        Ok(self.push(Tensor::new(shape, out)?, rg, back))
    }

    // ───────────────────────── linear algebra ─────────────────────────

    /// Standard 2-D matrix product. Backward: dA = dC·Bᵀ, dB = Aᵀ·dC.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n, av, bv) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape().len() != 2 || tb.shape().len() != 2 {
                return Err(CoreError::shape("matmul expects 2-D operands"));
            }
            if ta.cols() != tb.rows() {
                return Err(CoreError::shape(format!(
                    "matmul: inner dims {} vs {}",
                    ta.cols(),
                    tb.rows()
                )));
            }
            (
                ta.rows(),
                ta.cols(),
                tb.cols(),
                ta.data().to_vec(),
                tb.data().to_vec(),
            )
        };
        let out = matmul_raw(&av, &bv, m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let back: Option<BackwardFn> = if rg {
            Some(Box::new(move |g, grads| {
                // dA[i,p] = sum_j g[i,j] * B[p,j]
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += gij * bv[p * n + j];
                        }
                    }
                }
                grads.accumulate(a.0, &da);
                // dB[p,j] = sum_i A[i,p] * g[i,j]
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
                grads.accumulate(b.0, &db);
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, back))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (m, n, av) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.shape().len() != 2 {
                return Err(CoreError::shape("transpose expects 2-D"));
            }
            (t.rows(), t.cols(), t.data().to_vec())
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.requires_grad(a);
        let back: Option<BackwardFn> = if rg {
            Some(Box::new(move |g, grads| {
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                grads.accumulate(a.0, &ga);
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::new(vec![n, m], out)?, rg, back))
    }

    /// Broadcast a length-n vector over every row of an (m, n) matrix.
    pub fn add_row_broadcast(&self, a: Var, bias: Var) -> Result<Var> {
        let (m, n, av, bv) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[bias.0].value);
            if ta.shape().len() != 2 || tb.numel() != ta.cols() {
                return Err(CoreError::shape(format!(
                    "add_row_broadcast: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            (ta.rows(), ta.cols(), ta.data().to_vec(), tb.data().to_vec())
        };
        let mut out = av;
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += bv[j];
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(bias);
        let back: Option<BackwardFn> = if rg {
            Some(Box::new(move |g, grads| {
                grads.accumulate(a.0, g);
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        gb[j] += g[i * n + j];
                    }
                }
                grads.accumulate(bias.0, &gb);
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, back))
    }

    // ───────────────────────── structure ops ─────────────────────────

    /// Gather rows of a 2-D table by index (embedding lookup).
    /// Backward scatter-adds into the table.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols, tv) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            if t.shape().len() != 2 {
                return Err(CoreError::shape("gather_rows expects 2-D table"));
            }
            (t.rows(), t.cols(), t.data().to_vec())
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(CoreError::InvalidInput(format!(
                "row index {bad} out of range {rows}"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let rg = self.requires_grad(table);
        let ids_owned = ids.to_vec();
        let back: Option<BackwardFn> = if rg {
            Some(Box::new(move |g, grads| {
                let buf = grads.buf_mut(table.0);
                if buf.is_empty() {
                    return;
                }
                for (r, &i) in ids_owned.iter().enumerate() {
                    for j in 0..cols {
                        buf[i * cols + j] += g[r * cols + j];
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::new(vec![ids.len(), cols], out)?, rg, back))
    }

    /// Concatenate 2-D blocks along rows.
    pub fn row_stack(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::InvalidInput("row_stack of nothing".into()));
        }
        let mut cols = None;
        let mut total = 0usize;
        let mut data = Vec::new();
        let mut spans = Vec::with_capacity(parts.len());
        {
            let nodes = self.nodes.borrow();
            for &p in parts {
                let t = &nodes[p.0].value;
                if t.shape().len() != 2 {
                    return Err(CoreError::shape("row_stack expects 2-D parts"));
                }
                match cols {
                    None => cols = Some(t.cols()),
                    Some(c) if c != t.cols() => {
                        return Err(CoreError::shape("row_stack: column mismatch"))
                    }
                    _ => {}
                }
                spans.push((p.0, total, t.rows()));
                total += t.rows();
                data.extend_from_slice(t.data());
            }
        }
        let cols = cols.unwrap();
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        let back: Option<BackwardFn> = if rg {
            Some(Box::new(move |g, grads| {
                for &(node, row0, nrows) in &spans {
                    let slice = &g[row0 * cols..(row0 + nrows) * cols];
                    grads.accumulate(node, slice);
                }
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::new(vec![total, cols], data)?, rg, back))
    }

    /// Select rows `rows` of a 2-D matrix (view as copy; scatter backward).
    pub fn select_rows(&self, a: Var, rows: &[usize]) -> Result<Var> {
        self.gather_like(a, rows)
    }

    fn gather_like(&self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n, av) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.shape().len() != 2 {
                return Err(CoreError::shape("select_rows expects 2-D"));
            }
            (t.rows(), t.cols(), t.data().to_vec())
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(CoreError::InvalidInput(format!(
                "row {bad} out of range {m}"
            )));
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&av[r * n..(r + 1) * n]);
        }
        let rg = self.requires_grad(a);
        let rows_owned = rows.to_vec();
        let back: Option<BackwardFn> = if rg {
            Some(Box::new(move |g, grads| {
                let buf = grads.buf_mut(a.0);
                if buf.is_empty() {
                    return;
                }
                for (k, &r) in rows_owned.iter().enumerate() {
                    for j in 0..n {
                        buf[r * n + j] += g[k * n + j];
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::new(vec![rows.len(), n], out)?, rg, back))
    }

    /// Pick single elements `x[r_i, c_i]`, returning a length-k vector.
    pub fn gather_elements(&self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let (m, n, av) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.shape().len() != 2 {
                return Err(CoreError::shape("gather_elements expects 2-D"));
            }
            (t.rows(), t.cols(), t.data().to_vec())
        };
        if let Some(&(r, c)) = idx.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(CoreError::InvalidInput(format!(
                "element ({r},{c}) out of range ({m},{n})"
            )));
        }
        let out: Vec<f64> = idx.iter().map(|&(r, c)| av[r * n + c]).collect();
        let rg = self.requires_grad(a);
        let idx_owned = idx.to_vec();
        let back: Option<BackwardFn> = if rg {
            Some(Box::new(move |g, grads| {
                let buf = grads.buf_mut(a.0);
                if buf.is_empty() {
                    return;
                }
                for (k, &(r, c)) in idx_owned.iter().enumerate() {
                    buf[r * n + c] += g[k];
                }
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::new(vec![idx.len()], out)?, rg, back))
    }

    // ───────────────────────── reductions ─────────────────────────

    pub fn sum(&self, a: Var) -> Var {
        let (numel, total) = self.with_value(a, |t| (t.numel(), t.data().iter().sum::<f64>()));
        let rg = self.requires_grad(a);
        let back: Option<BackwardFn> = if rg {
            Some(Box::new(move |g, grads| {
                grads.accumulate(a.0, &vec![g[0]; numel]);
            }))
        } else {
            None
        };
        self.push(Tensor::scalar(total), rg, back)
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.with_value(a, Tensor::numel);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    // ───────────────────────── softmax family ─────────────────────────

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let (m, n, av) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.shape().len() != 2 {
                return Err(CoreError::shape("softmax_rows expects 2-D"));
            }
            (t.rows(), t.cols(), t.data().to_vec())
        };
        let mut probs = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&av[i * n..(i + 1) * n], &mut probs[i * n..(i + 1) * n]);
        }
        let rg = self.requires_grad(a);
        let probs_cap = probs.clone();
        let back: Option<BackwardFn> = if rg {
            Some(Box::new(move |g, grads| {
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let p = &probs_cap[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = p.iter().zip(gr).map(|(&pi, &gi)| pi * gi).sum();
                    for j in 0..n {
                        ga[i * n + j] = p[j] * (gr[j] - dot);
                    }
                }
                grads.accumulate(a.0, &ga);
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::new(vec![m, n], probs)?, rg, back))
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax_rows(&self, a: Var) -> Result<Var> {
        let (m, n, av) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.shape().len() != 2 {
                return Err(CoreError::shape("log_softmax_rows expects 2-D"));
            }
            (t.rows(), t.cols(), t.data().to_vec())
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            log_softmax_into(&av[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let rg = self.requires_grad(a);
        let logp = out.clone();
        let back: Option<BackwardFn> = if rg {
            Some(Box::new(move |g, grads| {
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let lp = &logp[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        ga[i * n + j] = gr[j] - lp[j].exp() * gsum;
                    }
                }
                grads.accumulate(a.0, &ga);
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, back))
    }

    // ───────────────────────── normalization ─────────────────────────

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n, xv, gv, bv) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let tg = &nodes[gain.0].value;
            let tb = &nodes[bias.0].value;
            if tx.shape().len() != 2 {
                return Err(CoreError::shape("layer_norm expects 2-D input"));
            }
            if tg.numel() != tx.cols() || tb.numel() != tx.cols() {
                return Err(CoreError::shape("layer_norm: gain/bias length"));
            }
            (
                tx.rows(),
                tx.cols(),
                tx.data().to_vec(),
                tg.data().to_vec(),
                tb.data().to_vec(),
            )
        };
        let nf = n as f64;
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / nf;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let xh = (row[j] - mu) * is;
                xhat[i * n + j] = xh;
                out[i * n + j] = gv[j] * xh + bv[j];
            }
        }
        let rg =
            self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        let back: Option<BackwardFn> = if rg {
            let gv_cap = gv;
            Some(Box::new(move |g, grads| {
                let mut gx = vec![0.0; m * n];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    let xh = &xhat[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    // d/dxhat = g * gain; then standard LN backward
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..n {
                        let dxh = gr[j] * gv_cap[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                        gg[j] += gr[j] * xh[j];
                        gb[j] += gr[j];
                    }
                    let is = inv_std[i];
                    for j in 0..n {
                        let dxh = gr[j] * gv_cap[j];
                        gx[i * n + j] = is * (dxh - sum_dxh / nf - xh[j] * sum_dxh_xh / nf);
                    }
                }
                grads.accumulate(x.0, &gx);
                grads.accumulate(gain.0, &gg);
                grads.accumulate(bias.0, &gb);
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, back))
    }

    // ───────────────────────── dropout ─────────────────────────

    /// Inverted dropout with an eagerly sampled, seed-determined mask.
    /// The same `(seed, rate, numel)` always produces the same mask.
    pub fn dropout(&self, a: Var, rate: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(CoreError::InvalidInput(format!(
                "dropout rate {rate} outside [0,1)"
            )));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let (shape, av) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            (t.shape().to_vec(), t.data().to_vec())
        };
        let mask = dropout_mask(seed, rate, av.len());
        let out: Vec<f64> = av.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let rg = self.requires_grad(a);
        let back: Option<BackwardFn> = if rg {
            Some(Box::new(move |g, grads| {
                let ga: Vec<f64> = g.iter().zip(&mask).map(|(&gg, &m)| gg * m).collect();
                grads.accumulate(a.0, &ga);
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::new(shape, out)?, rg, back))
    }
}

/// Sample the keep/scale mask used by [`Tape::dropout`].
pub fn dropout_mask(seed: u64, rate: f64, numel: usize) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    let keep_scale = 1.0 / (1.0 - rate);
    (0..numel)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                keep_scale
            }
        })
        .collect()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// Numerically stabilized softmax (max subtraction).
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l - max).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Numerically stabilized log-softmax.
pub fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let lz = z.ln() + max;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = l - lz;
    }
}
