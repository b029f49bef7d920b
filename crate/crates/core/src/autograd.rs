//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value; `backward` consumes the
//! tape and walks it in reverse execution order, which is a valid reverse
//! topological order because a node can only reference earlier nodes.

use crate::error::{Error, Result};
use crate::tensor::{self, RowNorm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, cache: RowNorm },
    Gelu(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.dims().to_vec(),
        rhs: b.dims().to_vec(),
    }
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

    /// Records a leaf; it receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs_grad = t.requires_grad;
        let mut value = Tensor::new(t.dims().to_vec(), t.data().to_vec()).expect("valid tensor");
        value.requires_grad = needs_grad;
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.dims().to_vec(), data).expect("same dims")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `x: [m, n]` plus `bias: [n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = tx.matrix_dims()?;
        if tb.dims() != [n] {
            return Err(shape_err("add_bias", tx, tb));
        }
        let data = tx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(a, b)| a + b))
            .collect();
        let out = Tensor::new(tx.dims().to_vec(), data)?;
        let ng = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(tx.dims().to_vec(), data).expect("same dims");
        let ng = self.needs(&[x]);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = tensor::softmax(self.value(x), axis)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, cache) =
            tensor::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = tensor::gelu(self.value(x));
        let ng = self.needs(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.matrix_dims()?;
        if start >= end || end > n {
            return Err(Error::contract(format!(
                "column slice {start}..{end} invalid for {:?}",
                tx.dims()
            )));
        }
        let data = tx
            .data()
            .chunks(n)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let out = Tensor::new(vec![m, end - start], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::contract("empty concat"))?);
        let (m, _) = first.matrix_dims()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (pm, pn) = t.matrix_dims()?;
            if pm != m {
                return Err(shape_err("concat_cols", first, t));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        let ng = self.needs(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.matrix_dims()?;
        if start >= end || end > m {
            return Err(Error::contract(format!(
                "row slice {start}..{end} invalid for {:?}",
                tx.dims()
            )));
        }
        let out = Tensor::new(vec![end - start, n], tx.data()[start * n..end * n].to_vec())?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::contract("empty concat"))?);
        let (_, n) = first.matrix_dims()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (pm, pn) = t.matrix_dims()?;
            if pn != n {
                return Err(shape_err("concat_rows", first, t));
            }
            rows += pm;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        let ng = self.needs(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Column-wise mean over rows: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.matrix_dims()?;
        let mut data = vec![0.0; n];
        for row in tx.data().chunks(n) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        let out = Tensor::new(vec![1, n], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::MeanRows(x), ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), ng)
    }

    /// Mean softmax cross-entropy of `logits: [B, C]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, c) = t.matrix_dims()?;
        if targets.len() != b {
            return Err(Error::contract(format!(
                "cross_entropy: {} targets for {b} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::contract(format!("target {bad} out of range 0..{c}")));
        }
        let probs = tensor::softmax(t, 1)?.into_data();
        let mut loss = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= b as f64;
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Consumes the tape and returns d`loss`/d(node) for every node that
    /// depends on a gradient-requiring leaf.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                lt.dims()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let dims = node.value.dims();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.matrix_dims()?;
                let (_, n) = tb.matrix_dims()?;
                if self.nodes[a.0].needs_grad {
                    // dA = G · Bᵀ
                    let bt = tensor::transpose(tb)?;
                    let mut da = vec![0.0; m * k];
                    tensor::matmul_into(g, bt.data(), &mut da, m, n, k);
                    acc(*a, da);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · G
                    let at = tensor::transpose(ta)?;
                    let mut db = vec![0.0; k * n];
                    tensor::matmul_into(at.data(), g, &mut db, k, m, n);
                    acc(*b, db);
                }
            }
            Op::Transpose(a) => {
                let gt = Tensor::new(dims.to_vec(), g.to_vec())?;
                acc(*a, tensor::transpose(&gt)?.into_data());
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, g.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
            }
            Op::AddBias(x, bias) => {
                let n = dims[1];
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                acc(*x, g.to_vec());
                acc(*bias, db);
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = tensor::axis_split(dims, *axis)?;
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|j| g[base + j * inner] * y[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            dx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let cols = *dims.last().expect("dims");
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for (r, rs) in cache.rstd.iter().enumerate() {
                    let span = r * cols..(r + 1) * cols;
                    let (gr, xh) = (&g[span.clone()], &cache.xhat[span.clone()]);
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        let d = gr[c] * gam[c];
                        mean_d += d;
                        mean_dx += d * xh[c];
                        dgamma[c] += gr[c] * xh[c];
                        dbeta[c] += gr[c];
                    }
                    mean_d /= cols as f64;
                    mean_dx /= cols as f64;
                    for c in 0..cols {
                        let d = gr[c] * gam[c];
                        dx[span.start + c] = rs * (d - mean_d - xh[c] * mean_dx);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(xs)
                        .map(|(g, &v)| g * tensor::gelu_grad_scalar(v))
                        .collect(),
                );
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.value(*x).matrix_dims()?;
                let w = dims[1];
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = dims[1];
                let mut offset = 0;
                for &p in parts {
                    let (m, w) = self.value(p).matrix_dims()?;
                    let mut dp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    acc(p, dp);
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let (m, n) = self.value(*x).matrix_dims()?;
                let mut dx = vec![0.0; m * n];
                dx[start * n..start * n + g.len()].copy_from_slice(g);
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = self.value(*x).matrix_dims()?;
                let inv = 1.0 / m as f64;
                let row: Vec<f64> = g.iter().map(|v| v * inv).collect();
                acc(*x, row.iter().copied().cycle().take(m * n).collect());
            }
            Op::SumAll(x) => {
                let len = self.value(*x).numel();
                acc(*x, vec![g[0]; len]);
            }
            Op::MeanAll(x) => {
                let len = self.value(*x).numel();
                acc(*x, vec![g[0] / len as f64; len]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (b, c) = self.value(*logits).matrix_dims()?;
                let scale = g[0] / b as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in targets.iter().enumerate() {
                    dl[r * c + y] -= scale;
                }
                acc(*logits, dl);
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Takes the gradient of `v`, or zeros of length `len` if it has none.
    pub fn take_or_zeros(&mut self, v: Var, len: usize) -> Vec<f64> {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| vec![0.0; len])
    }
}

/// Where [`grad_check_report`] found its worst disagreement.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares backward gradients of `f` against central differences.
///
/// Returns the worst elementwise relative error `|a-b| / max(|a|, |b|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(grad_check_report(f, params, h)?.max_rel_error)
}

pub fn grad_check_report<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_stencil(f, params, h, Stencil::ThreePoint)
}

/// Central-difference formula used by [`grad_check_stencil`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²).
    ThreePoint,
    /// `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h`, error O(h⁴).
    /// Allows a larger `h`, which keeps roundoff small on deep graphs.
    FivePoint,
}

pub fn grad_check_stencil<F>(f: F, params: &[Tensor], h: f64, stencil: Stencil) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::contract(format!("grad_check step must be > 0, got {h}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.requires_grad = true;
            tape.leaf(&p)
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take_or_zeros(v, p.numel()))
        .collect();

    // Parameters move into each evaluation tape and back out again, so a
    // probe costs one forward pass and no copies.
    let eval = |ps: &mut Vec<Tensor>| -> Result<f64> {
        let n = ps.len();
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.drain(..).map(|p| tape.constant(p)).collect();
        let value = f(&mut tape, &vars).map(|loss| tape.value(loss).data()[0]);
        ps.extend(tape.nodes.into_iter().take(n).map(|node| node.value));
        value
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = GradCheckReport::default();
    for pi in 0..work.len() {
        for ei in 0..work[pi].numel() {
            let orig = work[pi].data()[ei];
            let mut at = |offset: f64| -> Result<f64> {
                work[pi].data_mut()[ei] = orig + offset;
                eval(&mut work)
            };
            let numeric = match stencil {
                Stencil::ThreePoint => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FivePoint => {
                    let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
                    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
                }
            };
            work[pi].data_mut()[ei] = orig;
            let a = analytic[pi][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst.max_rel_error {
                worst = GradCheckReport {
                    max_rel_error: rel,
                    param: pi,
                    element: ei,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}
