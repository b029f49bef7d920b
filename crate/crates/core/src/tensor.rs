//! Dense row-major `f64` tensors and the value-level kernels shared by the
//! autodiff tape.
//!
//! Shape conventions used throughout the crate:
//! - matrices are `[rows, cols]` and stored row by row;
//! - token sequences are `[S, D]` (one row per token);
//! - images are `[H, W, 3]` with channels innermost;
//! - linear layers compute `x · W + b` with `W: [in, out]`, `b: [out]`.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    /// Populated by training code after a backward pass; same shape as `data`.
    pub grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "tensor dims must be positive, got {dims:?}"
            )));
        }
        let numel = checked_numel(&dims)
            .ok_or_else(|| Error::contract(format!("tensor dims overflow: {dims:?}")))?;
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: dims,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            dims,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), vec![value; n]).expect("positive dims")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::contract(format!(
                "expected a matrix, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.dims.last().expect("non-empty dims");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        if checked_numel(&dims) != Some(self.data.len()) || dims.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.dims,
                rhs: dims,
            });
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

pub(crate) fn checked_numel(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// `a · b` for `a: [m, k]`, `b: [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims()?;
    let (k2, n) = b.matrix_dims()?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.dims.clone(),
            rhs: b.dims.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    // Four output rows at a time share each loaded row of `b`. Every output
    // still accumulates over `p` in ascending order.
    let mut i = 0;
    while i + 4 <= m {
        let (d0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (d1, rest) = rest.split_at_mut(n);
        let (d2, d3) = rest.split_at_mut(n);
        for p in 0..k {
            let src = &b[p * n..(p + 1) * n];
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            for j in 0..n {
                let s = src[j];
                d0[j] += a0 * s;
                d1[j] += a1 * s;
                d2[j] += a2 * s;
                d3[j] += a3 * s;
            }
        }
        i += 4;
    }
    for i in i..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            let src = &b[p * n..(p + 1) * n];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += aip * s;
            }
        }
    }
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.matrix_dims()?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Splits `dims` around `axis` into (outer, len, inner) strides.
pub(crate) fn axis_split(dims: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= dims.len() {
        return Err(Error::contract(format!(
            "axis {axis} out of range for dims {dims:?}"
        )));
    }
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    Ok((outer, dims[axis], inner))
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(&x.dims, axis)?;
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..len)
                .map(|j| x.data[idx(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (x.data[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    Tensor::new(x.dims.clone(), out)
}

/// Per-row statistics kept by layer norm for its backward pass.
#[derive(Clone, Debug)]
pub(crate) struct RowNorm {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, RowNorm)> {
    let cols = *x.dims.last().expect("non-empty dims");
    if gamma.dims != [cols] || beta.dims != [cols] {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.dims.clone(),
            rhs: gamma.dims.clone(),
        });
    }
    let rows = x.data.len() / cols;
    let mut out = vec![0.0; x.data.len()];
    let mut xhat = vec![0.0; x.data.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let denom = var + eps;
        // A constant row with eps = 0 normalizes to zeros rather than NaN.
        let rs = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
        rstd[r] = rs;
        for c in 0..cols {
            let h = (row[c] - mean) * rs;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gamma.data[c] + beta.data[c];
        }
    }
    Ok((Tensor::new(x.dims.clone(), out)?, RowNorm { xhat, rstd }))
}

/// Normalizes each row over the last axis then applies `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_forward(x, gamma, beta, eps).map(|(y, _)| y)
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Exact (erf-based) GELU, elementwise.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::new(x.dims.clone(), data).expect("same dims")
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
