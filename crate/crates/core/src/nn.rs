//! Dense network primitives with hand-written reverse-mode gradients, plus
//! the two optimizers the search uses (momentum SGD for weights, Adam for
//! concentrations).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Row-major matrix. A batch of `rows` examples with `cols` features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            Contract,
            "tensor data has {} entries, expected {rows}x{cols}",
            data.len()
        );
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of the selected columns.
    pub fn gather_cols(&self, cols: &[usize]) -> Tensor2 {
        let mut out = Tensor2::zeros(self.rows, cols.len());
        for r in 0..self.rows {
            let src = self.row(r);
            for (k, &c) in cols.iter().enumerate() {
                out.data[r * cols.len() + k] = src[c];
            }
        }
        out
    }

    /// Overwrite the selected columns with `src`.
    pub fn scatter_cols(&mut self, cols: &[usize], src: &Tensor2) {
        debug_assert_eq!(src.cols, cols.len());
        for r in 0..self.rows {
            for (k, &c) in cols.iter().enumerate() {
                self.data[r * self.cols + c] = src.data[r * src.cols + k];
            }
        }
    }

    pub fn add_assign(&mut self, other: &Tensor2) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor2) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn dot(&self, other: &Tensor2) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

/// `y = x·Wᵀ + b` with `W: out×in` and `b: 1×out`.
pub fn affine_forward(x: &Tensor2, w: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    ensure!(
        x.cols == w.cols,
        Contract,
        "affine input has {} features but weight expects {}",
        x.cols,
        w.cols
    );
    ensure!(
        b.rows == 1 && b.cols == w.rows,
        Contract,
        "bias shape {:?} does not match {} outputs",
        b.shape(),
        w.rows
    );
    let (n, din, dout) = (x.rows, x.cols, w.rows);
    let mut y = Tensor2::zeros(n, dout);
    for r in 0..n {
        let xr = &x.data[r * din..(r + 1) * din];
        for o in 0..dout {
            let wr = &w.data[o * din..(o + 1) * din];
            let mut acc = b.data[o];
            for i in 0..din {
                acc += xr[i] * wr[i];
            }
            y.data[r * dout + o] = acc;
        }
    }
    Ok(y)
}

/// Gradients of [`affine_forward`]: `(grad_x, grad_W, grad_b)`.
pub fn affine_backward(
    grad_out: &Tensor2,
    x: &Tensor2,
    w: &Tensor2,
) -> Result<(Tensor2, Tensor2, Tensor2)> {
    ensure!(
        grad_out.rows == x.rows && grad_out.cols == w.rows && x.cols == w.cols,
        Contract,
        "affine backward shapes disagree: grad {:?}, x {:?}, w {:?}",
        grad_out.shape(),
        x.shape(),
        w.shape()
    );
    let (n, din, dout) = (x.rows, x.cols, w.rows);
    let mut gx = Tensor2::zeros(n, din);
    let mut gw = Tensor2::zeros(dout, din);
    let mut gb = Tensor2::zeros(1, dout);
    for r in 0..n {
        let xr = &x.data[r * din..(r + 1) * din];
        for o in 0..dout {
            let g = grad_out.data[r * dout + o];
            if g == 0.0 {
                continue;
            }
            gb.data[o] += g;
            let wr = &w.data[o * din..(o + 1) * din];
            let gxr = &mut gx.data[r * din..(r + 1) * din];
            for i in 0..din {
                gxr[i] += g * wr[i];
            }
            let gwr = &mut gw.data[o * din..(o + 1) * din];
            for i in 0..din {
                gwr[i] += g * xr[i];
            }
        }
    }
    Ok((gx, gw, gb))
}

pub fn relu_forward(x: &Tensor2) -> Tensor2 {
    Tensor2 {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
    }
}

/// Gradient of ReLU given its *input* `x`; zero at the kink.
pub fn relu_backward(grad_out: &Tensor2, x: &Tensor2) -> Tensor2 {
    Tensor2 {
        rows: x.rows,
        cols: x.cols,
        data: grad_out
            .data
            .iter()
            .zip(&x.data)
            .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
            .collect(),
    }
}

pub fn scale_forward(x: &Tensor2, c: f64) -> Tensor2 {
    Tensor2 {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|v| c * v).collect(),
    }
}

pub fn scale_backward(grad_out: &Tensor2, c: f64) -> Tensor2 {
    scale_forward(grad_out, c)
}

pub fn zero_op(x: &Tensor2) -> Tensor2 {
    Tensor2::zeros(x.rows, x.cols)
}

pub fn identity_op(x: &Tensor2) -> Tensor2 {
    x.clone()
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_xent(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2)> {
    ensure!(
        labels.len() == logits.rows,
        Contract,
        "{} labels for a batch of {}",
        labels.len(),
        logits.rows
    );
    let (n, k) = logits.shape();
    let mut grad = Tensor2::zeros(n, k);
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        ensure!(label < k, Contract, "label {label} out of range for {k} classes");
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let log_z = m + sum.ln();
        loss += log_z - row[label];
        for c in 0..k {
            let p = (row[c] - log_z).exp();
            grad.data[r * k + c] = (p - if c == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

pub fn cosine_lr(t: usize, total: usize, lr_max: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    lr_max * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

/// Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// Bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &AdamConfig) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }

    /// Keep only the listed entries, preserving their moments.
    pub fn retain(&mut self, keep: &[usize]) {
        self.m = keep.iter().map(|&i| self.m[i]).collect();
        self.v = keep.iter().map(|&i| self.v[i]).collect();
    }
}

/// One trainable tensor with its gradient and optimizer buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor2,
    pub grad: Tensor2,
    pub momentum: Tensor2,
    pub adam: AdamState,
}

impl Param {
    pub fn new(value: Tensor2) -> Self {
        let (r, c) = value.shape();
        Self {
            grad: Tensor2::zeros(r, c),
            momentum: Tensor2::zeros(r, c),
            adam: AdamState::new(r * c),
            value,
        }
    }

    /// Replace the value and zero every buffer (shapes may change).
    pub fn reset_with(&mut self, value: Tensor2) {
        *self = Param::new(value);
    }
}

/// Named parameters in a deterministic (sorted) order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| crate::Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor2> {
        Ok(&self.get(name)?.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| crate::Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor2) -> Result<()> {
        let p = self.get_mut(name)?;
        ensure!(
            p.grad.shape() == g.shape(),
            Contract,
            "gradient shape {:?} does not match parameter {name} {:?}",
            g.shape(),
            p.grad.shape()
        );
        p.grad.add_assign(g);
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Rescales all gradients so their joint L2 norm is at most `max_norm`.
    /// Returns the norm before clipping. `max_norm <= 0` disables clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self
            .params
            .values()
            .flat_map(|p| &p.grad.data)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if max_norm > 0.0 && norm > max_norm {
            let s = max_norm / norm;
            for p in self.params.values_mut() {
                p.grad.data.iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    /// Heavy-ball SGD with coupled weight decay:
    /// `buf = μ·buf + (g + wd·w); w -= lr·buf`.
    pub fn sgd_momentum_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        for p in self.params.values_mut() {
            for i in 0..p.value.data.len() {
                let g = p.grad.data[i] + weight_decay * p.value.data[i];
                let buf = momentum * p.momentum.data[i] + g;
                p.momentum.data[i] = buf;
                p.value.data[i] -= lr * buf;
            }
        }
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        for p in self.params.values_mut() {
            let Param { value, grad, adam, .. } = p;
            adam.step(&mut value.data, &grad.data, cfg);
        }
    }
}
