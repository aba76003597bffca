//! Reference implementations of the dense operators.
//!
//! These work on [`Tensor`]s and check shapes; the training path in
//! [`super::backprop`] uses slice-level versions of the same math.

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_nt, Tensor};

/// Affine map `y = W x + b` applied to every row of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out x in`
    pub w: Tensor,
    /// `out`
    pub b: Tensor,
}

impl Linear {
    pub fn zeros(inp: usize, outp: usize) -> Self {
        Linear {
            w: Tensor::zeros(&[outp, inp]),
            b: Tensor::zeros(&[outp]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear_forward(x, &self.w, &self.b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::vector(vec![1.0; dim]),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, self)
    }
}

pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (rows, inp) = (x.rows(), x.cols());
    let outp = w.rows();
    if x.shape().len() != 2 || w.shape().len() != 2 || w.cols() != inp || b.len() != outp {
        return Err(Error::shape(format!(
            "linear: x {:?}, W {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; rows * outp];
    matmul_nt(x.data(), w.data(), rows, inp, outp, &mut out);
    for r in out.chunks_exact_mut(outp) {
        for (v, bias) in r.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Tensor::matrix(rows, outp, out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// `Linear_O(max(0, Linear_H(x)))`.
pub fn ffn_forward(x: &Tensor, hidden: &Linear, out: &Linear) -> Result<Tensor> {
    out.forward(&relu(&hidden.forward(x)?))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = out.cols();
    for row in out.data_mut().chunks_exact_mut(cols) {
        softmax_in_place(row);
    }
    out
}

/// Scaled dot-product attention `softmax(Q K^T / sqrt(D_k)) V`.
pub fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.shape() != k.shape() || q.rows() != v.rows() || q.shape().len() != 2 {
        return Err(Error::shape(format!(
            "attention: Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (t, dk) = (q.rows(), q.cols());
    let scale = 1.0 / (dk as f64).sqrt();
    let mut scores = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in 0..t {
            scores.data_mut()[i * t + j] = dot(q.row(i), k.row(j)) * scale;
        }
    }
    let probs = softmax_rows(&scores);
    let dv = v.cols();
    let mut out = vec![0.0; t * dv];
    for i in 0..t {
        for j in 0..t {
            let p = probs.get2(i, j);
            for (o, &vv) in out[i * dv..(i + 1) * dv].iter_mut().zip(v.row(j)) {
                *o += p * vv;
            }
        }
    }
    Tensor::matrix(t, dv, out)
}

/// Per-head attention over a fused `T x 3D` projection (`[Q | K | V]`, each
/// split into `heads` contiguous column blocks); returns the `T x D`
/// concatenation of head outputs.
pub fn multi_head_attention(qkv: &Tensor, heads: usize) -> Result<Tensor> {
    let three_d = qkv.cols();
    if three_d % 3 != 0 || (three_d / 3) % heads != 0 {
        return Err(Error::shape(format!(
            "fused QKV width {three_d} incompatible with {heads} heads"
        )));
    }
    let d = three_d / 3;
    let dh = d / heads;
    let t = qkv.rows();
    let mut out = vec![0.0; t * d];
    for h in 0..heads {
        let q = qkv.column_slice(h * dh, dh);
        let k = qkv.column_slice(d + h * dh, dh);
        let v = qkv.column_slice(2 * d + h * dh, dh);
        let o = attention_forward(&q, &k, &v)?;
        for r in 0..t {
            out[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(o.row(r));
        }
    }
    Tensor::matrix(t, d, out)
}

/// Multi-head self-attention: fused QKV projection, per-head attention,
/// concatenation, output projection.
pub fn msa_forward(x: &Tensor, qkv: &Linear, proj: &Linear, heads: usize) -> Result<Tensor> {
    let d = x.cols();
    if heads == 0 || d % heads != 0 || qkv.out_dim() != 3 * d || proj.in_dim() != d {
        return Err(Error::shape(format!(
            "msa: D={d}, heads={heads}, qkv {:?}, proj {:?}",
            qkv.w.shape(),
            proj.w.shape()
        )));
    }
    let projected = qkv.forward(x)?;
    proj.forward(&multi_head_attention(&projected, heads)?)
}

pub fn layer_norm(x: &Tensor, p: &LayerNormParams) -> Result<Tensor> {
    let d = x.cols();
    if p.dim() != d || p.beta.len() != d {
        return Err(Error::shape(format!(
            "layer norm over {d} columns with {} parameters",
            p.dim()
        )));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        normalize_row(row, p.gamma.data(), p.beta.data());
    }
    Ok(out)
}

/// Normalizes `row` in place and returns `(mean, 1/std)`.
pub(crate) fn normalize_row(row: &mut [f64], gamma: &[f64], beta: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
        *v = (*v - mean) * rstd * g + b;
    }
    (mean, rstd)
}
