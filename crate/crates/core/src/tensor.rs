//! Dense row-major tensors and the handful of kernels the models need.

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a 2-D tensor (1 for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Column count of a 2-D tensor (length for vectors).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("add {:?} + {:?}", self.shape, other.shape)));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Columns `[start, start + width)` of a 2-D tensor.
    pub fn column_slice(&self, start: usize, width: usize) -> Tensor {
        let rows = self.rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Tensor {
            shape: vec![rows, width],
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; 0 when either side is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// `out[t][o] = sum_i x[t][i] * w[o][i]` for row-major `x` (rows x inp) and
/// `w` (outp x inp).
pub(crate) fn matmul_nt(x: &[f64], w: &[f64], rows: usize, inp: usize, outp: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), rows * inp);
    debug_assert_eq!(w.len(), outp * inp);
    debug_assert_eq!(out.len(), rows * outp);
    for t in 0..rows {
        let xr = &x[t * inp..(t + 1) * inp];
        let or = &mut out[t * outp..(t + 1) * outp];
        for (o, slot) in or.iter_mut().enumerate() {
            *slot = dot(xr, &w[o * inp..(o + 1) * inp]);
        }
    }
}

/// `out[t][i] += sum_o g[t][o] * w[o][i]` (backprop through `matmul_nt`).
pub(crate) fn matmul_nn_acc(g: &[f64], w: &[f64], rows: usize, outp: usize, inp: usize, out: &mut [f64]) {
    for t in 0..rows {
        let gr = &g[t * outp..(t + 1) * outp];
        let or = &mut out[t * inp..(t + 1) * inp];
        for (o, &gv) in gr.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            let wr = &w[o * inp..(o + 1) * inp];
            for (slot, &wv) in or.iter_mut().zip(wr) {
                *slot += gv * wv;
            }
        }
    }
}

/// `dw[o][i] += sum_t g[t][o] * x[t][i]` (weight gradient of `matmul_nt`).
pub(crate) fn outer_acc(g: &[f64], x: &[f64], rows: usize, outp: usize, inp: usize, dw: &mut [f64]) {
    for t in 0..rows {
        let gr = &g[t * outp..(t + 1) * outp];
        let xr = &x[t * inp..(t + 1) * inp];
        for (o, &gv) in gr.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            let dr = &mut dw[o * inp..(o + 1) * inp];
            for (slot, &xv) in dr.iter_mut().zip(xr) {
                *slot += gv * xv;
            }
        }
    }
}
