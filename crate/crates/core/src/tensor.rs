//! Dense row-major f32 tensors and the handful of numeric ops the toolkit
//! needs. Dot products accumulate in f64 so results are stable enough for
//! finite-difference gradient checks; everything is single threaded and the
//! summation order is fixed, so identical inputs give identical bytes out.

use crate::error::{Result, TfmError};
use crate::rng::RngSeed;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TfmError::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Uniform init on [-1/sqrt(fan_in), 1/sqrt(fan_in)], drawn in row-major
    /// element order.
    pub fn init_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Tensor { shape, data }
    }

    pub fn init_uniform_seeded(shape: Vec<usize>, fan_in: usize, seed: RngSeed) -> Tensor {
        Self::init_uniform(shape, fan_in, &mut seed.stream())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TfmError::Shape(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn scale_in_place(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// self += s * other
    pub fn axpy_in_place(&mut self, s: f32, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(TfmError::Shape(format!(
                "axpy shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Raw little-endian bytes of the payload, used for bit-exactness audits.
    pub fn bytes_le(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// a[m,k] @ b[k,n] -> [m,n]
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(TfmError::Shape("matmul expects rank-2 tensors".into()));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(TfmError::Shape(format!(
            "matmul inner dims differ: {} vs {}",
            k, k2
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for l in 0..k {
                acc += a.data[i * k + l] as f64 * b.data[l * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// w[p,q] @ x[q] -> [p]
pub fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || x.rank() != 1 {
        return Err(TfmError::Shape("matvec expects w rank 2, x rank 1".into()));
    }
    let (p, q) = (w.shape[0], w.shape[1]);
    if q != x.shape[0] {
        return Err(TfmError::Shape(format!(
            "matvec dims differ: {} vs {}",
            q, x.shape[0]
        )));
    }
    let mut out = vec![0.0f32; p];
    for i in 0..p {
        let row = &w.data[i * q..(i + 1) * q];
        let mut acc = 0.0f64;
        for j in 0..q {
            acc += row[j] as f64 * x.data[j] as f64;
        }
        out[i] = acc as f32;
    }
    Tensor::new(vec![p], out)
}

/// 2-D cross-correlation: input [ci,h,w], kernels [co,ci,k,k], zero padding.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if input.rank() != 3 || kernels.rank() != 4 {
        return Err(TfmError::Shape(
            "conv2d expects input [c,h,w] and kernels [co,ci,k,k]".into(),
        ));
    }
    if stride == 0 {
        return Err(TfmError::Shape("conv2d stride must be positive".into()));
    }
    let (ci, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (co, ci2, kh, kw) = (
        kernels.shape[0],
        kernels.shape[1],
        kernels.shape[2],
        kernels.shape[3],
    );
    if ci != ci2 {
        return Err(TfmError::Shape(format!(
            "conv2d channel mismatch: input {} vs kernels {}",
            ci, ci2
        )));
    }
    if kh != kw {
        return Err(TfmError::Shape("conv2d kernels must be square".into()));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(TfmError::Shape(format!(
            "conv2d kernel {} exceeds padded input {}x{}",
            kh,
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for c in 0..ci {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let iv = input.data[(c * h + iy as usize) * w + ix as usize];
                            let kv = kernels.data[((o * ci + c) * kh + ky) * kw + kx];
                            acc += iv as f64 * kv as f64;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc as f32;
            }
        }
    }
    Tensor::new(vec![co, oh, ow], out)
}
