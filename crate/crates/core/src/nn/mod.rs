//! Minimal neural-network kit: dense tensors, a handful of layers with
//! hand-derived backward passes, Adam, finite-difference gradient checking and
//! a binary checkpoint container.
//!
//! All arithmetic is `f64`. Tensors are batch-first (`[N, features]` or
//! `[N, C, H, W]`).

mod adam;
mod checkpoint;
mod gradcheck;
mod layers;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointWriter};
pub use gradcheck::{grad_check, Differentiable, SequentialProbe};
pub use layers::{AdaptiveAvgPool, Conv2d, Layer, LayerSpec, Linear, Relu, Sequential, Tanh};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of activations.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.is_empty() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// `[1, len]` row vector.
    pub fn row(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
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

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("Tensor::reshape", &shape, &self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates along the feature axis; all parts share the batch size.
    pub fn concat_features(parts: &[&Tensor]) -> Result<Tensor> {
        let n = parts[0].batch();
        if let Some(p) = parts.iter().find(|p| p.batch() != n) {
            return Err(Error::shape("concat_features", &[n], &[p.batch()]));
        }
        let width: usize = parts.iter().map(|p| p.item_len()).sum();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            for p in parts {
                let l = p.item_len();
                data.extend_from_slice(&p.data[i * l..(i + 1) * l]);
            }
        }
        Ok(Tensor {
            shape: vec![n, width],
            data,
        })
    }

    /// Splits `[N, F]` into feature-axis chunks of the given widths.
    pub fn split_features(&self, widths: &[usize]) -> Result<Vec<Tensor>> {
        let f = self.item_len();
        if widths.iter().sum::<usize>() != f {
            return Err(Error::shape("split_features", &[f], widths));
        }
        let n = self.batch();
        let mut out: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(n * w)).collect();
        for i in 0..n {
            let mut off = i * f;
            for (buf, &w) in out.iter_mut().zip(widths) {
                buf.extend_from_slice(&self.data[off..off + w]);
                off += w;
            }
        }
        Ok(out
            .into_iter()
            .zip(widths)
            .map(|(data, &w)| Tensor {
                shape: vec![n, w],
                data,
            })
            .collect())
    }
}

/// Trainable parameter with its accumulated gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    /// Uniform in `±bound`.
    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        for v in &mut p.value {
            *v = rng.gen_range(-bound..=bound);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        } else {
            self.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// Anything that owns trainable parameters in a stable order.
pub trait HasParams {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn flat_values(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    fn flat_grads(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| {
                if p.grad.len() == p.value.len() {
                    p.grad.clone()
                } else {
                    vec![0.0; p.value.len()]
                }
            })
            .collect()
    }

    /// Reads flat parameter `i`.
    fn flat_get(&self, mut i: usize) -> f64 {
        for p in self.params() {
            if i < p.len() {
                return p.value[i];
            }
            i -= p.len();
        }
        panic!("parameter index out of range");
    }

    fn flat_set(&mut self, mut i: usize, v: f64) {
        for p in self.params_mut() {
            if i < p.len() {
                p.value[i] = v;
                return;
            }
            i -= p.len();
        }
        panic!("parameter index out of range");
    }

    /// `self ← ρ·self + (1−ρ)·online`.
    fn ema_from(&mut self, online: &dyn HasParams, rho: f64) -> Result<()> {
        let src = online.params();
        let mut dst = self.params_mut();
        if src.len() != dst.len() {
            return Err(Error::shape("ema_from", &[dst.len()], &[src.len()]));
        }
        for (d, s) in dst.iter_mut().zip(&src) {
            if d.shape != s.shape {
                return Err(Error::shape("ema_from", &d.shape, &s.shape));
            }
        }
        if rho == 1.0 {
            return Ok(());
        }
        for (d, s) in dst.iter_mut().zip(src) {
            for (a, b) in d.value.iter_mut().zip(&s.value) {
                *a = rho * *a + (1.0 - rho) * b;
            }
        }
        Ok(())
    }

    fn copy_from(&mut self, other: &dyn HasParams) -> Result<()> {
        self.ema_from(other, 0.0)
    }
}

/// `C = alpha·A·B + beta·C` with arbitrary strides (thin wrapper over `matrixmultiply`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
