//! Dense pixel tensors, feature vectors and the element-wise primitives the
//! attacks are built from.
//!
//! Pixels are kept on the 8-bit scale `[0, 255]` as `f64`. Values that cross a
//! file boundary are stored as `f32`, so producers round through `f32`
//! ([`PixelTensor::quantize`]) whenever a tensor is meant to be persisted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-major `(channels, height, width)` image-shaped tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// `(channels, height, width)`.
pub type Shape = (usize, usize, usize);

impl PixelTensor {
    pub fn zeros(shape: Shape) -> Self {
        let (c, h, w) = shape;
        Self {
            channels: c,
            height: h,
            width: w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        let (c, h, w) = shape;
        if data.len() != c * h * w {
            return Err(Error::Argument(format!(
                "tensor of shape {shape:?} needs {} values, got {}",
                c * h * w,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Argument(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            data,
        })
    }

    pub fn shape(&self) -> Shape {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&x| f(x)).collect(),
            ..*self
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|x| k * x)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Rounds every element through `f32` so the tensor survives a
    /// save/load cycle unchanged.
    pub fn quantize(&mut self) {
        for x in &mut self.data {
            *x = f64::from(*x as f32);
        }
    }

    pub fn linf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Argument(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Sum of absolute values of all elements.
pub fn l1_norm(t: &PixelTensor) -> f64 {
    t.data.iter().map(|x| x.abs()).sum()
}

/// Element-wise `min(max(x, lo), hi)`.
pub fn clip_elementwise(t: &PixelTensor, lo: f64, hi: f64) -> Result<PixelTensor> {
    if lo > hi {
        return Err(Error::Argument(format!(
            "clip bounds inverted: {lo} > {hi}"
        )));
    }
    Ok(t.map(|x| x.max(lo).min(hi)))
}

/// Element-wise sign with `sign(0) = 0`.
pub fn sign_elementwise(t: &PixelTensor) -> PixelTensor {
    t.map(sign)
}

pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Central-difference gradient of a scalar function of a tensor.
///
/// Each coordinate is perturbed by `±h` in place; all arithmetic is `f64`.
pub fn finite_diff_input_grad<F>(f: F, t: &PixelTensor, h: f64) -> Result<PixelTensor>
where
    F: Fn(&PixelTensor) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Argument(format!("step h must be positive, got {h}")));
    }
    let mut probe = t.clone();
    let mut grad = PixelTensor::zeros(t.shape());
    for i in 0..t.len() {
        let x0 = probe.data[i];
        probe.data[i] = x0 + h;
        let up = f(&probe);
        probe.data[i] = x0 - h;
        let down = f(&probe);
        probe.data[i] = x0;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle { index: i });
        }
        grad.data[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Embedding produced by the victim model, or a centroid of embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Euclidean distance, accumulated left to right.
    pub fn distance(&self, other: &FeatureVector) -> f64 {
        l2_distance(&self.0, &other.0)
    }

    pub fn scale(&self, k: f64) -> Self {
        Self(self.0.iter().map(|x| k * x).collect())
    }
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc.sqrt()
}
