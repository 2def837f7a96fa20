//! The victim retrieval model: `flatten -> linear -> ReLU -> linear -> L2-normalize`.
//!
//! Forward and backward passes are written out by hand. Parameters are held
//! as `f64` but always rounded through `f32` after an update, so a checkpoint
//! reproduces the in-memory model exactly.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use train::{train, train_with_history, TrainConfig, TrainReport};

use crate::blob;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{FeatureVector, PixelTensor, Shape};

pub const NORM_FLOOR: f64 = 1e-12;
pub const PIXEL_SCALE: f64 = 1.0 / 255.0;
pub const ARCHITECTURE: &str = "mlp-relu-l2norm";

/// Dense layer, `weight` stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn init(in_dim: usize, out_dim: usize, gain: f64, rng: &mut SeededRng) -> Self {
        let std = (gain / in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| f64::from((std * rng.normal()) as f32))
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            out.push(acc);
        }
    }

    /// `W^T g`.
    fn back(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.in_dim];
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for (acc, w) in out.iter_mut().zip(row) {
                *acc += go * w;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams {
    pub layers: Vec<Linear>,
    pub input_shape: Shape,
    /// Seed the weights were initialized and trained with.
    pub seed: u64,
}

/// Activations kept from a forward pass for the backward pass.
struct Trace {
    /// Input of every layer; `inputs[0]` is the scaled, flattened image.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of every layer.
    pre: Vec<Vec<f64>>,
    norm: f64,
    output: Vec<f64>,
}

impl EmbedderParams {
    /// He-initialized network with the given layer widths after the input.
    pub fn init(input_shape: Shape, widths: &[usize], seed: u64) -> Result<Self> {
        let (c, h, w) = input_shape;
        if c * h * w == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(Error::Argument(format!(
                "cannot build embedder for input {input_shape:?} and widths {widths:?}"
            )));
        }
        let mut rng = SeededRng::new(seed).split("init");
        let mut layers = Vec::with_capacity(widths.len());
        let mut in_dim = c * h * w;
        for (i, &out_dim) in widths.iter().enumerate() {
            let gain = if i + 1 < widths.len() { 2.0 } else { 1.0 };
            layers.push(Linear::init(in_dim, out_dim, gain, &mut rng));
            in_dim = out_dim;
        }
        Ok(Self {
            layers,
            input_shape,
            seed,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn input_len(&self) -> usize {
        let (c, h, w) = self.input_shape;
        c * h * w
    }

    pub fn validate(&self) -> Result<()> {
        let mut expect = self.input_len();
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim != expect
                || l.weight.len() != l.in_dim * l.out_dim
                || l.bias.len() != l.out_dim
            {
                return Err(Error::Argument(format!(
                    "layer {i} dimensions do not compose (expects input {expect})"
                )));
            }
            if l.weight.iter().chain(&l.bias).any(|x| !x.is_finite()) {
                return Err(Error::Argument(format!("layer {i} has non-finite weights")));
            }
            expect = l.out_dim;
        }
        if self.layers.is_empty() {
            return Err(Error::Argument("embedder has no layers".into()));
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameters in checkpoint order: per layer, weights then bias.
    pub fn flat_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
    }

    pub fn fingerprint(&self) -> String {
        let mut bytes = blob::f32_bytes(self.flat_values().map(|x| x as f32));
        let (c, h, w) = self.input_shape;
        for v in [c, h, w] {
            bytes.extend_from_slice(&(v as u64).to_le_bytes());
        }
        blob::fingerprint(&bytes)
    }

    pub fn check_input(&self, img: &PixelTensor) -> Result<()> {
        if img.shape() != self.input_shape {
            return Err(Error::Argument(format!(
                "image shape {:?} does not match model input {:?}",
                img.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    fn trace(&self, img: &PixelTensor) -> Trace {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut x: Vec<f64> = img.data().iter().map(|v| v * PIXEL_SCALE).collect();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.out_dim);
            layer.apply(&x, &mut z);
            let next = if i + 1 < n {
                z.iter().map(|&v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            inputs.push(x);
            pre.push(z);
            x = next;
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm.max(NORM_FLOOR);
        let output = x.iter().map(|v| v / denom).collect();
        Trace {
            inputs,
            pre,
            norm,
            output,
        }
    }

    /// Gradient of `<upstream, output>` w.r.t. the final pre-normalization
    /// vector, then pushed back layer by layer. Calls `visit(layer, grad_pre)`
    /// for every layer from last to first and returns the gradient w.r.t.
    /// the scaled network input.
    fn backward(
        &self,
        t: &Trace,
        upstream: &[f64],
        mut visit: impl FnMut(usize, &[f64], &[f64]),
    ) -> Vec<f64> {
        let y = &t.output;
        let mut g: Vec<f64> = if t.norm >= NORM_FLOOR {
            let dot: f64 = y.iter().zip(upstream).map(|(a, b)| a * b).sum();
            upstream
                .iter()
                .zip(y)
                .map(|(u, yi)| (u - yi * dot) / t.norm)
                .collect()
        } else {
            upstream.iter().map(|u| u / NORM_FLOOR).collect()
        };
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                for (gi, &z) in g.iter_mut().zip(&t.pre[i]) {
                    if z <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            visit(i, &g, &t.inputs[i]);
            g = self.layers[i].back(&g);
        }
        g
    }
}

/// Unit-norm embedding of an image.
pub fn forward(p: &EmbedderParams, img: &PixelTensor) -> Result<FeatureVector> {
    p.check_input(img)?;
    Ok(FeatureVector(p.trace(img).output))
}

/// Reverse-mode gradient of `<upstream, forward(p, img)>` w.r.t. the pixels.
pub fn input_gradient(
    p: &EmbedderParams,
    img: &PixelTensor,
    upstream: &FeatureVector,
) -> Result<PixelTensor> {
    forward_and_input_gradient(p, img, upstream).map(|(_, grad)| grad)
}

/// Embedding plus input gradient from a single forward pass.
pub fn forward_and_input_gradient(
    p: &EmbedderParams,
    img: &PixelTensor,
    upstream: &FeatureVector,
) -> Result<(FeatureVector, PixelTensor)> {
    forward_with_cotangent(p, img, |_| (upstream.clone(), ())).map(|(f, (), g)| (f, g))
}

/// Single forward pass, then the input gradient for a cotangent chosen from
/// the embedding. Returns the embedding, whatever `cotangent` returned
/// alongside its vector, and the gradient.
pub fn forward_with_cotangent<T>(
    p: &EmbedderParams,
    img: &PixelTensor,
    cotangent: impl FnOnce(&FeatureVector) -> (FeatureVector, T),
) -> Result<(FeatureVector, T, PixelTensor)> {
    p.check_input(img)?;
    let t = p.trace(img);
    let feature = FeatureVector(t.output.clone());
    let (upstream, extra) = cotangent(&feature);
    if upstream.dim() != p.embedding_dim() {
        return Err(Error::Argument(format!(
            "cotangent has dim {}, embedding dim is {}",
            upstream.dim(),
            p.embedding_dim()
        )));
    }
    let g = p.backward(&t, upstream.as_slice(), |_, _, _| {});
    let grad = PixelTensor::from_vec(
        p.input_shape,
        g.into_iter().map(|v| v * PIXEL_SCALE).collect(),
    )?;
    Ok((feature, extra, grad))
}

/// Accumulates `d<upstream, forward(p, img)>/dθ` into `grads` (same layout
/// as `p.layers`).
pub(crate) fn accumulate_param_gradient(
    p: &EmbedderParams,
    img: &PixelTensor,
    upstream: &[f64],
    grads: &mut [Linear],
) {
    let t = p.trace(img);
    p.backward(&t, upstream, |i, g, x| {
        let layer = &mut grads[i];
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            layer.bias[o] += go;
            let row = &mut layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (w, xv) in row.iter_mut().zip(x) {
                *w += go * xv;
            }
        }
    });
}

pub(crate) fn zero_like(p: &EmbedderParams) -> Vec<Linear> {
    p.layers
        .iter()
        .map(|l| Linear {
            in_dim: l.in_dim,
            out_dim: l.out_dim,
            weight: vec![0.0; l.weight.len()],
            bias: vec![0.0; l.bias.len()],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_input_grad;

    fn random_image(shape: Shape, rng: &mut SeededRng) -> PixelTensor {
        let (c, h, w) = shape;
        PixelTensor::from_vec(
            shape,
            (0..c * h * w)
                .map(|_| rng.uniform_range(0.0, 255.0))
                .collect(),
        )
        .unwrap()
    }

    fn random_cotangent(dim: usize, rng: &mut SeededRng) -> FeatureVector {
        FeatureVector((0..dim).map(|_| rng.normal()).collect())
    }

    #[test]
    fn outputs_are_unit_norm() {
        let shape = (3, 6, 4);
        let p = EmbedderParams::init(shape, &[16, 8], 1).unwrap();
        let mut rng = SeededRng::new(2);
        for _ in 0..1000 {
            let f = forward(&p, &random_image(shape, &mut rng)).unwrap();
            assert!((f.norm() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn forward_is_deterministic_and_sensitive() {
        let shape = (3, 6, 4);
        let p = EmbedderParams::init(shape, &[16, 8], 3).unwrap();
        let zero = PixelTensor::zeros(shape);
        let mut one = zero.clone();
        one.set(1, 2, 3, 200.0);
        let a = forward(&p, &zero).unwrap();
        assert_eq!(a, forward(&p, &zero).unwrap());
        assert_ne!(a, forward(&p, &one).unwrap());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = EmbedderParams::init((3, 6, 4), &[16, 8], 3).unwrap();
        assert!(forward(&p, &PixelTensor::zeros((3, 4, 6))).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let shape = (3, 5, 3);
        let mut rng = SeededRng::new(4);
        for case in 0..20 {
            let p = EmbedderParams::init(shape, &[12, 6], 100 + case).unwrap();
            let img = random_image(shape, &mut rng);
            let u = random_cotangent(6, &mut rng);
            let analytic = input_gradient(&p, &img, &u).unwrap();
            let numeric = finite_diff_input_grad(
                |x| {
                    let f = forward(&p, x).unwrap();
                    f.0.iter().zip(&u.0).map(|(a, b)| a * b).sum()
                },
                &img,
                1e-2,
            )
            .unwrap();
            let diff = analytic.sub(&numeric).unwrap();
            let rel = frobenius(&diff) / frobenius(&numeric).max(1e-12);
            assert!(rel < 1e-3, "case {case}: relative error {rel}");
        }
    }

    #[test]
    fn input_gradient_zero_and_linear_in_upstream() {
        let shape = (3, 5, 3);
        let p = EmbedderParams::init(shape, &[12, 6], 5).unwrap();
        let mut rng = SeededRng::new(6);
        let img = random_image(shape, &mut rng);
        let zero = input_gradient(&p, &img, &FeatureVector::zeros(6)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let u = random_cotangent(6, &mut rng);
        let g = input_gradient(&p, &img, &u).unwrap();
        let g3 = input_gradient(&p, &img, &u.scale(-3.0)).unwrap();
        for (a, b) in g.data().iter().zip(g3.data()) {
            assert!((-3.0 * a - b).abs() < 1e-6);
        }
    }

    fn frobenius(t: &PixelTensor) -> f64 {
        t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
