//! Universal and per-image adversarial attacks on the retrieval model.
//!
//! All attacks minimize a centroid triplet hinge
//! `max(|neg - f| - |pos - f| + margin, 0)` by default: the perturbed feature
//! is pulled toward another identity's centroid and pushed away from its own.
//! The target modalities rotate with the anchor's modality:
//!
//! | anchor    | positive (push) | negative (pull) |
//! |-----------|-----------------|-----------------|
//! | visible   | infrared        | grayscale       |
//! | grayscale | visible         | infrared        |
//! | infrared  | grayscale       | visible         |

mod baselines;
mod store;
mod universal;

pub use baselines::{fgsm, mfgsm, pgd, sample_attack_loss};
pub use store::{load_perturbation, save_perturbation, PerturbationHeader};
pub use universal::{
    cmps_learn, cmps_learn_observed, stepwise_uap, stepwise_uap_observed, UpdateEvent,
};

use serde::{Deserialize, Serialize};

use crate::centroids::{negative_centroid, positive_centroid, CentroidTable, NegativeStrategy};
use crate::error::{Error, Result};
use crate::synthdata::{ImageRecord, Modality};
use crate::tensor::{clip_elementwise, l1_norm, sign, FeatureVector, PixelTensor};

pub const PIXEL_MIN: f64 = 0.0;
pub const PIXEL_MAX: f64 = 255.0;
/// Below this L1 norm a gradient contributes no direction.
pub const DEGENERATE_GRAD_L1: f64 = 1e-12;

/// Universal perturbation bounded element-wise by `epsilon`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub eta: PixelTensor,
    pub epsilon: f64,
    /// Whether adversarial images are clipped back to `[0, 255]`.
    pub clip_to_pixel_range: bool,
}

impl Perturbation {
    pub fn new(eta: PixelTensor, epsilon: f64, clip_to_pixel_range: bool) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Argument(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if let Some(v) = eta.data().iter().find(|v| v.abs() > epsilon) {
            return Err(Error::Argument(format!(
                "perturbation value {v} exceeds epsilon {epsilon}"
            )));
        }
        Ok(Self {
            eta,
            epsilon,
            clip_to_pixel_range,
        })
    }

    pub fn zeros(shape: crate::tensor::Shape, epsilon: f64) -> Self {
        Self {
            eta: PixelTensor::zeros(shape),
            epsilon,
            clip_to_pixel_range: true,
        }
    }

    pub fn fingerprint(&self) -> String {
        let mut bytes = crate::blob::f32_bytes(self.eta.data().iter().map(|&v| v as f32));
        bytes.extend_from_slice(&self.epsilon.to_le_bytes());
        bytes.push(u8::from(self.clip_to_pixel_range));
        crate::blob::fingerprint(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Per-pixel bound on the 0-255 scale.
    pub epsilon: f64,
    /// Sign-step size; `None` means `epsilon / 12`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    pub momentum: f64,
    pub margin: f64,
    pub iter_epoch: usize,
    pub batch_size: usize,
    pub gray_prob: f64,
    pub grayscale_augmentation: bool,
    pub negative_strategy: NegativeStrategy,
    pub clip_to_pixel_range: bool,
    /// Minimize the triplet hinge (pull negatives, push positives). `false`
    /// ascends it instead.
    pub descent: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0,
            step_size: None,
            momentum: 1.0,
            margin: 0.5,
            iter_epoch: 10,
            batch_size: 8,
            gray_prob: 0.2,
            grayscale_augmentation: true,
            negative_strategy: NegativeStrategy::Farthest,
            clip_to_pixel_range: true,
            descent: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn alpha(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 12.0)
    }

    pub fn validate(&self) -> Result<()> {
        let alpha = self.alpha();
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Argument(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(alpha > 0.0 && alpha <= self.epsilon) {
            return Err(Error::Argument(format!(
                "step size must satisfy 0 < alpha <= epsilon, got {alpha}"
            )));
        }
        if !(self.momentum >= 0.0) || !(self.margin >= 0.0) {
            return Err(Error::Argument("momentum and margin must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gray_prob) {
            return Err(Error::Argument("gray_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Hash of the serialized config.
    pub fn fingerprint(&self) -> String {
        crate::blob::fingerprint(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }
}

/// Accumulated update direction. Starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub delta: PixelTensor,
}

impl MomentumState {
    pub fn zeros(shape: crate::tensor::Shape) -> Self {
        Self {
            delta: PixelTensor::zeros(shape),
        }
    }
}

/// `(positive modality, negative modality)` for an anchor of modality `m`.
pub fn centroid_roles(m: Modality) -> (Modality, Modality) {
    match m {
        Modality::Visible => (Modality::Infrared, Modality::Grayscale),
        Modality::Grayscale => (Modality::Visible, Modality::Infrared),
        Modality::Infrared => (Modality::Grayscale, Modality::Visible),
    }
}

/// Positive and negative centroid for one anchor, the negative chosen against
/// the anchor's clean feature.
pub fn targets<'a>(
    t: &'a CentroidTable,
    clean_feature: &FeatureVector,
    id: u32,
    m: Modality,
    strategy: NegativeStrategy,
) -> Result<(&'a FeatureVector, &'a FeatureVector)> {
    let (pm, nm) = centroid_roles(m);
    let pos = positive_centroid(t, id, pm)?;
    let neg = negative_centroid(t, clean_feature, id, nm, strategy)?;
    Ok((pos, neg))
}

/// Hinge for one sample and its gradient w.r.t. `f`, both scaled by `weight`.
pub(crate) fn hinge_and_cotangent(
    f: &FeatureVector,
    pos: &FeatureVector,
    neg: &FeatureVector,
    rho: f64,
    weight: f64,
) -> (f64, FeatureVector) {
    let d_neg = f.distance(neg);
    let d_pos = f.distance(pos);
    let h = d_neg - d_pos + rho;
    if h <= 0.0 {
        return (0.0, FeatureVector::zeros(f.dim()));
    }
    let mut g = vec![0.0; f.dim()];
    for i in 0..f.dim() {
        let mut gi = 0.0;
        if d_neg > 0.0 {
            gi += (f.0[i] - neg.0[i]) / d_neg;
        }
        if d_pos > 0.0 {
            gi -= (f.0[i] - pos.0[i]) / d_pos;
        }
        g[i] = weight * gi;
    }
    (weight * h, FeatureVector(g))
}

/// Mean centroid triplet hinge over a batch and its gradient w.r.t. every
/// feature. Inactive hinges (including the kink) get a zero gradient.
pub fn attack_triplet_loss(
    f_adv: &[FeatureVector],
    pos: &[FeatureVector],
    neg: &[FeatureVector],
    rho: f64,
) -> Result<(f64, Vec<FeatureVector>)> {
    if f_adv.is_empty() || f_adv.len() != pos.len() || f_adv.len() != neg.len() {
        return Err(Error::Argument(format!(
            "batch lists must be non-empty and equal length: {} / {} / {}",
            f_adv.len(),
            pos.len(),
            neg.len()
        )));
    }
    let w = 1.0 / f_adv.len() as f64;
    let mut loss = 0.0;
    let mut cot = Vec::with_capacity(f_adv.len());
    for ((f, p), n) in f_adv.iter().zip(pos).zip(neg) {
        let (l, g) = hinge_and_cotangent(f, p, n, rho, w);
        loss += l;
        cot.push(g);
    }
    Ok((loss, cot))
}

/// One momentum sign step: `delta <- theta * delta + d`, then
/// `eta <- clip(eta + alpha * sign(delta), -eps, eps)`, where `d` is the
/// L1-normalized gradient, negated when descending.
pub fn mi_sgd_step(
    eta: &Perturbation,
    state: &MomentumState,
    grad_eta: &PixelTensor,
    cfg: &AttackConfig,
) -> Result<(Perturbation, MomentumState)> {
    eta.eta.check_same_shape(grad_eta)?;
    state.delta.check_same_shape(grad_eta)?;
    let norm = l1_norm(grad_eta);
    let scale = if norm < DEGENERATE_GRAD_L1 {
        0.0
    } else if cfg.descent {
        -1.0 / norm
    } else {
        1.0 / norm
    };
    let theta = cfg.momentum;
    let delta = state
        .delta
        .zip_map(grad_eta, |d, g| theta * d + scale * g)?;
    let alpha = cfg.alpha();
    let eps = eta.epsilon;
    let stepped = eta.eta.zip_map(&delta, |e, d| e + alpha * sign(d))?;
    let mut next = clip_elementwise(&stepped, -eps, eps)?;
    quantize_within(&mut next, eps);
    Ok((
        Perturbation {
            eta: next,
            epsilon: eps,
            clip_to_pixel_range: eta.clip_to_pixel_range,
        },
        MomentumState { delta },
    ))
}

/// Rounds through `f32` without leaving `[-eps, eps]`.
pub(crate) fn quantize_within(t: &mut PixelTensor, eps: f64) {
    for v in t.data_mut() {
        let mut q = *v as f32;
        while f64::from(q).abs() > eps {
            q = if q > 0.0 { q.next_down() } else { q.next_up() };
        }
        *v = f64::from(q);
    }
}

/// `img + eta`, clipped to `[0, 255]` when the perturbation asks for it.
pub fn apply(pert: &Perturbation, img: &ImageRecord) -> Result<ImageRecord> {
    let pixels = apply_pixels(pert, &img.pixels)?;
    Ok(ImageRecord {
        pixels,
        ..img.clone()
    })
}

pub(crate) fn apply_pixels(pert: &Perturbation, px: &PixelTensor) -> Result<PixelTensor> {
    let sum = px.add(&pert.eta)?;
    if pert.clip_to_pixel_range {
        clip_elementwise(&sum, PIXEL_MIN, PIXEL_MAX)
    } else {
        Ok(sum)
    }
}
