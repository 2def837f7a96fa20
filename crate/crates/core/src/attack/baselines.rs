//! Per-image baselines: FGSM, PGD and momentum iterative FGSM on the same
//! centroid triplet hinge. None of these are universal; every query gets its
//! own perturbation.

use super::{hinge_and_cotangent, targets, AttackConfig, DEGENERATE_GRAD_L1, PIXEL_MAX, PIXEL_MIN};
use crate::centroids::CentroidTable;
use crate::embedder::{forward, forward_with_cotangent, EmbedderParams};
use crate::error::Result;
use crate::synthdata::ImageRecord;
use crate::tensor::{l1_norm, sign, FeatureVector, PixelTensor};

struct Victim<'a> {
    params: &'a EmbedderParams,
    pos: &'a FeatureVector,
    neg: &'a FeatureVector,
    margin: f64,
}

impl<'a> Victim<'a> {
    fn new(
        p: &'a EmbedderParams,
        img: &ImageRecord,
        t: &'a CentroidTable,
        cfg: &AttackConfig,
    ) -> Result<Self> {
        let clean = forward(p, &img.pixels)?;
        let (pos, neg) = targets(
            t,
            &clean,
            img.identity_id,
            img.modality,
            cfg.negative_strategy,
        )?;
        Ok(Self {
            params: p,
            pos,
            neg,
            margin: cfg.margin,
        })
    }

    fn loss_and_grad(&self, x: &PixelTensor) -> Result<(f64, PixelTensor)> {
        let (_, loss, grad) = forward_with_cotangent(self.params, x, |f| {
            let (l, c) = hinge_and_cotangent(f, self.pos, self.neg, self.margin, 1.0);
            (c, l)
        })?;
        Ok((loss, grad))
    }
}

fn direction(cfg: &AttackConfig) -> f64 {
    if cfg.descent {
        -1.0
    } else {
        1.0
    }
}

/// Projects `x` onto the `epsilon` ball around `origin` and, if configured,
/// onto the pixel range.
fn project(x: &PixelTensor, origin: &PixelTensor, cfg: &AttackConfig) -> Result<PixelTensor> {
    let eps = cfg.epsilon;
    x.zip_map(origin, |v, o| {
        let v = o + (v - o).clamp(-eps, eps);
        if cfg.clip_to_pixel_range {
            v.clamp(PIXEL_MIN, PIXEL_MAX)
        } else {
            v
        }
    })
}

fn with_pixels(img: &ImageRecord, pixels: PixelTensor) -> ImageRecord {
    ImageRecord {
        pixels,
        ..img.clone()
    }
}

/// Hinge loss of `adv` with targets chosen from the clean `img`.
pub fn sample_attack_loss(
    p: &EmbedderParams,
    img: &ImageRecord,
    adv: &ImageRecord,
    t: &CentroidTable,
    cfg: &AttackConfig,
) -> Result<f64> {
    let v = Victim::new(p, img, t, cfg)?;
    let f = forward(p, &adv.pixels)?;
    Ok(hinge_and_cotangent(&f, v.pos, v.neg, cfg.margin, 1.0).0)
}

/// Single full-`epsilon` sign step.
pub fn fgsm(
    p: &EmbedderParams,
    img: &ImageRecord,
    t: &CentroidTable,
    cfg: &AttackConfig,
) -> Result<ImageRecord> {
    cfg.validate()?;
    let v = Victim::new(p, img, t, cfg)?;
    let (_, g) = v.loss_and_grad(&img.pixels)?;
    let k = direction(cfg) * cfg.epsilon;
    let stepped = img.pixels.zip_map(&g, |x, gi| x + k * sign(gi))?;
    Ok(with_pixels(img, project(&stepped, &img.pixels, cfg)?))
}

/// `steps` sign steps of size `alpha` with projection after each.
pub fn pgd(
    p: &EmbedderParams,
    img: &ImageRecord,
    t: &CentroidTable,
    cfg: &AttackConfig,
    steps: usize,
) -> Result<ImageRecord> {
    cfg.validate()?;
    let v = Victim::new(p, img, t, cfg)?;
    let k = direction(cfg) * cfg.alpha();
    let mut x = img.pixels.clone();
    for _ in 0..steps {
        let (_, g) = v.loss_and_grad(&x)?;
        let stepped = x.zip_map(&g, |xi, gi| xi + k * sign(gi))?;
        x = project(&stepped, &img.pixels, cfg)?;
    }
    Ok(with_pixels(img, x))
}

/// Momentum iterative FGSM: L1-normalized gradients accumulated with
/// `momentum`, sign steps of `alpha`, projection after each.
pub fn mfgsm(
    p: &EmbedderParams,
    img: &ImageRecord,
    t: &CentroidTable,
    cfg: &AttackConfig,
    steps: usize,
) -> Result<ImageRecord> {
    cfg.validate()?;
    let v = Victim::new(p, img, t, cfg)?;
    let k = direction(cfg) * cfg.alpha();
    let mut x = img.pixels.clone();
    let mut acc = PixelTensor::zeros(x.shape());
    for _ in 0..steps {
        let (_, g) = v.loss_and_grad(&x)?;
        let norm = l1_norm(&g);
        let scale = if norm < DEGENERATE_GRAD_L1 {
            0.0
        } else {
            1.0 / norm
        };
        acc = acc.zip_map(&g, |a, gi| cfg.momentum * a + scale * gi)?;
        let stepped = x.zip_map(&acc, |xi, ai| xi + k * sign(ai))?;
        x = project(&stepped, &img.pixels, cfg)?;
    }
    Ok(with_pixels(img, x))
}
