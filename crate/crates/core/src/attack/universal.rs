//! Universal perturbation learners: the cross-modality synergy attack and the
//! stepwise (one modality, then the other) baseline.

use rayon::prelude::*;

use super::{
    apply_pixels, hinge_and_cotangent, mi_sgd_step, quantize_within, targets, AttackConfig,
    MomentumState, Perturbation, PIXEL_MAX, PIXEL_MIN,
};
use crate::centroids::CentroidTable;
use crate::embedder::{forward, forward_with_cotangent, EmbedderParams};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::synthdata::{grayscale_pixels, Dataset, Modality};
use crate::tensor::{clip_elementwise, FeatureVector, PixelTensor};

/// Emitted after every perturbation update.
#[derive(Debug)]
pub struct UpdateEvent<'a> {
    pub epoch: usize,
    pub batch: usize,
    /// Modality of the batch that produced this update (visible or infrared).
    pub phase: Modality,
    /// Dataset record indices of the batch.
    pub records: &'a [usize],
    /// Which of `records` were replaced by their grayscale.
    pub grayscaled: &'a [bool],
    pub momentum_in: &'a MomentumState,
    pub momentum_out: &'a MomentumState,
    pub eta: &'a Perturbation,
    pub loss: f64,
}

/// Clean features and grayscale renderings of every record, computed once.
struct Prepared<'a> {
    params: &'a EmbedderParams,
    ds: &'a Dataset,
    table: &'a CentroidTable,
    gray: Vec<Option<PixelTensor>>,
    clean: Vec<FeatureVector>,
    clean_gray: Vec<Option<FeatureVector>>,
}

impl<'a> Prepared<'a> {
    fn new(
        params: &'a EmbedderParams,
        ds: &'a Dataset,
        table: &'a CentroidTable,
        need_gray: bool,
    ) -> Result<Self> {
        if params.input_shape != ds.image_shape {
            return Err(Error::Argument(format!(
                "model input {:?} does not match dataset images {:?}",
                params.input_shape, ds.image_shape
            )));
        }
        let per_record: Vec<_> = ds
            .records
            .par_iter()
            .map(|r| -> Result<_> {
                let clean = forward(params, &r.pixels)?;
                if need_gray {
                    let g = grayscale_pixels(&r.pixels);
                    let fg = forward(params, &g)?;
                    Ok((clean, Some(g), Some(fg)))
                } else {
                    Ok((clean, None, None))
                }
            })
            .collect::<Result<_>>()?;
        let mut clean = Vec::with_capacity(per_record.len());
        let mut gray = Vec::with_capacity(per_record.len());
        let mut clean_gray = Vec::with_capacity(per_record.len());
        for (c, g, fg) in per_record {
            clean.push(c);
            gray.push(g);
            clean_gray.push(fg);
        }
        Ok(Self {
            params,
            ds,
            table,
            gray,
            clean,
            clean_gray,
        })
    }

    fn indices(&self, m: Modality) -> Vec<usize> {
        (0..self.ds.records.len())
            .filter(|&i| self.ds.records[i].modality == m)
            .collect()
    }

    /// Summed gradient of the mean batch hinge w.r.t. `eta`, and the loss.
    fn batch_gradient(
        &self,
        eta: &Perturbation,
        records: &[usize],
        grayscaled: &[bool],
        cfg: &AttackConfig,
    ) -> Result<(f64, PixelTensor)> {
        let weight = 1.0 / records.len() as f64;
        let per_image: Vec<(f64, PixelTensor)> = records
            .par_iter()
            .zip(grayscaled.par_iter())
            .map(|(&i, &g)| -> Result<_> {
                let rec = &self.ds.records[i];
                let (pixels, clean, role) = if g {
                    (
                        self.gray[i].as_ref().expect("grayscale prepared"),
                        self.clean_gray[i].as_ref().expect("grayscale prepared"),
                        Modality::Grayscale,
                    )
                } else {
                    (&rec.pixels, &self.clean[i], rec.modality)
                };
                let (pos, neg) = targets(
                    self.table,
                    clean,
                    rec.identity_id,
                    role,
                    cfg.negative_strategy,
                )?;
                let adv = apply_pixels(eta, pixels)?;
                let (_, loss, grad) = forward_with_cotangent(self.params, &adv, |f| {
                    let (l, c) = hinge_and_cotangent(f, pos, neg, cfg.margin, weight);
                    (c, l)
                })?;
                Ok((loss, mask_clipped(grad, pixels, eta)))
            })
            .collect::<Result<_>>()?;

        // Fixed left-to-right reduction keeps the result independent of the
        // thread count.
        let mut total = PixelTensor::zeros(eta.eta.shape());
        let mut loss = 0.0;
        for (l, g) in per_image {
            loss += l;
            total.add_assign(&g)?;
        }
        Ok((loss, total))
    }
}

/// Zeroes gradient entries whose pixel was saturated by range clipping.
fn mask_clipped(mut grad: PixelTensor, pixels: &PixelTensor, eta: &Perturbation) -> PixelTensor {
    if eta.clip_to_pixel_range {
        for ((g, &x), &e) in grad
            .data_mut()
            .iter_mut()
            .zip(pixels.data())
            .zip(eta.eta.data())
        {
            let v = x + e;
            if !(PIXEL_MIN..=PIXEL_MAX).contains(&v) {
                *g = 0.0;
            }
        }
    }
    grad
}

/// `Rand(0, 1)` per element, clipped to the ball.
fn initial_eta(shape: crate::tensor::Shape, cfg: &AttackConfig) -> Result<Perturbation> {
    let mut rng = SeededRng::new(cfg.seed).split("eta-init");
    let (c, h, w) = shape;
    let noise = PixelTensor::from_vec(shape, (0..c * h * w).map(|_| rng.uniform()).collect())?;
    let mut eta = clip_elementwise(&noise, -cfg.epsilon, cfg.epsilon)?;
    quantize_within(&mut eta, cfg.epsilon);
    Perturbation::new(eta, cfg.epsilon, cfg.clip_to_pixel_range)
}

/// Batch `b` of a shuffled index list. The final batch may be short; lists
/// exhausted before the other modality's wrap around.
fn batch_slice(order: &[usize], b: usize, n: usize) -> Vec<usize> {
    let start = b * n;
    if start < order.len() {
        order[start..(start + n).min(order.len())].to_vec()
    } else {
        (start..start + n).map(|k| order[k % order.len()]).collect()
    }
}

/// Learns the cross-modality universal perturbation.
///
/// Each mini-batch makes two updates that share one momentum buffer: a
/// visible batch, then an infrared batch. With probability `gray_prob` each
/// image is swapped for its grayscale before its update.
pub fn cmps_learn(
    p: &EmbedderParams,
    ds: &Dataset,
    t: &CentroidTable,
    cfg: &AttackConfig,
) -> Result<Perturbation> {
    cmps_learn_observed(p, ds, t, cfg, |_| {})
}

pub fn cmps_learn_observed(
    p: &EmbedderParams,
    ds: &Dataset,
    t: &CentroidTable,
    cfg: &AttackConfig,
    mut observe: impl FnMut(&UpdateEvent),
) -> Result<Perturbation> {
    cfg.validate()?;
    let augment = cfg.grayscale_augmentation && cfg.gray_prob > 0.0;
    let prep = Prepared::new(p, ds, t, augment)?;
    let root = SeededRng::new(cfg.seed);
    let mut batch_rng = root.split("batches");
    let mut aug_rng = root.split("augment");

    let mut eta = initial_eta(ds.image_shape, cfg)?;
    let mut state = MomentumState::zeros(ds.image_shape);
    let mut vis = prep.indices(Modality::Visible);
    let mut ir = prep.indices(Modality::Infrared);
    let n = cfg.batch_size;
    let batches = vis.len().max(ir.len()).div_ceil(n);

    for epoch in 0..cfg.iter_epoch {
        batch_rng.shuffle(&mut vis);
        batch_rng.shuffle(&mut ir);
        for b in 0..batches {
            for (phase, order) in [(Modality::Visible, &vis), (Modality::Infrared, &ir)] {
                let records = batch_slice(order, b, n);
                let grayscaled: Vec<bool> = records
                    .iter()
                    .map(|_| augment && aug_rng.bernoulli(cfg.gray_prob))
                    .collect();
                let (loss, grad) = prep.batch_gradient(&eta, &records, &grayscaled, cfg)?;
                let (next, next_state) = mi_sgd_step(&eta, &state, &grad, cfg)?;
                observe(&UpdateEvent {
                    epoch,
                    batch: b,
                    phase,
                    records: &records,
                    grayscaled: &grayscaled,
                    momentum_in: &state,
                    momentum_out: &next_state,
                    eta: &next,
                    loss,
                });
                eta = next;
                state = next_state;
            }
        }
    }
    Ok(eta)
}

/// Baseline: `iter_epoch` epochs on visible batches, then `iter_epoch`
/// epochs on infrared batches with momentum reset in between. No grayscale
/// augmentation.
pub fn stepwise_uap(
    p: &EmbedderParams,
    ds: &Dataset,
    t: &CentroidTable,
    cfg: &AttackConfig,
) -> Result<Perturbation> {
    stepwise_uap_observed(p, ds, t, cfg, |_| {})
}

pub fn stepwise_uap_observed(
    p: &EmbedderParams,
    ds: &Dataset,
    t: &CentroidTable,
    cfg: &AttackConfig,
    mut observe: impl FnMut(&UpdateEvent),
) -> Result<Perturbation> {
    cfg.validate()?;
    let prep = Prepared::new(p, ds, t, false)?;
    let mut batch_rng = SeededRng::new(cfg.seed).split("batches");
    let mut eta = initial_eta(ds.image_shape, cfg)?;
    let n = cfg.batch_size;

    for phase in [Modality::Visible, Modality::Infrared] {
        let mut state = MomentumState::zeros(ds.image_shape);
        let mut order = prep.indices(phase);
        let batches = order.len().div_ceil(n);
        for epoch in 0..cfg.iter_epoch {
            batch_rng.shuffle(&mut order);
            for b in 0..batches {
                let records = batch_slice(&order, b, n);
                let grayscaled = vec![false; records.len()];
                let (loss, grad) = prep.batch_gradient(&eta, &records, &grayscaled, cfg)?;
                let (next, next_state) = mi_sgd_step(&eta, &state, &grad, cfg)?;
                observe(&UpdateEvent {
                    epoch,
                    batch: b,
                    phase,
                    records: &records,
                    grayscaled: &grayscaled,
                    momentum_in: &state,
                    momentum_out: &next_state,
                    eta: &next,
                    loss,
                });
                eta = next;
                state = next_state;
            }
        }
    }
    Ok(eta)
}
