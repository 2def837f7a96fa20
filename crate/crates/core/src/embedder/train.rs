use serde::{Deserialize, Serialize};

use super::{accumulate_param_gradient, forward, zero_like, EmbedderParams};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::synthdata::{Dataset, Modality};
use crate::tensor::FeatureVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Identities per batch (P).
    pub batch_identities: usize,
    /// Images per identity and modality in a batch (K).
    pub images_per_identity: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_identities: 8,
            images_per_identity: 4,
            learning_rate: 0.2,
            margin: 0.3,
            hidden_dim: 128,
            embedding_dim: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_identities < 2 || self.images_per_identity < 2 {
            return Err(Error::Argument(format!(
                "P x K sampling needs P >= 2 and K >= 2, got {} x {}",
                self.batch_identities, self.images_per_identity
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.margin >= 0.0) {
            return Err(Error::Argument(
                "learning rate must be > 0 and margin >= 0".into(),
            ));
        }
        if self.hidden_dim == 0 || self.embedding_dim == 0 {
            return Err(Error::Argument("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: EmbedderParams,
    /// Mean batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<EmbedderParams> {
    train_with_history(ds, cfg).map(|r| r.params)
}

/// Batch-hard cross-modality triplet training with plain gradient descent.
///
/// A batch holds `P` identities with `K` visible and `K` infrared images
/// each. Every image is an anchor; its positive is the farthest same-identity
/// image of the other modality and its negative the nearest other-identity
/// image of the other modality.
pub fn train_with_history(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let (p_ids, k) = (cfg.batch_identities, cfg.images_per_identity);
    if p_ids > ds.num_identities {
        return Err(Error::Argument(format!(
            "batch needs {p_ids} identities, dataset has {}",
            ds.num_identities
        )));
    }
    let mut by_identity = vec![[Vec::new(), Vec::new()]; ds.num_identities];
    for (i, r) in ds.records.iter().enumerate() {
        match r.modality {
            Modality::Visible => by_identity[r.identity_id as usize][0].push(i),
            Modality::Infrared => by_identity[r.identity_id as usize][1].push(i),
            Modality::Grayscale => {}
        }
    }
    if let Some(id) = by_identity
        .iter()
        .position(|m| m[0].len() < k || m[1].len() < k)
    {
        return Err(Error::Argument(format!(
            "identity {id} has fewer than K = {k} images in some modality"
        )));
    }

    let mut params = EmbedderParams::init(
        ds.image_shape,
        &[cfg.hidden_dim, cfg.embedding_dim],
        cfg.seed,
    )?;
    let mut rng = SeededRng::new(cfg.seed).split("batches");
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..ds.num_identities).collect();

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for group in order.chunks_exact(p_ids) {
            let mut batch = Vec::with_capacity(2 * p_ids * k);
            for &id in group {
                for (m, pool) in by_identity[id].iter().enumerate() {
                    let mut pool = pool.clone();
                    rng.shuffle(&mut pool);
                    batch.extend(pool[..k].iter().map(|&i| (i, id, m)));
                }
            }
            total += step(&mut params, ds, &batch, cfg)?;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        log::debug!("epoch {epoch}: triplet loss {mean:.5}");
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        params,
        epoch_losses,
    })
}

/// One gradient-descent step on a batch of `(record, identity, modality)`.
fn step(
    params: &mut EmbedderParams,
    ds: &Dataset,
    batch: &[(usize, usize, usize)],
    cfg: &TrainConfig,
) -> Result<f64> {
    let feats: Vec<FeatureVector> = batch
        .iter()
        .map(|&(i, _, _)| forward(params, &ds.records[i].pixels))
        .collect::<Result<_>>()?;
    let dim = params.embedding_dim();
    let mut cot = vec![vec![0.0; dim]; batch.len()];
    let n = batch.len() as f64;
    let mut loss = 0.0;

    for (a, &(_, id_a, m_a)) in batch.iter().enumerate() {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for (j, &(_, id_j, m_j)) in batch.iter().enumerate() {
            if m_j == m_a {
                continue;
            }
            let d = feats[a].distance(&feats[j]);
            if id_j == id_a {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        let (Some((p, d_ap)), Some((q, d_an))) = (pos, neg) else {
            continue;
        };
        let hinge = d_ap - d_an + cfg.margin;
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge / n;
        // d(d_xy)/dx = (x - y) / d_xy
        let fa = feats[a].as_slice();
        for c in 0..dim {
            let gp = (fa[c] - feats[p].0[c]) / d_ap.max(1e-12) / n;
            let gn = (fa[c] - feats[q].0[c]) / d_an.max(1e-12) / n;
            cot[a][c] += gp - gn;
            cot[p][c] -= gp;
            cot[q][c] += gn;
        }
    }

    let mut grads = zero_like(params);
    for (b, &(i, _, _)) in batch.iter().enumerate() {
        if cot[b].iter().all(|&v| v == 0.0) {
            continue;
        }
        accumulate_param_gradient(params, &ds.records[i].pixels, &cot[b], &mut grads);
    }
    let lr = cfg.learning_rate;
    for (layer, g) in params.layers.iter_mut().zip(&grads) {
        for (w, gw) in layer.weight.iter_mut().zip(&g.weight) {
            *w = f64::from((*w - lr * gw) as f32);
        }
        for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
            *b = f64::from((*b - lr * gb) as f32);
        }
    }
    Ok(loss)
}
