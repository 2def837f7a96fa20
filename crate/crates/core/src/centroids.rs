//! Per-identity, per-modality feature centroids and the positive/negative
//! targets the attack losses are built from.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob;
use crate::embedder::{forward, EmbedderParams};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};
use crate::synthdata::{grayscale, Dataset, Modality};
use crate::tensor::FeatureVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeStrategy {
    Farthest,
    Nearest,
    Random(u64),
}

impl Default for NegativeStrategy {
    fn default() -> Self {
        NegativeStrategy::Farthest
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidTable {
    pub entries: BTreeMap<(u32, Modality), FeatureVector>,
    pub model_fingerprint: String,
    pub dataset_fingerprint: String,
}

/// Mean embedding of every (identity, modality) group. Grayscale centroids
/// come from the grayscale of each visible record. Means are not
/// re-normalized.
pub fn compute_centroids(p: &EmbedderParams, ds: &Dataset) -> Result<CentroidTable> {
    if p.input_shape != ds.image_shape {
        return Err(Error::Argument(format!(
            "model input {:?} does not match dataset images {:?}",
            p.input_shape, ds.image_shape
        )));
    }
    let dim = p.embedding_dim();
    let mut sums: BTreeMap<(u32, Modality), (Vec<f64>, usize)> = BTreeMap::new();
    let mut add = |key: (u32, Modality), f: FeatureVector| {
        let entry = sums.entry(key).or_insert_with(|| (vec![0.0; dim], 0));
        for (s, v) in entry.0.iter_mut().zip(f.0) {
            *s += v;
        }
        entry.1 += 1;
    };
    for r in &ds.records {
        add((r.identity_id, r.modality), forward(p, &r.pixels)?);
        if r.modality == Modality::Visible {
            let g = grayscale(r);
            add((r.identity_id, Modality::Grayscale), forward(p, &g.pixels)?);
        }
    }
    let mut entries = BTreeMap::new();
    for ((id, m), (sum, count)) in sums {
        if count == 0 {
            log::warn!("identity {id} has no {} images; skipping", m.tag());
            continue;
        }
        let n = count as f64;
        entries.insert(
            (id, m),
            FeatureVector(sum.into_iter().map(|s| s / n).collect()),
        );
    }
    for id in 0..ds.num_identities as u32 {
        for m in Modality::ALL {
            if !entries.contains_key(&(id, m)) {
                log::warn!("no centroid for identity {id} in {}", m.tag());
            }
        }
    }
    Ok(CentroidTable {
        entries,
        model_fingerprint: p.fingerprint(),
        dataset_fingerprint: ds.fingerprint(),
    })
}

impl CentroidTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u32, m: Modality) -> Result<&FeatureVector> {
        self.entries.get(&(id, m)).ok_or(Error::MissingCentroid {
            identity: id,
            modality: m,
        })
    }

    pub fn dim(&self) -> usize {
        self.entries.values().next().map_or(0, FeatureVector::dim)
    }
}

/// Centroid of the anchor's own identity in modality `m`.
pub fn positive_centroid(t: &CentroidTable, id: u32, m: Modality) -> Result<&FeatureVector> {
    t.get(id, m)
}

/// Picks a centroid of another identity in modality `m`. Ties go to the
/// smallest identity id.
pub fn negative_centroid<'a>(
    t: &'a CentroidTable,
    anchor_feature: &FeatureVector,
    anchor_id: u32,
    m: Modality,
    s: NegativeStrategy,
) -> Result<&'a FeatureVector> {
    let candidates: Vec<(u32, &FeatureVector)> = t
        .entries
        .iter()
        .filter(|((id, mm), _)| *mm == m && *id != anchor_id)
        .map(|((id, _), f)| (*id, f))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Selection(format!(
            "no identity other than {anchor_id} has a {} centroid",
            m.tag()
        )));
    }
    let pick = match s {
        NegativeStrategy::Farthest | NegativeStrategy::Nearest => {
            let farthest = s == NegativeStrategy::Farthest;
            let mut best = 0;
            let mut best_d = candidates[0].1.distance(anchor_feature);
            for (i, (_, f)) in candidates.iter().enumerate().skip(1) {
                let d = f.distance(anchor_feature);
                if (farthest && d > best_d) || (!farthest && d < best_d) {
                    best = i;
                    best_d = d;
                }
            }
            best
        }
        NegativeStrategy::Random(seed) => {
            let mut key = format!("{anchor_id}:{}", m.tag());
            for v in anchor_feature.as_slice() {
                key.push_str(&format!(":{:016x}", v.to_bits()));
            }
            SeededRng::new(derive_seed(seed, &key)).index(candidates.len())
        }
    };
    Ok(candidates[pick].1)
}

const CACHE_MAGIC: &str = "CMPS-CENTROIDS/1";

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    #[serde(default)]
    config_hash: String,
    model_fingerprint: String,
    dataset_fingerprint: String,
    dim: usize,
    keys: Vec<(u32, Modality)>,
}

/// Writes the table in the header-plus-`f32`-blob layout. Values are rounded
/// to `f32`.
pub fn save_centroids(t: &CentroidTable, config_hash: &str, path: &Path) -> Result<()> {
    let header = CacheHeader {
        config_hash: config_hash.into(),
        model_fingerprint: t.model_fingerprint.clone(),
        dataset_fingerprint: t.dataset_fingerprint.clone(),
        dim: t.dim(),
        keys: t.entries.keys().copied().collect(),
    };
    let values: Vec<f32> = t
        .entries
        .values()
        .flat_map(|f| f.0.iter().map(|&v| v as f32))
        .collect();
    blob::write(path, CACHE_MAGIC, &header, &values)
}

/// Loads a cache and checks it was built from the given model and dataset.
pub fn load_centroids(
    path: &Path,
    model_fingerprint: &str,
    dataset_fingerprint: &str,
) -> Result<CentroidTable> {
    let (h, values): (CacheHeader, Vec<f32>) = blob::read(path, CACHE_MAGIC)?;
    for (what, expected, found) in [
        ("model", model_fingerprint, &h.model_fingerprint),
        ("dataset", dataset_fingerprint, &h.dataset_fingerprint),
    ] {
        if expected != found {
            return Err(Error::Fingerprint {
                what: format!("centroid cache {} ({what})", path.display()),
                expected: expected.into(),
                found: found.clone(),
            });
        }
    }
    if values.len() != h.dim * h.keys.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            reason: format!(
                "{} keys of dim {} but {} values",
                h.keys.len(),
                h.dim,
                values.len()
            ),
        });
    }
    let entries = h
        .keys
        .iter()
        .zip(values.chunks_exact(h.dim.max(1)))
        .map(|(k, c)| (*k, FeatureVector(c.iter().map(|&v| f64::from(v)).collect())))
        .collect();
    Ok(CentroidTable {
        entries,
        model_fingerprint: h.model_fingerprint,
        dataset_fingerprint: h.dataset_fingerprint,
    })
}
