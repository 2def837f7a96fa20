use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Perturbation;
use crate::blob;
use crate::error::{Error, Result};
use crate::tensor::PixelTensor;

const MAGIC: &str = "CMPS-PERTURBATION/1";

/// Provenance stored ahead of the perturbation values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationHeader {
    pub method: String,
    pub epsilon: f64,
    pub shape: [usize; 3],
    pub clip_to_pixel_range: bool,
    pub config_hash: String,
    pub seed: u64,
    /// Model the perturbation was learned against.
    pub model_fingerprint: String,
    pub dataset_fingerprint: String,
}

pub fn save_perturbation(
    pert: &Perturbation,
    header: &PerturbationHeader,
    path: &Path,
) -> Result<()> {
    let (c, h, w) = pert.eta.shape();
    if header.shape != [c, h, w] || header.epsilon != pert.epsilon {
        return Err(Error::Argument(
            "perturbation header disagrees with the tensor it describes".into(),
        ));
    }
    let values: Vec<f32> = pert.eta.data().iter().map(|&v| v as f32).collect();
    blob::write(path, MAGIC, header, &values)
}

pub fn load_perturbation(path: &Path) -> Result<(Perturbation, PerturbationHeader)> {
    let (header, values): (PerturbationHeader, Vec<f32>) = blob::read(path, MAGIC)?;
    let [c, h, w] = header.shape;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        reason,
    };
    let eta = PixelTensor::from_vec((c, h, w), values.iter().map(|&v| f64::from(v)).collect())
        .map_err(|e| bad(e.to_string()))?;
    let pert = Perturbation::new(eta, header.epsilon, header.clip_to_pixel_range)
        .map_err(|e| bad(e.to_string()))?;
    Ok((pert, header))
}
