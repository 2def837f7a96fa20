use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbedderParams, Linear, ARCHITECTURE};
use crate::blob;
use crate::error::{Error, Result};

const MAGIC: &str = "CMPS-CHECKPOINT/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: String,
    pub input_shape: [usize; 3],
    /// `[out, in]` per layer, in order.
    pub layer_dims: Vec<[usize; 2]>,
    pub embedding_dim: usize,
    pub seed: u64,
    pub fingerprint: String,
    #[serde(default)]
    pub config_hash: String,
}

pub fn save_checkpoint(p: &EmbedderParams, config_hash: &str, path: &Path) -> Result<()> {
    p.validate()?;
    let (c, h, w) = p.input_shape;
    let header = CheckpointHeader {
        architecture: ARCHITECTURE.into(),
        input_shape: [c, h, w],
        layer_dims: p.layers.iter().map(|l| [l.out_dim, l.in_dim]).collect(),
        embedding_dim: p.embedding_dim(),
        seed: p.seed,
        fingerprint: p.fingerprint(),
        config_hash: config_hash.into(),
    };
    let values: Vec<f32> = p.flat_values().map(|x| x as f32).collect();
    blob::write(path, MAGIC, &header, &values)
}

pub fn load_checkpoint(path: &Path) -> Result<EmbedderParams> {
    let (header, values): (CheckpointHeader, Vec<f32>) = blob::read(path, MAGIC)?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        reason,
    };
    if header.architecture != ARCHITECTURE {
        return Err(bad(format!(
            "unknown architecture {:?}",
            header.architecture
        )));
    }
    let expected: usize = header.layer_dims.iter().map(|[o, i]| o * i + o).sum();
    if expected != values.len() {
        return Err(bad(format!(
            "layer dims need {expected} values, blob has {}",
            values.len()
        )));
    }
    let mut rest = values.iter().map(|&v| f64::from(v));
    let layers = header
        .layer_dims
        .iter()
        .map(|&[out_dim, in_dim]| Linear {
            in_dim,
            out_dim,
            weight: rest.by_ref().take(out_dim * in_dim).collect(),
            bias: rest.by_ref().take(out_dim).collect(),
        })
        .collect();
    let [c, h, w] = header.input_shape;
    let p = EmbedderParams {
        layers,
        input_shape: (c, h, w),
        seed: header.seed,
    };
    p.validate().map_err(|e| bad(e.to_string()))?;
    let found = p.fingerprint();
    if found != header.fingerprint {
        return Err(Error::Fingerprint {
            what: format!("checkpoint {}", path.display()),
            expected: header.fingerprint,
            found,
        });
    }
    Ok(p)
}
