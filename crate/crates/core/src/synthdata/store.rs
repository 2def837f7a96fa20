//! Dataset persistence: a JSON manifest plus a raw little-endian `f32` blob.
//!
//! Manifest `<name>.json`:
//!
//! ```text
//! {
//!   "format": "cmps-dataset/1",
//!   "config": { ...SynthConfig... },
//!   "image_shape": [3, H, W],
//!   "record_count": N,
//!   "blob_file": "<name>.bin",
//!   "blob_bytes": N * 3 * H * W * 4,
//!   "fingerprint": "<16 hex>",
//!   "config_hash": "<16 hex>",
//!   "records": [ { "identity_id", "modality", "camera_id", "offset" }, ... ]
//! }
//! ```
//!
//! The blob holds the images back to back in manifest order, channel-major
//! (`c`, then `y`, then `x`), each pixel one little-endian `f32`. `offset` is
//! the byte offset of the record's first value within the blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, ImageRecord, Modality, SynthConfig};
use crate::blob;
use crate::error::{Error, Result};
use crate::tensor::PixelTensor;

pub const DATASET_FORMAT: &str = "cmps-dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub identity_id: u32,
    pub modality: Modality,
    pub camera_id: u32,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub config: SynthConfig,
    pub image_shape: [usize; 3],
    pub num_identities: usize,
    pub images_per_identity_per_modality: usize,
    pub record_count: usize,
    pub blob_file: String,
    pub blob_bytes: u64,
    pub fingerprint: String,
    #[serde(default)]
    pub config_hash: String,
    pub records: Vec<ManifestRecord>,
}

fn blob_path(manifest: &Path, blob_file: &str) -> PathBuf {
    manifest
        .parent()
        .map(|d| d.join(blob_file))
        .unwrap_or_else(|| PathBuf::from(blob_file))
}

/// Writes `<manifest_path>` and a sibling `.bin` file.
/// `config_hash` records the experiment config that produced the dataset.
pub fn save_dataset(ds: &Dataset, config_hash: &str, manifest_path: &Path) -> Result<()> {
    let blob_name = manifest_path
        .with_extension("bin")
        .file_name()
        .and_then(|n| n.to_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::Argument(format!("bad dataset path {manifest_path:?}")))?;
    let (c, h, w) = ds.image_shape;
    let per_image = (c * h * w * 4) as u64;

    let mut bytes = Vec::with_capacity(ds.records.len() * per_image as usize);
    let mut records = Vec::with_capacity(ds.records.len());
    for r in &ds.records {
        records.push(ManifestRecord {
            identity_id: r.identity_id,
            modality: r.modality,
            camera_id: r.camera_id,
            offset: bytes.len() as u64,
        });
        bytes.extend(blob::f32_bytes(r.pixels.data().iter().map(|&x| x as f32)));
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        config: ds.config.clone(),
        image_shape: [c, h, w],
        num_identities: ds.num_identities,
        images_per_identity_per_modality: ds.images_per_identity_per_modality,
        record_count: ds.records.len(),
        blob_file: blob_name.clone(),
        blob_bytes: bytes.len() as u64,
        fingerprint: ds.fingerprint(),
        config_hash: config_hash.into(),
        records,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Argument(format!("manifest not serializable: {e}")))?;
    fs::write(manifest_path, text + "\n").map_err(|e| Error::io(manifest_path, e))?;
    let bp = blob_path(manifest_path, &blob_name);
    fs::write(&bp, bytes).map_err(|e| Error::io(&bp, e))
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: manifest_path.to_path_buf(),
        offset: byte_offset(&text, e.line(), e.column()),
        reason: e.to_string(),
    })?;
    let bad = |offset: u64, reason: String| Error::Format {
        path: manifest_path.to_path_buf(),
        offset,
        reason,
    };
    if manifest.format != DATASET_FORMAT {
        return Err(bad(0, format!("unsupported format {:?}", manifest.format)));
    }
    if manifest.record_count != manifest.records.len() {
        return Err(bad(
            0,
            format!(
                "record_count {} but {} records listed",
                manifest.record_count,
                manifest.records.len()
            ),
        ));
    }

    let bp = blob_path(manifest_path, &manifest.blob_file);
    let bytes = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    if bytes.len() as u64 != manifest.blob_bytes {
        return Err(Error::Format {
            path: bp,
            offset: bytes.len() as u64,
            reason: format!(
                "blob has {} bytes, manifest declares {}",
                bytes.len(),
                manifest.blob_bytes
            ),
        });
    }
    let [c, h, w] = manifest.image_shape;
    let per_image = c * h * w * 4;
    let mut records = Vec::with_capacity(manifest.records.len());
    for m in &manifest.records {
        let start = m.offset as usize;
        let end = start + per_image;
        if end > bytes.len() {
            return Err(Error::Format {
                path: bp,
                offset: m.offset,
                reason: format!("record needs {per_image} bytes past end of blob"),
            });
        }
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        let pixels =
            PixelTensor::from_vec((c, h, w), data).map_err(|e| bad(m.offset, e.to_string()))?;
        records.push(ImageRecord {
            identity_id: m.identity_id,
            modality: m.modality,
            camera_id: m.camera_id,
            pixels,
        });
    }
    let ds = Dataset::new(
        manifest.config,
        records,
        manifest.num_identities,
        manifest.images_per_identity_per_modality,
        (c, h, w),
    )?;
    let found = ds.fingerprint();
    if found != manifest.fingerprint {
        return Err(Error::Fingerprint {
            what: format!("dataset {}", manifest_path.display()),
            expected: manifest.fingerprint,
            found,
        });
    }
    Ok(ds)
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (before + column.saturating_sub(1)) as u64
}
