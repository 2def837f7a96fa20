//! Synthetic visible/infrared person dataset.
//!
//! Each identity owns a latent appearance: one RGB color per horizontal body
//! band, a stripe texture on the torso and a per-band heat offset. Visible
//! images render the colors directly. Infrared images are channel-equal and
//! blend the luminance of the visible rendering with a thermal map of the same
//! latent; `modality_gap` sets the blend weight of the thermal map, so a gap
//! of zero makes an infrared image the grayscale of its visible counterpart.

mod store;

pub use store::{load_dataset, save_dataset, DatasetManifest, ManifestRecord};

use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{PixelTensor, Shape};

pub const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

const BANDS: usize = 4;
const TORSO_BAND: usize = 1;
const VISIBLE_CAMERAS: u32 = 2;
const INFRARED_CAMERA: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Visible,
    Infrared,
    Grayscale,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visible, Modality::Infrared, Modality::Grayscale];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Visible => "visible",
            Modality::Infrared => "infrared",
            Modality::Grayscale => "grayscale",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub identity_id: u32,
    pub modality: Modality,
    pub camera_id: u32,
    pub pixels: PixelTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "v2i")]
    VisibleToInfrared,
    #[serde(rename = "i2v")]
    InfraredToVisible,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::VisibleToInfrared, Direction::InfraredToVisible];

    pub fn tag(self) -> &'static str {
        match self {
            Direction::VisibleToInfrared => "v2i",
            Direction::InfraredToVisible => "i2v",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "v2i" => Ok(Direction::VisibleToInfrared),
            "i2v" => Ok(Direction::InfraredToVisible),
            other => Err(Error::Argument(format!(
                "unknown direction {other:?} (expected v2i or i2v)"
            ))),
        }
    }

    pub fn query_modality(self) -> Modality {
        match self {
            Direction::VisibleToInfrared => Modality::Visible,
            Direction::InfraredToVisible => Modality::Infrared,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub images_per_identity_per_modality: usize,
    pub height: usize,
    pub width: usize,
    /// Std-dev of per-pixel Gaussian noise, in pixel units. Also scales the
    /// per-image illumination gain jitter.
    pub intra_identity_noise: f64,
    pub modality_gap: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 64,
            images_per_identity_per_modality: 8,
            height: 24,
            width: 12,
            intra_identity_noise: 16.0,
            modality_gap: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Argument(format!(
                "image shape {}x{} has zero area",
                self.height, self.width
            )));
        }
        if self.num_identities == 0 || self.images_per_identity_per_modality == 0 {
            return Err(Error::Argument(
                "identity and image counts must be at least 1".into(),
            ));
        }
        if !(self.intra_identity_noise >= 0.0) || !self.intra_identity_noise.is_finite() {
            return Err(Error::Argument("intra_identity_noise must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.modality_gap) {
            return Err(Error::Argument("modality_gap must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> Shape {
        (3, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub records: Vec<ImageRecord>,
    pub num_identities: usize,
    pub images_per_identity_per_modality: usize,
    pub image_shape: Shape,
}

impl Dataset {
    /// Wraps records after checking the dataset invariants.
    pub fn new(
        config: SynthConfig,
        records: Vec<ImageRecord>,
        num_identities: usize,
        images_per_identity_per_modality: usize,
        image_shape: Shape,
    ) -> Result<Self> {
        let mut seen = vec![[false; 2]; num_identities];
        for (i, r) in records.iter().enumerate() {
            if r.pixels.shape() != image_shape {
                return Err(Error::Dataset(format!(
                    "record {i} has shape {:?}, dataset shape is {image_shape:?}",
                    r.pixels.shape()
                )));
            }
            let id = r.identity_id as usize;
            if id >= num_identities {
                return Err(Error::Dataset(format!(
                    "record {i} has identity {id} outside 0..{num_identities}"
                )));
            }
            match r.modality {
                Modality::Visible => seen[id][0] = true,
                Modality::Infrared => seen[id][1] = true,
                Modality::Grayscale => {}
            }
        }
        if let Some(id) = seen.iter().position(|s| !(s[0] && s[1])) {
            return Err(Error::Dataset(format!(
                "identity {id} lacks a visible or infrared record"
            )));
        }
        Ok(Self {
            config,
            records,
            num_identities,
            images_per_identity_per_modality,
            image_shape,
        })
    }

    pub fn of_modality(&self, m: Modality) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.modality == m)
    }

    /// Hash over metadata and pixel bytes.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        let (c, h, w) = self.image_shape;
        for v in [c, h, w, self.records.len()] {
            bytes.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for r in &self.records {
            bytes.extend_from_slice(&r.identity_id.to_le_bytes());
            bytes.extend_from_slice(r.modality.tag().as_bytes());
            bytes.extend_from_slice(&r.camera_id.to_le_bytes());
            bytes.extend(blob::f32_bytes(r.pixels.data().iter().map(|&x| x as f32)));
        }
        blob::fingerprint(&bytes)
    }
}

/// Replaces each pixel by `0.299 R + 0.587 G + 0.114 B` in all three channels.
pub fn grayscale(img: &ImageRecord) -> ImageRecord {
    ImageRecord {
        identity_id: img.identity_id,
        modality: Modality::Grayscale,
        camera_id: img.camera_id,
        pixels: grayscale_pixels(&img.pixels),
    }
}

pub fn grayscale_pixels(t: &PixelTensor) -> PixelTensor {
    let (c, h, w) = t.shape();
    debug_assert_eq!(c, 3);
    let mut out = PixelTensor::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = (t.get(0, y, x), t.get(1, y, x), t.get(2, y, x));
            // Channel-equal input maps to itself exactly.
            let v = if r == g && g == b {
                r
            } else {
                GRAY_WEIGHTS[0] * r + GRAY_WEIGHTS[1] * g + GRAY_WEIGHTS[2] * b
            };
            for ch in 0..c {
                out.set(ch, y, x, v);
            }
        }
    }
    out
}

/// Per-identity luminance texture: a grid of cells, each `+-TEXTURE_AMPLITUDE`,
/// shared by both modalities. Carries most of the cross-modality identity
/// signal; the band colors alone are deliberately hard to tell apart.
const TEXTURE_GRID: (usize, usize) = (12, 6);
const TEXTURE_CELLS: usize = TEXTURE_GRID.0 * TEXTURE_GRID.1;
const TEXTURE_AMPLITUDE: f64 = 14.0;
const COLOR_RANGE: (f64, f64) = (100.0, 155.0);

struct Latent {
    colors: [[f64; 3]; BANDS],
    heat: [f64; BANDS],
    stripe_period: usize,
    stripe_phase: usize,
    stripe_amplitude: f64,
    texture: Vec<f64>,
}

impl Latent {
    fn sample(rng: &mut SeededRng) -> Self {
        let mut colors = [[0.0; 3]; BANDS];
        for band in &mut colors {
            for c in band.iter_mut() {
                *c = rng.uniform_range(COLOR_RANGE.0, COLOR_RANGE.1);
            }
        }
        let mut heat = [0.0; BANDS];
        for h in &mut heat {
            *h = rng.uniform_range(-1.0, 1.0);
        }
        let stripe_period = 2 + rng.index(3);
        let stripe_phase = rng.index(stripe_period);
        let stripe_amplitude = rng.uniform_range(0.05, 0.3);
        let texture = (0..TEXTURE_CELLS)
            .map(|_| {
                if rng.bernoulli(0.5) {
                    TEXTURE_AMPLITUDE
                } else {
                    -TEXTURE_AMPLITUDE
                }
            })
            .collect();
        Self {
            texture,
            colors,
            heat,
            stripe_period,
            stripe_phase,
            stripe_amplitude,
        }
    }

    fn stripe(&self, band: usize, x: usize) -> f64 {
        if band != TORSO_BAND {
            return 1.0;
        }
        let on = (x + self.stripe_phase) % self.stripe_period == 0;
        if on {
            1.0 + self.stripe_amplitude
        } else {
            1.0 - self.stripe_amplitude
        }
    }

    fn texel(&self, shape: Shape, y: usize, x: usize) -> f64 {
        let (_, h, w) = shape;
        let (ty, tx) = (y * TEXTURE_GRID.0 / h, x * TEXTURE_GRID.1 / w);
        self.texture[ty * TEXTURE_GRID.1 + tx]
    }

    fn visible(&self, shape: Shape) -> PixelTensor {
        let (c, h, w) = shape;
        let mut t = PixelTensor::zeros(shape);
        for y in 0..h {
            let band = y * BANDS / h;
            for x in 0..w {
                let s = self.stripe(band, x);
                for ch in 0..c {
                    t.set(
                        ch,
                        y,
                        x,
                        self.colors[band][ch] * s + self.texel(shape, y, x),
                    );
                }
            }
        }
        t
    }

    /// Channel-equal thermal map: warm (red-leaning) clothing reads hot.
    fn thermal(&self, shape: Shape) -> PixelTensor {
        let (c, h, w) = shape;
        let mut t = PixelTensor::zeros(shape);
        for y in 0..h {
            let band = y * BANDS / h;
            let [r, _, b] = self.colors[band];
            let z = (r - b) / 60.0 + self.heat[band];
            let v = 30.0 + 195.0 / (1.0 + (-z).exp());
            for x in 0..w {
                let tv = v + self.texel(shape, y, x);
                for ch in 0..c {
                    t.set(ch, y, x, tv);
                }
            }
        }
        t
    }
}

/// Renders the full dataset. Records are ordered by identity, then modality
/// (visible first), then image index.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let shape = cfg.image_shape();
    let root = SeededRng::new(cfg.seed);
    let mut latent_rng = root.split("latent");
    let mut noise_rng = root.split("noise");
    let sigma = cfg.intra_identity_noise;
    let gain_sigma = sigma / 255.0;
    let k = cfg.images_per_identity_per_modality;

    let mut records = Vec::with_capacity(cfg.num_identities * k * 2);
    for id in 0..cfg.num_identities {
        let latent = Latent::sample(&mut latent_rng);
        let vis_clean = latent.visible(shape);
        let mut ir_clean = grayscale_pixels(&vis_clean);
        if cfg.modality_gap > 0.0 {
            let thermal = latent.thermal(shape);
            ir_clean = ir_clean.zip_map(&thermal, |g, t| {
                (1.0 - cfg.modality_gap) * g + cfg.modality_gap * t
            })?;
        }

        for i in 0..k {
            let gain = 1.0 + gain_sigma * noise_rng.normal();
            let mut px = vis_clean.map(|v| v * gain);
            if sigma > 0.0 {
                for v in px.data_mut() {
                    *v += sigma * noise_rng.normal();
                }
            }
            records.push(finish(
                id,
                Modality::Visible,
                i as u32 % VISIBLE_CAMERAS,
                px,
            ));
        }
        for _ in 0..k {
            let gain = 1.0 + gain_sigma * noise_rng.normal();
            let (c, h, w) = shape;
            let mut px = ir_clean.map(|v| v * gain);
            if sigma > 0.0 {
                for y in 0..h {
                    for x in 0..w {
                        let n = sigma * noise_rng.normal();
                        for ch in 0..c {
                            let v = px.get(ch, y, x) + n;
                            px.set(ch, y, x, v);
                        }
                    }
                }
            }
            records.push(finish(id, Modality::Infrared, INFRARED_CAMERA, px));
        }
    }
    Dataset::new(cfg.clone(), records, cfg.num_identities, k, shape)
}

fn finish(id: usize, modality: Modality, camera_id: u32, px: PixelTensor) -> ImageRecord {
    let mut pixels = px.map(|v| v.clamp(0.0, 255.0));
    pixels.quantize();
    ImageRecord {
        identity_id: id as u32,
        modality,
        camera_id,
        pixels,
    }
}

/// Partitions visible and infrared records into queries and gallery.
pub fn split_query_gallery(
    ds: &Dataset,
    direction: Direction,
) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    let (qm, gm) = match direction {
        Direction::VisibleToInfrared => (Modality::Visible, Modality::Infrared),
        Direction::InfraredToVisible => (Modality::Infrared, Modality::Visible),
    };
    let queries: Vec<_> = ds.of_modality(qm).cloned().collect();
    let gallery: Vec<_> = ds.of_modality(gm).cloned().collect();
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Dataset(format!(
            "direction {} needs both {} and {} records",
            direction.tag(),
            qm.tag(),
            gm.tag()
        )));
    }
    Ok((queries, gallery))
}

/// True when all three channels agree within `tol` at every pixel.
pub fn is_channel_equal(t: &PixelTensor, tol: f64) -> bool {
    let (c, h, w) = t.shape();
    (0..h).all(|y| (0..w).all(|x| (1..c).all(|ch| (t.get(ch, y, x) - t.get(0, y, x)).abs() <= tol)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_pixel(r: f64, g: f64, b: f64) -> ImageRecord {
        ImageRecord {
            identity_id: 5,
            modality: Modality::Visible,
            camera_id: 1,
            pixels: PixelTensor::from_vec((3, 1, 1), vec![r, g, b]).unwrap(),
        }
    }

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            num_identities: 4,
            images_per_identity_per_modality: 2,
            seed: 9,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn grayscale_pixel_cases() {
        let white = grayscale(&one_pixel(255.0, 255.0, 255.0));
        assert_eq!(white.pixels.data(), &[255.0; 3]);
        let black = grayscale(&one_pixel(0.0, 0.0, 0.0));
        assert_eq!(black.pixels.data(), &[0.0; 3]);
        let red = grayscale(&one_pixel(255.0, 0.0, 0.0));
        for v in red.pixels.data() {
            assert!((v - 76.245).abs() < 1e-9);
        }
        assert_eq!(red.modality, Modality::Grayscale);
        assert_eq!((red.identity_id, red.camera_id), (5, 1));
    }

    #[test]
    fn generate_counts() {
        let ds = generate_dataset(&small_cfg()).unwrap();
        assert_eq!(ds.records.len(), 16);
        assert_eq!(ds.of_modality(Modality::Visible).count(), 8);
        assert_eq!(ds.of_modality(Modality::Infrared).count(), 8);
    }

    #[test]
    fn generate_is_deterministic() {
        let a = generate_dataset(&small_cfg()).unwrap();
        let b = generate_dataset(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let mut other = small_cfg();
        other.seed = 10;
        assert_ne!(
            a.fingerprint(),
            generate_dataset(&other).unwrap().fingerprint()
        );
    }

    #[test]
    fn zero_gap_zero_noise_infrared_is_grayscale_of_visible() {
        let cfg = SynthConfig {
            intra_identity_noise: 0.0,
            modality_gap: 0.0,
            ..small_cfg()
        };
        let ds = generate_dataset(&cfg).unwrap();
        for id in 0..cfg.num_identities as u32 {
            let vis = ds
                .of_modality(Modality::Visible)
                .find(|r| r.identity_id == id)
                .unwrap();
            let ir = ds
                .of_modality(Modality::Infrared)
                .find(|r| r.identity_id == id)
                .unwrap();
            let g = grayscale(vis);
            let mae: f64 = g
                .pixels
                .data()
                .iter()
                .zip(ir.pixels.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / g.pixels.len() as f64;
            assert!(mae < 1e-4, "identity {id}: mae {mae}");
        }
    }

    #[test]
    fn infrared_records_are_channel_equal() {
        let ds = generate_dataset(&small_cfg()).unwrap();
        for r in ds.of_modality(Modality::Infrared) {
            assert!(is_channel_equal(&r.pixels, 1e-6));
        }
        for r in &ds.records {
            assert!(r.pixels.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
        }
    }

    #[test]
    fn zero_area_is_rejected() {
        let cfg = SynthConfig {
            width: 0,
            ..small_cfg()
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn split_partitions_records() {
        let ds = generate_dataset(&small_cfg()).unwrap();
        let (q, g) = split_query_gallery(&ds, Direction::VisibleToInfrared).unwrap();
        assert_eq!((q.len(), g.len()), (8, 8));
        assert!(q.iter().all(|r| r.modality == Modality::Visible));
        assert!(g.iter().all(|r| r.modality == Modality::Infrared));

        let (q2, g2) = split_query_gallery(&ds, Direction::InfraredToVisible).unwrap();
        assert_eq!(q2, g);
        assert_eq!(g2, q);

        let mut union: Vec<_> = q.iter().chain(&g).collect();
        assert_eq!(union.len(), ds.records.len());
        union.retain(|r| !ds.records.contains(r));
        assert!(union.is_empty());
        assert!(q.iter().all(|r| !g.contains(r)));
    }

    #[test]
    fn split_requires_both_modalities() {
        let ds = generate_dataset(&small_cfg()).unwrap();
        let only_visible = ds
            .records
            .iter()
            .filter(|r| r.modality == Modality::Visible)
            .cloned()
            .collect::<Vec<_>>();
        assert!(Dataset::new(
            ds.config.clone(),
            only_visible.clone(),
            4,
            2,
            ds.image_shape
        )
        .is_err());
        // Bypass the constructor to exercise the split's own check.
        let broken = Dataset {
            records: only_visible,
            ..ds
        };
        assert!(matches!(
            split_query_gallery(&broken, Direction::VisibleToInfrared),
            Err(Error::Dataset(_))
        ));
    }

    proptest! {
        #[test]
        fn grayscale_is_idempotent(v in prop::collection::vec(0.0f64..255.0, 3 * 6)) {
            let img = ImageRecord {
                identity_id: 0,
                modality: Modality::Visible,
                camera_id: 0,
                pixels: PixelTensor::from_vec((3, 2, 3), v).unwrap(),
            };
            let once = grayscale(&img);
            prop_assert_eq!(grayscale(&once).pixels, once.pixels);
        }

        #[test]
        fn channel_equal_input_is_fixed(v in 0.0f64..255.0) {
            let out = grayscale(&one_pixel(v, v, v));
            for x in out.pixels.data() {
                prop_assert!((x - v).abs() <= 1e-9);
            }
        }
    }
}
