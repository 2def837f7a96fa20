//! Config-driven pipeline stages. Each stage reads and writes files under
//! one output directory, so the CLI verbs can be run one by one or chained
//! by [`full_pipeline`].
//!
//! All randomness comes from the root `seed`, split by label into the
//! `data`, `data-test`, `train`, `train-b` and `attack` streams. The victim is
//! trained and universal perturbations are learned on the training dataset;
//! retrieval metrics are measured on the held-out test dataset, whose
//! identities are disjoint from the training ones.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{
    cmps_learn, fgsm, load_perturbation, mfgsm, pgd, sample_attack_loss, save_perturbation,
    stepwise_uap, AttackConfig, Perturbation, PerturbationHeader,
};
use crate::centroids::{compute_centroids, load_centroids, save_centroids, CentroidTable};
use crate::embedder::{load_checkpoint, save_checkpoint, train, EmbedderParams, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_report_csv, write_report_json, EvalReport, ReportRow};
use crate::rng::derive_seed;
use crate::synthdata::{
    generate_dataset, load_dataset, save_dataset, split_query_gallery, Dataset, Direction,
    ImageRecord, SynthConfig,
};
use crate::theorycheck::{verify_superiority, SuperiorityReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cmps,
    Stepwise,
    Fgsm,
    Pgd,
    Mfgsm,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Cmps,
        Method::Stepwise,
        Method::Fgsm,
        Method::Pgd,
        Method::Mfgsm,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Cmps => "cmps",
            Method::Stepwise => "stepwise",
            Method::Fgsm => "fgsm",
            Method::Pgd => "pgd",
            Method::Mfgsm => "mfgsm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown method {s:?} (expected cmps, stepwise, fgsm, pgd or mfgsm)"
                ))
            })
    }

    /// Universal methods produce one perturbation file; the others attack
    /// each query separately.
    pub fn is_universal(self) -> bool {
        matches!(self, Method::Cmps | Method::Stepwise)
    }
}

/// Which victim a training run produces. `B` is the independently seeded
/// model used for transfer studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Victim {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Epsilon,
    GrayProb,
}

impl AblationAxis {
    pub fn tag(self) -> &'static str {
        match self {
            AblationAxis::Epsilon => "epsilon",
            AblationAxis::GrayProb => "gray_prob",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(AblationAxis::Epsilon),
            "gray_prob" | "gray-prob" => Ok(AblationAxis::GrayProb),
            other => Err(Error::Argument(format!(
                "unknown ablation axis {other:?} (expected epsilon or gray_prob)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub directions: Vec<Direction>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            directions: Direction::BOTH.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub epsilons: Vec<f64>,
    pub gray_probs: Vec<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            epsilons: vec![2.0, 4.0, 8.0, 16.0],
            gray_probs: (0..=10).map(|i| f64::from(i) / 10.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySection {
    pub trials: usize,
    pub dim: usize,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for TheorySection {
    fn default() -> Self {
        Self {
            trials: 1000,
            dim: 8,
            steps: 5000,
            learning_rate: 0.1,
        }
    }
}

/// One file drives every stage. Section `seed` keys are ignored: the stage
/// seeds are always derived from the root `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub method: Method,
    /// Iterations for the per-image PGD and MI-FGSM baselines.
    pub baseline_steps: usize,
    pub data: SynthConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub eval: EvalSection,
    pub ablation: AblationSection,
    pub theory: TheorySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            method: Method::Cmps,
            baseline_steps: 10,
            data: SynthConfig::default(),
            train: TrainConfig::default(),
            attack: AttackConfig::default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
            theory: TheorySection::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub method: Option<Method>,
    pub direction: Option<Direction>,
    pub epsilon: Option<f64>,
    pub gray_prob: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn with_overrides(mut self, o: &Overrides) -> Self {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(m) = o.method {
            self.method = m;
        }
        if let Some(d) = o.direction {
            self.eval.directions = vec![d];
        }
        if let Some(e) = o.epsilon {
            self.attack.epsilon = e;
        }
        if let Some(p) = o.gray_prob {
            self.attack.gray_prob = p;
        }
        self.resolved()
    }

    /// Copy with every stage seed derived from the root seed.
    pub fn resolved(mut self) -> Self {
        self.data.seed = derive_seed(self.seed, "data");
        self.train.seed = derive_seed(self.seed, "train");
        self.attack.seed = derive_seed(self.seed, "attack");
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.attack.validate()?;
        if self.eval.directions.is_empty() {
            return Err(Error::Config("eval.directions must not be empty".into()));
        }
        if self.baseline_steps == 0 {
            return Err(Error::Config("baseline_steps must be at least 1".into()));
        }
        if self.theory.trials == 0 || self.theory.dim == 0 {
            return Err(Error::Config(
                "theory trials and dim must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Hash of everything that influences results. The output directory is
    /// excluded so reruns elsewhere produce byte-identical files.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone().resolved();
        c.output_dir = PathBuf::new();
        crate::blob::fingerprint(serde_json::to_string(&c).unwrap_or_default().as_bytes())
    }

    pub fn train_data_config(&self) -> SynthConfig {
        SynthConfig {
            seed: derive_seed(self.seed, "data"),
            ..self.data.clone()
        }
    }

    pub fn test_data_config(&self) -> SynthConfig {
        SynthConfig {
            seed: derive_seed(self.seed, "data-test"),
            ..self.data.clone()
        }
    }

    pub fn train_config(&self, victim: Victim) -> TrainConfig {
        let label = match victim {
            Victim::A => "train",
            Victim::B => "train-b",
        };
        TrainConfig {
            seed: derive_seed(self.seed, label),
            ..self.train.clone()
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            seed: derive_seed(self.seed, "attack"),
            ..self.attack.clone()
        }
    }

    pub fn layout(&self) -> Layout {
        Layout {
            root: self.output_dir.clone(),
        }
    }
}

/// File names inside the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn train_dataset(&self) -> PathBuf {
        self.root.join("train.json")
    }
    pub fn test_dataset(&self) -> PathBuf {
        self.root.join("test.json")
    }
    pub fn checkpoint(&self, victim: Victim) -> PathBuf {
        match victim {
            Victim::A => self.root.join("model.ckpt"),
            Victim::B => self.root.join("model_b.ckpt"),
        }
    }
    pub fn centroids(&self) -> PathBuf {
        self.root.join("centroids.bin")
    }
    pub fn perturbation(&self, m: Method) -> PathBuf {
        self.root.join(format!("eta_{}.bin", m.tag()))
    }
    pub fn attack_report(&self, m: Method) -> PathBuf {
        self.root.join(format!("attack_{}.csv", m.tag()))
    }
    pub fn attack_samples(&self, m: Method) -> PathBuf {
        self.root.join(format!("attack_{}_samples.csv", m.tag()))
    }
    pub fn eval_report(&self, label: &str) -> PathBuf {
        self.root.join(format!("eval_{label}.csv"))
    }
    pub fn transfer_report(&self) -> PathBuf {
        self.root.join("transfer.csv")
    }
    pub fn ablation_report(&self, axis: AblationAxis) -> PathBuf {
        self.root.join(format!("ablate_{}.csv", axis.tag()))
    }
    pub fn theory_report(&self) -> PathBuf {
        self.root.join("theory.csv")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn shape_of(ds: &Dataset) -> String {
    let (c, h, w) = ds.image_shape;
    format!("{c}x{h}x{w}")
}

/// The model must accept the dataset's images.
pub fn check_model_matches(p: &EmbedderParams, ds: &Dataset) -> Result<()> {
    if p.input_shape != ds.image_shape {
        let (c, h, w) = p.input_shape;
        return Err(Error::Fingerprint {
            what: format!(
                "model input shape (model {}, dataset {})",
                p.fingerprint(),
                ds.fingerprint()
            ),
            expected: shape_of(ds),
            found: format!("{c}x{h}x{w}"),
        });
    }
    Ok(())
}

/// The perturbation must have the dataset's image shape.
pub fn check_perturbation_matches(
    pert: &Perturbation,
    header: &PerturbationHeader,
    ds: &Dataset,
) -> Result<()> {
    if pert.eta.shape() != ds.image_shape {
        let [c, h, w] = header.shape;
        return Err(Error::Fingerprint {
            what: format!(
                "perturbation shape (learned on dataset {}, evaluating dataset {})",
                header.dataset_fingerprint,
                ds.fingerprint()
            ),
            expected: shape_of(ds),
            found: format!("{c}x{h}x{w}"),
        });
    }
    Ok(())
}

/// Writes the training and held-out test datasets.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let layout = cfg.layout();
    ensure_dir(&layout.root)?;
    let hash = cfg.config_hash();
    let train_ds = generate_dataset(&cfg.train_data_config())?;
    let test_ds = generate_dataset(&cfg.test_data_config())?;
    save_dataset(&train_ds, &hash, &layout.train_dataset())?;
    save_dataset(&test_ds, &hash, &layout.test_dataset())?;
    log::info!(
        "datasets written: train {} ({} records), test {} ({} records)",
        train_ds.fingerprint(),
        train_ds.records.len(),
        test_ds.fingerprint(),
        test_ds.records.len()
    );
    Ok((layout.train_dataset(), layout.test_dataset()))
}

/// Trains a victim on `dataset` (default: the training set).
pub fn train_victim(
    cfg: &ExperimentConfig,
    dataset: Option<&Path>,
    victim: Victim,
) -> Result<PathBuf> {
    cfg.validate()?;
    let layout = cfg.layout();
    ensure_dir(&layout.root)?;
    let ds_path = dataset.map_or_else(|| layout.train_dataset(), Path::to_path_buf);
    let ds = load_dataset(&ds_path)?;
    let params = train(&ds, &cfg.train_config(victim))?;
    let out = layout.checkpoint(victim);
    save_checkpoint(&params, &cfg.config_hash(), &out)?;
    log::info!("victim {victim:?} trained: {}", params.fingerprint());
    Ok(out)
}

fn load_model_for(checkpoint: &Path, ds: &Dataset) -> Result<EmbedderParams> {
    let p = load_checkpoint(checkpoint)?;
    check_model_matches(&p, ds)?;
    Ok(p)
}

/// Computes and caches the centroid table of `(checkpoint, dataset)`.
pub fn centroids(cfg: &ExperimentConfig, checkpoint: &Path, dataset: &Path) -> Result<PathBuf> {
    let layout = cfg.layout();
    ensure_dir(&layout.root)?;
    let ds = load_dataset(dataset)?;
    let p = load_model_for(checkpoint, &ds)?;
    let t = compute_centroids(&p, &ds)?;
    let out = layout.centroids();
    save_centroids(&t, &cfg.config_hash(), &out)?;
    Ok(out)
}

fn table_for(p: &EmbedderParams, ds: &Dataset, cache: Option<&Path>) -> Result<CentroidTable> {
    match cache {
        Some(path) => load_centroids(path, &p.fingerprint(), &ds.fingerprint()),
        None => compute_centroids(p, ds),
    }
}

/// Learns a universal perturbation in memory.
pub fn learn_universal(
    method: Method,
    p: &EmbedderParams,
    ds: &Dataset,
    t: &CentroidTable,
    acfg: &AttackConfig,
) -> Result<Perturbation> {
    match method {
        Method::Cmps => cmps_learn(p, ds, t, acfg),
        Method::Stepwise => stepwise_uap(p, ds, t, acfg),
        other => Err(Error::Argument(format!(
            "{} is a per-image attack, not a universal one",
            other.tag()
        ))),
    }
}

/// Applies a per-image baseline to every record of `records`.
pub fn attack_per_image(
    method: Method,
    p: &EmbedderParams,
    records: &[ImageRecord],
    t: &CentroidTable,
    acfg: &AttackConfig,
    steps: usize,
) -> Result<Vec<ImageRecord>> {
    records
        .par_iter()
        .map(|r| match method {
            Method::Fgsm => fgsm(p, r, t, acfg),
            Method::Pgd => pgd(p, r, t, acfg, steps),
            Method::Mfgsm => mfgsm(p, r, t, acfg, steps),
            other => Err(Error::Argument(format!(
                "{} is a universal attack, not a per-image one",
                other.tag()
            ))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub index: usize,
    pub identity_id: u32,
    pub direction: String,
    pub clean_loss: f64,
    pub adversarial_loss: f64,
    pub linf: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub enum AttackOutput {
    /// Path of the perturbation file.
    Universal(PathBuf),
    /// Report rows and per-sample metrics files.
    PerImage { report: PathBuf, samples: PathBuf },
}

/// Universal methods learn on `dataset` (default: the training set) and
/// write a perturbation file. Per-image methods attack the queries of
/// `dataset` (default: the test set) with centroids from that same dataset
/// and write a report plus per-sample metrics.
pub fn attack(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    dataset: Option<&Path>,
    centroid_cache: Option<&Path>,
) -> Result<AttackOutput> {
    cfg.validate()?;
    let layout = cfg.layout();
    ensure_dir(&layout.root)?;
    let hash = cfg.config_hash();
    let acfg = cfg.attack_config();
    let method = cfg.method;

    if method.is_universal() {
        let ds_path = dataset.map_or_else(|| layout.train_dataset(), Path::to_path_buf);
        let ds = load_dataset(&ds_path)?;
        let p = load_model_for(checkpoint, &ds)?;
        let t = table_for(&p, &ds, centroid_cache)?;
        let pert = learn_universal(method, &p, &ds, &t, &acfg)?;
        let (c, h, w) = ds.image_shape;
        let header = PerturbationHeader {
            method: method.tag().into(),
            epsilon: acfg.epsilon,
            shape: [c, h, w],
            clip_to_pixel_range: acfg.clip_to_pixel_range,
            config_hash: hash,
            seed: cfg.seed,
            model_fingerprint: p.fingerprint(),
            dataset_fingerprint: ds.fingerprint(),
        };
        let out = layout.perturbation(method);
        save_perturbation(&pert, &header, &out)?;
        log::info!(
            "{} perturbation written: {}",
            method.tag(),
            pert.fingerprint()
        );
        return Ok(AttackOutput::Universal(out));
    }

    let ds_path = dataset.map_or_else(|| layout.test_dataset(), Path::to_path_buf);
    let ds = load_dataset(&ds_path)?;
    let p = load_model_for(checkpoint, &ds)?;
    let t = table_for(&p, &ds, centroid_cache)?;
    let mut rows = Vec::new();
    let mut samples = Vec::new();
    for &d in &cfg.eval.directions {
        let (queries, gallery) = split_query_gallery(&ds, d)?;
        let adv = attack_per_image(method, &p, &queries, &t, &acfg, cfg.baseline_steps)?;
        let per_sample: Vec<(f64, f64)> = queries
            .par_iter()
            .zip(&adv)
            .map(|(q, a)| {
                Ok((
                    sample_attack_loss(&p, q, q, &t, &acfg)?,
                    sample_attack_loss(&p, q, a, &t, &acfg)?,
                ))
            })
            .collect::<Result<_>>()?;
        for (i, ((q, a), (clean_loss, adversarial_loss))) in
            queries.iter().zip(&adv).zip(per_sample).enumerate()
        {
            samples.push(SampleRow {
                index: i,
                identity_id: q.identity_id,
                direction: d.tag().into(),
                clean_loss,
                adversarial_loss,
                linf: a.pixels.sub(&q.pixels)?.linf(),
                config_hash: hash.clone(),
            });
        }
        let report = evaluate(&p, &adv, &gallery, None)?;
        rows.push(ReportRow::from_report(
            method.tag(),
            &report,
            acfg.epsilon,
            cfg.seed,
            &hash,
        ));
    }
    let report = layout.attack_report(method);
    write_report_csv(&rows, &report)?;
    let samples_path = layout.attack_samples(method);
    write_csv(&samples, &samples_path)?;
    Ok(AttackOutput::PerImage {
        report,
        samples: samples_path,
    })
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Argument(format!("cannot serialize row: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Argument(format!("csv buffer: {e}")))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn eval_rows(
    p: &EmbedderParams,
    ds: &Dataset,
    directions: &[Direction],
    pert: Option<&Perturbation>,
    method: &str,
    seed: u64,
    hash: &str,
) -> Result<Vec<ReportRow>> {
    directions
        .iter()
        .map(|&d| {
            let (q, g) = split_query_gallery(ds, d)?;
            let r: EvalReport = evaluate(p, &q, &g, pert)?;
            Ok(ReportRow::from_report(
                method,
                &r,
                pert.map_or(0.0, |x| x.epsilon),
                seed,
                hash,
            ))
        })
        .collect()
}

/// Evaluates `checkpoint` on `dataset` (default: the test set), clean or
/// with a perturbation file applied to the queries.
pub fn eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    dataset: Option<&Path>,
    perturbation: Option<&Path>,
) -> Result<(PathBuf, Vec<ReportRow>)> {
    cfg.validate()?;
    let layout = cfg.layout();
    ensure_dir(&layout.root)?;
    let ds_path = dataset.map_or_else(|| layout.test_dataset(), Path::to_path_buf);
    let ds = load_dataset(&ds_path)?;
    let p = load_model_for(checkpoint, &ds)?;
    let loaded = perturbation.map(load_perturbation).transpose()?;
    if let Some((pert, header)) = &loaded {
        check_perturbation_matches(pert, header, &ds)?;
        if header.model_fingerprint != p.fingerprint() {
            log::warn!(
                "perturbation was learned against model {}, evaluating model {} (use transfer for cross-model runs)",
                header.model_fingerprint,
                p.fingerprint()
            );
        }
    }
    let method = loaded.as_ref().map_or("clean", |(_, h)| h.method.as_str());
    let rows = eval_rows(
        &p,
        &ds,
        &cfg.eval.directions,
        loaded.as_ref().map(|(x, _)| x),
        method,
        cfg.seed,
        &cfg.config_hash(),
    )?;
    let label = format!(
        "{method}_{}",
        cfg.eval
            .directions
            .iter()
            .map(|d| d.tag())
            .collect::<Vec<_>>()
            .join("_")
    );
    let out = layout.eval_report(&label);
    write_report_csv(&rows, &out)?;
    Ok((out, rows))
}

/// Clean and attacked rows of victim `checkpoint_b` under a perturbation
/// learned against another model.
pub fn transfer(
    cfg: &ExperimentConfig,
    perturbation: &Path,
    checkpoint_b: &Path,
    dataset: Option<&Path>,
) -> Result<(PathBuf, Vec<ReportRow>)> {
    cfg.validate()?;
    let layout = cfg.layout();
    ensure_dir(&layout.root)?;
    let ds_path = dataset.map_or_else(|| layout.test_dataset(), Path::to_path_buf);
    let ds = load_dataset(&ds_path)?;
    let pb = load_model_for(checkpoint_b, &ds)?;
    let (pert, header) = load_perturbation(perturbation)?;
    check_perturbation_matches(&pert, &header, &ds)?;
    let hash = cfg.config_hash();
    let mut rows = eval_rows(
        &pb,
        &ds,
        &cfg.eval.directions,
        None,
        "clean-target",
        cfg.seed,
        &hash,
    )?;
    rows.extend(eval_rows(
        &pb,
        &ds,
        &cfg.eval.directions,
        Some(&pert),
        &format!("{}-transfer", header.method),
        cfg.seed,
        &hash,
    )?);
    let out = layout.transfer_report();
    write_report_csv(&rows, &out)?;
    Ok((out, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: f64,
    pub direction: String,
    pub rank1: f64,
    pub rank10: f64,
    pub rank20: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// Rank/mAP of the configured universal method over one hyper-parameter
/// axis, learned on the training set and measured on the test set.
pub fn ablation_rows(
    cfg: &ExperimentConfig,
    axis: AblationAxis,
    p: &EmbedderParams,
    train_ds: &Dataset,
    test_ds: &Dataset,
    t: &CentroidTable,
) -> Result<Vec<AblationRow>> {
    let method = if cfg.method.is_universal() {
        cfg.method
    } else {
        Method::Cmps
    };
    let values = match axis {
        AblationAxis::Epsilon => &cfg.ablation.epsilons,
        AblationAxis::GrayProb => &cfg.ablation.gray_probs,
    };
    let hash = cfg.config_hash();
    let mut rows = Vec::new();
    for &v in values {
        let mut acfg = cfg.attack_config();
        match axis {
            AblationAxis::Epsilon => acfg.epsilon = v,
            AblationAxis::GrayProb => acfg.gray_prob = v,
        }
        let pert = learn_universal(method, p, train_ds, t, &acfg)?;
        for &d in &cfg.eval.directions {
            let (q, g) = split_query_gallery(test_ds, d)?;
            let r = evaluate(p, &q, &g, Some(&pert))?;
            rows.push(AblationRow {
                axis: axis.tag().into(),
                value: v,
                direction: d.tag().into(),
                rank1: r.rank1,
                rank10: r.rank10,
                rank20: r.rank20,
                map: r.map,
                seed: cfg.seed,
                config_hash: hash.clone(),
            });
        }
    }
    Ok(rows)
}

pub fn ablate(
    cfg: &ExperimentConfig,
    axis: AblationAxis,
    checkpoint: &Path,
    train_dataset: Option<&Path>,
    test_dataset: Option<&Path>,
) -> Result<(PathBuf, Vec<AblationRow>)> {
    cfg.validate()?;
    let layout = cfg.layout();
    ensure_dir(&layout.root)?;
    let train_ds =
        load_dataset(&train_dataset.map_or_else(|| layout.train_dataset(), Path::to_path_buf))?;
    let test_ds =
        load_dataset(&test_dataset.map_or_else(|| layout.test_dataset(), Path::to_path_buf))?;
    let p = load_model_for(checkpoint, &train_ds)?;
    check_model_matches(&p, &test_ds)?;
    let t = compute_centroids(&p, &train_ds)?;
    let rows = ablation_rows(cfg, axis, &p, &train_ds, &test_ds, &t)?;
    let out = layout.ablation_report(axis);
    write_csv(&rows, &out)?;
    Ok((out, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub trials: usize,
    pub dim: usize,
    pub satisfied: usize,
    pub converged: usize,
    pub fraction: f64,
    pub min_margin: f64,
    pub median_margin: f64,
    pub seed: u64,
    pub config_hash: String,
}

pub fn theory_check(cfg: &ExperimentConfig) -> Result<(PathBuf, SuperiorityReport)> {
    cfg.validate()?;
    let layout = cfg.layout();
    ensure_dir(&layout.root)?;
    let th = &cfg.theory;
    let seed = derive_seed(cfg.seed, "theory");
    let report = verify_superiority(th.trials, th.dim, th.steps, th.learning_rate, seed)?;
    let row = TheoryRow {
        trials: report.trials,
        dim: report.dim,
        satisfied: report.satisfied,
        converged: report.converged,
        fraction: report.fraction,
        min_margin: report.min_margin,
        median_margin: report.median_margin,
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
    };
    let out = layout.theory_report();
    write_csv(&[row], &out)?;
    Ok((out, report))
}

/// Every stage in order: datasets, victim, centroids, CMPS and stepwise
/// perturbations, then clean / CMPS / stepwise rows for each direction in
/// `report.csv` and `report.json`.
pub fn full_pipeline(cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    let layout = cfg.layout();
    let (train_path, test_path) = gen_data(cfg)?;
    let ckpt = train_victim(cfg, Some(&train_path), Victim::A)?;
    let cache = centroids(cfg, &ckpt, &train_path)?;

    let mut rows = eval(cfg, &ckpt, Some(&test_path), None)?.1;
    for method in [Method::Cmps, Method::Stepwise] {
        let stage = ExperimentConfig {
            method,
            ..cfg.clone()
        };
        let AttackOutput::Universal(eta) = attack(&stage, &ckpt, Some(&train_path), Some(&cache))?
        else {
            unreachable!("universal methods write a perturbation file");
        };
        rows.extend(eval(cfg, &ckpt, Some(&test_path), Some(&eta))?.1);
    }
    write_report_csv(&rows, &layout.report_csv())?;
    write_report_json(&rows, &layout.report_json())?;
    Ok(rows)
}
