//! Cross-modality retrieval metrics: ranking, CMC (rank-k) and mAP.
//!
//! Ground truth is identity equality; camera ids are ignored. Average
//! precision of a query is the mean over its true matches of `i / r_i`, where
//! `r_i` is the 1-based rank of the `i`-th match. Ties in distance are broken
//! by gallery index.

mod brute;
mod report;

pub use brute::{brute_force_metrics, brute_force_report};
pub use report::{read_report_csv, write_report_csv, write_report_json, ReportRow};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{apply, Perturbation};
use crate::embedder::{forward, EmbedderParams};
use crate::error::{Error, Result};
use crate::synthdata::{Direction, ImageRecord, Modality};
use crate::tensor::{l2_distance, FeatureVector};

pub const CMC_RANKS: [usize; 3] = [1, 10, 20];

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub query_identity: u32,
    /// Gallery indices, nearest first.
    pub order: Vec<usize>,
    /// Distances aligned with `order`.
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub direction: Direction,
    /// Percentages in `[0, 100]`.
    pub rank1: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub map: f64,
    pub num_queries: usize,
    pub num_gallery: usize,
    /// Perturbation fingerprint, or `"clean"`.
    pub perturbation: String,
}

/// Metrics over precomputed features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub rank1: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub map: f64,
}

pub fn rank_gallery(
    p: &EmbedderParams,
    query: &ImageRecord,
    gallery: &[ImageRecord],
) -> Result<RankingResult> {
    if gallery.is_empty() {
        return Err(Error::Argument(
            "cannot rank against an empty gallery".into(),
        ));
    }
    let q = forward(p, &query.pixels)?;
    let g: Vec<FeatureVector> = gallery
        .iter()
        .map(|r| forward(p, &r.pixels))
        .collect::<Result<_>>()?;
    Ok(rank_features(query.identity_id, &q, &g))
}

fn rank_features(
    query_identity: u32,
    q: &FeatureVector,
    gallery: &[FeatureVector],
) -> RankingResult {
    let dist: Vec<f64> = gallery.iter().map(|g| l2_distance(&q.0, &g.0)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    // Stable sort keeps equal distances in gallery order.
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
    let distances = order.iter().map(|&i| dist[i]).collect();
    RankingResult {
        query_identity,
        order,
        distances,
    }
}

/// CMC hits (for ranks 1, 10, 20) and AP of one ranking.
fn score(ranking: &RankingResult, gallery_ids: &[u32]) -> ([bool; 3], f64) {
    let mut first = None;
    let mut found = 0usize;
    let mut ap = 0.0;
    for (pos, &g) in ranking.order.iter().enumerate() {
        if gallery_ids[g] == ranking.query_identity {
            found += 1;
            first.get_or_insert(pos);
            ap += found as f64 / (pos + 1) as f64;
        }
    }
    let hits = CMC_RANKS.map(|k| first.is_some_and(|f| f < k));
    (hits, if found > 0 { ap / found as f64 } else { 0.0 })
}

fn check_coverage(query_ids: &[u32], gallery_ids: &[u32]) -> Result<()> {
    if gallery_ids.is_empty() {
        return Err(Error::Argument(
            "cannot evaluate against an empty gallery".into(),
        ));
    }
    if query_ids.is_empty() {
        return Err(Error::Argument("no queries to evaluate".into()));
    }
    if let Some(id) = query_ids.iter().find(|id| !gallery_ids.contains(id)) {
        return Err(Error::Evaluation(format!(
            "query identity {id} has no match in the gallery"
        )));
    }
    Ok(())
}

/// Rank-k and mAP (percentages) from features and identity labels.
pub fn metrics_from_features(
    queries: &[FeatureVector],
    query_ids: &[u32],
    gallery: &[FeatureVector],
    gallery_ids: &[u32],
) -> Result<Metrics> {
    check_coverage(query_ids, gallery_ids)?;
    let per_query: Vec<([bool; 3], f64)> = queries
        .par_iter()
        .zip(query_ids.par_iter())
        .map(|(q, &id)| score(&rank_features(id, q, gallery), gallery_ids))
        .collect();
    let mut hits = [0usize; 3];
    let mut ap_sum = 0.0;
    for (h, ap) in &per_query {
        for k in 0..3 {
            hits[k] += usize::from(h[k]);
        }
        ap_sum += ap;
    }
    let n = queries.len() as f64;
    Ok(Metrics {
        rank1: 100.0 * hits[0] as f64 / n,
        rank10: 100.0 * hits[1] as f64 / n,
        rank20: 100.0 * hits[2] as f64 / n,
        map: 100.0 * ap_sum / n,
    })
}

pub(crate) fn direction_of(queries: &[ImageRecord]) -> Result<Direction> {
    match queries.first().map(|r| r.modality) {
        Some(Modality::Infrared) => Ok(Direction::InfraredToVisible),
        Some(_) => Ok(Direction::VisibleToInfrared),
        None => Err(Error::Argument("no queries to evaluate".into())),
    }
}

/// Embeds queries (after adding `pert`, if any) and gallery, then scores.
/// The gallery is never perturbed.
pub(crate) fn embed_all(
    p: &EmbedderParams,
    queries: &[ImageRecord],
    gallery: &[ImageRecord],
    pert: Option<&Perturbation>,
) -> Result<(Vec<FeatureVector>, Vec<FeatureVector>)> {
    let q = queries
        .par_iter()
        .map(|r| match pert {
            Some(pt) => forward(p, &apply(pt, r)?.pixels),
            None => forward(p, &r.pixels),
        })
        .collect::<Result<Vec<_>>>()?;
    let g = gallery
        .par_iter()
        .map(|r| forward(p, &r.pixels))
        .collect::<Result<Vec<_>>>()?;
    Ok((q, g))
}

pub fn evaluate(
    p: &EmbedderParams,
    queries: &[ImageRecord],
    gallery: &[ImageRecord],
    pert: Option<&Perturbation>,
) -> Result<EvalReport> {
    let direction = direction_of(queries)?;
    let qids: Vec<u32> = queries.iter().map(|r| r.identity_id).collect();
    let gids: Vec<u32> = gallery.iter().map(|r| r.identity_id).collect();
    check_coverage(&qids, &gids)?;
    let (qf, gf) = embed_all(p, queries, gallery, pert)?;
    let m = metrics_from_features(&qf, &qids, &gf, &gids)?;
    Ok(EvalReport {
        direction,
        rank1: m.rank1,
        rank10: m.rank10,
        rank20: m.rank20,
        map: m.map,
        num_queries: queries.len(),
        num_gallery: gallery.len(),
        perturbation: pert.map_or_else(|| "clean".to_string(), Perturbation::fingerprint),
    })
}

/// Clean-vs-attacked differences; positive drops mean the attack hurt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub direction: Direction,
    pub rank1_drop: f64,
    pub rank10_drop: f64,
    pub rank20_drop: f64,
    pub map_drop: f64,
    /// `rank1_drop / clean rank1`, zero when the clean rank-1 is zero.
    pub rank1_relative_drop: f64,
    pub map_relative_drop: f64,
}

pub fn compare(clean: &EvalReport, attacked: &EvalReport) -> Result<DeltaReport> {
    if clean.direction != attacked.direction {
        return Err(Error::Evaluation(format!(
            "cannot compare {} report with {} report",
            clean.direction.tag(),
            attacked.direction.tag()
        )));
    }
    if clean.num_gallery != attacked.num_gallery || clean.num_queries != attacked.num_queries {
        return Err(Error::Evaluation(
            "reports use different query/gallery sizes".into(),
        ));
    }
    let rel = |drop: f64, base: f64| if base > 0.0 { drop / base } else { 0.0 };
    let rank1_drop = clean.rank1 - attacked.rank1;
    let map_drop = clean.map - attacked.map;
    Ok(DeltaReport {
        direction: clean.direction,
        rank1_drop,
        rank10_drop: clean.rank10 - attacked.rank10,
        rank20_drop: clean.rank20 - attacked.rank20,
        map_drop,
        rank1_relative_drop: rel(rank1_drop, clean.rank1),
        map_relative_drop: rel(map_drop, clean.map),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::synthdata::{generate_dataset, split_query_gallery, SynthConfig};
    use crate::tensor::PixelTensor;

    fn f(x: f64) -> FeatureVector {
        FeatureVector(vec![x])
    }

    #[test]
    fn ap_fixtures() {
        // One true match ranked first.
        let m =
            metrics_from_features(&[f(0.0)], &[1], &[f(0.0), f(1.0), f(2.0)], &[1, 2, 3]).unwrap();
        assert_eq!((m.rank1, m.map), (100.0, 100.0));

        // One true match ranked second of two.
        let m = metrics_from_features(&[f(0.0)], &[1], &[f(0.5), f(0.1)], &[1, 2]).unwrap();
        assert_eq!(m.rank1, 0.0);
        assert!((m.map - 50.0).abs() < 1e-12);

        // True matches at ranks 1 and 3.
        let m = metrics_from_features(
            &[f(0.0)],
            &[1],
            &[f(0.1), f(0.2), f(0.3), f(0.4)],
            &[1, 2, 1, 3],
        )
        .unwrap();
        assert!((m.map / 100.0 - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ranking_orders_by_distance_with_stable_ties() {
        let r = rank_features(0, &f(0.0), &[f(0.2), f(0.1), f(0.3)]);
        assert_eq!(r.order, vec![1, 0, 2]);
        let r = rank_features(0, &f(0.0), &[f(0.5), f(-0.5), f(0.5)]);
        assert_eq!(r.order, vec![0, 1, 2]);
    }

    #[test]
    fn missing_identity_and_empty_gallery() {
        assert!(matches!(
            metrics_from_features(&[f(0.0)], &[9], &[f(0.0)], &[1]),
            Err(Error::Evaluation(_))
        ));
        assert!(matches!(
            metrics_from_features(&[f(0.0)], &[9], &[], &[]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn perfect_retrieval_gives_full_map() {
        let q: Vec<_> = (0..5).map(|i| f(i as f64 * 10.0)).collect();
        let qids: Vec<u32> = (0..5).collect();
        let mut g = Vec::new();
        let mut gids = Vec::new();
        for i in 0..5u32 {
            for k in 0..3 {
                g.push(f(i as f64 * 10.0 + k as f64 * 0.1));
                gids.push(i);
            }
        }
        let m = metrics_from_features(&q, &qids, &g, &gids).unwrap();
        assert_eq!((m.rank1, m.map), (100.0, 100.0));
    }

    fn model_and_split() -> (EmbedderParams, Vec<ImageRecord>, Vec<ImageRecord>) {
        let ds = generate_dataset(&SynthConfig {
            num_identities: 6,
            images_per_identity_per_modality: 3,
            height: 6,
            width: 4,
            seed: 12,
            ..SynthConfig::default()
        })
        .unwrap();
        let p = EmbedderParams::init(ds.image_shape, &[16, 8], 3).unwrap();
        let (q, g) = split_query_gallery(&ds, Direction::VisibleToInfrared).unwrap();
        (p, q, g)
    }

    #[test]
    fn query_in_gallery_ranks_first() {
        let (p, q, mut g) = model_and_split();
        g.insert(3, q[4].clone());
        let r = rank_gallery(&p, &q[4], &g).unwrap();
        assert_eq!(r.order[0], 3);
        assert_eq!(r.distances[0], 0.0);
        assert!(rank_gallery(&p, &q[0], &[]).is_err());
    }

    #[test]
    fn permuting_gallery_keeps_distance_sequence() {
        let (p, q, g) = model_and_split();
        let r = rank_gallery(&p, &q[0], &g).unwrap();
        let mut perm: Vec<usize> = (0..g.len()).collect();
        SeededRng::new(4).shuffle(&mut perm);
        let shuffled: Vec<_> = perm.iter().map(|&i| g[i].clone()).collect();
        let s = rank_gallery(&p, &q[0], &shuffled).unwrap();
        assert_eq!(r.distances, s.distances);
    }

    #[test]
    fn zero_perturbation_reproduces_clean_and_cmc_is_monotone() {
        let (p, q, g) = model_and_split();
        let clean = evaluate(&p, &q, &g, None).unwrap();
        let zero = Perturbation::zeros(q[0].pixels.shape(), 8.0);
        let z = evaluate(&p, &q, &g, Some(&zero)).unwrap();
        assert_eq!(
            (clean.rank1, clean.rank10, clean.rank20, clean.map),
            (z.rank1, z.rank10, z.rank20, z.map)
        );
        assert!(clean.rank1 <= clean.rank10 && clean.rank10 <= clean.rank20);
        assert_eq!(clean.perturbation, "clean");
        assert_eq!(clean.direction, Direction::VisibleToInfrared);
    }

    #[test]
    fn report_is_independent_of_query_order() {
        let (p, mut q, g) = model_and_split();
        let a = evaluate(&p, &q, &g, None).unwrap();
        SeededRng::new(9).shuffle(&mut q);
        let b = evaluate(&p, &q, &g, None).unwrap();
        assert_eq!((a.rank1, a.rank10, a.rank20), (b.rank1, b.rank10, b.rank20));
        assert!((a.map - b.map).abs() < 1e-9);
    }

    #[test]
    fn compare_cases() {
        let (p, q, g) = model_and_split();
        let clean = evaluate(&p, &q, &g, None).unwrap();
        let d = compare(&clean, &clean).unwrap();
        assert_eq!(
            (d.rank1_drop, d.map_drop, d.rank1_relative_drop),
            (0.0, 0.0, 0.0)
        );

        let worse = EvalReport {
            rank1: clean.rank1 - 10.0,
            ..clean.clone()
        };
        assert!(compare(&clean, &worse).unwrap().rank1_drop > 0.0);

        let other = EvalReport {
            direction: Direction::InfraredToVisible,
            ..clean.clone()
        };
        assert!(compare(&clean, &other).is_err());
    }

    #[test]
    fn perturbation_touches_queries_only() {
        let (p, q, g) = model_and_split();
        let eta = PixelTensor::filled(q[0].pixels.shape(), 8.0);
        let pert = Perturbation::new(eta, 8.0, true).unwrap();
        let (qa, ga) = embed_all(&p, &q, &g, Some(&pert)).unwrap();
        let (qc, gc) = embed_all(&p, &q, &g, None).unwrap();
        assert_eq!(ga, gc);
        assert_ne!(qa, qc);
    }
}
