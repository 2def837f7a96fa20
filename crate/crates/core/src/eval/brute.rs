//! Naive reference implementation of the retrieval metrics. Shares no
//! ranking or scoring code with the main path; used to cross-check it.

use super::{direction_of, embed_all, EvalReport, Metrics};
use crate::attack::Perturbation;
use crate::embedder::EmbedderParams;
use crate::error::{Error, Result};
use crate::synthdata::ImageRecord;
use crate::tensor::FeatureVector;

fn naive_distance(a: &FeatureVector, b: &FeatureVector) -> f64 {
    let mut s = 0.0f64;
    let mut i = 0;
    while i < a.0.len() {
        s += (a.0[i] - b.0[i]) * (a.0[i] - b.0[i]);
        i += 1;
    }
    s.sqrt()
}

pub fn brute_force_metrics(
    queries: &[FeatureVector],
    query_ids: &[u32],
    gallery: &[FeatureVector],
    gallery_ids: &[u32],
) -> Result<Metrics> {
    if gallery.is_empty() {
        return Err(Error::Argument(
            "cannot evaluate against an empty gallery".into(),
        ));
    }
    if queries.is_empty() {
        return Err(Error::Argument("no queries to evaluate".into()));
    }
    for &id in query_ids {
        let mut present = false;
        for &g in gallery_ids {
            present |= g == id;
        }
        if !present {
            return Err(Error::Evaluation(format!(
                "query identity {id} has no match in the gallery"
            )));
        }
    }

    let mut r1 = 0u64;
    let mut r10 = 0u64;
    let mut r20 = 0u64;
    let mut ap_total = 0.0f64;
    for qi in 0..queries.len() {
        let d: Vec<f64> = gallery
            .iter()
            .map(|g| naive_distance(&queries[qi], g))
            .collect();
        // 1-based rank of every gallery item: items strictly closer, or
        // equally close with a smaller index, come first.
        let mut rank = vec![0usize; gallery.len()];
        for j in 0..gallery.len() {
            let mut ahead = 0;
            for k in 0..gallery.len() {
                if d[k] < d[j] || (d[k] == d[j] && k < j) {
                    ahead += 1;
                }
            }
            rank[j] = ahead + 1;
        }
        let mut match_ranks: Vec<usize> = (0..gallery.len())
            .filter(|&j| gallery_ids[j] == query_ids[qi])
            .map(|j| rank[j])
            .collect();
        match_ranks.sort_unstable();
        let best = match_ranks[0];
        r1 += u64::from(best <= 1);
        r10 += u64::from(best <= 10);
        r20 += u64::from(best <= 20);
        let mut ap = 0.0;
        for (i, &r) in match_ranks.iter().enumerate() {
            ap += (i + 1) as f64 / r as f64;
        }
        ap_total += ap / match_ranks.len() as f64;
    }
    let n = queries.len() as f64;
    Ok(Metrics {
        rank1: 100.0 * r1 as f64 / n,
        rank10: 100.0 * r10 as f64 / n,
        rank20: 100.0 * r20 as f64 / n,
        map: 100.0 * ap_total / n,
    })
}

/// Same contract as [`super::evaluate`].
pub fn brute_force_report(
    p: &EmbedderParams,
    queries: &[ImageRecord],
    gallery: &[ImageRecord],
    pert: Option<&Perturbation>,
) -> Result<EvalReport> {
    let direction = direction_of(queries)?;
    let qids: Vec<u32> = queries.iter().map(|r| r.identity_id).collect();
    let gids: Vec<u32> = gallery.iter().map(|r| r.identity_id).collect();
    if gallery.is_empty() {
        return Err(Error::Argument(
            "cannot evaluate against an empty gallery".into(),
        ));
    }
    if let Some(id) = qids.iter().find(|id| !gids.contains(id)) {
        return Err(Error::Evaluation(format!(
            "query identity {id} has no match in the gallery"
        )));
    }
    let (qf, gf) = embed_all(p, queries, gallery, pert)?;
    let m = brute_force_metrics(&qf, &qids, &gf, &gids)?;
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
