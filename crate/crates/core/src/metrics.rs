//! Centerline detection and topology metrics.
//!
//! Polylines are compared in meters after arc-length resampling. Detection
//! AP uses greedy matching in descending confidence with an all-point
//! precision envelope; topology AP ranks predicted edges whose endpoints
//! were both matched at the same Fréchet threshold.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::bezier::{dist3, Polyline};
use crate::error::{Error, Result};

pub const DEFAULT_RESAMPLE: usize = 11;
pub const FRECHET_THRESHOLDS: [f64; 3] = [1.0, 2.0, 3.0];
pub const CHAMFER_THRESHOLDS: [f64; 3] = [0.5, 1.0, 1.5];
/// Score shift threshold of the optional remapped topology scoring.
pub const V11M_THRESHOLD: f64 = 0.05;

fn check_pair(a: &Polyline, b: &Polyline) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Domain(
            "distance needs polylines with at least 2 points".into(),
        ));
    }
    Ok(())
}

/// Discrete Fréchet distance by dynamic programming over the coupling lattice.
pub fn frechet_distance(a: &Polyline, b: &Polyline) -> Result<f64> {
    check_pair(a, b)?;
    let (pa, pb) = (a.points(), b.points());
    let m = pb.len();
    let mut prev = vec![0.0f64; m];
    let mut cur = vec![0.0f64; m];
    for (i, p) in pa.iter().enumerate() {
        for (j, q) in pb.iter().enumerate() {
            let d = dist3(p, q);
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => cur[j - 1].max(d),
                (_, 0) => prev[0].max(d),
                _ => prev[j].min(prev[j - 1]).min(cur[j - 1]).max(d),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

fn mean_nearest(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    from.iter()
        .map(|p| to.iter().map(|q| dist3(p, q)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / from.len() as f64
}

/// Mean of the two directional mean nearest-point distances.
pub fn chamfer_distance(a: &Polyline, b: &Polyline) -> Result<f64> {
    check_pair(a, b)?;
    Ok(0.5 * (mean_nearest(a.points(), b.points()) + mean_nearest(b.points(), a.points())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DistanceKind {
    Frechet,
    Chamfer,
}

impl DistanceKind {
    pub fn distance(&self, a: &Polyline, b: &Polyline) -> Result<f64> {
        match self {
            DistanceKind::Frechet => frechet_distance(a, b),
            DistanceKind::Chamfer => chamfer_distance(a, b),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            DistanceKind::Frechet => "frechet",
            DistanceKind::Chamfer => "chamfer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPolyline {
    pub polyline: Polyline,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredEdge {
    pub from: usize,
    pub to: usize,
    pub score: f64,
}

/// Prediction indices sorted by descending score (stable on index).
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// All-point interpolated AP in percent from TP flags in ranked order.
pub fn average_precision(ranked_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if ranked_tp.is_empty() { 100.0 } else { 0.0 };
    }
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (k, &hit) in ranked_tp.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - last_recall) * p;
        last_recall = *r;
    }
    100.0 * ap
}

/// `dist[i][j]` between prediction `i` and GT `j`.
pub fn distance_matrix(
    preds: &[Polyline],
    gts: &[Polyline],
    kind: DistanceKind,
) -> Result<Vec<Vec<f64>>> {
    preds
        .iter()
        .map(|p| gts.iter().map(|g| kind.distance(p, g)).collect())
        .collect()
}

/// Greedy matching at one threshold. In descending score order each
/// prediction takes its nearest GT; it is a TP when that distance is within
/// the threshold and the GT is still free, otherwise a FP.
///
/// Returns the matched GT of every prediction (by original index).
pub fn greedy_match(dist: &[Vec<f64>], scores: &[f64], threshold: f64) -> Vec<Option<usize>> {
    let n_gt = dist.first().map_or(0, |r| r.len());
    let mut claimed = vec![false; n_gt];
    let mut out = vec![None; dist.len()];
    for i in ranking(scores) {
        let nearest = (0..n_gt).min_by(|&a, &b| dist[i][a].total_cmp(&dist[i][b]));
        if let Some(j) = nearest {
            if dist[i][j] <= threshold && !claimed[j] {
                claimed[j] = true;
                out[i] = Some(j);
            }
        }
    }
    out
}

fn ap_from_match(matches: &[Option<usize>], scores: &[f64], n_gt: usize) -> f64 {
    let tp: Vec<bool> = ranking(scores)
        .iter()
        .map(|&i| matches[i].is_some())
        .collect();
    average_precision(&tp, n_gt)
}

/// AP per threshold (percent).
pub fn detection_ap_per_threshold(
    preds: &[ScoredPolyline],
    gts: &[Polyline],
    kind: DistanceKind,
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    let polys: Vec<Polyline> = preds.iter().map(|p| p.polyline.clone()).collect();
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let dist = distance_matrix(&polys, gts, kind)?;
    Ok(thresholds
        .iter()
        .map(|&t| ap_from_match(&greedy_match(&dist, &scores, t), &scores, gts.len()))
        .collect())
}

/// Mean AP over the thresholds (percent).
pub fn detection_ap(
    preds: &[ScoredPolyline],
    gts: &[Polyline],
    kind: DistanceKind,
    thresholds: &[f64],
) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::Validation(
            "at least one threshold is required".into(),
        ));
    }
    let aps = detection_ap_per_threshold(preds, gts, kind, thresholds)?;
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Topology AP (percent) for one vertex matching.
///
/// Edges with score ≤ 0 are not predictions. A ranked edge is a TP when
/// both endpoints are matched and the mapped GT edge exists and is unclaimed.
pub fn topology_ap(
    pred_edges: &[ScoredEdge],
    gt_edges: &[(usize, usize)],
    vertex_match: &[Option<usize>],
) -> f64 {
    let gt: HashSet<(usize, usize)> = gt_edges.iter().copied().collect();
    let edges: Vec<&ScoredEdge> = pred_edges.iter().filter(|e| e.score > 0.0).collect();
    let scores: Vec<f64> = edges.iter().map(|e| e.score).collect();
    let mut claimed = HashSet::new();
    let tp: Vec<bool> = ranking(&scores)
        .into_iter()
        .map(|k| {
            let e = edges[k];
            let mapped = match (
                vertex_match.get(e.from).copied().flatten(),
                vertex_match.get(e.to).copied().flatten(),
            ) {
                (Some(a), Some(b)) => (a, b),
                _ => return false,
            };
            gt.contains(&mapped) && claimed.insert(mapped)
        })
        .collect();
    average_precision(&tp, gt.len())
}

/// Literal `P + 1·[P > 0.05]` score remap.
pub fn v11m_remap(score: f64) -> f64 {
    score + if score > V11M_THRESHOLD { 1.0 } else { 0.0 }
}

/// `100 · ⅓ · (det_l/100 + det_l_ch/100 + √(top_ll/100))`.
pub fn ols_l(det_l: f64, det_l_ch: f64, top_ll: f64) -> Result<f64> {
    for (name, v) in [("det_l", det_l), ("det_l_ch", det_l_ch), ("top_ll", top_ll)] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::Domain(format!("{name} = {v} is outside [0, 100]")));
        }
    }
    Ok(100.0 / 3.0 * (det_l / 100.0 + det_l_ch / 100.0 + (top_ll / 100.0).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub resample: usize,
    pub frechet_thresholds: Vec<f64>,
    pub chamfer_thresholds: Vec<f64>,
    pub v11m: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            resample: DEFAULT_RESAMPLE,
            frechet_thresholds: FRECHET_THRESHOLDS.to_vec(),
            chamfer_thresholds: CHAMFER_THRESHOLDS.to_vec(),
            v11m: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub det_l: f64,
    pub det_l_ch: f64,
    pub top_ll: f64,
    pub ols_l: f64,
    /// Keys like `frechet_1.0`, `chamfer_0.5`, `top_frechet_1.0`.
    pub per_threshold_ap: BTreeMap<String, f64>,
}

impl MetricReport {
    /// Aligned text table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("DET_l", self.det_l),
            ("DET_l_ch", self.det_l_ch),
            ("TOP_ll", self.top_ll),
            ("OLS_l", self.ols_l),
        ] {
            s.push_str(&format!("{k:<20} {v:>8.2}\n"));
        }
        for (k, v) in &self.per_threshold_ap {
            s.push_str(&format!("{k:<20} {v:>8.2}\n"));
        }
        s
    }
}

fn threshold_key(prefix: &str, t: f64) -> String {
    format!("{prefix}_{t:.1}")
}

/// Full centerline evaluation. Inputs are in meters.
pub fn evaluate(
    preds: &[ScoredPolyline],
    pred_edges: &[ScoredEdge],
    gts: &[Polyline],
    gt_edges: &[(usize, usize)],
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if cfg.frechet_thresholds.is_empty() || cfg.chamfer_thresholds.is_empty() {
        return Err(Error::Validation(
            "threshold lists must be non-empty".into(),
        ));
    }
    let resampled: Vec<Polyline> = preds
        .iter()
        .map(|p| p.polyline.resample(cfg.resample))
        .collect::<Result<_>>()?;
    let gt_resampled: Vec<Polyline> = gts
        .iter()
        .map(|g| g.resample(cfg.resample))
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();

    let mut per = BTreeMap::new();
    let mut det =
        |kind: DistanceKind, thresholds: &[f64]| -> Result<(f64, Vec<Vec<Option<usize>>>)> {
            let dist = distance_matrix(&resampled, &gt_resampled, kind)?;
            let mut sum = 0.0;
            let mut matches = Vec::new();
            for &t in thresholds {
                let m = greedy_match(&dist, &scores, t);
                let ap = ap_from_match(&m, &scores, gts.len());
                per.insert(threshold_key(kind.label(), t), ap);
                sum += ap;
                matches.push(m);
            }
            Ok((sum / thresholds.len() as f64, matches))
        };
    let (det_l, frechet_matches) = det(DistanceKind::Frechet, &cfg.frechet_thresholds)?;
    let (det_l_ch, _) = det(DistanceKind::Chamfer, &cfg.chamfer_thresholds)?;

    let edges: Vec<ScoredEdge> = pred_edges
        .iter()
        .map(|e| ScoredEdge {
            score: if cfg.v11m {
                v11m_remap(e.score)
            } else {
                e.score
            },
            ..*e
        })
        .collect();
    let mut top_sum = 0.0;
    for (m, &t) in frechet_matches.iter().zip(&cfg.frechet_thresholds) {
        let ap = topology_ap(&edges, gt_edges, m);
        per.insert(threshold_key("top_frechet", t), ap);
        top_sum += ap;
    }
    let top_ll = top_sum / cfg.frechet_thresholds.len() as f64;
    Ok(MetricReport {
        det_l,
        det_l_ch,
        top_ll,
        ols_l: ols_l(det_l, det_l_ch, top_ll)?,
        per_threshold_ap: per,
    })
}
