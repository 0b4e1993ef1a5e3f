//! Centerline training losses: control-point L1, point-sampled mask
//! BCE + dice, weighted classification, and the deep-supervised total with
//! the one-to-many branch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bezier::ControlPointSet;
use crate::decoder::QueryState;
use crate::error::{Error, Result};
use crate::grid::{map_taps, sample_map, SamplePoint};
use crate::matching::{hungarian, match_with_repetition, pairwise_cost, Assignment, MatchCost};
use crate::nn::sigmoid;
use crate::rng;

pub const DICE_EPS: f64 = 1e-6;
pub const DEFAULT_MASK_SAMPLES: usize = 100;
/// Class weight of queries matched to a GT instance.
pub const MATCHED_CLASS_WEIGHT: f64 = 0.1;
const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub lambda_mask_bce: f64,
    pub lambda_mask_dice: f64,
    pub lambda_cls: f64,
    pub lambda_one_to_many: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_reg: 3.0,
            lambda_mask_bce: 5.0,
            lambda_mask_dice: 5.0,
            lambda_cls: 2.0,
            lambda_one_to_many: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_reg,
            self.lambda_mask_bce,
            self.lambda_mask_dice,
            self.lambda_cls,
            self.lambda_one_to_many,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Validation(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Random mask sampling: `count` uniform points over the cell-center lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSampling {
    pub count: usize,
    pub seed: u64,
}

impl Default for MaskSampling {
    fn default() -> Self {
        Self {
            count: DEFAULT_MASK_SAMPLES,
            seed: 0,
        }
    }
}

/// `count` continuous points drawn uniformly from the rectangle spanned by
/// the outermost cell centers, so every bilinear read is a convex
/// combination of in-grid cells.
pub fn sample_points(height: usize, width: usize, count: usize, seed: u64) -> Vec<SamplePoint> {
    let mut r = rng::stream(seed, 0x6d61_736b);
    (0..count)
        .map(|_| {
            let u: f64 = r.random_range(0.0..=(width - 1) as f64);
            let v: f64 = r.random_range(0.0..=(height - 1) as f64);
            SamplePoint::new((u + 0.5) / width as f64, (v + 0.5) / height as f64)
        })
        .collect()
}

/// Every cell center, row-major.
pub fn dense_points(height: usize, width: usize) -> Vec<SamplePoint> {
    (0..height)
        .flat_map(|i| (0..width).map(move |j| SamplePoint::cell_center(i, j, height, width)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub ctrl: ControlPointSet,
    /// Row-major `H × W` binary mask.
    pub mask: Vec<u8>,
    pub class: usize,
}

impl GtInstance {
    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| m as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub height: usize,
    pub width: usize,
    pub instances: Vec<GtInstance>,
    /// Directed connectivity edges `(from, to)`.
    pub adjacency: Vec<(usize, usize)>,
}

impl GroundTruth {
    pub fn new(
        height: usize,
        width: usize,
        instances: Vec<GtInstance>,
        adjacency: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let gt = Self {
            height,
            width,
            instances,
            adjacency,
        };
        gt.validate()?;
        Ok(gt)
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.height * self.width;
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.mask.len() != cells {
                return Err(Error::Validation(format!(
                    "mask {i} has {} cells, grid has {cells}",
                    inst.mask.len()
                )));
            }
            if inst.mask.iter().any(|&m| m > 1) {
                return Err(Error::Validation(format!("mask {i} is not binary")));
            }
        }
        let n = self.instances.len();
        for &(a, b) in &self.adjacency {
            if a >= n || b >= n {
                return Err(Error::Validation(format!(
                    "edge ({a}, {b}) references a missing instance"
                )));
            }
            if a == b {
                return Err(Error::Validation(format!("self edge on instance {a}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn adjacency_matrix(&self) -> Vec<Vec<u8>> {
        let n = self.len();
        let mut m = vec![vec![0; n]; n];
        for &(a, b) in &self.adjacency {
            m[a][b] = 1;
        }
        m
    }

    /// `s_i = g_(i mod n)` for `i < n·r`; adjacency is dropped.
    pub fn repeated(&self, r: usize) -> GroundTruth {
        let n = self.len();
        GroundTruth {
            height: self.height,
            width: self.width,
            instances: (0..n * r).map(|i| self.instances[i % n].clone()).collect(),
            adjacency: Vec::new(),
        }
    }
}

/// Mean L1 distance over matched pairs (sum over all control-point coordinates).
pub fn l1_regression_loss(
    pred_ctrl: &[ControlPointSet],
    gt_ctrl: &[ControlPointSet],
    assignment: &Assignment,
) -> Result<f64> {
    if assignment.pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &(p, g) in &assignment.pairs {
        total += ctrl_l1(&pred_ctrl[p], &gt_ctrl[g])?;
    }
    Ok(total / assignment.pairs.len() as f64)
}

pub(crate) fn ctrl_l1(a: &ControlPointSet, b: &ControlPointSet) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{} vs {} control points",
            a.len(),
            b.len()
        )));
    }
    Ok(a.points()
        .iter()
        .zip(b.points())
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
        .sum())
}

/// Subgradient of [`l1_regression_loss`] with respect to each prediction's
/// control points (flattened `(N+1)·3`, zero for unmatched predictions).
pub fn l1_regression_grad(
    pred_ctrl: &[ControlPointSet],
    gt_ctrl: &[ControlPointSet],
    assignment: &Assignment,
) -> Vec<Vec<f64>> {
    let mut grads: Vec<Vec<f64>> = pred_ctrl.iter().map(|c| vec![0.0; c.len() * 3]).collect();
    if assignment.pairs.is_empty() {
        return grads;
    }
    let scale = 1.0 / assignment.pairs.len() as f64;
    for &(p, g) in &assignment.pairs {
        let flat_p = pred_ctrl[p].points().iter().flatten();
        let flat_g = gt_ctrl[g].points().iter().flatten();
        for (out, (a, b)) in grads[p].iter_mut().zip(flat_p.zip(flat_g)) {
            let d = a - b;
            *out = if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            };
        }
    }
    grads
}

/// BCE and dice-loss parts of the mask loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskTerms {
    pub bce: f64,
    pub dice: f64,
}

impl MaskTerms {
    pub fn total(&self) -> f64 {
        self.bce + self.dice
    }
}

fn bce(p: f64, g: f64) -> f64 {
    -(g * p.max(LOG_CLAMP).ln() + (1.0 - g) * (1.0 - p).max(LOG_CLAMP).ln())
}

/// Mask terms of one instance at the given points: mean BCE and
/// `1 − 2Σpg / (Σp + Σg + ε)`.
pub fn mask_terms(
    prob: &[f64],
    gt: &[f64],
    height: usize,
    width: usize,
    points: &[SamplePoint],
) -> Result<MaskTerms> {
    if prob.len() != height * width || gt.len() != height * width {
        return Err(Error::Shape("mask maps do not match the grid".into()));
    }
    if points.is_empty() {
        return Err(Error::Validation(
            "mask loss needs at least one sample".into(),
        ));
    }
    let (mut b, mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0, 0.0);
    for &pt in points {
        let p = sample_map(prob, height, width, pt);
        let g = sample_map(gt, height, width, pt);
        b += bce(p, g);
        inter += p * g;
        sp += p;
        sg += g;
    }
    Ok(MaskTerms {
        bce: b / points.len() as f64,
        dice: 1.0 - 2.0 * inter / (sp + sg + DICE_EPS),
    })
}

/// Mask terms averaged over matched instances, with one point set of
/// `sampling.count` points shared by all instances.
pub fn mask_loss(
    pred_prob: &[Vec<f64>],
    gt: &GroundTruth,
    assignment: &Assignment,
    sampling: MaskSampling,
) -> Result<MaskTerms> {
    if sampling.count == 0 {
        return Err(Error::Validation(
            "mask sample count must be at least 1".into(),
        ));
    }
    if assignment.pairs.is_empty() {
        return Ok(MaskTerms::default());
    }
    let points = sample_points(gt.height, gt.width, sampling.count, sampling.seed);
    let mut acc = MaskTerms::default();
    for &(p, g) in &assignment.pairs {
        let t = mask_terms(
            &pred_prob[p],
            &gt.instances[g].mask_f64(),
            gt.height,
            gt.width,
            &points,
        )?;
        acc.bce += t.bce;
        acc.dice += t.dice;
    }
    let n = assignment.pairs.len() as f64;
    Ok(MaskTerms {
        bce: acc.bce / n,
        dice: acc.dice / n,
    })
}

/// Gradient of the mean sampled BCE of one instance with respect to its
/// pre-mask logits (probabilities are `σ(logit)` per cell, read bilinearly).
pub fn mask_bce_grad(
    pre_mask: &[f64],
    gt: &[f64],
    height: usize,
    width: usize,
    points: &[SamplePoint],
) -> Vec<f64> {
    let prob: Vec<f64> = pre_mask.iter().map(|&v| sigmoid(v)).collect();
    let mut grad = vec![0.0; pre_mask.len()];
    let inv_k = 1.0 / points.len() as f64;
    for &pt in points {
        let p = sample_map(&prob, height, width, pt);
        let g = sample_map(gt, height, width, pt);
        let d_p = -(g / p.max(LOG_CLAMP) - (1.0 - g) / (1.0 - p).max(LOG_CLAMP)) * inv_k;
        for (cell, w) in map_taps(height, width, pt) {
            grad[cell] += d_p * w * prob[cell] * (1.0 - prob[cell]);
        }
    }
    grad
}

/// Mean sampled BCE of one instance as a function of its pre-mask logits.
pub fn mask_bce_from_logits(
    pre_mask: &[f64],
    gt: &[f64],
    height: usize,
    width: usize,
    points: &[SamplePoint],
) -> Result<f64> {
    let prob: Vec<f64> = pre_mask.iter().map(|&v| sigmoid(v)).collect();
    Ok(mask_terms(&prob, gt, height, width, points)?.bce)
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Softmax cross-entropy averaged over all queries. Matched queries target
/// their GT class with weight 0.1; the rest target the trailing no-object
/// class with weight 1.
pub fn classification_loss(
    logits: &[Vec<f64>],
    gt_labels: &[usize],
    assignment: &Assignment,
) -> Result<f64> {
    if logits.is_empty() {
        return Ok(0.0);
    }
    let n_classes = logits[0].len();
    if n_classes < 2 || logits.iter().any(|l| l.len() != n_classes) {
        return Err(Error::Shape(
            "class logits need a consistent width ≥ 2".into(),
        ));
    }
    let mut target = vec![(n_classes - 1, 1.0); logits.len()];
    for &(p, g) in &assignment.pairs {
        let label = gt_labels[g];
        if label >= n_classes - 1 {
            return Err(Error::Validation(format!(
                "GT label {label} collides with the no-object class"
            )));
        }
        target[p] = (label, MATCHED_CLASS_WEIGHT);
    }
    let total: f64 = logits
        .iter()
        .zip(&target)
        .map(|(l, &(t, w))| -w * log_softmax(l)[t])
        .sum();
    Ok(total / logits.len() as f64)
}

/// Unweighted loss terms of one query block at one layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub reg: f64,
    pub mask_bce: f64,
    pub mask_dice: f64,
    pub cls: f64,
}

impl LossTerms {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.lambda_reg * self.reg
            + w.lambda_mask_bce * self.mask_bce
            + w.lambda_mask_dice * self.mask_dice
            + w.lambda_cls * self.cls
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub layer: usize,
    pub one_to_one: LossTerms,
    pub one_to_many: LossTerms,
    pub one_to_one_weighted: f64,
    pub one_to_many_weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub one_to_one: f64,
    /// Unscaled one-to-many sum (the total adds `λ` times this).
    pub one_to_many: f64,
    pub layers: Vec<LayerLoss>,
}

/// Matches one query block to `gt` and evaluates every term.
pub fn block_terms(
    state: &QueryState,
    gt: &GroundTruth,
    cost: &MatchCost,
    sampling: MaskSampling,
) -> Result<(LossTerms, Assignment)> {
    let assignment = if gt.is_empty() || state.is_empty() {
        Assignment::empty()
    } else {
        hungarian(&pairwise_cost(state, gt, cost)?)?
    };
    Ok((terms_for(state, gt, &assignment, sampling)?, assignment))
}

pub(crate) fn terms_for(
    state: &QueryState,
    gt: &GroundTruth,
    assignment: &Assignment,
    sampling: MaskSampling,
) -> Result<LossTerms> {
    let gt_ctrl: Vec<ControlPointSet> = gt.instances.iter().map(|i| i.ctrl.clone()).collect();
    let labels: Vec<usize> = gt.instances.iter().map(|i| i.class).collect();
    let probs: Vec<Vec<f64>> = (0..state.len()).map(|q| state.mask_prob(q)).collect();
    let mask = mask_loss(&probs, gt, assignment, sampling)?;
    Ok(LossTerms {
        reg: l1_regression_loss(&state.ctrl, &gt_ctrl, assignment)?,
        mask_bce: mask.bce,
        mask_dice: mask.dice,
        cls: classification_loss(&state.class_logits, &labels, assignment)?,
    })
}

/// Deep-supervised loss over every decoder state (initial prediction
/// included), one-to-one plus `λ` times the one-to-many block matched
/// against the GT repeated `r` times.
pub fn total_loss(
    states: &[QueryState],
    gt: &GroundTruth,
    weights: &LossWeights,
    cost: &MatchCost,
    sampling: MaskSampling,
    r: usize,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let mut out = LossBreakdown {
        total: 0.0,
        one_to_one: 0.0,
        one_to_many: 0.0,
        layers: Vec::with_capacity(states.len()),
    };
    for (layer, state) in states.iter().enumerate() {
        let q = state.n_one_to_one;
        if state.len() != q * (1 + r) {
            return Err(Error::Shape(format!(
                "layer {layer} has {} queries, expected {} for R = {r}",
                state.len(),
                q * (1 + r)
            )));
        }
        let (o2o, _) = block_terms(&state.one_to_one(), gt, cost, sampling)?;
        let o2m = if r == 0 {
            LossTerms::default()
        } else {
            let block = state.one_to_many();
            let assignment = if gt.is_empty() {
                Assignment::empty()
            } else {
                match_with_repetition(&block, gt, cost, r)?
            };
            terms_for(&block, &gt.repeated(r), &assignment, sampling)?
        };
        let w1 = o2o.weighted(weights);
        let wm = o2m.weighted(weights);
        out.one_to_one += w1;
        out.one_to_many += wm;
        out.layers.push(LayerLoss {
            layer,
            one_to_one: o2o,
            one_to_many: o2m,
            one_to_one_weighted: w1,
            one_to_many_weighted: wm,
        });
    }
    out.total = out.one_to_one + weights.lambda_one_to_many * out.one_to_many;
    Ok(out)
}
