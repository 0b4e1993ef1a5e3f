//! Bipartite assignment between predicted and GT centerlines under the
//! Mask-L1 mix cost.

use serde::{Deserialize, Serialize};

use crate::decoder::QueryState;
use crate::error::{Error, Result};
use crate::losses::{ctrl_l1, dense_points, mask_terms, sample_points, GroundTruth, MaskSampling};

/// How the mask part of the matching cost picks its evaluation points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MaskCostMode {
    /// Same random point sampling as the mask loss, fixed seed.
    Sampled(MaskSampling),
    /// Every cell center.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchCost {
    pub lambda_reg: f64,
    pub lambda_mask_bce: f64,
    pub lambda_mask_dice: f64,
    pub lambda_cls: f64,
    pub mask_mode: MaskCostMode,
}

impl Default for MatchCost {
    fn default() -> Self {
        Self {
            lambda_reg: 5.0,
            lambda_mask_bce: 5.0,
            lambda_mask_dice: 5.0,
            lambda_cls: 2.0,
            mask_mode: MaskCostMode::Sampled(MaskSampling::default()),
        }
    }
}

impl MatchCost {
    /// Control-point L1 only.
    pub fn l1_only(lambda_reg: f64) -> Self {
        Self {
            lambda_reg,
            lambda_mask_bce: 0.0,
            lambda_mask_dice: 0.0,
            lambda_cls: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [
            self.lambda_reg,
            self.lambda_mask_bce,
            self.lambda_mask_dice,
            self.lambda_cls,
        ];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation(
                "matching weights must be finite and non-negative".into(),
            ));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::Validation(
                "at least one matching weight must be positive".into(),
            ));
        }
        if let MaskCostMode::Sampled(s) = self.mask_mode {
            if s.count == 0 {
                return Err(Error::Validation(
                    "mask cost needs at least one sample".into(),
                ));
            }
        }
        Ok(())
    }

    fn uses_mask(&self) -> bool {
        self.lambda_mask_bce > 0.0 || self.lambda_mask_dice > 0.0
    }
}

/// One-to-one assignment, pairs sorted by prediction index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn empty() -> Self {
        Self {
            pairs: Vec::new(),
            total_cost: 0.0,
        }
    }

    pub fn from_pairs(mut pairs: Vec<(usize, usize)>, total_cost: f64) -> Self {
        pairs.sort_unstable();
        Self { pairs, total_cost }
    }

    /// GT index matched to each prediction.
    pub fn gt_for_pred(&self, n_pred: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_pred];
        for &(p, g) in &self.pairs {
            out[p] = Some(g);
        }
        out
    }
}

/// `#pred × #gt` Mask-L1 mix cost matrix.
pub fn pairwise_cost(
    pred: &QueryState,
    gt: &GroundTruth,
    weights: &MatchCost,
) -> Result<Vec<Vec<f64>>> {
    weights.validate()?;
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Shape(format!(
            "prediction masks are {}×{}, GT masks are {}×{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let (h, w) = (gt.height, gt.width);
    let points = match weights.mask_mode {
        MaskCostMode::Sampled(s) => sample_points(h, w, s.count, s.seed),
        MaskCostMode::Dense => dense_points(h, w),
    };
    let gt_masks: Vec<Vec<f64>> = gt.instances.iter().map(|g| g.mask_f64()).collect();
    let mut out = Vec::with_capacity(pred.len());
    for q in 0..pred.len() {
        let prob = if weights.uses_mask() {
            pred.mask_prob(q)
        } else {
            Vec::new()
        };
        let cls = pred.class_prob(q);
        let mut row = Vec::with_capacity(gt.len());
        for (g, inst) in gt.instances.iter().enumerate() {
            let mut c = 0.0;
            if weights.lambda_reg > 0.0 {
                c += weights.lambda_reg * ctrl_l1(&pred.ctrl[q], &inst.ctrl)?;
            }
            if weights.uses_mask() {
                let t = mask_terms(&prob, &gt_masks[g], h, w, &points)?;
                c += weights.lambda_mask_bce * t.bce + weights.lambda_mask_dice * t.dice;
            }
            if weights.lambda_cls > 0.0 {
                let p = *cls.get(inst.class).ok_or_else(|| {
                    Error::Shape(format!("GT class {} outside the logits", inst.class))
                })?;
                c -= weights.lambda_cls * p;
            }
            row.push(c);
        }
        out.push(row);
    }
    Ok(out)
}

/// Minimum-cost one-to-one assignment of `min(n, m)` pairs.
///
/// Rectangular inputs are padded to square with a constant larger than any
/// entry; pairs on padding are dropped. Runs the `O(n³)` shortest
/// augmenting path method with row/column potentials.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    let m = cost.first().map_or(0, |r| r.len());
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Shape("cost matrix rows differ in length".into()));
    }
    if cost.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::Domain("NaN in cost matrix".into()));
    }
    if cost.iter().flatten().any(|v| v.is_infinite()) {
        return Err(Error::Domain("infinite entry in cost matrix".into()));
    }
    if n == 0 || m == 0 {
        return Ok(Assignment::empty());
    }
    let size = n.max(m);
    let max = cost
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let pad = max.abs() + 1.0;
    let at = |i: usize, j: usize| if i < n && j < m { cost[i][j] } else { pad };

    // 1-based potentials formulation; column 0 is a virtual root.
    let mut u = vec![0.0; size + 1];
    let mut v = vec![0.0; size + 1];
    let mut row_of = vec![0usize; size + 1];
    let mut way = vec![0usize; size + 1];
    for i in 1..=size {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=size {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=size {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of_row = vec![usize::MAX; n];
    for (j, &r) in row_of.iter().enumerate().skip(1) {
        let i = r - 1;
        if i < n && j - 1 < m {
            col_of_row[i] = j - 1;
        }
    }
    let mut pairs = Vec::with_capacity(n.min(m));
    let mut total = 0.0;
    for (i, &j) in col_of_row.iter().enumerate() {
        if j != usize::MAX {
            pairs.push((i, j));
            total += cost[i][j];
        }
    }
    Ok(Assignment {
        pairs,
        total_cost: total,
    })
}

/// Matches the one-to-many query block against the GT repeated `r` times.
/// GT indices in the result refer to the repeated set (`s_i = g_(i mod n)`).
pub fn match_with_repetition(
    pred: &QueryState,
    gt: &GroundTruth,
    weights: &MatchCost,
    r: usize,
) -> Result<Assignment> {
    if r == 0 {
        return Err(Error::Validation("one-to-many matching needs R ≥ 1".into()));
    }
    let repeated = gt.repeated(r);
    if repeated.is_empty() || pred.is_empty() {
        return Ok(Assignment::empty());
    }
    hungarian(&pairwise_cost(pred, &repeated, weights)?)
}
