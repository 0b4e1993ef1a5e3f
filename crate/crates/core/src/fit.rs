//! Direct control-point fitting under Hungarian-matched L1 regression.
//!
//! Free control points are moved by subgradient descent on `λ_reg · L_reg`,
//! re-matching to the GT at every step. The step at iteration `k` is
//! `step_size / √(k + 1)`, which lets the sign-valued L1 subgradient settle
//! instead of oscillating at a fixed amplitude.

use serde::{Deserialize, Serialize};

use crate::bezier::ControlPointSet;
use crate::error::{Error, Result};
use crate::losses::{ctrl_l1, l1_regression_grad, l1_regression_loss};
use crate::matching::{hungarian, Assignment};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub lambda_reg: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            step_size: 0.01,
            lambda_reg: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub ctrl: Vec<ControlPointSet>,
    /// `λ_reg · L_reg` before each step, then once after the last step.
    pub loss_trace: Vec<f64>,
    pub initial_assignment: Assignment,
    pub final_assignment: Assignment,
}

impl FitResult {
    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().unwrap_or(&0.0)
    }

    /// Running minimum of the loss trace.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.loss_trace
            .iter()
            .scan(f64::INFINITY, |m, &v| {
                *m = m.min(v);
                Some(*m)
            })
            .collect()
    }
}

/// Adds `offset` to every coordinate.
pub fn perturbed(ctrl: &[ControlPointSet], offset: f64) -> Vec<ControlPointSet> {
    ctrl.iter()
        .map(|c| {
            let mut c = c.clone();
            c.points_mut()
                .iter_mut()
                .flatten()
                .for_each(|v| *v += offset);
            c
        })
        .collect()
}

fn l1_matrix(
    pred: &[ControlPointSet],
    gt: &[ControlPointSet],
    lambda: f64,
) -> Result<Vec<Vec<f64>>> {
    pred.iter()
        .map(|p| gt.iter().map(|g| Ok(lambda * ctrl_l1(p, g)?)).collect())
        .collect()
}

/// Mean absolute per-coordinate error over the matched pairs.
pub fn mean_coordinate_error(
    pred: &[ControlPointSet],
    gt: &[ControlPointSet],
    assignment: &Assignment,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for &(p, g) in &assignment.pairs {
        sum += ctrl_l1(&pred[p], &gt[g])?;
        count += pred[p].len() * 3;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

pub fn fit_demo(
    gt: &[ControlPointSet],
    init: Vec<ControlPointSet>,
    cfg: &FitConfig,
) -> Result<FitResult> {
    if gt.is_empty() {
        return Err(Error::Validation(
            "fitting needs at least one GT instance".into(),
        ));
    }
    if init.is_empty() {
        return Err(Error::Validation(
            "fitting needs at least one free curve".into(),
        ));
    }
    if !(cfg.step_size.is_finite()
        && cfg.step_size > 0.0
        && cfg.lambda_reg.is_finite()
        && cfg.lambda_reg >= 0.0)
    {
        return Err(Error::Validation(
            "step size must be positive and λ_reg non-negative".into(),
        ));
    }
    let mut ctrl = init;
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut initial = None;
    for k in 0..=cfg.iterations {
        let cost = l1_matrix(&ctrl, gt, cfg.lambda_reg)?;
        if cost.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration: k });
        }
        let assignment = hungarian(&cost)?;
        let loss = cfg.lambda_reg * l1_regression_loss(&ctrl, gt, &assignment)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration: k });
        }
        trace.push(loss);
        if initial.is_none() {
            initial = Some(assignment.clone());
        }
        if k == cfg.iterations {
            return Ok(FitResult {
                ctrl,
                loss_trace: trace,
                initial_assignment: initial.unwrap(),
                final_assignment: assignment,
            });
        }
        let step = cfg.step_size / ((k + 1) as f64).sqrt();
        let grads = l1_regression_grad(&ctrl, gt, &assignment);
        for (c, g) in ctrl.iter_mut().zip(&grads) {
            for (v, d) in c.points_mut().iter_mut().flatten().zip(g) {
                *v -= step * cfg.lambda_reg * d;
            }
        }
    }
    unreachable!("loop returns on its last iteration")
}
