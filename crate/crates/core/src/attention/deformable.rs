use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::OpCounter;
use crate::bezier::{BernsteinMatrix, ControlPointSet, Polyline};
use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, SamplePoint};
use crate::nn::{softmax, Linear};

/// Learned maps of a deformable attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformAttnParams {
    pub n_heads: usize,
    pub n_samples: usize,
    pub d_model: usize,
    /// `d_model → heads·samples·2`, laid out as `((head·K + k)·2 + axis)`.
    pub offsets: Linear,
    /// `d_model → heads·samples`.
    pub weights: Linear,
    /// `grid channels → d_model`.
    pub value_proj: Linear,
    /// `d_model → d_model`.
    pub output_proj: Linear,
}

impl DeformAttnParams {
    pub fn random<R: Rng + ?Sized>(
        d_model: usize,
        n_heads: usize,
        n_samples: usize,
        value_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_dims(d_model, n_heads, n_samples)?;
        Ok(Self {
            n_heads,
            n_samples,
            d_model,
            offsets: Linear::random(d_model, n_heads * n_samples * 2, rng),
            weights: Linear::random(d_model, n_heads * n_samples, rng),
            value_proj: Linear::random(value_channels, d_model, rng),
            output_proj: Linear::random(d_model, d_model, rng),
        })
    }

    /// Zero offsets, uniform weights and identity projections.
    pub fn identity(d_model: usize, n_heads: usize, n_samples: usize) -> Result<Self> {
        check_dims(d_model, n_heads, n_samples)?;
        Ok(Self {
            n_heads,
            n_samples,
            d_model,
            offsets: Linear::zeros(d_model, n_heads * n_samples * 2),
            weights: Linear::zeros(d_model, n_heads * n_samples),
            value_proj: Linear::identity(d_model),
            output_proj: Linear::identity(d_model),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.d_model, self.n_heads, self.n_samples)?;
        let mk = self.n_heads * self.n_samples;
        let ok = self.offsets.in_dim == self.d_model
            && self.offsets.out_dim == 2 * mk
            && self.weights.in_dim == self.d_model
            && self.weights.out_dim == mk
            && self.value_proj.out_dim == self.d_model
            && self.output_proj.in_dim == self.d_model
            && self.output_proj.out_dim == self.d_model;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(
                "deformable attention maps disagree with (d_model, heads, samples)".into(),
            ))
        }
    }

    /// Projects the grid into value space once; reused by every query.
    pub fn project(&self, grid: &FeatureGrid) -> Result<ValueGrid> {
        if grid.channels() != self.value_proj.in_dim {
            return Err(Error::Shape(format!(
                "value projection expects {} channels, grid has {}",
                self.value_proj.in_dim,
                grid.channels()
            )));
        }
        let values = grid.map_cells(self.d_model, |c| self.value_proj.forward(c))?;
        let offset_scale = 1.0 / grid.height().max(grid.width()) as f64;
        Ok(ValueGrid {
            values,
            offset_scale,
        })
    }

    /// Per-head attention weights (softmax over samples) for a query.
    pub fn attention_weights(&self, query: &[f64]) -> Vec<Vec<f64>> {
        let logits = self.weights.forward(query);
        logits.chunks(self.n_samples).map(softmax).collect()
    }

    fn check_query(&self, query: &[f64]) -> Result<()> {
        if query.len() != self.d_model {
            return Err(Error::Shape(format!(
                "query has {} channels, expected {}",
                query.len(),
                self.d_model
            )));
        }
        if query.iter().any(|v| v.is_nan()) {
            return Err(Error::Domain("NaN in query".into()));
        }
        Ok(())
    }

    fn check_anchors(&self, anchors: &[SamplePoint]) -> Result<()> {
        if anchors.len() != self.n_heads {
            return Err(Error::Shape(format!(
                "{} anchors for {} heads",
                anchors.len(),
                self.n_heads
            )));
        }
        if anchors
            .iter()
            .any(|a| !(a.x.is_finite() && a.y.is_finite()))
        {
            return Err(Error::Domain("non-finite anchor".into()));
        }
        Ok(())
    }

    /// Shared kernel: `Σ_h Σ_k A_{h,k} W_h V(anchor_h + Δp_{h,k})`.
    pub fn attend(
        &self,
        query: &[f64],
        values: &ValueGrid,
        anchors: &[SamplePoint],
        counter: &mut OpCounter,
    ) -> Result<Vec<f64>> {
        self.check_query(query)?;
        self.check_anchors(anchors)?;
        let (k, dh) = (self.n_samples, self.head_dim());
        let offsets = self.offsets.forward(query);
        counter.matmul(self.offsets.macs());
        let weights = self.attention_weights(query);
        counter.matmul(self.weights.macs());

        let mut concat = vec![0.0; self.d_model];
        for (h, anchor) in anchors.iter().enumerate() {
            let slice = h * dh..(h + 1) * dh;
            let head_out = &mut concat[slice.clone()];
            for (s, &a) in weights[h].iter().enumerate() {
                let o = (h * k + s) * 2;
                let p = SamplePoint::new(
                    anchor.x + values.offset_scale * offsets[o],
                    anchor.y + values.offset_scale * offsets[o + 1],
                );
                values.values.accumulate(p, slice.clone(), a, head_out);
                counter.sample_calls += 1;
                counter.multiply_accumulates += 4 * dh as u64;
            }
        }
        let out = self.output_proj.forward(&concat);
        counter.matmul(self.output_proj.macs());
        Ok(out)
    }

    /// Output plus vector-Jacobian products with respect to the query and
    /// every anchor for the upstream gradient `upstream`.
    pub fn attend_vjp(
        &self,
        query: &[f64],
        values: &ValueGrid,
        anchors: &[SamplePoint],
        upstream: &[f64],
    ) -> Result<AttendGrad> {
        self.check_query(query)?;
        self.check_anchors(anchors)?;
        if upstream.len() != self.d_model {
            return Err(Error::Shape("upstream gradient length".into()));
        }
        let (k, dh) = (self.n_samples, self.head_dim());
        let offsets = self.offsets.forward(query);
        let weights = self.attention_weights(query);
        let g_concat = self.output_proj.backward_input(upstream);

        let mut concat = vec![0.0; self.d_model];
        let mut g_offsets = vec![0.0; offsets.len()];
        let mut g_logits = vec![0.0; self.n_heads * k];
        let mut g_anchors = vec![[0.0; 2]; self.n_heads];
        for (h, anchor) in anchors.iter().enumerate() {
            let slice = h * dh..(h + 1) * dh;
            let g_head = &g_concat[slice.clone()];
            let mut g_weight = vec![0.0; k];
            for s in 0..k {
                let o = (h * k + s) * 2;
                let p = SamplePoint::new(
                    anchor.x + values.offset_scale * offsets[o],
                    anchor.y + values.offset_scale * offsets[o + 1],
                );
                let sg = values.values.sample_grad_channels(p, slice.clone())?;
                let a = weights[h][s];
                for (c, v) in sg.value.iter().enumerate() {
                    concat[h * dh + c] += a * v;
                }
                g_weight[s] = crate::nn::dot(g_head, &sg.value);
                let gx = a * crate::nn::dot(g_head, &sg.d_dx);
                let gy = a * crate::nn::dot(g_head, &sg.d_dy);
                g_anchors[h][0] += gx;
                g_anchors[h][1] += gy;
                g_offsets[o] = values.offset_scale * gx;
                g_offsets[o + 1] = values.offset_scale * gy;
            }
            let mean: f64 = weights[h].iter().zip(&g_weight).map(|(a, g)| a * g).sum();
            for s in 0..k {
                g_logits[h * k + s] = weights[h][s] * (g_weight[s] - mean);
            }
        }
        let output = self.output_proj.forward(&concat);
        let mut d_query = self.offsets.backward_input(&g_offsets);
        for (q, g) in d_query
            .iter_mut()
            .zip(self.weights.backward_input(&g_logits))
        {
            *q += g;
        }
        Ok(AttendGrad {
            output,
            d_query,
            d_anchors: g_anchors,
        })
    }
}

fn check_dims(d_model: usize, n_heads: usize, n_samples: usize) -> Result<()> {
    if n_heads == 0 || n_samples == 0 || d_model == 0 {
        return Err(Error::Shape(
            "heads, samples and d_model must be positive".into(),
        ));
    }
    if !d_model.is_multiple_of(n_heads) {
        return Err(Error::Shape(format!(
            "d_model {d_model} is not divisible by {n_heads} heads"
        )));
    }
    Ok(())
}

/// Value-projected grid plus the scale that converts raw offsets into
/// normalized coordinates (`1 / max(H, W)`).
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub values: FeatureGrid,
    pub offset_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttendGrad {
    pub output: Vec<f64>,
    pub d_query: Vec<f64>,
    pub d_anchors: Vec<[f64; 2]>,
}

/// Linear regressor of the single SPDA reference point from the flattened
/// 2D control points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceHead {
    pub map: Linear,
}

impl ReferenceHead {
    pub fn random<R: Rng + ?Sized>(n_ctrl: usize, rng: &mut R) -> Self {
        Self {
            map: Linear::random(2 * n_ctrl, 2, rng),
        }
    }

    /// Mean of the control points.
    pub fn centroid(n_ctrl: usize) -> Self {
        let mut map = Linear::zeros(2 * n_ctrl, 2);
        for n in 0..n_ctrl {
            map.weight[2 * n] = 1.0 / n_ctrl as f64;
            map.weight[2 * n_ctrl + 2 * n + 1] = 1.0 / n_ctrl as f64;
        }
        Self { map }
    }

    pub fn reference(
        &self,
        ctrl: &ControlPointSet,
        counter: &mut OpCounter,
    ) -> Result<SamplePoint> {
        if ctrl.len() * 2 != self.map.in_dim {
            return Err(Error::Shape(
                "reference head expects a different control-point count".into(),
            ));
        }
        let flat: Vec<f64> = ctrl.xy().into_iter().flatten().collect();
        let r = self.map.forward(&flat);
        counter.matmul(self.map.macs());
        Ok(SamplePoint::new(r[0], r[1]))
    }
}

fn ctrl_anchors(ctrl: &ControlPointSet) -> Vec<SamplePoint> {
    ctrl.points()
        .iter()
        .map(|p| SamplePoint::new(p[0], p[1]))
        .collect()
}

fn polyline_anchors(poly: &Polyline) -> Vec<SamplePoint> {
    poly.points()
        .iter()
        .map(|p| SamplePoint::new(p[0], p[1]))
        .collect()
}

/// Single-point deformable attention: every head anchored at `reference`.
pub fn spda(
    query: &[f64],
    grid: &FeatureGrid,
    reference: SamplePoint,
    params: &DeformAttnParams,
) -> Result<Vec<f64>> {
    let values = params.project(grid)?;
    spda_projected(query, &values, reference, params, &mut OpCounter::default())
}

pub fn spda_projected(
    query: &[f64],
    values: &ValueGrid,
    reference: SamplePoint,
    params: &DeformAttnParams,
    counter: &mut OpCounter,
) -> Result<Vec<f64>> {
    let anchors = vec![reference; params.n_heads];
    params.attend(query, values, &anchors, counter)
}

/// SPDA with the reference point regressed from the control points.
pub fn spda_from_ctrl(
    query: &[f64],
    values: &ValueGrid,
    ctrl: &ControlPointSet,
    head: &ReferenceHead,
    params: &DeformAttnParams,
    counter: &mut OpCounter,
) -> Result<Vec<f64>> {
    let reference = head.reference(ctrl, counter)?;
    spda_projected(query, values, reference, params, counter)
}

/// Multi-point deformable attention: head `l` anchored at polyline point `l`.
pub fn mpda(
    query: &[f64],
    grid: &FeatureGrid,
    refs: &Polyline,
    params: &DeformAttnParams,
) -> Result<Vec<f64>> {
    let values = params.project(grid)?;
    mpda_projected(query, &values, refs, params, &mut OpCounter::default())
}

pub fn mpda_projected(
    query: &[f64],
    values: &ValueGrid,
    refs: &Polyline,
    params: &DeformAttnParams,
    counter: &mut OpCounter,
) -> Result<Vec<f64>> {
    params.attend(query, values, &polyline_anchors(refs), counter)
}

/// MPDA including the per-call Bernstein conversion of the 2D control points.
pub fn mpda_from_ctrl(
    query: &[f64],
    values: &ValueGrid,
    ctrl: &ControlPointSet,
    basis: &BernsteinMatrix,
    params: &DeformAttnParams,
    counter: &mut OpCounter,
) -> Result<Vec<f64>> {
    let refs = basis.apply(ctrl)?;
    counter.matmul(basis.apply_macs(2));
    mpda_projected(query, values, &refs, params, counter)
}

/// Bezier deformable attention: head `n` anchored at control point `n`.
pub fn bda(
    query: &[f64],
    grid: &FeatureGrid,
    ctrl: &ControlPointSet,
    params: &DeformAttnParams,
) -> Result<Vec<f64>> {
    let values = params.project(grid)?;
    bda_projected(query, &values, ctrl, params, &mut OpCounter::default())
}

pub fn bda_projected(
    query: &[f64],
    values: &ValueGrid,
    ctrl: &ControlPointSet,
    params: &DeformAttnParams,
    counter: &mut OpCounter,
) -> Result<Vec<f64>> {
    params.attend(query, values, &ctrl_anchors(ctrl), counter)
}
