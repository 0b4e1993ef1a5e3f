//! Finite-difference checks of every analytic gradient in the crate.
//!
//! Each entry compares an analytic gradient vector `a` against central
//! differences `n` and reports `‖a − n‖ / max(‖a‖, ‖n‖)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{DeformAttnParams, ReferenceHead, StandardAttnParams};
use crate::bezier::{bernstein_matrix, ControlPointSet};
use crate::error::Result;
use crate::grid::{FeatureGrid, SamplePoint};
use crate::losses::{
    l1_regression_grad, l1_regression_loss, mask_bce_from_logits, mask_bce_grad, sample_points,
};
use crate::matching::Assignment;
use crate::nn::dot;
use crate::rng;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
}

/// Central differences of a scalar function.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

struct Tally {
    name: &'static str,
    checked: usize,
    worst: f64,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            checked: 0,
            worst: 0.0,
        }
    }

    fn add(&mut self, analytic: &[f64], numeric: &[f64]) {
        self.checked += 1;
        self.worst = self.worst.max(relative_error(analytic, numeric));
    }

    fn finish(self) -> GradCheckEntry {
        GradCheckEntry {
            name: self.name.into(),
            checked: self.checked,
            max_rel_error: self.worst,
        }
    }
}

fn random_vec<R: Rng>(r: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn random_grid<R: Rng>(r: &mut R, h: usize, w: usize, c: usize) -> Result<FeatureGrid> {
    FeatureGrid::new(h, w, c, random_vec(r, h * w * c))
}

/// Keeps a point away from the lattice lines where bilinear reads kink.
fn off_lattice<R: Rng>(r: &mut R, h: usize, w: usize) -> SamplePoint {
    loop {
        let p = SamplePoint::new(r.random_range(0.05..0.95), r.random_range(0.05..0.95));
        let fu = (p.x * w as f64 - 0.5).rem_euclid(1.0);
        let fv = (p.y * h as f64 - 0.5).rem_euclid(1.0);
        if (0.01..0.99).contains(&fu) && (0.01..0.99).contains(&fv) {
            return p;
        }
    }
}

fn random_ctrl<R: Rng>(r: &mut R, n_ctrl: usize) -> Result<ControlPointSet> {
    ControlPointSet::new(
        (0..n_ctrl)
            .map(|_| {
                [
                    r.random_range(0.2..0.8),
                    r.random_range(0.2..0.8),
                    r.random_range(0.2..0.8),
                ]
            })
            .collect(),
    )
}

fn ctrl_with_xy(base: &ControlPointSet, xy: &[f64]) -> ControlPointSet {
    let mut c = base.clone();
    for (p, v) in c.points_mut().iter_mut().zip(xy.chunks(2)) {
        p[0] = v[0];
        p[1] = v[1];
    }
    c
}

fn check_bilinear(seed: u64) -> Result<GradCheckEntry> {
    let mut r = rng::stream(seed, 0x01);
    let (h, w, c) = (6, 7, 3);
    let grid = random_grid(&mut r, h, w, c)?;
    let mut t = Tally::new("bilinear_sample");
    for _ in 0..20 {
        let p = off_lattice(&mut r, h, w);
        let up = random_vec(&mut r, c);
        let g = grid.sample_grad_channels(p, 0..c)?;
        let analytic = [dot(&up, &g.d_dx), dot(&up, &g.d_dy)];
        let numeric = central_difference(
            |x| dot(&up, &grid.sample(SamplePoint::new(x[0], x[1])).unwrap()),
            &[p.x, p.y],
            FD_STEP,
        );
        t.add(&analytic, &numeric);
        // data gradient on the tapped cells
        let analytic: Vec<f64> = g.taps.iter().map(|&(_, wt)| wt * up[0]).collect();
        let cells: Vec<usize> = g.taps.iter().map(|&(cell, _)| cell).collect();
        let base: Vec<f64> = cells.iter().map(|&cell| grid.cell_flat(cell)[0]).collect();
        let numeric = central_difference(
            |x| {
                let mut data = grid.data().to_vec();
                for (&cell, v) in cells.iter().zip(x) {
                    data[cell * c] = *v;
                }
                let g2 = FeatureGrid::new(h, w, c, data).unwrap();
                up[0] * g2.sample(p).unwrap()[0]
            },
            &base,
            FD_STEP,
        );
        t.add(&analytic, &numeric);
    }
    Ok(t.finish())
}

struct AttnSetup {
    params: DeformAttnParams,
    values: crate::attention::ValueGrid,
    query: Vec<f64>,
    upstream: Vec<f64>,
    ctrl: ControlPointSet,
}

fn attn_setup(seed: u64, tag: u64, n_heads: usize) -> Result<AttnSetup> {
    let mut r = rng::stream(seed, tag);
    let (d, k, c) = (16, 3, 5);
    let grid = random_grid(&mut r, 8, 8, c)?;
    let params = DeformAttnParams::random(d, n_heads, k, c, &mut r)?;
    let values = params.project(&grid)?;
    Ok(AttnSetup {
        values,
        query: random_vec(&mut r, d),
        upstream: random_vec(&mut r, d),
        ctrl: random_ctrl(&mut r, 4)?,
        params,
    })
}

fn check_spda(seed: u64) -> Result<GradCheckEntry> {
    let s = attn_setup(seed, 0x02, 4)?;
    let mut r = rng::stream(seed, 0x12);
    let head = ReferenceHead::random(4, &mut r);
    let mut c = crate::attention::OpCounter::default();
    let forward = |q: &[f64], ctrl: &ControlPointSet| -> f64 {
        let reference = head
            .reference(ctrl, &mut crate::attention::OpCounter::default())
            .unwrap();
        let anchors = vec![reference; s.params.n_heads];
        dot(
            &s.upstream,
            &s.params
                .attend(
                    q,
                    &s.values,
                    &anchors,
                    &mut crate::attention::OpCounter::default(),
                )
                .unwrap(),
        )
    };
    let reference = head.reference(&s.ctrl, &mut c)?;
    let g = s.params.attend_vjp(
        &s.query,
        &s.values,
        &vec![reference; s.params.n_heads],
        &s.upstream,
    )?;
    let mut t = Tally::new("spda");
    t.add(
        &g.d_query,
        &central_difference(|q| forward(q, &s.ctrl), &s.query, FD_STEP),
    );
    let g_ref = g
        .d_anchors
        .iter()
        .fold([0.0, 0.0], |acc, a| [acc[0] + a[0], acc[1] + a[1]]);
    let analytic = head.map.backward_input(&g_ref);
    let xy: Vec<f64> = s.ctrl.xy().into_iter().flatten().collect();
    t.add(
        &analytic,
        &central_difference(
            |v| forward(&s.query, &ctrl_with_xy(&s.ctrl, v)),
            &xy,
            FD_STEP,
        ),
    );
    Ok(t.finish())
}

fn check_mpda(seed: u64) -> Result<GradCheckEntry> {
    let samples = 4; // 5 polyline points, 5 heads
    let s = attn_setup(seed, 0x03, 1)?;
    let mut r = rng::stream(seed, 0x13);
    let params = DeformAttnParams::random(15, samples + 1, 3, 5, &mut r)?;
    let grid = random_grid(&mut r, 8, 8, 5)?;
    let values = params.project(&grid)?;
    let query = random_vec(&mut r, 15);
    let upstream = random_vec(&mut r, 15);
    let basis = bernstein_matrix(s.ctrl.order(), samples)?;
    let anchors_of = |ctrl: &ControlPointSet| -> Vec<SamplePoint> {
        basis
            .apply(ctrl)
            .unwrap()
            .points()
            .iter()
            .map(|p| SamplePoint::new(p[0], p[1]))
            .collect()
    };
    let forward = |q: &[f64], ctrl: &ControlPointSet| -> f64 {
        let out = params
            .attend(
                q,
                &values,
                &anchors_of(ctrl),
                &mut crate::attention::OpCounter::default(),
            )
            .unwrap();
        dot(&upstream, &out)
    };
    let g = params.attend_vjp(&query, &values, &anchors_of(&s.ctrl), &upstream)?;
    let mut t = Tally::new("mpda");
    t.add(
        &g.d_query,
        &central_difference(|q| forward(q, &s.ctrl), &query, FD_STEP),
    );
    // d ctrl = Bᵀ d anchors
    let mut analytic = vec![0.0; s.ctrl.len() * 2];
    for (l, ga) in g.d_anchors.iter().enumerate() {
        for n in 0..s.ctrl.len() {
            analytic[2 * n] += basis.get(l, n) * ga[0];
            analytic[2 * n + 1] += basis.get(l, n) * ga[1];
        }
    }
    let xy: Vec<f64> = s.ctrl.xy().into_iter().flatten().collect();
    t.add(
        &analytic,
        &central_difference(|v| forward(&query, &ctrl_with_xy(&s.ctrl, v)), &xy, FD_STEP),
    );
    Ok(t.finish())
}

fn check_bda(seed: u64) -> Result<GradCheckEntry> {
    let s = attn_setup(seed, 0x04, 4)?;
    let anchors_of = |ctrl: &ControlPointSet| -> Vec<SamplePoint> {
        ctrl.points()
            .iter()
            .map(|p| SamplePoint::new(p[0], p[1]))
            .collect()
    };
    let forward = |q: &[f64], ctrl: &ControlPointSet| -> f64 {
        let out = s
            .params
            .attend(
                q,
                &s.values,
                &anchors_of(ctrl),
                &mut crate::attention::OpCounter::default(),
            )
            .unwrap();
        dot(&s.upstream, &out)
    };
    let g = s
        .params
        .attend_vjp(&s.query, &s.values, &anchors_of(&s.ctrl), &s.upstream)?;
    let mut t = Tally::new("bda");
    t.add(
        &g.d_query,
        &central_difference(|q| forward(q, &s.ctrl), &s.query, FD_STEP),
    );
    let analytic: Vec<f64> = g.d_anchors.iter().flatten().copied().collect();
    let xy: Vec<f64> = s.ctrl.xy().into_iter().flatten().collect();
    t.add(
        &analytic,
        &central_difference(
            |v| forward(&s.query, &ctrl_with_xy(&s.ctrl, v)),
            &xy,
            FD_STEP,
        ),
    );
    Ok(t.finish())
}

fn check_standard(seed: u64) -> Result<GradCheckEntry> {
    let mut r = rng::stream(seed, 0x05);
    let (d, c) = (8, 4);
    let grid = random_grid(&mut r, 5, 6, c)?;
    let params = StandardAttnParams::random(d, c, &mut r);
    let kv = params.project(&grid)?;
    let query = random_vec(&mut r, d);
    let upstream = random_vec(&mut r, d);
    let g = params.attend_vjp(&query, &kv, &upstream)?;
    let numeric = central_difference(
        |q| {
            dot(
                &upstream,
                &params
                    .attend(q, &kv, &mut crate::attention::OpCounter::default())
                    .unwrap(),
            )
        },
        &query,
        FD_STEP,
    );
    let mut t = Tally::new("standard_attention");
    t.add(&g.d_query, &numeric);
    Ok(t.finish())
}

fn check_l1(seed: u64) -> Result<GradCheckEntry> {
    let mut r = rng::stream(seed, 0x06);
    let pred: Vec<ControlPointSet> = (0..3)
        .map(|_| random_ctrl(&mut r, 4))
        .collect::<Result<_>>()?;
    let gt: Vec<ControlPointSet> = (0..2)
        .map(|_| random_ctrl(&mut r, 4))
        .collect::<Result<_>>()?;
    let assignment = Assignment::from_pairs(vec![(0, 1), (2, 0)], 0.0);
    let flat: Vec<f64> = pred
        .iter()
        .flat_map(|c| c.points().iter().flatten().copied())
        .collect();
    let rebuild = |x: &[f64]| -> Vec<ControlPointSet> {
        x.chunks(12)
            .map(|c| {
                ControlPointSet::new(c.chunks(3).map(|p| [p[0], p[1], p[2]]).collect()).unwrap()
            })
            .collect()
    };
    let analytic: Vec<f64> = l1_regression_grad(&pred, &gt, &assignment)
        .into_iter()
        .flatten()
        .collect();
    let numeric = central_difference(
        |x| l1_regression_loss(&rebuild(x), &gt, &assignment).unwrap(),
        &flat,
        FD_STEP,
    );
    let mut t = Tally::new("l1_regression");
    t.add(&analytic, &numeric);
    Ok(t.finish())
}

fn check_mask_bce(seed: u64) -> Result<GradCheckEntry> {
    let mut r = rng::stream(seed, 0x07);
    let (h, w) = (6, 5);
    let logits: Vec<f64> = (0..h * w).map(|_| r.random_range(-2.0..2.0)).collect();
    let gt: Vec<f64> = (0..h * w).map(|_| r.random_range(0..2) as f64).collect();
    let points = sample_points(h, w, 40, seed);
    let analytic = mask_bce_grad(&logits, &gt, h, w, &points);
    let numeric = central_difference(
        |x| mask_bce_from_logits(x, &gt, h, w, &points).unwrap(),
        &logits,
        FD_STEP,
    );
    let mut t = Tally::new("mask_bce");
    t.add(&analytic, &numeric);
    Ok(t.finish())
}

/// Runs every check for one seed.
pub fn run_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let entries = vec![
        check_bilinear(seed)?,
        check_spda(seed)?,
        check_mpda(seed)?,
        check_bda(seed)?,
        check_standard(seed)?,
        check_l1(seed)?,
        check_mask_bce(seed)?,
    ];
    let max_rel_error = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        seed,
        entries,
        max_rel_error,
    })
}
