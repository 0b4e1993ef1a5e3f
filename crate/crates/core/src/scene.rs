//! Synthetic BEV scenes: random Bezier centerlines with shared-endpoint
//! connectivity, rasterized instance masks and a feature grid that encodes
//! the GT geometry as smoothed distance fields plus noise.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bezier::{sample_curve, ControlPointSet, Polyline, DEFAULT_ORDER};
use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, GridSpec};
use crate::losses::{GroundTruth, GtInstance};
use crate::rng;

pub const DEFAULT_MASK_WIDTH: usize = 4;
pub const DESK_CHANNELS: usize = 16;
pub const PAPER_CHANNELS: usize = 256;
/// Curve samples used for rasterization and distance fields.
const RASTER_SAMPLES: usize = 64;
/// Gaussian falloff (in cells) of the per-instance feature fields.
const FIELD_SIGMA_CELLS: f64 = 2.0;
const BOX_LO: f64 = 0.1;
const BOX_HI: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub grid: GridSpec,
    pub channels: usize,
    pub mask_width: usize,
    pub noise_std: f64,
}

impl SceneConfig {
    pub fn desk() -> Self {
        Self {
            grid: GridSpec::desk(),
            channels: DESK_CHANNELS,
            mask_width: DEFAULT_MASK_WIDTH,
            noise_std: 0.1,
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            grid: GridSpec::paper_scale(),
            channels: PAPER_CHANNELS,
            ..Self::desk()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub grid: GridSpec,
    pub gt: GroundTruth,
    pub features: FeatureGrid,
    pub seed: u64,
}

/// Distance in cells from every cell center to the polyline, row-major.
/// The polyline is in normalized coordinates (only `x`, `y` are used).
pub fn distance_field(poly: &Polyline, spec: GridSpec) -> Vec<f64> {
    let lattice: Vec<[f64; 2]> = poly
        .points()
        .iter()
        .map(|p| [p[0] * spec.w as f64 - 0.5, p[1] * spec.h as f64 - 0.5])
        .collect();
    let mut out = Vec::with_capacity(spec.h * spec.w);
    for i in 0..spec.h {
        for j in 0..spec.w {
            let c = [j as f64, i as f64];
            let d = if lattice.len() == 1 {
                point_distance(c, lattice[0])
            } else {
                lattice
                    .windows(2)
                    .map(|s| segment_distance(c, s[0], s[1]))
                    .fold(f64::INFINITY, f64::min)
            };
            out.push(d);
        }
    }
    out
}

fn point_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    point_distance(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

/// Binary mask: a cell is on iff its center lies within `width_cells / 2`
/// cells of the polyline.
pub fn rasterize_centerline(
    poly: &Polyline,
    spec: GridSpec,
    width_cells: usize,
) -> Result<Vec<u8>> {
    if poly.is_empty() {
        return Err(Error::Domain("cannot rasterize an empty polyline".into()));
    }
    if width_cells == 0 {
        return Err(Error::Domain("mask width must be at least one cell".into()));
    }
    spec.validate()?;
    let half = width_cells as f64 / 2.0;
    Ok(distance_field(poly, spec)
        .iter()
        .map(|&d| (d <= half) as u8)
        .collect())
}

fn random_curve<R: Rng>(r: &mut R, start: [f64; 3], order: usize) -> Result<ControlPointSet> {
    let mut end = start;
    for _ in 0..32 {
        let angle: f64 = r.random_range(0.0..std::f64::consts::TAU);
        let len: f64 = r.random_range(0.2..0.4);
        let (x, y) = (start[0] + len * angle.cos(), start[1] + len * angle.sin());
        end = [
            x.clamp(BOX_LO, BOX_HI),
            y.clamp(BOX_LO, BOX_HI),
            r.random_range(0.45..0.55),
        ];
        if (BOX_LO..=BOX_HI).contains(&x) && (BOX_LO..=BOX_HI).contains(&y) {
            break;
        }
    }
    let dir = [end[0] - start[0], end[1] - start[1]];
    let norm = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt().max(1e-12);
    let perp = [-dir[1] / norm, dir[0] / norm];
    let bend: f64 = r.random_range(-0.06..0.06);
    let mut pts = Vec::with_capacity(order + 1);
    for n in 0..=order {
        if n == 0 {
            pts.push(start);
            continue;
        }
        if n == order {
            pts.push(end);
            continue;
        }
        let t = n as f64 / order as f64;
        let swing = bend * 4.0 * t * (1.0 - t) + r.random_range(-0.01..0.01);
        let p = [
            (start[0] + t * dir[0] + swing * perp[0]).clamp(BOX_LO, BOX_HI),
            (start[1] + t * dir[1] + swing * perp[1]).clamp(BOX_LO, BOX_HI),
            (start[2] + t * (end[2] - start[2]) + r.random_range(-0.01..0.01))
                .clamp(BOX_LO, BOX_HI),
        ];
        pts.push(p);
    }
    ControlPointSet::new(pts)
}

/// Desk-scale scene (32×32 grid, 16 channels).
pub fn generate_scene(seed: u64, n_instances: usize, order: usize) -> Result<Scene> {
    generate_scene_with(seed, n_instances, order, &SceneConfig::desk())
}

/// Scene with `n_instances` curves of the given order. Each new curve starts
/// at a previous curve's end with probability ½ (recording the edge
/// `previous → new`), otherwise at a random point.
pub fn generate_scene_with(
    seed: u64,
    n_instances: usize,
    order: usize,
    cfg: &SceneConfig,
) -> Result<Scene> {
    cfg.grid.validate()?;
    if order == 0 {
        return Err(Error::Domain("curve order must be at least 1".into()));
    }
    if cfg.channels == 0 {
        return Err(Error::Validation(
            "scene needs at least one feature channel".into(),
        ));
    }
    let spec = cfg.grid;
    let mut r = rng::stream(seed, 0x7363_656e);
    let mut instances = Vec::with_capacity(n_instances);
    let mut adjacency = Vec::new();
    let mut fields = Vec::with_capacity(n_instances);
    for k in 0..n_instances {
        let start = if k > 0 && r.random_bool(0.5) {
            let prev = r.random_range(0..k);
            adjacency.push((prev, k));
            let c: &GtInstance = &instances[prev];
            *c.ctrl.points().last().unwrap()
        } else {
            [
                r.random_range(0.15..0.85),
                r.random_range(0.15..0.85),
                r.random_range(0.45..0.55),
            ]
        };
        let ctrl = random_curve(&mut r, start, order)?;
        let dist = distance_field(&sample_curve(&ctrl, RASTER_SAMPLES)?, spec);
        let half = cfg.mask_width as f64 / 2.0;
        let mask = dist.iter().map(|&d| (d <= half) as u8).collect();
        instances.push(GtInstance {
            ctrl,
            mask,
            class: 0,
        });
        fields.push(dist);
    }

    let mut fr = rng::stream(seed, 0x6665_6174);
    let embeddings: Vec<Vec<f64>> = (0..n_instances)
        .map(|_| {
            (0..cfg.channels)
                .map(|_| StandardNormal.sample(&mut fr))
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Validation(e.to_string()))?;
    let mut data = Vec::with_capacity(spec.h * spec.w * cfg.channels);
    for cell in 0..spec.h * spec.w {
        let weights: Vec<f64> = fields
            .iter()
            .map(|f| (-f[cell] * f[cell] / (2.0 * FIELD_SIGMA_CELLS * FIELD_SIGMA_CELLS)).exp())
            .collect();
        for c in 0..cfg.channels {
            let signal: f64 = weights.iter().zip(&embeddings).map(|(w, e)| w * e[c]).sum();
            data.push(signal + noise.sample(&mut fr));
        }
    }
    let features = FeatureGrid::with_cell_size(spec.h, spec.w, cfg.channels, spec.cell_m, data)?;
    Ok(Scene {
        grid: spec,
        gt: GroundTruth::new(spec.h, spec.w, instances, adjacency)?,
        features,
        seed,
    })
}

/// Desk scene with the default curve order.
pub fn desk_scene(seed: u64, n_instances: usize) -> Result<Scene> {
    generate_scene(seed, n_instances, DEFAULT_ORDER)
}
