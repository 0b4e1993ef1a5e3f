//! JSON file schemas and atomic file I/O.
//!
//! Scene files:
//!
//! ```text
//! { schema_version, grid: {h, w, cell_m}, channels, features: [row-major f64],
//!   instances: [{ctrl: [[x, y, z], ...], class, mask_rle: [n0, n1, ...]}],
//!   adjacency: [[i, j], ...], seed }
//! ```
//!
//! `mask_rle` lists alternating run lengths starting with a (possibly empty)
//! run of zeros. Floats use the shortest representation that parses back to
//! the identical `f64`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bezier::{sample_curve, ControlPointSet, Point3, Polyline};
use crate::decoder::QueryState;
use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, GridSpec};
use crate::losses::{GroundTruth, GtInstance};
use crate::metrics::{evaluate, EvalConfig, MetricReport, ScoredEdge, ScoredPolyline};
use crate::scene::Scene;

pub const SCHEMA_VERSION: u32 = 1;
/// Sampling intervals per polyline written to prediction files (11 points).
pub const POLYLINE_SEGMENTS: usize = 10;
pub const OUT_DIR_ENV: &str = "LANEGRAPH_OUT_DIR";

/// Directory for relative output paths: `$LANEGRAPH_OUT_DIR` or the working directory.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Resolves a user-supplied output path against [`default_out_dir`].
pub fn resolve_out_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        default_out_dir().join(path)
    }
}

/// Writes `bytes` to a temp file in the target directory, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json_pretty(value)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn rle_encode(mask: &[u8]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut count = 0u32;
    for &m in mask {
        if m == current {
            count += 1;
        } else {
            runs.push(count);
            current = m;
            count = 1;
        }
    }
    runs.push(count);
    runs
}

pub fn rle_decode(runs: &[u32], len: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(len);
    for (k, &n) in runs.iter().enumerate() {
        out.extend(std::iter::repeat_n((k % 2) as u8, n as usize));
    }
    if out.len() != len {
        return Err(Error::Validation(format!(
            "mask RLE covers {} cells, expected {len}",
            out.len()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub ctrl: Vec<Point3>,
    pub class: usize,
    pub mask_rle: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub schema_version: u32,
    pub grid: GridSpec,
    pub channels: usize,
    pub features: Vec<f64>,
    pub instances: Vec<InstanceRecord>,
    pub adjacency: Vec<[usize; 2]>,
    pub seed: u64,
}

impl SceneFile {
    pub fn from_scene(scene: &Scene) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            grid: scene.grid,
            channels: scene.features.channels(),
            features: scene.features.data().to_vec(),
            instances: scene
                .gt
                .instances
                .iter()
                .map(|i| InstanceRecord {
                    ctrl: i.ctrl.points().to_vec(),
                    class: i.class,
                    mask_rle: rle_encode(&i.mask),
                })
                .collect(),
            adjacency: scene.gt.adjacency.iter().map(|&(a, b)| [a, b]).collect(),
            seed: scene.seed,
        }
    }

    pub fn into_scene(self) -> Result<Scene> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "unsupported scene schema_version {}",
                self.schema_version
            )));
        }
        self.grid.validate()?;
        let cells = self.grid.h * self.grid.w;
        let instances = self
            .instances
            .into_iter()
            .map(|r| {
                Ok(GtInstance {
                    ctrl: ControlPointSet::new(r.ctrl)?,
                    mask: rle_decode(&r.mask_rle, cells)?,
                    class: r.class,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let features = FeatureGrid::with_cell_size(
            self.grid.h,
            self.grid.w,
            self.channels,
            self.grid.cell_m,
            self.features,
        )?;
        Ok(Scene {
            grid: self.grid,
            gt: GroundTruth::new(
                self.grid.h,
                self.grid.w,
                instances,
                self.adjacency.into_iter().map(|[a, b]| (a, b)).collect(),
            )?,
            features,
            seed: self.seed,
        })
    }
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<()> {
    write_json(path, &SceneFile::from_scene(scene))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    read_json::<SceneFile>(path)?.into_scene()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedInstance {
    pub ctrl: Vec<Point3>,
    pub polyline: Vec<Point3>,
    pub confidence: f64,
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_logits: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub schema_version: u32,
    pub instances: Vec<PredictedInstance>,
    pub adjacency: Vec<ScoredEdge>,
}

fn instance_from_ctrl(
    ctrl: &ControlPointSet,
    confidence: f64,
    class: usize,
) -> Result<PredictedInstance> {
    Ok(PredictedInstance {
        ctrl: ctrl.points().to_vec(),
        polyline: sample_curve(ctrl, POLYLINE_SEGMENTS)?.points().to_vec(),
        confidence,
        class,
        mask_logits: None,
    })
}

impl PredictionFile {
    /// One-to-one predictions of a decoder state. Confidence is the best
    /// foreground probability; the decoder has no topology head, so the
    /// adjacency list is empty.
    pub fn from_state(state: &QueryState, with_masks: bool) -> Result<Self> {
        let head = state.one_to_one();
        let mut instances = Vec::with_capacity(head.len());
        for q in 0..head.len() {
            let prob = head.class_prob(q);
            let fg = &prob[..prob.len() - 1];
            let (class, &confidence) = fg
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .ok_or_else(|| Error::Shape("class logits need a foreground class".into()))?;
            let mut inst = instance_from_ctrl(&head.ctrl[q], confidence, class)?;
            if with_masks {
                inst.mask_logits = Some(head.pre_mask[q].clone());
            }
            instances.push(inst);
        }
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            instances,
            adjacency: Vec::new(),
        })
    }

    /// Fitted or hand-built control points with fixed confidence.
    pub fn from_ctrl(
        ctrl: &[ControlPointSet],
        confidence: f64,
        adjacency: &[(usize, usize)],
    ) -> Result<Self> {
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            instances: ctrl
                .iter()
                .map(|c| instance_from_ctrl(c, confidence, 0))
                .collect::<Result<_>>()?,
            adjacency: adjacency
                .iter()
                .map(|&(from, to)| ScoredEdge {
                    from,
                    to,
                    score: 1.0,
                })
                .collect(),
        })
    }

    /// GT written as predictions (confidence 1, edges scored 1).
    pub fn from_ground_truth(gt: &GroundTruth) -> Result<Self> {
        let ctrl: Vec<ControlPointSet> = gt.instances.iter().map(|i| i.ctrl.clone()).collect();
        let mut f = Self::from_ctrl(&ctrl, 1.0, &gt.adjacency)?;
        for (inst, g) in f.instances.iter_mut().zip(&gt.instances) {
            inst.class = g.class;
        }
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "unsupported prediction schema_version {}",
                self.schema_version
            )));
        }
        for (i, inst) in self.instances.iter().enumerate() {
            if !(0.0..=1.0).contains(&inst.confidence) {
                return Err(Error::Validation(format!(
                    "instance {i}: confidence {} outside [0, 1]",
                    inst.confidence
                )));
            }
            let ctrl = ControlPointSet::new(inst.ctrl.clone())?;
            if inst.polyline.len() < 2 {
                return Err(Error::Validation(format!(
                    "instance {i}: polyline needs at least 2 points"
                )));
            }
            let expect = sample_curve(&ctrl, inst.polyline.len() - 1)?;
            let max_dev = expect
                .points()
                .iter()
                .zip(&inst.polyline)
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
                .fold(0.0, f64::max);
            if max_dev.is_nan() || max_dev > 1e-9 {
                return Err(Error::Validation(format!(
                    "instance {i}: polyline deviates from its control points by {max_dev:e}"
                )));
            }
        }
        let n = self.instances.len();
        for e in &self.adjacency {
            if e.from >= n || e.to >= n {
                return Err(Error::Validation(format!(
                    "edge ({}, {}) references a missing instance",
                    e.from, e.to
                )));
            }
            if !e.score.is_finite() {
                return Err(Error::Validation("edge score must be finite".into()));
            }
        }
        Ok(())
    }
}

fn to_meters(points: &[Point3], spec: GridSpec) -> Result<Polyline> {
    Polyline::new(points.iter().map(|&p| spec.to_meters(p)).collect())
}

/// Evaluates a prediction file against a scene's GT.
pub fn evaluate_predictions(
    pred: &PredictionFile,
    scene: &Scene,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    pred.validate()?;
    let preds = pred
        .instances
        .iter()
        .map(|i| {
            Ok(ScoredPolyline {
                polyline: to_meters(&i.polyline, scene.grid)?,
                score: i.confidence,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let gts = scene
        .gt
        .instances
        .iter()
        .map(|g| {
            to_meters(
                sample_curve(&g.ctrl, POLYLINE_SEGMENTS)?.points(),
                scene.grid,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&preds, &pred.adjacency, &gts, &scene.gt.adjacency, cfg)
}
