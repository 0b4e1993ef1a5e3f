//! Bernstein basis evaluation, control-point ↔ polyline conversion and
//! least-squares Bezier fitting.
//!
//! A curve of order `N` is defined by `N + 1` control points and is evaluated
//! as `S(t) = Σ_n B_{n,N}(t) c_n`. Sampling `L + 1` uniformly spaced
//! parameters turns the evaluation into the matrix product `P = B C` where
//! `B` is the `(L+1) × (N+1)` [`BernsteinMatrix`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Default curve order (four control points).
pub const DEFAULT_ORDER: usize = 3;
/// Supported range of configurable orders.
pub const MIN_ORDER: usize = 1;
pub const MAX_ORDER: usize = 20;

/// `N + 1` Bezier control points with `N ≥ 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ControlPointSet {
    points: Vec<Point3>,
}

impl ControlPointSet {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Domain(format!(
                "a Bezier curve needs at least 2 control points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite control point".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn points_mut(&mut self) -> &mut [Point3] {
        &mut self.points
    }

    /// Curve order `N`.
    pub fn order(&self) -> usize {
        self.points.len() - 1
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// True when every component lies in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.points
            .iter()
            .flatten()
            .all(|v| (0.0..=1.0).contains(v))
    }

    /// Projection to the ground plane (height discarded).
    pub fn xy(&self) -> Vec<[f64; 2]> {
        self.points.iter().map(|p| [p[0], p[1]]).collect()
    }

    /// `α·self + β·other`.
    pub fn combine(&self, alpha: f64, other: &Self, beta: f64) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::Shape("control point sets of different order".into()));
        }
        let points = self
            .points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| std::array::from_fn(|k| alpha * a[k] + beta * b[k]))
            .collect();
        Ok(Self { points })
    }
}

/// Ordered sequence of at least two points; direction matters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polyline {
    points: Vec<Point3>,
}

impl Polyline {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Domain(format!(
                "a polyline needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite polyline point".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn first(&self) -> Point3 {
        self.points[0]
    }

    pub fn last(&self) -> Point3 {
        self.points[self.points.len() - 1]
    }

    pub fn reversed(&self) -> Self {
        let mut points = self.points.clone();
        points.reverse();
        Self { points }
    }

    pub fn translated(&self, delta: Point3) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]])
                .collect(),
        }
    }

    /// Applies a per-axis scale and offset, e.g. normalized → metric.
    pub fn affine(&self, scale: Point3, offset: Point3) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| std::array::from_fn(|k| p[k] * scale[k] + offset[k]))
                .collect(),
        }
    }

    /// Total Euclidean length.
    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| dist3(&w[0], &w[1])).sum()
    }

    /// Resamples to `count` points equally spaced in arc length.
    pub fn resample(&self, count: usize) -> Result<Self> {
        if count < 2 {
            return Err(Error::Domain("resampling needs at least 2 points".into()));
        }
        let mut cumulative = Vec::with_capacity(self.points.len());
        cumulative.push(0.0);
        for w in self.points.windows(2) {
            let last = *cumulative.last().unwrap();
            cumulative.push(last + dist3(&w[0], &w[1]));
        }
        let total = *cumulative.last().unwrap();
        if total == 0.0 {
            return Ok(Self {
                points: vec![self.points[0]; count],
            });
        }
        let mut out = Vec::with_capacity(count);
        let mut seg = 0;
        for i in 0..count {
            if i == count - 1 {
                out.push(self.last());
                break;
            }
            let target = total * i as f64 / (count - 1) as f64;
            while seg + 1 < cumulative.len() - 1 && cumulative[seg + 1] < target {
                seg += 1;
            }
            let span = cumulative[seg + 1] - cumulative[seg];
            let f = if span > 0.0 {
                ((target - cumulative[seg]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (a, b) = (self.points[seg], self.points[seg + 1]);
            out.push(std::array::from_fn(|k| a[k] + f * (b[k] - a[k])));
        }
        Ok(Self { points: out })
    }
}

#[inline]
pub fn dist3(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Binomial coefficient by multiplicative recurrence; exact in `f64` for `n ≤ 20`.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c.round()
}

/// `B_{n,N}(t) = C(N,n) tⁿ (1-t)^(N-n)`.
pub fn bernstein_basis(n: usize, order: usize, t: f64) -> Result<f64> {
    if n > order {
        return Err(Error::Domain(format!(
            "basis index {n} exceeds order {order}"
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("parameter t = {t} outside [0, 1]")));
    }
    Ok(basis_unchecked(n, order, t))
}

#[inline]
fn basis_unchecked(n: usize, order: usize, t: f64) -> f64 {
    binomial(order, n) * t.powi(n as i32) * (1.0 - t).powi((order - n) as i32)
}

/// `(L+1) × (N+1)` matrix of Bernstein weights at parameters `t_values`.
#[derive(Debug, Clone, PartialEq)]
pub struct BernsteinMatrix {
    order: usize,
    t_values: Vec<f64>,
    entries: Vec<f64>,
}

impl BernsteinMatrix {
    /// Builds the matrix for arbitrary parameters in `[0, 1]`.
    pub fn at(order: usize, t_values: Vec<f64>) -> Result<Self> {
        if order < MIN_ORDER {
            return Err(Error::Domain("Bezier order must be at least 1".into()));
        }
        if t_values.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Domain(
                "Bernstein parameters must lie in [0, 1]".into(),
            ));
        }
        let mut entries = Vec::with_capacity(t_values.len() * (order + 1));
        for &t in &t_values {
            for n in 0..=order {
                entries.push(basis_unchecked(n, order, t));
            }
        }
        Ok(Self {
            order,
            t_values,
            entries,
        })
    }

    pub fn rows(&self) -> usize {
        self.t_values.len()
    }

    pub fn cols(&self) -> usize {
        self.order + 1
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn t_values(&self) -> &[f64] {
        &self.t_values
    }

    pub fn get(&self, l: usize, n: usize) -> f64 {
        self.entries[l * self.cols() + n]
    }

    pub fn row(&self, l: usize) -> &[f64] {
        &self.entries[l * self.cols()..(l + 1) * self.cols()]
    }

    /// `P = B C`. Endpoint rows reproduce `c_0` and `c_N` exactly.
    pub fn apply(&self, ctrl: &ControlPointSet) -> Result<Polyline> {
        if ctrl.len() != self.cols() {
            return Err(Error::Shape(format!(
                "matrix expects {} control points, got {}",
                self.cols(),
                ctrl.len()
            )));
        }
        let points = (0..self.rows())
            .map(|l| {
                let row = self.row(l);
                let mut p = [0.0; 3];
                for (w, c) in row.iter().zip(ctrl.points()) {
                    for k in 0..3 {
                        p[k] += w * c[k];
                    }
                }
                p
            })
            .collect();
        Polyline::new(points)
    }

    /// Multiply-accumulate count of [`BernsteinMatrix::apply`] over `dims` coordinates.
    pub fn apply_macs(&self, dims: usize) -> u64 {
        (self.rows() * self.cols() * dims) as u64
    }
}

/// Matrix with `t_l = l / L`, `l = 0..=L`.
pub fn bernstein_matrix(order: usize, samples: usize) -> Result<BernsteinMatrix> {
    if samples < 1 {
        return Err(Error::Domain("need at least one sampling interval".into()));
    }
    let t = (0..=samples).map(|l| l as f64 / samples as f64).collect();
    BernsteinMatrix::at(order, t)
}

/// Samples `L + 1` uniformly spaced points of the curve.
pub fn sample_curve(ctrl: &ControlPointSet, samples: usize) -> Result<Polyline> {
    bernstein_matrix(ctrl.order(), samples)?.apply(ctrl)
}

/// How parameters are assigned to polyline points when fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Parameterization {
    /// `t_l = l / L`; exact inverse of [`sample_curve`].
    #[default]
    UniformIndex,
    /// Normalized cumulative chord length.
    ChordLength,
}

/// Least-squares control points `argmin_C ‖B C − P‖²`.
pub fn fit_control_points(poly: &Polyline, order: usize) -> Result<ControlPointSet> {
    fit_control_points_with(poly, order, Parameterization::UniformIndex)
}

pub fn fit_control_points_with(
    poly: &Polyline,
    order: usize,
    parameterization: Parameterization,
) -> Result<ControlPointSet> {
    if !(MIN_ORDER..=MAX_ORDER).contains(&order) {
        return Err(Error::Fit(format!(
            "order {order} outside {MIN_ORDER}..={MAX_ORDER}"
        )));
    }
    let pts = poly.points();
    if pts.len() < order + 1 {
        return Err(Error::Fit(format!(
            "{} points cannot determine {} control points",
            pts.len(),
            order + 1
        )));
    }
    let total = poly.length();
    if total <= f64::EPSILON {
        return Err(Error::Fit(
            "degenerate polyline: all points coincide".into(),
        ));
    }
    let t_values: Vec<f64> = match parameterization {
        Parameterization::UniformIndex => {
            let l = (pts.len() - 1) as f64;
            (0..pts.len()).map(|i| i as f64 / l).collect()
        }
        Parameterization::ChordLength => {
            let mut acc = 0.0;
            let mut t = vec![0.0];
            for w in pts.windows(2) {
                acc += dist3(&w[0], &w[1]);
                t.push((acc / total).min(1.0));
            }
            t
        }
    };
    let basis = BernsteinMatrix::at(order, t_values)?;
    let b = DMatrix::from_fn(basis.rows(), basis.cols(), |r, c| basis.get(r, c));
    let p = DMatrix::from_fn(pts.len(), 3, |r, c| pts[r][c]);

    let svd = b.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= smax * 1e-12 {
        return Err(Error::Fit(
            "rank-deficient Bernstein system (duplicate parameters)".into(),
        ));
    }
    let c = svd
        .solve(&p, smax * 1e-14)
        .map_err(|e| Error::Fit(e.to_string()))?;
    ControlPointSet::new(
        (0..=order)
            .map(|r| [c[(r, 0)], c[(r, 1)], c[(r, 2)]])
            .collect(),
    )
}
