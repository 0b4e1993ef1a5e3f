//! BEV feature grids and bilinear sampling.
//!
//! Normalized coordinates `(x, y) ∈ [0, 1]²` map to continuous cell
//! coordinates with the align-corners-false convention `u = x·W − 0.5`,
//! `v = y·H − 0.5`, so the center of cell `(i, j)` sits at
//! `x = (j + 0.5) / W`, `y = (i + 0.5) / H`. Neighbors outside the grid
//! contribute zero. `x` indexes columns (width), `y` indexes rows (height).

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CELL_SIZE_M: f64 = 0.5;

/// Height span in meters covered by normalized `z ∈ [0, 1]`, centered on 0.
pub const Z_RANGE_M: f64 = 20.0;

/// Extent of a BEV grid: `h` rows, `w` columns, `cell_m` meters per cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
    pub cell_m: f64,
}

impl GridSpec {
    pub fn desk() -> Self {
        Self {
            h: 32,
            w: 32,
            cell_m: DEFAULT_CELL_SIZE_M,
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            h: 200,
            w: 104,
            cell_m: DEFAULT_CELL_SIZE_M,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(Error::Validation("grid dimensions must be positive".into()));
        }
        if !(self.cell_m.is_finite() && self.cell_m > 0.0) {
            return Err(Error::Validation("cell size must be positive".into()));
        }
        Ok(())
    }

    /// Normalized point to meters: `(x·W·cell, y·H·cell, z·Z_RANGE − Z_RANGE/2)`.
    pub fn to_meters(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0] * self.w as f64 * self.cell_m,
            p[1] * self.h as f64 * self.cell_m,
            p[2] * Z_RANGE_M - Z_RANGE_M / 2.0,
        ]
    }
}

/// Continuous sampling location in normalized grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub x: f64,
    pub y: f64,
}

impl SamplePoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Normalized location of the center of cell `(row, col)`.
    pub fn cell_center(row: usize, col: usize, height: usize, width: usize) -> Self {
        Self {
            x: (col as f64 + 0.5) / width as f64,
            y: (row as f64 + 0.5) / height as f64,
        }
    }

    fn check(&self) -> Result<()> {
        if self.x.is_nan() || self.y.is_nan() {
            Err(Error::Domain("NaN sample coordinate".into()))
        } else {
            Ok(())
        }
    }
}

/// One of the four bilinear taps: flat cell index (if in bounds) and weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub cell: Option<usize>,
    pub weight: f64,
}

/// Bilinear stencil of a point: four taps plus the derivatives of each tap
/// weight with respect to `x` and `y`.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    taps: [Tap; 4],
    d_dx: [f64; 4],
    d_dy: [f64; 4],
}

fn stencil(height: usize, width: usize, p: SamplePoint) -> Stencil {
    let u = p.x * width as f64 - 0.5;
    let v = p.y * height as f64 - 0.5;
    let j0 = u.floor();
    let i0 = v.floor();
    let fu = u - j0;
    let fv = v - i0;
    let cell = |i: f64, j: f64| -> Option<usize> {
        if i >= 0.0 && j >= 0.0 && (i as usize) < height && (j as usize) < width {
            Some(i as usize * width + j as usize)
        } else {
            None
        }
    };
    let (w, h) = (width as f64, height as f64);
    Stencil {
        taps: [
            Tap {
                cell: cell(i0, j0),
                weight: (1.0 - fv) * (1.0 - fu),
            },
            Tap {
                cell: cell(i0, j0 + 1.0),
                weight: (1.0 - fv) * fu,
            },
            Tap {
                cell: cell(i0 + 1.0, j0),
                weight: fv * (1.0 - fu),
            },
            Tap {
                cell: cell(i0 + 1.0, j0 + 1.0),
                weight: fv * fu,
            },
        ],
        d_dx: [-(1.0 - fv) * w, (1.0 - fv) * w, -fv * w, fv * w],
        d_dy: [-(1.0 - fu) * h, -fu * h, (1.0 - fu) * h, fu * h],
    }
}

/// `H × W × C` feature map stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    cell_size_m: f64,
    data: Vec<f64>,
}

/// Analytic derivatives of one bilinear read.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrad {
    pub value: Vec<f64>,
    /// `∂out_c/∂x` per channel.
    pub d_dx: Vec<f64>,
    /// `∂out_c/∂y` per channel.
    pub d_dy: Vec<f64>,
    /// `∂out_c/∂data[cell, c]` for each in-bounds tap (identical across channels).
    pub taps: Vec<(usize, f64)>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Self::with_cell_size(height, width, channels, DEFAULT_CELL_SIZE_M, data)
    }

    pub fn with_cell_size(
        height: usize,
        width: usize,
        channels: usize,
        cell_size_m: f64,
        data: Vec<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape("grid dimensions must be positive".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "grid data has {} values, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("grid values must be finite".into()));
        }
        if !(cell_size_m.is_finite() && cell_size_m > 0.0) {
            return Err(Error::Domain("cell size must be positive".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            cell_size_m,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![0.0; height * width * channels],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cell_size_m(&self) -> f64 {
        self.cell_size_m
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn cell_flat(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    /// Applies a per-cell linear map, producing a new grid with `out` channels.
    pub fn map_cells(&self, out: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let mut data = Vec::with_capacity(self.cells() * out);
        for idx in 0..self.cells() {
            let v = f(self.cell_flat(idx));
            debug_assert_eq!(v.len(), out);
            data.extend(v);
        }
        Self::with_cell_size(self.height, self.width, out, self.cell_size_m, data)
    }

    /// Bilinear read restricted to a channel range, accumulated into `out`
    /// with an extra scalar factor. Returns the number of multiply-accumulates.
    pub fn accumulate(
        &self,
        p: SamplePoint,
        channels: Range<usize>,
        scale: f64,
        out: &mut [f64],
    ) -> u64 {
        let s = stencil(self.height, self.width, p);
        let mut macs = 0;
        for tap in s.taps {
            if let Some(cell) = tap.cell {
                let w = tap.weight * scale;
                let base = cell * self.channels;
                for (o, c) in out.iter_mut().zip(channels.clone()) {
                    *o += w * self.data[base + c];
                }
                macs += channels.len() as u64;
            }
        }
        macs
    }

    fn read(&self, p: SamplePoint, channels: Range<usize>) -> Vec<f64> {
        let mut out = vec![0.0; channels.len()];
        let s = stencil(self.height, self.width, p);
        for tap in s.taps {
            if let Some(cell) = tap.cell {
                let base = cell * self.channels;
                for (o, c) in out.iter_mut().zip(channels.clone()) {
                    *o += tap.weight * self.data[base + c];
                }
            }
        }
        out
    }

    /// Bilinear read of all channels at one point.
    pub fn sample(&self, p: SamplePoint) -> Result<Vec<f64>> {
        p.check()?;
        Ok(self.read(p, 0..self.channels))
    }

    /// Bilinear read of a channel slice at one point.
    pub fn sample_channels(&self, p: SamplePoint, channels: Range<usize>) -> Result<Vec<f64>> {
        p.check()?;
        Ok(self.read(p, channels))
    }

    /// Analytic derivatives of the bilinear read on a channel slice.
    ///
    /// On lattice lines the stencil uses the cell to the right/below, so the
    /// returned `x`/`y` derivatives are the one-sided derivatives from that side.
    pub fn sample_grad_channels(
        &self,
        p: SamplePoint,
        channels: Range<usize>,
    ) -> Result<SampleGrad> {
        p.check()?;
        let s = stencil(self.height, self.width, p);
        let n = channels.len();
        let mut g = SampleGrad {
            value: vec![0.0; n],
            d_dx: vec![0.0; n],
            d_dy: vec![0.0; n],
            taps: Vec::with_capacity(4),
        };
        for (t, tap) in s.taps.iter().enumerate() {
            if let Some(cell) = tap.cell {
                let base = cell * self.channels;
                for (o, c) in channels.clone().enumerate() {
                    let v = self.data[base + c];
                    g.value[o] += tap.weight * v;
                    g.d_dx[o] += s.d_dx[t] * v;
                    g.d_dy[o] += s.d_dy[t] * v;
                }
                g.taps.push((cell, tap.weight));
            }
        }
        Ok(g)
    }
}

/// Bilinear read of every point (all channels).
pub fn bilinear_sample(grid: &FeatureGrid, pts: &[SamplePoint]) -> Result<Vec<Vec<f64>>> {
    pts.iter().map(|&p| grid.sample(p)).collect()
}

/// Analytic gradients of [`bilinear_sample`] for every point.
pub fn bilinear_sample_grad(grid: &FeatureGrid, pts: &[SamplePoint]) -> Result<Vec<SampleGrad>> {
    pts.iter()
        .map(|&p| grid.sample_grad_channels(p, 0..grid.channels()))
        .collect()
}

/// Bilinear read of a single-channel `H × W` map (used for mask probabilities).
pub fn sample_map(map: &[f64], height: usize, width: usize, p: SamplePoint) -> f64 {
    debug_assert_eq!(map.len(), height * width);
    stencil(height, width, p)
        .taps
        .iter()
        .filter_map(|t| t.cell.map(|c| t.weight * map[c]))
        .sum()
}

/// In-bounds taps of a single-channel read; `∂value/∂map[cell] = weight`.
pub fn map_taps(height: usize, width: usize, p: SamplePoint) -> Vec<(usize, f64)> {
    stencil(height, width, p)
        .taps
        .iter()
        .filter_map(|t| t.cell.map(|c| (c, t.weight)))
        .collect()
}
