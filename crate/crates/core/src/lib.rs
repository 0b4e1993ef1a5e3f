//! Bezier centerline machinery for bird's-eye-view lane-graph experiments.
//!
//! The crate is organised bottom-up:
//!
//! - [`bezier`]: Bernstein basis, control-point to polyline conversion, least-squares fitting.
//! - [`grid`]: BEV feature grids and bilinear sampling with analytic gradients.
//! - [`attention`]: standard, single-point, multi-point and Bezier deformable cross-attention
//!   plus deterministic operation counting.
//! - [`decoder`]: the iterative-refinement decoder with the auxiliary instance-mask head and
//!   block-masked self-attention for one-to-many training.
//! - [`matching`]: Hungarian assignment under the Mask-L1 mix cost.
//! - [`losses`]: regression, point-sampled mask, classification and total losses.
//! - [`metrics`]: Fréchet/Chamfer detection AP, topology AP and the OLS_l aggregate.
//! - [`scene`], [`io`], [`fit`], [`gradcheck`]: synthetic scenes, file formats and harness drivers.

pub mod attention;
pub mod bezier;
pub mod decoder;
pub mod error;
pub mod fit;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scene;

pub use error::{Error, Result};
