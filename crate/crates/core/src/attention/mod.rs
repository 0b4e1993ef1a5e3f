//! Cross-attention variants over a BEV feature grid.
//!
//! All deformable variants share one kernel: every head owns an anchor
//! point, predicts `K` offsets and `K` softmax-normalised weights from the
//! query, and gathers a `d_model / heads` channel slice of the value grid at
//! the offset locations. The variants differ only in where anchors come from:
//!
//! | variant | anchors |
//! |---------|---------|
//! | SPDA    | one reference point, regressed from the curve, shared by all heads |
//! | MPDA    | `L + 1` polyline points obtained from the control points by `P = B C` |
//! | BDA     | the `N + 1` control points directly |
//!
//! Standard attention (SA) attends densely over every grid cell.

mod deformable;
mod ops;
mod standard;

pub use deformable::{
    bda, bda_projected, mpda, mpda_from_ctrl, mpda_projected, spda, spda_from_ctrl, spda_projected,
    AttendGrad, DeformAttnParams, ReferenceHead, ValueGrid,
};
pub use ops::{count_ops, AttnConfig, OpCounter, Variant};
pub use standard::{standard_cross_attention, KeyValues, StandardAttnGrad, StandardAttnParams};
