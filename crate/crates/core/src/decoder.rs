//! Iterative-refinement decoder with Bezier deformable cross-attention and an
//! auxiliary instance-mask head.
//!
//! Each layer:
//!
//! 1. builds sine positional embeddings from the current 2D control points,
//! 2. runs Bezier deformable attention with the control points as head anchors,
//! 3. applies block-masked multi-head self-attention and a feedforward block,
//! 4. refines control points additively in inverse-sigmoid space,
//! 5. adds `F_mask · MLP_M(E)` to the running pre-mask map,
//! 6. predicts class logits.
//!
//! In training mode the query set is the one-to-one block followed by `Q·R`
//! one-to-many queries; the self-attention mask keeps the two blocks from
//! seeing each other, so slicing the first `Q` rows reproduces an `R = 0` run.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::attention::{DeformAttnParams, OpCounter, ValueGrid};
use crate::bezier::ControlPointSet;
use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, SamplePoint};
use crate::nn::{dot, inverse_sigmoid, layer_norm, sigmoid, softmax, Linear, Mlp};
use crate::rng;

pub const POS_TEMPERATURE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_queries: usize,
    /// Foreground classes plus one trailing no-object class.
    pub n_classes: usize,
    pub one_to_many_r: usize,
    /// Control points per curve (`N + 1`); also the cross-attention head count.
    pub n_ctrl: usize,
    /// Offsets per cross-attention head.
    pub n_samples: usize,
    pub self_attn_heads: usize,
    pub ffn_hidden: usize,
    /// Sine features per coordinate axis.
    pub pos_feats: usize,
    /// Reuse one set of prediction heads for all refinement layers.
    pub shared_heads: bool,
}

impl DecoderConfig {
    /// Small configuration for tests and the CLI defaults.
    pub fn desk() -> Self {
        Self {
            n_layers: 3,
            d_model: 32,
            n_queries: 8,
            n_classes: 2,
            one_to_many_r: 0,
            n_ctrl: 4,
            n_samples: 4,
            self_attn_heads: 4,
            ffn_hidden: 64,
            pos_feats: 16,
            shared_heads: false,
        }
    }

    /// Full-size configuration (10 layers, 256 channels, 200 queries, 32 offsets).
    pub fn paper_scale() -> Self {
        Self {
            n_layers: 10,
            d_model: 256,
            n_queries: 200,
            n_classes: 2,
            one_to_many_r: 0,
            n_ctrl: 4,
            n_samples: 32,
            self_attn_heads: 8,
            ffn_hidden: 512,
            pos_feats: 128,
            shared_heads: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Validation("decoder needs at least one layer".into()));
        }
        if self.n_ctrl < 2 {
            return Err(Error::Validation(
                "curves need at least two control points".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_ctrl) {
            return Err(Error::Validation(format!(
                "d_model {} must be divisible by the {} control points",
                self.d_model, self.n_ctrl
            )));
        }
        if self.self_attn_heads == 0 || !self.d_model.is_multiple_of(self.self_attn_heads) {
            return Err(Error::Validation(
                "d_model must be divisible by the self-attention heads".into(),
            ));
        }
        if self.n_queries == 0 || self.n_classes < 2 || self.n_samples == 0 {
            return Err(Error::Validation(
                "queries, classes (≥2) and samples must be positive".into(),
            ));
        }
        if self.pos_feats == 0 || !self.pos_feats.is_multiple_of(2) {
            return Err(Error::Validation(
                "pos_feats must be a positive even number".into(),
            ));
        }
        Ok(())
    }

    /// Query count of a training-mode forward (`Q·(1 + R)`).
    pub fn total_queries(&self) -> usize {
        self.n_queries * (1 + self.one_to_many_r)
    }
}

/// Per-layer decoder state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryState {
    pub height: usize,
    pub width: usize,
    /// Size of the leading one-to-one block.
    pub n_one_to_one: usize,
    pub embeddings: Vec<Vec<f64>>,
    /// Normalized control points, strictly inside `(0, 1)`.
    pub ctrl: Vec<ControlPointSet>,
    /// Accumulated mask logits, one `H × W` map per query.
    pub pre_mask: Vec<Vec<f64>>,
    /// This layer's mask embedding `E_mask` (the increment is `F_mask · E_mask`).
    pub mask_embedding: Vec<Vec<f64>>,
    pub class_logits: Vec<Vec<f64>>,
}

impl QueryState {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    /// `σ(pre_mask)` for one query.
    pub fn mask_prob(&self, q: usize) -> Vec<f64> {
        self.pre_mask[q].iter().map(|&v| sigmoid(v)).collect()
    }

    /// Softmax class probabilities for one query.
    pub fn class_prob(&self, q: usize) -> Vec<f64> {
        softmax(&self.class_logits[q])
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> QueryState {
        QueryState {
            height: self.height,
            width: self.width,
            n_one_to_one: range
                .len()
                .min(self.n_one_to_one.saturating_sub(range.start)),
            embeddings: self.embeddings[range.clone()].to_vec(),
            ctrl: self.ctrl[range.clone()].to_vec(),
            pre_mask: self.pre_mask[range.clone()].to_vec(),
            mask_embedding: self.mask_embedding[range.clone()].to_vec(),
            class_logits: self.class_logits[range].to_vec(),
        }
    }

    /// The one-to-one block.
    pub fn one_to_one(&self) -> QueryState {
        self.slice(0..self.n_one_to_one)
    }

    /// The one-to-many block (empty when `R = 0`).
    pub fn one_to_many(&self) -> QueryState {
        self.slice(self.n_one_to_one..self.len())
    }

    fn check_finite(&self, layer: usize) -> Result<()> {
        let bad = |rows: &[Vec<f64>]| rows.iter().flatten().any(|v| !v.is_finite());
        if bad(&self.embeddings) {
            return Err(Error::Numeric {
                layer,
                what: "query embeddings".into(),
            });
        }
        if self
            .ctrl
            .iter()
            .any(|c| c.points().iter().flatten().any(|v| !v.is_finite()))
        {
            return Err(Error::Numeric {
                layer,
                what: "control points".into(),
            });
        }
        if bad(&self.pre_mask) {
            return Err(Error::Numeric {
                layer,
                what: "pre-mask".into(),
            });
        }
        if bad(&self.class_logits) {
            return Err(Error::Numeric {
                layer,
                what: "class logits".into(),
            });
        }
        Ok(())
    }
}

/// Control-point, mask and class prediction MLPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionHeads {
    pub ctrl: Mlp,
    pub mask: Mlp,
    pub class: Mlp,
}

impl PredictionHeads {
    fn random(cfg: &DecoderConfig, grid_channels: usize, seed: u64, tag: u64) -> Self {
        let d = cfg.d_model;
        Self {
            ctrl: Mlp::random(
                d,
                d,
                cfg.n_ctrl * 3,
                &mut rng::stream(seed, rng::tag(tag, 1)),
            ),
            mask: Mlp::random(
                d,
                d,
                grid_channels,
                &mut rng::stream(seed, rng::tag(tag, 2)),
            ),
            class: Mlp::random(
                d,
                d,
                cfg.n_classes,
                &mut rng::stream(seed, rng::tag(tag, 3)),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfAttnParams {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub cross: DeformAttnParams,
    pub self_attn: SelfAttnParams,
    pub ffn: Mlp,
    pub heads: PredictionHeads,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub grid_channels: usize,
    /// Learned initial embeddings: `Q` one-to-one rows then `Q·R` one-to-many rows.
    pub queries: Vec<Vec<f64>>,
    pub init_heads: PredictionHeads,
    pub pos_proj: Linear,
    pub layers: Vec<LayerParams>,
}

const TAG_QUERIES: u64 = 1;
const TAG_QUERIES_O2M: u64 = 2;
const TAG_INIT: u64 = 3;
const TAG_POS: u64 = 4;
const TAG_LAYER: u64 = 100;

impl DecoderParams {
    /// Seeded uniform initialisation. Every component draws from its own
    /// stream, so the one-to-one queries and all layer weights are identical
    /// for any `R` and any layer count.
    pub fn random(config: DecoderConfig, grid_channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if grid_channels == 0 {
            return Err(Error::Validation("grid needs at least one channel".into()));
        }
        let d = config.d_model;
        let uniform_rows = |rows: usize, tag: u64| {
            use rand::Rng;
            let mut r = rng::stream(seed, tag);
            (0..rows)
                .map(|_| {
                    (0..d)
                        .map(|_| r.random_range(-1.0..1.0))
                        .collect::<Vec<f64>>()
                })
                .collect::<Vec<_>>()
        };
        let mut queries = uniform_rows(config.n_queries, TAG_QUERIES);
        queries.extend(uniform_rows(
            config.n_queries * config.one_to_many_r,
            TAG_QUERIES_O2M,
        ));

        let init_heads = PredictionHeads::random(&config, grid_channels, seed, TAG_INIT);
        let pos_in = config.n_ctrl * 2 * config.pos_feats;
        let pos_proj = Linear::random(pos_in, d, &mut rng::stream(seed, TAG_POS));

        let shared = PredictionHeads::random(&config, grid_channels, seed, rng::tag(TAG_LAYER, 0));
        let layers = (0..config.n_layers)
            .map(|l| {
                let tag = rng::tag(TAG_LAYER, l as u64 + 1);
                let mut r = rng::stream(seed, rng::tag(tag, 10));
                let cross = DeformAttnParams::random(
                    d,
                    config.n_ctrl,
                    config.n_samples,
                    grid_channels,
                    &mut r,
                )?;
                let self_attn = SelfAttnParams {
                    heads: config.self_attn_heads,
                    query: Linear::random(d, d, &mut r),
                    key: Linear::random(d, d, &mut r),
                    value: Linear::random(d, d, &mut r),
                    output: Linear::random(d, d, &mut r),
                };
                let ffn = Mlp::random(d, config.ffn_hidden, d, &mut r);
                let heads = if config.shared_heads {
                    shared.clone()
                } else {
                    PredictionHeads::random(&config, grid_channels, seed, tag)
                };
                Ok(LayerParams {
                    cross,
                    self_attn,
                    ffn,
                    heads,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            config,
            grid_channels,
            queries,
            init_heads,
            pos_proj,
            layers,
        })
    }

    /// Copy restricted to the one-to-one queries (`R = 0`).
    pub fn without_one_to_many(&self) -> Self {
        let mut p = self.clone();
        p.queries.truncate(self.config.n_queries);
        p.config.one_to_many_r = 0;
        p
    }

    /// Copy keeping only the first `n` layers.
    pub fn truncated(&self, n: usize) -> Self {
        let mut p = self.clone();
        p.layers.truncate(n);
        p.config.n_layers = n;
        p
    }
}

/// Sinusoidal features of the 2D control points of one query.
///
/// For each point and axis value `v` the features are
/// `sin(2πv / T^(2i/F)), cos(2πv / T^(2i/F))` for `i < F/2`.
pub fn sine_encoding(refs: &[[f64; 2]], feats: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(refs.len() * 2 * feats);
    for p in refs {
        for &v in p {
            for i in 0..feats / 2 {
                let freq = POS_TEMPERATURE.powf(2.0 * i as f64 / feats as f64);
                let a = 2.0 * PI * v / freq;
                out.push(a.sin());
                out.push(a.cos());
            }
        }
    }
    out
}

/// `F_mask · e` for every cell.
fn mask_logits(grid: &FeatureGrid, embedding: &[f64]) -> Vec<f64> {
    (0..grid.cells())
        .map(|i| dot(grid.cell_flat(i), embedding))
        .collect()
}

/// `(Q + Q·R)²` additive self-attention mask with `-∞` across blocks.
pub fn one_to_many_mask(n_queries: usize, r: usize) -> Vec<Vec<f64>> {
    let total = n_queries * (1 + r);
    (0..total)
        .map(|i| {
            (0..total)
                .map(|j| {
                    if (i < n_queries) == (j < n_queries) {
                        0.0
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect()
        })
        .collect()
}

/// Inverse-sigmoid refinement `σ(σ⁻¹(c) + Δ)` applied to every coordinate.
pub fn refine(ctrl: &ControlPointSet, delta: &[f64]) -> Result<ControlPointSet> {
    if delta.len() != ctrl.len() * 3 {
        return Err(Error::Shape("refinement delta length".into()));
    }
    let points = ctrl
        .points()
        .iter()
        .enumerate()
        .map(|(n, p)| std::array::from_fn(|k| sigmoid(inverse_sigmoid(p[k]) + delta[n * 3 + k])))
        .collect();
    ControlPointSet::new(points)
}

fn ctrl_from_logits(logits: &[f64]) -> Result<ControlPointSet> {
    ControlPointSet::new(
        logits
            .chunks(3)
            .map(|c| [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])])
            .collect(),
    )
}

/// Multi-head scaled dot-product self-attention with an additive mask.
fn masked_self_attention(
    p: &SelfAttnParams,
    inputs: &[Vec<f64>],
    pos: &[Vec<f64>],
    mask: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let with_pos: Vec<Vec<f64>> = inputs
        .iter()
        .zip(pos)
        .map(|(x, e)| x.iter().zip(e).map(|(a, b)| a + b).collect())
        .collect();
    let q: Vec<Vec<f64>> = with_pos.iter().map(|x| p.query.forward(x)).collect();
    let k: Vec<Vec<f64>> = with_pos.iter().map(|x| p.key.forward(x)).collect();
    let v: Vec<Vec<f64>> = inputs.iter().map(|x| p.value.forward(x)).collect();
    let d = p.query.out_dim;
    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    (0..inputs.len())
        .map(|i| {
            let mut mixed = vec![0.0; d];
            for h in 0..p.heads {
                let s = h * dh..(h + 1) * dh;
                let logits: Vec<f64> = (0..inputs.len())
                    .map(|j| dot(&q[i][s.clone()], &k[j][s.clone()]) * scale + mask[i][j])
                    .collect();
                let w = softmax(&logits);
                for (j, wj) in w.iter().enumerate() {
                    for c in s.clone() {
                        mixed[c] += wj * v[j][c];
                    }
                }
            }
            p.output.forward(&mixed)
        })
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Decoder bound to a parameter set.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub params: DecoderParams,
}

impl Decoder {
    pub fn new(params: DecoderParams) -> Result<Self> {
        params.config.validate()?;
        Ok(Self { params })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.params.config
    }

    fn check_grid(&self, grid: &FeatureGrid) -> Result<()> {
        if grid.channels() != self.params.grid_channels {
            return Err(Error::Shape(format!(
                "decoder built for {} grid channels, got {}",
                self.params.grid_channels,
                grid.channels()
            )));
        }
        Ok(())
    }

    /// Initial prediction from the learned queries.
    pub fn init_layer(&self, grid: &FeatureGrid) -> Result<QueryState> {
        self.check_grid(grid)?;
        let heads = &self.params.init_heads;
        let embeddings = self.params.queries.clone();
        let mut state = QueryState {
            height: grid.height(),
            width: grid.width(),
            n_one_to_one: self.config().n_queries,
            ctrl: Vec::with_capacity(embeddings.len()),
            pre_mask: Vec::with_capacity(embeddings.len()),
            mask_embedding: Vec::with_capacity(embeddings.len()),
            class_logits: Vec::with_capacity(embeddings.len()),
            embeddings: Vec::new(),
        };
        for e in &embeddings {
            state.ctrl.push(ctrl_from_logits(&heads.ctrl.forward(e))?);
            let me = heads.mask.forward(e);
            state.pre_mask.push(mask_logits(grid, &me));
            state.mask_embedding.push(me);
            state.class_logits.push(heads.class.forward(e));
        }
        state.embeddings = embeddings;
        state.check_finite(0)?;
        Ok(state)
    }

    /// `MLP_pos(sine(R))` for each query's 2D control points.
    pub fn positional_embedding(&self, refs: &[Vec<[f64; 2]>]) -> Vec<Vec<f64>> {
        refs.iter()
            .map(|r| {
                self.params
                    .pos_proj
                    .forward(&sine_encoding(r, self.config().pos_feats))
            })
            .collect()
    }

    /// One refinement layer (`layer_index` counts from 1).
    pub fn decoder_layer(
        &self,
        state: &QueryState,
        grid: &FeatureGrid,
        layer_index: usize,
    ) -> Result<QueryState> {
        self.check_grid(grid)?;
        let lp = self
            .params
            .layers
            .get(layer_index.wrapping_sub(1))
            .ok_or_else(|| Error::Validation(format!("layer index {layer_index} out of range")))?;
        let values = lp.cross.project(grid)?;
        self.layer_with_values(state, grid, &values, lp, layer_index)
    }

    fn layer_with_values(
        &self,
        state: &QueryState,
        grid: &FeatureGrid,
        values: &ValueGrid,
        lp: &LayerParams,
        layer_index: usize,
    ) -> Result<QueryState> {
        let n = state.len();
        let refs: Vec<Vec<[f64; 2]>> = state.ctrl.iter().map(|c| c.xy()).collect();
        let pos = self.positional_embedding(&refs);

        // cross-attention anchored at the control points, residual + norm
        let mut h1 = Vec::with_capacity(n);
        let mut counter = OpCounter::default();
        for q in 0..n {
            let query = add(&state.embeddings[q], &pos[q]);
            let anchors: Vec<SamplePoint> = refs[q]
                .iter()
                .map(|p| SamplePoint::new(p[0], p[1]))
                .collect();
            let a = lp.cross.attend(&query, values, &anchors, &mut counter)?;
            h1.push(layer_norm(&add(&state.embeddings[q], &a)));
        }

        let mask = one_to_many_mask(
            state.n_one_to_one,
            (n / state.n_one_to_one.max(1)).saturating_sub(1),
        );
        if mask.len() != n {
            return Err(Error::Shape(
                "query count is not a multiple of the one-to-one block".into(),
            ));
        }
        let sa = masked_self_attention(&lp.self_attn, &h1, &pos, &mask);
        let embeddings: Vec<Vec<f64>> = h1
            .iter()
            .zip(&sa)
            .map(|(x, s)| {
                let h2 = layer_norm(&add(x, s));
                layer_norm(&add(&h2, &lp.ffn.forward(&h2)))
            })
            .collect();

        let mut next = QueryState {
            height: state.height,
            width: state.width,
            n_one_to_one: state.n_one_to_one,
            embeddings: Vec::new(),
            ctrl: Vec::with_capacity(n),
            pre_mask: Vec::with_capacity(n),
            mask_embedding: Vec::with_capacity(n),
            class_logits: Vec::with_capacity(n),
        };
        for (q, e) in embeddings.iter().enumerate() {
            next.ctrl
                .push(refine(&state.ctrl[q], &lp.heads.ctrl.forward(e))?);
            let me = lp.heads.mask.forward(e);
            let inc = mask_logits(grid, &me);
            next.pre_mask.push(add(&state.pre_mask[q], &inc));
            next.mask_embedding.push(me);
            next.class_logits.push(lp.heads.class.forward(e));
        }
        next.embeddings = embeddings;
        next.check_finite(layer_index)?;
        Ok(next)
    }

    /// Initial prediction followed by every layer; element `0` is the
    /// initial prediction and element `l` the output of layer `l`.
    pub fn run(&self, grid: &FeatureGrid) -> Result<Vec<QueryState>> {
        let mut states = vec![self.init_layer(grid)?];
        for (l, lp) in self.params.layers.iter().enumerate() {
            let values = lp.cross.project(grid)?;
            let next = self.layer_with_values(states.last().unwrap(), grid, &values, lp, l + 1)?;
            states.push(next);
        }
        Ok(states)
    }
}

/// Convenience wrapper: build the decoder and run it.
pub fn run_decoder(params: &DecoderParams, grid: &FeatureGrid) -> Result<Vec<QueryState>> {
    Decoder::new(params.clone())?.run(grid)
}
