use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::OpCounter;
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::nn::{dot, softmax, Linear};

/// Single-head dense cross-attention over all grid cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardAttnParams {
    pub d_model: usize,
    pub query_proj: Linear,
    pub key_proj: Linear,
    pub value_proj: Linear,
    pub output_proj: Linear,
}

/// Keys and values of every cell, projected once per forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyValues {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardAttnGrad {
    pub output: Vec<f64>,
    pub d_query: Vec<f64>,
}

impl StandardAttnParams {
    pub fn random<R: Rng + ?Sized>(d_model: usize, value_channels: usize, rng: &mut R) -> Self {
        Self {
            d_model,
            query_proj: Linear::random(d_model, d_model, rng),
            key_proj: Linear::random(value_channels, d_model, rng),
            value_proj: Linear::random(value_channels, d_model, rng),
            output_proj: Linear::random(d_model, d_model, rng),
        }
    }

    pub fn project(&self, grid: &FeatureGrid) -> Result<KeyValues> {
        if grid.channels() != self.key_proj.in_dim || grid.channels() != self.value_proj.in_dim {
            return Err(Error::Shape(
                "key/value projections disagree with grid channels".into(),
            ));
        }
        let (keys, values) = (0..grid.cells())
            .map(|i| {
                let c = grid.cell_flat(i);
                (self.key_proj.forward(c), self.value_proj.forward(c))
            })
            .unzip();
        Ok(KeyValues { keys, values })
    }

    fn scores(&self, q: &[f64], kv: &KeyValues) -> Vec<f64> {
        let scale = 1.0 / (self.d_model as f64).sqrt();
        kv.keys.iter().map(|k| dot(q, k) * scale).collect()
    }

    pub fn attend(
        &self,
        query: &[f64],
        kv: &KeyValues,
        counter: &mut OpCounter,
    ) -> Result<Vec<f64>> {
        if query.len() != self.d_model {
            return Err(Error::Shape("query length".into()));
        }
        let q = self.query_proj.forward(query);
        counter.matmul(self.query_proj.macs());
        let weights = softmax(&self.scores(&q, kv));
        counter.matmul((kv.keys.len() * self.d_model) as u64);
        let mut mixed = vec![0.0; self.d_model];
        for (w, v) in weights.iter().zip(&kv.values) {
            for (m, x) in mixed.iter_mut().zip(v) {
                *m += w * x;
            }
        }
        counter.matmul((kv.values.len() * self.d_model) as u64);
        let out = self.output_proj.forward(&mixed);
        counter.matmul(self.output_proj.macs());
        Ok(out)
    }

    /// Output and `∂(upstream·out)/∂query`.
    pub fn attend_vjp(
        &self,
        query: &[f64],
        kv: &KeyValues,
        upstream: &[f64],
    ) -> Result<StandardAttnGrad> {
        let output = self.attend(query, kv, &mut OpCounter::default())?;
        let q = self.query_proj.forward(query);
        let weights = softmax(&self.scores(&q, kv));
        let g_mixed = self.output_proj.backward_input(upstream);
        let g_w: Vec<f64> = kv.values.iter().map(|v| dot(&g_mixed, v)).collect();
        let mean: f64 = weights.iter().zip(&g_w).map(|(a, g)| a * g).sum();
        let scale = 1.0 / (self.d_model as f64).sqrt();
        let mut g_q = vec![0.0; self.d_model];
        for ((a, g), k) in weights.iter().zip(&g_w).zip(&kv.keys) {
            let gs = a * (g - mean) * scale;
            for (acc, kk) in g_q.iter_mut().zip(k) {
                *acc += gs * kk;
            }
        }
        Ok(StandardAttnGrad {
            output,
            d_query: self.query_proj.backward_input(&g_q),
        })
    }
}

/// `softmax(qᵀK/√d)·V` over all `H·W` cells followed by the output projection.
pub fn standard_cross_attention(
    query: &[f64],
    grid: &FeatureGrid,
    params: &StandardAttnParams,
) -> Result<Vec<f64>> {
    let kv = params.project(grid)?;
    params.attend(query, &kv, &mut OpCounter::default())
}
