//! Small dense building blocks shared by the attention and decoder modules.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Clamp applied to the argument of [`inverse_sigmoid`].
pub const INV_SIGMOID_EPS: f64 = 1e-5;

/// Dense affine map `y = W x + b` with a row-major `out × in` weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Identity map; requires `in_dim == out_dim`.
    pub fn identity(dim: usize) -> Self {
        let mut l = Self::zeros(dim, dim);
        for i in 0..dim {
            l.weight[i * dim + i] = 1.0;
        }
        l
    }

    /// Uniform initialisation in `±1/√fan_in` for both weight and bias.
    pub fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    #[inline]
    pub fn row(&self, o: usize) -> &[f64] {
        &self.weight[o * self.in_dim..(o + 1) * self.in_dim]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        (0..self.out_dim)
            .map(|o| self.bias[o] + dot(self.row(o), x))
            .collect()
    }

    /// `Wᵀ g`, the input-side gradient for an upstream gradient `g`.
    pub fn backward_input(&self, g: &[f64]) -> Vec<f64> {
        debug_assert_eq!(g.len(), self.out_dim);
        let mut out = vec![0.0; self.in_dim];
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            for (acc, &w) in out.iter_mut().zip(self.row(o)) {
                *acc += w * go;
            }
        }
        out
    }

    pub fn macs(&self) -> u64 {
        (self.in_dim * self.out_dim) as u64
    }

    pub fn scale(&mut self, factor: f64) {
        self.weight.iter_mut().for_each(|w| *w *= factor);
        self.bias.iter_mut().for_each(|b| *b *= factor);
    }
}

/// Two-layer perceptron with a rectifier between the layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn random<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::random(in_dim, hidden, rng),
            output: Linear::random(hidden, out_dim, rng),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = self.hidden.forward(x);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        self.output.forward(&h)
    }

    /// Zeroes the output layer so that the MLP emits exactly zero.
    pub fn zero_output(&mut self) {
        self.output.scale(0.0);
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logit with the argument clamped to `[ε, 1-ε]`.
#[inline]
pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(INV_SIGMOID_EPS, 1.0 - INV_SIGMOID_EPS);
    (p / (1.0 - p)).ln()
}

/// Numerically stable softmax. Entries equal to `-∞` receive exactly zero weight.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Normalises a vector to zero mean and unit variance (no affine terms).
pub fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}
