use serde::{Deserialize, Serialize};

/// Deterministic work counters for one forward call.
///
/// Projections of the grid into values (and keys for standard attention)
/// are shared by all queries of a forward pass and are not charged to the
/// per-query count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    pub multiply_accumulates: u64,
    pub sample_calls: u64,
    pub matmul_calls: u64,
}

impl OpCounter {
    pub fn matmul(&mut self, macs: u64) {
        self.multiply_accumulates += macs;
        self.matmul_calls += 1;
    }

    pub fn merge(&mut self, other: &OpCounter) {
        self.multiply_accumulates += other.multiply_accumulates;
        self.sample_calls += other.sample_calls;
        self.matmul_calls += other.matmul_calls;
    }
}

/// Attention variant for [`count_ops`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Standard,
    SinglePoint { heads: usize },
    MultiPoint { points: usize },
    Bezier,
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::Standard => "SA".into(),
            Variant::SinglePoint { .. } => "SPDA".into(),
            Variant::MultiPoint { points } => format!("MPDA{points}"),
            Variant::Bezier => "BDA".into(),
        }
    }
}

/// Shape parameters that determine the cost of an attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub d_model: usize,
    /// Control points per curve (`N + 1`).
    pub n_ctrl: usize,
    /// Offsets per head (`K`).
    pub n_samples: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_ctrl: 4,
            n_samples: 4,
            grid_h: 16,
            grid_w: 16,
        }
    }
}

fn deformable_core(d: u64, heads: u64, k: u64) -> OpCounter {
    let mut c = OpCounter::default();
    c.matmul(d * 2 * heads * k); // offsets
    c.matmul(d * heads * k); // attention logits
                             // each sample blends 4 taps over a d/heads channel slice
    c.sample_calls += heads * k;
    c.multiply_accumulates += heads * k * 4 * (d / heads);
    c.matmul(d * d); // output projection
    c
}

/// Counts for one query through one attention call of `variant`.
pub fn count_ops(variant: Variant, cfg: &AttnConfig) -> OpCounter {
    let d = cfg.d_model as u64;
    let k = cfg.n_samples as u64;
    let nc = cfg.n_ctrl as u64;
    match variant {
        Variant::Standard => {
            let hw = (cfg.grid_h * cfg.grid_w) as u64;
            let mut c = OpCounter::default();
            c.matmul(d * d); // query projection
            c.matmul(hw * d); // scores
            c.matmul(hw * d); // weighted values
            c.matmul(d * d); // output projection
            c
        }
        Variant::SinglePoint { heads } => {
            let mut c = deformable_core(d, heads as u64, k);
            // reference point regressed from the 2D control points
            c.matmul(2 * nc * 2);
            c
        }
        Variant::MultiPoint { points } => {
            let mut c = deformable_core(d, points as u64, k);
            // Bernstein conversion P = B C on 2D control points
            c.matmul(points as u64 * nc * 2);
            c
        }
        Variant::Bezier => deformable_core(d, nc, k),
    }
}
