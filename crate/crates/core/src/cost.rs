//! FLOPs accounting.
//!
//! Convention: one multiply-accumulate counts as 2 FLOPs. With `T` tokens,
//! embedding width `D`, patch vector length `P` and `C` classes:
//!
//! * prunable linear module `rows x cols` at level `n:m`:
//!   `2 * T * rows * cols * n / m`
//! * patch embedding: `2 * T * P * D`
//! * attention scores `QK^T` and the value product `AV`, per block:
//!   `2 * T^2 * D` each, so `4 * T^2 * D`
//! * classifier head: `2 * D * C`
//!
//! Softmax, layer norm, activations, residual adds and pooling are counted
//! as zero. Everything except the prunable modules is constant across
//! sparse configurations.

use serde::{Deserialize, Serialize};

use crate::nm::SparsityLevel;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CostError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("module input dimension {cols} is not divisible by group size {m}")]
    Indivisible { cols: usize, m: u32 },
    #[error("configuration has {got} entries but the model has {expected} prunable modules")]
    LengthMismatch { expected: usize, got: usize },
    #[error("need at least 2 interval boundaries, got {0}")]
    TooFewBoundaries(usize),
    #[error("c_upper ({c_upper}) must exceed c_lower ({c_lower})")]
    EmptyRange { c_lower: f64, c_upper: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleRole {
    Qkv,
    Proj,
    Fc1,
    Fc2,
    /// Stand-alone linear layer used by toy cost models.
    Linear,
}

impl ModuleRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ModuleRole::Qkv => "qkv",
            ModuleRole::Proj => "proj",
            ModuleRole::Fc1 => "fc1",
            ModuleRole::Fc2 => "fc2",
            ModuleRole::Linear => "linear",
        }
    }
}

/// Shape of one prunable linear module, `rows` outputs by `cols` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunableModule {
    pub role: ModuleRole,
    pub block: usize,
    pub rows: usize,
    pub cols: usize,
}

const MAX_DIM: usize = 1 << 16;
const MAX_BLOCKS: usize = 1 << 10;

/// Micro vision-transformer shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub image_side: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub blocks: usize,
    pub num_classes: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            image_side: 16,
            patch_size: 4,
            channels: 1,
            embed_dim: 32,
            num_heads: 2,
            mlp_ratio: 2,
            blocks: 2,
            num_classes: 4,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<(), CostError> {
        let bad = |msg: &str| Err(CostError::InvalidArch(msg.to_string()));
        if self.patch_size == 0 || self.image_side == 0 || self.channels == 0 {
            return bad("image_side, patch_size and channels must be positive");
        }
        if !self.image_side.is_multiple_of(self.patch_size) {
            return bad("image_side must be a multiple of patch_size");
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad("embed_dim must be a positive multiple of num_heads");
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        let dims = [
            self.image_side,
            self.channels,
            self.embed_dim,
            self.num_classes,
            self.mlp_ratio.saturating_mul(self.embed_dim),
        ];
        if dims.iter().any(|&v| v > MAX_DIM) || self.blocks > MAX_BLOCKS {
            return bad("dimensions exceed supported limits");
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let side = self.image_side / self.patch_size;
        side * side
    }

    /// Length of one flattened patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Number of input features per image.
    pub fn input_dim(&self) -> usize {
        self.image_side * self.image_side * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn num_prunable(&self) -> usize {
        4 * self.blocks
    }

    /// Prunable modules in order: per block qkv, proj, fc1, fc2.
    pub fn modules(&self) -> Vec<PrunableModule> {
        let d = self.embed_dim;
        let h = self.hidden_dim();
        (0..self.blocks)
            .flat_map(|block| {
                [
                    (ModuleRole::Qkv, 3 * d, d),
                    (ModuleRole::Proj, d, d),
                    (ModuleRole::Fc1, h, d),
                    (ModuleRole::Fc2, d, h),
                ]
                .map(|(role, rows, cols)| PrunableModule {
                    role,
                    block,
                    rows,
                    cols,
                })
            })
            .collect()
    }
}

/// FLOPs of one prunable module at `level`.
pub fn module_flops(
    rows: usize,
    cols: usize,
    tokens: usize,
    level: SparsityLevel,
) -> Result<u64, CostError> {
    let m = level.m() as usize;
    if !cols.is_multiple_of(m) {
        return Err(CostError::Indivisible {
            cols,
            m: level.m(),
        });
    }
    Ok(2 * tokens as u64 * rows as u64 * (cols / m) as u64 * u64::from(level.n()))
}

/// FLOPs that do not depend on the sparse configuration.
pub fn fixed_flops(arch: &ArchSpec) -> u64 {
    let t = arch.tokens() as u64;
    let d = arch.embed_dim as u64;
    let patch_embed = 2 * t * arch.patch_dim() as u64 * d;
    let attention = arch.blocks as u64 * 4 * t * t * d;
    let head = 2 * d * arch.num_classes as u64;
    patch_embed + attention + head
}

/// Cost function `F(config)` over a fixed list of prunable modules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    modules: Vec<PrunableModule>,
    tokens: usize,
    fixed: u64,
}

impl CostModel {
    pub fn from_arch(arch: &ArchSpec) -> Result<Self, CostError> {
        arch.validate()?;
        Ok(Self {
            modules: arch.modules(),
            tokens: arch.tokens(),
            fixed: fixed_flops(arch),
        })
    }

    /// A model made only of prunable linear layers (no fixed cost).
    pub fn pure_linear(shapes: &[(usize, usize)], tokens: usize) -> Self {
        Self {
            modules: shapes
                .iter()
                .enumerate()
                .map(|(block, &(rows, cols))| PrunableModule {
                    role: ModuleRole::Linear,
                    block,
                    rows,
                    cols,
                })
                .collect(),
            tokens,
            fixed: 0,
        }
    }

    pub fn modules(&self) -> &[PrunableModule] {
        &self.modules
    }

    pub fn num_modules(&self) -> usize {
        self.modules.len()
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn fixed_flops(&self) -> u64 {
        self.fixed
    }

    pub fn module_flops(&self, layer: usize, level: SparsityLevel) -> Result<u64, CostError> {
        let m = &self.modules[layer];
        module_flops(m.rows, m.cols, self.tokens, level)
    }

    /// Cost of the prunable modules with every one kept dense.
    pub fn prunable_dense_flops(&self) -> u64 {
        self.modules
            .iter()
            .map(|m| 2 * self.tokens as u64 * m.rows as u64 * m.cols as u64)
            .sum()
    }

    pub fn dense_flops(&self) -> u64 {
        self.fixed + self.prunable_dense_flops()
    }

    pub fn flops_of(&self, levels: &[SparsityLevel]) -> Result<u64, CostError> {
        if levels.len() != self.modules.len() {
            return Err(CostError::LengthMismatch {
                expected: self.modules.len(),
                got: levels.len(),
            });
        }
        let mut total = self.fixed;
        for (l, &level) in levels.iter().enumerate() {
            total += self.module_flops(l, level)?;
        }
        Ok(total)
    }
}

/// Boundaries `C_1 < ... < C_K` splitting `[c_lower, c_upper]` into `K - 1`
/// cost bands. Bands are half-open except the last, which is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostIntervals {
    boundaries: Vec<f64>,
}

impl CostIntervals {
    /// `k` equally spaced boundaries from `c_lower` to `c_upper`.
    pub fn new(c_lower: f64, c_upper: f64, k: usize) -> Result<Self, CostError> {
        if k < 2 {
            return Err(CostError::TooFewBoundaries(k));
        }
        if !(c_upper > c_lower) {
            return Err(CostError::EmptyRange { c_lower, c_upper });
        }
        let step = (c_upper - c_lower) / (k - 1) as f64;
        let mut boundaries: Vec<f64> = (0..k).map(|i| c_lower + step * i as f64).collect();
        boundaries[k - 1] = c_upper;
        Ok(Self { boundaries })
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn c_lower(&self) -> f64 {
        self.boundaries[0]
    }

    pub fn c_upper(&self) -> f64 {
        *self.boundaries.last().unwrap()
    }

    pub fn num_intervals(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// `(lo, hi, closed_top)` of interval `i`.
    pub fn bounds(&self, i: usize) -> (f64, f64, bool) {
        (
            self.boundaries[i],
            self.boundaries[i + 1],
            i + 2 == self.boundaries.len(),
        )
    }

    pub fn contains(&self, i: usize, flops: f64) -> bool {
        let (lo, hi, closed) = self.bounds(i);
        flops >= lo && (flops < hi || (closed && flops <= hi))
    }

    /// Index of the interval holding `flops`, or `None` outside `[c_lower, c_upper]`.
    pub fn interval_of(&self, flops: f64) -> Option<usize> {
        if !(flops >= self.c_lower() && flops <= self.c_upper()) {
            return None;
        }
        // last boundary <= flops, capped so c_upper lands in the last band
        let idx = self.boundaries.partition_point(|&b| b <= flops);
        Some((idx - 1).min(self.num_intervals() - 1))
    }
}
