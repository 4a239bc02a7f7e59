use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cost::{CostError, CostIntervals, CostModel};
use crate::nm::SparsityLevel;

/// Fraction of dense FLOPs used as the default cost cap.
pub const DEFAULT_C_UPPER_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpaceError {
    #[error("sparsity level set is empty")]
    NoLevels,
    #[error("sparsity level {0} listed twice")]
    DuplicateLevel(SparsityLevel),
    #[error("level set must contain a dense m:m level")]
    NoDenseLevel,
    #[error("module {layer} has input dimension {cols}, not divisible by group size {m}")]
    Indivisible { layer: usize, cols: usize, m: u32 },
    #[error("c_upper fraction must be positive and finite, got {0}")]
    BadFraction(f64),
    #[error("search space has {size} configurations, above the limit of {max}")]
    TooLarge { size: String, max: u64 },
    #[error("level {0} is not in the search space")]
    UnknownLevel(SparsityLevel),
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// Why a configuration is not admissible.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Violation {
    #[error("configuration has {got} entries, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("layer {layer} uses level {level}, which is not in the search space")]
    Membership { layer: usize, level: SparsityLevel },
    #[error("configuration costs {flops} FLOPs, above c_upper = {c_upper}")]
    Cost { flops: u64, c_upper: f64 },
}

/// One sparsity level per prunable module, in module order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SparseConfig(Vec<SparsityLevel>);

impl SparseConfig {
    pub fn new(levels: Vec<SparsityLevel>) -> Self {
        Self(levels)
    }

    pub fn levels(&self) -> &[SparsityLevel] {
        &self.0
    }

    pub fn levels_mut(&mut self) -> &mut [SparsityLevel] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, layer: usize) -> SparsityLevel {
        self.0[layer]
    }
}

impl fmt::Display for SparseConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, l) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{l}")?;
        }
        f.write_str("]")
    }
}

impl From<Vec<SparsityLevel>> for SparseConfig {
    fn from(v: Vec<SparsityLevel>) -> Self {
        Self(v)
    }
}

/// The set of candidate configurations: every module picks one level from
/// `levels`, subject to `F(config) <= c_upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    levels: Vec<SparsityLevel>,
    cost: CostModel,
    c_upper: f64,
}

impl SearchSpace {
    /// Levels are stored sparsest first.
    pub fn new(
        levels: Vec<SparsityLevel>,
        cost: CostModel,
        c_upper_fraction: f64,
    ) -> Result<Self, SpaceError> {
        if !(c_upper_fraction > 0.0 && c_upper_fraction.is_finite()) {
            return Err(SpaceError::BadFraction(c_upper_fraction));
        }
        let c_upper = c_upper_fraction * cost.dense_flops() as f64;
        Self::with_c_upper(levels, cost, c_upper)
    }

    pub fn with_c_upper(
        mut levels: Vec<SparsityLevel>,
        cost: CostModel,
        c_upper: f64,
    ) -> Result<Self, SpaceError> {
        if levels.is_empty() {
            return Err(SpaceError::NoLevels);
        }
        levels.sort_by(|a, b| {
            a.density()
                .total_cmp(&b.density())
                .then(a.m().cmp(&b.m()))
        });
        if let Some(w) = levels.windows(2).find(|w| w[0] == w[1]) {
            return Err(SpaceError::DuplicateLevel(w[0]));
        }
        if !levels.iter().any(|l| l.is_dense()) {
            return Err(SpaceError::NoDenseLevel);
        }
        let max_m = levels.iter().map(|l| l.m()).max().unwrap();
        for (layer, module) in cost.modules().iter().enumerate() {
            if module.cols % max_m as usize != 0 {
                return Err(SpaceError::Indivisible {
                    layer,
                    cols: module.cols,
                    m: max_m,
                });
            }
        }
        Ok(Self {
            levels,
            cost,
            c_upper,
        })
    }

    pub fn levels(&self) -> &[SparsityLevel] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_index(&self, level: SparsityLevel) -> Option<usize> {
        self.levels.iter().position(|&l| l == level)
    }

    pub fn cost(&self) -> &CostModel {
        &self.cost
    }

    pub fn num_layers(&self) -> usize {
        self.cost.num_modules()
    }

    pub fn c_upper(&self) -> f64 {
        self.c_upper
    }

    pub fn sparsest(&self) -> SparsityLevel {
        self.levels[0]
    }

    pub fn densest(&self) -> SparsityLevel {
        *self.levels.last().unwrap()
    }

    /// `F` of the all-sparsest configuration.
    pub fn c_lower(&self) -> u64 {
        let sparsest = self.uniform(self.sparsest());
        self.cost.flops_of(sparsest.levels()).expect("space levels divide every module")
    }

    pub fn flops(&self, config: &SparseConfig) -> Result<u64, CostError> {
        self.cost.flops_of(config.levels())
    }

    pub fn validate(&self, config: &SparseConfig) -> Result<(), Violation> {
        if config.len() != self.num_layers() {
            return Err(Violation::Length {
                expected: self.num_layers(),
                got: config.len(),
            });
        }
        if let Some((layer, &level)) = config
            .levels()
            .iter()
            .enumerate()
            .find(|(_, l)| self.level_index(**l).is_none())
        {
            return Err(Violation::Membership { layer, level });
        }
        let flops = self.flops(config).expect("membership checked");
        if flops as f64 > self.c_upper {
            return Err(Violation::Cost {
                flops,
                c_upper: self.c_upper,
            });
        }
        Ok(())
    }

    fn uniform(&self, level: SparsityLevel) -> SparseConfig {
        SparseConfig(vec![level; self.num_layers()])
    }

    pub fn uniform_level_config(&self, level: SparsityLevel) -> Result<SparseConfig, SpaceError> {
        if self.level_index(level).is_none() {
            return Err(SpaceError::UnknownLevel(level));
        }
        Ok(self.uniform(level))
    }

    /// Equal-width cost bands between `c_lower` and `c_upper` using `k`
    /// boundaries.
    pub fn intervals(&self, k: usize) -> Result<CostIntervals, SpaceError> {
        Ok(CostIntervals::new(self.c_lower() as f64, self.c_upper, k)?)
    }

    /// Every admissible configuration, in odometer order (last layer varies
    /// fastest, levels sparsest first).
    pub fn enumerate(&self, max_count: u64) -> Result<Vec<SparseConfig>, SpaceError> {
        let k = self.levels.len() as u64;
        let l = self.num_layers();
        let size = u32::try_from(l)
            .ok()
            .and_then(|l| k.checked_pow(l))
            .filter(|&s| s <= max_count)
            .ok_or_else(|| SpaceError::TooLarge {
                size: format!("{k}^{l}"),
                max: max_count,
            })?;
        let mut out = Vec::new();
        let mut digits = vec![0usize; l];
        for _ in 0..size {
            let config = SparseConfig(digits.iter().map(|&d| self.levels[d]).collect());
            if self.flops(&config)? as f64 <= self.c_upper {
                out.push(config);
            }
            for d in digits.iter_mut().rev() {
                *d += 1;
                if *d < self.levels.len() {
                    break;
                }
                *d = 0;
            }
        }
        Ok(out)
    }
}
