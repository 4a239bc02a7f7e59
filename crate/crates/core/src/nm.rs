//! N:M group masking.
//!
//! Weights of a linear module are grouped along the input (reduction) axis:
//! each output row is cut into consecutive runs of `m` weights, and a mask
//! keeps exactly `n` of them. This is the layout N:M matmul units consume.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::matrix::Matrix;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NmError {
    #[error("invalid sparsity level {n}:{m} (need 1 <= n <= m and m a power of two)")]
    InvalidLevel { n: u32, m: u32 },
    #[error("cannot parse sparsity level from {0:?} (expected \"N:M\")")]
    ParseLevel(String),
    #[error("non-finite weight at flat index {index}")]
    NonFinite { index: usize },
    #[error("expected {expected} scores, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("input dimension {cols} is not divisible by group size {m}")]
    IndivisibleAxis { cols: usize, m: u32 },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
}

/// One supported N:M mode: keep `n` of every `m` consecutive weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SparsityLevel {
    n: u32,
    m: u32,
}

impl SparsityLevel {
    pub fn new(n: u32, m: u32) -> Result<Self, NmError> {
        if n == 0 || n > m || !m.is_power_of_two() {
            return Err(NmError::InvalidLevel { n, m });
        }
        Ok(Self { n, m })
    }

    /// The `m:m` level for a group size (no pruning).
    pub fn dense(m: u32) -> Result<Self, NmError> {
        Self::new(m, m)
    }

    pub fn n(self) -> u32 {
        self.n
    }

    pub fn m(self) -> u32 {
        self.m
    }

    pub fn is_dense(self) -> bool {
        self.n == self.m
    }

    /// Fraction of weights retained, `n / m`.
    pub fn density(self) -> f64 {
        f64::from(self.n) / f64::from(self.m)
    }

    /// Fraction of weights zeroed, `1 - n / m`.
    pub fn zero_fraction(self) -> f64 {
        1.0 - self.density()
    }

    /// Bits needed to address a position inside one group.
    pub fn index_bits(self) -> u32 {
        self.m.trailing_zeros()
    }
}

impl fmt::Display for SparsityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.n, self.m)
    }
}

impl FromStr for SparsityLevel {
    type Err = NmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (n, m) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| NmError::ParseLevel(s.to_string()))?;
        let n: u32 = n
            .trim()
            .parse()
            .map_err(|_| NmError::ParseLevel(s.to_string()))?;
        let m: u32 = m
            .trim()
            .parse()
            .map_err(|_| NmError::ParseLevel(s.to_string()))?;
        Self::new(n, m)
    }
}

impl Serialize for SparsityLevel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SparsityLevel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-weight importance score used to rank weights inside a group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyMetric {
    #[default]
    Magnitude,
}

/// Binary mask with the same shape as the weight matrix it was derived from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTensor {
    bits: Matrix<bool>,
}

impl MaskTensor {
    pub fn new(bits: Matrix<bool>) -> Self {
        Self { bits }
    }

    pub fn all(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            bits: Matrix::filled(rows, cols, value),
        }
    }

    pub fn bits(&self) -> &Matrix<bool> {
        &self.bits
    }

    pub fn shape(&self) -> (usize, usize) {
        self.bits.shape()
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits.get(r, c)
    }

    pub fn as_slice(&self) -> &[bool] {
        self.bits.as_slice()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.as_slice().iter().filter(|&&b| b).count()
    }

    /// Whether every aligned group of `level.m()` bits along each row holds
    /// exactly `level.n()` ones.
    pub fn satisfies(&self, level: SparsityLevel) -> bool {
        let m = level.m() as usize;
        if !self.bits.cols().is_multiple_of(m) {
            return false;
        }
        self.bits
            .as_slice()
            .chunks(m)
            .all(|g| g.iter().filter(|&&b| b).count() == level.n() as usize)
    }
}

pub fn saliency<T: Real>(weights: &Matrix<T>, metric: SaliencyMetric) -> Result<Matrix<T>, NmError> {
    if let Some(index) = weights.as_slice().iter().position(|w| !w.is_finite()) {
        return Err(NmError::NonFinite { index });
    }
    Ok(match metric {
        SaliencyMetric::Magnitude => weights.map(|w| w.abs()),
    })
}

/// Keeps the `n` highest-scoring positions of one group.
///
/// Equal scores are resolved in favour of the lower index, so the result
/// always has exactly `n` ones.
pub fn group_mask<T: Real>(scores: &[T], level: SparsityLevel) -> Result<Vec<bool>, NmError> {
    let m = level.m() as usize;
    if scores.len() != m {
        return Err(NmError::LengthMismatch {
            expected: m,
            got: scores.len(),
        });
    }
    let mut out = vec![false; m];
    fill_group_mask(scores, level.n() as usize, &mut out);
    Ok(out)
}

fn fill_group_mask<T: Real>(scores: &[T], n: usize, out: &mut [bool]) {
    if n == scores.len() {
        out.fill(true);
        return;
    }
    // rank = number of positions that beat i under (score desc, index asc)
    for (i, slot) in out.iter_mut().enumerate() {
        let si = scores[i];
        let rank = scores
            .iter()
            .enumerate()
            .filter(|&(j, &sj)| sj > si || (sj == si && j < i))
            .count();
        *slot = rank < n;
    }
}

/// Mask for a whole linear module at one sparsity level.
pub fn layer_mask<T: Real>(
    weights: &Matrix<T>,
    level: SparsityLevel,
    metric: SaliencyMetric,
) -> Result<MaskTensor, NmError> {
    let m = level.m() as usize;
    if !weights.cols().is_multiple_of(m) {
        return Err(NmError::IndivisibleAxis {
            cols: weights.cols(),
            m: level.m(),
        });
    }
    let (rows, cols) = weights.shape();
    if level.is_dense() {
        return Ok(MaskTensor::all(rows, cols, true));
    }
    let scores = saliency(weights, metric)?;
    let mut bits = Matrix::filled(rows, cols, false);
    for (group, out) in scores
        .as_slice()
        .chunks(m)
        .zip(bits.as_mut_slice().chunks_mut(m))
    {
        fill_group_mask(group, level.n() as usize, out);
    }
    Ok(MaskTensor::new(bits))
}

/// Zeroes every weight whose mask bit is off.
pub fn apply_mask<T: Real>(weights: &Matrix<T>, mask: &MaskTensor) -> Result<Matrix<T>, NmError> {
    if weights.shape() != mask.shape() {
        return Err(NmError::ShapeMismatch {
            left: weights.shape(),
            right: mask.shape(),
        });
    }
    let data = weights
        .as_slice()
        .iter()
        .zip(mask.as_slice())
        .map(|(&w, &keep)| if keep { w } else { T::zero() })
        .collect();
    Ok(Matrix::from_vec(weights.rows(), weights.cols(), data).expect("shape preserved"))
}

/// True iff every kept position of `sparser` is also kept by `denser`.
pub fn is_subset(sparser: &MaskTensor, denser: &MaskTensor) -> Result<bool, NmError> {
    if sparser.shape() != denser.shape() {
        return Err(NmError::ShapeMismatch {
            left: sparser.shape(),
            right: denser.shape(),
        });
    }
    Ok(sparser
        .as_slice()
        .iter()
        .zip(denser.as_slice())
        .all(|(&a, &b)| !a || b))
}
