//! Compressed N:M storage: retained values plus a `log2(m)`-bit in-group
//! index per value.
//!
//! Wire layout (all little-endian):
//!
//! ```text
//! u32 rows | u32 cols | u32 n | u32 m
//! f32 values[rows * cols / m * n]          (group order)
//! packed indices, log2(m) bits each, LSB-first within each byte,
//! final byte zero-padded
//! ```

use crate::matrix::Matrix;
use crate::nm::{layer_mask, NmError, SaliencyMetric, SparsityLevel};
use crate::real::Real;

const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodingError {
    #[error(transparent)]
    Nm(#[from] NmError),
    #[error("blob truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("blob has {extra} trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("dimensions {rows}x{cols} overflow")]
    Overflow { rows: u32, cols: u32 },
    #[error("expected {expected} values and indices, got {values} values and {indices} indices")]
    CountMismatch {
        expected: usize,
        values: usize,
        indices: usize,
    },
    #[error("group {group}: index {index} out of range for group size {m}")]
    IndexOutOfRange { group: usize, index: u32, m: u32 },
    #[error("group {group}: indices are not strictly increasing")]
    UnorderedIndices { group: usize },
    #[error("non-zero padding bits in index stream")]
    DirtyPadding,
}

/// A weight matrix stored in N:M compressed form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseEncoding<T> {
    pub values: Vec<T>,
    pub indices: Vec<u32>,
    pub level: SparsityLevel,
    pub shape: (usize, usize),
}

impl<T: Real> SparseEncoding<T> {
    pub fn num_groups(&self) -> usize {
        self.shape.0 * (self.shape.1 / self.level.m() as usize)
    }

    pub fn expected_len(&self) -> usize {
        self.num_groups() * self.level.n() as usize
    }

    /// Checks the structural invariants `decode_sparse` relies on.
    pub fn validate(&self) -> Result<(), EncodingError> {
        let m = self.level.m() as usize;
        if !self.shape.1.is_multiple_of(m) {
            return Err(NmError::IndivisibleAxis {
                cols: self.shape.1,
                m: self.level.m(),
            }
            .into());
        }
        let expected = self.expected_len();
        if self.values.len() != expected || self.indices.len() != expected {
            return Err(EncodingError::CountMismatch {
                expected,
                values: self.values.len(),
                indices: self.indices.len(),
            });
        }
        let n = self.level.n() as usize;
        if n == 0 {
            return Ok(());
        }
        for (group, idx) in self.indices.chunks(n).enumerate() {
            for (k, &i) in idx.iter().enumerate() {
                if i >= self.level.m() {
                    return Err(EncodingError::IndexOutOfRange {
                        group,
                        index: i,
                        m: self.level.m(),
                    });
                }
                if k > 0 && idx[k - 1] >= i {
                    return Err(EncodingError::UnorderedIndices { group });
                }
            }
        }
        Ok(())
    }
}

/// Masks `weights` at `level` and keeps only the retained entries.
pub fn encode_sparse<T: Real>(
    weights: &Matrix<T>,
    level: SparsityLevel,
    metric: SaliencyMetric,
) -> Result<SparseEncoding<T>, EncodingError> {
    let mask = layer_mask(weights, level, metric)?;
    let m = level.m() as usize;
    let cap = weights.len() / m * level.n() as usize;
    let mut values = Vec::with_capacity(cap);
    let mut indices = Vec::with_capacity(cap);
    for (group, bits) in weights.as_slice().chunks(m).zip(mask.as_slice().chunks(m)) {
        for (i, (&w, &keep)) in group.iter().zip(bits).enumerate() {
            if keep {
                values.push(w);
                indices.push(i as u32);
            }
        }
    }
    Ok(SparseEncoding {
        values,
        indices,
        level,
        shape: weights.shape(),
    })
}

/// Expands an encoding back to a dense matrix with zeros at pruned positions.
pub fn decode_sparse<T: Real>(enc: &SparseEncoding<T>) -> Result<Matrix<T>, EncodingError> {
    enc.validate()?;
    let (rows, cols) = enc.shape;
    let m = enc.level.m() as usize;
    let n = enc.level.n() as usize;
    let mut out = Matrix::zeros(rows, cols);
    for ((dst, vals), idx) in out
        .as_mut_slice()
        .chunks_mut(m)
        .zip(enc.values.chunks(n))
        .zip(enc.indices.chunks(n))
    {
        for (&v, &i) in vals.iter().zip(idx) {
            dst[i as usize] = v;
        }
    }
    Ok(out)
}

impl SparseEncoding<f32> {
    /// Number of bytes used by the packed index stream.
    pub fn index_bytes(&self) -> usize {
        (self.indices.len() * self.level.index_bits() as usize).div_ceil(8)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len() + self.index_bytes());
        for v in [
            self.shape.0 as u32,
            self.shape.1 as u32,
            self.level.n(),
            self.level.m(),
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&pack_indices(&self.indices, self.level.index_bits()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncodingError> {
        if bytes.len() < HEADER_LEN {
            return Err(EncodingError::Truncated {
                need: HEADER_LEN,
                have: bytes.len(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        let (rows, cols, n, m) = (word(0), word(1), word(2), word(3));
        let level = SparsityLevel::new(n, m)?;
        if cols % m != 0 {
            return Err(NmError::IndivisibleAxis {
                cols: cols as usize,
                m,
            }
            .into());
        }
        let count = (rows as usize)
            .checked_mul((cols / m) as usize)
            .and_then(|g| g.checked_mul(n as usize))
            .ok_or(EncodingError::Overflow { rows, cols })?;
        let bits = level.index_bits() as usize;
        let value_bytes = count.checked_mul(4).ok_or(EncodingError::Overflow { rows, cols })?;
        let index_bytes = count
            .checked_mul(bits)
            .ok_or(EncodingError::Overflow { rows, cols })?
            .div_ceil(8);
        let need = HEADER_LEN
            .checked_add(value_bytes)
            .and_then(|v| v.checked_add(index_bytes))
            .ok_or(EncodingError::Overflow { rows, cols })?;
        if bytes.len() < need {
            return Err(EncodingError::Truncated {
                need,
                have: bytes.len(),
            });
        }
        if bytes.len() > need {
            return Err(EncodingError::TrailingBytes {
                extra: bytes.len() - need,
            });
        }
        (rows as usize)
            .checked_mul(cols as usize)
            .ok_or(EncodingError::Overflow { rows, cols })?;

        let values = bytes[HEADER_LEN..HEADER_LEN + value_bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let packed = &bytes[HEADER_LEN + value_bytes..];
        let indices = unpack_indices(packed, bits as u32, count)?;
        let enc = SparseEncoding {
            values,
            indices,
            level,
            shape: (rows as usize, cols as usize),
        };
        enc.validate()?;
        Ok(enc)
    }
}

fn pack_indices(indices: &[u32], bits: u32) -> Vec<u8> {
    let bits = bits as usize;
    let mut out = vec![0u8; (indices.len() * bits).div_ceil(8)];
    for (k, &idx) in indices.iter().enumerate() {
        for b in 0..bits {
            if (idx >> b) & 1 == 1 {
                let p = k * bits + b;
                out[p / 8] |= 1 << (p % 8);
            }
        }
    }
    out
}

fn unpack_indices(packed: &[u8], bits: u32, count: usize) -> Result<Vec<u32>, EncodingError> {
    let bits = bits as usize;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut idx = 0u32;
        for b in 0..bits {
            let p = k * bits + b;
            if (packed[p / 8] >> (p % 8)) & 1 == 1 {
                idx |= 1 << b;
            }
        }
        out.push(idx);
    }
    let used = count * bits;
    if !used.is_multiple_of(8) && packed[used / 8] >> (used % 8) != 0 {
        return Err(EncodingError::DirtyPadding);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nm::apply_mask;

    fn lvl(s: &str) -> SparsityLevel {
        s.parse().unwrap()
    }

    #[test]
    fn encode_example() {
        let w = Matrix::from_vec(1, 4, vec![1.0f32, -3.0, 0.5, 2.0]).unwrap();
        let enc = encode_sparse(&w, lvl("2:4"), SaliencyMetric::Magnitude).unwrap();
        assert_eq!(enc.values, vec![-3.0, 2.0]);
        assert_eq!(enc.indices, vec![1, 3]);
        let bytes = enc.to_bytes();
        // header + 2 values + 4 bits of indices
        assert_eq!(bytes.len(), 16 + 8 + 1);
        assert_eq!(*bytes.last().unwrap(), 0b1101);
        assert_eq!(SparseEncoding::from_bytes(&bytes).unwrap(), enc);
    }

    #[test]
    fn dense_encoding_keeps_everything() {
        let w = Matrix::from_vec(2, 4, vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let enc = encode_sparse(&w, lvl("4:4"), SaliencyMetric::Magnitude).unwrap();
        assert_eq!(enc.values, w.as_slice());
        assert_eq!(enc.indices, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(decode_sparse(&enc).unwrap(), w);
    }

    #[test]
    fn decode_matches_masked_dense() {
        let w = Matrix::from_vec(2, 8, (0..16).map(|i| ((i * 7) % 11) as f32 - 5.0).collect())
            .unwrap();
        for l in ["1:4", "2:4", "3:4", "1:8", "5:8"] {
            let level = lvl(l);
            let enc = encode_sparse(&w, level, SaliencyMetric::Magnitude).unwrap();
            let mask = layer_mask(&w, level, SaliencyMetric::Magnitude).unwrap();
            assert_eq!(decode_sparse(&enc).unwrap(), apply_mask(&w, &mask).unwrap());
        }
    }

    #[test]
    fn corrupted_index_is_rejected() {
        let w = Matrix::from_vec(1, 4, vec![1.0f32, -3.0, 0.5, 2.0]).unwrap();
        let mut enc = encode_sparse(&w, lvl("2:4"), SaliencyMetric::Magnitude).unwrap();
        enc.indices[1] = 4;
        assert!(matches!(
            decode_sparse(&enc),
            Err(EncodingError::IndexOutOfRange { index: 4, .. })
        ));
        enc.indices = vec![3, 3];
        assert!(matches!(
            decode_sparse(&enc),
            Err(EncodingError::UnorderedIndices { group: 0 })
        ));
        enc.indices = vec![1];
        assert!(matches!(
            decode_sparse(&enc),
            Err(EncodingError::CountMismatch { .. })
        ));
    }

    #[test]
    fn malformed_blobs_are_rejected() {
        assert!(matches!(
            SparseEncoding::from_bytes(&[0; 7]),
            Err(EncodingError::Truncated { .. })
        ));
        let w = Matrix::from_vec(1, 4, vec![1.0f32, -3.0, 0.5, 2.0]).unwrap();
        let mut bytes = encode_sparse(&w, lvl("2:4"), SaliencyMetric::Magnitude)
            .unwrap()
            .to_bytes();
        bytes.push(0);
        assert!(matches!(
            SparseEncoding::from_bytes(&bytes),
            Err(EncodingError::TrailingBytes { extra: 1 })
        ));
        bytes.pop();
        *bytes.last_mut().unwrap() |= 0x10;
        assert_eq!(
            SparseEncoding::from_bytes(&bytes).unwrap_err(),
            EncodingError::DirtyPadding
        );
        let mut huge = vec![0u8; 16];
        huge[0..4].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[4..8].copy_from_slice(&(u32::MAX - 3).to_le_bytes());
        huge[8..12].copy_from_slice(&4u32.to_le_bytes());
        huge[12..16].copy_from_slice(&4u32.to_le_bytes());
        assert!(SparseEncoding::from_bytes(&huge).is_err());
    }
}
