//! Checkpoint file: `NMSNCKPT`, u32 format version, u32 header length, a
//! JSON header, then every tensor as little-endian f32 in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::ArchSpec;
use crate::model::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::model::params::VitParams;
use crate::model::VitModel;

pub const MAGIC: &[u8; 8] = b"NMSNCKPT";
pub const VERSION: u32 = 1;
const MAX_HEADER: usize = 1 << 24;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("header is not valid: {0}")]
    Header(String),
    #[error("tensor {index} is `{got}`, expected `{expected}`")]
    TensorName {
        index: usize,
        expected: String,
        got: String,
    },
    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchSpec,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    optimizer: Option<OptimizerState>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerState {
    config: OptimizerConfig,
    step: u64,
}

/// A dense model plus, optionally, the optimizer that was training it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: VitModel<f32>,
    pub optimizer: Option<Optimizer<f32>>,
}

impl Checkpoint {
    pub fn new(model: VitModel<f32>) -> Self {
        Self {
            model,
            optimizer: None,
        }
    }

    /// Tensor entries in file order: parameters, then Adam moments if any.
    fn entries(arch: &ArchSpec, moments: bool) -> Vec<TensorEntry> {
        let specs = VitParams::<f32>::specs(arch);
        let mut out: Vec<TensorEntry> = specs
            .iter()
            .map(|s| TensorEntry {
                name: s.name.clone(),
                shape: s.shape.clone(),
            })
            .collect();
        if moments {
            for prefix in ["adam_m", "adam_v"] {
                out.extend(specs.iter().map(|s| TensorEntry {
                    name: format!("{prefix}.{}", s.name),
                    shape: s.shape.clone(),
                }));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = &self.model.arch;
        let opt = self.optimizer.as_ref();
        let moments = opt.is_some_and(|o| o.config().kind == OptimizerKind::AdamW);
        let header = Header {
            arch: arch.clone(),
            tensors: Self::entries(arch, moments),
            optimizer: opt.map(|o| OptimizerState {
                config: *o.config(),
                step: o.steps_taken(),
            }),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.model.params.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |t: &[f32]| {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for t in self.model.params.tensors() {
            put(t);
        }
        if let (Some(o), true) = (opt, moments) {
            let (m, v) = o.moments();
            m.iter().chain(v).for_each(|t| put(t));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 {
            return Err(if bytes.len() >= 8 && &bytes[..8] != MAGIC {
                CheckpointError::Magic
            } else {
                CheckpointError::Truncated
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let json_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if json_len > MAX_HEADER {
            return Err(CheckpointError::Header("header too large".into()));
        }
        let rest = &bytes[16..];
        if rest.len() < json_len {
            return Err(CheckpointError::Truncated);
        }
        let header: Header = serde_json::from_slice(&rest[..json_len])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        header
            .arch
            .validate()
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let arch = header.arch;

        let moments = match &header.optimizer {
            Some(s) => s.config.kind == OptimizerKind::AdamW,
            None => false,
        };
        let expected = Self::entries(&arch, moments);
        if header.tensors.len() != expected.len() {
            return Err(CheckpointError::Header(format!(
                "{} tensors listed, expected {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        for (index, (got, want)) in header.tensors.iter().zip(&expected).enumerate() {
            if got.name != want.name {
                return Err(CheckpointError::TensorName {
                    index,
                    expected: want.name.clone(),
                    got: got.name.clone(),
                });
            }
            if got.shape != want.shape {
                return Err(CheckpointError::TensorShape {
                    name: got.name.clone(),
                    expected: want.shape.clone(),
                    got: got.shape.clone(),
                });
            }
        }
        let total = expected
            .iter()
            .try_fold(0usize, |acc, e| {
                e.shape
                    .iter()
                    .try_fold(1usize, |p, &d| p.checked_mul(d))
                    .and_then(|n| acc.checked_add(n))
            })
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Header("tensor sizes overflow".into()))?;
        let data = &rest[json_len..];
        if data.len() < total {
            return Err(CheckpointError::Truncated);
        }
        if data.len() > total {
            return Err(CheckpointError::TrailingBytes(data.len() - total));
        }
        let mut floats = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));

        let mut params = VitParams::<f32>::zeros(&arch);
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v = floats.next().unwrap();
            }
        }
        let optimizer = header.optimizer.map(|state| {
            let mut opt = Optimizer::new(state.config, &arch);
            let (m, v) = if moments {
                let mut take = || -> Vec<Vec<f32>> {
                    VitParams::<f32>::specs(&arch)
                        .iter()
                        .map(|s| {
                            let n: usize = s.shape.iter().product();
                            floats.by_ref().take(n).collect()
                        })
                        .collect()
                };
                let m = take();
                (m, take())
            } else {
                (Vec::new(), Vec::new())
            };
            opt.restore(state.step, m, v);
            opt
        });
        Ok(Self {
            model: VitModel { arch, params },
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
