//! Weight-sharing supernet over the micro-ViT.
//!
//! Each prunable module owns one weight matrix. A configuration picks an N:M
//! level per module; the mask is recomputed from the current weights on every
//! call, so sparser levels always keep a subset of what denser levels keep.

use std::borrow::Cow;

use crate::cost::ArchSpec;
use crate::data::Dataset;
use crate::encoding::{decode_sparse, encode_sparse, EncodingError, SparseEncoding};
use crate::matrix::Matrix;
use crate::model::optim::{Optimizer, OptimizerConfig};
use crate::model::vit::{EffectiveWeights, ModuleWeights};
use crate::model::{self, Distillation, ModelError, VitModel, VitParams};
use crate::nm::{apply_mask, layer_mask, MaskTensor, NmError, SaliencyMetric};
use crate::real::Real;
use crate::space::{SearchSpace, SparseConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SupernetError {
    #[error("configuration has {got} levels, network has {expected} prunable modules")]
    ConfigLength { expected: usize, got: usize },
    #[error("level {level} at layer {layer} is not in the search space")]
    UnknownLevel { layer: usize, level: String },
    #[error("search space modules do not match the architecture")]
    SpaceMismatch,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss {loss} for configuration {config}")]
    NonFiniteLoss { loss: f64, config: String },
    #[error(transparent)]
    Nm(#[from] NmError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Supernet<T = f32> {
    arch: ArchSpec,
    params: VitParams<T>,
    space: SearchSpace,
    metric: SaliencyMetric,
}

impl<T: Real> Supernet<T> {
    pub fn new(arch: ArchSpec, params: VitParams<T>, space: SearchSpace) -> Result<Self, SupernetError> {
        arch.validate().map_err(ModelError::from)?;
        if !params.matches(&arch) {
            return Err(ModelError::ShapeMismatch.into());
        }
        if space.cost().modules() != arch.modules().as_slice() {
            return Err(SupernetError::SpaceMismatch);
        }
        Ok(Self {
            arch,
            params,
            space,
            metric: SaliencyMetric::Magnitude,
        })
    }

    /// Copies the pretrained weights into the shared weights unchanged.
    pub fn init_from_pretrained(pretrained: &VitModel<T>, space: SearchSpace) -> Result<Self, SupernetError> {
        Self::new(pretrained.arch.clone(), pretrained.params.clone(), space)
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &VitParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut VitParams<T> {
        &mut self.params
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn metric(&self) -> SaliencyMetric {
        self.metric
    }

    /// The shared weights as a plain dense model.
    pub fn to_model(&self) -> VitModel<T> {
        VitModel {
            arch: self.arch.clone(),
            params: self.params.clone(),
        }
    }

    /// Length and membership checks. The cost cap is not enforced here so
    /// that configurations above it (such as the dense one) stay runnable.
    pub fn check_config(&self, config: &SparseConfig) -> Result<(), SupernetError> {
        let expected = self.params.num_prunable();
        if config.len() != expected {
            return Err(SupernetError::ConfigLength {
                expected,
                got: config.len(),
            });
        }
        for (layer, &level) in config.levels().iter().enumerate() {
            if self.space.level_index(level).is_none() {
                return Err(SupernetError::UnknownLevel {
                    layer,
                    level: level.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Masked weights for `config`, derived from the current shared weights.
    /// Dense levels pass the shared weight through untouched.
    pub fn effective_weights(&self, config: &SparseConfig) -> Result<EffectiveWeights<'_, T>, SupernetError> {
        self.check_config(config)?;
        config
            .levels()
            .iter()
            .enumerate()
            .map(|(l, &level)| {
                let w = self.params.prunable(l);
                if level.is_dense() {
                    return Ok(ModuleWeights {
                        weight: Cow::Borrowed(w),
                        mask: None,
                    });
                }
                let mask = layer_mask(w, level, self.metric)?;
                Ok(ModuleWeights {
                    weight: Cow::Owned(apply_mask(w, &mask)?),
                    mask: Some(mask),
                })
            })
            .collect()
    }

    /// Masks `config` would apply; `None` for dense modules.
    pub fn masks(&self, config: &SparseConfig) -> Result<Vec<Option<MaskTensor>>, SupernetError> {
        Ok(self
            .effective_weights(config)?
            .into_iter()
            .map(|m| m.mask)
            .collect())
    }

    pub fn forward(&self, config: &SparseConfig, inputs: &Matrix<T>) -> Result<Vec<Vec<T>>, SupernetError> {
        let eff = self.effective_weights(config)?;
        Ok(model::batch_logits(&self.arch, &self.params, &eff, inputs)?)
    }

    /// Mean loss and its gradient for `config`. Pruned positions of the
    /// prunable weights get exactly zero gradient.
    pub fn loss_and_grad(
        &self,
        config: &SparseConfig,
        inputs: &Matrix<T>,
        labels: &[usize],
        teacher_logits: Option<&[Vec<T>]>,
        distill: Option<Distillation>,
    ) -> Result<(f64, VitParams<T>), SupernetError> {
        let eff = self.effective_weights(config)?;
        Ok(model::loss_and_grad(
            &self.arch,
            &self.params,
            &eff,
            inputs,
            labels,
            teacher_logits,
            distill,
        )?)
    }

    /// Top-1 accuracy of the subnet on `data`.
    pub fn evaluate(&self, config: &SparseConfig, data: &Dataset<T>) -> Result<f64, SupernetError> {
        if data.is_empty() {
            return Err(SupernetError::EmptyDataset);
        }
        let logits = self.forward(config, data.features())?;
        Ok(accuracy(&logits, data.labels()))
    }

    /// Freezes the subnet for `config` into per-module sparse encodings.
    pub fn extract_subnet(&self, config: &SparseConfig) -> Result<SparseSubnet<T>, SupernetError> {
        self.check_config(config)?;
        let encodings = config
            .levels()
            .iter()
            .enumerate()
            .map(|(l, &level)| encode_sparse(self.params.prunable(l), level, self.metric))
            .collect::<Result<Vec<_>, _>>()?;
        SparseSubnet::from_parts(self.arch.clone(), self.params.clone(), config.clone(), encodings)
    }
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy<T: Real>(logits: &[Vec<T>], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(z, &y)| argmax(z) == y)
        .count();
    correct as f64 / labels.len() as f64
}

pub fn argmax<T: Real>(z: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// A standalone sparse network: dense non-prunable parameters plus one
/// sparse encoding per prunable module.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSubnet<T = f32> {
    arch: ArchSpec,
    config: SparseConfig,
    encodings: Vec<SparseEncoding<T>>,
    params: VitParams<T>,
}

impl<T: Real> SparseSubnet<T> {
    /// `base` supplies the non-prunable parameters; its prunable weights are
    /// replaced by the decoded encodings.
    pub fn from_parts(
        arch: ArchSpec,
        mut base: VitParams<T>,
        config: SparseConfig,
        encodings: Vec<SparseEncoding<T>>,
    ) -> Result<Self, SupernetError> {
        if !base.matches(&arch) {
            return Err(ModelError::ShapeMismatch.into());
        }
        if encodings.len() != base.num_prunable() || config.len() != encodings.len() {
            return Err(SupernetError::ConfigLength {
                expected: base.num_prunable(),
                got: encodings.len(),
            });
        }
        for (l, enc) in encodings.iter().enumerate() {
            let w = decode_sparse(enc)?;
            if w.shape() != base.prunable(l).shape() || enc.level != config.get(l) {
                return Err(ModelError::ShapeMismatch.into());
            }
            *base.prunable_mut(l) = w;
        }
        Ok(Self {
            arch,
            config,
            encodings,
            params: base,
        })
    }

    pub fn config(&self) -> &SparseConfig {
        &self.config
    }

    pub fn encodings(&self) -> &[SparseEncoding<T>] {
        &self.encodings
    }

    /// Parameters with the decoded (masked) prunable weights in place.
    pub fn params(&self) -> &VitParams<T> {
        &self.params
    }

    pub fn forward(&self, inputs: &Matrix<T>) -> Result<Vec<Vec<T>>, SupernetError> {
        let eff = model::vit::dense_weights(&self.params);
        Ok(model::batch_logits(&self.arch, &self.params, &eff, inputs)?)
    }

    pub fn evaluate(&self, data: &Dataset<T>) -> Result<f64, SupernetError> {
        if data.is_empty() {
            return Err(SupernetError::EmptyDataset);
        }
        Ok(accuracy(&self.forward(data.features())?, data.labels()))
    }
}

/// Owns the optimizer state for training a supernet one configuration at a
/// time.
#[derive(Debug, Clone)]
pub struct SupernetTrainer<T = f32> {
    optimizer: Optimizer<T>,
    distill: Option<Distillation>,
}

impl<T: Real> SupernetTrainer<T> {
    pub fn new(cfg: OptimizerConfig, arch: &ArchSpec, distill: Option<Distillation>) -> Self {
        Self {
            optimizer: Optimizer::new(cfg, arch),
            distill,
        }
    }

    pub fn from_optimizer(optimizer: Optimizer<T>, distill: Option<Distillation>) -> Self {
        Self { optimizer, distill }
    }

    pub fn optimizer(&self) -> &Optimizer<T> {
        &self.optimizer
    }

    /// One update of the shared weights through the masked forward of
    /// `config`. Only retained positions of prunable weights change.
    pub fn train_step(
        &mut self,
        net: &mut Supernet<T>,
        config: &SparseConfig,
        inputs: &Matrix<T>,
        labels: &[usize],
        teacher_logits: Option<&[Vec<T>]>,
    ) -> Result<f64, SupernetError> {
        let distill = teacher_logits.and(self.distill);
        let (loss, grad, masks) = {
            let eff = net.effective_weights(config)?;
            let (loss, grad) = model::loss_and_grad(
                &net.arch,
                &net.params,
                &eff,
                inputs,
                labels,
                teacher_logits.filter(|_| distill.is_some()),
                distill,
            )?;
            let masks: Vec<Option<MaskTensor>> = eff.into_iter().map(|m| m.mask).collect();
            (loss, grad, masks)
        };
        if !loss.is_finite() {
            return Err(SupernetError::NonFiniteLoss {
                loss,
                config: config.to_string(),
            });
        }
        let refs: Vec<Option<&MaskTensor>> = masks.iter().map(Option::as_ref).collect();
        self.optimizer.step(&mut net.params, &grad, &refs);
        Ok(loss)
    }
}

/// Accuracy oracle used by the choice filter and the search.
pub trait AccuracyEstimator: Sync {
    fn accuracy(&self, config: &SparseConfig) -> Result<f64, SupernetError>;
}

/// Scores configurations with a supernet on a fixed dataset.
#[derive(Debug, Clone, Copy)]
pub struct SupernetEstimator<'a, T = f32> {
    pub net: &'a Supernet<T>,
    pub data: &'a Dataset<T>,
}

impl<'a, T: Real> SupernetEstimator<'a, T> {
    pub fn new(net: &'a Supernet<T>, data: &'a Dataset<T>) -> Self {
        Self { net, data }
    }
}

impl<T: Real> AccuracyEstimator for SupernetEstimator<'_, T> {
    fn accuracy(&self, config: &SparseConfig) -> Result<f64, SupernetError> {
        self.net.evaluate(config, self.data)
    }
}

/// Wraps a plain function as an estimator.
pub struct FnEstimator<F>(pub F);

impl<F> AccuracyEstimator for FnEstimator<F>
where
    F: Fn(&SparseConfig) -> f64 + Sync,
{
    fn accuracy(&self, config: &SparseConfig) -> Result<f64, SupernetError> {
        Ok((self.0)(config))
    }
}
