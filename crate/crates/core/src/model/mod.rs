//! The micro vision transformer: parameters, hand-written backprop, losses,
//! optimizers and checkpoints.

pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod params;
pub mod vit;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cost::ArchSpec;
use crate::matrix::Matrix;
use crate::real::Real;

pub use loss::Distillation;
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::VitParams;
pub use vit::{EffectiveWeights, ModuleWeights};

/// Samples per work unit when a batch is split across threads. Fixed so the
/// reduction order, and therefore the result, does not depend on the pool.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("parameters do not match the architecture")]
    ShapeMismatch,
    #[error("input has {got} features, architecture expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("{inputs} inputs but {labels} labels")]
    BatchMismatch { inputs: usize, labels: usize },
    #[error(transparent)]
    Arch(#[from] crate::cost::CostError),
}

/// A dense micro-ViT (pretrained weights or the distillation teacher).
#[derive(Debug, Clone, PartialEq)]
pub struct VitModel<T> {
    pub arch: ArchSpec,
    pub params: VitParams<T>,
}

impl<T: Real> VitModel<T> {
    pub fn new(arch: ArchSpec, params: VitParams<T>) -> Result<Self, ModelError> {
        arch.validate()?;
        if !params.matches(&arch) {
            return Err(ModelError::ShapeMismatch);
        }
        Ok(Self { arch, params })
    }

    pub fn random(arch: ArchSpec, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = VitParams::init(&arch, &mut rng);
        Ok(Self { arch, params })
    }

    /// Dense logits for every row of `inputs`.
    pub fn logits(&self, inputs: &Matrix<T>) -> Result<Vec<Vec<T>>, ModelError> {
        batch_logits(&self.arch, &self.params, &vit::dense_weights(&self.params), inputs)
    }
}

pub(crate) fn check_inputs<T: Real>(arch: &ArchSpec, inputs: &Matrix<T>) -> Result<(), ModelError> {
    if inputs.cols() != arch.input_dim() {
        return Err(ModelError::InputWidth {
            expected: arch.input_dim(),
            got: inputs.cols(),
        });
    }
    Ok(())
}

/// Logits for every row of `inputs` under the given effective weights.
pub fn batch_logits<T: Real>(
    arch: &ArchSpec,
    params: &VitParams<T>,
    eff: &[ModuleWeights<'_, T>],
    inputs: &Matrix<T>,
) -> Result<Vec<Vec<T>>, ModelError> {
    check_inputs(arch, inputs)?;
    Ok((0..inputs.rows())
        .into_par_iter()
        .map(|i| vit::logits(arch, params, eff, inputs.row(i)))
        .collect())
}

/// Mean loss over a batch and the gradient of that mean.
///
/// `teacher_logits`, when given, must hold one row per input.
pub fn loss_and_grad<T: Real>(
    arch: &ArchSpec,
    params: &VitParams<T>,
    eff: &[ModuleWeights<'_, T>],
    inputs: &Matrix<T>,
    labels: &[usize],
    teacher_logits: Option<&[Vec<T>]>,
    distill: Option<Distillation>,
) -> Result<(f64, VitParams<T>), ModelError> {
    check_inputs(arch, inputs)?;
    if labels.len() != inputs.rows() {
        return Err(ModelError::BatchMismatch {
            inputs: inputs.rows(),
            labels: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= arch.num_classes) {
        return Err(ModelError::Label {
            label,
            classes: arch.num_classes,
        });
    }
    let n = inputs.rows();
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let partials: Vec<(f64, VitParams<T>)> = starts
        .par_iter()
        .map(|&start| {
            let mut grad = VitParams::zeros(arch);
            let mut loss = 0.0;
            for i in start..(start + CHUNK).min(n) {
                let (logits, cache) = vit::forward(arch, params, eff, inputs.row(i));
                let teacher = teacher_logits.map(|t| t[i].as_slice());
                let (l, dlogits) = loss::sample_loss(&logits, labels[i], teacher, distill);
                loss += l.as_f64();
                vit::backward(arch, params, eff, &cache, &dlogits, &mut grad);
            }
            (loss, grad)
        })
        .collect();
    let mut grad = VitParams::zeros(arch);
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        grad.add_assign(g);
    }
    let inv = T::one() / T::from_usize(n.max(1)).unwrap();
    grad.scale(inv);
    Ok((loss / n.max(1) as f64, grad))
}
