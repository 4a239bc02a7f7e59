use serde::{Deserialize, Serialize};

use crate::cost::ArchSpec;
use crate::model::params::VitParams;
use crate::nm::MaskTensor;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Decoupled decay applied to linear weight matrices only.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            learning_rate: 1e-3,
            weight_decay: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// SGD / AdamW over `VitParams`.
///
/// A step may carry a mask per prunable module; positions whose bit is off
/// are left untouched, including their moment estimates and weight decay.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    step: u64,
    decayed: Vec<bool>,
    prunable_of: Vec<Option<usize>>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig, arch: &ArchSpec) -> Self {
        let specs = VitParams::<T>::specs(arch);
        let decayed = specs
            .iter()
            .map(|s| s.name.ends_with(".weight") && s.shape.len() == 2)
            .collect();
        let prunable_of = specs.iter().map(|s| s.prunable).collect();
        let zeros: Vec<Vec<T>> = specs
            .iter()
            .map(|s| vec![T::zero(); s.shape.iter().product()])
            .collect();
        let adam = cfg.kind == OptimizerKind::AdamW;
        Self {
            cfg,
            step: 0,
            decayed,
            prunable_of,
            m: if adam { zeros.clone() } else { Vec::new() },
            v: if adam { zeros } else { Vec::new() },
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moment buffers in tensor order (empty for SGD).
    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    pub fn step(
        &mut self,
        params: &mut VitParams<T>,
        grads: &VitParams<T>,
        masks: &[Option<&MaskTensor>],
    ) {
        self.step += 1;
        let cfg = self.cfg;
        let lr = T::from_f64_lossy(cfg.learning_rate);
        let wd = T::from_f64_lossy(cfg.learning_rate * cfg.weight_decay);
        let b1 = T::from_f64_lossy(cfg.beta1);
        let b2 = T::from_f64_lossy(cfg.beta2);
        let eps = T::from_f64_lossy(cfg.eps);
        let bc1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(self.step.min(i32::MAX as u64) as i32));
        let bc2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(self.step.min(i32::MAX as u64) as i32));
        let grads = grads.tensors();
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[i];
            let mask = self.prunable_of[i].and_then(|l| masks.get(l).copied().flatten());
            let decay = self.decayed[i] && cfg.weight_decay != 0.0;
            for j in 0..p.len() {
                if let Some(mask) = mask {
                    if !mask.as_slice()[j] {
                        continue;
                    }
                }
                if decay {
                    p[j] = p[j] - wd * p[j];
                }
                match cfg.kind {
                    OptimizerKind::Sgd => p[j] = p[j] - lr * g[j],
                    OptimizerKind::AdamW => {
                        let m = &mut self.m[i][j];
                        let v = &mut self.v[i][j];
                        *m = b1 * *m + (T::one() - b1) * g[j];
                        *v = b2 * *v + (T::one() - b2) * g[j] * g[j];
                        let mh = *m / bc1;
                        let vh = *v / bc2;
                        p[j] = p[j] - lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}
