use serde::{Deserialize, Serialize};

use crate::real::Real;

/// Soft-target distillation against a frozen teacher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Distillation {
    pub temperature: f64,
    /// Weight of the hard-label term; the teacher term gets `1 - hard_weight`.
    pub hard_weight: f64,
}

impl Default for Distillation {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            hard_weight: 0.5,
        }
    }
}

pub fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax<T: Real>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = z.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    z.iter().map(|&v| v - lse).collect()
}

/// Cross-entropy against a hard label and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let logp = log_softmax(logits);
    let mut grad = softmax(logits);
    grad[label] = grad[label] - T::one();
    (-logp[label], grad)
}

/// Cross-entropy of `softmax(student / tau)` against `softmax(teacher / tau)`
/// and its gradient w.r.t. the student logits.
pub fn soft_cross_entropy<T: Real>(student: &[T], teacher: &[T], temperature: f64) -> (T, Vec<T>) {
    let tau = T::from_f64_lossy(temperature);
    let s: Vec<T> = student.iter().map(|&v| v / tau).collect();
    let t: Vec<T> = teacher.iter().map(|&v| v / tau).collect();
    let q = softmax(&t);
    let logp = log_softmax(&s);
    let p = softmax(&s);
    let loss = -q.iter().zip(&logp).map(|(&a, &b)| a * b).sum::<T>();
    let grad = p.iter().zip(&q).map(|(&pi, &qi)| (pi - qi) / tau).collect();
    (loss, grad)
}

/// Entropy of `softmax(logits / tau)`; the minimum of `soft_cross_entropy`.
pub fn softmax_entropy<T: Real>(logits: &[T], temperature: f64) -> T {
    let tau = T::from_f64_lossy(temperature);
    let z: Vec<T> = logits.iter().map(|&v| v / tau).collect();
    let p = softmax(&z);
    let logp = log_softmax(&z);
    -p.iter().zip(&logp).map(|(&a, &b)| a * b).sum::<T>()
}

/// Per-sample training loss: hard-label cross-entropy, blended with the
/// teacher term when distillation is on and teacher logits are given.
pub fn sample_loss<T: Real>(
    logits: &[T],
    label: usize,
    teacher: Option<&[T]>,
    distill: Option<Distillation>,
) -> (T, Vec<T>) {
    let (hard, hard_grad) = cross_entropy(logits, label);
    match (teacher, distill) {
        (Some(teacher), Some(cfg)) => {
            let (soft, soft_grad) = soft_cross_entropy(logits, teacher, cfg.temperature);
            let a = T::from_f64_lossy(cfg.hard_weight);
            let b = T::one() - a;
            let grad = hard_grad
                .iter()
                .zip(&soft_grad)
                .map(|(&h, &s)| a * h + b * s)
                .collect();
            (a * hard + b * soft, grad)
        }
        _ => (hard, hard_grad),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-7, "i={i} fd={fd} an={}", grad[i]);
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let z = [0.3, -1.2, 2.0, 0.1];
        let (_, g) = cross_entropy(&z, 2);
        fd_check(|z| cross_entropy(z, 2).0, &z, &g);
    }

    #[test]
    fn soft_cross_entropy_gradient() {
        let z = [0.3, -1.2, 2.0, 0.1];
        let t = [1.0, 0.0, -0.5, 0.7];
        for tau in [1.0, 2.5] {
            let (_, g) = soft_cross_entropy(&z, &t, tau);
            fd_check(|z| soft_cross_entropy(z, &t, tau).0, &z, &g);
        }
        let d = Distillation::default();
        let (_, g) = sample_loss(&z, 1, Some(&t), Some(d));
        fd_check(|z| sample_loss(z, 1, Some(&t), Some(d)).0, &z, &g);
    }

    #[test]
    fn distillation_minimum_is_teacher_entropy() {
        let teacher = [0.5, -0.3, 1.7, 0.0];
        for tau in [1.0, 3.0] {
            let (at_teacher, grad): (f64, Vec<f64>) = soft_cross_entropy(&teacher, &teacher, tau);
            let h = softmax_entropy(&teacher, tau);
            assert!((at_teacher - h).abs() < 1e-12);
            assert!(grad.iter().all(|g| g.abs() < 1e-12));
            for shift in [[0.1, 0.0, 0.0, 0.0], [0.0, -0.4, 0.2, 0.3]] {
                let s: Vec<f64> = teacher.iter().zip(shift).map(|(a, b)| a + b).collect();
                assert!(soft_cross_entropy(&s, &teacher, tau).0 > h);
            }
        }
        // adding a constant to every logit leaves the softmax unchanged
        let shifted: Vec<f64> = teacher.iter().map(|v| v + 3.0).collect();
        assert!((soft_cross_entropy(&shifted, &teacher, 1.0).0 - softmax_entropy(&teacher, 1.0)).abs() < 1e-12);
    }
}
