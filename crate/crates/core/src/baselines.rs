//! Comparison baselines: the ER layer-wise sparsity heuristic rounded to the
//! nearest N:M level, and search with a masked dense model as the accuracy
//! estimator instead of the trained supernet.

use serde::{Deserialize, Serialize};

use crate::cost::CostIntervals;
use crate::data::Dataset;
use crate::evo::{search, Candidate, EvoConfig, EvoError, SearchResult};
use crate::model::VitModel;
use crate::nm::SparsityLevel;
use crate::real::Real;
use crate::sampling::{ChoiceProbabilityTable, TwoStepOptions};
use crate::space::{SearchSpace, SparseConfig};
use crate::supernet::{AccuracyEstimator, Supernet, SupernetError, SupernetEstimator};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BaselineError {
    #[error("target sparsity must lie strictly between 0 and 1, got {0}")]
    BadTarget(f64),
    #[error("target sparsity {target} is unreachable; the most the layer shapes allow is {max}")]
    Unreachable { target: f64, max: f64 },
    #[error(transparent)]
    Evo(#[from] EvoError),
    #[error(transparent)]
    Supernet(#[from] SupernetError),
}

/// Unstructured ER density score `1 - (rows + cols) / (rows * cols)`,
/// floored at zero.
pub fn er_score(rows: usize, cols: usize) -> f64 {
    let (r, c) = (rows as f64, cols as f64);
    (1.0 - (r + c) / (r * c)).max(0.0)
}

/// Per-layer unstructured sparsity `min(k * score, 1)` with `k` chosen so
/// the parameter-weighted mean equals `target`.
pub fn er_sparsities(shapes: &[(usize, usize)], target: f64) -> Result<Vec<f64>, BaselineError> {
    if !(target > 0.0 && target < 1.0) {
        return Err(BaselineError::BadTarget(target));
    }
    let scores: Vec<f64> = shapes.iter().map(|&(r, c)| er_score(r, c)).collect();
    let weights: Vec<f64> = shapes.iter().map(|&(r, c)| (r * c) as f64).collect();
    let total: f64 = weights.iter().sum();
    let mean_at = |k: f64| -> f64 {
        scores
            .iter()
            .zip(&weights)
            .map(|(&s, &w)| (k * s).min(1.0) * w)
            .sum::<f64>()
            / total
    };
    let min_score = scores.iter().copied().filter(|&s| s > 0.0).fold(f64::INFINITY, f64::min);
    if !min_score.is_finite() {
        return Err(BaselineError::Unreachable { target, max: 0.0 });
    }
    let mut hi = 1.0 / min_score;
    let max = mean_at(hi);
    if max < target {
        return Err(BaselineError::Unreachable { target, max });
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(scores.iter().map(|&s| (hi * s).min(1.0)).collect())
}

/// Level whose zero fraction is nearest to `sparsity`; ties go to the
/// denser level.
pub fn nearest_level(levels: &[SparsityLevel], sparsity: f64) -> SparsityLevel {
    const TIE: f64 = 1e-12;
    let mut best = levels[0];
    for &l in &levels[1..] {
        let d = (l.zero_fraction() - sparsity).abs();
        let bd = (best.zero_fraction() - sparsity).abs();
        if d < bd - TIE || (d <= bd + TIE && l.density() > best.density()) {
            best = l;
        }
    }
    best
}

/// ER configuration for `target` overall sparsity of the prunable weights.
/// The result uses only levels of the space; it is not checked against the
/// cost cap.
pub fn er_config(space: &SearchSpace, target: f64) -> Result<SparseConfig, BaselineError> {
    let shapes: Vec<(usize, usize)> = space.cost().modules().iter().map(|m| (m.rows, m.cols)).collect();
    let s = er_sparsities(&shapes, target)?;
    Ok(SparseConfig::new(
        s.into_iter().map(|x| nearest_level(space.levels(), x)).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPoint {
    pub config: SparseConfig,
    pub flops: u64,
    /// Accuracy the search estimator assigned.
    pub estimated_accuracy: f64,
    /// Accuracy under the common final evaluator.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedRow {
    pub flops_budget: u64,
    pub dense_estimator: Option<MatchedPoint>,
    pub supernet_estimator: Option<MatchedPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorComparison {
    pub dense: SearchResult,
    pub supernet: SearchResult,
    pub rows: Vec<MatchedRow>,
}

/// Best (most expensive within budget) member of a front, which on a Pareto
/// front is also the most accurate.
fn best_within(front: &[Candidate], budget: u64) -> Option<&Candidate> {
    front.iter().filter(|c| c.flops <= budget).max_by(|a, b| {
        a.accuracy
            .total_cmp(&b.accuracy)
            .then(b.flops.cmp(&a.flops))
            .then_with(|| b.config.cmp(&a.config))
    })
}

/// Runs the same search twice, differing only in the estimator, and lines
/// the fronts up at every FLOPs value either front reaches. Both sides are
/// re-scored with `final_eval`.
#[allow(clippy::too_many_arguments)]
pub fn compare_with<A, B, F>(
    dense_estimator: &A,
    supernet_estimator: &B,
    final_eval: &F,
    space: &SearchSpace,
    intervals: &CostIntervals,
    table: &ChoiceProbabilityTable,
    cfg: &EvoConfig,
    sampler_opts: TwoStepOptions,
) -> Result<EstimatorComparison, BaselineError>
where
    A: AccuracyEstimator + ?Sized,
    B: AccuracyEstimator + ?Sized,
    F: AccuracyEstimator + ?Sized,
{
    let dense = search(dense_estimator, space, intervals, table, cfg, sampler_opts)?;
    let supernet = search(supernet_estimator, space, intervals, table, cfg, sampler_opts)?;
    let mut budgets: Vec<u64> = dense
        .pareto
        .iter()
        .chain(&supernet.pareto)
        .map(|c| c.flops)
        .collect();
    budgets.sort_unstable();
    budgets.dedup();
    let point = |c: &Candidate| -> Result<MatchedPoint, BaselineError> {
        Ok(MatchedPoint {
            config: c.config.clone(),
            flops: c.flops,
            estimated_accuracy: c.accuracy,
            accuracy: final_eval.accuracy(&c.config)?,
        })
    };
    let rows = budgets
        .into_iter()
        .map(|b| {
            Ok(MatchedRow {
                flops_budget: b,
                dense_estimator: best_within(&dense.pareto, b).map(point).transpose()?,
                supernet_estimator: best_within(&supernet.pareto, b).map(point).transpose()?,
            })
        })
        .collect::<Result<Vec<_>, BaselineError>>()?;
    Ok(EstimatorComparison {
        dense,
        supernet,
        rows,
    })
}

/// Search with the masked pretrained model versus the trained supernet,
/// both scored on `proxy`; final accuracies come from the supernet.
#[allow(clippy::too_many_arguments)]
pub fn compare_estimators<T: Real>(
    dense_model: &VitModel<T>,
    net: &Supernet<T>,
    proxy: &Dataset<T>,
    intervals: &CostIntervals,
    table: &ChoiceProbabilityTable,
    cfg: &EvoConfig,
    sampler_opts: TwoStepOptions,
) -> Result<EstimatorComparison, BaselineError> {
    let masked_dense = Supernet::init_from_pretrained(dense_model, net.space().clone())?;
    let dense_est = SupernetEstimator::new(&masked_dense, proxy);
    let net_est = SupernetEstimator::new(net, proxy);
    compare_with(
        &dense_est,
        &net_est,
        &net_est,
        net.space(),
        intervals,
        table,
        cfg,
        sampler_opts,
    )
}
