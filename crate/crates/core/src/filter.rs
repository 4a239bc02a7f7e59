//! Automatic choice filtering: score (layer, level) choices by the accuracy
//! of sampled subnets and stop sampling the ones that fall below a threshold.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::CostIntervals;
use crate::nm::SparsityLevel;
use crate::sampling::{
    ChoiceProbabilityTable, SamplingError, SamplingStrategy, TwoStepOptions, TwoStepSampler,
};
use crate::space::{SearchSpace, SparseConfig};
use crate::supernet::{AccuracyEstimator, SupernetError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FilterError {
    #[error("every choice of layer {layer} was filtered out; it is too sparse to keep accuracy")]
    AllZeroed { layer: usize },
    #[error("invalid filter configuration: {0}")]
    Config(String),
    #[error("score table shape does not match the probability table")]
    Mismatch,
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Estimator(#[from] SupernetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Subnets evaluated per filtering round.
    pub n_eval: usize,
    /// Top-1 accuracy (fraction) below which a choice is dropped.
    pub acc_th: f64,
    /// Size of the proxy evaluation subset drawn from the validation split.
    pub proxy_size: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_eval: 30,
            acc_th: 0.3,
            proxy_size: 128,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.n_eval == 0 {
            return Err(FilterError::Config("n_eval must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.acc_th) {
            return Err(FilterError::Config("acc_th must lie in [0, 1]".into()));
        }
        if self.proxy_size == 0 {
            return Err(FilterError::Config("proxy_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Running mean score and evaluation count per (layer, level).
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceScoreTable {
    levels: Vec<SparsityLevel>,
    mean: Vec<Vec<f64>>,
    count: Vec<Vec<u64>>,
}

impl ChoiceScoreTable {
    pub fn new(levels: Vec<SparsityLevel>, layers: usize) -> Self {
        let k = levels.len();
        Self {
            levels,
            mean: vec![vec![0.0; k]; layers],
            count: vec![vec![0; k]; layers],
        }
    }

    pub fn for_space(space: &SearchSpace) -> Self {
        Self::new(space.levels().to_vec(), space.num_layers())
    }

    pub fn levels(&self) -> &[SparsityLevel] {
        &self.levels
    }

    pub fn num_layers(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self, layer: usize, level: usize) -> f64 {
        self.mean[layer][level]
    }

    pub fn count(&self, layer: usize, level: usize) -> u64 {
        self.count[layer][level]
    }

    /// Folds `score` into the entry of every (layer, chosen level) of `config`.
    pub fn accumulate(&mut self, config: &SparseConfig, score: f64) -> Result<(), FilterError> {
        if config.len() != self.num_layers() || !(score.is_finite() && score >= 0.0) {
            return Err(FilterError::Mismatch);
        }
        let idx: Vec<usize> = config
            .levels()
            .iter()
            .map(|s| self.levels.iter().position(|l| l == s).ok_or(FilterError::Mismatch))
            .collect::<Result<_, _>>()?;
        for (l, s) in idx.into_iter().enumerate() {
            self.count[l][s] += 1;
            let n = self.count[l][s] as f64;
            self.mean[l][s] += (score - self.mean[l][s]) / n;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub layer: usize,
    pub level: SparsityLevel,
    pub mean_score: f64,
    pub count: u64,
    pub zeroed: bool,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub acc_th: f64,
    pub evaluations: usize,
    pub entries: Vec<ScoreEntry>,
}

impl FilterReport {
    /// (layer, level) pairs whose probability is zero after the update.
    pub fn zeroed(&self) -> Vec<(usize, SparsityLevel)> {
        self.entries
            .iter()
            .filter(|e| e.zeroed)
            .map(|e| (e.layer, e.level))
            .collect()
    }
}

/// Turns accumulated scores into the next probability table.
///
/// Observed choices scoring below `acc_th` drop to zero. Unobserved choices
/// keep their prior probability; the observed survivors share the remaining
/// mass in proportion to their mean score. A choice already at zero stays
/// there.
pub fn apply_filter(
    table: &ChoiceProbabilityTable,
    scores: &ChoiceScoreTable,
    acc_th: f64,
    evaluations: usize,
) -> Result<(ChoiceProbabilityTable, FilterReport), FilterError> {
    if scores.levels() != table.levels() || scores.num_layers() != table.num_layers() {
        return Err(FilterError::Mismatch);
    }
    let k = table.levels().len();
    let mut rows = Vec::with_capacity(table.num_layers());
    let mut entries = Vec::with_capacity(table.num_layers() * k);
    for (l, prior) in table.rows().iter().enumerate() {
        let observed = |s: usize| scores.count(l, s) > 0;
        let survives = |s: usize| prior[s] > 0.0 && scores.mean(l, s) >= acc_th;
        let unobserved_mass: f64 = (0..k).filter(|&s| !observed(s)).map(|s| prior[s]).sum();
        let score_mass: f64 = (0..k)
            .filter(|&s| observed(s) && survives(s))
            .map(|s| scores.mean(l, s))
            .sum();
        let mut row = vec![0.0; k];
        if score_mass > 0.0 {
            for s in 0..k {
                row[s] = if !observed(s) {
                    prior[s]
                } else if survives(s) {
                    (1.0 - unobserved_mass) * scores.mean(l, s) / score_mass
                } else {
                    0.0
                };
            }
        } else if unobserved_mass > 0.0 {
            for s in (0..k).filter(|&s| !observed(s)) {
                row[s] = prior[s] / unobserved_mass;
            }
        } else {
            return Err(FilterError::AllZeroed { layer: l });
        }
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= sum);
        for s in 0..k {
            entries.push(ScoreEntry {
                layer: l,
                level: table.levels()[s],
                mean_score: scores.mean(l, s),
                count: scores.count(l, s),
                zeroed: row[s] == 0.0,
                probability: row[s],
            });
        }
        rows.push(row);
    }
    let next = ChoiceProbabilityTable::from_rows(table.levels().to_vec(), rows)?;
    Ok((
        next,
        FilterReport {
            acc_th,
            evaluations,
            entries,
        },
    ))
}

/// One filtering round: sample `n_eval` subnets from `table`, evaluate them
/// in parallel, accumulate and threshold.
#[allow(clippy::too_many_arguments)]
pub fn update_probabilities<E, R>(
    estimator: &E,
    space: &SearchSpace,
    intervals: &CostIntervals,
    table: &ChoiceProbabilityTable,
    cfg: &FilterConfig,
    strategy: SamplingStrategy,
    sampler_opts: TwoStepOptions,
    rng: &mut R,
) -> Result<(ChoiceProbabilityTable, FilterReport), FilterError>
where
    E: AccuracyEstimator + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let configs: Vec<SparseConfig> = match strategy {
        SamplingStrategy::Vanilla => (0..cfg.n_eval).map(|_| table.sample(rng)).collect(),
        SamplingStrategy::TwoStep => {
            let sampler = TwoStepSampler::new(space, intervals, table, sampler_opts)?;
            (0..cfg.n_eval)
                .map(|_| sampler.sample(rng).map(|o| o.config))
                .collect::<Result<_, _>>()?
        }
    };
    let accs: Vec<f64> = configs
        .par_iter()
        .map(|c| estimator.accuracy(c))
        .collect::<Result<_, _>>()?;
    let mut scores = ChoiceScoreTable::for_space(space);
    for (c, &a) in configs.iter().zip(&accs) {
        scores.accumulate(c, a)?;
    }
    apply_filter(table, &scores, cfg.acc_th, cfg.n_eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostModel;
    use crate::supernet::FnEstimator;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lv(s: &str) -> SparsityLevel {
        s.parse().unwrap()
    }

    fn space(levels: &[&str], layers: usize) -> SearchSpace {
        SearchSpace::new(
            levels.iter().map(|s| lv(s)).collect(),
            CostModel::pure_linear(&vec![(8, 8); layers], 1),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn accumulate_is_a_running_mean() {
        let sp = space(&["1:4", "4:4"], 2);
        let mut t = ChoiceScoreTable::for_space(&sp);
        let c = SparseConfig::new(vec![lv("1:4"), lv("4:4")]);
        t.accumulate(&c, 0.8).unwrap();
        assert_eq!((t.mean(0, 0), t.count(0, 0)), (0.8, 1));
        t.accumulate(&c, 0.4).unwrap();
        assert!((t.mean(0, 0) - 0.6).abs() < 1e-15);
        assert_eq!(t.count(0, 0), 2);
        assert_eq!((t.mean(0, 1), t.count(0, 1)), (0.0, 0));
        assert_eq!((t.mean(1, 0), t.count(1, 0)), (0.0, 0));
    }

    #[test]
    fn forced_low_choice_is_zeroed() {
        let sp = space(&["1:8", "8:8"], 5);
        let intervals = sp.intervals(2).unwrap();
        let table = ChoiceProbabilityTable::uniform(&sp);
        let est = FnEstimator(|c: &SparseConfig| if c.get(3) == lv("1:8") { 0.02 } else { 0.9 });
        let cfg = FilterConfig {
            n_eval: 200,
            acc_th: 0.1,
            ..FilterConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (next, report) = update_probabilities(
            &est,
            &sp,
            &intervals,
            &table,
            &cfg,
            SamplingStrategy::Vanilla,
            TwoStepOptions::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.zeroed(), vec![(3, lv("1:8"))]);
        assert_eq!(next.get(3, 0), 0.0);
        assert_eq!(next.get(3, 1), 1.0);
        for row in next.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_threshold_gives_score_proportional_rows() {
        let sp = space(&["1:4", "2:4", "4:4"], 1);
        let table = ChoiceProbabilityTable::uniform(&sp);
        let mut scores = ChoiceScoreTable::for_space(&sp);
        for (s, a) in [("1:4", 0.2), ("2:4", 0.3), ("4:4", 0.5)] {
            scores.accumulate(&SparseConfig::new(vec![lv(s)]), a).unwrap();
        }
        let (next, report) = apply_filter(&table, &scores, 0.0, 3).unwrap();
        assert!(report.zeroed().is_empty());
        for (s, want) in [0.2, 0.3, 0.5].into_iter().enumerate() {
            assert!((next.get(0, s) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_scores_spread_evenly_over_sampled_levels() {
        let sp = space(&["1:4", "2:4", "4:4"], 3);
        let table = ChoiceProbabilityTable::uniform(&sp);
        let mut scores = ChoiceScoreTable::for_space(&sp);
        // layer 2 never sees 4:4
        for c in [["1:4", "2:4", "1:4"], ["2:4", "4:4", "2:4"], ["4:4", "1:4", "1:4"]] {
            let c = SparseConfig::new(c.iter().map(|s| lv(s)).collect());
            scores.accumulate(&c, 0.7).unwrap();
        }
        let (next, _) = apply_filter(&table, &scores, 0.5, 3).unwrap();
        for s in 0..3 {
            assert!((next.get(0, s) - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((next.get(2, 2) - 1.0 / 3.0).abs() < 1e-12);
        assert!((next.get(2, 0) - next.get(2, 1)).abs() < 1e-12);
    }

    #[test]
    fn unobserved_prior_survives_when_every_observed_choice_fails() {
        let sp = space(&["1:4", "2:4", "4:4"], 1);
        let table = ChoiceProbabilityTable::uniform(&sp);
        let mut scores = ChoiceScoreTable::for_space(&sp);
        scores.accumulate(&SparseConfig::new(vec![lv("1:4")]), 0.0).unwrap();
        scores.accumulate(&SparseConfig::new(vec![lv("2:4")]), 0.05).unwrap();
        let (next, _) = apply_filter(&table, &scores, 0.1, 2).unwrap();
        assert_eq!(next.row(0), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn all_choices_failing_names_the_layer() {
        let sp = space(&["1:4", "4:4"], 2);
        let table = ChoiceProbabilityTable::uniform(&sp);
        let mut scores = ChoiceScoreTable::for_space(&sp);
        scores.accumulate(&SparseConfig::new(vec![lv("4:4"), lv("1:4")]), 0.9).unwrap();
        scores.accumulate(&SparseConfig::new(vec![lv("1:4"), lv("4:4")]), 0.01).unwrap();
        // layer 1: 1:4 mean 0.9, 4:4 mean 0.01; layer 0: 4:4 0.9, 1:4 0.01
        assert!(apply_filter(&table, &scores, 0.5, 2).is_ok());
        let mut low = ChoiceScoreTable::for_space(&sp);
        low.accumulate(&SparseConfig::new(vec![lv("4:4"), lv("1:4")]), 0.01).unwrap();
        low.accumulate(&SparseConfig::new(vec![lv("1:4"), lv("1:4")]), 0.9).unwrap();
        low.accumulate(&SparseConfig::new(vec![lv("1:4"), lv("4:4")]), 0.01).unwrap();
        // layer 0: 4:4 -> 0.01, 1:4 -> 0.455; layer 1: 1:4 -> 0.455, 4:4 -> 0.01
        assert_eq!(
            apply_filter(&table, &low, 0.5, 3).unwrap_err(),
            FilterError::AllZeroed { layer: 0 }
        );
    }

    #[test]
    fn zeroed_choices_stay_zeroed() {
        let sp = space(&["1:4", "2:4", "4:4"], 1);
        let table =
            ChoiceProbabilityTable::from_rows(sp.levels().to_vec(), vec![vec![0.0, 0.5, 0.5]]).unwrap();
        let mut scores = ChoiceScoreTable::for_space(&sp);
        scores.accumulate(&SparseConfig::new(vec![lv("1:4")]), 0.99).unwrap();
        scores.accumulate(&SparseConfig::new(vec![lv("2:4")]), 0.5).unwrap();
        let (next, _) = apply_filter(&table, &scores, 0.1, 2).unwrap();
        assert_eq!(next.get(0, 0), 0.0);
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(FilterConfig { n_eval: 0, ..FilterConfig::default() }.validate().is_err());
        assert!(FilterConfig { acc_th: 1.5, ..FilterConfig::default() }.validate().is_err());
    }
}
