//! Evolutionary search over sparse configurations.
//!
//! The population starts from two-step samples, then each generation adds one
//! mutant per member and a number of crossover children, and keeps the top-k
//! by fitness. Every evaluated configuration goes into an archive; the result
//! is the archive's accuracy/FLOPs Pareto front.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::CostIntervals;
use crate::sampling::{ChoiceProbabilityTable, SamplingError, TwoStepOptions, TwoStepSampler};
use crate::space::{SearchSpace, SpaceError, SparseConfig};
use crate::supernet::{AccuracyEstimator, SupernetError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvoError {
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error("configuration {config} is not admissible: {reason}")]
    Inadmissible { config: String, reason: String },
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Estimator(#[from] SupernetError),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub config: SparseConfig,
    pub flops: u64,
    pub accuracy: f64,
}

impl Candidate {
    /// Validates `config` against the space and computes its FLOPs.
    pub fn new(space: &SearchSpace, config: SparseConfig, accuracy: f64) -> Result<Self, EvoError> {
        space.validate(&config).map_err(|v| EvoError::Inadmissible {
            config: config.to_string(),
            reason: v.to_string(),
        })?;
        let flops = space.flops(&config).expect("validated");
        Ok(Self {
            config,
            flops,
            accuracy,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossoverKind {
    #[default]
    Uniform,
    OnePoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvoConfig {
    pub population_size: usize,
    pub generations: usize,
    pub mutation_prob: f64,
    pub crossover_pairs: usize,
    pub top_k: usize,
    /// Optional FLOPs cap tighter than the space's; candidates above it
    /// get the lowest fitness.
    pub flops_budget: Option<f64>,
    pub crossover: CrossoverKind,
    /// Redraws allowed when a sample duplicates one already in the
    /// population or an offspring violates the cost cap.
    pub retries: usize,
    pub seed: u64,
}

impl Default for EvoConfig {
    fn default() -> Self {
        Self {
            population_size: 50,
            generations: 20,
            mutation_prob: 0.1,
            crossover_pairs: 25,
            top_k: 50,
            flops_budget: None,
            crossover: CrossoverKind::Uniform,
            retries: 20,
            seed: 0,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<(), EvoError> {
        let bad = |m: &str| Err(EvoError::Config(m.into()));
        if self.population_size == 0 || self.top_k == 0 {
            return bad("population_size and top_k must be at least 1");
        }
        if self.top_k > self.population_size {
            return bad("top_k must not exceed population_size");
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return bad("mutation_prob must lie in [0, 1]");
        }
        if self.flops_budget.is_some_and(|b| !(b >= 0.0)) {
            return bad("flops_budget must be non-negative");
        }
        Ok(())
    }
}

/// Accuracy within the budget, negative infinity above it.
pub fn fitness(candidate: &Candidate, budget: Option<f64>) -> f64 {
    match budget {
        Some(b) if candidate.flops as f64 > b => f64::NEG_INFINITY,
        _ => candidate.accuracy,
    }
}

/// Selection order: higher fitness, then fewer FLOPs, then configuration.
pub fn rank(a: &Candidate, b: &Candidate, budget: Option<f64>) -> Ordering {
    fitness(b, budget)
        .total_cmp(&fitness(a, budget))
        .then(a.flops.cmp(&b.flops))
        .then_with(|| a.config.cmp(&b.config))
}

/// Two-step samples, re-drawing duplicates up to `cfg.retries` times each.
pub fn init_population<R: Rng + ?Sized>(
    space: &SearchSpace,
    intervals: &CostIntervals,
    table: &ChoiceProbabilityTable,
    cfg: &EvoConfig,
    sampler_opts: TwoStepOptions,
    rng: &mut R,
) -> Result<Vec<SparseConfig>, EvoError> {
    cfg.validate()?;
    let sampler = TwoStepSampler::new(space, intervals, table, sampler_opts)?;
    let mut out: Vec<SparseConfig> = Vec::with_capacity(cfg.population_size);
    for _ in 0..cfg.population_size {
        let mut c = sampler.sample(rng)?.config;
        for _ in 0..cfg.retries {
            if !out.contains(&c) {
                break;
            }
            c = sampler.sample(rng)?.config;
        }
        out.push(c);
    }
    Ok(out)
}

/// Levels each layer may take: those with nonzero probability, or all of
/// them without a table.
fn allowed(space: &SearchSpace, table: Option<&ChoiceProbabilityTable>, layer: usize) -> Vec<usize> {
    (0..space.num_levels())
        .filter(|&s| table.is_none_or(|t| t.get(layer, s) > 0.0))
        .collect()
}

/// Each layer, with probability `mutation_prob`, moves to a different
/// allowed level chosen uniformly. Results over the cost cap are redrawn up
/// to `retries` times, after which the parent is returned.
pub fn mutate<R: Rng + ?Sized>(
    config: &SparseConfig,
    space: &SearchSpace,
    table: Option<&ChoiceProbabilityTable>,
    mutation_prob: f64,
    retries: usize,
    rng: &mut R,
) -> SparseConfig {
    let options: Vec<Vec<usize>> = (0..config.len()).map(|l| allowed(space, table, l)).collect();
    for _ in 0..=retries {
        let mut child = config.clone();
        for (l, level) in child.levels_mut().iter_mut().enumerate() {
            if !rng.random_bool(mutation_prob) {
                continue;
            }
            let cur = space.level_index(*level);
            let others: Vec<usize> = options[l].iter().copied().filter(|&s| Some(s) != cur).collect();
            if !others.is_empty() {
                *level = space.levels()[others[rng.random_range(0..others.len())]];
            }
        }
        if space.validate(&child).is_ok() {
            return child;
        }
    }
    config.clone()
}

/// Child taking each layer from one of the parents.
pub fn crossover<R: Rng + ?Sized>(
    a: &SparseConfig,
    b: &SparseConfig,
    kind: CrossoverKind,
    rng: &mut R,
) -> SparseConfig {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let cut = match kind {
        CrossoverKind::OnePoint if n > 1 => rng.random_range(1..n),
        _ => 0,
    };
    SparseConfig::new(
        (0..n)
            .map(|l| {
                let from_a = match kind {
                    CrossoverKind::Uniform => rng.random_bool(0.5),
                    CrossoverKind::OnePoint => l < cut,
                };
                if from_a {
                    a.get(l)
                } else {
                    b.get(l)
                }
            })
            .collect(),
    )
}

/// Candidates not dominated by any other: no other has FLOPs <= and
/// accuracy >, or FLOPs < and accuracy >=. Exact ties are all kept.
/// Sorted by FLOPs, then configuration.
pub fn pareto_front(candidates: &[Candidate]) -> Vec<Candidate> {
    let mut sorted: Vec<&Candidate> = candidates.iter().collect();
    sorted.sort_by(|a, b| {
        a.flops
            .cmp(&b.flops)
            .then(b.accuracy.total_cmp(&a.accuracy))
            .then_with(|| a.config.cmp(&b.config))
    });
    let mut out: Vec<Candidate> = Vec::new();
    // Best accuracy among strictly cheaper candidates, and the best seen at
    // the current FLOPs value.
    let mut best_cheaper = f64::NEG_INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        let f = sorted[i].flops;
        let group_end = sorted[i..].iter().position(|c| c.flops != f).map_or(sorted.len(), |p| i + p);
        let top = sorted[i].accuracy;
        if top > best_cheaper {
            out.extend(
                sorted[i..group_end]
                    .iter()
                    .filter(|c| c.accuracy == top)
                    .map(|c| (*c).clone()),
            );
        }
        best_cheaper = best_cheaper.max(top);
        i = group_end;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub generation: usize,
    pub best_acc: f64,
    pub mean_acc: f64,
    pub archive_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub pareto: Vec<Candidate>,
    /// Every evaluated candidate, ordered by configuration.
    pub archive: Vec<Candidate>,
    pub population: Vec<Candidate>,
    pub generations: Vec<GenerationLog>,
}

struct Archive<'a, E: ?Sized> {
    estimator: &'a E,
    space: &'a SearchSpace,
    seen: BTreeMap<SparseConfig, Candidate>,
}

impl<E: AccuracyEstimator + ?Sized> Archive<'_, E> {
    /// Evaluates configurations not yet seen (in parallel) and returns the
    /// candidates for all of `configs`, deduplicated, in first-seen order.
    fn evaluate(&mut self, configs: &[SparseConfig]) -> Result<Vec<Candidate>, EvoError> {
        let mut unique: Vec<&SparseConfig> = Vec::new();
        for c in configs {
            if !unique.contains(&c) {
                unique.push(c);
            }
        }
        let fresh: Vec<&SparseConfig> = unique
            .iter()
            .copied()
            .filter(|c| !self.seen.contains_key(*c))
            .collect();
        let accs: Vec<f64> = fresh
            .par_iter()
            .map(|c| self.estimator.accuracy(c))
            .collect::<Result<_, _>>()?;
        for (c, a) in fresh.into_iter().zip(accs) {
            let cand = Candidate::new(self.space, c.clone(), a)?;
            self.seen.insert(c.clone(), cand);
        }
        Ok(unique.into_iter().map(|c| self.seen[c].clone()).collect())
    }
}

fn summarize(generation: usize, population: &[Candidate], budget: Option<f64>, archive: usize) -> GenerationLog {
    let best = population
        .iter()
        .map(|c| fitness(c, budget))
        .fold(f64::NEG_INFINITY, f64::max);
    let mean = population.iter().map(|c| c.accuracy).sum::<f64>() / population.len().max(1) as f64;
    GenerationLog {
        generation,
        best_acc: best,
        mean_acc: mean,
        archive_size: archive,
    }
}

fn select(mut pool: Vec<Candidate>, top_k: usize, budget: Option<f64>) -> Vec<Candidate> {
    pool.sort_by(|a, b| rank(a, b, budget));
    pool.dedup_by(|a, b| a.config == b.config);
    pool.truncate(top_k);
    pool
}

pub fn search<E: AccuracyEstimator + ?Sized>(
    estimator: &E,
    space: &SearchSpace,
    intervals: &CostIntervals,
    table: &ChoiceProbabilityTable,
    cfg: &EvoConfig,
    sampler_opts: TwoStepOptions,
) -> Result<SearchResult, EvoError> {
    cfg.validate()?;
    let budget = cfg.flops_budget;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut archive = Archive {
        estimator,
        space,
        seen: BTreeMap::new(),
    };
    let init = init_population(space, intervals, table, cfg, sampler_opts, &mut rng)?;
    let mut population = select(archive.evaluate(&init)?, cfg.top_k, budget);
    let mut log = vec![summarize(0, &population, budget, archive.seen.len())];

    for generation in 1..=cfg.generations {
        let mut offspring: Vec<SparseConfig> = population
            .iter()
            .map(|c| mutate(&c.config, space, Some(table), cfg.mutation_prob, cfg.retries, &mut rng))
            .collect();
        for _ in 0..cfg.crossover_pairs {
            for _ in 0..=cfg.retries {
                let a = &population[rng.random_range(0..population.len())].config;
                let b = &population[rng.random_range(0..population.len())].config;
                let child = crossover(a, b, cfg.crossover, &mut rng);
                if space.validate(&child).is_ok() {
                    offspring.push(child);
                    break;
                }
            }
        }
        let mut pool = population.clone();
        pool.extend(archive.evaluate(&offspring)?);
        population = select(pool, cfg.top_k, budget);
        log.push(summarize(generation, &population, budget, archive.seen.len()));
    }

    let archive: Vec<Candidate> = archive.seen.into_values().collect();
    let eligible: Vec<Candidate> = archive
        .iter()
        .filter(|c| fitness(c, budget).is_finite())
        .cloned()
        .collect();
    Ok(SearchResult {
        pareto: pareto_front(&eligible),
        archive,
        population,
        generations: log,
    })
}

/// Evaluates every admissible configuration and returns the exact front.
pub fn brute_force_pareto<E: AccuracyEstimator + ?Sized>(
    estimator: &E,
    space: &SearchSpace,
    max_count: u64,
) -> Result<Vec<Candidate>, EvoError> {
    let configs = space.enumerate(max_count)?;
    let accs: Vec<f64> = configs
        .par_iter()
        .map(|c| estimator.accuracy(c))
        .collect::<Result<_, _>>()?;
    let all = configs
        .into_iter()
        .zip(accs)
        .map(|(c, a)| Candidate::new(space, c, a))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(pareto_front(&all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostModel;
    use crate::nm::SparsityLevel;
    use crate::supernet::FnEstimator;

    fn lv(s: &str) -> SparsityLevel {
        s.parse().unwrap()
    }

    fn space(levels: &[&str], layers: usize, fraction: f64) -> SearchSpace {
        let shapes: Vec<(usize, usize)> = (0..layers).map(|i| (8 * (i + 1), 8)).collect();
        SearchSpace::new(
            levels.iter().map(|s| lv(s)).collect(),
            CostModel::pure_linear(&shapes, 1),
            fraction,
        )
        .unwrap()
    }

    fn cand(flops: u64, acc: f64, tag: &str) -> Candidate {
        Candidate {
            config: SparseConfig::new(vec![lv(tag)]),
            flops,
            accuracy: acc,
        }
    }

    /// Deterministic accuracy that rises with density, with a per-layer
    /// wrinkle so the front is not trivial.
    fn toy_accuracy(c: &SparseConfig) -> f64 {
        c.levels()
            .iter()
            .enumerate()
            .map(|(l, s)| s.density().sqrt() * (1.0 + 0.1 * ((l * 7 + s.n() as usize * 3) % 5) as f64))
            .sum::<f64>()
            / c.len() as f64
    }

    #[test]
    fn fitness_and_rank() {
        let a = cand(100, 0.5, "1:4");
        let b = cand(200, 0.9, "2:4");
        assert_eq!(fitness(&b, None), 0.9);
        assert_eq!(fitness(&b, Some(150.0)), f64::NEG_INFINITY);
        assert_eq!(rank(&a, &b, Some(150.0)), Ordering::Less);
        let c = cand(150, 0.9, "4:4");
        assert_eq!(rank(&c, &b, None), Ordering::Less);
    }

    #[test]
    fn pareto_front_is_non_dominated_and_keeps_ties() {
        let cs = vec![
            cand(10, 0.5, "1:4"),
            cand(10, 0.4, "2:4"),
            cand(20, 0.5, "4:4"),
            cand(30, 0.8, "1:8"),
            cand(30, 0.8, "2:8"),
            cand(40, 0.7, "8:8"),
        ];
        let front = pareto_front(&cs);
        let flops: Vec<(u64, f64)> = front.iter().map(|c| (c.flops, c.accuracy)).collect();
        assert_eq!(flops, vec![(10, 0.5), (30, 0.8), (30, 0.8)]);
        for a in &front {
            for b in &cs {
                assert!(!(b.flops <= a.flops && b.accuracy > a.accuracy));
            }
        }
    }

    #[test]
    fn mutation_edge_cases() {
        let sp = space(&["1:4", "4:4"], 5, 10.0);
        let c = sp.uniform_level_config(lv("1:4")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(mutate(&c, &sp, None, 0.0, 0, &mut rng), c);
        assert_eq!(
            mutate(&c, &sp, None, 1.0, 0, &mut rng),
            sp.uniform_level_config(lv("4:4")).unwrap()
        );
    }

    #[test]
    fn mutation_count_is_binomial() {
        let sp = space(&["1:4", "2:4", "4:4"], 10, 10.0);
        let c = sp.uniform_level_config(lv("2:4")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, p, l) = (10_000, 0.3, 10usize);
        let mut hist = vec![0usize; l + 1];
        for _ in 0..n {
            let m = mutate(&c, &sp, None, p, 0, &mut rng);
            hist[m.levels().iter().zip(c.levels()).filter(|(a, b)| a != b).count()] += 1;
        }
        let binom = |k: usize| -> f64 {
            let mut coef = 1.0;
            for i in 0..k {
                coef *= (l - i) as f64 / (i + 1) as f64;
            }
            coef * p.powi(k as i32) * (1.0 - p).powi((l - k) as i32)
        };
        for (k, &count) in hist.iter().enumerate() {
            let q = binom(k);
            let sigma = (q * (1.0 - q) / n as f64).sqrt();
            assert!((count as f64 / n as f64 - q).abs() <= 3.0 * sigma + 1e-9, "k={k}");
        }
    }

    #[test]
    fn mutation_respects_zeroed_levels() {
        let sp = space(&["1:4", "2:4", "4:4"], 3, 10.0);
        let table = ChoiceProbabilityTable::from_rows(
            sp.levels().to_vec(),
            vec![vec![0.5, 0.0, 0.5]; 3],
        )
        .unwrap();
        let c = sp.uniform_level_config(lv("1:4")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let m = mutate(&c, &sp, Some(&table), 0.8, 0, &mut rng);
            assert!(m.levels().iter().all(|&s| s != lv("2:4")));
        }
    }

    #[test]
    fn crossover_properties() {
        let sp = space(&["1:4", "2:4", "4:4"], 20, 10.0);
        let a = sp.uniform_level_config(lv("1:4")).unwrap();
        let b = sp.uniform_level_config(lv("4:4")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(crossover(&a, &a, CrossoverKind::Uniform, &mut rng), a);
        let n = 2000;
        let mut from_a = 0usize;
        for _ in 0..n {
            let c = crossover(&a, &b, CrossoverKind::Uniform, &mut rng);
            for l in 0..20 {
                assert!(c.get(l) == a.get(l) || c.get(l) == b.get(l));
            }
            from_a += c.levels().iter().filter(|&&s| s == lv("1:4")).count();
        }
        let total = (n * 20) as f64;
        let sigma = (0.25 / total).sqrt();
        assert!((from_a as f64 / total - 0.5).abs() < 3.0 * sigma);
        let one = crossover(&a, &b, CrossoverKind::OnePoint, &mut rng);
        let switch = one.levels().iter().position(|&s| s == lv("4:4")).unwrap();
        assert!(switch >= 1 && one.levels()[switch..].iter().all(|&s| s == lv("4:4")));
    }

    #[test]
    fn population_is_valid_and_reproducible() {
        let sp = space(&["1:4", "2:4", "4:4"], 4, 0.6);
        let iv = sp.intervals(4).unwrap();
        let t = ChoiceProbabilityTable::uniform(&sp);
        let cfg = EvoConfig {
            population_size: 12,
            top_k: 12,
            ..EvoConfig::default()
        };
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            init_population(&sp, &iv, &t, &cfg, TwoStepOptions::default(), &mut rng).unwrap()
        };
        let p = draw(5);
        assert_eq!(p, draw(5));
        assert_eq!(p.len(), 12);
        for c in &p {
            sp.validate(c).unwrap();
        }
        let one = EvoConfig {
            population_size: 1,
            top_k: 1,
            ..cfg
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            init_population(&sp, &iv, &t, &one, TwoStepOptions::default(), &mut rng)
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn search_matches_brute_force_on_small_space() {
        let sp = space(&["1:4", "2:4", "4:4"], 4, 1.0);
        let iv = sp.intervals(5).unwrap();
        let t = ChoiceProbabilityTable::uniform(&sp);
        let est = FnEstimator(toy_accuracy);
        let oracle = brute_force_pareto(&est, &sp, 100).unwrap();
        for seed in 0..3 {
            // Population large enough to hold the whole space.
            let cfg = EvoConfig {
                population_size: 90,
                top_k: 90,
                generations: 30,
                mutation_prob: 0.3,
                crossover_pairs: 20,
                seed,
                ..EvoConfig::default()
            };
            let res = search(&est, &sp, &iv, &t, &cfg, TwoStepOptions::default()).unwrap();
            assert_eq!(res.pareto, oracle, "seed {seed}");
            let best: Vec<f64> = res.generations.iter().map(|g| g.best_acc).collect();
            assert!(best.windows(2).all(|w| w[1] >= w[0]));
            for c in &res.archive {
                sp.validate(&c.config).unwrap();
            }
        }
    }

    #[test]
    fn search_is_deterministic_and_respects_budget() {
        let sp = space(&["1:4", "2:4", "4:4"], 5, 0.8);
        let iv = sp.intervals(4).unwrap();
        let t = ChoiceProbabilityTable::uniform(&sp);
        let est = FnEstimator(toy_accuracy);
        let budget = 0.5 * sp.cost().dense_flops() as f64;
        let cfg = EvoConfig {
            population_size: 10,
            top_k: 10,
            generations: 5,
            flops_budget: Some(budget),
            seed: 9,
            ..EvoConfig::default()
        };
        let a = search(&est, &sp, &iv, &t, &cfg, TwoStepOptions::default()).unwrap();
        let b = search(&est, &sp, &iv, &t, &cfg, TwoStepOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.pareto.iter().all(|c| c.flops as f64 <= budget));
    }

    #[test]
    fn single_level_space_has_one_point() {
        let sp = space(&["4:4"], 3, 1.0);
        let front = brute_force_pareto(&FnEstimator(toy_accuracy), &sp, 10).unwrap();
        assert_eq!(front.len(), 1);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let too_many = EvoConfig {
            top_k: 60,
            ..EvoConfig::default()
        };
        assert!(too_many.validate().is_err());
        let p = EvoConfig {
            mutation_prob: 1.5,
            ..EvoConfig::default()
        };
        assert!(p.validate().is_err());
    }
}
