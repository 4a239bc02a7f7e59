//! Configuration samplers: iid uniform per layer, and two-step sampling that
//! first picks a cost band uniformly and then a configuration inside it.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost::CostIntervals;
use crate::nm::SparsityLevel;
use crate::space::{SearchSpace, SparseConfig};

/// Row sums must be within this of 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SamplingError {
    #[error("probability table is invalid: {0}")]
    InvalidTable(String),
    #[error("probability table levels or layers do not match the search space")]
    TableMismatch,
    #[error("interval {interval} out of range ({count} intervals)")]
    NoSuchInterval { interval: usize, count: usize },
    #[error(
        "no configuration found for interval {interval} after {attempts} attempts and repair"
    )]
    Exhausted { interval: usize, attempts: usize },
    #[error("no interval is reachable under the current probability table")]
    NothingReachable,
}

/// Per-layer probabilities over the levels of a search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TableRepr", into = "TableRepr")]
pub struct ChoiceProbabilityTable {
    levels: Vec<SparsityLevel>,
    probs: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableRepr {
    levels: Vec<SparsityLevel>,
    layers: Vec<Vec<f64>>,
}

impl TryFrom<TableRepr> for ChoiceProbabilityTable {
    type Error = SamplingError;

    fn try_from(r: TableRepr) -> Result<Self, Self::Error> {
        Self::from_rows(r.levels, r.layers)
    }
}

impl From<ChoiceProbabilityTable> for TableRepr {
    fn from(t: ChoiceProbabilityTable) -> Self {
        Self {
            levels: t.levels,
            layers: t.probs,
        }
    }
}

impl ChoiceProbabilityTable {
    pub fn uniform(space: &SearchSpace) -> Self {
        let k = space.num_levels();
        Self {
            levels: space.levels().to_vec(),
            probs: vec![vec![1.0 / k as f64; k]; space.num_layers()],
        }
    }

    pub fn from_rows(levels: Vec<SparsityLevel>, probs: Vec<Vec<f64>>) -> Result<Self, SamplingError> {
        let bad = |m: String| Err(SamplingError::InvalidTable(m));
        if levels.is_empty() {
            return bad("no levels".into());
        }
        for (l, row) in probs.iter().enumerate() {
            if row.len() != levels.len() {
                return bad(format!("layer {l} has {} entries, expected {}", row.len(), levels.len()));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return bad(format!("layer {l} has a negative or non-finite entry"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return bad(format!("layer {l} sums to {sum}"));
            }
        }
        Ok(Self { levels, probs })
    }

    pub fn levels(&self) -> &[SparsityLevel] {
        &self.levels
    }

    pub fn num_layers(&self) -> usize {
        self.probs.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn row(&self, layer: usize) -> &[f64] {
        &self.probs[layer]
    }

    pub fn get(&self, layer: usize, level: usize) -> f64 {
        self.probs[layer][level]
    }

    pub fn matches(&self, space: &SearchSpace) -> bool {
        self.levels == space.levels() && self.probs.len() == space.num_layers()
    }

    pub(crate) fn check(&self, space: &SearchSpace) -> Result<(), SamplingError> {
        if self.matches(space) {
            Ok(())
        } else {
            Err(SamplingError::TableMismatch)
        }
    }

    /// Draws a level index for `layer` from its row.
    pub fn sample_layer<R: Rng + ?Sized>(&self, layer: usize, rng: &mut R) -> usize {
        pick(&self.probs[layer], rng).expect("rows sum to one")
    }

    /// Draws every layer independently from the table.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SparseConfig {
        SparseConfig::new(
            (0..self.num_layers())
                .map(|l| self.levels[self.sample_layer(l, rng)])
                .collect(),
        )
    }
}

/// Index drawn with probability proportional to `weights`; `None` when all
/// weights are zero.
pub(crate) fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = Some(i);
            if u < acc {
                return Some(i);
            }
        }
    }
    last
}

/// Each layer uniformly and independently from the space's levels.
pub fn vanilla_sample<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> SparseConfig {
    let levels = space.levels();
    SparseConfig::new(
        (0..space.num_layers())
            .map(|_| levels[rng.random_range(0..levels.len())])
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// The chosen interval had no reachable configuration; the nearest
    /// reachable one was used instead.
    NearestInterval,
    /// Rejection sampling ran out of retries and the last draw was repaired
    /// layer by layer into the interval.
    Repair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub config: SparseConfig,
    pub flops: u64,
    /// Interval the configuration lies in.
    pub interval: usize,
    /// Interval drawn in the first step.
    pub requested: usize,
    pub fallback: Option<Fallback>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoStepOptions {
    /// Rejection attempts before repair, when exact sampling is not used.
    pub max_retries: usize,
    /// Largest number of distinct partial cost sums for which the exact
    /// conditional sampler is built.
    pub max_exact_states: usize,
}

impl Default for TwoStepOptions {
    fn default() -> Self {
        Self {
            max_retries: 200,
            max_exact_states: 1 << 20,
        }
    }
}

/// For every layer `l`, the distinct costs of layers `l..` with the
/// probability mass of reaching each.
#[derive(Debug, Clone)]
struct SuffixMass {
    sums: Vec<u64>,
    cum: Vec<f64>,
}

impl SuffixMass {
    /// Mass of sums `x` with `!below_lo(x) && within_hi(x)`; both predicates
    /// must be monotone in `x`.
    fn mass_between(&self, below_lo: impl Fn(u64) -> bool, within_hi: impl Fn(u64) -> bool) -> f64 {
        let a = self.sums.partition_point(|&x| below_lo(x));
        let b = self.sums.partition_point(|&x| within_hi(x));
        if b <= a {
            0.0
        } else {
            self.cum[b] - self.cum[a]
        }
    }
}

/// Two-step sampler bound to one probability table.
///
/// When the space is small enough it samples exactly from the table
/// conditioned on the chosen interval, which is the limit of rejection
/// sampling with unbounded retries. Otherwise it runs bounded rejection
/// sampling followed by greedy repair.
#[derive(Debug, Clone)]
pub struct TwoStepSampler<'a> {
    space: &'a SearchSpace,
    intervals: &'a CostIntervals,
    table: &'a ChoiceProbabilityTable,
    opts: TwoStepOptions,
    costs: Vec<Vec<u64>>,
    fixed: u64,
    suffix: Option<Vec<SuffixMass>>,
}

impl<'a> TwoStepSampler<'a> {
    pub fn new(
        space: &'a SearchSpace,
        intervals: &'a CostIntervals,
        table: &'a ChoiceProbabilityTable,
        opts: TwoStepOptions,
    ) -> Result<Self, SamplingError> {
        table.check(space)?;
        let costs: Vec<Vec<u64>> = (0..space.num_layers())
            .map(|l| {
                space
                    .levels()
                    .iter()
                    .map(|&s| space.cost().module_flops(l, s).expect("space levels divide modules"))
                    .collect()
            })
            .collect();
        let mut sampler = Self {
            space,
            intervals,
            table,
            opts,
            costs,
            fixed: space.cost().fixed_flops(),
            suffix: None,
        };
        sampler.suffix = sampler.build_suffix();
        Ok(sampler)
    }

    fn build_suffix(&self) -> Option<Vec<SuffixMass>> {
        let layers = self.costs.len();
        let mut out = vec![
            SuffixMass {
                sums: vec![0],
                cum: vec![0.0, 1.0],
            };
            layers + 1
        ];
        let mut states = 1usize;
        let mut next: BTreeMap<u64, f64> = BTreeMap::from([(0, 1.0)]);
        for l in (0..layers).rev() {
            let mut cur: BTreeMap<u64, f64> = BTreeMap::new();
            for (s, &p) in self.table.row(l).iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                for (&x, &m) in &next {
                    *cur.entry(x + self.costs[l][s]).or_insert(0.0) += p * m;
                }
            }
            states += cur.len();
            if states > self.opts.max_exact_states {
                return None;
            }
            let mut cum = Vec::with_capacity(cur.len() + 1);
            cum.push(0.0);
            let mut acc = 0.0;
            for &m in cur.values() {
                acc += m;
                cum.push(acc);
            }
            out[l] = SuffixMass {
                sums: cur.keys().copied().collect(),
                cum,
            };
            next = cur;
        }
        Some(out)
    }

    pub fn is_exact(&self) -> bool {
        self.suffix.is_some()
    }

    pub fn intervals(&self) -> &CostIntervals {
        self.intervals
    }

    /// Probability mass, under the table, of configurations landing in
    /// interval `i`. Only available for the exact sampler.
    pub fn interval_mass(&self, i: usize) -> Option<f64> {
        let suffix = self.suffix.as_ref()?;
        Some(self.range_mass(&suffix[0], self.fixed, i))
    }

    fn range_mass(&self, suffix: &SuffixMass, base: u64, i: usize) -> f64 {
        let (lo, hi, closed) = self.intervals.bounds(i);
        suffix.mass_between(
            |x| ((base + x) as f64) < lo,
            |x| {
                let f = (base + x) as f64;
                if closed {
                    f <= hi
                } else {
                    f < hi
                }
            },
        )
    }

    /// Whether interval `i` contains a configuration with nonzero
    /// probability. Without the exact table this is judged by cost bounds.
    pub fn reachable(&self, i: usize) -> bool {
        match &self.suffix {
            Some(s) => self.range_mass(&s[0], self.fixed, i) > 0.0,
            None => {
                let (lo, hi, _) = self.intervals.bounds(i);
                let (min, max) = self.cost_range();
                (max as f64) >= lo && (min as f64) <= hi
            }
        }
    }

    fn cost_range(&self) -> (u64, u64) {
        let mut min = self.fixed;
        let mut max = self.fixed;
        for (l, row) in self.costs.iter().enumerate() {
            let live = row.iter().enumerate().filter(|(s, _)| self.table.get(l, *s) > 0.0);
            min += live.clone().map(|(_, &c)| c).min().unwrap_or(0);
            max += live.map(|(_, &c)| c).max().unwrap_or(0);
        }
        (min, max)
    }

    /// Step one and two: a uniform interval, then a configuration in it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SampleOutcome, SamplingError> {
        let requested = rng.random_range(0..self.intervals.num_intervals());
        self.sample_for(requested, rng)
    }

    /// Step two for a given interval, falling back to the nearest reachable
    /// interval when `requested` has no configuration.
    pub fn sample_for<R: Rng + ?Sized>(
        &self,
        requested: usize,
        rng: &mut R,
    ) -> Result<SampleOutcome, SamplingError> {
        let count = self.intervals.num_intervals();
        if requested >= count {
            return Err(SamplingError::NoSuchInterval {
                interval: requested,
                count,
            });
        }
        if self.reachable(requested) {
            return self.sample_in(requested, requested, rng);
        }
        let nearest = (0..count)
            .filter(|&i| self.reachable(i))
            .min_by_key(|&i| (i.abs_diff(requested), i))
            .ok_or(SamplingError::NothingReachable)?;
        let mut out = self.sample_in(nearest, requested, rng)?;
        out.fallback = Some(Fallback::NearestInterval);
        Ok(out)
    }

    fn sample_in<R: Rng + ?Sized>(
        &self,
        interval: usize,
        requested: usize,
        rng: &mut R,
    ) -> Result<SampleOutcome, SamplingError> {
        match &self.suffix {
            Some(suffix) => self.sample_exact(suffix, interval, requested, rng),
            None => self.sample_rejection(interval, requested, rng),
        }
    }

    fn sample_exact<R: Rng + ?Sized>(
        &self,
        suffix: &[SuffixMass],
        interval: usize,
        requested: usize,
        rng: &mut R,
    ) -> Result<SampleOutcome, SamplingError> {
        let levels = self.space.levels();
        let mut base = self.fixed;
        let mut chosen = Vec::with_capacity(self.costs.len());
        for (l, row) in self.costs.iter().enumerate() {
            let weights: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(s, &c)| {
                    let p = self.table.get(l, s);
                    if p > 0.0 {
                        p * self.range_mass(&suffix[l + 1], base + c, interval)
                    } else {
                        0.0
                    }
                })
                .collect();
            let s = pick(&weights, rng).ok_or(SamplingError::Exhausted {
                interval,
                attempts: 1,
            })?;
            base += row[s];
            chosen.push(levels[s]);
        }
        debug_assert!(self.intervals.contains(interval, base as f64));
        Ok(SampleOutcome {
            config: SparseConfig::new(chosen),
            flops: base,
            interval,
            requested,
            fallback: None,
        })
    }

    fn flops_of(&self, idx: &[usize]) -> u64 {
        self.fixed + idx.iter().enumerate().map(|(l, &s)| self.costs[l][s]).sum::<u64>()
    }

    fn distance(&self, interval: usize, flops: u64) -> f64 {
        let (lo, hi, _) = self.intervals.bounds(interval);
        let f = flops as f64;
        if self.intervals.contains(interval, f) {
            0.0
        } else if f < lo {
            lo - f
        } else {
            // Open top: sitting exactly on `hi` is still outside.
            (f - hi).max(f64::MIN_POSITIVE)
        }
    }

    fn sample_rejection<R: Rng + ?Sized>(
        &self,
        interval: usize,
        requested: usize,
        rng: &mut R,
    ) -> Result<SampleOutcome, SamplingError> {
        let layers = self.costs.len();
        let levels = self.space.levels();
        let done = |idx: Vec<usize>, flops: u64, fallback| SampleOutcome {
            config: SparseConfig::new(idx.iter().map(|&s| levels[s]).collect()),
            flops,
            interval,
            requested,
            fallback,
        };
        let mut idx = Vec::new();
        for _ in 0..self.opts.max_retries.max(1) {
            idx = (0..layers).map(|l| self.table.sample_layer(l, rng)).collect();
            let flops = self.flops_of(&idx);
            if self.intervals.contains(interval, flops as f64) {
                return Ok(done(idx, flops, None));
            }
        }
        // Greedy repair: change the single layer whose new level brings the
        // cost closest to the interval, at most once per layer count.
        for _ in 0..layers {
            let cur = self.distance(interval, self.flops_of(&idx));
            let mut best: Option<(f64, usize, usize)> = None;
            for l in 0..layers {
                for s in 0..levels.len() {
                    if s == idx[l] || self.table.get(l, s) <= 0.0 {
                        continue;
                    }
                    let old = idx[l];
                    idx[l] = s;
                    let d = self.distance(interval, self.flops_of(&idx));
                    idx[l] = old;
                    if d < cur && best.is_none_or(|(bd, _, _)| d < bd) {
                        best = Some((d, l, s));
                    }
                }
            }
            let Some((d, l, s)) = best else { break };
            idx[l] = s;
            if d == 0.0 {
                let flops = self.flops_of(&idx);
                return Ok(done(idx, flops, Some(Fallback::Repair)));
            }
        }
        Err(SamplingError::Exhausted {
            interval,
            attempts: self.opts.max_retries,
        })
    }
}

/// One two-step draw. Builds a sampler each call; hold a `TwoStepSampler`
/// to amortise that across draws.
pub fn two_step_sample<R: Rng + ?Sized>(
    space: &SearchSpace,
    intervals: &CostIntervals,
    table: &ChoiceProbabilityTable,
    rng: &mut R,
    max_retries: usize,
) -> Result<SampleOutcome, SamplingError> {
    let opts = TwoStepOptions {
        max_retries,
        ..TwoStepOptions::default()
    };
    TwoStepSampler::new(space, intervals, table, opts)?.sample(rng)
}

/// How training picks the configuration for each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Every layer independently from the probability table, no cost cap.
    Vanilla,
    #[default]
    TwoStep,
}
