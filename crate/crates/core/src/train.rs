//! Supernet training: each iteration samples a configuration, optionally
//! refreshes the probability table by choice filtering, and takes one
//! masked gradient step on a minibatch.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::CostIntervals;
use crate::data::Dataset;
use crate::filter::{update_probabilities, FilterConfig, FilterError, FilterReport};
use crate::model::{Distillation, ModelError, OptimizerConfig, VitModel};
use crate::real::Real;
use crate::sampling::{
    ChoiceProbabilityTable, Fallback, SamplingError, SamplingStrategy, TwoStepOptions, TwoStepSampler,
};
use crate::space::SparseConfig;
use crate::supernet::{Supernet, SupernetError, SupernetEstimator, SupernetTrainer};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training data is empty")]
    EmptyData,
    #[error("iteration {iteration}: {source}")]
    Step {
        iteration: usize,
        #[source]
        source: SupernetError,
    },
    #[error("iteration {iteration}: {source}")]
    Sampling {
        iteration: usize,
        #[source]
        source: SamplingError,
    },
    #[error("choice filtering at iteration {iteration}: {source}")]
    Filter {
        iteration: usize,
        #[source]
        source: FilterError,
    },
    #[error(transparent)]
    Teacher(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Choice filtering runs every this many iterations (when enabled).
    pub filter_every: usize,
    pub filter_enabled: bool,
    /// Soft targets from the teacher, when one is supplied.
    pub distillation: Option<Distillation>,
    pub optimizer: OptimizerConfig,
    pub sampling: SamplingStrategy,
    pub sampler: TwoStepOptions,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            batch_size: 32,
            filter_every: 50,
            filter_enabled: true,
            distillation: Some(Distillation::default()),
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                ..OptimizerConfig::default()
            },
            sampling: SamplingStrategy::TwoStep,
            sampler: TwoStepOptions::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.filter_every == 0 {
            return bad("filter_every must be at least 1");
        }
        if !(self.optimizer.learning_rate > 0.0 && self.optimizer.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if let Some(d) = self.distillation {
            if !(d.temperature > 0.0 && (0.0..=1.0).contains(&d.hard_weight)) {
                return bad("distillation needs temperature > 0 and hard_weight in [0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iteration: usize,
    pub config: SparseConfig,
    pub flops: u64,
    pub interval: Option<usize>,
    pub loss: f64,
    pub fallback: Option<Fallback>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<TrainLogEntry>,
    pub table: ChoiceProbabilityTable,
    /// Filter reports keyed by the iteration they ran at.
    pub filter_reports: Vec<(usize, FilterReport)>,
}

impl TrainOutcome {
    pub fn fallbacks(&self) -> usize {
        self.log.iter().filter(|e| e.fallback.is_some()).count()
    }
}

struct Draw {
    config: SparseConfig,
    flops: u64,
    interval: Option<usize>,
    fallback: Option<Fallback>,
}

/// Independent RNG streams so the minibatch order does not depend on how
/// many random numbers the sampler consumed.
fn streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let sample = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = ChaCha8Rng::seed_from_u64(seed);
    batch.set_stream(1);
    (sample, batch)
}

#[allow(clippy::too_many_arguments)]
fn run_loop<T: Real>(
    net: &mut Supernet<T>,
    data: &Dataset<T>,
    teacher: Option<&VitModel<T>>,
    cfg: &TrainConfig,
    mut draw: impl FnMut(usize, &Supernet<T>, &mut ChaCha8Rng) -> Result<Draw, TrainError>,
) -> Result<Vec<TrainLogEntry>, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let (mut sample_rng, mut batch_rng) = streams(cfg.seed);
    let mut trainer = SupernetTrainer::new(cfg.optimizer, net.arch(), cfg.distillation);
    let mut log = Vec::with_capacity(cfg.iterations);
    let batch = cfg.batch_size.min(data.len());
    for iteration in 1..=cfg.iterations {
        let d = draw(iteration, net, &mut sample_rng)?;
        let idx = index::sample(&mut batch_rng, data.len(), batch).into_vec();
        let mb = data.select(&idx);
        let teacher_logits = match (teacher, cfg.distillation) {
            (Some(t), Some(_)) => Some(t.logits(mb.features())?),
            _ => None,
        };
        let loss = trainer
            .train_step(net, &d.config, mb.features(), mb.labels(), teacher_logits.as_deref())
            .map_err(|source| TrainError::Step { iteration, source })?;
        log.push(TrainLogEntry {
            iteration,
            config: d.config,
            flops: d.flops,
            interval: d.interval,
            loss,
            fallback: d.fallback,
        });
    }
    Ok(log)
}

/// Trains the supernet over sampled configurations. `proxy` is the data the
/// choice filter evaluates on; filtering happens when
/// `cfg.filter_enabled` and `filter` is given.
#[allow(clippy::too_many_arguments)]
pub fn train_supernet<T: Real>(
    net: &mut Supernet<T>,
    data: &Dataset<T>,
    proxy: &Dataset<T>,
    teacher: Option<&VitModel<T>>,
    intervals: &CostIntervals,
    cfg: &TrainConfig,
    filter: Option<&FilterConfig>,
    initial: ChoiceProbabilityTable,
) -> Result<TrainOutcome, TrainError> {
    initial
        .check(net.space())
        .map_err(|source| TrainError::Sampling { iteration: 0, source })?;
    let filter = filter.filter(|_| cfg.filter_enabled).copied();
    if let Some(f) = &filter {
        f.validate()
            .map_err(|source| TrainError::Filter { iteration: 0, source })?;
    }
    let mut table = initial;
    let mut reports = Vec::new();
    let log = {
        let table = &mut table;
        let reports = &mut reports;
        run_loop(net, data, teacher, cfg, |iteration, net, rng| {
            let space = net.space();
            if let Some(f) = &filter {
                if iteration % cfg.filter_every == 0 {
                    let est = SupernetEstimator::new(net, proxy);
                    let (next, report) = update_probabilities(
                        &est,
                        space,
                        intervals,
                        table,
                        f,
                        cfg.sampling,
                        cfg.sampler,
                        rng,
                    )
                    .map_err(|source| TrainError::Filter { iteration, source })?;
                    *table = next;
                    reports.push((iteration, report));
                }
            }
            let sampling = |source| TrainError::Sampling { iteration, source };
            match cfg.sampling {
                SamplingStrategy::Vanilla => {
                    let config = table.sample(rng);
                    let flops = space.flops(&config).expect("table levels come from the space");
                    Ok(Draw {
                        interval: intervals.interval_of(flops as f64),
                        config,
                        flops,
                        fallback: None,
                    })
                }
                SamplingStrategy::TwoStep => {
                    // Rebuilt each step so it always reflects the latest table;
                    // the exact tables are cheap at the sizes used here.
                    let sampler = TwoStepSampler::new(space, intervals, table, cfg.sampler).map_err(sampling)?;
                    let out = sampler.sample(rng).map_err(sampling)?;
                    Ok(Draw {
                        config: out.config,
                        flops: out.flops,
                        interval: Some(out.interval),
                        fallback: out.fallback,
                    })
                }
            }
        })?
    };
    Ok(TrainOutcome {
        log,
        table,
        filter_reports: reports,
    })
}

/// Trains a single fixed configuration with the same loop, batches and
/// optimizer as `train_supernet`.
pub fn train_fixed<T: Real>(
    net: &mut Supernet<T>,
    data: &Dataset<T>,
    teacher: Option<&VitModel<T>>,
    config: &SparseConfig,
    cfg: &TrainConfig,
) -> Result<Vec<TrainLogEntry>, TrainError> {
    net.check_config(config)
        .map_err(|source| TrainError::Step { iteration: 0, source })?;
    let flops = net.space().flops(config).expect("config checked");
    run_loop(net, data, teacher, cfg, |_, _, _| {
        Ok(Draw {
            config: config.clone(),
            flops,
            interval: None,
            fallback: None,
        })
    })
}
