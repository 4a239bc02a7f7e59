//! End-to-end orchestration: data, teacher, supernet training, search,
//! baselines and report emission.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::config::{DataSource, ExperimentConfig, PretrainConfig};
use super::dataset::{load_csv, synth_dataset, CsvSchema, SynthSpec};
use super::report::{write_json, Cell, Csv};
use super::{at, HarnessError, Stage};
use crate::baselines::{compare_estimators, er_config, EstimatorComparison};
use crate::cost::{ArchSpec, CostIntervals, CostModel};
use crate::data::Dataset;
use crate::evo::{search, Candidate, SearchResult};
use crate::model::checkpoint::Checkpoint;
use crate::model::VitModel;
use crate::nm::SparsityLevel;
use crate::sampling::{ChoiceProbabilityTable, Fallback, SamplingStrategy};
use crate::space::{SearchSpace, SparseConfig};
use crate::supernet::{accuracy, Supernet, SupernetEstimator};
use crate::train::{train_fixed, train_supernet, TrainConfig, TrainError, TrainOutcome};

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const SUPERNET_CKPT: &str = "supernet.ckpt";
pub const TABLE_JSON: &str = "probability_table.json";
pub const FAILED_JSON: &str = "FAILED.json";

/// What `run` executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Data and teacher only.
    Pretrain,
    /// Data, teacher and supernet training.
    TrainSupernet,
    /// Search over a supernet previously written to the output directory.
    Search,
    /// Every stage.
    Run,
    AblationSampling,
    AblationFilter,
    CompareEr,
    CompareEstimator,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::TrainSupernet => "train-supernet",
            Mode::Search => "search",
            Mode::Run => "run",
            Mode::AblationSampling => "ablation-sampling",
            Mode::AblationFilter => "ablation-filter",
            Mode::CompareEr => "compare-er",
            Mode::CompareEstimator => "compare-estimator",
        }
    }
}

/// Files written by a successful run, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub mode: Mode,
    pub output_dir: PathBuf,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset<f32>,
    pub val: Dataset<f32>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Splits, HarnessError> {
    let arch = &cfg.arch;
    let seeds = cfg.seeds();
    let (train, val) = match &cfg.dataset {
        DataSource::Synthetic(s) => {
            let spec = |n, seed| SynthSpec {
                n,
                classes: arch.num_classes,
                image_side: arch.image_side,
                channels: arch.channels,
                noise: s.noise,
                seed,
            };
            (
                synth_dataset(&spec(s.n_train, seeds.data)).map_err(at(Stage::Data))?,
                synth_dataset(&spec(s.n_val, seeds.val_data)).map_err(at(Stage::Data))?,
            )
        }
        DataSource::Csv(c) => {
            let schema = CsvSchema {
                features: arch.input_dim(),
                num_classes: arch.num_classes,
                max_value: c.max_value,
            };
            (load_csv(&c.train, &schema).map_err(at(Stage::Data))?, load_csv(&c.val, &schema).map_err(at(Stage::Data))?)
        }
    };
    Ok(Splits { train, val })
}

/// Trains the dense model from a seeded random init with plain
/// cross-entropy.
pub fn pretrain_teacher(
    arch: &ArchSpec,
    data: &Dataset<f32>,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<VitModel<f32>, TrainError> {
    let init = VitModel::<f32>::random(arch.clone(), seed)?;
    let cost = CostModel::from_arch(arch).map_err(|e| TrainError::Config(e.to_string()))?;
    let dense = SparsityLevel::dense(1).expect("1:1 is valid");
    let space = SearchSpace::new(vec![dense], cost, 1.0).map_err(|e| TrainError::Config(e.to_string()))?;
    let mut net = Supernet::new(arch.clone(), init.params, space)
        .map_err(|source| TrainError::Step { iteration: 0, source })?;
    let train = TrainConfig {
        iterations: cfg.iterations,
        batch_size: cfg.batch_size,
        filter_enabled: false,
        distillation: None,
        optimizer: cfg.optimizer,
        seed,
        ..TrainConfig::default()
    };
    let config = SparseConfig::new(vec![dense; arch.num_prunable()]);
    train_fixed(&mut net, data, None, &config, &train)?;
    Ok(net.to_model())
}

pub fn model_accuracy(model: &VitModel<f32>, data: &Dataset<f32>) -> Result<f64, HarnessError> {
    let logits = model
        .logits(data.features())
        .map_err(|e| HarnessError::new(Stage::Teacher, e))?;
    Ok(accuracy(&logits, data.labels()))
}

/// A seeded random subset of `val` of at most `size` samples.
pub fn proxy_set(val: &Dataset<f32>, size: usize, seed: u64) -> Dataset<f32> {
    let mut idx: Vec<usize> = (0..val.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(size.min(val.len()));
    val.select(&idx)
}

struct Context {
    cfg: ExperimentConfig,
    hash: String,
    out: PathBuf,
    space: SearchSpace,
    intervals: CostIntervals,
    artifacts: Vec<String>,
    summary: serde_json::Map<String, serde_json::Value>,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn record(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), HarnessError> {
        write_json(&self.path(name), value).map_err(|e| HarnessError::new(Stage::Report, e))?;
        self.record(name);
        Ok(())
    }

    fn csv(&mut self, name: &str, csv: &Csv) -> Result<(), HarnessError> {
        csv.write(&self.path(name)).map_err(|e| HarnessError::new(Stage::Report, e))?;
        self.record(name);
        Ok(())
    }

    fn note(&mut self, key: &str, value: serde_json::Value) {
        self.summary.insert(key.to_string(), value);
    }

    fn teacher(&mut self, splits: &Splits) -> Result<VitModel<f32>, HarnessError> {
        let model = match &self.cfg.teacher_checkpoint {
            Some(path) => {
                let ckpt = Checkpoint::load(path).map_err(at(Stage::Teacher))?;
                if ckpt.model.arch != self.cfg.arch {
                    return Err(HarnessError::new(Stage::Teacher, "teacher checkpoint architecture differs from the config"));
                }
                log::info!("loaded teacher from {}", path.display());
                ckpt.model
            }
            None => {
                log::info!("pretraining teacher for {} iterations", self.cfg.pretrain.iterations);
                pretrain_teacher(&self.cfg.arch, &splits.train, &self.cfg.pretrain, self.cfg.seeds().pretrain)
                    .map_err(at(Stage::Teacher))?
            }
        };
        Checkpoint::new(model.clone())
            .save(&self.path(TEACHER_CKPT))
            .map_err(at(Stage::Teacher))?;
        self.record(TEACHER_CKPT);
        let acc = model_accuracy(&model, &splits.val)?;
        log::info!("teacher validation accuracy {acc:.4}");
        self.note("teacher_val_accuracy", json!(acc));
        Ok(model)
    }

    fn train(
        &self,
        splits: &Splits,
        teacher: &VitModel<f32>,
        train: &TrainConfig,
    ) -> Result<(Supernet<f32>, TrainOutcome), HarnessError> {
        let mut net = Supernet::init_from_pretrained(teacher, self.space.clone()).map_err(at(Stage::Supernet))?;
        let proxy = proxy_set(&splits.val, self.cfg.filter.proxy_size, self.cfg.seeds().proxy);
        log::info!(
            "training supernet for {} iterations ({:?} sampling, filter {})",
            train.iterations,
            train.sampling,
            if train.filter_enabled { "on" } else { "off" }
        );
        let outcome = train_supernet(
            &mut net,
            &splits.train,
            &proxy,
            Some(teacher),
            &self.intervals,
            train,
            Some(&self.cfg.filter),
            ChoiceProbabilityTable::uniform(&self.space),
        )
        .map_err(at(Stage::Supernet))?;
        Ok((net, outcome))
    }

    fn search(
        &self,
        net: &Supernet<f32>,
        val: &Dataset<f32>,
        table: &ChoiceProbabilityTable,
    ) -> Result<SearchResult, HarnessError> {
        let (train, evo) = self.cfg.resolved();
        log::info!("evolutionary search: {} generations", evo.generations);
        let est = SupernetEstimator::new(net, val);
        search(&est, &self.space, &self.intervals, table, &evo, train.sampler)
            .map_err(|e| HarnessError::new(Stage::Search, e))
    }

    fn write_training(&mut self, prefix: &str, net: &Supernet<f32>, outcome: &TrainOutcome) -> Result<(), HarnessError> {
        let mut csv = Csv::new(&["iteration", "flops", "interval", "loss", "fallback", "config"]);
        for e in &outcome.log {
            csv.row(vec![
                e.iteration.into(),
                e.flops.into(),
                e.interval.into(),
                e.loss.into(),
                e.fallback.map(fallback_name).into(),
                config_cell(&e.config),
            ]);
        }
        self.csv(&format!("{prefix}training_log.csv"), &csv)?;
        // Written without rounding: `search` reloads it and rows must still
        // sum to one.
        let table = serde_json::to_string_pretty(&outcome.table).expect("table serializes") + "\n";
        let name = format!("{prefix}{TABLE_JSON}");
        std::fs::write(self.path(&name), table).map_err(|e| HarnessError::new(Stage::Report, e))?;
        self.record(&name);
        let reports: Vec<_> = outcome
            .filter_reports
            .iter()
            .map(|(iteration, r)| json!({"iteration": iteration, "report": r}))
            .collect();
        self.json(&format!("{prefix}filter_reports.json"), &json!({"config_hash": self.hash, "rounds": reports}))?;
        let name = format!("{prefix}{SUPERNET_CKPT}");
        Checkpoint::new(net.to_model())
            .save(&self.path(&name))
            .map_err(|e| HarnessError::new(Stage::Supernet, e))?;
        self.record(&name);
        Ok(())
    }

    fn pareto_json(&self, result: &SearchResult) -> serde_json::Value {
        let dense = self.space.cost().dense_flops();
        json!({
            "config_hash": self.hash,
            "dense_flops": dense,
            "c_upper": self.space.c_upper(),
            "pareto": result.pareto.iter().map(|c| point_json(c, dense)).collect::<Vec<_>>(),
        })
    }

    fn write_search(&mut self, result: &SearchResult) -> Result<(), HarnessError> {
        let pareto = self.pareto_json(result);
        self.json("pareto.json", &pareto)?;
        let mut gens = Csv::new(&["generation", "best_acc", "mean_acc", "archive_size"]);
        for g in &result.generations {
            gens.row(vec![
                g.generation.into(),
                g.best_acc.into(),
                g.mean_acc.into(),
                g.archive_size.into(),
            ]);
        }
        self.csv("generations.csv", &gens)?;
        let mut layers = Csv::new(&["pareto_index", "flops", "accuracy", "layer", "block", "role", "level"]);
        let modules = self.space.cost().modules().to_vec();
        for (i, c) in result.pareto.iter().enumerate() {
            for (layer, (m, level)) in modules.iter().zip(c.config.levels()).enumerate() {
                layers.row(vec![
                    i.into(),
                    c.flops.into(),
                    c.accuracy.into(),
                    layer.into(),
                    m.block.into(),
                    m.role.as_str().into(),
                    level.to_string().into(),
                ]);
            }
        }
        self.csv("layer_configs.csv", &layers)?;
        self.note("pareto_size", json!(result.pareto.len()));
        self.note("archive_size", json!(result.archive.len()));
        Ok(())
    }

    fn load_supernet(&mut self) -> Result<(Supernet<f32>, ChoiceProbabilityTable), HarnessError> {
        let ckpt = Checkpoint::load(&self.path(SUPERNET_CKPT)).map_err(at(Stage::Search))?;
        if ckpt.model.arch != self.cfg.arch {
            return Err(HarnessError::new(Stage::Search, "supernet checkpoint architecture differs from the config"));
        }
        let net = Supernet::new(ckpt.model.arch, ckpt.model.params, self.space.clone()).map_err(at(Stage::Search))?;
        let text = std::fs::read_to_string(self.path(TABLE_JSON)).map_err(at(Stage::Search))?;
        let table: ChoiceProbabilityTable = serde_json::from_str(&text).map_err(at(Stage::Search))?;
        if !table.matches(&self.space) {
            return Err(HarnessError::new(Stage::Search, "probability table does not match the search space"));
        }
        Ok((net, table))
    }

    fn manifest(&mut self, mode: Mode) -> Result<(), HarnessError> {
        let seeds = self.cfg.seeds();
        let mut files = serde_json::Map::new();
        for name in &self.artifacts {
            let bytes = std::fs::read(self.path(name)).map_err(|e| HarnessError::new(Stage::Report, e))?;
            files.insert(name.clone(), json!(hex(&Sha256::digest(&bytes))));
        }
        let manifest = json!({
            "mode": mode,
            "config_hash": self.hash,
            "config": self.cfg,
            "package_version": env!("CARGO_PKG_VERSION"),
            "seeds": {
                "master": self.cfg.seed,
                "data": seeds.data,
                "val_data": seeds.val_data,
                "pretrain": seeds.pretrain,
                "train": seeds.train,
                "evo": seeds.evo,
                "proxy": seeds.proxy,
            },
            "algorithms": {
                "rng": "chacha8",
                "saliency": "magnitude",
                "mask_tie_break": "lowest-index",
                "intervals": "equal-width",
                "flops": "2-per-mac",
                "crossover": self.cfg.evo.crossover,
            },
            "summary": self.summary,
            "artifacts": files,
        });
        write_json(&self.path("manifest.json"), &manifest).map_err(|e| HarnessError::new(Stage::Report, e))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn fallback_name(f: Fallback) -> &'static str {
    match f {
        Fallback::NearestInterval => "nearest_interval",
        Fallback::Repair => "repair",
    }
}

fn config_cell(c: &SparseConfig) -> Cell {
    let parts: Vec<String> = c.levels().iter().map(|l| l.to_string()).collect();
    parts.join("|").into()
}

fn point_json(c: &Candidate, dense: u64) -> serde_json::Value {
    json!({
        "config": c.config,
        "flops": c.flops,
        "flops_ratio_vs_dense": c.flops as f64 / dense as f64,
        "accuracy": c.accuracy,
    })
}

fn interval_histogram(outcome: &TrainOutcome, k: usize) -> (Vec<usize>, usize) {
    let mut hist = vec![0; k];
    let mut outside = 0;
    for e in &outcome.log {
        match e.interval {
            Some(i) => hist[i] += 1,
            None => outside += 1,
        }
    }
    (hist, outside)
}

/// Runs `mode` and writes its artifacts to `cfg.output_dir`. On failure a
/// `FAILED.json` marker names the stage; files already written are partial.
pub fn run(cfg: &ExperimentConfig, mode: Mode) -> Result<RunSummary, HarnessError> {
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| HarnessError::new(Stage::Report, e))?;
    let marker = out.join(FAILED_JSON);
    if marker.exists() {
        std::fs::remove_file(&marker).map_err(|e| HarnessError::new(Stage::Report, e))?;
    }
    let result = execute(cfg, mode);
    if let Err(e) = &result {
        let body = json!({"mode": mode, "stage": e.stage, "error": e.to_string(), "partial": true});
        // Best effort: the original error matters more than a failed marker.
        let _ = write_json(&marker, &body);
    }
    result
}

fn execute(cfg: &ExperimentConfig, mode: Mode) -> Result<RunSummary, HarnessError> {
    cfg.validate().map_err(|e| HarnessError::new(Stage::Config, e))?;
    let space = cfg.space().map_err(|e| HarnessError::new(Stage::Config, e))?;
    let intervals = space
        .intervals(cfg.interval_boundaries)
        .map_err(|e| HarnessError::new(Stage::Config, e))?;
    let mut ctx = Context {
        hash: cfg.hash(),
        out: cfg.output_dir.clone(),
        cfg: cfg.clone(),
        space,
        intervals,
        artifacts: Vec::new(),
        summary: serde_json::Map::new(),
    };
    let (train_cfg, _) = cfg.resolved();

    if mode == Mode::Search {
        let splits = load_data(cfg)?;
        let (net, table) = ctx.load_supernet()?;
        let result = ctx.search(&net, &splits.val, &table)?;
        ctx.write_search(&result)?;
        return finish(ctx, mode);
    }

    let splits = load_data(cfg)?;
    let teacher = ctx.teacher(&splits)?;
    if mode == Mode::Pretrain {
        return finish(ctx, mode);
    }

    match mode {
        Mode::AblationSampling | Mode::AblationFilter => {
            let variants: Vec<(&str, TrainConfig)> = if mode == Mode::AblationSampling {
                vec![
                    ("vanilla", TrainConfig { sampling: SamplingStrategy::Vanilla, ..train_cfg }),
                    ("two-step", TrainConfig { sampling: SamplingStrategy::TwoStep, ..train_cfg }),
                ]
            } else {
                vec![
                    ("filter-off", TrainConfig { filter_enabled: false, ..train_cfg }),
                    ("filter-on", TrainConfig { filter_enabled: true, ..train_cfg }),
                ]
            };
            let mut rows = Vec::new();
            for (name, tc) in variants {
                let (net, outcome) = ctx.train(&splits, &teacher, &tc)?;
                let result = ctx.search(&net, &splits.val, &outcome.table)?;
                let (hist, outside) = interval_histogram(&outcome, ctx.intervals.num_intervals());
                let zeroed: Vec<_> = outcome
                    .filter_reports
                    .last()
                    .map(|(_, r)| r.zeroed())
                    .unwrap_or_default()
                    .into_iter()
                    .map(|(layer, level)| json!({"layer": layer, "level": level}))
                    .collect();
                let mut entry = ctx.pareto_json(&result);
                let obj = entry.as_object_mut().expect("object");
                obj.remove("config_hash");
                obj.insert("name".into(), json!(name));
                obj.insert("interval_histogram".into(), json!(hist));
                obj.insert("outside_intervals".into(), json!(outside));
                obj.insert("fallbacks".into(), json!(outcome.fallbacks()));
                obj.insert("zeroed_choices".into(), json!(zeroed));
                rows.push(entry);
            }
            let file = format!("{}.json", mode.name().replace('-', "_"));
            let body = json!({
                "config_hash": ctx.hash,
                "interval_boundaries": ctx.intervals.boundaries(),
                "variants": rows,
            });
            ctx.json(&file, &body)?;
            return finish(ctx, mode);
        }
        _ => {}
    }

    let (net, outcome) = ctx.train(&splits, &teacher, &train_cfg)?;
    ctx.write_training("", &net, &outcome)?;
    ctx.note("training_fallbacks", json!(outcome.fallbacks()));
    if mode == Mode::TrainSupernet {
        return finish(ctx, mode);
    }

    let result = ctx.search(&net, &splits.val, &outcome.table)?;
    ctx.write_search(&result)?;

    match mode {
        Mode::CompareEr => {
            let est = SupernetEstimator::new(&net, &splits.val);
            let dense = ctx.space.cost().dense_flops();
            let mut rows = Vec::new();
            for &target in &cfg.er_targets {
                let config = er_config(&ctx.space, target).map_err(at(Stage::Baseline))?;
                let flops = ctx.space.flops(&config).map_err(at(Stage::Baseline))?;
                let acc = crate::supernet::AccuracyEstimator::accuracy(&est, &config).map_err(at(Stage::Baseline))?;
                let searched = result
                    .pareto
                    .iter()
                    .filter(|c| c.flops <= flops)
                    .max_by(|a, b| a.accuracy.total_cmp(&b.accuracy).then(b.flops.cmp(&a.flops)));
                rows.push(json!({
                    "target_sparsity": target,
                    "er": {
                        "config": config,
                        "flops": flops,
                        "flops_ratio_vs_dense": flops as f64 / dense as f64,
                        "within_c_upper": ctx.space.validate(&config).is_ok(),
                        "accuracy": acc,
                    },
                    "searched": searched.map(|c| point_json(c, dense)),
                }));
            }
            let body = json!({"config_hash": ctx.hash, "dense_flops": dense, "rows": rows});
            ctx.json("compare_er.json", &body)?;
        }
        Mode::CompareEstimator => {
            let proxy = proxy_set(&splits.val, cfg.filter.proxy_size, cfg.seeds().proxy);
            let (_, evo) = cfg.resolved();
            let cmp = compare_estimators(
                &teacher,
                &net,
                &proxy,
                &ctx.intervals,
                &outcome.table,
                &evo,
                train_cfg.sampler,
            )
            .map_err(|e| HarnessError::new(Stage::Baseline, e))?;
            let body = comparison_json(&ctx, &cmp);
            ctx.json("compare_estimator.json", &body)?;
        }
        _ => {}
    }
    finish(ctx, mode)
}

fn comparison_json(ctx: &Context, cmp: &EstimatorComparison) -> serde_json::Value {
    let dense = ctx.space.cost().dense_flops();
    let rows: Vec<_> = cmp
        .rows
        .iter()
        .map(|r| {
            json!({
                "flops_budget": r.flops_budget,
                "flops_ratio_vs_dense": r.flops_budget as f64 / dense as f64,
                "dense_estimator": r.dense_estimator,
                "supernet_estimator": r.supernet_estimator,
            })
        })
        .collect();
    json!({
        "config_hash": ctx.hash,
        "dense_flops": dense,
        "dense_pareto": cmp.dense.pareto.iter().map(|c| point_json(c, dense)).collect::<Vec<_>>(),
        "supernet_pareto": cmp.supernet.pareto.iter().map(|c| point_json(c, dense)).collect::<Vec<_>>(),
        "rows": rows,
    })
}

fn finish(mut ctx: Context, mode: Mode) -> Result<RunSummary, HarnessError> {
    ctx.manifest(mode)?;
    ctx.record("manifest.json");
    Ok(RunSummary {
        mode,
        output_dir: ctx.out.clone(),
        artifacts: ctx.artifacts,
    })
}

/// Reads a pareto report back into configurations (used by tests and
/// downstream tooling).
pub fn read_pareto(path: &Path) -> Result<Vec<(SparseConfig, u64, f64)>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(at(Stage::Report))?;
    #[derive(serde::Deserialize)]
    struct Point {
        config: SparseConfig,
        flops: u64,
        accuracy: f64,
    }
    #[derive(serde::Deserialize)]
    struct File {
        pareto: Vec<Point>,
    }
    let f: File = serde_json::from_str(&text).map_err(at(Stage::Report))?;
    Ok(f.pareto.into_iter().map(|p| (p.config, p.flops, p.accuracy)).collect())
}
