//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Run with `cargo test -p nm-supernet --test acceptance`.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{all_levels, best_subset, lv};
use nm_supernet::cost::{ArchSpec, CostModel};
use nm_supernet::encoding::{decode_sparse, encode_sparse, SparseEncoding};
use nm_supernet::evo::{brute_force_pareto, search, Candidate, EvoConfig};
use nm_supernet::filter::{update_probabilities, FilterConfig};
use nm_supernet::harness::config::{DataSource, ExperimentConfig, PretrainConfig, SyntheticSource};
use nm_supernet::harness::pipeline::{self, load_data, pretrain_teacher, Mode};
use nm_supernet::harness::synth_dataset;
use nm_supernet::harness::SynthSpec;
use nm_supernet::matrix::Matrix;
use nm_supernet::model::{Distillation, VitModel};
use nm_supernet::nm::{apply_mask, group_mask, is_subset, layer_mask, SaliencyMetric, SparsityLevel};
use nm_supernet::sampling::{
    vanilla_sample, ChoiceProbabilityTable, Fallback, SamplingStrategy, TwoStepOptions, TwoStepSampler,
};
use nm_supernet::space::{SearchSpace, SparseConfig};
use nm_supernet::supernet::{FnEstimator, Supernet, SupernetEstimator};
use nm_supernet::train::{train_fixed, train_supernet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f32> {
    let data = (0..rows * cols)
        .map(|_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => rng.random_range(-2i32..=2) as f32,
            _ => rng.random_range(-1.0f32..1.0),
        })
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn mask_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    let levels = all_levels();
    for &l in &levels {
        let m = l.m() as usize;
        for i in 0..1000 {
            // every other group draws from a tiny range so ties are common
            let hi = if i % 2 == 0 { 4 } else { 1 << 20 };
            let scores: Vec<u32> = (0..m).map(|_| rng.random_range(0..hi)).collect();
            let as_f: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
            if group_mask(&as_f, l).unwrap() != best_subset(&scores, l.n() as usize) {
                mismatches += 1;
            }
        }
    }
    let t = start.elapsed();
    check(
        mismatches == 0 && t < Duration::from_secs(5),
        format!("{} levels x 1000 groups, {mismatches} mismatches, {t:.2?} (limit 5s)", levels.len()),
    )
}

fn subset_chain() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    for i in 0..1000 {
        let m = if i % 2 == 0 { 4 } else { 8 };
        let rows = rng.random_range(1..6);
        let cols = m * rng.random_range(1..5);
        let w = random_matrix(&mut rng, rows, cols);
        let masks: Vec<_> = (1..=m as u32)
            .map(|n| layer_mask(&w, SparsityLevel::new(n, m as u32).unwrap(), SaliencyMetric::Magnitude).unwrap())
            .collect();
        for a in 0..masks.len() {
            for b in a..masks.len() {
                if !is_subset(&masks[a], &masks[b]).unwrap() {
                    violations += 1;
                }
            }
        }
    }
    check(violations == 0, format!("1000 matrices, all N1 <= N2 pairs for M=4/8, {violations} violations"))
}

fn flops_halving() -> Outcome {
    let toy = CostModel::pure_linear(&[(64, 32), (32, 64), (48, 48)], 5);
    let half = toy.flops_of(&[lv("2:4"); 3]).unwrap();
    let toy_ok = 2 * half == toy.dense_flops();

    let vit = CostModel::from_arch(&ArchSpec::default()).unwrap();
    let l = vit.num_modules();
    let sparse = vit.flops_of(&vec![lv("2:4"); l]).unwrap();
    let prunable_ok = 2 * (sparse - vit.fixed_flops()) == vit.prunable_dense_flops();
    let ratio = vit.dense_flops() as f64 / sparse as f64;
    check(
        toy_ok && prunable_ok && ratio < 2.0,
        format!(
            "toy {half}*2 = {}; micro-ViT prunable {} -> {}, total {} -> {sparse} (speedup {ratio:.3}x)",
            toy.dense_flops(),
            vit.prunable_dense_flops(),
            sparse - vit.fixed_flops(),
            vit.dense_flops()
        ),
    )
}

/// Largest relative error between analytic and central-difference
/// gradients; entries where both are below `FLOOR` are compared against
/// `FLOOR` instead. A step of 1e-5 keeps f64 round-off in the difference
/// quotient near 1e-11.
fn gradient_error(
    net: &mut Supernet<f64>,
    config: &SparseConfig,
    inputs: &Matrix<f64>,
    labels: &[usize],
    teacher: Option<&[Vec<f64>]>,
    distill: Option<Distillation>,
) -> (f64, usize, usize) {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let (_, grad) = net.loss_and_grad(config, inputs, labels, teacher, distill).unwrap();
    let analytic: Vec<Vec<f64>> = grad.tensors().iter().map(|t| t.to_vec()).collect();
    let masks = net.masks(config).unwrap();

    // pruned positions must carry exactly zero gradient
    let mut nonzero_pruned = 0;
    for (layer, mask) in masks.iter().enumerate() {
        if let Some(mask) = mask {
            for (g, keep) in grad.prunable(layer).as_slice().iter().zip(mask.as_slice()) {
                if !keep && *g != 0.0 {
                    nonzero_pruned += 1;
                }
            }
        }
    }

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (t, ga) in analytic.iter().enumerate() {
        for i in 0..ga.len() {
            let orig = net.params().tensors()[t][i];
            net.params_mut().tensors_mut()[t][i] = orig + H;
            let up = net.loss_and_grad(config, inputs, labels, teacher, distill).unwrap().0;
            net.params_mut().tensors_mut()[t][i] = orig - H;
            let down = net.loss_and_grad(config, inputs, labels, teacher, distill).unwrap().0;
            net.params_mut().tensors_mut()[t][i] = orig;
            let fd = (up - down) / (2.0 * H);
            let denom = ga[i].abs().max(fd.abs()).max(FLOOR);
            worst = worst.max((ga[i] - fd).abs() / denom);
            checked += 1;
        }
    }
    (worst, checked, nonzero_pruned)
}

fn gradients() -> Outcome {
    let arch = ArchSpec {
        image_side: 8,
        patch_size: 4,
        channels: 1,
        embed_dim: 8,
        num_heads: 2,
        mlp_ratio: 2,
        blocks: 1,
        num_classes: 3,
    };
    let model = VitModel::<f64>::random(arch.clone(), 7).unwrap();
    let teacher_model = VitModel::<f64>::random(arch.clone(), 8).unwrap();
    let space = SearchSpace::new(
        vec![lv("1:4"), lv("2:4"), lv("4:4")],
        CostModel::from_arch(&arch).unwrap(),
        1.0,
    )
    .unwrap();
    let mut net = Supernet::new(arch.clone(), model.params, space).unwrap();
    let data = synth_dataset(&SynthSpec {
        n: 4,
        classes: 3,
        image_side: 8,
        channels: 1,
        noise: 0.2,
        seed: 3,
    })
    .unwrap()
    .cast::<f64>();
    let teacher_logits = teacher_model.logits(data.features()).unwrap();

    let masked = SparseConfig::new(vec![lv("1:4"), lv("2:4"), lv("4:4"), lv("2:4")]);
    let (e1, n1, z1) = gradient_error(&mut net, &masked, data.features(), data.labels(), None, None);
    let dense = SparseConfig::new(vec![lv("4:4"); 4]);
    let distill = Some(Distillation::default());
    let (e2, n2, z2) = gradient_error(
        &mut net,
        &dense,
        data.features(),
        data.labels(),
        Some(&teacher_logits),
        distill,
    );
    check(
        e1 < 1e-4 && e2 < 1e-4 && z1 == 0 && z2 == 0,
        format!(
            "masked config: max rel err {e1:.2e} over {n1} params; dense + distillation: {e2:.2e} over {n2}; \
             nonzero grads at pruned positions: {z1}"
        ),
    )
}

fn frequency_band(p: f64, n: f64) -> f64 {
    3.0 * (p * (1.0 - p) / n).sqrt()
}

fn sampling_uniformity() -> Outcome {
    let space = SearchSpace::new(
        vec![lv("1:4"), lv("2:4"), lv("4:4")],
        CostModel::from_arch(&ArchSpec::default()).unwrap(),
        nm_supernet::space::DEFAULT_C_UPPER_FRACTION,
    )
    .unwrap();
    let intervals = space.intervals(9).unwrap();
    let table = ChoiceProbabilityTable::uniform(&space);
    let sampler = TwoStepSampler::new(&space, &intervals, &table, TwoStepOptions::default()).unwrap();
    let draws = 80_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut hist = [0usize; 8];
    let mut repairs = 0;
    let mut nearest = 0;
    let mut invalid = 0;
    for _ in 0..draws {
        let out = sampler.sample(&mut rng).unwrap();
        match intervals.interval_of(out.flops as f64) {
            Some(i) => hist[i] += 1,
            None => invalid += 1,
        }
        match out.fallback {
            Some(Fallback::Repair) => repairs += 1,
            Some(Fallback::NearestInterval) => nearest += 1,
            None => {}
        }
    }
    let p = 1.0 / 8.0;
    let band = frequency_band(p, draws as f64);
    let freqs: Vec<f64> = hist.iter().map(|&h| h as f64 / draws as f64).collect();
    let uniform = freqs.iter().all(|f| (f - p).abs() <= band);
    let fallback_rate = (repairs + nearest) as f64 / draws as f64;

    // vanilla draws ignore the cost cap; score them on the same intervals
    let mut vhist = [0usize; 8];
    let mut outside = 0;
    // and on 8 equal-width bins over the whole reachable range
    let (lo, hi) = (space.c_lower() as f64, space.cost().dense_flops() as f64);
    let mut full = [0usize; 8];
    for _ in 0..draws {
        let c = vanilla_sample(&space, &mut rng);
        let f = space.flops(&c).unwrap() as f64;
        match intervals.interval_of(f) {
            Some(i) => vhist[i] += 1,
            None => outside += 1,
        }
        full[(((f - lo) / (hi - lo) * 8.0) as usize).min(7)] += 1;
    }
    let vfreqs: Vec<f64> = vhist.iter().map(|&h| h as f64 / draws as f64).collect();
    let vanilla_uniform = vfreqs.iter().all(|f| (f - p).abs() <= band);
    let peak = (0..8).max_by_key(|&i| full[i]).unwrap();
    let unimodal = full[..=peak].windows(2).all(|w| w[0] <= w[1]) && full[peak..].windows(2).all(|w| w[0] >= w[1]);
    let ffreqs: Vec<f64> = full.iter().map(|&h| h as f64 / draws as f64).collect();
    let fmt = |v: &[f64]| v.iter().map(|f| format!("{f:.4}")).collect::<Vec<_>>().join(" ");
    check(
        uniform && invalid == 0 && fallback_rate < 0.01 && !vanilla_uniform && unimodal,
        format!(
            "two-step [{}] (band 0.125 +/- {band:.4}), fallback rate {fallback_rate:.4}; \
             vanilla on the intervals [{}] with {outside} draws above c_upper; \
             vanilla over the full range [{}] unimodal {unimodal}",
            fmt(&freqs),
            fmt(&vfreqs),
            fmt(&ffreqs)
        ),
    )
}

fn choice_filtering() -> Outcome {
    let space = SearchSpace::new(
        vec![lv("1:4"), lv("2:4"), lv("4:4")],
        CostModel::from_arch(&ArchSpec::default()).unwrap(),
        nm_supernet::space::DEFAULT_C_UPPER_FRACTION,
    )
    .unwrap();
    let intervals = space.intervals(9).unwrap();
    let table = ChoiceProbabilityTable::uniform(&space);
    let (bad_layer, bad_level) = (3, space.level_index(lv("2:4")).unwrap());
    let est = FnEstimator(move |c: &SparseConfig| if c.get(bad_layer) == lv("2:4") { 0.05 } else { 0.9 });
    let cfg = FilterConfig {
        n_eval: 300,
        acc_th: 0.3,
        proxy_size: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (next, report) = update_probabilities(
        &est,
        &space,
        &intervals,
        &table,
        &cfg,
        SamplingStrategy::TwoStep,
        TwoStepOptions::default(),
        &mut rng,
    )
    .unwrap();
    let zeroed = report.zeroed();
    let exact = zeroed == vec![(bad_layer, lv("2:4"))] && next.get(bad_layer, bad_level) == 0.0;
    let worst_row = next
        .rows()
        .iter()
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let sampler = TwoStepSampler::new(&space, &intervals, &next, TwoStepOptions::default()).unwrap();
    let mut hits = 0;
    for _ in 0..10_000 {
        if sampler.sample(&mut rng).unwrap().config.get(bad_layer) == lv("2:4") {
            hits += 1;
        }
    }
    check(
        exact && worst_row <= 1e-9 && hits == 0,
        format!(
            "zeroed {zeroed:?}; max |row sum - 1| = {worst_row:.1e}; forbidden choice in {hits} of 10000 samples"
        ),
    )
}

fn key(c: &[Candidate]) -> Vec<(SparseConfig, u64, u64)> {
    let mut v: Vec<_> = c.iter().map(|c| (c.config.clone(), c.flops, c.accuracy.to_bits())).collect();
    v.sort();
    v
}

fn search_oracle() -> Outcome {
    let start = Instant::now();
    let arch = ArchSpec {
        blocks: 1,
        num_classes: 8,
        ..ArchSpec::default()
    };
    let space = SearchSpace::new(
        vec![lv("1:4"), lv("2:4"), lv("4:4")],
        CostModel::from_arch(&arch).unwrap(),
        1.0,
    )
    .unwrap();
    let spec = |n, seed| SynthSpec {
        n,
        classes: 8,
        image_side: arch.image_side,
        channels: 1,
        noise: 0.3,
        seed,
    };
    let train = synth_dataset(&spec(1024, 11)).unwrap();
    let val = synth_dataset(&spec(256, 12)).unwrap();
    let teacher = pretrain_teacher(&arch, &train, &PretrainConfig { iterations: 150, ..Default::default() }, 13).unwrap();
    let net = Supernet::init_from_pretrained(&teacher, space.clone()).unwrap();
    let est = SupernetEstimator::new(&net, &val);
    let intervals = space.intervals(9).unwrap();
    let table = ChoiceProbabilityTable::uniform(&space);
    let truth = brute_force_pareto(&est, &space, 81).unwrap();
    let mut failures = Vec::new();
    let mut archive_sizes = Vec::new();
    for seed in 0..5 {
        let cfg = EvoConfig {
            population_size: 90,
            top_k: 90,
            generations: 30,
            mutation_prob: 0.3,
            crossover_pairs: 20,
            seed,
            ..EvoConfig::default()
        };
        let res = search(&est, &space, &intervals, &table, &cfg, TwoStepOptions::default()).unwrap();
        archive_sizes.push(res.archive.len());
        if key(&res.pareto) != key(&truth) {
            failures.push(seed);
        }
    }
    let t = start.elapsed();
    check(
        failures.is_empty() && t < Duration::from_secs(120),
        format!(
            "81 configs, true front has {} points; seeds with a different front: {failures:?}; \
             archive sizes {archive_sizes:?}; {t:.1?} (limit 120s)",
            truth.len()
        ),
    )
}

fn retention() -> Outcome {
    let mut cfg = ExperimentConfig::smoke(std::env::temp_dir().join("nm-supernet-acceptance-8"));
    cfg.dataset = DataSource::Synthetic(SyntheticSource {
        n_train: 2048,
        n_val: 1024,
        noise: 0.3,
    });
    cfg.train.iterations = 400;
    let splits = load_data(&cfg).unwrap();
    let teacher = pretrain_teacher(&cfg.arch, &splits.train, &cfg.pretrain, cfg.seeds().pretrain).unwrap();
    let space = cfg.space().unwrap();
    let intervals = space.intervals(cfg.interval_boundaries).unwrap();
    let (train_cfg, _) = cfg.resolved();

    let net0 = Supernet::init_from_pretrained(&teacher, space.clone()).unwrap();
    let dense = SparseConfig::new(vec![space.densest(); space.num_layers()]);
    let a = net0.forward(&dense, splits.val.features()).unwrap();
    let b = teacher.logits(splits.val.features()).unwrap();
    let bit_exact = a.len() == b.len()
        && a.iter().zip(&b).all(|(x, y)| x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));

    let mut net = net0.clone();
    let proxy = pipeline::proxy_set(&splits.val, cfg.filter.proxy_size, cfg.seeds().proxy);
    train_supernet(
        &mut net,
        &splits.train,
        &proxy,
        Some(&teacher),
        &intervals,
        &train_cfg,
        Some(&cfg.filter),
        ChoiceProbabilityTable::uniform(&space),
    )
    .unwrap();
    let two_four = SparseConfig::new(vec![lv("2:4"); space.num_layers()]);
    let inherited = net.evaluate(&two_four, &splits.val).unwrap();

    let mut tuned = net0.clone();
    train_fixed(&mut tuned, &splits.train, Some(&teacher), &two_four, &train_cfg).unwrap();
    let finetuned = tuned.evaluate(&two_four, &splits.val).unwrap();
    let teacher_acc = pipeline::model_accuracy(&teacher, &splits.val).unwrap();
    let gap = 100.0 * (finetuned - inherited);
    check(
        gap.abs() <= 2.0 && bit_exact,
        format!(
            "teacher {:.2}%, inherited 2:4 {:.2}%, fine-tuned 2:4 {:.2}% ({} steps each), gap {gap:.2} points \
             (limit 2.0); dense subnet reproduces teacher logits bit-exactly: {bit_exact}",
            100.0 * teacher_acc,
            100.0 * inherited,
            100.0 * finetuned,
            train_cfg.iterations
        ),
    )
}

fn unpack(bytes: &[u8], bits: usize, count: usize) -> Vec<u32> {
    (0..count)
        .map(|k| {
            let mut v = 0u32;
            for b in 0..bits {
                let pos = k * bits + b;
                v |= ((bytes[pos / 8] >> (pos % 8)) as u32 & 1) << b;
            }
            v
        })
        .collect()
}

fn encoding_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = 0;
    let mut width_errors = 0;
    let levels = all_levels();
    for &l in &levels {
        let m = l.m() as usize;
        for _ in 0..1000 {
            let rows = rng.random_range(1..5);
            let cols = m * rng.random_range(1..4);
            let w = random_matrix(&mut rng, rows, cols);
            let enc = encode_sparse(&w, l, SaliencyMetric::Magnitude).unwrap();
            let bytes = enc.to_bytes();
            let back = SparseEncoding::<f32>::from_bytes(&bytes).unwrap();
            let dense = decode_sparse(&back).unwrap();
            let expect = apply_mask(&w, &layer_mask(&w, l, SaliencyMetric::Magnitude).unwrap()).unwrap();
            if dense.as_slice().iter().zip(expect.as_slice()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                failures += 1;
            }
            let r = enc.values.len();
            let bits = m.trailing_zeros() as usize;
            let index_start = 16 + 4 * r;
            if bytes.len() != index_start + (r * bits).div_ceil(8)
                || unpack(&bytes[index_start..], bits, r) != enc.indices
            {
                width_errors += 1;
            }
        }
    }
    check(
        failures == 0 && width_errors == 0,
        format!(
            "{} levels x 1000 matrices: {failures} value mismatches, {width_errors} index-width mismatches",
            levels.len()
        ),
    )
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json");
    let base = ExperimentConfig::load(&path).unwrap();
    let start = Instant::now();
    let mut outputs = Vec::new();
    for name in ["first", "second"] {
        let cfg = ExperimentConfig {
            output_dir: root.path().join(name),
            ..base.clone()
        };
        pipeline::run(&cfg, Mode::Run).unwrap();
        let read = |f: &str| std::fs::read(cfg.output_dir.join(f)).unwrap();
        outputs.push((read("pareto.json"), read("generations.csv")));
    }
    let same_pareto = outputs[0].0 == outputs[1].0;
    let same_gens = outputs[0].1 == outputs[1].1;
    check(
        same_pareto && same_gens,
        format!(
            "two runs of configs/smoke.json: pareto.json identical {same_pareto}, generations.csv identical \
             {same_gens} ({:.1?} total)",
            start.elapsed()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 mask oracle", mask_oracle),
        ("2 subset chain", subset_chain),
        ("3 flops halving", flops_halving),
        ("4 gradient check", gradients),
        ("5 two-step uniformity", sampling_uniformity),
        ("6 choice filtering", choice_filtering),
        ("7 search oracle", search_oracle),
        ("8 desk-scale retention", retention),
        ("9 encoding round trip", encoding_round_trip),
        ("10 determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (tag, detail) = match std::panic::catch_unwind(f) {
            Ok(Ok(d)) => ("PASS", d),
            Ok(Err(d)) => ("FAIL", d),
            Err(_) => ("FAIL", "panicked".to_string()),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("{tag} criterion {name}: {detail} [{:.1?}]", start.elapsed());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
