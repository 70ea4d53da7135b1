//! End-to-end acceptance checks. Runs each criterion in turn, prints one
//! PASS/FAIL line per criterion and exits nonzero if any failed. A criterion
//! that exceeds its time budget fails even if its assertions held.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use metaroute::complexity::{compare_bottlenecks, BottleneckConfig};
use metaroute::film::film_apply;
use metaroute::gradcheck::{self, SUITE_TOLERANCE};
use metaroute::harness::config::RunConfig;
use metaroute::harness::phantom::{generate_cls_phantoms, generate_phantoms, PhantomSpec};
use metaroute::harness::sweep::run_sweep;
use metaroute::harness::{enumerate_scenarios, run_probe};
use metaroute::metadata::FiLMParams;
use metaroute::ops::masked_softmax;
use metaroute::seg::{combined_loss, train_segmentation, SegBatch, SegModel, SegModelConfig, SegTrainConfig};
use metaroute::tmax::{tmax_block, TokenGrid};
use metaroute::{
    attention_flops, AttentionMode, FilmClassifier, FilmClassifierConfig, ModalityMask, ParamStore, Tensor, TmaxBlock,
    TmaxConfig,
};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn load_config(name: &str) -> RunConfig {
    RunConfig::load(&repo_root().join("configs").join(name)).expect("checked-in config parses")
}

fn masked_attention_exactness() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for avail in enumerate_scenarios() {
        for n in [1usize, 8, 64] {
            for d in [4usize, 16] {
                // q k^T / sqrt(d) for entries in [-2, 2] lies within 4 sqrt(d)
                let r = 4.0 * (d as f64).sqrt();
                let s = Tensor::uniform(&[n, 4], -r, r, &mut rng);
                let mask = ModalityMask::new(avail, n).map_err(|e| e.to_string())?;
                let a = masked_softmax(&s, &mask.additive()).map_err(|e| e.to_string())?;
                for i in 0..n {
                    let row = a.row(i);
                    for j in 0..4 {
                        if !avail[j] {
                            ensure(row[j].to_bits() == 0.0f64.to_bits(), || {
                                format!("pattern {avail:?} N={n} D={d}: entry ({i},{j}) = {:e}", row[j])
                            })?;
                        }
                    }
                    let err = (row.iter().sum::<f64>() - 1.0).abs();
                    worst = worst.max(err);
                    ensure(err <= 1e-12, || format!("row sum off by {err:e}"))?;
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{checked} rows, max |row sum - 1| = {worst:.1e}"))
}

fn subset_oracle_equivalence() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scenarios = enumerate_scenarios();
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let n = 1 + trial % 16;
        let d = [1, 2, 4, 8][trial % 4];
        let avail = scenarios[trial % scenarios.len()];
        let mut store = ParamStore::new();
        let cfg = TmaxConfig::with_dim(d);
        let block = TmaxBlock::new(&mut store, "blk", &cfg, &mut rng).map_err(|e| e.to_string())?;
        // non-trivial norm parameters
        *store.get_mut(block.ln_gain) = Tensor::uniform(&[d], 0.5, 1.5, &mut rng);
        *store.get_mut(block.ln_bias) = Tensor::uniform(&[d], -0.5, 0.5, &mut rng);
        let q = Tensor::uniform(&[n, d], -2.0, 2.0, &mut rng);
        let k = Tensor::uniform(&[4, d], -2.0, 2.0, &mut rng);
        let v = Tensor::uniform(&[4, d], -2.0, 2.0, &mut rng);
        let grid = TokenGrid {
            tokens: q.clone(),
            grid_extent: [n, 1, 1],
            positional: Tensor::zeros(&[n, d]),
        };
        let mask = ModalityMask::new(avail, n).map_err(|e| e.to_string())?;
        let got = tmax_block(&store, &block, &grid, &k, &v, &mask).map_err(|e| e.to_string())?;
        let want = common::block_on_subset(&store, &block, &q, &k, &v, avail);
        let err = got.tokens.max_abs_diff(&want);
        worst = worst.max(err);
        ensure(err <= 1e-12, || format!("trial {trial} (N={n}, D={d}, {avail:?}): max diff {err:e}"))?;
    }
    Ok(format!("100 trials, max entrywise diff {worst:.1e}"))
}

fn missing_modality_isolation() -> Result<String, String> {
    let e = 16;
    let mut model = SegModel::new(SegModelConfig::default(), [e; 3], 3).map_err(|x| x.to_string())?;
    let spec = PhantomSpec {
        extent: e,
        n_samples: 1,
        radius_min: 3.0,
        radius_max: 5.0,
        seed: 3,
        ..PhantomSpec::default()
    };
    let sample = generate_phantoms(&spec).map_err(|x| x.to_string())?.remove(0).batch;
    let table_id = model.modality_table();
    let table = model.store.get(table_id).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut scenarios = 0;
    for avail in enumerate_scenarios().into_iter().filter(|a| a.contains(&false)) {
        let mask = ModalityMask::new(avail, model.n_tokens()).map_err(|x| x.to_string())?;
        let clean = sample.with_availability(mask);
        *model.store.get_mut(table_id) = table.clone();
        let base = model.forward_segment(&clean).map_err(|x| x.to_string())?;

        // Perturb the dictionary rows and raw input channels of every missing modality.
        let mut noisy_table = table.clone();
        let width = table.shape()[1];
        let mut volumes = clean.volumes.clone();
        let per = volumes.numel() / 4;
        for j in (0..4).filter(|&j| !avail[j]) {
            for c in 0..width {
                noisy_table.data_mut()[j * width + c] += rand::Rng::random_range(&mut rng, -50.0..50.0);
            }
            for v in &mut volumes.data_mut()[j * per..(j + 1) * per] {
                *v = rand::Rng::random_range(&mut rng, -10.0..10.0);
            }
        }
        *model.store.get_mut(table_id) = noisy_table;
        let perturbed = SegBatch {
            volumes,
            mask,
            target: clean.target.clone(),
        };
        let out = model.forward_segment(&perturbed).map_err(|x| x.to_string())?;
        ensure(out.logits.bit_eq(&base.logits), || format!("{avail:?}: logits changed"))?;
        ensure(
            out.aux.len() == base.aux.len() && out.aux.iter().zip(&base.aux).all(|(a, b)| a.bit_eq(b)),
            || format!("{avail:?}: auxiliary logits changed"),
        )?;
        scenarios += 1;
    }
    ensure(scenarios == 14, || format!("{scenarios} partial scenarios"))?;

    // Control: the same perturbation on an available modality must show up.
    let mask = ModalityMask::new([true, false, false, false], model.n_tokens()).map_err(|x| x.to_string())?;
    let clean = sample.with_availability(mask);
    *model.store.get_mut(table_id) = table.clone();
    let base = model.forward_segment(&clean).map_err(|x| x.to_string())?;
    model.store.get_mut(table_id).data_mut()[0] += 5.0;
    let moved = model.forward_segment(&clean).map_err(|x| x.to_string())?;
    *model.store.get_mut(table_id) = table;
    ensure(!moved.logits.bit_eq(&base.logits), || "available-row perturbation had no effect".into())?;
    Ok("14 partial scenarios bit-identical at extent 16".into())
}

fn gradient_correctness() -> Result<String, String> {
    let seeds: Vec<u64> = (0..10).collect();
    let results = gradcheck::suite(&seeds).map_err(|e| e.to_string())?;
    let required = [
        "matmul",
        "masked_softmax",
        "layer_norm",
        "conv3d",
        "conv2d",
        "film",
        "tmax_block",
        "combined_loss",
    ];
    for name in required {
        let n = results.iter().filter(|r| r.name == name).count();
        ensure(n == 10, || format!("{name}: {n} seeds checked"))?;
    }
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("nonempty suite");
    ensure(worst.max_rel_error < SUITE_TOLERANCE, || {
        format!("{} at seed {}: {:e}", worst.name, worst.seed, worst.max_rel_error)
    })?;
    Ok(format!(
        "{} checks, worst {} at {:.1e}",
        results.len(),
        worst.name,
        worst.max_rel_error
    ))
}

fn complexity_ratios() -> Result<String, String> {
    let cfg = TmaxConfig::with_dim(512);
    let full = attention_flops(&cfg, 4096, AttentionMode::SelfAttention);
    let cross = attention_flops(&cfg, 4096, AttentionMode::MetadataCross);
    ensure(full.is_multiple_of(cross) && full / cross == 1024, || format!("{full} / {cross} is not 1024"))?;
    let report = compare_bottlenecks(
        &BottleneckConfig::stand_in(AttentionMode::SelfAttention),
        &BottleneckConfig::stand_in(AttentionMode::MetadataCross),
    )
    .map_err(|e| e.to_string())?;
    let cmp = report.comparison.as_ref().ok_or("missing comparison")?;
    let (p, f) = (cmp.params_reduction_pct, cmp.flops_reduction_pct);
    ensure((30.0..=50.0).contains(&p), || format!("param reduction {p}% outside 40 +/- 10"))?;
    ensure((40.0..=60.0).contains(&f), || format!("FLOP reduction {f}% outside 50 +/- 10"))?;
    Ok(format!(
        "1024x attention FLOPs; params {} -> {} ({p:.1}%), FLOPs {} -> {} ({f:.1}%)",
        cmp.baseline_params, report.total_params, cmp.baseline_flops, report.total_flops
    ))
}

fn film_identity_and_arithmetic() -> Result<String, String> {
    let mut model = FilmClassifier::new(FilmClassifierConfig::default(), 6).map_err(|e| e.to_string())?;
    model.zero_film();
    let spec = metaroute::harness::phantom::ClsPhantomSpec {
        n_samples: 6,
        seed: 6,
        ..Default::default()
    };
    let data = generate_cls_phantoms(&spec).map_err(|e| e.to_string())?;
    let refs: Vec<_> = data.iter().collect();
    let with = model.forward_classify(&refs).map_err(|e| e.to_string())?;
    let without = model.forward_image_only(&refs).map_err(|e| e.to_string())?;
    ensure(with.bit_eq(&without), || "zeroed FiLM changed the logits".into())?;

    // one sample, channels [1, 2] and [-3, 0.5], gamma [0.5, -1], beta [0.1, 0.25]
    let x = Tensor::new(&[1, 2, 1, 2], vec![1.0, 2.0, -3.0, 0.5]).map_err(|e| e.to_string())?;
    let params = FiLMParams {
        gamma: Tensor::from_vec(&[2], vec![0.5, -1.0]),
        beta: Tensor::from_vec(&[2], vec![0.1, 0.25]),
    };
    let y = film_apply(&x, &params).map_err(|e| e.to_string())?;
    let want = [1.6, 3.1, 0.25, 0.25];
    for (g, w) in y.data().iter().zip(want) {
        ensure((g - w).abs() <= 1e-15, || format!("got {:?}, want {want:?}", y.data()))?;
    }
    Ok("zeroed FiLM bit-identical; x + gamma x + beta matches by hand".into())
}

fn mean_loss(model: &SegModel, data: &[SegBatch]) -> Result<f64, String> {
    let mut total = 0.0;
    for b in data {
        let out = model.forward_segment(b).map_err(|e| e.to_string())?;
        total += combined_loss(&out.logits, &b.target, &out.aux, 0, 1, &model.cfg).map_err(|e| e.to_string())?;
    }
    Ok(total / data.len() as f64)
}

fn training_smoke_and_trend() -> Result<String, String> {
    let mut lines = Vec::new();
    for seed in [0u64, 1, 2] {
        let spec = PhantomSpec {
            n_samples: 20,
            seed,
            ..PhantomSpec::default()
        };
        let data: Vec<SegBatch> = generate_phantoms(&spec).map_err(|e| e.to_string())?.into_iter().map(|p| p.batch).collect();
        let mut model = SegModel::new(SegModelConfig::default(), [32; 3], seed).map_err(|e| e.to_string())?;
        let before = mean_loss(&model, &data)?;
        let cfg = SegTrainConfig {
            epochs: 10,
            ..SegTrainConfig::default()
        };
        let steps = train_segmentation(&mut model, &data, &cfg, seed).map_err(|e| e.to_string())?.len();
        let after = mean_loss(&model, &data)?;
        ensure(steps == 200, || format!("{steps} steps"))?;
        ensure(after < before, || format!("seed {seed}: loss {before:.4} -> {after:.4}"))?;
        lines.push(format!("{before:.3}->{after:.3}"));
    }

    let cfg = load_config("sweep.toml");
    let (report, _) = run_sweep(&cfg).map_err(|e| e.to_string())?;
    let full = report.full_modality().ok_or("no full-modality scenario")?.mean_dice;
    let best_partial = report
        .scenarios
        .iter()
        .filter(|r| r.availability().contains(&false))
        .map(|r| r.mean_dice)
        .fold(f64::NEG_INFINITY, f64::max);
    ensure(full >= best_partial - 0.02, || {
        format!("full-modality Dice {full:.4} < best partial {best_partial:.4} - 0.02")
    })?;
    Ok(format!(
        "loss {} over 200 steps; full Dice {full:.4} vs best partial {best_partial:.4}",
        lines.join(", ")
    ))
}

fn permutation_probe_sign() -> Result<String, String> {
    let cfg = RunConfig::default();
    let (_, report) = run_probe(&cfg).map_err(|e| e.to_string())?;
    ensure(report.shuffled_accuracy.len() == 20, || "expected 20 trials".into())?;
    ensure(report.delta_ci.0 > 0.0, || {
        format!("delta {:.4}, interval [{:.4}, {:.4}]", report.delta_accuracy, report.delta_ci.0, report.delta_ci.1)
    })?;
    Ok(format!(
        "accuracy {:.4}, delta {:.4}, 95% interval [{:.4}, {:.4}]",
        report.accuracy, report.delta_accuracy, report.delta_ci.0, report.delta_ci.1
    ))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_metaroute"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn same_files(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = std::fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let other = std::fs::read_dir(b).map_err(|e| e.to_string())?.count();
    ensure(names.len() == other, || format!("{} vs {other} files", names.len()))?;
    for n in &names {
        let x = std::fs::read(a.join(n)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(n)).map_err(|e| e.to_string())?;
        ensure(x == y, || format!("{} differs between runs", n.to_string_lossy()))?;
    }
    Ok(names.len())
}

fn determinism() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = repo_root().join("configs/quick.toml");
    let config = config.to_str().ok_or("non-utf8 path")?;
    let mut total = 0;
    for cmd in ["sweep", "complexity"] {
        let dirs = [tmp.path().join(format!("{cmd}1")), tmp.path().join(format!("{cmd}2"))];
        for d in &dirs {
            run_cli(&[cmd, "--config", config, "--out", d.to_str().ok_or("non-utf8 path")?])?;
        }
        total += same_files(&dirs[0], &dirs[1])?;
    }
    Ok(format!("{total} output files byte-identical across two runs"))
}

fn main() {
    let criteria: [(u32, &str, Duration, Check); 9] = [
        (1, "masked-attention exactness", Duration::from_secs(1), masked_attention_exactness),
        (2, "subset-oracle equivalence", Duration::from_secs(10), subset_oracle_equivalence),
        (3, "missing-modality isolation", Duration::from_secs(30), missing_modality_isolation),
        (4, "gradient correctness", Duration::from_secs(60), gradient_correctness),
        (5, "complexity ratios", Duration::from_secs(1), complexity_ratios),
        (6, "FiLM identity and arithmetic", Duration::from_secs(1), film_identity_and_arithmetic),
        (7, "training smoke and trend", Duration::from_secs(600), training_smoke_and_trend),
        (8, "permutation probe sign", Duration::from_secs(300), permutation_probe_sign),
        (9, "determinism", Duration::from_secs(600), determinism),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, budget, check) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let result = match result {
            Ok(msg) if took > budget => Err(format!("{msg}; took {took:.1?}, budget {budget:?}")),
            other => other,
        };
        match result {
            Ok(msg) => println!("PASS criterion {id}: {name}: {msg} ({took:.2?})"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {id}: {name}: {msg} ({took:.2?})");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
