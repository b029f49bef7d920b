//! Acceptance suite: one line per criterion, non-zero exit on any failure.
//!
//! Run with `cargo test -p vitlab-core --test acceptance`.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use vitlab::analysis::{
    attention_map_pooled, background_patches, bimodality_coefficient, feature_map,
    mean_neighbor_cosine, norm_distribution, outlier_threshold, AnalysisConfig, BIMODAL_THRESHOLD,
};
use vitlab::autograd::Stencil;
use vitlab::carbon::{carbon_estimate, CarbonParams};
use vitlab::checkpoint::{model_from_archive, model_to_archive, DataConfig, TensorArchive};
use vitlab::data::{make_synthetic, Dataset, Preprocess, Split, SyntheticSpec};
use vitlab::optim::OptimizerKind;
use vitlab::probe::{
    build_representation, center_baseline, eval_position, extract_probe_dataset,
    extract_representation_dataset, train_linear_probe, train_probe_with_validation, ProbeDataset,
    ProbeTask, ReprKind, Targets, TokenCategory, TrainConfig,
};
use vitlab::vit::{
    grad_check_model, pooled_representation, train_classifier, Activations, Capture,
    ModelTrainConfig, SequenceLayout, ViTConfig, ViTModel,
};
use vitlab::Tensor;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

const SEED: u64 = 42;

// ---------------------------------------------------------------- 1, 2

fn carbon() -> Check {
    let kg = carbon_estimate(&CarbonParams { carbon_intensity: 0.37, pue: 1.19, power_kw: 0.805, hours: 260.42 })
        .map_err(e2s)?;
    ensure((kg - 92.30).abs() <= 0.01, || format!("got {kg}"))?;
    Ok(format!("{kg:.4} kg"))
}

fn baselines() -> Check {
    let (b14, b37) = (center_baseline(14), center_baseline(37));
    ensure((b14 - 5.35).abs() <= 0.02, || format!("G=14 gave {b14}"))?;
    ensure((b37 - 14.15).abs() <= 0.05, || format!("G=37 gave {b37}"))?;
    Ok(format!("G=14 {b14:.4}, G=37 {b37:.4}"))
}

// ---------------------------------------------------------------- 3

fn gradients() -> Check {
    let cfg = ViTConfig::micro(4, 8);
    ensure(
        (cfg.depth, cfg.embed_dim, cfg.heads, cfg.patch_size, cfg.image_size, cfg.num_registers) == (2, 32, 4, 8, 32, 4),
        || format!("unexpected micro config {cfg:?}"),
    )?;
    let model = ViTModel::init(cfg, SEED).map_err(e2s)?;
    let ds = make_synthetic(&DataConfig::default().synthetic(Split::Train, SEED)).map_err(e2s)?;
    let x = Preprocess::default().apply(&ds.image(0).map_err(e2s)?, 32).map_err(e2s)?;
    let report = grad_check_model(&model, &[(x, ds.label(0))], 1e-3, Stencil::FivePoint).map_err(e2s)?;
    ensure(report.max_rel_error < 1e-4, || format!("{report:?}"))?;
    Ok(format!("max rel error {:.2e} over {} parameters", report.max_rel_error, model.num_parameters()))
}

// ---------------------------------------------------------------- 4

/// Mean cosine over the cells at Manhattan distance one, found by scanning
/// the whole grid.
fn brute_neighbor_cosine(emb: &[Vec<f64>], g: usize) -> Vec<f64> {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };
    (0..g * g)
        .map(|i| {
            let (r, c) = ((i / g) as i64, (i % g) as i64);
            let mut vals = Vec::new();
            for j in 0..g * g {
                let (r2, c2) = ((j / g) as i64, (j % g) as i64);
                if (r - r2).abs() + (c - c2).abs() == 1 {
                    vals.push(cos(&emb[i], &emb[j]));
                }
            }
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect()
}

fn oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let instances = 200;
    for t in 0..instances {
        let g = rng.random_range(2..=4);
        let d = rng.random_range(1..=5);
        let emb: Vec<Vec<f64>> = (0..g * g)
            .map(|_| {
                if rng.random_bool(0.05) {
                    vec![0.0; d]
                } else {
                    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
                }
            })
            .collect();
        let tensor = Tensor::new(vec![g, g, d], emb.concat()).map_err(e2s)?;
        let got = mean_neighbor_cosine(&tensor, false).map_err(e2s)?;
        for (k, want) in brute_neighbor_cosine(&emb, g).iter().enumerate() {
            let v = got.values[k].ok_or("missing value")?;
            ensure((v - want).abs() <= 1e-12, || format!("cosine instance {t} cell {k}: {v} vs {want}"))?;
        }
    }
    for t in 0..instances {
        let (h, r, g) = (rng.random_range(1..=3), rng.random_range(0..=2), rng.random_range(1..=3));
        let n = g * g;
        let s = r + n;
        let mut attn = vec![0.0; h * s * s];
        for row in attn.chunks_exact_mut(s) {
            let w: Vec<f64> = (0..s).map(|_| rng.random_range(0.01..1.0)).collect();
            let z: f64 = w.iter().sum();
            row.iter_mut().zip(&w).for_each(|(o, x)| *o = x / z);
        }
        let acts = Activations {
            layout: SequenceLayout { use_cls: false, num_registers: r, grid: g },
            attention: vec![Tensor::new(vec![h, s, s], attn.clone()).map_err(e2s)?],
            blocks: Vec::new(),
            tokens: Tensor::zeros(&[s, 1]),
            representation: vec![0.0],
            logits: vec![0.0],
        };
        let got = attention_map_pooled(&acts).map_err(e2s)?;
        for p in 0..n {
            let mut total = 0.0;
            for head in 0..h {
                for q in 0..s {
                    total += attn[head * s * s + q * s + r + p];
                }
            }
            let want = total / (h * s) as f64;
            ensure((got.values[p] - want).abs() <= 1e-12, || format!("attention instance {t} patch {p}"))?;
        }
    }
    for t in 0..instances {
        let n = rng.random_range(1..=60);
        let q = rng.random_range(0.5..99.5);
        let ties = rng.random_bool(0.3);
        let x: Vec<f64> = (0..n)
            .map(|_| if ties { rng.random_range(0..5) as f64 } else { rng.random_range(-3.0..3.0) })
            .collect();
        let (tau, mask) = outlier_threshold(&x, q).map_err(e2s)?;
        // Independent quantile: the value below which a fraction q of the
        // order statistics' index range falls, interpolated linearly.
        let mut desc = x.clone();
        desc.sort_by(|a, b| b.total_cmp(a));
        let pos = (1.0 - q / 100.0) * (n - 1) as f64;
        let (hi_i, frac) = (pos.floor() as usize, pos - pos.floor());
        let lo_i = (hi_i + 1).min(n - 1);
        let want_tau = desc[hi_i] + (desc[lo_i] - desc[hi_i]) * frac;
        ensure((tau - want_tau).abs() <= 1e-12 * (1.0 + tau.abs()), || format!("threshold instance {t}: {tau} vs {want_tau}"))?;
        for (i, &m) in mask.iter().enumerate() {
            let strictly_below = x.iter().filter(|&&v| v < x[i]).count();
            let rank_ok = if m { x[i] > want_tau } else { x[i] <= want_tau };
            ensure(rank_ok, || format!("rank instance {t} element {i} (rank {strictly_below})"))?;
        }
    }
    Ok(format!("{instances} instances each"))
}

// ---------------------------------------------------------------- 5

fn calibration() -> Check {
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let base: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut planted = vec![false; n];
    let mut chosen = 0;
    while chosen < n / 50 {
        let i = rng.random_range(0..n);
        if !planted[i] {
            planted[i] = true;
            chosen += 1;
        }
    }
    let tailed: Vec<f64> = base.iter().zip(&planted).map(|(v, &p)| if p { v + 10.0 } else { *v }).collect();
    let (_, mask) = outlier_threshold(&tailed, 98.0).map_err(e2s)?;
    let misses = mask.iter().zip(&planted).filter(|(a, b)| a != b).count();
    ensure(misses == 0, || format!("{misses} tokens disagree with the planted tail"))?;
    let (_, clean) = outlier_threshold(&base, 98.0).map_err(e2s)?;
    let frac = clean.iter().filter(|&&m| m).count() as f64 / n as f64;
    ensure((frac - 0.02).abs() <= 0.003, || format!("tail-free fraction {frac}"))?;
    Ok(format!("planted set recovered, tail-free fraction {:.2}%", 100.0 * frac))
}

// ---------------------------------------------------------------- 6

fn registers() -> Check {
    let base = ViTModel::init(ViTConfig::micro(0, 8), SEED).map_err(e2s)?;
    let mut with_regs = base.clone();
    with_regs.config.num_registers = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let regs: Vec<f64> = (0..4 * 32).map(|_| 0.02 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
    with_regs.params.registers = Some(Tensor::new(vec![4, 32], regs).map_err(e2s)?);
    let ds = make_synthetic(&DataConfig::default().synthetic(Split::Val, SEED)).map_err(e2s)?;
    let x = Preprocess::default().apply(&ds.image(0).map_err(e2s)?, 32).map_err(e2s)?;
    let a0 = base.forward(&x, Capture::ALL).map_err(e2s)?;
    let a4 = with_regs.forward(&x, Capture::ALL).map_err(e2s)?;
    let n = 16;
    ensure(a0.layout.seq_len() == 1 + n && a4.layout.seq_len() == 5 + n, || "sequence lengths".into())?;
    ensure(a0.tokens.dims()[0] == 1 + n && a4.tokens.dims()[0] == 5 + n, || "token rows".into())?;
    ensure(a0.patch_tokens().count() == n && a4.patch_tokens().count() == n, || "patch outputs".into())?;
    let mut worst = 0.0f64;
    for acts in [&a0, &a4] {
        for attn in &acts.attention {
            for row in attn.data().chunks_exact(acts.layout.seq_len()) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure(worst <= 1e-9, || format!("attention row sum off by {worst}"))?;

    let fm = feature_map(&a4).map_err(e2s)?;
    let pooled = pooled_representation(&a4);
    let mut mutated = a4.clone();
    let d = mutated.tokens.dims()[1];
    for r in mutated.layout.register_rows() {
        mutated.tokens.data_mut()[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = 1e6);
    }
    ensure(feature_map(&mutated).map_err(e2s)? == fm, || "feature map read a register row".into())?;
    ensure(pooled_representation(&mutated) == pooled, || "pooled representation read a register row".into())?;
    let mut patched = a4.clone();
    let first_patch = patched.layout.patch_offset();
    patched.tokens.data_mut()[first_patch * d] += 1.0;
    ensure(feature_map(&patched).map_err(e2s)? != fm, || "mutation of a patch row went unnoticed".into())?;
    Ok(format!("S {} -> {}, {n} patch outputs, row sums within {worst:.1e}", a0.layout.seq_len(), a4.layout.seq_len()))
}

// ---------------------------------------------------------------- 7

struct Trained {
    models: Vec<ViTModel>,
    accuracies: Vec<f64>,
    deterministic: bool,
}

fn images(ds: &Dataset, side: usize) -> Vec<(Tensor, usize)> {
    (0..ds.len())
        .map(|i| (Preprocess::default().apply(&ds.image(i).unwrap(), side).unwrap(), ds.label(i)))
        .collect()
}

fn splits() -> (Dataset, Dataset) {
    let cfg = DataConfig::default();
    (
        make_synthetic(&cfg.synthetic(Split::Train, SEED)).unwrap(),
        make_synthetic(&cfg.synthetic(Split::Val, SEED)).unwrap(),
    )
}

fn trained() -> &'static Result<Trained, String> {
    static CELL: OnceLock<Result<Trained, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let (train_ds, val_ds) = splits();
        let (train, val) = (images(&train_ds, 32), images(&val_ds, 32));
        let cfg = ModelTrainConfig::default();
        let mut models = Vec::new();
        let mut accuracies = Vec::new();
        for r in [0, 4] {
            let mut m = ViTModel::init(ViTConfig::micro(r, 8), SEED).map_err(e2s)?;
            let hist = train_classifier(&mut m, &train, &val, &cfg).map_err(e2s)?;
            accuracies.push(hist.last().and_then(|e| e.val_accuracy).ok_or("no validation accuracy")?);
            models.push(m);
        }
        let mut again = ViTModel::init(ViTConfig::micro(4, 8), SEED).map_err(e2s)?;
        train_classifier(&mut again, &train, &val, &cfg).map_err(e2s)?;
        let deterministic = model_to_archive(&again).to_bytes() == model_to_archive(&models[1]).to_bytes();
        Ok(Trained { models, accuracies, deterministic })
    })
}

fn toy_training() -> Check {
    let (train, val) = splits();
    ensure(train.len() == 128 && val.len() == 64 && train.num_classes == 8, || "dataset sizes".into())?;
    ensure(ModelTrainConfig::default().epochs == 5, || "epoch count".into())?;
    let t = trained().as_ref().map_err(Clone::clone)?;
    for (r, acc) in [0, 4].iter().zip(&t.accuracies) {
        ensure(*acc >= 0.35, || format!("R={r} val accuracy {acc}"))?;
    }
    ensure(t.deterministic, || "two runs with one seed gave different weights".into())?;
    Ok(format!("val accuracy R=0 {:.3}, R=4 {:.3}; reruns bitwise equal", t.accuracies[0], t.accuracies[1]))
}

// ---------------------------------------------------------------- 8

/// Random features, random labels: the probe can only memorise, so
/// validation accuracy peaks early and patience has to kick in.
fn overfit_sets(seed: u64) -> (ProbeDataset, ProbeDataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (width, classes) = (48, 4);
    let mut make = |rows: usize| {
        let x: Vec<f64> = (0..rows * width).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        ProbeDataset::new(
            ProbeTask::Classification,
            Tensor::new(vec![rows, width], x).unwrap(),
            Targets::Class(y),
            vec![TokenCategory::Normal; rows],
            vec![1.0; rows],
            (0..rows).collect(),
            1,
            classes,
        )
        .unwrap()
    };
    (make(40), make(200))
}

fn early_stopping() -> Result<String, String> {
    let (train, val) = overfit_sets(SEED);
    let cfg = TrainConfig {
        max_epochs: 200,
        patience: Some(3),
        batch_size: 8,
        ..TrainConfig::for_task(ProbeTask::Classification)
    };
    let mut heads = Vec::new();
    let (head, hist) = train_probe_with_validation(&train, Some(&val), &cfg, |_, h| heads.push(h.clone())).map_err(e2s)?;
    ensure(hist.stopped_early, || "the run never stopped early".into())?;
    let metrics: Vec<f64> = hist.epochs.iter().map(|e| e.val_metric.unwrap()).collect();
    let best = metrics.iter().enumerate().fold(0, |b, (i, &m)| if m > metrics[b] { i } else { b });
    ensure(hist.best_epoch == best, || format!("best epoch {} but validation peaked at {best}", hist.best_epoch))?;
    ensure(hist.epochs.len() == best + 4, || format!("stopped after {} epochs, best {best}", hist.epochs.len()))?;
    ensure(heads[best] == head, || "returned head is not the best epoch's".into())?;
    ensure(heads.last() != Some(&head), || "final head equals best head, nothing was restored".into())?;
    Ok(format!("stopped at epoch {}, restored epoch {best}", hist.epochs.len() - 1))
}

const PROBE_IMAGES_PER_CLASS: usize = 256;

fn position_probe() -> Check {
    let t = trained().as_ref().map_err(Clone::clone)?;
    let model = &t.models[0];
    let (_, val_ds) = splits();
    // A fixed-step probe needs more rows than the classifier's 128 images.
    let train_ds = make_synthetic(&SyntheticSpec {
        num_classes: 8,
        per_class: PROBE_IMAGES_PER_CLASS,
        image_size: 32,
        seed: SEED * 1000 + 3,
        split: Split::Train,
    })
    .map_err(e2s)?;
    let pre = Preprocess::default();
    let acfg = AnalysisConfig::default();
    let train_stats = norm_distribution(model, &train_ds, &pre, &acfg, SEED).map_err(e2s)?;
    let val_stats = norm_distribution(model, &val_ds, &pre, &acfg, SEED).map_err(e2s)?;
    let train = extract_probe_dataset(model, &train_ds, &pre, ProbeTask::Position, &train_stats, SEED).map_err(e2s)?;
    let val = extract_probe_dataset(model, &val_ds, &pre, ProbeTask::Position, &val_stats, SEED).map_err(e2s)?;
    let (head, _) = train_linear_probe(&train, &TrainConfig::for_task(ProbeTask::Position)).map_err(e2s)?;
    let normal = val.restrict(TokenCategory::Normal).map_err(e2s)?;
    let m = eval_position(&head, &normal).map_err(e2s)?;
    let g = model.config.grid();
    let chance = 1.0 / (g * g) as f64;
    ensure(m.top1 > 3.0 * chance, || format!("top1 {} vs 3x chance {}", m.top1, 3.0 * chance))?;
    ensure(m.mean_distance < center_baseline(g), || format!("distance {} vs baseline {}", m.mean_distance, center_baseline(g)))?;
    let es = early_stopping()?;
    Ok(format!(
        "normal top1 {:.3} (chance {chance:.4}), distance {:.3} < {:.3}; {es}",
        m.top1,
        m.mean_distance,
        center_baseline(g)
    ))
}

// ---------------------------------------------------------------- 9

fn redundancy() -> Check {
    let t = trained().as_ref().map_err(Clone::clone)?;
    let model = &t.models[0];
    let (train_ds, _) = splits();
    let (mut bg, mut tex) = (Vec::new(), Vec::new());
    for i in 0..train_ds.len() {
        let item = &train_ds.items[i];
        let pixels = item.background.as_ref().ok_or("synthetic item without background mask")?;
        let patches = background_patches(pixels, 32, 8).map_err(e2s)?;
        let x = Preprocess::default().apply(&train_ds.image(i).map_err(e2s)?, 32).map_err(e2s)?;
        let acts = model.forward(&x, Capture::default()).map_err(e2s)?;
        let emb = Tensor::new(vec![4, 4, 32], acts.patch_tokens().flatten().copied().collect()).map_err(e2s)?;
        let nc = mean_neighbor_cosine(&emb, false).map_err(e2s)?;
        for (v, is_bg) in nc.values.iter().zip(&patches) {
            if let Some(v) = v {
                if *is_bg { bg.push(*v) } else { tex.push(*v) }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    ensure(!bg.is_empty() && !tex.is_empty(), || "no background or textured patches".into())?;
    let (mb, mt) = (mean(&bg), mean(&tex));
    ensure(mb > mt, || format!("background {mb} <= textured {mt}"))?;
    Ok(format!("background {mb:.4} ({} patches) > textured {mt:.4} ({} patches)", bg.len(), tex.len()))
}

// ---------------------------------------------------------------- 10

fn bimodality() -> Check {
    let n = 10_000;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mix: Vec<f64> = (0..n)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut rng);
                if i % 2 == 0 { z } else { z + 6.0 }
            })
            .collect();
        let single: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let bm = bimodality_coefficient(&mix).map_err(e2s)?;
        let bs = bimodality_coefficient(&single).map_err(e2s)?;
        ensure(bm.bimodal && bm.coefficient > BIMODAL_THRESHOLD, || format!("seed {seed}: mixture BC {}", bm.coefficient))?;
        ensure(!bs.bimodal, || format!("seed {seed}: Gaussian BC {}", bs.coefficient))?;
        lo = lo.min(bm.coefficient);
        hi = hi.max(bs.coefficient);
    }
    Ok(format!("mixture BC >= {lo:.3}, Gaussian BC <= {hi:.3}, threshold {BIMODAL_THRESHOLD:.4}"))
}

// ---------------------------------------------------------------- 11

fn round_trip() -> Check {
    let model = ViTModel::init(ViTConfig::micro(4, 8), SEED).map_err(e2s)?;
    let bytes = model_to_archive(&model).to_bytes();
    let back = model_from_archive(&TensorArchive::from_bytes(&bytes).map_err(e2s)?).map_err(e2s)?;
    let ds = make_synthetic(&DataConfig::default().synthetic(Split::Val, SEED)).map_err(e2s)?;
    for i in 0..4 {
        let x = Preprocess::default().apply(&ds.image(i).map_err(e2s)?, 32).map_err(e2s)?;
        let (a, b) = (model.forward(&x, Capture::ALL).map_err(e2s)?, back.forward(&x, Capture::ALL).map_err(e2s)?);
        let same = a.logits.iter().zip(&b.logits).all(|(x, y)| x.to_bits() == y.to_bits())
            && a.tokens.data().iter().zip(b.tokens.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || format!("image {i}: reloaded model differs"))?;
    }

    // Header: magic, version, count, then per entry name, dtype, dims, offset.
    let header_len = 12 + 4 + "patch_embed.weight".len() + 4 + 4 + 16 + 8 + 64;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut errors, mut accepted, mut crashes) = (0, 0, 0);
    for _ in 0..1000 {
        let mut fuzzed = bytes.clone();
        match rng.random_range(0..4) {
            0 => {
                for _ in 0..rng.random_range(1..=4) {
                    let at = rng.random_range(0..header_len);
                    fuzzed[at] = rng.random();
                }
            }
            1 => {
                let at = rng.random_range(4..header_len - 8) & !3;
                fuzzed[at..at + 8].copy_from_slice(&rng.random::<u64>().to_le_bytes());
            }
            2 => fuzzed.truncate(rng.random_range(0..header_len)),
            _ => {
                let at = rng.random_range(12..header_len);
                fuzzed[at..at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
            }
        }
        match catch_unwind(AssertUnwindSafe(|| TensorArchive::from_bytes(&fuzzed).map(|a| model_from_archive(&a).is_ok()))) {
            Ok(Err(e)) if !e.to_string().is_empty() => errors += 1,
            Ok(Err(_)) => crashes += 1,
            Ok(Ok(_)) => accepted += 1,
            Err(_) => crashes += 1,
        }
    }
    ensure(crashes == 0, || format!("{crashes} panics"))?;
    Ok(format!("forward bitwise equal; 1000 fuzzed headers: {errors} errors, {accepted} parsed, 0 panics"))
}

// ---------------------------------------------------------------- 12

fn representations() -> Check {
    let (d, r) = (32, 4);
    let model = ViTModel::init(ViTConfig::micro(r, 8), SEED).map_err(e2s)?;
    let (train_ds, val_ds) = splits();
    let x = Preprocess::default().apply(&train_ds.image(0).map_err(e2s)?, 32).map_err(e2s)?;
    let acts = model.forward(&x, Capture::default()).map_err(e2s)?;
    for (kind, want) in [(ReprKind::ClsPm, 2 * d), (ReprKind::ClsPmReg, (2 + r) * d), (ReprKind::PmReg, (1 + r) * d)] {
        let got = build_representation(&acts, kind).map_err(e2s)?.len();
        ensure(got == want, || format!("{kind}: width {got}, want {want}"))?;
    }

    let pre = Preprocess::default();
    let train = extract_representation_dataset(&model, &train_ds, &pre, ReprKind::ClsPmReg).map_err(e2s)?;
    let val = extract_representation_dataset(&model, &val_ds, &pre, ReprKind::ClsPmReg).map_err(e2s)?;
    let cfg = TrainConfig::representation();
    let opt = cfg.optimizer();
    ensure(opt.kind == OptimizerKind::Sgd && cfg.max_epochs == 20 && cfg.cosine_schedule && cfg.patience.is_none(), || {
        format!("protocol {cfg:?}")
    })?;
    let mut lrs = Vec::new();
    let (_, hist) = train_probe_with_validation(&train, Some(&val), &cfg, |e, _| lrs.push(e.lr)).map_err(e2s)?;
    ensure(hist.epochs.len() == 20 && lrs.len() == 20, || format!("{} epochs", hist.epochs.len()))?;
    let mut worst = 0.0f64;
    for (e, &lr) in lrs.iter().enumerate() {
        let closed = opt.lr * (1.0 + (PI * e as f64 / 20.0).cos()) / 2.0;
        worst = worst.max((lr - closed).abs());
    }
    ensure(worst <= 1e-12, || format!("lr off the closed form by {worst}"))?;
    ensure(lrs.windows(2).all(|w| w[1] <= w[0]), || "lr not monotone".into())?;
    Ok(format!("widths 2D/(2+R)D/(1+R)D; 20 SGD epochs, lr {:.4} -> {:.2e}, max deviation {worst:.1e}", lrs[0], lrs[19]))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(u8, &str, fn() -> Check, Duration); 12] = [
        (1, "carbon formula", carbon, Duration::from_secs(1)),
        (2, "center baselines", baselines, Duration::from_secs(1)),
        (3, "gradient fidelity", gradients, Duration::from_secs(60)),
        (4, "oracle equivalence", oracles, Duration::from_secs(60)),
        (5, "outlier calibration", calibration, Duration::from_secs(1)),
        (6, "register structure", registers, Duration::from_secs(60)),
        (7, "toy training", toy_training, Duration::from_secs(600)),
        (8, "probe protocol", position_probe, Duration::from_secs(300)),
        (9, "redundancy direction", redundancy, Duration::from_secs(60)),
        (10, "bimodality", bimodality, Duration::from_secs(1)),
        (11, "round trip and fuzzing", round_trip, Duration::from_secs(60)),
        (12, "representation widths", representations, Duration::from_secs(300)),
    ];
    let mut failed = 0;
    for (id, name, check, budget) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(_) if took > budget => Err(format!("took {took:.1?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("[PASS] {id:>2} {name}: {detail} ({took:.1?})"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {id:>2} {name}: {why} ({took:.1?})");
            }
        }
    }
    println!("{} of 12 criteria passed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
