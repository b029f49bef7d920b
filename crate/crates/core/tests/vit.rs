use proptest::prelude::*;
use proptest::test_runner::RngSeed;

use vitlab::analysis::feature_map;
use vitlab::checkpoint::{model_to_archive, DataConfig};
use vitlab::data::{make_synthetic, Preprocess, Split};
use vitlab::vit::{
    interpolate_pos_embed, interpolation_matrix, train_classifier, Capture, ForwardOptions,
    ModelTrainConfig, ViTConfig, ViTModel,
};
use vitlab::Tensor;

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn image(side: usize, seed: u64) -> Tensor {
    let data = (0..side * side * 3).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 500.0 - 1.0).collect();
    Tensor::new(vec![side, side, 3], data).unwrap()
}

fn tiny(registers: usize, use_cls: bool) -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        num_registers: registers,
        use_cls,
        ..ViTConfig::micro(0, 3)
    }
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 32,
        rng_seed: RngSeed::Fixed(42),
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn sequence_layout_and_attention_mass(registers in 0..5usize, use_cls: bool, scale in 1..4usize, seed: u64) {
        let model = ViTModel::init(tiny(registers, use_cls), seed).unwrap();
        let side = 4 * (2 + scale);
        let acts = model.forward(&image(side, seed), Capture::ALL).unwrap();
        let n = (2 + scale) * (2 + scale);
        let s = usize::from(use_cls) + registers + n;
        prop_assert_eq!(acts.layout.seq_len(), s);
        prop_assert_eq!(acts.tokens.dims(), &[s, 8][..]);
        prop_assert_eq!(acts.patch_tokens().count(), n);
        prop_assert_eq!(acts.register_outputs().len(), registers);
        prop_assert_eq!(acts.cls_output().is_some(), use_cls);
        prop_assert_eq!(acts.attention.len(), 2);
        for attn in &acts.attention {
            prop_assert_eq!(attn.dims(), &[2, s, s][..]);
            for row in attn.data().chunks_exact(s) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
        for b in &acts.blocks {
            for t in [&b.q, &b.k, &b.v, &b.out] {
                prop_assert_eq!(t.dims(), &[s, 8][..]);
            }
        }
    }

    #[test]
    fn interpolation_rows_are_convex(g_old in 1..7usize, g_new in 1..9usize) {
        let m = interpolation_matrix(g_old, g_new).unwrap();
        for row in m.data().chunks_exact(g_old * g_old) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&w| (0.0..=1.0 + 1e-12).contains(&w)));
        }
    }

    #[test]
    fn same_grid_interpolation_is_identity(g in 1..7usize, d in 1..5usize, seed: u64) {
        let data: Vec<f64> = (0..g * g * d).map(|i| ((i as u64 ^ seed) % 97) as f64 / 13.0).collect();
        let pos = Tensor::new(vec![g, g, d], data).unwrap();
        let back = interpolate_pos_embed(&pos, g).unwrap();
        for (a, b) in back.data().iter().zip(pos.data()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn zero_masked_registers_reproduce_the_register_free_model() {
    for use_cls in [true, false] {
        let base = ViTModel::init(tiny(0, use_cls), 7).unwrap();
        let mut with_regs = base.clone();
        with_regs.config.num_registers = 3;
        with_regs.params.registers = Some(Tensor::zeros(&[3, 8]));
        let x = image(16, 3);
        let opts = ForwardOptions {
            capture: Capture::default(),
            mask_register_keys: true,
        };
        let a = base.forward(&x, Capture::default()).unwrap();
        let b = with_regs.forward(&x, opts).unwrap();
        let pa: Vec<f64> = a.patch_tokens().flatten().copied().collect();
        let pb: Vec<f64> = b.patch_tokens().flatten().copied().collect();
        let worst = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-12, "patch tokens differ by {worst}");
        let fa = feature_map(&a).unwrap();
        let fb = feature_map(&b).unwrap();
        for (x, y) in fa.values.iter().zip(&fb.values) {
            assert!((x - y).abs() <= 1e-12);
        }
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!((x - y).abs() <= 1e-12);
        }

        let unmasked = with_regs.forward(&x, Capture::default()).unwrap();
        let pu: Vec<f64> = unmasked.patch_tokens().flatten().copied().collect();
        assert_ne!(bits(&pa), bits(&pu), "unmasked zero registers should still absorb attention");
    }
}

#[test]
fn init_and_forward_are_deterministic() {
    let cfg = ViTConfig::micro(4, 8);
    let a = ViTModel::init(cfg.clone(), 42).unwrap();
    let b = ViTModel::init(cfg.clone(), 42).unwrap();
    assert_eq!(model_to_archive(&a).to_bytes(), model_to_archive(&b).to_bytes());
    let c = ViTModel::init(cfg, 43).unwrap();
    assert_ne!(model_to_archive(&a).to_bytes(), model_to_archive(&c).to_bytes());

    let x = image(32, 1);
    let fa = a.forward(&x, Capture::ALL).unwrap();
    let fb = a.forward(&x, Capture::ALL).unwrap();
    assert_eq!(bits(fa.tokens.data()), bits(fb.tokens.data()));
    assert_eq!(bits(&fa.logits), bits(&fb.logits));
    for (x, y) in fa.attention.iter().zip(&fb.attention) {
        assert_eq!(bits(x.data()), bits(y.data()));
    }
}

#[test]
fn native_resolution_skips_interpolation() {
    let model = ViTModel::init(ViTConfig::micro(2, 8), 5).unwrap();
    let x = image(32, 9);
    let native = model.forward(&x, Capture::default()).unwrap();

    // Same model with the positional table replaced by its own same-grid
    // interpolation: identical up to rounding.
    let mut resampled = model.clone();
    let d = model.config.embed_dim;
    let g = model.config.grid();
    let pos = model.params.pos_embed.data();
    let grid = Tensor::new(vec![g, g, d], pos[d..].to_vec()).unwrap();
    let back = interpolate_pos_embed(&grid, g).unwrap();
    resampled.params.pos_embed.data_mut()[d..].copy_from_slice(back.data());
    let other = resampled.forward(&x, Capture::default()).unwrap();
    for (a, b) in native.tokens.data().iter().zip(other.tokens.data()) {
        assert!((a - b).abs() <= 1e-9);
    }
}

#[test]
fn higher_resolution_grows_the_grid() {
    let model = ViTModel::init(ViTConfig::micro(4, 8), 5).unwrap();
    let acts = model.forward(&image(48, 2), Capture::ALL).unwrap();
    assert_eq!(acts.layout.grid, 6);
    assert_eq!(acts.layout.seq_len(), 1 + 4 + 36);
    assert!(acts.tokens.is_finite());
    assert!(feature_map(&acts).unwrap().values.len() == 36);
    assert!(model.forward(&image(30, 2), Capture::default()).is_err());
}

#[test]
fn classifier_trains_above_chance() {
    let cfg = DataConfig::default();
    let load = |split| {
        let ds = make_synthetic(&cfg.synthetic(split, 42)).unwrap();
        (0..ds.len())
            .map(|i| (Preprocess::default().apply(&ds.image(i).unwrap(), 32).unwrap(), ds.label(i)))
            .collect::<Vec<_>>()
    };
    let (train, val) = (load(Split::Train), load(Split::Val));
    // 128 images in batches of 16: 25 epochs is 200 optimizer steps.
    let mut tcfg = ModelTrainConfig {
        epochs: 25,
        ..ModelTrainConfig::default()
    };
    // The toy default of 3e-3 overshoots once the training loss nears zero.
    tcfg.optimizer.lr = 1e-3;
    for r in [0, 4] {
        let mut model = ViTModel::init(ViTConfig::micro(r, 8), 42).unwrap();
        let hist = train_classifier(&mut model, &train, &val, &tcfg).unwrap();
        let acc = hist.last().unwrap().val_accuracy.unwrap();
        let losses: Vec<f64> = hist.iter().map(|e| e.train_loss).collect();
        assert!(acc > 2.0 / 8.0, "R={r}: val accuracy {acc}");
        for e in 0..losses.len() - 2 {
            assert!(losses[e + 2] <= losses[e], "R={r}: loss rose from epoch {e}: {losses:?}");
        }
    }
}
