use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::lora::{apply_regime, Regime};

fn within(actual: usize, target: f64, tol: f64) -> bool {
    ((actual as f64 - target) / target).abs() <= tol
}

fn random_batch<T: Real>(n: usize, res: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 3 * res * res).map(|_| T::of(rng.random::<f64>())).collect();
    Tensor::new(vec![n, 3, res, res], data).unwrap()
}

/// Independent closed form for ViT parameter counts.
fn vit_formula(d: usize, depth: usize, p: usize, res: usize) -> usize {
    let n = (res / p) * (res / p);
    let m = 4 * d;
    let block = 4 * d + 4 * (d * d + d) + d * m + m + m * d + d;
    (3 * p * p * d + d) + d + (n + 1) * d + depth * block + 2 * d + (2 * 2 * d + 2)
}

/// Independent closed form for Swin parameter counts.
fn swin_formula(cfg: &ModelConfig) -> usize {
    let p = cfg.patch_size;
    let mut total = 3 * p * p * cfg.embed_dim + cfg.embed_dim + 2 * cfg.embed_dim;
    let mut side = cfg.input_resolution / p;
    let stages = cfg.depths.len();
    for s in 0..stages {
        let c = cfg.embed_dim << s;
        let w = cfg.window_size.min(side);
        let block = 4 * c + 4 * (c * c + c) + 8 * c * c + 4 * c + c + (2 * w - 1).pow(2) * cfg.heads[s];
        total += cfg.depths[s] * block;
        if s + 1 < stages {
            total += 2 * 4 * c + 4 * c * 2 * c;
        }
        side /= 2;
    }
    let last = cfg.embed_dim << (stages - 1);
    total + 2 * last + 2 * last + 2
}

#[test]
fn preset_budgets() {
    for (name, target) in [
        ("dinov2-small-shape", 22e6),
        ("dinov2-base-shape", 86.5e6),
        ("swin-small-shape", 49e6),
        ("swin-base-shape", 87.9e6),
    ] {
        let m = Model::<f32>::shape_only(&ModelConfig::preset(name).unwrap()).unwrap();
        let n = m.count_params(false);
        assert!(within(n, target, 0.03), "{name}: {n}");
        assert_eq!(n, m.count_params(false));
    }
}

#[test]
fn closed_form_counts() {
    let toy = Model::<f32>::build(&ModelConfig::preset("toy-vit").unwrap(), 0).unwrap();
    assert_eq!(toy.count_params(false), vit_formula(64, 2, 8, 64));
    let base = Model::<f32>::shape_only(&ModelConfig::preset("dinov2-base-shape").unwrap()).unwrap();
    assert_eq!(base.count_params(false), vit_formula(768, 12, 14, 224));
    for name in ["toy-swin", "swin-small-shape", "swin-base-shape"] {
        let cfg = ModelConfig::preset(name).unwrap();
        let m = Model::<f32>::shape_only(&cfg).unwrap();
        assert_eq!(m.count_params(false), swin_formula(&cfg), "{name}");
    }
}

#[test]
fn head_only_budget_on_base_vit() {
    let mut m = Model::<f32>::shape_only(&ModelConfig::preset("dinov2-base-shape").unwrap()).unwrap();
    apply_regime(&mut m, Regime::Nft, None, 0).unwrap();
    assert_eq!(m.count_params(true), 3074);
    apply_regime(&mut m, Regime::Fft, None, 0).unwrap();
    assert_eq!(m.count_params(true), m.count_params(false));
}

#[test]
fn invalid_configs() {
    let mut cfg = ModelConfig::preset("toy-vit").unwrap();
    cfg.input_resolution = 60;
    assert!(Model::<f32>::build(&cfg, 0).is_err());
    let mut cfg = ModelConfig::preset("toy-vit").unwrap();
    cfg.heads = vec![5];
    assert!(Model::<f32>::build(&cfg, 0).is_err());
    let mut cfg = ModelConfig::preset("toy-swin").unwrap();
    cfg.input_resolution = 48;
    assert!(Model::<f32>::build(&cfg, 0).is_err());
    assert!(ModelConfig::preset("resnet").is_err());
}

#[test]
fn vit_batch_contract() {
    let m = Model::<f32>::build(&ModelConfig::preset("toy-vit").unwrap(), 1).unwrap();
    let x = random_batch::<f32>(8, 64, 2);
    let y = forward_tensor(&m, &x).unwrap();
    assert_eq!(y.shape(), &[8, 2]);
    assert!(y.data().iter().all(|v| v.is_finite()));

    // duplicate and permuted samples
    let sample = 3 * 64 * 64;
    let order = [5usize, 0, 7, 7, 2, 1, 3, 6];
    let mut data = Vec::new();
    for &i in &order {
        data.extend_from_slice(&x.data()[i * sample..(i + 1) * sample]);
    }
    let z = forward_tensor(&m, &Tensor::new(vec![8, 3, 64, 64], data).unwrap()).unwrap();
    for (row, &i) in order.iter().enumerate() {
        assert_eq!(&z.data()[row * 2..row * 2 + 2], &y.data()[i * 2..i * 2 + 2]);
    }
    assert_eq!(z.data()[4..6], z.data()[6..8]);

    let wrong = random_batch::<f32>(1, 32, 0);
    assert!(forward_tensor(&m, &wrong).is_err());
}

#[test]
fn vit_is_patch_permutation_invariant_without_positions() {
    let mut m = Model::<f64>::build(&ModelConfig::preset("toy-vit").unwrap(), 4).unwrap();
    assert!(m.params.get("pos_embed").unwrap().value.data().iter().all(|&v| v == 0.0));
    // a non-trivial but zero position table
    m.params.get_mut("pos_embed").unwrap().value.data_mut().fill(0.0);
    let x = random_batch::<f64>(2, 64, 8);
    let (res, p) = (64, 8);
    let grid = res / p;
    let mut perm: Vec<usize> = (0..grid * grid).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let mut shuffled = x.clone();
    for b in 0..2 {
        for c in 0..3 {
            for (dst, &src) in perm.iter().enumerate() {
                for py in 0..p {
                    for px in 0..p {
                        let at =
                            |cell: usize| ((b * 3 + c) * res + (cell / grid) * p + py) * res + (cell % grid) * p + px;
                        shuffled.data_mut()[at(dst)] = x.data()[at(src)];
                    }
                }
            }
        }
    }
    let a = forward_tensor(&m, &x).unwrap();
    let b = forward_tensor(&m, &shuffled).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-5);
}

fn shifted_swin() -> ModelConfig {
    let mut cfg = ModelConfig::preset("toy-swin").unwrap();
    cfg.depths = vec![2, 2];
    cfg
}

#[test]
fn swin_forward_contract() {
    for cfg in [ModelConfig::preset("toy-swin").unwrap(), shifted_swin()] {
        let m = Model::<f32>::build(&cfg, 3).unwrap();
        let y = forward_tensor(&m, &random_batch::<f32>(3, 64, 1)).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }
    assert_eq!(
        swin::swin_stage_geometry(&ModelConfig::preset("swin-base-shape").unwrap()),
        vec![(56, 7), (28, 7), (14, 7), (7, 7)]
    );
}

#[test]
fn masked_pairs_get_zero_weight() {
    let (h, w, win, s) = (8, 8, 4, 2);
    let mask = shifted_window_mask(h, w, win, s).unwrap();
    let n = win * win;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = Graph::<f64>::new();
    let scores: Vec<f64> = (0..4 * 2 * n * n).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
    let scores = g.constant(&Tensor::new(vec![4, 2, n, n], scores).unwrap());
    let m = g.constant(&mask.clone().reshape(vec![4, 1, n, n]).unwrap());
    let weights = g.softmax(g.add_broadcast(scores, m).unwrap()).unwrap();
    let wv = g.value(weights);
    for wi in 0..4 {
        for hh in 0..2 {
            for k in 0..n * n {
                let masked = mask.data()[wi * n * n + k] != 0.0;
                let v = wv[(wi * 2 + hh) * n * n + k];
                if masked {
                    assert!(v.abs() < 1e-7);
                }
            }
        }
    }
}

#[test]
fn full_model_gradients() {
    let labels = [1usize, 0];
    let vit = Model::<f64>::build(&ModelConfig::preset("toy-vit").unwrap(), 5).unwrap();
    let x = random_batch::<f64>(2, 64, 6);
    let r = model_gradcheck(&vit, &x, &labels, 2, 1).unwrap();
    assert!(r.max_rel_error < 1e-3, "vit {r:?}");
    for cfg in [ModelConfig::preset("toy-swin").unwrap(), shifted_swin()] {
        let m = Model::<f64>::build(&cfg, 5).unwrap();
        let r = model_gradcheck(&m, &x, &labels, 2, 2).unwrap();
        assert!(r.max_rel_error < 1e-3, "swin {r:?}");
    }
}

#[test]
fn frozen_backbone_gives_head_only_gradients() {
    let mut m = Model::<f32>::build(&ModelConfig::preset("toy-swin").unwrap(), 0).unwrap();
    apply_regime(&mut m, Regime::Nft, None, 0).unwrap();
    let g = Graph::new();
    let binder = Binder::new(&g, &m.params, true);
    let x = g.constant(&random_batch::<f32>(2, 64, 0));
    let loss = model_loss(&m, &binder, x, &[0, 1], [1.0, 1.0]).unwrap();
    let grads = crate::autodiff::grad(loss, &binder).unwrap();
    let mut keys: Vec<_> = grads.keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["head.bias", "head.weight"]);
}

#[test]
fn init_is_seeded() {
    let cfg = ModelConfig::preset("toy-vit").unwrap();
    let a = Model::<f32>::build(&cfg, 9).unwrap();
    let b = Model::<f32>::build(&cfg, 9).unwrap();
    let c = Model::<f32>::build(&cfg, 10).unwrap();
    let all = |_: &str, _: &crate::autodiff::Param<f32>| true;
    assert_eq!(a.params.checksum(all), b.params.checksum(all));
    assert_ne!(a.params.checksum(all), c.params.checksum(all));
    let w = &a.params.get("blocks.0.attn.q.weight").unwrap().value;
    assert!(w.data().iter().all(|v| v.abs() <= 0.04));
}
