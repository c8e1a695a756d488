use adapter_lens::adapters::{init_adapters, AdapterConfig, AdapterMode, AdapterSet, FreezeMask};
use adapter_lens::gradcheck::check_gradients;
use adapter_lens::model::{backward, ModelConfig, PositionalKind, TransformerParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(positional: PositionalKind) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ffn: 16,
        vocab_size: 11,
        max_seq_len: 8,
        positional,
    }
}

fn randomized(cfg: &ModelConfig, mode: AdapterMode, seed: u64) -> AdapterSet<f64> {
    let acfg = AdapterConfig { mode, reduction_factor: 4, lora_rank: 2, ..AdapterConfig::default() };
    let mut set = init_adapters(cfg, &acfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in set.named_tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.4..0.4));
    }
    set
}

fn batch() -> Vec<Vec<u32>> {
    vec![vec![1, 4, 2, 9, 10, 0], vec![3, 3, 7, 5]]
}

fn everything(p: &TransformerParams<f64>, a: Option<&AdapterSet<f64>>) -> FreezeMask {
    let mut m = FreezeMask::all(p);
    if let Some(a) = a {
        m.trainable.extend(a.tensor_names());
    }
    m
}

#[test]
fn all_gradients_match_finite_differences() {
    for positional in [PositionalKind::LearnedAbsolute, PositionalKind::Rotary] {
        for mode in [None, Some(AdapterMode::Pfeiffer), Some(AdapterMode::Lora)] {
            let cfg = tiny(positional);
            let mut p = TransformerParams::<f64>::init(&cfg, 7).unwrap();
            // larger weights than the default init so every path carries signal
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            for (_, t) in p.named_tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
            }
            let a = mode.map(|m| randomized(&cfg, m, 5));
            let mask = everything(&p, a.as_ref());
            let report = check_gradients(&batch(), &p, a.as_ref(), &mask, 1e-4, 1e-6).unwrap();
            assert!(
                report.max_relative_error < 1e-3,
                "{positional:?} {mode:?}: {} at {}",
                report.max_relative_error,
                report.worst_parameter
            );
            assert_eq!(report.tensors_checked, mask.trainable.len());
        }
    }
}

#[test]
fn frozen_parameters_get_no_entries() {
    let cfg = tiny(PositionalKind::LearnedAbsolute);
    let p = TransformerParams::<f64>::init(&cfg, 1).unwrap();
    let a = randomized(&cfg, AdapterMode::Pfeiffer, 2);
    let (_, none) = backward(&[1, 2, 3], &[2, 3, 4], &p, Some(&a), &FreezeMask::none()).unwrap();
    assert!(none.is_empty());
    let mask = FreezeMask::adaptation(&a);
    let (_, g) = backward(&[1, 2, 3], &[2, 3, 4], &p, Some(&a), &mask).unwrap();
    assert_eq!(g.keys().cloned().collect::<std::collections::BTreeSet<_>>(), mask.trainable);
}

#[test]
fn dead_relu_adapter_has_zero_w1_gradient() {
    // W1 ≤ 0 elementwise on an input that is nonnegative keeps the bottleneck
    // pre-activation ≤ 0 everywhere, so no gradient reaches W1.
    let cfg = tiny(PositionalKind::LearnedAbsolute);
    let p = TransformerParams::<f64>::init(&cfg, 1).unwrap();
    let mut a = randomized(&cfg, AdapterMode::Pfeiffer, 2);
    for (name, t) in a.named_tensors_mut() {
        if name.ends_with("w1") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mask = FreezeMask::adaptation(&a);
    let (_, g) = backward(&[1, 2, 3], &[2, 3, 4], &p, Some(&a), &mask).unwrap();
    assert!(g["adapters.0.w1"].data().iter().all(|&v| v == 0.0));
}
