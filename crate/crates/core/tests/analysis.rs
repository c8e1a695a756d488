use adapter_lens::adapters::{
    init_adapters, AdapterConfig, AdapterMode, AdapterSet, InterventionMode, LayerAdapter, LayerSpan,
};
use adapter_lens::analysis::*;
use adapter_lens::corpus::{classify_token, generate_language_pair, LanguageLabel, LanguagePair, PairConfig, Property};
use adapter_lens::model::{model_forward, ModelConfig, PositionalKind, TransformerParams};
use adapter_lens::numerics::{spectral_norm, LogisticConfig, Tensor2D};
use adapter_lens::training::perplexity;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const L: usize = 4;

fn pair() -> LanguagePair {
    let cfg = PairConfig {
        vocab_size: 40,
        n_sentences: 120,
        sentence_len: 9,
        ..PairConfig::default()
    };
    generate_language_pair(3, &cfg).unwrap()
}

fn model() -> TransformerParams<f64> {
    let cfg = ModelConfig {
        n_layers: L,
        n_heads: 2,
        d_model: 16,
        d_ffn: 32,
        vocab_size: 40,
        max_seq_len: 16,
        positional: PositionalKind::LearnedAbsolute,
    };
    let mut p = TransformerParams::init(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (_, t) in p.named_tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
    }
    p
}

fn adapters(p: &TransformerParams<f64>, mode: AdapterMode) -> AdapterSet<f64> {
    let acfg = AdapterConfig {
        mode,
        reduction_factor: 4,
        lora_rank: 2,
        ..AdapterConfig::default()
    };
    let mut a = init_adapters(&p.config, &acfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (_, t) in a.named_tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    a
}

fn windows(pair: &LanguagePair) -> Vec<Vec<u32>> {
    let mut w = pair.target.train.chunks(12);
    w.truncate(20);
    w
}

fn zero_layer(a: &mut AdapterSet<f64>, layer: usize) {
    match &mut a.layers[layer - 1] {
        LayerAdapter::Pfeiffer(p) => p.w2.data_mut().iter_mut().for_each(|v| *v = 0.0),
        LayerAdapter::Lora { ffn_in, ffn_out } => {
            ffn_in.up.data_mut().iter_mut().for_each(|v| *v = 0.0);
            ffn_out.up.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[test]
fn lens_with_full_vocabulary_reports_vocabulary_shares() {
    let pair = pair();
    let table = pair.lang_id_table();
    let p = model();
    let a = adapters(&p, AdapterMode::Pfeiffer);
    let opts = LensOptions {
        k: 40,
        ..LensOptions::default()
    };
    let report = logit_lens(&p, Some(&a.view()), &windows(&pair), &table, &opts).unwrap();
    let n_target = (0..40u32).filter(|&t| classify_token(t, &table) == LanguageLabel::Target).count();
    for l in &report.layers {
        assert!((l.fraction_target - n_target as f64 / 40.0).abs() < 1e-12);
        assert!((l.fraction_target + l.fraction_source + l.fraction_other - 1.0).abs() < 1e-12);
    }
    assert!(logit_lens(&p, None, &windows(&pair), &table, &LensOptions { k: 0, ..opts }).is_err());
    assert!(logit_lens(&p, None, &windows(&pair), &table, &LensOptions { k: 41, ..opts }).is_err());
}

#[test]
fn zero_adapters_leave_the_lens_report_unchanged() {
    let pair = pair();
    let table = pair.lang_id_table();
    let p = model();
    let a = init_adapters(&p.config, &AdapterConfig::default(), 1).unwrap();
    let w = windows(&pair);
    for pooled in [false, true] {
        let opts = LensOptions {
            pooled,
            ..LensOptions::default()
        };
        let with = logit_lens(&p, Some(&a.view()), &w, &table, &opts).unwrap();
        let without = logit_lens(&p, None, &w, &table, &opts).unwrap();
        assert_eq!(with, without);
        for l in &with.layers {
            assert!((l.fraction_target + l.fraction_source + l.fraction_other - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn pooled_and_per_example_lens_agree_for_fixed_k() {
    let pair = pair();
    let table = pair.lang_id_table();
    let p = model();
    let a = adapters(&p, AdapterMode::Lora);
    let w = windows(&pair);
    let per = logit_lens(&p, Some(&a.view()), &w, &table, &LensOptions::default()).unwrap();
    let pooled = logit_lens(&p, Some(&a.view()), &w, &table, &LensOptions { pooled: true, ..LensOptions::default() }).unwrap();
    for (x, y) in per.layers.iter().zip(&pooled.layers) {
        assert!((x.fraction_target - y.fraction_target).abs() < 1e-12);
    }
}

#[test]
fn norm_profile_of_single_token_and_zero_adapters() {
    let pair = pair();
    let p = model();
    let a = adapters(&p, AdapterMode::Pfeiffer);
    // one window of length 2 has exactly one position with a target
    let w = vec![pair.target.train.chunks(2)[0].clone()];
    let prof = norm_profile(&p, Some(&a.view()), &w, 1, 0).unwrap();
    let trace = model_forward(&p, &w[0], Some(&a.view()), true).unwrap().trace.unwrap();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (lp, lt) in prof.layers.iter().zip(&trace.layers) {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs();
        assert!(close(lp.adapter_out, n(lt.adapter_out.row(0))));
        assert!(close(lp.ffn_out, n(lt.ffn_out.row(0))));
        assert!(close(lp.x_ffn, n(lt.x_ffn.row(0))));
        assert!(lp.adapter_out > 0.0);
    }
    let zero = init_adapters(&p.config, &AdapterConfig::default(), 0).unwrap();
    let prof = norm_profile(&p, Some(&zero.view()), &windows(&pair), 50, 1).unwrap();
    assert!(prof.layers.iter().all(|l| l.adapter_out == 0.0 && l.x_ffn > 0.0));
    assert!(norm_profile(&p, None, &w, 2, 0).is_err());
}

#[test]
fn adapter_norm_respects_operator_norm_bound() {
    let pair = pair();
    let p = model();
    let a = adapters(&p, AdapterMode::Pfeiffer);
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for w in windows(&pair) {
        let trace = model_forward(&p, &w, Some(&a.view()), true).unwrap().trace.unwrap();
        for (lt, la) in trace.layers.iter().zip(&a.layers) {
            let LayerAdapter::Pfeiffer(pf) = la else { unreachable!() };
            let bound = spectral_norm(&pf.w2, 500) * spectral_norm(&pf.w1, 500);
            for r in 0..w.len() {
                assert!(n(lt.adapter_out.row(r)) <= bound * n(lt.x_ffn.row(r)) * (1.0 + 1e-6));
            }
        }
    }
}

#[test]
fn ablation_grid_matches_direct_perplexities() {
    let pair = pair();
    let p = model();
    let mut a = adapters(&p, AdapterMode::Pfeiffer);
    zero_layer(&mut a, 2);
    let w = windows(&pair);
    let grid = ablation_sweep(&p, &a, &w, None).unwrap();
    assert_eq!(grid.cells.len(), L * (L + 1) / 2);
    assert_eq!(grid.full_ppl, perplexity(&p, Some(&a.view()), &w).unwrap());
    for c in &grid.cells {
        let direct = perplexity(&p, Some(&a.ablate(LayerSpan::new(c.first, c.last)).unwrap()), &w).unwrap();
        assert_eq!(c.ppl, direct);
    }
    let all = perplexity(&p, Some(&a.with_mask(vec![true; L]).unwrap()), &w).unwrap();
    assert_eq!(grid.cell(1, L).unwrap().delta_ppl, all - grid.full_ppl);
    assert_eq!(grid.cell(2, 2).unwrap().delta_ppl, 0.0);
    let empty = perplexity(&p, Some(&a.ablate(LayerSpan::empty()).unwrap()), &w).unwrap();
    assert_eq!(empty, grid.full_ppl);
    let rendered = grid.rendered();
    assert!(rendered[1][0].is_none());
    assert!(rendered.iter().flatten().flatten().all(|&v| v <= DEFAULT_REPORT_CAP));
    assert!(ablation_sweep(&p, &a, &w, Some(&[LayerSpan::empty()])).is_err());
}

#[test]
fn full_zero_intervention_equals_full_ablation() {
    let pair = pair();
    let p = model();
    let a = adapters(&p, AdapterMode::Pfeiffer);
    let w = windows(&pair);
    let data = collect_probe_data_all_layers(&p, &a, &w, NegativeCase::Case2, 60, 0).unwrap();
    let rankings: Vec<MmdScores> = data.iter().map(|d| mmd_rank(&d.features, &d.labels).unwrap()).collect();
    let d = a.output_dim();
    let ablated = perplexity(&p, Some(&a.with_mask(vec![true; L]).unwrap()), &w).unwrap();
    let base = perplexity(&p, Some(&a.view()), &w).unwrap();
    for sel in [Selection::Most, Selection::Least, Selection::Random] {
        let z = intervene(&p, &a, &w, &rankings, sel, d, InterventionMode::Zero, Scope::AllLayers, 0).unwrap();
        assert!((z - ablated).abs() < 1e-9, "{z} vs {ablated}");
        for mode in [InterventionMode::Zero, InterventionMode::MeanReplace] {
            let none = intervene(&p, &a, &w, &rankings, sel, 0, mode, Scope::AllLayers, 0).unwrap();
            assert_eq!(none, base);
        }
    }
    let one = perplexity(&p, Some(&a.ablate(LayerSpan::single(3)).unwrap()), &w).unwrap();
    let z3 = intervene(&p, &a, &w, &rankings, Selection::Most, d, InterventionMode::Zero, Scope::Layer(3), 0).unwrap();
    assert!((z3 - one).abs() < 1e-9);
    assert!(intervene(&p, &a, &w, &rankings, Selection::Most, d + 1, InterventionMode::Zero, Scope::AllLayers, 0).is_err());
    let report = intervention_sweep(&p, &a, &w, &rankings, &n_features_grid(d), &[InterventionMode::Zero], Scope::AllLayers, 0).unwrap();
    assert_eq!(report.baseline_ppl, base);
    assert_eq!(report.entries.len(), n_features_grid(d).len() * 3);
    assert!(report.to_csv().lines().nth(1).unwrap().contains(",most,zero,"));
}

#[test]
fn negative_cases_coincide_at_the_first_layer() {
    let pair = pair();
    let p = model();
    let a = adapters(&p, AdapterMode::Lora);
    let w = windows(&pair);
    let c1 = collect_probe_data(&p, &a, &w, 1, NegativeCase::Case1, 40, 9).unwrap();
    let c2 = collect_probe_data(&p, &a, &w, 1, NegativeCase::Case2, 40, 9).unwrap();
    assert_eq!(c1.features, c2.features);
    assert_eq!(c1.features.rows(), 80);
    assert_eq!(c1.labels.iter().filter(|&&y| y).count(), 40);
    let c1 = collect_probe_data(&p, &a, &w, 3, NegativeCase::Case1, 40, 9).unwrap();
    let c2 = collect_probe_data(&p, &a, &w, 3, NegativeCase::Case2, 40, 9).unwrap();
    assert_eq!(c1.features.select_rows(&(0..40).collect::<Vec<_>>()), c2.features.select_rows(&(0..40).collect::<Vec<_>>()));
    assert_ne!(c1.features, c2.features);
    let all = collect_probe_data_all_layers(&p, &a, &w, NegativeCase::Case2, 40, 9).unwrap();
    assert_eq!(all[2], c2);
    assert!(collect_probe_data(&p, &a, &w, 0, NegativeCase::Case2, 40, 9).is_err());
    assert!("case3".parse::<NegativeCase>().is_err());
}

#[test]
fn zero_adapter_layer_gives_chance_probe() {
    let pair = pair();
    let p = model();
    let mut a = adapters(&p, AdapterMode::Pfeiffer);
    zero_layer(&mut a, 2);
    let w = windows(&pair);
    let data = collect_probe_data(&p, &a, &w, 2, NegativeCase::Case2, 100, 1).unwrap();
    let pos: Vec<usize> = (0..100).collect();
    let neg: Vec<usize> = (100..200).collect();
    assert_eq!(data.features.select_rows(&pos), data.features.select_rows(&neg));
    let sweep = probe_sweep(&[data], &[1, 8, 16], 0, &LogisticConfig::default()).unwrap();
    // identical rows: the classifier cannot beat a coin on 40 test rows
    let sigma = (0.25f64 / 40.0).sqrt();
    for e in &sweep.entries {
        assert!((e.accuracy - 0.5).abs() <= 3.0 * sigma + 1e-12, "{e:?}");
    }
}

#[test]
fn planted_feature_is_found() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = 300;
    let features = Tensor2D::from_fn(2 * n, 16, |r, c| {
        let shift = if c == 7 && r < n { 4.0 } else { 0.0 };
        normal.sample(&mut rng) + shift
    });
    let data = ProbeData {
        layer: 1,
        case: NegativeCase::Case2,
        features,
        labels: (0..2 * n).map(|i| i < n).collect(),
        positions: vec![],
    };
    let sweep = probe_sweep(&[data], &k_grid(16), 3, &LogisticConfig::default()).unwrap();
    assert_eq!(sweep.rankings[0].ranking[0], 7);
    // a 4-sigma shift caps single-feature accuracy near 0.977
    assert!(sweep.accuracy(1, 1).unwrap() >= 0.95);
    assert!(sweep.accuracy(1, 16).unwrap() >= sweep.accuracy(1, 1).unwrap() - 0.05);
    assert_eq!(sweep.to_csv().lines().count(), 1 + k_grid(16).len());
}

fn planted_cloud(n: usize, seed: u64, rotate: bool) -> LabeledReps<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let d = 12;
    let mut f = Tensor2D::zeros(n, d);
    for r in 0..n {
        let (a, b) = (3.0 * normal.sample(&mut rng), 2.0 * normal.sample(&mut rng));
        // rotation by 90 degrees in the (e0, e1) plane sends e0 to e1
        let (x0, x1) = if rotate { (-b, a) } else { (a, b) };
        f.set(r, 0, x0);
        f.set(r, 1, x1);
        for c in 2..d {
            f.set(r, c, 0.05 * normal.sample(&mut rng));
        }
    }
    LabeledReps {
        layer: 1,
        property: Property::Pos,
        features: f,
        classes: (0..n).map(|i| i % 2).collect(),
    }
}

#[test]
fn alignment_of_identical_and_rotated_clouds() {
    let src = planted_cloud(800, 1, false);
    let same = pca_alignment(&src, &src).unwrap();
    assert!((same.cosines[0][0] - 1.0).abs() < 1e-9 && (same.cosines[1][1] - 1.0).abs() < 1e-9);
    assert!(same.cosines[0][1] < 1e-6);
    assert_eq!(same.projected.len(), 800);

    let rot = planted_cloud(800, 2, true);
    let r = pca_alignment(&src, &rot).unwrap();
    // target PC1 is the rotated image of source PC1, which is source PC2
    assert!(r.cosines[0][0] < 0.05, "{:?}", r.cosines);
    assert!(r.cosines[1][1] < 0.05);
    assert!(r.cosines[0][1] > 0.99 && r.cosines[1][0] > 0.99);

    let mut flipped = rot.clone();
    flipped.features = rot.features.map(|v| -v);
    let f = pca_alignment(&src, &flipped).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            assert!((f.cosines[i][j] - r.cosines[i][j]).abs() < 1e-9);
        }
    }

    let mut tiny = src.clone();
    tiny.features = src.features.select_rows(&[0, 1]);
    tiny.classes = vec![0, 1];
    assert!(pca_alignment(&src, &tiny).is_err());
    let mut one_class = src.clone();
    one_class.classes = vec![0; 800];
    assert!(pca_alignment(&one_class, &src).is_err());
}

#[test]
fn property_reps_carry_word_classes() {
    let pair = pair();
    let p = model();
    let w = windows(&pair);
    let reps = collect_property_reps(&p, None, &w, &pair.target.spec, Property::Number, &[1, 4], 50, 0).unwrap();
    assert_eq!(reps.len(), 2);
    assert_eq!(reps[0].features.rows(), 50);
    assert_eq!(reps[0].classes, reps[1].classes);
    assert_eq!(reps[1].layer, 4);
    assert!(reps[0].n_classes() == 2);
    let everything = collect_property_reps(&p, None, &w, &pair.target.spec, Property::Pos, &[2], usize::MAX, 0).unwrap();
    let labelled: usize = w
        .iter()
        .flatten()
        .filter(|t| pair.target.spec.property_labels.contains_key(t))
        .count();
    assert_eq!(everything[0].features.rows(), labelled);
    let tr = model_forward(&p, &w[0], None, true).unwrap().trace.unwrap();
    let first = w[0].iter().position(|t| pair.target.spec.property_labels.contains_key(t)).unwrap();
    assert_eq!(everything[0].features.row(0), tr.layers[1].x_out.row(first));
    assert!(collect_property_reps(&p, None, &w, &pair.target.spec, Property::Pos, &[5], 10, 0).is_err());
}

#[test]
fn reports_are_deterministic() {
    let pair = pair();
    let table = pair.lang_id_table();
    let p = model();
    let a = adapters(&p, AdapterMode::Pfeiffer);
    let w = windows(&pair);
    let run = || {
        let lens = logit_lens(&p, Some(&a.view()), &w, &table, &LensOptions::default()).unwrap();
        let data = collect_probe_data_all_layers(&p, &a, &w, NegativeCase::Case2, 50, 2).unwrap();
        let sweep = probe_sweep(&data, &[1, 8], 2, &LogisticConfig::default()).unwrap();
        (serde_json::to_string(&lens).unwrap(), serde_json::to_string(&sweep).unwrap())
    };
    assert_eq!(run(), run());
}
