use adapter_lens::corpus::{batch_iterator, generate_language_pair, PairConfig, BOS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn empirical_bigrams_match_the_transition_table() {
    // Few, evenly weighted words keep every row well sampled in 10^5 tokens.
    let cfg = PairConfig {
        vocab_size: 30,
        words_per_language: Some(12),
        concentration: 50.0,
        ..PairConfig::default()
    };
    let pair = generate_language_pair(11, &cfg).unwrap();
    let spec = &pair.source.spec;
    let n = spec.n_words();
    let sentences = spec.sample(10_000, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(sentences.iter().map(Vec::len).sum::<usize>(), 100_000);
    let mut counts = vec![vec![0u64; n]; n];
    for s in &sentences {
        for w in s.windows(2) {
            let (a, b) = (spec.word_index(w[0]).unwrap(), spec.word_index(w[1]).unwrap());
            counts[a][b] += 1;
        }
    }
    for (i, row) in counts.iter().enumerate() {
        let total: u64 = row.iter().sum();
        if total == 0 {
            continue;
        }
        let tv: f64 = row
            .iter()
            .zip(&spec.transitions[i])
            .map(|(&c, &p)| (c as f64 / total as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv <= 0.02, "row {i}: total variation {tv} over {total} samples");
    }
}

#[test]
fn batches_stay_in_vocabulary() {
    let cfg = PairConfig::default();
    let pair = generate_language_pair(0, &cfg).unwrap();
    for corpus in [&pair.source.train, &pair.target.train, &pair.source.val, &pair.target.val] {
        let mut seen = 0;
        for batch in batch_iterator(corpus, 8, 32, 64, 1).unwrap() {
            for seq in &batch {
                assert_eq!(seq.len(), 32);
                assert!(seq.iter().all(|&t| (t as usize) < cfg.vocab_size));
                seen += 1;
            }
        }
        assert_eq!(seen, corpus.n_tokens() / 32 / 8 * 8);
    }
    assert!(pair.source.train.tokens().contains(&BOS));
}
