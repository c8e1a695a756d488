//! Pre-training, frozen-base adaptation and perplexity evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{init_adapters, AdapterConfig, AdapterSet, AdapterView, FreezeMask, LayerSpan};
use crate::corpus::{shuffled_batches, Corpus};
use crate::error::{Error, Result};
use crate::model::{batch_loss_and_grads, sequence_nll, ModelConfig, TransformerParams};
use crate::numerics::tensor::Tensor2D;
use crate::numerics::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::scalar::{CompensatedSum, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Adapt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Tokens per training window; each window yields `seq_len - 1`
    /// predictions.
    pub seq_len: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub seed: u64,
    pub phase: Phase,
    /// Fraction of steps spent in linear warmup; constant afterwards.
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub adam: AdamConfig,
    /// Share of pre-training windows drawn from the second-language corpus.
    pub mix_fraction: f64,
    /// Caps the number of validation windows per evaluation (`None` = all).
    pub max_eval_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            seq_len: 32,
            lr: 3e-4,
            eval_every: 250,
            seed: 0,
            phase: Phase::Pretrain,
            warmup_fraction: 0.02,
            clip_norm: 1.0,
            adam: AdamConfig::default(),
            mix_fraction: 0.0,
            max_eval_windows: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::invalid("batch_size and eval_every must be positive"));
        }
        if self.seq_len < 2 {
            return Err(Error::invalid("seq_len must be at least 2"));
        }
        if self.seq_len - 1 > model.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.seq_len - 1,
                max: model.max_seq_len,
            });
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.clip_norm <= 0.0 {
            return Err(Error::invalid("lr and clip_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.mix_fraction) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid("mix_fraction must lie in [0,1) and warmup_fraction in [0,1]"));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        let warmup = ((self.steps as f64 * self.warmup_fraction).ceil() as usize).max(1);
        self.lr * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

/// One evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: Phase,
    pub step: usize,
    /// Mean training loss since the previous evaluation (NaN at step 0).
    pub train_loss: f64,
    pub val_ppl: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: usize,
    pub validation_perplexity: f64,
    /// Where the caller persisted the selected parameters, if anywhere.
    pub path: String,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome<T> {
    /// Parameters at the best validation perplexity.
    pub params: TransformerParams<T>,
    pub best: CheckpointRecord,
    pub log: Vec<LogRecord>,
    /// Loss of every optimization step.
    pub train_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome<T> {
    pub adapters: AdapterSet<T>,
    /// Base parameters with the adapted input and output embeddings.
    pub params: TransformerParams<T>,
    pub best: CheckpointRecord,
    pub log: Vec<LogRecord>,
    pub train_losses: Vec<f64>,
}

/// Endless stream of shuffled batches; every epoch reshuffles with a seed
/// derived from the run seed and the epoch index.
struct BatchStream {
    chunks: Vec<Vec<u32>>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    current: std::vec::IntoIter<Vec<Vec<u32>>>,
}

impl BatchStream {
    fn new(chunks: Vec<Vec<u32>>, batch_size: usize, seed: u64) -> Result<Self> {
        if chunks.len() < batch_size {
            return Err(Error::invalid(format!(
                "corpus yields {} windows, fewer than one batch of {batch_size}",
                chunks.len()
            )));
        }
        Ok(Self {
            chunks,
            batch_size,
            seed,
            epoch: 0,
            current: Vec::new().into_iter(),
        })
    }

    fn epoch_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(self.epoch)
    }

    /// Next batch and the seed of the epoch it came from.
    fn next_batch(&mut self) -> (Vec<Vec<u32>>, u64) {
        loop {
            if let Some(b) = self.current.next() {
                return (b, self.epoch_seed());
            }
            self.epoch += 1;
            let batches: Vec<_> = shuffled_batches(self.chunks.clone(), self.batch_size, self.epoch_seed()).collect();
            self.current = batches.into_iter();
        }
    }
}

fn eval_windows(corpus: &Corpus, cfg: &TrainConfig) -> Vec<Vec<u32>> {
    let mut w = corpus.chunks(cfg.seq_len);
    if let Some(max) = cfg.max_eval_windows {
        w.truncate(max);
    }
    w
}

fn tensor_hash<T: Scalar>(t: &Tensor2D<T>) -> String {
    let mut h = Sha256::new();
    h.update((t.rows() as u64).to_le_bytes());
    h.update((t.cols() as u64).to_le_bytes());
    for v in t.data() {
        h.update(v.as_f64().to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// SHA-256 of every base tensor not in `mask`.
pub fn frozen_hashes<T: Scalar>(params: &TransformerParams<T>, mask: &FreezeMask) -> BTreeMap<String, String> {
    params
        .named_tensors()
        .into_iter()
        .filter(|(n, _)| !mask.contains(n))
        .map(|(n, t)| (n, tensor_hash(t)))
        .collect()
}

/// Trains every parameter on `train` (plus a `mix_fraction` share of windows
/// from `mix`) and returns the parameters with the lowest validation
/// perplexity among the evaluation points, including step 0.
pub fn pretrain<T: Scalar>(
    cfg: &TrainConfig,
    model: &ModelConfig,
    train: &Corpus,
    val: &Corpus,
    mix: Option<&Corpus>,
    mut observe: impl FnMut(&LogRecord),
) -> Result<PretrainOutcome<T>> {
    if cfg.phase != Phase::Pretrain {
        return Err(Error::invalid("pretrain called with an adapt-phase config"));
    }
    cfg.validate(model)?;
    let mut params = TransformerParams::<T>::init(model, cfg.seed)?;
    let mask = FreezeMask::all(&params);
    let mut chunks = train.chunks(cfg.seq_len);
    if let (Some(mix), true) = (mix, cfg.mix_fraction > 0.0) {
        let n_mix = (cfg.mix_fraction / (1.0 - cfg.mix_fraction) * chunks.len() as f64).round() as usize;
        let mut extra = mix.chunks(cfg.seq_len);
        extra.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d69_78));
        extra.truncate(n_mix);
        chunks.extend(extra);
    }
    let val_windows = eval_windows(val, cfg);
    let eval = |p: &TransformerParams<T>| perplexity(p, None, &val_windows);

    let mut log = Vec::new();
    let first = LogRecord {
        phase: Phase::Pretrain,
        step: 0,
        train_loss: f64::NAN,
        val_ppl: eval(&params)?,
        lr: 0.0,
    };
    observe(&first);
    let mut best = CheckpointRecord {
        step: 0,
        validation_perplexity: first.val_ppl,
        path: String::new(),
    };
    log.push(first);
    let mut best_params = params.clone();
    if cfg.steps == 0 {
        return Ok(PretrainOutcome {
            params: best_params,
            best,
            log,
            train_losses: Vec::new(),
        });
    }
    let mut stream = BatchStream::new(chunks, cfg.batch_size, cfg.seed)?;
    let mut state = AdamState::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut window = 0.0;
    let mut window_n = 0usize;
    for step in 0..cfg.steps {
        let (batch, batch_seed) = stream.next_batch();
        let (loss, mut grads) = batch_loss_and_grads(&batch, &params, None, &mask)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, batch_seed });
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        let lr = cfg.lr_at(step);
        adam_step(params.named_tensors_mut(), &grads, &mut state, lr, &cfg.adam, &|n| mask.contains(n))?;
        losses.push(loss);
        window += loss;
        window_n += 1;
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let rec = LogRecord {
                phase: Phase::Pretrain,
                step: done,
                train_loss: window / window_n as f64,
                val_ppl: eval(&params)?,
                lr,
            };
            if !rec.val_ppl.is_finite() {
                return Err(Error::NonFiniteLoss { step, batch_seed });
            }
            observe(&rec);
            if rec.val_ppl < best.validation_perplexity {
                best = CheckpointRecord {
                    step: done,
                    validation_perplexity: rec.val_ppl,
                    path: String::new(),
                };
                best_params = params.clone();
            }
            log.push(rec);
            window = 0.0;
            window_n = 0;
        }
    }
    Ok(PretrainOutcome {
        params: best_params,
        best,
        log,
        train_losses: losses,
    })
}

/// Trains a fresh adapter set (and, if configured, the input and output
/// embeddings) on `train` with every other base weight frozen.
pub fn adapt<T: Scalar>(
    cfg: &TrainConfig,
    base: &TransformerParams<T>,
    adapter_cfg: &AdapterConfig,
    train: &Corpus,
    val: &Corpus,
    observe: impl FnMut(&LogRecord),
) -> Result<AdaptOutcome<T>> {
    let adapters = init_adapters::<T>(&base.config, adapter_cfg, cfg.seed)?;
    let mask = FreezeMask::adaptation(&adapters);
    adapt_with_mask(cfg, base, adapters, &mask, train, val, observe)
}

/// [`adapt`] with an explicit optimizer mask. The frozen set is still the
/// one the adaptation contract prescribes, so a mask that reaches beyond it
/// makes the run fail with [`Error::FreezeViolation`].
pub fn adapt_with_mask<T: Scalar>(
    cfg: &TrainConfig,
    base: &TransformerParams<T>,
    adapters: AdapterSet<T>,
    mask: &FreezeMask,
    train: &Corpus,
    val: &Corpus,
    mut observe: impl FnMut(&LogRecord),
) -> Result<AdaptOutcome<T>> {
    if cfg.phase != Phase::Adapt {
        return Err(Error::invalid("adapt called with a pretrain-phase config"));
    }
    cfg.validate(&base.config)?;
    adapters.validate_for(&base.config)?;
    let contract = FreezeMask::adaptation(&adapters);
    let before = frozen_hashes(base, &contract);

    let mut params = base.clone();
    let mut adapters = adapters;
    let val_windows = eval_windows(val, cfg);
    let eval = |p: &TransformerParams<T>, a: &AdapterSet<T>| perplexity(p, Some(&a.view()), &val_windows);

    let mut log = Vec::new();
    let first = LogRecord {
        phase: Phase::Adapt,
        step: 0,
        train_loss: f64::NAN,
        val_ppl: eval(&params, &adapters)?,
        lr: 0.0,
    };
    observe(&first);
    let mut best = CheckpointRecord {
        step: 0,
        validation_perplexity: first.val_ppl,
        path: String::new(),
    };
    log.push(first);
    let mut best_state = (params.clone(), adapters.clone());
    let mut losses = Vec::with_capacity(cfg.steps);
    if cfg.steps > 0 {
        let mut stream = BatchStream::new(train.chunks(cfg.seq_len), cfg.batch_size, cfg.seed)?;
        let mut state = AdamState::new();
        let mut window = 0.0;
        let mut window_n = 0usize;
        for step in 0..cfg.steps {
            let (batch, batch_seed) = stream.next_batch();
            let (loss, mut grads) = batch_loss_and_grads(&batch, &params, Some(&adapters), mask)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, batch_seed });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            let lr = cfg.lr_at(step);
            let tensors = params.named_tensors_mut().into_iter().chain(adapters.named_tensors_mut());
            adam_step(tensors, &grads, &mut state, lr, &cfg.adam, &|n| mask.contains(n))?;
            losses.push(loss);
            window += loss;
            window_n += 1;
            let done = step + 1;
            if done % cfg.eval_every == 0 || done == cfg.steps {
                let rec = LogRecord {
                    phase: Phase::Adapt,
                    step: done,
                    train_loss: window / window_n as f64,
                    val_ppl: eval(&params, &adapters)?,
                    lr,
                };
                if !rec.val_ppl.is_finite() {
                    return Err(Error::NonFiniteLoss { step, batch_seed });
                }
                observe(&rec);
                if rec.val_ppl < best.validation_perplexity {
                    best = CheckpointRecord {
                        step: done,
                        validation_perplexity: rec.val_ppl,
                        path: String::new(),
                    };
                    best_state = (params.clone(), adapters.clone());
                }
                log.push(rec);
                window = 0.0;
                window_n = 0;
            }
        }
    }
    // Check the live parameters, not just the selected snapshot.
    verify_frozen(&before, &params, &contract)?;
    verify_frozen(&before, &best_state.0, &contract)?;
    Ok(AdaptOutcome {
        params: best_state.0,
        adapters: best_state.1,
        best,
        log,
        train_losses: losses,
    })
}

/// Fails unless every tensor outside `mask` hashes as recorded in `before`.
pub fn verify_frozen<T: Scalar>(
    before: &BTreeMap<String, String>,
    params: &TransformerParams<T>,
    mask: &FreezeMask,
) -> Result<()> {
    let after = frozen_hashes(params, mask);
    for (name, h) in before {
        if after.get(name) != Some(h) {
            return Err(Error::FreezeViolation(format!("frozen tensor {name} changed during adaptation")));
        }
    }
    Ok(())
}

/// Summed negative log-likelihood and prediction count over `windows`,
/// grouped into batches of `batch_size` whose partial sums are merged.
pub fn nll_sum<T: Scalar>(
    params: &TransformerParams<T>,
    adapters: Option<&AdapterView<'_, T>>,
    windows: &[Vec<u32>],
    batch_size: usize,
) -> Result<(CompensatedSum, usize)> {
    let mut total = CompensatedSum::default();
    let mut count = 0;
    for batch in windows.chunks(batch_size.max(1)) {
        let mut part = CompensatedSum::default();
        for w in batch {
            let (nll, n) = sequence_nll(params, w, adapters)?;
            part.add(nll);
            count += n;
        }
        total.merge(&part);
    }
    Ok((total, count))
}

/// `exp` of the mean next-token negative log-likelihood over `windows`.
pub fn perplexity<T: Scalar>(
    params: &TransformerParams<T>,
    adapters: Option<&AdapterView<'_, T>>,
    windows: &[Vec<u32>],
) -> Result<f64> {
    perplexity_batched(params, adapters, windows, 32)
}

pub fn perplexity_batched<T: Scalar>(
    params: &TransformerParams<T>,
    adapters: Option<&AdapterView<'_, T>>,
    windows: &[Vec<u32>],
    batch_size: usize,
) -> Result<f64> {
    let (nll, count) = nll_sum(params, adapters, windows, batch_size)?;
    if count == 0 {
        return Err(Error::invalid("no prediction targets in evaluation corpus"));
    }
    Ok((nll.value() / count as f64).exp())
}

/// Perplexity with the adapters of `span` removed (`None` or an empty span
/// evaluates the full adapted model).
pub fn perplexity_ablated<T: Scalar>(
    params: &TransformerParams<T>,
    adapters: &AdapterSet<T>,
    windows: &[Vec<u32>],
    span: Option<LayerSpan>,
) -> Result<f64> {
    let view = match span {
        Some(s) => adapters.ablate(s)?,
        None => adapters.view(),
    };
    perplexity(params, Some(&view), windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LanguageTag;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ffn: 32,
            vocab_size: 8,
            max_seq_len: 16,
            ..ModelConfig::default()
        }
    }

    fn cyclic(n: usize) -> Corpus {
        Corpus {
            tag: LanguageTag::Source,
            sentences: (0..n).map(|_| vec![1, 2, 3, 4, 5, 6, 7]).collect(),
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let cfg = TrainConfig { steps: 0, seq_len: 8, ..TrainConfig::default() };
        let out = pretrain::<f64>(&cfg, &tiny(), &cyclic(20), &cyclic(5), None, |_| {}).unwrap();
        assert_eq!(out.params, TransformerParams::init(&tiny(), cfg.seed).unwrap());
        assert_eq!(out.best.step, 0);
    }

    #[test]
    fn warmup_schedule() {
        let cfg = TrainConfig { steps: 100, lr: 1.0, ..TrainConfig::default() };
        assert_eq!(cfg.lr_at(0), 0.5);
        assert_eq!(cfg.lr_at(1), 1.0);
        assert_eq!(cfg.lr_at(50), 1.0);
    }

    #[test]
    fn phase_is_checked() {
        let cfg = TrainConfig { phase: Phase::Adapt, seq_len: 8, ..TrainConfig::default() };
        assert!(pretrain::<f64>(&cfg, &tiny(), &cyclic(20), &cyclic(5), None, |_| {}).is_err());
    }

    #[test]
    fn zero_weights_give_vocabulary_perplexity() {
        let mut p = TransformerParams::<f64>::init(&tiny(), 0).unwrap();
        p.lm_head = Tensor2D::zeros(16, 8);
        let ppl = perplexity(&p, None, &cyclic(4).chunks(8)).unwrap();
        assert!((ppl - 8.0).abs() < 1e-9);
    }
}
