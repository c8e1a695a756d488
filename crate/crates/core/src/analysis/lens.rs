use serde::{Deserialize, Serialize};

use crate::adapters::AdapterView;
use crate::corpus::{classify_token, LangIdTable, LanguageLabel};
use crate::error::{Error, Result};
use crate::model::{model_forward, unembed_hidden, TransformerParams};
use crate::scalar::Scalar;

use super::csv;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LensOptions {
    pub k: usize,
    pub apply_final_norm: bool,
    /// Pool the top-k tokens of all examples instead of averaging
    /// per-example fractions.
    pub pooled: bool,
}

impl Default for LensOptions {
    fn default() -> Self {
        Self {
            k: 10,
            apply_final_norm: true,
            pooled: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensLayer {
    /// 1-based.
    pub layer: usize,
    pub fraction_target: f64,
    pub fraction_source: f64,
    pub fraction_other: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensReport {
    pub k: usize,
    pub n_examples: usize,
    pub pooled: bool,
    pub apply_final_norm: bool,
    pub layers: Vec<LensLayer>,
}

impl LensReport {
    pub fn to_csv(&self) -> String {
        csv(
            &["layer", "fraction_target", "fraction_source", "fraction_other"],
            self.layers.iter().map(|l| {
                vec![
                    l.layer.to_string(),
                    l.fraction_target.to_string(),
                    l.fraction_source.to_string(),
                    l.fraction_other.to_string(),
                ]
            }),
        )
    }

    pub fn fraction_target(&self, layer: usize) -> f64 {
        self.layers[layer - 1].fraction_target
    }
}

/// Indices of the `k` largest entries, highest first; ties go to the lower
/// index.
pub fn top_k<T: Scalar>(p: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Projects every layer's output at the last position of each example onto
/// the vocabulary and reports the language mix of the top-k tokens.
pub fn logit_lens<T: Scalar>(
    params: &TransformerParams<T>,
    adapters: Option<&AdapterView<'_, T>>,
    examples: &[Vec<u32>],
    table: &LangIdTable,
    opts: &LensOptions,
) -> Result<LensReport> {
    let v = params.config.vocab_size;
    if opts.k == 0 || opts.k > v {
        return Err(Error::invalid(format!("k = {} must lie in 1..={v}", opts.k)));
    }
    let n_layers = params.config.n_layers;
    // per layer: [target, source, other]
    let mut sums = vec![[0.0f64; 3]; n_layers];
    let mut n_examples = 0;
    for ex in examples.iter().filter(|e| !e.is_empty()) {
        let out = model_forward(params, ex, adapters, true)?;
        let trace = out.trace.expect("trace requested");
        let last = ex.len() - 1;
        for (l, lt) in trace.layers.iter().enumerate() {
            let probs = unembed_hidden(lt.x_out.row(last), params, opts.apply_final_norm);
            let mut counts = [0usize; 3];
            for t in top_k(&probs, opts.k) {
                counts[match classify_token(t as u32, table) {
                    LanguageLabel::Target => 0,
                    LanguageLabel::Source => 1,
                    LanguageLabel::Other => 2,
                }] += 1;
            }
            for c in 0..3 {
                // Per-example fractions; pooled counts are normalized at the end.
                sums[l][c] += if opts.pooled {
                    counts[c] as f64
                } else {
                    counts[c] as f64 / opts.k as f64
                };
            }
        }
        n_examples += 1;
    }
    let denom = if opts.pooled {
        (n_examples * opts.k) as f64
    } else {
        n_examples as f64
    };
    let layers = sums
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let f = |c: usize| if n_examples == 0 { 0.0 } else { s[c] / denom };
            LensLayer {
                layer: l + 1,
                fraction_target: f(0),
                fraction_source: f(1),
                fraction_other: f(2),
            }
        })
        .collect();
    Ok(LensReport {
        k: opts.k,
        n_examples,
        pooled: opts.pooled,
        apply_final_norm: opts.apply_final_norm,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k(&[0.1f64, 0.3, 0.3, 0.2], 3), vec![1, 2, 3]);
        assert_eq!(top_k(&[0.25f64; 4], 2), vec![0, 1]);
    }
}
