use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::error::{Error, Result};
use crate::model::{model_forward, TransformerParams};
use crate::numerics::{logistic_fit, LogisticConfig, Tensor2D};
use crate::scalar::Scalar;

use super::{by_window, csv, sample_positions};

pub const DEFAULT_PER_CLASS: usize = 3000;

/// How the non-adapted (negative) representations at layer `l` are made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeCase {
    /// Adapters removed at every layer.
    Case1,
    /// Adapters kept below `l`, removed at `l` only.
    Case2,
}

impl std::str::FromStr for NegativeCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "case1" | "1" => Ok(Self::Case1),
            "case2" | "2" => Ok(Self::Case2),
            other => Err(Error::invalid(format!("unknown negative case {other:?}"))),
        }
    }
}

/// Layer outputs at paired positions: rows `0..n` are adapted (label true),
/// rows `n..2n` are the same positions without the adapter(s).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeData<T> {
    pub layer: usize,
    pub case: NegativeCase,
    pub features: Tensor2D<T>,
    pub labels: Vec<bool>,
    pub positions: Vec<(usize, usize)>,
}

/// Probe data for one layer (1-based).
pub fn collect_probe_data<T: Scalar>(
    params: &TransformerParams<T>,
    adapters: &AdapterSet<T>,
    windows: &[Vec<u32>],
    layer: usize,
    case: NegativeCase,
    n_per_class: usize,
    seed: u64,
) -> Result<ProbeData<T>> {
    let mut all = collect(params, adapters, windows, &[layer], case, n_per_class, seed)?;
    Ok(all.remove(0))
}

/// Probe data for every layer from one shared position sample.
pub fn collect_probe_data_all_layers<T: Scalar>(
    params: &TransformerParams<T>,
    adapters: &AdapterSet<T>,
    windows: &[Vec<u32>],
    case: NegativeCase,
    n_per_class: usize,
    seed: u64,
) -> Result<Vec<ProbeData<T>>> {
    let layers: Vec<usize> = (1..=adapters.n_layers()).collect();
    collect(params, adapters, windows, &layers, case, n_per_class, seed)
}

fn collect<T: Scalar>(
    params: &TransformerParams<T>,
    adapters: &AdapterSet<T>,
    windows: &[Vec<u32>],
    layers: &[usize],
    case: NegativeCase,
    n_per_class: usize,
    seed: u64,
) -> Result<Vec<ProbeData<T>>> {
    let n_layers = adapters.n_layers();
    if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > n_layers) {
        return Err(Error::invalid(format!("layer {bad} outside 1..={n_layers}")));
    }
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be positive"));
    }
    let positions = sample_positions(windows, n_per_class, seed)?;
    let d = params.config.d_model;
    let mut out: Vec<ProbeData<T>> = layers
        .iter()
        .map(|&layer| ProbeData {
            layer,
            case,
            features: Tensor2D::zeros(2 * n_per_class, d),
            labels: (0..2 * n_per_class).map(|i| i < n_per_class).collect(),
            positions: positions.clone(),
        })
        .collect();
    let full = adapters.view();
    let none = adapters.with_mask(vec![true; n_layers])?;
    let mut row = 0;
    for (w, ps) in by_window(&positions) {
        let tokens = &windows[w];
        let pos_trace = model_forward(params, tokens, Some(&full), true)?.trace.expect("trace");
        let case1 = match case {
            NegativeCase::Case1 => Some(model_forward(params, tokens, Some(&none), true)?.trace.expect("trace")),
            NegativeCase::Case2 => None,
        };
        for (k, data) in out.iter_mut().enumerate() {
            let l = layers[k] - 1;
            let neg_layer = match &case1 {
                Some(t) => t.layers[l].x_out.clone(),
                None => {
                    let mut mask = vec![false; n_layers];
                    mask[l] = true;
                    let view = adapters.with_mask(mask)?;
                    // Layers above l do not influence x_out at l, so a prefix of
                    // the stack is enough.
                    model_forward(params, tokens, Some(&view), true)?.trace.expect("trace").layers[l].x_out.clone()
                }
            };
            for (i, &p) in ps.iter().enumerate() {
                data.features.row_mut(row + i).copy_from_slice(pos_trace.layers[l].x_out.row(p));
                data.features
                    .row_mut(n_per_class + row + i)
                    .copy_from_slice(neg_layer.row(p));
            }
        }
        row += ps.len();
    }
    Ok(out)
}

/// Mean-difference score per feature and the features ordered by `|s|`
/// descending (ties by ascending index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdScores {
    pub scores: Vec<f64>,
    pub ranking: Vec<usize>,
    pub n_positive: usize,
    pub n_negative: usize,
}

pub fn mmd_rank<T: Scalar>(x: &Tensor2D<T>, labels: &[bool]) -> Result<MmdScores> {
    if labels.len() != x.rows() {
        return Err(Error::invalid(format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let d = x.cols();
    let mut pos = vec![0.0f64; d];
    let mut neg = vec![0.0f64; d];
    for (r, &y) in labels.iter().enumerate() {
        let acc = if y { &mut pos } else { &mut neg };
        for (a, v) in acc.iter_mut().zip(x.row(r)) {
            *a += v.as_f64();
        }
    }
    let scores: Vec<f64> = pos
        .iter()
        .zip(&neg)
        .map(|(p, n)| p / n_pos as f64 - n / n_neg as f64)
        .collect();
    let mut ranking: Vec<usize> = (0..d).collect();
    ranking.sort_by(|&a, &b| scores[b].abs().total_cmp(&scores[a].abs()).then(a.cmp(&b)));
    Ok(MmdScores {
        scores,
        ranking,
        n_positive: n_pos,
        n_negative: n_neg,
    })
}

/// `{1, 8, 16, 32, 64, 128, 256, 512}` restricted to `k ≤ d`.
pub fn k_grid(d: usize) -> Vec<usize> {
    [1, 8, 16, 32, 64, 128, 256, 512].into_iter().filter(|&k| k <= d).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub layer: usize,
    pub k: usize,
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSweep {
    pub negative_case: NegativeCase,
    pub seed: u64,
    pub entries: Vec<ProbeEntry>,
    /// MMD ranking of each layer, computed on its training split.
    pub rankings: Vec<MmdScores>,
}

impl ProbeSweep {
    pub fn accuracy(&self, layer: usize, k: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.k == k)
            .map(|e| e.accuracy)
    }

    pub fn to_csv(&self) -> String {
        csv(
            &["layer", "k", "accuracy", "n_train", "n_test"],
            self.entries.iter().map(|e| {
                vec![
                    e.layer.to_string(),
                    e.k.to_string(),
                    e.accuracy.to_string(),
                    e.n_train.to_string(),
                    e.n_test.to_string(),
                ]
            }),
        )
    }
}

/// Fixed 80/20 split over position pairs; MMD ranking on the training rows; one probe per `k` on
/// the top-k features; held-out accuracy.
pub fn probe_sweep<T: Scalar>(
    data: &[ProbeData<T>],
    ks: &[usize],
    seed: u64,
    cfg: &LogisticConfig,
) -> Result<ProbeSweep> {
    let case = data.first().map_or(NegativeCase::Case2, |d| d.case);
    let mut entries = Vec::new();
    let mut rankings = Vec::new();
    for layer in data {
        let n = layer.features.rows();
        let d = layer.features.cols();
        if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > d) {
            return Err(Error::invalid(format!("k = {bad} outside 1..={d}")));
        }
        // Rows i and i + n/2 are the same position with and without the
        // adapter; a pair never straddles the split, otherwise the test row's
        // near-twin sits in the training set with the opposite label.
        if n % 2 != 0 || (0..n / 2).any(|i| !layer.labels[i] || layer.labels[i + n / 2]) {
            return Err(Error::invalid("probe data must hold positives then their paired negatives"));
        }
        let mut pairs: Vec<usize> = (0..n / 2).collect();
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train_pairs = (pairs.len() as f64 * 0.8).round() as usize;
        let rows = |ps: &[usize]| -> Vec<usize> { ps.iter().copied().chain(ps.iter().map(|&i| i + n / 2)).collect() };
        let train_idx = rows(&pairs[..n_train_pairs]);
        let test_idx = rows(&pairs[n_train_pairs..]);
        let (train_idx, test_idx) = (&train_idx[..], &test_idx[..]);
        let x_train = layer.features.select_rows(train_idx);
        let y_train: Vec<bool> = train_idx.iter().map(|&i| layer.labels[i]).collect();
        let x_test = layer.features.select_rows(test_idx);
        let y_test: Vec<bool> = test_idx.iter().map(|&i| layer.labels[i]).collect();
        let mmd = mmd_rank(&x_train, &y_train)?;
        for &k in ks {
            let probe = logistic_fit(&x_train, &mmd.ranking[..k], &y_train, cfg)?;
            entries.push(ProbeEntry {
                layer: layer.layer,
                k,
                accuracy: probe.accuracy(&x_test, &y_test),
                n_train: train_idx.len(),
                n_test: test_idx.len(),
            });
        }
        rankings.push(mmd);
    }
    Ok(ProbeSweep {
        negative_case: case,
        seed,
        entries,
        rankings,
    })
}
