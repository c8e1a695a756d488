use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSet, FeatureIntervention, InterventionMode};
use crate::error::{Error, Result};
use crate::model::TransformerParams;
use crate::scalar::Scalar;
use crate::training::perplexity;

use super::{csv, MmdScores};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Highest-ranked MMD features.
    Most,
    /// Lowest-ranked MMD features.
    Least,
    Random,
}

/// Which adapters are intervened on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    AllLayers,
    /// A single 1-based layer.
    Layer(usize),
}

/// Per-layer feature sets for one selection rule. `rankings[l]` is the MMD
/// ranking of layer `l + 1`.
pub fn feature_sets(
    rankings: &[MmdScores],
    selection: Selection,
    n_features: usize,
    scope: Scope,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let n_layers = rankings.len();
    if let Scope::Layer(l) = scope {
        if l == 0 || l > n_layers {
            return Err(Error::invalid(format!("layer {l} outside 1..={n_layers}")));
        }
    }
    let mut out = Vec::with_capacity(n_layers);
    for (l, r) in rankings.iter().enumerate() {
        let d = r.ranking.len();
        if n_features > d {
            return Err(Error::invalid(format!("{n_features} features requested, adapter output has {d}")));
        }
        let active = match scope {
            Scope::AllLayers => true,
            Scope::Layer(k) => k == l + 1,
        };
        if !active {
            out.push(Vec::new());
            continue;
        }
        let mut f = match selection {
            Selection::Most => r.ranking[..n_features].to_vec(),
            Selection::Least => r.ranking[d - n_features..].to_vec(),
            Selection::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(l as u64));
                sample(&mut rng, d, n_features).into_vec()
            }
        };
        f.sort_unstable();
        out.push(f);
    }
    Ok(out)
}

/// Target perplexity with the selected adapter-output features zeroed or
/// mean-replaced before the residual addition.
#[allow(clippy::too_many_arguments)]
pub fn intervene<T: Scalar>(
    params: &TransformerParams<T>,
    adapters: &AdapterSet<T>,
    windows: &[Vec<u32>],
    rankings: &[MmdScores],
    selection: Selection,
    n_features: usize,
    mode: InterventionMode,
    scope: Scope,
    seed: u64,
) -> Result<f64> {
    if rankings.len() != adapters.n_layers() {
        return Err(Error::invalid("one MMD ranking per adapter layer is required"));
    }
    let d = adapters.output_dim();
    if n_features > d {
        return Err(Error::invalid(format!("{n_features} features requested, adapter output has {d}")));
    }
    let features = feature_sets(rankings, selection, n_features, scope, seed)?;
    let iv = FeatureIntervention { features, mode };
    let view = adapters.view().with_intervention(&iv);
    perplexity(params, Some(&view), windows)
}

/// `{1, 2, 4, …}` up to `d`, with `d` itself always included.
pub fn n_features_grid(d: usize) -> Vec<usize> {
    let mut g: Vec<usize> = std::iter::successors(Some(1usize), |&n| Some(n * 2)).take_while(|&n| n <= d).collect();
    if g.last() != Some(&d) && d > 0 {
        g.push(d);
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionEntry {
    pub n_features: usize,
    pub selection: Selection,
    pub mode: InterventionMode,
    pub ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub scope: Scope,
    pub seed: u64,
    /// Perplexity without any intervention.
    pub baseline_ppl: f64,
    pub entries: Vec<InterventionEntry>,
}

impl InterventionReport {
    pub fn ppl(&self, n_features: usize, selection: Selection, mode: InterventionMode) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.n_features == n_features && e.selection == selection && e.mode == mode)
            .map(|e| e.ppl)
    }

    pub fn to_csv(&self) -> String {
        csv(
            &["n_features", "selection", "mode", "ppl", "baseline_ppl"],
            self.entries.iter().map(|e| {
                vec![
                    e.n_features.to_string(),
                    label(&e.selection),
                    label(&e.mode),
                    e.ppl.to_string(),
                    self.baseline_ppl.to_string(),
                ]
            }),
        )
    }
}

/// The serde name of a unit enum variant.
fn label<S: Serialize>(v: &S) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Every `(n_features, selection, mode)` combination over `grid`.
#[allow(clippy::too_many_arguments)]
pub fn intervention_sweep<T: Scalar>(
    params: &TransformerParams<T>,
    adapters: &AdapterSet<T>,
    windows: &[Vec<u32>],
    rankings: &[MmdScores],
    grid: &[usize],
    modes: &[InterventionMode],
    scope: Scope,
    seed: u64,
) -> Result<InterventionReport> {
    let baseline_ppl = perplexity(params, Some(&adapters.view()), windows)?;
    let mut entries = Vec::new();
    for &mode in modes {
        for &n in grid {
            for selection in [Selection::Most, Selection::Least, Selection::Random] {
                let ppl = intervene(params, adapters, windows, rankings, selection, n, mode, scope, seed)?;
                entries.push(InterventionEntry {
                    n_features: n,
                    selection,
                    mode,
                    ppl,
                });
            }
        }
    }
    Ok(InterventionReport {
        scope,
        seed,
        baseline_ppl,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranking(order: Vec<usize>) -> MmdScores {
        MmdScores {
            scores: vec![0.0; order.len()],
            ranking: order,
            n_positive: 1,
            n_negative: 1,
        }
    }

    #[test]
    fn selections() {
        let r = vec![ranking(vec![3, 1, 0, 2]), ranking(vec![0, 1, 2, 3])];
        assert_eq!(feature_sets(&r, Selection::Most, 2, Scope::AllLayers, 0).unwrap(), vec![vec![1, 3], vec![0, 1]]);
        assert_eq!(feature_sets(&r, Selection::Least, 1, Scope::AllLayers, 0).unwrap(), vec![vec![2], vec![3]]);
        assert_eq!(feature_sets(&r, Selection::Most, 1, Scope::Layer(2), 0).unwrap(), vec![vec![], vec![0]]);
        let rand = feature_sets(&r, Selection::Random, 3, Scope::AllLayers, 7).unwrap();
        assert_eq!(rand, feature_sets(&r, Selection::Random, 3, Scope::AllLayers, 7).unwrap());
        assert!(rand.iter().all(|f| f.len() == 3));
        assert!(feature_sets(&r, Selection::Most, 5, Scope::AllLayers, 0).is_err());
        assert!(feature_sets(&r, Selection::Most, 1, Scope::Layer(3), 0).is_err());
    }

    #[test]
    fn grid_is_powers_of_two_plus_width() {
        assert_eq!(n_features_grid(8), vec![1, 2, 4, 8]);
        assert_eq!(n_features_grid(12), vec![1, 2, 4, 8, 12]);
    }
}
