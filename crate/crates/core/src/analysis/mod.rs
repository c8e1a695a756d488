//! The experiment families run over trained checkpoints: logit lens, norm
//! profiles, adapter ablation, MMD probing with feature interventions, and
//! PCA alignment. Every report serializes to JSON and to a flat CSV table.

mod ablation;
mod alignment;
mod intervene;
mod lens;
mod norms;
mod probe;

pub use ablation::{ablation_sweep, AblationCell, AblationGrid, DEFAULT_REPORT_CAP};
pub use alignment::{collect_property_reps, pca_alignment, AlignmentReport, LabeledReps, ProjectedPoint};
pub use intervene::{
    feature_sets, intervene, intervention_sweep, n_features_grid, InterventionEntry, InterventionReport, Scope, Selection,
};
pub use lens::{logit_lens, top_k, LensLayer, LensOptions, LensReport};
pub use norms::{norm_profile, LayerNorms, NormProfile, DEFAULT_NORM_TOKENS};
pub use probe::{
    collect_probe_data, collect_probe_data_all_layers, k_grid, mmd_rank, probe_sweep, MmdScores, NegativeCase, ProbeData,
    ProbeEntry, ProbeSweep, DEFAULT_PER_CLASS,
};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `n` distinct `(window, position)` pairs drawn uniformly from `windows`,
/// where position `i` of a window of length `len` ranges over `0..len - 1`
/// (the positions that have a prediction target). Sorted by window, then
/// position.
pub(crate) fn sample_positions(windows: &[Vec<u32>], n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let per: Vec<usize> = windows.iter().map(|w| w.len().saturating_sub(1)).collect();
    let total: usize = per.iter().sum();
    if n > total {
        return Err(Error::invalid(format!("{n} positions requested, only {total} available")));
    }
    let mut flat: Vec<usize> = sample(&mut ChaCha8Rng::seed_from_u64(seed), total, n).into_vec();
    flat.sort_unstable();
    let mut out = Vec::with_capacity(n);
    let (mut w, mut base) = (0usize, 0usize);
    for idx in flat {
        while idx >= base + per[w] {
            base += per[w];
            w += 1;
        }
        out.push((w, idx - base));
    }
    Ok(out)
}

/// Groups sorted `(window, position)` pairs by window.
pub(crate) fn by_window(positions: &[(usize, usize)]) -> Vec<(usize, Vec<usize>)> {
    let mut out: Vec<(usize, Vec<usize>)> = Vec::new();
    for &(w, p) in positions {
        match out.last_mut() {
            Some((lw, ps)) if *lw == w => ps.push(p),
            _ => out.push((w, vec![p])),
        }
    }
    out
}

/// Writes rows as CSV with a header line.
pub(crate) fn csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}
