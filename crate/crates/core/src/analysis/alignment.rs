use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterView;
use crate::corpus::{Property, SyntheticLanguageSpec};
use crate::error::{Error, Result};
use crate::model::{model_forward, TransformerParams};
use crate::numerics::{cosine_similarity, pca_fit, Tensor2D};
use crate::scalar::Scalar;

use super::{by_window, csv};

const N_COMPONENTS: usize = 2;

/// Layer outputs at token positions whose word carries `property`, with the
/// word's class for that property.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledReps<T> {
    pub layer: usize,
    pub property: Property,
    pub features: Tensor2D<T>,
    pub classes: Vec<usize>,
}

impl<T> LabeledReps<T> {
    pub fn n_classes(&self) -> usize {
        let mut c = self.classes.clone();
        c.sort_unstable();
        c.dedup();
        c.len()
    }
}

/// Collects `x_out` at every listed layer (1-based) for up to `max_tokens`
/// labelled positions, sampled without replacement. The same positions are
/// used for every layer.
#[allow(clippy::too_many_arguments)]
pub fn collect_property_reps<T: Scalar>(
    params: &TransformerParams<T>,
    adapters: Option<&AdapterView<'_, T>>,
    windows: &[Vec<u32>],
    spec: &SyntheticLanguageSpec,
    property: Property,
    layers: &[usize],
    max_tokens: usize,
    seed: u64,
) -> Result<Vec<LabeledReps<T>>> {
    let n_layers = params.config.n_layers;
    if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > n_layers) {
        return Err(Error::invalid(format!("layer {bad} outside 1..={n_layers}")));
    }
    let mut candidates = Vec::new();
    for (w, win) in windows.iter().enumerate() {
        for (p, t) in win.iter().enumerate() {
            if let Some(c) = spec.property_labels.get(t).and_then(|wp| property.class_of(wp)) {
                candidates.push((w, p, c));
            }
        }
    }
    if candidates.len() > max_tokens {
        let mut keep = sample(&mut ChaCha8Rng::seed_from_u64(seed), candidates.len(), max_tokens).into_vec();
        keep.sort_unstable();
        candidates = keep.into_iter().map(|i| candidates[i]).collect();
    }
    let positions: Vec<(usize, usize)> = candidates.iter().map(|&(w, p, _)| (w, p)).collect();
    let classes: Vec<usize> = candidates.iter().map(|&(_, _, c)| c).collect();
    let d = params.config.d_model;
    let mut out: Vec<LabeledReps<T>> = layers
        .iter()
        .map(|&layer| LabeledReps {
            layer,
            property,
            features: Tensor2D::zeros(positions.len(), d),
            classes: classes.clone(),
        })
        .collect();
    let mut row = 0;
    for (w, ps) in by_window(&positions) {
        let trace = model_forward(params, &windows[w], adapters, true)?.trace.expect("trace requested");
        for reps in out.iter_mut() {
            let x = &trace.layers[reps.layer - 1].x_out;
            for (i, &p) in ps.iter().enumerate() {
                reps.features.row_mut(row + i).copy_from_slice(x.row(p));
            }
        }
        row += ps.len();
    }
    Ok(out)
}

/// A target representation in the source PCA plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub layer: usize,
    pub property: Property,
    /// `cosines[i][j] = |cos(PC_i^src, PC_j^tgt)|`.
    pub cosines: [[f64; 2]; 2],
    pub source_variance: Vec<f64>,
    pub target_variance: Vec<f64>,
    pub n_source: usize,
    pub n_target: usize,
    /// Target points projected through the source-fitted components.
    pub projected: Vec<ProjectedPoint>,
}

impl AlignmentReport {
    /// Mean of the two diagonal entries.
    pub fn mean_diagonal(&self) -> f64 {
        (self.cosines[0][0] + self.cosines[1][1]) / 2.0
    }

    pub fn to_csv(&self) -> String {
        csv(
            &["x", "y", "class"],
            self.projected
                .iter()
                .map(|p| vec![p.x.to_string(), p.y.to_string(), p.class.to_string()]),
        )
    }
}

/// Fits two principal components to each language separately and compares
/// them; also projects the target points through the source components.
pub fn pca_alignment<T: Scalar>(source: &LabeledReps<T>, target: &LabeledReps<T>) -> Result<AlignmentReport> {
    for (name, r) in [("source", source), ("target", target)] {
        if r.features.rows() < N_COMPONENTS + 1 {
            return Err(Error::invalid(format!(
                "{name} has {} samples, PCA alignment needs at least {}",
                r.features.rows(),
                N_COMPONENTS + 1
            )));
        }
        if r.n_classes() < 2 {
            return Err(Error::invalid(format!("{name} representations cover fewer than two classes")));
        }
    }
    let src = pca_fit(&source.features, N_COMPONENTS)?;
    let tgt = pca_fit(&target.features, N_COMPONENTS)?;
    let mut cosines = [[0.0; 2]; 2];
    for (i, row) in cosines.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c = cosine_similarity(src.component(i), tgt.component(j))?.as_f64().abs().min(1.0);
        }
    }
    let coords = src.project(&target.features)?;
    let projected = (0..coords.rows())
        .map(|r| ProjectedPoint {
            x: coords.get(r, 0).as_f64(),
            y: coords.get(r, 1).as_f64(),
            class: target.classes[r],
        })
        .collect();
    Ok(AlignmentReport {
        layer: target.layer,
        property: target.property,
        cosines,
        source_variance: src.explained_variance.iter().map(|v| v.as_f64()).collect(),
        target_variance: tgt.explained_variance.iter().map(|v| v.as_f64()).collect(),
        n_source: source.features.rows(),
        n_target: target.features.rows(),
        projected,
    })
}
