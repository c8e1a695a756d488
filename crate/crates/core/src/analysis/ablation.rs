use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSet, LayerSpan};
use crate::error::{Error, Result};
use crate::model::TransformerParams;
use crate::scalar::Scalar;
use crate::training::perplexity;

use super::csv;

pub const DEFAULT_REPORT_CAP: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub first: usize,
    pub last: usize,
    pub ppl: f64,
    /// `ppl - full_ppl`, never capped.
    pub delta_ppl: f64,
}

/// Perplexity increase for every span of consecutive adapter layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub n_layers: usize,
    pub full_ppl: f64,
    pub report_cap: f64,
    /// Spans in order `(1,1), (1,2), …, (1,L), (2,2), …, (L,L)`.
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    pub fn cell(&self, first: usize, last: usize) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.first == first && c.last == last)
    }

    /// `L × L` matrix of capped Δppl, `None` below the diagonal.
    pub fn rendered(&self) -> Vec<Vec<Option<f64>>> {
        let mut m = vec![vec![None; self.n_layers]; self.n_layers];
        for c in &self.cells {
            m[c.first - 1][c.last - 1] = Some(c.delta_ppl.min(self.report_cap));
        }
        m
    }

    pub fn single_layer_deltas(&self) -> Vec<f64> {
        (1..=self.n_layers)
            .map(|l| self.cell(l, l).map_or(f64::NAN, |c| c.delta_ppl))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        csv(
            &["first", "last", "ppl", "delta_ppl", "delta_ppl_capped"],
            self.cells.iter().map(|c| {
                vec![
                    c.first.to_string(),
                    c.last.to_string(),
                    c.ppl.to_string(),
                    c.delta_ppl.to_string(),
                    c.delta_ppl.min(self.report_cap).to_string(),
                ]
            }),
        )
    }
}

/// Ablates every span `[first, last]`, or only `spans` when given.
pub fn ablation_sweep<T: Scalar>(
    params: &TransformerParams<T>,
    adapters: &AdapterSet<T>,
    windows: &[Vec<u32>],
    spans: Option<&[LayerSpan]>,
) -> Result<AblationGrid> {
    let n = adapters.n_layers();
    let full_ppl = perplexity(params, Some(&adapters.view()), windows)?;
    let all: Vec<LayerSpan> = (1..=n).flat_map(|a| (a..=n).map(move |b| LayerSpan::new(a, b))).collect();
    let spans = spans.unwrap_or(&all);
    let mut cells = Vec::with_capacity(spans.len());
    for &span in spans {
        if span.is_empty() {
            return Err(Error::invalid("ablation grid spans must cover at least one layer"));
        }
        let ppl = perplexity(params, Some(&adapters.ablate(span)?), windows)?;
        cells.push(AblationCell {
            first: span.first,
            last: span.last,
            ppl,
            delta_ppl: ppl - full_ppl,
        });
    }
    Ok(AblationGrid {
        n_layers: n,
        full_ppl,
        report_cap: DEFAULT_REPORT_CAP,
        cells,
    })
}
