use serde::{Deserialize, Serialize};

use crate::adapters::AdapterView;
use crate::error::Result;
use crate::model::{model_forward, TransformerParams};
use crate::numerics::tensor::dot;
use crate::scalar::Scalar;

use super::{by_window, csv, sample_positions};

pub const DEFAULT_NORM_TOKENS: usize = 6500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorms {
    pub layer: usize,
    pub adapter_out: f64,
    pub ffn_out: f64,
    pub x_ffn: f64,
    pub x_out: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormProfile {
    pub n_tokens: usize,
    pub seed: u64,
    pub layers: Vec<LayerNorms>,
}

impl NormProfile {
    pub fn to_csv(&self) -> String {
        csv(
            &["layer", "adapter_out", "ffn_out", "x_ffn", "x_out"],
            self.layers.iter().map(|l| {
                vec![
                    l.layer.to_string(),
                    l.adapter_out.to_string(),
                    l.ffn_out.to_string(),
                    l.x_ffn.to_string(),
                    l.x_out.to_string(),
                ]
            }),
        )
    }
}

fn norm<T: Scalar>(v: &[T]) -> f64 {
    dot(v, v).as_f64().sqrt()
}

/// Mean L2 norms of the adapter output, FFN output, and layer output at
/// `n_tokens` randomly chosen positions.
pub fn norm_profile<T: Scalar>(
    params: &TransformerParams<T>,
    adapters: Option<&AdapterView<'_, T>>,
    windows: &[Vec<u32>],
    n_tokens: usize,
    seed: u64,
) -> Result<NormProfile> {
    let positions = sample_positions(windows, n_tokens, seed)?;
    let n_layers = params.config.n_layers;
    let mut sums = vec![[0.0f64; 4]; n_layers];
    for (w, ps) in by_window(&positions) {
        let out = model_forward(params, &windows[w], adapters, true)?;
        let trace = out.trace.expect("trace requested");
        for (l, lt) in trace.layers.iter().enumerate() {
            for &p in &ps {
                sums[l][0] += norm(lt.adapter_out.row(p));
                sums[l][1] += norm(lt.ffn_out.row(p));
                sums[l][2] += norm(lt.x_ffn.row(p));
                sums[l][3] += norm(lt.x_out.row(p));
            }
        }
    }
    let n = n_tokens.max(1) as f64;
    Ok(NormProfile {
        n_tokens,
        seed,
        layers: sums
            .iter()
            .enumerate()
            .map(|(l, s)| LayerNorms {
                layer: l + 1,
                adapter_out: s[0] / n,
                ffn_out: s[1] / n,
                x_ffn: s[2] / n,
                x_out: s[3] / n,
            })
            .collect(),
    })
}
