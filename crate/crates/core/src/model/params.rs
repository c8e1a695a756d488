use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, PositionalKind};
use crate::numerics::Tensor2D;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    /// `1 × d`
    pub gain: Tensor2D<T>,
    /// `1 × d`
    pub bias: Tensor2D<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    fn new(d: usize) -> Self {
        Self {
            gain: Tensor2D::filled(1, d, T::one()),
            bias: Tensor2D::zeros(1, d),
        }
    }
}

/// Attention projections, each `d × d`, applied as `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub query: Tensor2D<T>,
    pub key: Tensor2D<T>,
    pub value: Tensor2D<T>,
    pub output: Tensor2D<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams<T> {
    /// `d × d_ffn`
    pub w_in: Tensor2D<T>,
    /// `1 × d_ffn`
    pub b_in: Tensor2D<T>,
    /// `d_ffn × d`
    pub w_out: Tensor2D<T>,
    /// `1 × d`
    pub b_out: Tensor2D<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln_attn: LayerNormParams<T>,
    pub attn: AttentionParams<T>,
    pub ln_ffn: LayerNormParams<T>,
    pub ffn: FfnParams<T>,
}

/// All pre-trained weights of the transformer. Input and output embeddings
/// are independent matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams<T> {
    pub config: ModelConfig,
    /// `V × d`
    pub token_embedding: Tensor2D<T>,
    /// `max_seq_len × d`, present for learned absolute positions only.
    pub positional: Option<Tensor2D<T>>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: LayerNormParams<T>,
    /// `d × V`
    pub lm_head: Tensor2D<T>,
}

pub const TOKEN_EMBEDDING: &str = "embed.token";
pub const POSITIONAL_EMBEDDING: &str = "embed.position";
pub const LM_HEAD: &str = "lm_head";

fn layer_names(l: usize) -> [String; 12] {
    let p = format!("layers.{l}");
    [
        format!("{p}.ln_attn.gain"),
        format!("{p}.ln_attn.bias"),
        format!("{p}.attn.query"),
        format!("{p}.attn.key"),
        format!("{p}.attn.value"),
        format!("{p}.attn.output"),
        format!("{p}.ln_ffn.gain"),
        format!("{p}.ln_ffn.bias"),
        format!("{p}.ffn.w_in"),
        format!("{p}.ffn.b_in"),
        format!("{p}.ffn.w_out"),
        format!("{p}.ffn.b_out"),
    ]
}

impl<T: Scalar> LayerParams<T> {
    fn tensors(&self) -> [&Tensor2D<T>; 12] {
        [
            &self.ln_attn.gain,
            &self.ln_attn.bias,
            &self.attn.query,
            &self.attn.key,
            &self.attn.value,
            &self.attn.output,
            &self.ln_ffn.gain,
            &self.ln_ffn.bias,
            &self.ffn.w_in,
            &self.ffn.b_in,
            &self.ffn.w_out,
            &self.ffn.b_out,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor2D<T>; 12] {
        [
            &mut self.ln_attn.gain,
            &mut self.ln_attn.bias,
            &mut self.attn.query,
            &mut self.attn.key,
            &mut self.attn.value,
            &mut self.attn.output,
            &mut self.ln_ffn.gain,
            &mut self.ln_ffn.bias,
            &mut self.ffn.w_in,
            &mut self.ffn.b_in,
            &mut self.ffn.w_out,
            &mut self.ffn.b_out,
        ]
    }
}

impl<T: Scalar> TransformerParams<T> {
    /// Gaussian initialization (std 0.02, residual output projections scaled
    /// by `1/√(2L)`), unit norm gains, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v) = (config.d_model, config.d_ffn, config.vocab_size);
        let std = 0.02;
        let out_std = std / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let mut gauss = |rows: usize, cols: usize, s: f64| -> Tensor2D<T> {
            let dist = Normal::new(0.0, s).expect("positive std");
            Tensor2D::from_fn(rows, cols, |_, _| T::of(dist.sample(&mut rng)))
        };
        let token_embedding = gauss(v, d, std);
        let positional = match config.positional {
            PositionalKind::LearnedAbsolute => Some(gauss(config.max_seq_len, d, std)),
            PositionalKind::Rotary => None,
        };
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln_attn: LayerNormParams::new(d),
                attn: AttentionParams {
                    query: gauss(d, d, std),
                    key: gauss(d, d, std),
                    value: gauss(d, d, std),
                    output: gauss(d, d, out_std),
                },
                ln_ffn: LayerNormParams::new(d),
                ffn: FfnParams {
                    w_in: gauss(d, f, std),
                    b_in: Tensor2D::zeros(1, f),
                    w_out: gauss(f, d, out_std),
                    b_out: Tensor2D::zeros(1, d),
                },
            })
            .collect();
        let lm_head = gauss(d, v, std);
        Ok(Self {
            config: config.clone(),
            token_embedding,
            positional,
            layers,
            final_norm: LayerNormParams::new(d),
            lm_head,
        })
    }

    /// Every tensor with its registry name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor2D<T>)> {
        let mut out = vec![(TOKEN_EMBEDDING.to_string(), &self.token_embedding)];
        if let Some(p) = &self.positional {
            out.push((POSITIONAL_EMBEDDING.to_string(), p));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer_names(l).into_iter().zip(layer.tensors()));
        }
        out.push(("final_norm.gain".to_string(), &self.final_norm.gain));
        out.push(("final_norm.bias".to_string(), &self.final_norm.bias));
        out.push((LM_HEAD.to_string(), &self.lm_head));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor2D<T>)> {
        let mut out = vec![(TOKEN_EMBEDDING.to_string(), &mut self.token_embedding)];
        if let Some(p) = &mut self.positional {
            out.push((POSITIONAL_EMBEDDING.to_string(), p));
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer_names(l).into_iter().zip(layer.tensors_mut()));
        }
        out.push(("final_norm.gain".to_string(), &mut self.final_norm.gain));
        out.push(("final_norm.bias".to_string(), &mut self.final_norm.bias));
        out.push((LM_HEAD.to_string(), &mut self.lm_head));
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.named_tensors().into_iter().map(|(n, _)| n).collect()
    }

    pub fn n_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Replaces the tensor registered under `name`, checking its shape.
    pub fn set_tensor(&mut self, name: &str, value: Tensor2D<T>) -> Result<()> {
        for (n, t) in self.named_tensors_mut() {
            if n == name {
                if t.shape() != value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "set_tensor",
                        left_rows: t.rows(),
                        left_cols: t.cols(),
                        right_rows: value.rows(),
                        right_cols: value.cols(),
                    });
                }
                *t = value;
                return Ok(());
            }
        }
        Err(Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn cast<U: Scalar>(&self) -> TransformerParams<U> {
        let ln = |p: &LayerNormParams<T>| LayerNormParams {
            gain: p.gain.cast(),
            bias: p.bias.cast(),
        };
        TransformerParams {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            positional: self.positional.as_ref().map(Tensor2D::cast),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln_attn: ln(&l.ln_attn),
                    attn: AttentionParams {
                        query: l.attn.query.cast(),
                        key: l.attn.key.cast(),
                        value: l.attn.value.cast(),
                        output: l.attn.output.cast(),
                    },
                    ln_ffn: ln(&l.ln_ffn),
                    ffn: FfnParams {
                        w_in: l.ffn.w_in.cast(),
                        b_in: l.ffn.b_in.cast(),
                        w_out: l.ffn.w_out.cast(),
                        b_out: l.ffn.b_out.cast(),
                    },
                })
                .collect(),
            final_norm: ln(&self.final_norm),
            lm_head: self.lm_head.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = ModelConfig::compact();
        let a = TransformerParams::<f32>::init(&cfg, 3).unwrap();
        let b = TransformerParams::<f32>::init(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.token_embedding.shape(), (cfg.vocab_size, cfg.d_model));
        assert_eq!(a.lm_head.shape(), (cfg.d_model, cfg.vocab_size));
        assert_ne!(a.token_embedding, a.lm_head.transpose());
        let names = a.tensor_names();
        assert_eq!(names.len(), 2 + 12 * cfg.n_layers + 3);
        assert!(names.contains(&"layers.7.ffn.w_out".to_string()));
    }

    #[test]
    fn set_tensor_checks_shape() {
        let cfg = ModelConfig::compact();
        let mut p = TransformerParams::<f64>::init(&cfg, 0).unwrap();
        assert!(p.set_tensor(LM_HEAD, Tensor2D::zeros(1, 1)).is_err());
        p.set_tensor(LM_HEAD, Tensor2D::zeros(cfg.d_model, cfg.vocab_size)).unwrap();
        assert!(p.lm_head.data().iter().all(|&v| v == 0.0));
        assert!(p.set_tensor("nope", Tensor2D::zeros(1, 1)).is_err());
    }
}
