//! Bottleneck (Pfeiffer) and low-rank (LoRA) adapters, their initialization,
//! ablation views, feature interventions and the adaptation freezing mask.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{TransformerParams, LM_HEAD, TOKEN_EMBEDDING};
use crate::model::ModelConfig;
use crate::numerics::tensor::{dot, Tensor2D};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    Pfeiffer,
    Lora,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub mode: AdapterMode,
    /// `d_model / bottleneck_reduction` is the Pfeiffer bottleneck width.
    pub reduction_factor: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub init_std: f64,
    pub trainable_embeddings: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            mode: AdapterMode::Pfeiffer,
            reduction_factor: 16,
            lora_rank: 8,
            lora_scale: 1.0,
            init_std: 0.02,
            trainable_embeddings: true,
        }
    }
}

/// `adapter(x) = W₂ σ(W₁ x)`; no biases, no internal normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct PfeifferAdapter<T> {
    /// `b × d`
    pub w1: Tensor2D<T>,
    /// `d × b`
    pub w2: Tensor2D<T>,
    pub activation: Activation,
}

impl<T: Scalar> PfeifferAdapter<T> {
    pub fn new(w1: Tensor2D<T>, w2: Tensor2D<T>) -> Result<Self> {
        let (b, d) = w1.shape();
        if w2.shape() != (d, b) || b >= d {
            return Err(Error::invalid(format!(
                "adapter W1 is {b}x{d} and W2 is {}x{}; need W2 = d x b with b < d",
                w2.rows(),
                w2.cols()
            )));
        }
        Ok(Self {
            w1,
            w2,
            activation: Activation::Relu,
        })
    }

    pub fn bottleneck(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_model(&self) -> usize {
        self.w1.cols()
    }
}

/// `scale · up · (down · x)`, with no non-linearity between the factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    /// `r × d_in`
    pub down: Tensor2D<T>,
    /// `d_out × r`
    pub up: Tensor2D<T>,
    pub scale: T,
}

impl<T: Scalar> LoraPair<T> {
    pub fn new(down: Tensor2D<T>, up: Tensor2D<T>, scale: T) -> Result<Self> {
        let (r, _) = down.shape();
        if up.cols() != r {
            return Err(Error::invalid(format!(
                "LoRA down is {}x{} but up is {}x{}",
                down.rows(),
                down.cols(),
                up.rows(),
                up.cols()
            )));
        }
        Ok(Self { down, up, scale })
    }

    pub fn rank(&self) -> usize {
        self.down.rows()
    }

    /// Applies the pair to a single vector.
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let hidden: Vec<T> = (0..self.rank()).map(|k| dot(self.down.row(k), x)).collect();
        (0..self.up.rows())
            .map(|i| self.scale * dot(self.up.row(i), &hidden))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerAdapter<T> {
    Pfeiffer(PfeifferAdapter<T>),
    /// `ffn_in` runs beside the first FFN sublayer, `ffn_out` beside the second.
    Lora { ffn_in: LoraPair<T>, ffn_out: LoraPair<T> },
}

/// One adapter unit per decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<T> {
    pub mode: AdapterMode,
    pub layers: Vec<LayerAdapter<T>>,
    pub trainable_embeddings: bool,
}

/// Which parameters may change during an optimization run.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FreezeMask {
    pub trainable: BTreeSet<String>,
}

impl FreezeMask {
    pub fn none() -> Self {
        Self::default()
    }

    /// Every base parameter is trainable (pre-training).
    pub fn all<T: Scalar>(params: &TransformerParams<T>) -> Self {
        Self {
            trainable: params.tensor_names().into_iter().collect(),
        }
    }

    /// Adapter parameters plus input and output embeddings; everything else
    /// frozen.
    pub fn adaptation<T: Scalar>(adapters: &AdapterSet<T>) -> Self {
        let mut trainable: BTreeSet<String> = adapters.tensor_names().into_iter().collect();
        if adapters.trainable_embeddings {
            trainable.insert(TOKEN_EMBEDDING.to_string());
            trainable.insert(LM_HEAD.to_string());
        }
        Self { trainable }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }
}

fn gaussian<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor2D<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor2D::from_fn(rows, cols, |_, _| T::of(dist.sample(rng)))
}

/// Down-projections Gaussian, up-projections zero, so a fresh set computes
/// exactly the base model.
pub fn init_adapters<T: Scalar>(
    model: &ModelConfig,
    cfg: &AdapterConfig,
    seed: u64,
) -> Result<AdapterSet<T>> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.d_model;
    let layers = match cfg.mode {
        AdapterMode::Pfeiffer => {
            let b = d / cfg.reduction_factor.max(1);
            if b == 0 || b >= d {
                return Err(Error::invalid(format!(
                    "reduction factor {} gives bottleneck {b} for d={d}",
                    cfg.reduction_factor
                )));
            }
            (0..model.n_layers)
                .map(|_| {
                    let w1 = gaussian(b, d, cfg.init_std, &mut rng);
                    LayerAdapter::Pfeiffer(PfeifferAdapter::new(w1, Tensor2D::zeros(d, b)).expect("shapes"))
                })
                .collect()
        }
        AdapterMode::Lora => {
            let r = cfg.lora_rank;
            let f = model.d_ffn;
            if r == 0 || r >= d.min(f) {
                return Err(Error::invalid(format!("LoRA rank {r} must be in 1..{}", d.min(f))));
            }
            let scale = T::of(cfg.lora_scale);
            (0..model.n_layers)
                .map(|_| {
                    let down1 = gaussian(r, d, cfg.init_std, &mut rng);
                    let down2 = gaussian(r, f, cfg.init_std, &mut rng);
                    LayerAdapter::Lora {
                        ffn_in: LoraPair::new(down1, Tensor2D::zeros(f, r), scale).expect("shapes"),
                        ffn_out: LoraPair::new(down2, Tensor2D::zeros(d, r), scale).expect("shapes"),
                    }
                })
                .collect()
        }
    };
    Ok(AdapterSet {
        mode: cfg.mode,
        layers,
        trainable_embeddings: cfg.trainable_embeddings,
    })
}

/// `W₂ σ(W₁ x)` for a single residual vector.
pub fn pfeiffer_forward<T: Scalar>(x: &[T], adapter: &PfeifferAdapter<T>) -> Vec<T> {
    let hidden: Vec<T> = (0..adapter.bottleneck())
        .map(|k| dot(adapter.w1.row(k), x).max(T::zero()))
        .collect();
    (0..adapter.d_model())
        .map(|i| dot(adapter.w2.row(i), &hidden))
        .collect()
}

/// Single-position FFN block with LoRA pairs beside both sublayers.
///
/// `x` is the FFN input. Returns `(x_ffn1, x_ffn2)` where
/// `x_ffn1 = gelu(x·W_in + b_in) + lora1(x)` and
/// `x_ffn2 = x_ffn1·W_out + b_out + lora2(x_ffn1)`.
pub fn lora_block_forward<T: Scalar>(
    x: &[T],
    ffn: &crate::model::params::FfnParams<T>,
    lora1: &LoraPair<T>,
    lora2: &LoraPair<T>,
) -> (Vec<T>, Vec<T>) {
    let f = ffn.w_in.cols();
    let mut pre = ffn.b_in.data().to_vec();
    for (p, &xv) in x.iter().enumerate() {
        for (o, &w) in pre.iter_mut().zip(ffn.w_in.row(p)) {
            *o += xv * w;
        }
    }
    let l1 = lora1.apply(x);
    let x_ffn1: Vec<T> = (0..f).map(|j| crate::model::forward::gelu(pre[j]) + l1[j]).collect();
    let mut out = ffn.b_out.data().to_vec();
    for (p, &hv) in x_ffn1.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(ffn.w_out.row(p)) {
            *o += hv * w;
        }
    }
    let l2 = lora2.apply(&x_ffn1);
    let x_ffn2 = out.iter().zip(&l2).map(|(&a, &b)| a + b).collect();
    (x_ffn1, x_ffn2)
}

impl<T: Scalar> AdapterSet<T> {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor2D<T>)> {
        let mut out = Vec::new();
        for (l, a) in self.layers.iter().enumerate() {
            match a {
                LayerAdapter::Pfeiffer(p) => {
                    out.push((format!("adapters.{l}.w1"), &p.w1));
                    out.push((format!("adapters.{l}.w2"), &p.w2));
                }
                LayerAdapter::Lora { ffn_in, ffn_out } => {
                    out.push((format!("adapters.{l}.lora1.down"), &ffn_in.down));
                    out.push((format!("adapters.{l}.lora1.up"), &ffn_in.up));
                    out.push((format!("adapters.{l}.lora2.down"), &ffn_out.down));
                    out.push((format!("adapters.{l}.lora2.up"), &ffn_out.up));
                }
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor2D<T>)> {
        let mut out = Vec::new();
        for (l, a) in self.layers.iter_mut().enumerate() {
            match a {
                LayerAdapter::Pfeiffer(p) => {
                    out.push((format!("adapters.{l}.w1"), &mut p.w1));
                    out.push((format!("adapters.{l}.w2"), &mut p.w2));
                }
                LayerAdapter::Lora { ffn_in, ffn_out } => {
                    out.push((format!("adapters.{l}.lora1.down"), &mut ffn_in.down));
                    out.push((format!("adapters.{l}.lora1.up"), &mut ffn_in.up));
                    out.push((format!("adapters.{l}.lora2.down"), &mut ffn_out.down));
                    out.push((format!("adapters.{l}.lora2.up"), &mut ffn_out.up));
                }
            }
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.named_tensors().into_iter().map(|(n, _)| n).collect()
    }

    pub fn n_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Width of the adapter output vector that interventions act on.
    pub fn output_dim(&self) -> usize {
        match self.layers.first() {
            Some(LayerAdapter::Pfeiffer(p)) => p.d_model(),
            Some(LayerAdapter::Lora { ffn_out, .. }) => ffn_out.up.rows(),
            None => 0,
        }
    }

    /// Checks the set matches a model configuration.
    pub fn validate_for(&self, model: &ModelConfig) -> Result<()> {
        if self.layers.len() != model.n_layers {
            return Err(Error::invalid(format!(
                "adapter set has {} layers, model has {}",
                self.layers.len(),
                model.n_layers
            )));
        }
        let (d, f) = (model.d_model, model.d_ffn);
        for a in &self.layers {
            let ok = match (self.mode, a) {
                (AdapterMode::Pfeiffer, LayerAdapter::Pfeiffer(p)) => p.d_model() == d,
                (AdapterMode::Lora, LayerAdapter::Lora { ffn_in, ffn_out }) => {
                    ffn_in.down.cols() == d
                        && ffn_in.up.rows() == f
                        && ffn_out.down.cols() == f
                        && ffn_out.up.rows() == d
                }
                _ => false,
            };
            if !ok {
                return Err(Error::invalid("adapter shapes do not match the model"));
            }
        }
        Ok(())
    }

    /// View with every adapter active.
    pub fn view(&self) -> AdapterView<'_, T> {
        AdapterView {
            set: self,
            ablated: vec![false; self.layers.len()],
            intervention: None,
        }
    }

    /// View in which adapters in the 1-based inclusive span contribute nothing.
    pub fn ablate(&self, span: LayerSpan) -> Result<AdapterView<'_, T>> {
        span.check(self.layers.len())?;
        let mut view = self.view();
        for l in span.first..=span.last {
            view.ablated[l - 1] = true;
        }
        Ok(view)
    }

    /// View with an explicit per-layer ablation mask (0-based).
    pub fn with_mask(&self, ablated: Vec<bool>) -> Result<AdapterView<'_, T>> {
        if ablated.len() != self.layers.len() {
            return Err(Error::invalid("ablation mask length differs from layer count"));
        }
        Ok(AdapterView {
            set: self,
            ablated,
            intervention: None,
        })
    }
}

/// Inclusive, 1-based range of decoder layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerSpan {
    pub first: usize,
    pub last: usize,
}

impl LayerSpan {
    pub fn new(first: usize, last: usize) -> Self {
        Self { first, last }
    }

    pub fn single(layer: usize) -> Self {
        Self::new(layer, layer)
    }

    /// Span covering no layer.
    pub fn empty() -> Self {
        Self::new(1, 0)
    }

    pub fn check(&self, n_layers: usize) -> Result<()> {
        if self.first == 0 || self.first > self.last + 1 || self.last > n_layers {
            return Err(Error::invalid(format!(
                "span [{}, {}] is not within 1..={n_layers} in ascending order",
                self.first, self.last
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        (self.last + 1).saturating_sub(self.first)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    /// Set the chosen adapter-output dimensions to zero.
    Zero,
    /// Set them to the mean of the remaining dimensions of the same vector.
    MeanReplace,
}

/// Per-layer sets of adapter-output dimensions to overwrite before the
/// residual addition.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureIntervention {
    pub features: Vec<Vec<usize>>,
    pub mode: InterventionMode,
}

impl FeatureIntervention {
    /// Applies the intervention to the adapter output rows of layer `layer`.
    pub fn apply<T: Scalar>(&self, layer: usize, out: &mut Tensor2D<T>) {
        let Some(feats) = self.features.get(layer) else {
            return;
        };
        if feats.is_empty() {
            return;
        }
        let d = out.cols();
        let mut chosen = vec![false; d];
        for &j in feats {
            chosen[j] = true;
        }
        let n_rest = d - chosen.iter().filter(|&&c| c).count();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let fill = match self.mode {
                InterventionMode::Zero => T::zero(),
                InterventionMode::MeanReplace if n_rest == 0 => T::zero(),
                InterventionMode::MeanReplace => {
                    let s: T = row
                        .iter()
                        .zip(&chosen)
                        .filter(|(_, &c)| !c)
                        .map(|(&v, _)| v)
                        .sum();
                    s / T::of(n_rest as f64)
                }
            };
            for (v, &c) in row.iter_mut().zip(&chosen) {
                if c {
                    *v = fill;
                }
            }
        }
    }
}

/// Read-only view of an adapter set with optional per-layer ablation and
/// feature intervention. The underlying parameters are never modified.
#[derive(Debug, Clone)]
pub struct AdapterView<'a, T> {
    pub set: &'a AdapterSet<T>,
    /// 0-based; `true` means the layer's adapter contributes zero update.
    pub ablated: Vec<bool>,
    pub intervention: Option<&'a FeatureIntervention>,
}

impl<'a, T: Scalar> AdapterView<'a, T> {
    pub fn with_intervention(mut self, intervention: &'a FeatureIntervention) -> Self {
        self.intervention = Some(intervention);
        self
    }

    pub fn is_active(&self, layer: usize) -> bool {
        !self.ablated[layer]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::FfnParams;
    use rand::Rng;

    fn t(rows: &[Vec<f64>]) -> Tensor2D<f64> {
        Tensor2D::from_rows(rows).unwrap()
    }

    #[test]
    fn zero_up_projection_gives_zero_update() {
        let w1 = t(&[vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.5, 0.0, 2.0]]);
        let a = PfeifferAdapter::new(w1, Tensor2D::zeros(4, 2)).unwrap();
        assert!(pfeiffer_forward(&[0.3, -0.2, 1.0, 0.7], &a).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dead_relu_gives_zero_update() {
        let w1 = t(&[vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0, 0.0]]);
        let w2 = t(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]);
        let a = PfeifferAdapter::new(w1, w2).unwrap();
        assert!(pfeiffer_forward(&[-1.0, -1.0, -1.0, 5.0], &a).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_integer_instance() {
        // W1 x = [1·1 + 2·0 + 0·(−1) + 1·2, −1·1 + 0 + 1·(−1) + 0] = [3, −2]
        // relu → [3, 0]; W2 · [3, 0] = 3 · first column of W2.
        let w1 = t(&[vec![1.0, 2.0, 0.0, 1.0], vec![-1.0, 0.0, 1.0, 0.0]]);
        let w2 = t(&[vec![1.0, 5.0], vec![-2.0, 1.0], vec![0.0, 3.0], vec![4.0, -1.0]]);
        let a = PfeifferAdapter::new(w1, w2).unwrap();
        assert_eq!(pfeiffer_forward(&[1.0, 0.0, -1.0, 2.0], &a), vec![3.0, -6.0, 0.0, 12.0]);
    }

    #[test]
    fn bottleneck_must_be_narrower() {
        assert!(PfeifferAdapter::new(Tensor2D::<f64>::zeros(4, 4), Tensor2D::zeros(4, 4)).is_err());
    }

    fn ffn(d: usize, f: usize, rng: &mut ChaCha8Rng) -> FfnParams<f64> {
        FfnParams {
            w_in: gaussian(d, f, 0.3, rng),
            b_in: gaussian(1, f, 0.1, rng),
            w_out: gaussian(f, d, 0.3, rng),
            b_out: gaussian(1, d, 0.1, rng),
        }
    }

    #[test]
    fn lora_zero_up_matches_plain_ffn() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (d, f, r) = (6, 12, 2);
        let p = ffn(d, f, &mut rng);
        let l1 = LoraPair::new(gaussian(r, d, 1.0, &mut rng), Tensor2D::zeros(f, r), 1.0).unwrap();
        let l2 = LoraPair::new(gaussian(r, f, 1.0, &mut rng), Tensor2D::zeros(d, r), 1.0).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (h, out) = lora_block_forward(&x, &p, &l1, &l2);
        let z1 = LoraPair::new(Tensor2D::zeros(r, d), Tensor2D::zeros(f, r), 1.0).unwrap();
        let z2 = LoraPair::new(Tensor2D::zeros(r, f), Tensor2D::zeros(d, r), 1.0).unwrap();
        let (h0, out0) = lora_block_forward(&x, &p, &z1, &z2);
        assert_eq!(h, h0);
        assert_eq!(out, out0);
    }

    #[test]
    fn lora_identity_factorization() {
        let d = 3;
        let pair = LoraPair::new(Tensor2D::<f64>::identity(d), Tensor2D::identity(d), 1.0).unwrap();
        assert_eq!(pair.apply(&[0.5, -2.0, 7.0]), vec![0.5, -2.0, 7.0]);
    }

    #[test]
    fn lora_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pair = LoraPair::new(gaussian(2, 7, 1.0, &mut rng), gaussian(5, 2, 1.0, &mut rng), 0.75).unwrap();
        let dense = pair.up.matmul(&pair.down).unwrap();
        let x: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = pair.apply(&x);
        for (i, g) in got.iter().enumerate() {
            let want = 0.75 * dense.row(i).iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn lora_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pair = LoraPair::new(gaussian(3, 8, 1.0, &mut rng), gaussian(8, 3, 1.0, &mut rng), 1.0).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (a, b) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let lhs = pair.apply(&mix);
            let (lx, ly) = (pair.apply(&x), pair.apply(&y));
            for i in 0..8 {
                assert!((lhs[i] - (a * lx[i] + b * ly[i])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_counted() {
        let model = ModelConfig::desk();
        let cfg = AdapterConfig::default();
        let a: AdapterSet<f64> = init_adapters(&model, &cfg, 4).unwrap();
        assert_eq!(a, init_adapters(&model, &cfg, 4).unwrap());
        assert_eq!(a.n_parameters(), 8 * (8 * 128 + 128 * 8));
        assert_eq!(a.n_parameters(), 16_384);
        let lora: AdapterSet<f64> = init_adapters(&model, &AdapterConfig { mode: AdapterMode::Lora, ..cfg }, 4).unwrap();
        assert_eq!(lora.layers.len(), 8);
        assert!(lora.layers.iter().all(|l| matches!(l, LayerAdapter::Lora { .. })));
        lora.validate_for(&model).unwrap();
    }

    #[test]
    fn adaptation_mask_contents() {
        let model = ModelConfig::compact();
        let a: AdapterSet<f32> = init_adapters(&model, &AdapterConfig::default(), 0).unwrap();
        let mask = FreezeMask::adaptation(&a);
        assert_eq!(mask.trainable.len(), 2 * model.n_layers + 2);
        assert!(mask.contains(TOKEN_EMBEDDING) && mask.contains(LM_HEAD));
        assert!(!mask.contains("layers.0.attn.query"));
    }

    #[test]
    fn ablation_spans() {
        let model = ModelConfig::compact();
        let a: AdapterSet<f32> = init_adapters(&model, &AdapterConfig::default(), 0).unwrap();
        let v = a.ablate(LayerSpan::new(2, 4)).unwrap();
        assert_eq!(v.ablated.iter().filter(|&&b| b).count(), 3);
        assert!(v.ablated[1] && v.ablated[3] && !v.ablated[4]);
        assert!(a.ablate(LayerSpan::new(4, 2)).is_err());
        let none = a.ablate(LayerSpan::empty()).unwrap();
        assert!(none.ablated.iter().all(|&b| !b));
        assert!(LayerSpan::new(3, 2).is_empty());
        assert!(a.ablate(LayerSpan::new(0, 2)).is_err());
        assert!(a.ablate(LayerSpan::new(1, model.n_layers + 1)).is_err());
    }

    #[test]
    fn intervention_modes() {
        let mut out = t(&[vec![1.0, 2.0, 3.0, 6.0]]);
        let zero = FeatureIntervention { features: vec![vec![1, 3]], mode: InterventionMode::Zero };
        zero.apply(0, &mut out);
        assert_eq!(out.data(), &[1.0, 0.0, 3.0, 0.0]);
        let mut out = t(&[vec![1.0, 2.0, 3.0, 6.0]]);
        let mean = FeatureIntervention { features: vec![vec![3]], mode: InterventionMode::MeanReplace };
        mean.apply(0, &mut out);
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 2.0]);
    }
}
