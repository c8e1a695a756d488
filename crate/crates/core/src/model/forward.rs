use crate::adapters::{AdapterMode, AdapterView, LayerAdapter};
use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, PositionalKind};
use crate::model::params::{LayerNormParams, LayerParams, TransformerParams};
use crate::numerics::loss::softmax_in_place;
use crate::numerics::tensor::{axpy, dot, gemm_nn, gemm_nt, Tensor2D};
use crate::scalar::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;
const ROPE_BASE: f64 = 10_000.0;

/// Residual-stream quantities of one decoder layer, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace<T> {
    pub x_attn: Tensor2D<T>,
    pub x_ffn: Tensor2D<T>,
    pub x_out: Tensor2D<T>,
    pub attn_out: Tensor2D<T>,
    pub ffn_out: Tensor2D<T>,
    /// Pfeiffer adapter update, or the second LoRA pair's update in LoRA mode.
    /// Zero when the layer has no (active) adapter.
    pub adapter_out: Tensor2D<T>,
}

/// Per-layer capture of a forward pass. `embeddings` is the residual stream
/// entering layer 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace<T> {
    pub embeddings: Tensor2D<T>,
    pub layers: Vec<LayerTrace<T>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `N × V`
    pub logits: Tensor2D<T>,
    pub trace: Option<ResidualTrace<T>>,
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache<T> {
    pub xhat: Tensor2D<T>,
    pub rstd: Vec<T>,
}

/// Everything the backward pass needs from one decoder layer.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache<T> {
    pub ln_attn: NormCache<T>,
    pub h_attn: Tensor2D<T>,
    pub q: Tensor2D<T>,
    pub k: Tensor2D<T>,
    pub v: Tensor2D<T>,
    /// `n_heads × N × N`, zero above the diagonal.
    pub probs: Vec<T>,
    pub ctx: Tensor2D<T>,
    pub attn_out: Tensor2D<T>,
    pub x_attn: Tensor2D<T>,
    pub ln_ffn: NormCache<T>,
    pub h_ffn: Tensor2D<T>,
    pub pre: Tensor2D<T>,
    /// Input of the second FFN sublayer (`gelu(pre)` plus the first LoRA term).
    pub x_ffn1: Tensor2D<T>,
    pub lora1_hidden: Option<Tensor2D<T>>,
    pub lora2_hidden: Option<Tensor2D<T>>,
    pub ffn_out: Tensor2D<T>,
    pub x_ffn: Tensor2D<T>,
    /// Pfeiffer bottleneck pre-activation.
    pub adapter_pre: Option<Tensor2D<T>>,
    pub adapter_out: Tensor2D<T>,
    pub x_out: Tensor2D<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct ModelCache<T> {
    pub tokens: Vec<u32>,
    pub embeddings: Tensor2D<T>,
    pub layers: Vec<LayerCache<T>>,
    pub final_norm: NormCache<T>,
    pub h_final: Tensor2D<T>,
    pub logits: Tensor2D<T>,
}

impl<T: Scalar> LayerCache<T> {
    fn trace(&self) -> LayerTrace<T> {
        LayerTrace {
            x_attn: self.x_attn.clone(),
            x_ffn: self.x_ffn.clone(),
            x_out: self.x_out.clone(),
            attn_out: self.attn_out.clone(),
            ffn_out: self.ffn_out.clone(),
            adapter_out: self.adapter_out.clone(),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

pub(crate) fn layer_norm<T: Scalar>(x: &Tensor2D<T>, p: &LayerNormParams<T>) -> (Tensor2D<T>, NormCache<T>) {
    let (n, d) = x.shape();
    let mut xhat = Tensor2D::zeros(n, d);
    let mut out = Tensor2D::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    let inv_d = T::of(1.0 / d as f64);
    let eps = T::of(LN_EPS);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (h, &v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * rs;
        }
        let o = out.row_mut(r);
        for (((o, &h), &g), &b) in o.iter_mut().zip(xhat.row(r)).zip(p.gain.data()).zip(p.bias.data()) {
            *o = h * g + b;
        }
    }
    (out, NormCache { xhat, rstd })
}

fn add_bias<T: Scalar>(x: &mut Tensor2D<T>, bias: &Tensor2D<T>) {
    for r in 0..x.rows() {
        for (v, &b) in x.row_mut(r).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

fn linear<T: Scalar>(x: &Tensor2D<T>, w: &Tensor2D<T>) -> Tensor2D<T> {
    let mut out = Tensor2D::zeros(x.rows(), w.cols());
    gemm_nn(x.data(), w.data(), out.data_mut(), x.rows(), x.cols(), w.cols());
    out
}

/// `x · wᵀ` for weights stored output-major.
fn linear_t<T: Scalar>(x: &Tensor2D<T>, w: &Tensor2D<T>) -> Tensor2D<T> {
    let mut out = Tensor2D::zeros(x.rows(), w.rows());
    gemm_nt(x.data(), w.data(), out.data_mut(), x.rows(), x.cols(), w.rows());
    out
}

pub(crate) fn rope_angles(n: usize, head_dim: usize) -> Vec<(f64, f64)> {
    let half = head_dim / 2;
    let mut out = Vec::with_capacity(n * half);
    for pos in 0..n {
        for p in 0..half {
            let theta = pos as f64 / ROPE_BASE.powf(2.0 * p as f64 / head_dim as f64);
            out.push((theta.cos(), theta.sin()));
        }
    }
    out
}

/// Rotates every head of `x` in place; `inverse` applies the transpose.
pub(crate) fn apply_rope<T: Scalar>(x: &mut Tensor2D<T>, n_heads: usize, inverse: bool) {
    let d = x.cols();
    let hd = d / n_heads;
    let half = hd / 2;
    let angles = rope_angles(x.rows(), hd);
    for pos in 0..x.rows() {
        let row = x.row_mut(pos);
        for h in 0..n_heads {
            for p in 0..half {
                let (c, s) = angles[pos * half + p];
                let (c, s) = (T::of(c), if inverse { -T::of(s) } else { T::of(s) });
                let (i0, i1) = (h * hd + 2 * p, h * hd + 2 * p + 1);
                let (a, b) = (row[i0], row[i1]);
                row[i0] = a * c - b * s;
                row[i1] = a * s + b * c;
            }
        }
    }
}

/// Causal multi-head self-attention core: returns `(ctx, probs)`.
fn attention<T: Scalar>(q: &Tensor2D<T>, k: &Tensor2D<T>, v: &Tensor2D<T>, n_heads: usize) -> (Tensor2D<T>, Vec<T>) {
    let (n, d) = q.shape();
    let hd = d / n_heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut probs = vec![T::zero(); n_heads * n * n];
    let mut ctx = Tensor2D::zeros(n, d);
    for h in 0..n_heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let p = &mut probs[(h * n + i) * n..(h * n + i) * n + i + 1];
            for (j, pj) in p.iter_mut().enumerate() {
                *pj = dot(qi, &k.row(j)[cols.clone()]) * scale;
            }
            softmax_in_place(p);
            let out = &mut ctx.row_mut(i)[cols.clone()];
            for j in 0..=i {
                let w = probs[(h * n + i) * n + j];
                axpy(w, &v.row(j)[cols.clone()], out);
            }
        }
    }
    (ctx, probs)
}

/// Eqs. of one decoder block:
/// `x_attn = x + attn(LN(x))`, `x_ffn = x_attn + ffn(LN(x_attn))`,
/// `x_out = x_ffn + adapter(x_ffn)`.
pub(crate) fn block_forward_cached<T: Scalar>(
    x: &Tensor2D<T>,
    config: &ModelConfig,
    layer: &LayerParams<T>,
    adapter: Option<&LayerAdapter<T>>,
    hook: Option<(&crate::adapters::FeatureIntervention, usize)>,
) -> LayerCache<T> {
    let n = x.rows();
    let (h_attn, ln_attn) = layer_norm(x, &layer.ln_attn);
    let mut q = linear(&h_attn, &layer.attn.query);
    let mut k = linear(&h_attn, &layer.attn.key);
    let v = linear(&h_attn, &layer.attn.value);
    if config.positional == PositionalKind::Rotary {
        apply_rope(&mut q, config.n_heads, false);
        apply_rope(&mut k, config.n_heads, false);
    }
    let (ctx, probs) = attention(&q, &k, &v, config.n_heads);
    let attn_out = linear(&ctx, &layer.attn.output);
    let mut x_attn = x.clone();
    x_attn.add_assign(&attn_out).expect("same shape");

    let (h_ffn, ln_ffn) = layer_norm(&x_attn, &layer.ln_ffn);
    let mut pre = linear(&h_ffn, &layer.ffn.w_in);
    add_bias(&mut pre, &layer.ffn.b_in);
    let mut x_ffn1 = pre.map(gelu);
    let mut lora1_hidden = None;
    if let Some(LayerAdapter::Lora { ffn_in, .. }) = adapter {
        let hidden = linear_t(&h_ffn, &ffn_in.down);
        let mut term = linear_t(&hidden, &ffn_in.up);
        term.scale(ffn_in.scale);
        x_ffn1.add_assign(&term).expect("same shape");
        lora1_hidden = Some(hidden);
    }
    let mut ffn_out = linear(&x_ffn1, &layer.ffn.w_out);
    add_bias(&mut ffn_out, &layer.ffn.b_out);
    let mut x_ffn = x_attn.clone();
    x_ffn.add_assign(&ffn_out).expect("same shape");

    let mut adapter_pre = None;
    let mut lora2_hidden = None;
    let mut adapter_out = match adapter {
        Some(LayerAdapter::Pfeiffer(p)) => {
            let z = linear_t(&x_ffn, &p.w1);
            let out = linear_t(&z.map(|v| v.max(T::zero())), &p.w2);
            adapter_pre = Some(z);
            out
        }
        Some(LayerAdapter::Lora { ffn_out: pair, .. }) => {
            let hidden = linear_t(&x_ffn1, &pair.down);
            let mut out = linear_t(&hidden, &pair.up);
            out.scale(pair.scale);
            lora2_hidden = Some(hidden);
            out
        }
        None => Tensor2D::zeros(n, config.d_model),
    };
    let mut x_out = x_ffn.clone();
    if adapter.is_some() {
        if let Some((iv, l)) = hook {
            iv.apply(l, &mut adapter_out);
        }
        x_out.add_assign(&adapter_out).expect("same shape");
    }

    LayerCache {
        ln_attn,
        h_attn,
        q,
        k,
        v,
        probs,
        ctx,
        attn_out,
        x_attn,
        ln_ffn,
        h_ffn,
        pre,
        x_ffn1,
        lora1_hidden,
        lora2_hidden,
        ffn_out,
        x_ffn,
        adapter_pre,
        adapter_out,
        x_out,
    }
}

/// One decoder block over `N × d` input. With `ablated` set, the adapter
/// contributes no update (`x_out = x_ffn`).
pub fn decoder_block_forward<T: Scalar>(
    x_prev: &Tensor2D<T>,
    config: &ModelConfig,
    layer: &LayerParams<T>,
    adapter: Option<&LayerAdapter<T>>,
    ablated: bool,
) -> Result<(Tensor2D<T>, LayerTrace<T>)> {
    if x_prev.cols() != config.d_model {
        return Err(Error::ShapeMismatch {
            op: "decoder_block_forward",
            left_rows: x_prev.rows(),
            left_cols: x_prev.cols(),
            right_rows: config.d_model,
            right_cols: config.d_model,
        });
    }
    let adapter = if ablated { None } else { adapter };
    let cache = block_forward_cached(x_prev, config, layer, adapter, None);
    let trace = cache.trace();
    Ok((cache.x_out, trace))
}

pub(crate) fn validate_tokens<T: Scalar>(params: &TransformerParams<T>, tokens: &[u32]) -> Result<()> {
    let cfg = &params.config;
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: bad as usize,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

pub(crate) fn embed<T: Scalar>(params: &TransformerParams<T>, tokens: &[u32]) -> Tensor2D<T> {
    let d = params.config.d_model;
    let mut x = Tensor2D::zeros(tokens.len(), d);
    for (i, &t) in tokens.iter().enumerate() {
        let row = x.row_mut(i);
        row.copy_from_slice(params.token_embedding.row(t as usize));
        if let Some(p) = &params.positional {
            for (v, &pv) in row.iter_mut().zip(p.row(i)) {
                *v += pv;
            }
        }
    }
    x
}

fn layer_adapter<'a, T: Scalar>(adapters: Option<&'a AdapterView<'_, T>>, l: usize) -> Option<&'a LayerAdapter<T>> {
    adapters.and_then(|v| if v.is_active(l) { v.set.layers.get(l) } else { None })
}

pub(crate) fn check_adapters<T: Scalar>(params: &TransformerParams<T>, adapters: Option<&AdapterView<'_, T>>) -> Result<()> {
    if let Some(v) = adapters {
        v.set.validate_for(&params.config)?;
        if let Some(iv) = v.intervention {
            let width = match v.set.mode {
                AdapterMode::Pfeiffer | AdapterMode::Lora => params.config.d_model,
            };
            if iv.features.iter().flatten().any(|&j| j >= width) {
                return Err(Error::invalid("intervention feature index out of range"));
            }
        }
    }
    Ok(())
}

pub(crate) fn forward_cached<T: Scalar>(
    params: &TransformerParams<T>,
    tokens: &[u32],
    adapters: Option<&AdapterView<'_, T>>,
) -> Result<ModelCache<T>> {
    validate_tokens(params, tokens)?;
    check_adapters(params, adapters)?;
    let embeddings = embed(params, tokens);
    let mut layers: Vec<LayerCache<T>> = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let x = layers.last().map_or(&embeddings, |c| &c.x_out);
        let hook = adapters.and_then(|v| v.intervention).map(|iv| (iv, l));
        let cache = block_forward_cached(x, &params.config, layer, layer_adapter(adapters, l), hook);
        layers.push(cache);
    }
    let last = layers.last().map_or(&embeddings, |c| &c.x_out);
    let (h_final, final_norm) = layer_norm(last, &params.final_norm);
    let logits = linear(&h_final, &params.lm_head);
    Ok(ModelCache {
        tokens: tokens.to_vec(),
        embeddings,
        layers,
        final_norm,
        h_final,
        logits,
    })
}

/// Runs the model over one token sequence, returning next-token logits for
/// every position and optionally the full residual-stream trace.
pub fn model_forward<T: Scalar>(
    params: &TransformerParams<T>,
    tokens: &[u32],
    adapters: Option<&AdapterView<'_, T>>,
    capture_trace: bool,
) -> Result<ForwardOutput<T>> {
    let cache = forward_cached(params, tokens, adapters)?;
    let trace = capture_trace.then(|| ResidualTrace {
        embeddings: cache.embeddings.clone(),
        layers: cache.layers.iter().map(LayerCache::trace).collect(),
    });
    Ok(ForwardOutput {
        logits: cache.logits,
        trace,
    })
}

/// Summed next-token negative log-likelihood (in `f64`) of `seq[1..]` given
/// its prefixes, and the number of predictions.
pub fn sequence_nll<T: Scalar>(
    params: &TransformerParams<T>,
    seq: &[u32],
    adapters: Option<&AdapterView<'_, T>>,
) -> Result<(f64, usize)> {
    if seq.len() < 2 {
        return Ok((0.0, 0));
    }
    let n = seq.len() - 1;
    let out = model_forward(params, &seq[..n], adapters, false)?;
    let mut nll = 0.0;
    for (i, &t) in seq[1..].iter().enumerate() {
        nll -= crate::numerics::loss::log_prob(out.logits.row(i), t as usize);
    }
    Ok((nll, n))
}

/// Logit-lens primitive: distribution over the vocabulary obtained by passing
/// a residual vector (optionally through the final norm) to the LM head.
pub fn unembed_hidden<T: Scalar>(h: &[T], params: &TransformerParams<T>, apply_final_norm: bool) -> Vec<T> {
    let mut logits = unembed_logits(h, params, apply_final_norm);
    softmax_in_place(&mut logits);
    logits
}

pub(crate) fn unembed_logits<T: Scalar>(h: &[T], params: &TransformerParams<T>, apply_final_norm: bool) -> Vec<T> {
    let d = params.config.d_model;
    let x = Tensor2D::from_fn(1, d, |_, c| h[c]);
    let x = if apply_final_norm {
        layer_norm(&x, &params.final_norm).0
    } else {
        x
    };
    linear(&x, &params.lm_head).into_data()
}
