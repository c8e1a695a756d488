use crate::adapters::{AdapterSet, FreezeMask, LayerAdapter};
use crate::error::{Error, Result};
use crate::model::config::PositionalKind;
use crate::model::forward::{apply_rope, forward_cached, gelu_grad, LayerCache, ModelCache, NormCache};
use crate::model::params::{LayerNormParams, TransformerParams, LM_HEAD, POSITIONAL_EMBEDDING, TOKEN_EMBEDDING};
use crate::numerics::loss::cross_entropy_with_denominator;
use crate::numerics::tensor::{axpy, dot, gemm_nn, gemm_nt, gemm_tn, Tensor2D};
use crate::numerics::Gradients;
use crate::scalar::Scalar;

/// Accumulates gradients for trainable parameters only.
struct GradSink<'m, T> {
    mask: &'m FreezeMask,
    grads: Gradients<T>,
}

impl<'m, T: Scalar> GradSink<'m, T> {
    fn wants(&self, name: &str) -> bool {
        self.mask.contains(name)
    }

    fn slot(&mut self, name: &str, rows: usize, cols: usize) -> &mut Tensor2D<T> {
        self.grads
            .entry(name.to_string())
            .or_insert_with(|| Tensor2D::zeros(rows, cols))
    }

    /// `grad[name] += xᵀ · dy`
    fn weight(&mut self, name: &str, x: &Tensor2D<T>, dy: &Tensor2D<T>) {
        if self.wants(name) {
            let g = self.slot(name, x.cols(), dy.cols());
            gemm_tn(x.data(), dy.data(), g.data_mut(), x.rows(), x.cols(), dy.cols());
        }
    }

    /// `grad[name] += dyᵀ · x`, for weights applied as `x · Wᵀ`.
    fn weight_t(&mut self, name: &str, x: &Tensor2D<T>, dy: &Tensor2D<T>) {
        if self.wants(name) {
            let g = self.slot(name, dy.cols(), x.cols());
            gemm_tn(dy.data(), x.data(), g.data_mut(), dy.rows(), dy.cols(), x.cols());
        }
    }

    fn bias(&mut self, name: &str, dy: &Tensor2D<T>) {
        if self.wants(name) {
            let g = self.slot(name, 1, dy.cols());
            for r in 0..dy.rows() {
                axpy(T::one(), dy.row(r), g.data_mut());
            }
        }
    }
}

/// `dy · Wᵀ` for weights applied as `x · W`.
fn back_linear<T: Scalar>(dy: &Tensor2D<T>, w: &Tensor2D<T>) -> Tensor2D<T> {
    let mut dx = Tensor2D::zeros(dy.rows(), w.rows());
    gemm_nt(dy.data(), w.data(), dx.data_mut(), dy.rows(), dy.cols(), w.rows());
    dx
}

/// `dy · W` for weights applied as `x · Wᵀ`.
fn back_linear_t<T: Scalar>(dy: &Tensor2D<T>, w: &Tensor2D<T>) -> Tensor2D<T> {
    let mut dx = Tensor2D::zeros(dy.rows(), w.cols());
    gemm_nn(dy.data(), w.data(), dx.data_mut(), dy.rows(), dy.cols(), w.cols());
    dx
}

fn norm_backward<T: Scalar>(
    dy: &Tensor2D<T>,
    cache: &NormCache<T>,
    p: &LayerNormParams<T>,
    prefix: &str,
    sink: &mut GradSink<'_, T>,
) -> Tensor2D<T> {
    let (n, d) = dy.shape();
    let gain_name = format!("{prefix}.gain");
    if sink.wants(&gain_name) {
        let g = sink.slot(&gain_name, 1, d);
        for r in 0..n {
            for ((gv, &dv), &xh) in g.data_mut().iter_mut().zip(dy.row(r)).zip(cache.xhat.row(r)) {
                *gv += dv * xh;
            }
        }
    }
    sink.bias(&format!("{prefix}.bias"), dy);

    let inv_d = T::of(1.0 / d as f64);
    let mut dx = Tensor2D::zeros(n, d);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..n {
        for ((h, &dv), &g) in dxhat.iter_mut().zip(dy.row(r)).zip(p.gain.data()) {
            *h = dv * g;
        }
        let xh = cache.xhat.row(r);
        let mean = dxhat.iter().copied().sum::<T>() * inv_d;
        let mean_x = dot(&dxhat, xh) * inv_d;
        let rs = cache.rstd[r];
        for ((o, &h), &x) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xh) {
            *o = rs * (h - mean - x * mean_x);
        }
    }
    dx
}

fn attention_backward<T: Scalar>(
    dctx: &Tensor2D<T>,
    c: &LayerCache<T>,
    n_heads: usize,
) -> (Tensor2D<T>, Tensor2D<T>, Tensor2D<T>) {
    let (n, d) = dctx.shape();
    let hd = d / n_heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut dq = Tensor2D::zeros(n, d);
    let mut dk = Tensor2D::zeros(n, d);
    let mut dv = Tensor2D::zeros(n, d);
    let mut dp = vec![T::zero(); n];
    for h in 0..n_heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let probs = &c.probs[(h * n + i) * n..(h * n + i) * n + i + 1];
            let g = &dctx.row(i)[cols.clone()];
            for j in 0..=i {
                dp[j] = dot(g, &c.v.row(j)[cols.clone()]);
                axpy(probs[j], g, &mut dv.row_mut(j)[cols.clone()]);
            }
            let inner: T = (0..=i).map(|j| probs[j] * dp[j]).sum();
            for j in 0..=i {
                let ds = probs[j] * (dp[j] - inner) * scale;
                if ds == T::zero() {
                    continue;
                }
                axpy(ds, &c.k.row(j)[cols.clone()], &mut dq.row_mut(i)[cols.clone()]);
                axpy(ds, &c.q.row(i)[cols.clone()], &mut dk.row_mut(j)[cols.clone()]);
            }
        }
    }
    (dq, dk, dv)
}

fn layer_backward<T: Scalar>(
    mut dx_out: Tensor2D<T>,
    l: usize,
    c: &LayerCache<T>,
    params: &TransformerParams<T>,
    adapter: Option<&LayerAdapter<T>>,
    sink: &mut GradSink<'_, T>,
) -> Tensor2D<T> {
    let layer = &params.layers[l];
    let cfg = &params.config;
    let pfx = format!("layers.{l}");
    let apfx = format!("adapters.{l}");

    // x_out = x_ffn + adapter(x_ffn)  (Pfeiffer)
    let mut dx_ffn1 = Tensor2D::zeros(c.x_ffn1.rows(), c.x_ffn1.cols());
    match adapter {
        Some(LayerAdapter::Pfeiffer(p)) => {
            let z = c.adapter_pre.as_ref().expect("pfeiffer cache");
            let r = z.map(|v| v.max(T::zero()));
            let da = &dx_out;
            sink.weight_t(&format!("{apfx}.w2"), &r, da);
            let mut dz = back_linear_t(da, &p.w2);
            for (g, &zv) in dz.data_mut().iter_mut().zip(z.data()) {
                if zv <= T::zero() {
                    *g = T::zero();
                }
            }
            sink.weight_t(&format!("{apfx}.w1"), &c.x_ffn, &dz);
            let dx = back_linear_t(&dz, &p.w1);
            dx_out.add_assign(&dx).expect("shape");
        }
        Some(LayerAdapter::Lora { ffn_out: pair, .. }) => {
            let hidden = c.lora2_hidden.as_ref().expect("lora cache");
            let mut da = dx_out.clone();
            da.scale(pair.scale);
            sink.weight_t(&format!("{apfx}.lora2.up"), hidden, &da);
            let dh = back_linear_t(&da, &pair.up);
            sink.weight_t(&format!("{apfx}.lora2.down"), &c.x_ffn1, &dh);
            dx_ffn1.add_assign(&back_linear_t(&dh, &pair.down)).expect("shape");
        }
        None => {}
    }
    let dx_ffn = dx_out;

    // x_ffn = x_attn + ffn(LN(x_attn))
    let dffn_out = &dx_ffn;
    sink.weight(&format!("{pfx}.ffn.w_out"), &c.x_ffn1, dffn_out);
    sink.bias(&format!("{pfx}.ffn.b_out"), dffn_out);
    dx_ffn1.add_assign(&back_linear(dffn_out, &layer.ffn.w_out)).expect("shape");

    let mut dh_ffn = Tensor2D::zeros(c.h_ffn.rows(), c.h_ffn.cols());
    if let Some(LayerAdapter::Lora { ffn_in: pair, .. }) = adapter {
        let hidden = c.lora1_hidden.as_ref().expect("lora cache");
        let mut dl = dx_ffn1.clone();
        dl.scale(pair.scale);
        sink.weight_t(&format!("{apfx}.lora1.up"), hidden, &dl);
        let dh = back_linear_t(&dl, &pair.up);
        sink.weight_t(&format!("{apfx}.lora1.down"), &c.h_ffn, &dh);
        dh_ffn.add_assign(&back_linear_t(&dh, &pair.down)).expect("shape");
    }
    let mut dpre = dx_ffn1;
    for (g, &p) in dpre.data_mut().iter_mut().zip(c.pre.data()) {
        *g *= gelu_grad(p);
    }
    sink.weight(&format!("{pfx}.ffn.w_in"), &c.h_ffn, &dpre);
    sink.bias(&format!("{pfx}.ffn.b_in"), &dpre);
    dh_ffn.add_assign(&back_linear(&dpre, &layer.ffn.w_in)).expect("shape");
    let mut dx_attn = dx_ffn;
    dx_attn
        .add_assign(&norm_backward(&dh_ffn, &c.ln_ffn, &layer.ln_ffn, &format!("{pfx}.ln_ffn"), sink))
        .expect("shape");

    // x_attn = x + attn(LN(x))
    let dattn = &dx_attn;
    sink.weight(&format!("{pfx}.attn.output"), &c.ctx, dattn);
    let dctx = back_linear(dattn, &layer.attn.output);
    let (mut dq, mut dk, dv) = attention_backward(&dctx, c, cfg.n_heads);
    if cfg.positional == PositionalKind::Rotary {
        apply_rope(&mut dq, cfg.n_heads, true);
        apply_rope(&mut dk, cfg.n_heads, true);
    }
    sink.weight(&format!("{pfx}.attn.query"), &c.h_attn, &dq);
    sink.weight(&format!("{pfx}.attn.key"), &c.h_attn, &dk);
    sink.weight(&format!("{pfx}.attn.value"), &c.h_attn, &dv);
    let mut dh_attn = back_linear(&dq, &layer.attn.query);
    dh_attn.add_assign(&back_linear(&dk, &layer.attn.key)).expect("shape");
    dh_attn.add_assign(&back_linear(&dv, &layer.attn.value)).expect("shape");
    let mut dx = dx_attn;
    dx.add_assign(&norm_backward(&dh_attn, &c.ln_attn, &layer.ln_attn, &format!("{pfx}.ln_attn"), sink))
        .expect("shape");
    dx
}

fn backward_cache<T: Scalar>(
    cache: &ModelCache<T>,
    targets: &[u32],
    denominator: usize,
    params: &TransformerParams<T>,
    adapters: Option<&AdapterSet<T>>,
    sink: &mut GradSink<'_, T>,
) -> Result<f64> {
    let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let (loss, dlogits) = cross_entropy_with_denominator(&cache.logits, &targets, denominator)?;
    if sink.mask.is_empty() {
        return Ok(loss);
    }
    sink.weight(LM_HEAD, &cache.h_final, &dlogits);
    let dh = back_linear(&dlogits, &params.lm_head);
    let mut dx = norm_backward(&dh, &cache.final_norm, &params.final_norm, "final_norm", sink);
    for l in (0..params.layers.len()).rev() {
        let adapter = adapters.map(|a| &a.layers[l]);
        dx = layer_backward(dx, l, &cache.layers[l], params, adapter, sink);
    }
    if sink.wants(TOKEN_EMBEDDING) {
        let (v, d) = params.token_embedding.shape();
        let g = sink.slot(TOKEN_EMBEDDING, v, d);
        for (i, &t) in cache.tokens.iter().enumerate() {
            axpy(T::one(), dx.row(i), g.row_mut(t as usize));
        }
    }
    if params.positional.is_some() && sink.wants(POSITIONAL_EMBEDDING) {
        let (n, d) = params.positional.as_ref().map(Tensor2D::shape).expect("positional");
        let g = sink.slot(POSITIONAL_EMBEDDING, n, d);
        for i in 0..cache.tokens.len() {
            axpy(T::one(), dx.row(i), g.row_mut(i));
        }
    }
    Ok(loss)
}

/// Mean next-token cross entropy over one sequence and its gradients with
/// respect to every parameter named in `mask` (and only those).
pub fn backward<T: Scalar>(
    tokens: &[u32],
    targets: &[u32],
    params: &TransformerParams<T>,
    adapters: Option<&AdapterSet<T>>,
    mask: &FreezeMask,
) -> Result<(f64, Gradients<T>)> {
    if tokens.len() != targets.len() {
        return Err(Error::invalid("tokens and targets differ in length"));
    }
    let view = adapters.map(AdapterSet::view);
    let cache = forward_cached(params, tokens, view.as_ref())?;
    let mut sink = GradSink {
        mask,
        grads: Gradients::new(),
    };
    let loss = backward_cache(&cache, targets, targets.len(), params, adapters, &mut sink)?;
    Ok((loss, sink.grads))
}

/// Loss and gradients over a batch of sequences; each sequence predicts its
/// tokens `1..n` from `0..n-1`, and the loss is the mean over all predictions.
pub fn batch_loss_and_grads<T: Scalar>(
    batch: &[Vec<u32>],
    params: &TransformerParams<T>,
    adapters: Option<&AdapterSet<T>>,
    mask: &FreezeMask,
) -> Result<(f64, Gradients<T>)> {
    let total: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if total == 0 {
        return Err(Error::invalid("batch has no prediction targets"));
    }
    let view = adapters.map(AdapterSet::view);
    let mut sink = GradSink {
        mask,
        grads: Gradients::new(),
    };
    let mut loss = 0.0;
    for seq in batch.iter().filter(|s| s.len() >= 2) {
        let n = seq.len() - 1;
        let cache = forward_cached(params, &seq[..n], view.as_ref())?;
        loss += backward_cache(&cache, &seq[1..], total, params, adapters, &mut sink)?;
    }
    Ok((loss, sink.grads))
}
