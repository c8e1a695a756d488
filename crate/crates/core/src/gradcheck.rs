//! Central finite-difference check of the analytic gradients.

use crate::adapters::{AdapterSet, FreezeMask};
use crate::error::Result;
use crate::model::backward::batch_loss_and_grads;
use crate::model::forward::sequence_nll;
use crate::model::TransformerParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub entries_checked: usize,
    pub tensors_checked: usize,
}

fn batch_loss<T: Scalar>(
    batch: &[Vec<u32>],
    params: &TransformerParams<T>,
    adapters: Option<&AdapterSet<T>>,
) -> Result<f64> {
    let view = adapters.map(AdapterSet::view);
    let mut nll = 0.0;
    let mut count = 0;
    for seq in batch {
        let (s, c) = sequence_nll(params, seq, view.as_ref())?;
        nll += s;
        count += c;
    }
    Ok(nll / count as f64)
}

/// Compares every entry of every trainable tensor's gradient against
/// `(L(θ+h) − L(θ−h)) / 2h`, where `L` is evaluated by forward passes only.
pub fn check_gradients<T: Scalar>(
    batch: &[Vec<u32>],
    params: &TransformerParams<T>,
    adapters: Option<&AdapterSet<T>>,
    mask: &FreezeMask,
    h: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = batch_loss_and_grads(batch, params, adapters, mask)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        entries_checked: 0,
        tensors_checked: 0,
    };
    let mut p = params.clone();
    let mut a = adapters.cloned();
    let names: Vec<String> = params
        .tensor_names()
        .into_iter()
        .chain(adapters.map(AdapterSet::tensor_names).unwrap_or_default())
        .filter(|n| mask.contains(n))
        .collect();
    for name in names {
        let analytic = grads.get(&name).cloned();
        let len = params
            .named_tensors()
            .into_iter()
            .chain(adapters.map(AdapterSet::named_tensors).unwrap_or_default())
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.len())
            .unwrap_or(0);
        report.tensors_checked += 1;
        for i in 0..len {
            let original = entry(&mut p, a.as_mut(), &name, i, None);
            entry(&mut p, a.as_mut(), &name, i, Some(original + T::of(h)));
            let plus = batch_loss(batch, &p, a.as_ref())?;
            entry(&mut p, a.as_mut(), &name, i, Some(original - T::of(h)));
            let minus = batch_loss(batch, &p, a.as_ref())?;
            entry(&mut p, a.as_mut(), &name, i, Some(original));
            let numeric = (plus - minus) / (2.0 * h);
            let exact = analytic.as_ref().map_or(0.0, |g| g.data()[i].as_f64());
            let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(floor);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_parameter = format!("{name}[{i}]");
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

/// Reads entry `i` of the named tensor, writing `value` first when given.
fn entry<T: Scalar>(
    params: &mut TransformerParams<T>,
    adapters: Option<&mut AdapterSet<T>>,
    name: &str,
    i: usize,
    value: Option<T>,
) -> T {
    let mut tensors = params.named_tensors_mut();
    let mut extra = adapters.map(|a| a.named_tensors_mut()).unwrap_or_default();
    let t = tensors
        .iter_mut()
        .chain(extra.iter_mut())
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .expect("tensor exists");
    if let Some(v) = value {
        t.data_mut()[i] = v;
    }
    t.data()[i]
}
