use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamRef;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NagConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for NagConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Momentum buffers keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NagState<T> {
    pub buffers: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> NagState<T> {
    pub fn new() -> Self {
        Self {
            buffers: BTreeMap::new(),
        }
    }

    /// Drops buffers of parameters that no longer exist.
    pub fn retain_names<'a>(&mut self, names: impl IntoIterator<Item = &'a str>) {
        let keep: std::collections::BTreeSet<&str> = names.into_iter().collect();
        self.buffers.retain(|k, _| keep.contains(k.as_str()));
    }
}

/// One Nesterov step with L2 decay folded into the gradient:
/// `g' = g + wd p`, `v <- mu v + g'`, `p <- p - lr (g' + mu v)`.
/// Parameters without a gradient entry are left alone.
pub fn nag_step<T: Scalar>(
    params: &mut [ParamRef<'_, T>],
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut NagState<T>,
    lr: f64,
    cfg: &NagConfig,
) -> Result<()> {
    let (lr, mu) = (T::of(lr), T::of(cfg.momentum));
    for p in params.iter_mut() {
        let Some(g) = grads.get(&p.name) else {
            continue;
        };
        if g.shape() != p.tensor.shape() {
            return Err(Error::shape(
                "nag_step",
                format!(
                    "{}: grad {:?} vs param {:?}",
                    p.name,
                    g.shape(),
                    p.tensor.shape()
                ),
            ));
        }
        let wd = if p.decay {
            T::of(cfg.weight_decay)
        } else {
            T::zero()
        };
        let v = state
            .buffers
            .entry(p.name.clone())
            .or_insert_with(|| vec![T::zero(); g.len()]);
        if v.len() != g.len() {
            return Err(Error::shape(
                "nag_step",
                format!("{}: momentum buffer length {}", p.name, v.len()),
            ));
        }
        for ((w, &gi), vi) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.iter_mut())
        {
            let gd = gi + wd * *w;
            *vi = mu * *vi + gd;
            *w -= lr * (gd + mu * *vi);
        }
    }
    Ok(())
}

/// Learning rate at fractional epoch `epoch`: a linear ramp from 0 to `lr0`
/// over `warmup` epochs, then `lr0 (1 + cos(pi t)) / 2` with `t` the
/// post-warmup progress.
pub fn cosine_lr(epoch: f64, total_epochs: usize, warmup_epochs: usize, lr0: f64) -> Result<f64> {
    let total = total_epochs as f64;
    if !(epoch >= 0.0 && epoch < total) {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside [0, {total_epochs})"
        )));
    }
    if warmup_epochs >= total_epochs && warmup_epochs > 0 {
        return Err(Error::invalid(format!(
            "warmup {warmup_epochs} must be shorter than the phase ({total_epochs})"
        )));
    }
    let w = warmup_epochs as f64;
    if epoch < w {
        return Ok(lr0 * epoch / w);
    }
    let t = (epoch - w) / (total - w);
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}
