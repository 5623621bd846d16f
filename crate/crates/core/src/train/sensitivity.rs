//! Capacity of a ternary SPN computing `C = A F` for a fixed filter `F` on
//! the `B` side, as a function of the hidden width `h`.
//!
//! Each width runs three stages on `num_pairs` random inputs `A` with
//! entries uniform on `[-1, 1]`: momentum SGD in full precision, STE
//! training with ternarized `W_a`, `W_b`, `W_c`, then a freeze in which the
//! rounded `(W_c column, W_a row)` pairs are polished by iterated local
//! search with the per-unit coefficients `a_hat` refit by least squares.
//! The polish for width `h` also starts from the best width `h - 1`
//! solution plus one unit, so reported losses never increase with `h`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cholesky;
use crate::spn::search::{nonzero_ternary_vectors, AtomSpace, IlsParams};
use crate::spn::{ternary_quantize, QuantizerConfig};
use crate::tensor::Tensor;

/// Rows of `A` in every pair.
pub const INPUT_ROWS: usize = 2;
pub const DEFAULT_PAIRS: usize = 10_000;

/// Fixed 2x2 filter used by the builtin matmul target.
pub const BUILTIN_FILTER: [[f64; 2]; 2] = [[0.7, -1.3], [0.4, 0.9]];

/// Atom spaces above this size skip the polish stage.
const MAX_ATOMS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivityConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub fp_epochs: usize,
    /// STE epochs at `ste_learning_rate`, followed by as many at a tenth of it.
    pub ste_epochs: usize,
    pub ste_learning_rate: f64,
    pub ils_sweeps: usize,
    pub ils_perturbations: usize,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 4,
            fp_epochs: 1,
            ste_epochs: 2,
            ste_learning_rate: 0.01,
            ils_sweeps: 20,
            ils_perturbations: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub h: usize,
    /// Mean squared error per output entry of the final ternary SPN.
    pub loss: f64,
    /// Same error for the rounded STE solution before polishing.
    pub rounded_loss: f64,
    /// Gradient training produced a non-finite or exploding loss.
    pub diverged: bool,
}

/// The linear map `vec(A) -> vec(A F)` for `A` with [`INPUT_ROWS`] rows,
/// row-major vectorization.
fn target_map(filter: &Tensor<f64>) -> (Vec<f64>, usize, usize) {
    let (p, q) = (filter.shape()[0], filter.shape()[1]);
    let (n_in, n_out) = (INPUT_ROWS * p, INPUT_ROWS * q);
    let mut m = vec![0.0; n_out * n_in];
    for i in 0..INPUT_ROWS {
        for j in 0..q {
            for k in 0..p {
                m[(i * q + j) * n_in + i * p + k] = filter.data()[k * q + j];
            }
        }
    }
    (m, n_in, n_out)
}

struct Model {
    h: usize,
    n_in: usize,
    n_out: usize,
    wa: Vec<f64>,
    wb: Vec<f64>,
    wc: Vec<f64>,
}

fn ternarized(w: &[f64], rows: usize) -> (Vec<f64>, Vec<i8>) {
    let t = Tensor::from_vec(vec![rows, w.len() / rows], w.to_vec())
        .expect("length is a multiple of rows");
    let q = ternary_quantize(&t, &QuantizerConfig::default()).matrix;
    let s = q.scale();
    (
        q.entries().iter().map(|&e| s * f64::from(e)).collect(),
        q.entries().to_vec(),
    )
}

impl Model {
    fn new<R: Rng>(h: usize, n_in: usize, n_out: usize, f_len: usize, rng: &mut R) -> Self {
        let mut u = |n: usize| {
            (0..n)
                .map(|_| rng.random_range(-1.0..=1.0))
                .collect::<Vec<f64>>()
        };
        Self {
            h,
            n_in,
            n_out,
            wa: u(h * n_in),
            wb: u(h * f_len),
            wc: u(n_out * h),
        }
    }

    /// One pass over `xs` in batches; returns the mean squared error per
    /// output entry, or `None` on divergence.
    fn epoch(
        &mut self,
        xs: &[f64],
        m: &[f64],
        f: &[f64],
        lr: f64,
        cfg: &SensitivityConfig,
        ste: bool,
        vel: &mut [Vec<f64>; 3],
    ) -> Option<f64> {
        let (h, n_in, n_out) = (self.h, self.n_in, self.n_out);
        let fl = f.len();
        let n = xs.len() / n_in;
        let mut total = 0.0;
        for start in (0..n).step_by(cfg.batch_size) {
            let end = (start + cfg.batch_size).min(n);
            let (wa, wb, wc) = if ste {
                (
                    ternarized(&self.wa, h).0,
                    ternarized(&self.wb, h).0,
                    ternarized(&self.wc, n_out).0,
                )
            } else {
                (self.wa.clone(), self.wb.clone(), self.wc.clone())
            };
            let bhat: Vec<f64> = (0..h)
                .map(|r| (0..fl).map(|k| wb[r * fl + k] * f[k]).sum())
                .collect();
            let mut g = [vec![0.0; h * n_in], vec![0.0; h * fl], vec![0.0; n_out * h]];
            let mut dbhat = vec![0.0; h];
            let scale = 2.0 / ((end - start) * n_out) as f64;
            for s in start..end {
                let x = &xs[s * n_in..(s + 1) * n_in];
                let u: Vec<f64> = (0..h)
                    .map(|r| (0..n_in).map(|k| wa[r * n_in + k] * x[k]).sum())
                    .collect();
                let z: Vec<f64> = u.iter().zip(&bhat).map(|(a, b)| a * b).collect();
                for o in 0..n_out {
                    let y: f64 = (0..n_in).map(|k| m[o * n_in + k] * x[k]).sum();
                    let yh: f64 = (0..h).map(|r| wc[o * h + r] * z[r]).sum();
                    let e = yh - y;
                    total += e * e;
                    let e = e * scale;
                    for r in 0..h {
                        g[2][o * h + r] += e * z[r];
                        let dz = wc[o * h + r] * e;
                        dbhat[r] += dz * u[r];
                        let du = dz * bhat[r];
                        for k in 0..n_in {
                            g[0][r * n_in + k] += du * x[k];
                        }
                    }
                }
            }
            for r in 0..h {
                for k in 0..fl {
                    g[1][r * fl + k] += dbhat[r] * f[k];
                }
            }
            for ((w, gv), v) in [&mut self.wa, &mut self.wb, &mut self.wc]
                .into_iter()
                .zip(&g)
                .zip(vel.iter_mut())
            {
                for ((wi, &gi), vi) in w.iter_mut().zip(gv).zip(v.iter_mut()) {
                    *vi = cfg.momentum * *vi + gi;
                    *wi -= lr * *vi;
                }
            }
        }
        let mse = total / (n * n_out) as f64;
        (mse.is_finite() && mse < 1e6).then_some(mse)
    }
}

fn ternary_index(vectors: &[Vec<i8>]) -> HashMap<Vec<i8>, usize> {
    vectors
        .iter()
        .enumerate()
        .map(|(i, v)| (v.clone(), i))
        .collect()
}

/// Runs the experiment for every width in `h_list` (sorted, deduplicated).
pub fn sensitivity_experiment(
    filter: &Tensor<f64>,
    h_list: &[usize],
    num_pairs: usize,
    seed: u64,
) -> Result<Vec<SensitivityPoint>> {
    sensitivity_with(
        filter,
        h_list,
        num_pairs,
        seed,
        &SensitivityConfig::default(),
    )
}

pub fn sensitivity_with(
    filter: &Tensor<f64>,
    h_list: &[usize],
    num_pairs: usize,
    seed: u64,
    cfg: &SensitivityConfig,
) -> Result<Vec<SensitivityPoint>> {
    if filter.shape().len() != 2 || filter.is_empty() {
        return Err(Error::invalid(format!(
            "filter must be a non-empty matrix, got shape {:?}",
            filter.shape()
        )));
    }
    if !filter.all_finite() {
        return Err(Error::invalid("filter has non-finite entries"));
    }
    if h_list.is_empty() {
        return Err(Error::invalid("h list is empty"));
    }
    if let Some(&h) = h_list.iter().find(|&&h| h == 0) {
        return Err(Error::invalid(format!(
            "hidden width must be >= 1, got {h}"
        )));
    }
    if cfg.batch_size == 0 || num_pairs < cfg.batch_size {
        return Err(Error::invalid(format!(
            "need at least one batch of {} pairs, got {num_pairs}",
            cfg.batch_size
        )));
    }
    let mut hs = h_list.to_vec();
    hs.sort_unstable();
    hs.dedup();

    let f = filter.data().to_vec();
    let (m, n_in, n_out) = target_map(filter);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..num_pairs * n_in)
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();

    // Empirical second moment S = L L^T, so the training loss of any linear
    // map M' is |(M' - M) L|_F^2 / (N n_out).
    let mut s = vec![0.0; n_in * n_in];
    for x in xs.chunks(n_in) {
        for i in 0..n_in {
            for j in 0..n_in {
                s[i * n_in + j] += x[i] * x[j];
            }
        }
    }
    s.iter_mut().for_each(|v| *v /= num_pairs as f64);
    let l = cholesky(&s, n_in).ok_or_else(|| Error::invalid("input second moment is singular"))?;
    let mut target = vec![0.0; n_out * n_in];
    for o in 0..n_out {
        for t in 0..n_in {
            target[o * n_in + t] = (0..n_in).map(|k| m[o * n_in + k] * l[k * n_in + t]).sum();
        }
    }
    let target = vec![target];

    let lefts = nonzero_ternary_vectors(n_out);
    let rights = nonzero_ternary_vectors(n_in);
    let polish = lefts.len() * rights.len() <= MAX_ATOMS;
    let (left_idx, right_idx) = (ternary_index(&lefts), ternary_index(&rights));
    let space = polish.then(|| {
        let right: Vec<Vec<f64>> = rights
            .iter()
            .map(|a| {
                (0..n_in)
                    .map(|t| (0..n_in).map(|k| f64::from(a[k]) * l[k * n_in + t]).sum())
                    .collect()
            })
            .collect();
        let left = lefts
            .iter()
            .map(|c| c.iter().map(|&v| f64::from(v)).collect())
            .collect();
        AtomSpace::new(left, right)
    });
    let params = IlsParams {
        sweeps: cfg.ils_sweeps,
        perturbations: cfg.ils_perturbations,
        tol: 1e-24,
    };
    let scale = 1.0 / n_out as f64;

    let mut out = Vec::with_capacity(hs.len());
    let mut prev: Option<Vec<usize>> = None;
    for &h in &hs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (h as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut model = Model::new(h, n_in, n_out, f.len(), &mut rng);
        let mut vel = [
            vec![0.0; h * n_in],
            vec![0.0; h * f.len()],
            vec![0.0; n_out * h],
        ];
        let mut diverged = false;
        let mut schedule = vec![(cfg.learning_rate, false); cfg.fp_epochs];
        schedule.extend(std::iter::repeat_n(
            (cfg.ste_learning_rate, true),
            cfg.ste_epochs,
        ));
        schedule.extend(std::iter::repeat_n(
            (cfg.ste_learning_rate * 0.1, true),
            cfg.ste_epochs,
        ));
        for (i, &(lr, ste)) in schedule.iter().enumerate() {
            if i == cfg.fp_epochs {
                vel.iter_mut()
                    .for_each(|v| v.iter_mut().for_each(|x| *x = 0.0));
            }
            if model.epoch(&xs, &m, &f, lr, cfg, ste, &mut vel).is_none() {
                diverged = true;
                break;
            }
        }

        let ta = ternarized(&model.wa, h).1;
        let tc = ternarized(&model.wc, n_out).1;
        let Some(space) = &space else {
            let loss = if diverged {
                f64::NAN
            } else {
                frozen_loss(&model, &m, &xs, &f)
            };
            out.push(SensitivityPoint {
                h,
                loss,
                rounded_loss: loss,
                diverged,
            });
            continue;
        };
        let nr = rights.len();
        let mut idx: Vec<usize> = (0..h)
            .map(|r| {
                let c: Vec<i8> = (0..n_out).map(|o| tc[o * h + r]).collect();
                let a = ta[r * n_in..(r + 1) * n_in].to_vec();
                match (diverged, left_idx.get(&c), right_idx.get(&a)) {
                    (false, Some(&li), Some(&ri)) => li * nr + ri,
                    _ => rng.random_range(0..space.len()),
                }
            })
            .collect();
        let rounded = space.loss(&target, &idx);
        let (mut best, _) =
            space.iterated_local_search(&target, &mut idx, &params, &mut rng, &mut |_| true);
        if let Some(p) = &prev {
            let mut warm = p.clone();
            while warm.len() < h {
                warm.push(rng.random_range(0..space.len()));
            }
            let (l2, _) =
                space.iterated_local_search(&target, &mut warm, &params, &mut rng, &mut |_| true);
            if l2 < best {
                best = l2;
                idx = warm;
            }
        }
        prev = Some(idx);
        out.push(SensitivityPoint {
            h,
            loss: best * scale,
            rounded_loss: rounded * scale,
            diverged,
        });
    }
    Ok(out)
}

/// Error of the STE model with ternary weights, for spaces too large to polish.
fn frozen_loss(model: &Model, m: &[f64], xs: &[f64], f: &[f64]) -> f64 {
    let (h, n_in, n_out) = (model.h, model.n_in, model.n_out);
    let wa = ternarized(&model.wa, h).0;
    let wb = ternarized(&model.wb, h).0;
    let wc = ternarized(&model.wc, n_out).0;
    let fl = f.len();
    let bhat: Vec<f64> = (0..h)
        .map(|r| (0..fl).map(|k| wb[r * fl + k] * f[k]).sum())
        .collect();
    let mut total = 0.0;
    for x in xs.chunks(n_in) {
        let z: Vec<f64> = (0..h)
            .map(|r| bhat[r] * (0..n_in).map(|k| wa[r * n_in + k] * x[k]).sum::<f64>())
            .collect();
        for o in 0..n_out {
            let y: f64 = (0..n_in).map(|k| m[o * n_in + k] * x[k]).sum();
            let yh: f64 = (0..h).map(|r| wc[o * h + r] * z[r]).sum();
            total += (yh - y) * (yh - y);
        }
    }
    total / (xs.len() / n_in * n_out) as f64
}

/// The builtin 2x2 matmul filter as a tensor.
pub fn builtin_filter() -> Tensor<f64> {
    Tensor::from_vec(
        vec![2, 2],
        BUILTIN_FILTER.iter().flatten().copied().collect(),
    )
    .expect("2x2")
}
