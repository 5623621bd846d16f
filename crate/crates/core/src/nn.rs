//! Layer plumbing shared by the SPN and network modules: parameter binding
//! onto a tape and batch normalization with running statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Mutable view of one trainable tensor.
#[derive(Debug)]
pub struct ParamRef<'a, T> {
    pub name: String,
    pub tensor: &'a mut Tensor<T>,
    /// Whether L2 weight decay applies in the current lifecycle state.
    pub decay: bool,
}

/// Records parameters as tape leaves under stable names so gradients can be
/// routed back after the backward sweep.
#[derive(Debug)]
pub struct Binder<'t, T> {
    tape: &'t Tape<T>,
    mode: Mode,
    bound: Vec<(String, Var<'t, T>)>,
}

impl<'t, T: Scalar> Binder<'t, T> {
    pub fn new(tape: &'t Tape<T>, mode: Mode) -> Self {
        Self {
            tape,
            mode,
            bound: Vec::new(),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Binds a parameter. It is differentiable only in train mode and only
    /// if the tensor itself requires a gradient.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var<'t, T> {
        let train = self.mode == Mode::Train && t.requires_grad();
        let v = self.tape.leaf(t.clone().with_requires_grad(train));
        if train {
            self.bound.push((name.to_string(), v));
        }
        v
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(t)
    }

    /// Gradients of every bound parameter after [`Tape::backward`]. Bound
    /// parameters the loss did not reach get zero gradients.
    pub fn grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .map(|(name, v)| {
                let g = v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Per-channel batch normalization. Running variance tracks the unbiased
/// batch variance with momentum 0.1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()).with_requires_grad(true),
            beta: Tensor::zeros(&[channels]).with_requires_grad(true),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward<'t>(
        &mut self,
        b: &mut Binder<'t, T>,
        prefix: &str,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let gamma = b.param(&join(prefix, "gamma"), &self.gamma);
        let beta = b.param(&join(prefix, "beta"), &self.beta);
        let eps = T::of(self.eps);
        match b.mode() {
            Mode::Eval => x.batchnorm_eval(
                gamma,
                beta,
                self.running_mean.data(),
                self.running_var.data(),
                eps,
            ),
            Mode::Train => {
                let shape = x.shape();
                let m = shape[0] * shape[2..].iter().product::<usize>();
                let (y, mean, var) = x.batchnorm_train(gamma, beta, eps)?;
                let mom = T::of(self.momentum);
                let unbias = if m > 1 {
                    T::of(m as f64 / (m - 1) as f64)
                } else {
                    T::one()
                };
                for (r, &v) in self.running_mean.data_mut().iter_mut().zip(&mean) {
                    *r = (T::one() - mom) * *r + mom * v;
                }
                for (r, &v) in self.running_var.data_mut().iter_mut().zip(&var) {
                    *r = (T::one() - mom) * *r + mom * v * unbias;
                }
                Ok(y)
            }
        }
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamRef<'_, T>> {
        vec![
            ParamRef {
                name: join(prefix, "gamma"),
                tensor: &mut self.gamma,
                decay: false,
            },
            ParamRef {
                name: join(prefix, "beta"),
                tensor: &mut self.beta,
                decay: false,
            },
        ]
    }

    pub fn buffers(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        vec![
            (join(prefix, "running_mean"), &self.running_mean),
            (join(prefix, "running_var"), &self.running_var),
        ]
    }

    pub fn buffers_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            (join(prefix, "running_mean"), &mut self.running_mean),
            (join(prefix, "running_var"), &mut self.running_var),
        ]
    }
}

pub(crate) fn expect_channels(op: &'static str, shape: &[usize], c: usize) -> Result<()> {
    if shape.len() != 4 || shape[1] != c {
        return Err(Error::shape(
            op,
            format!("expected [N, {c}, H, W], got {shape:?}"),
        ));
    }
    Ok(())
}
