use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::arch::{ArchSpec, LayerKind};
use crate::hybrid::bank::{ConvShape, HybridBankLayer};
use crate::hybrid::plan::{QuantMode, QuantPlan};
use crate::nn::{join, BatchNorm, Binder, Mode, ParamRef};
use crate::scalar::Scalar;
use crate::spn::{ternary_view, Lifecycle, SpnConvLayer, StateRef, StateValue};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DenseHead<T> {
    /// `weight [out, in]`.
    Plain { weight: Tensor<T> },
    /// `1 x 1` SPN over the pooled features.
    Spn(SpnConvLayer<T>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NetLayer<T> {
    Conv {
        bank: HybridBankLayer<T>,
        bn: BatchNorm<T>,
    },
    /// `weight [C, 1, k, k]`.
    Depthwise {
        weight: Tensor<T>,
        stride: usize,
        pad: usize,
        bn: BatchNorm<T>,
    },
    Pool,
    Dense {
        head: DenseHead<T>,
        bias: Tensor<T>,
    },
}

/// A network built from an [`ArchSpec`] under a [`QuantPlan`]. Every conv
/// and pointwise layer is followed by batch norm and ReLU, as is every
/// depthwise layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network<T> {
    spec: ArchSpec,
    plan: QuantPlan,
    lifecycle: Lifecycle,
    layers: Vec<NetLayer<T>>,
}

fn layer_prefix(i: usize) -> String {
    format!("l{i:02}")
}

fn bn_entries<'a, T: Scalar>(prefix: &str, bn: &'a BatchNorm<T>) -> Vec<(String, StateRef<'a, T>)> {
    let q = join(prefix, "bn");
    let mut v = vec![
        (join(&q, "gamma"), StateRef::Real(&bn.gamma)),
        (join(&q, "beta"), StateRef::Real(&bn.beta)),
    ];
    v.extend(
        bn.buffers(&q)
            .into_iter()
            .map(|(n, t)| (n, StateRef::Real(t))),
    );
    v
}

/// Builds a network with Xavier-uniform weights drawn from `seed`.
pub fn instantiate<T: Scalar>(spec: &ArchSpec, plan: &QuantPlan, seed: u64) -> Result<Network<T>> {
    Network::new(spec, plan, seed)
}

impl<T: Scalar> Network<T> {
    pub fn new(spec: &ArchSpec, plan: &QuantPlan, seed: u64) -> Result<Self> {
        spec.validate()?;
        plan.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fc_spn = plan.strassenify_fc(spec);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            let layer = match l.kind {
                LayerKind::StandardConv | LayerKind::PointwiseConv => {
                    let split = plan.conv_split(l.c_out);
                    let shape = ConvShape {
                        c_in: l.c_in,
                        c_out: l.c_out,
                        k: l.k,
                        stride: l.stride,
                        pad: l.pad,
                    };
                    NetLayer::Conv {
                        bank: HybridBankLayer::with_split(
                            shape,
                            split.fp_channels,
                            split.h,
                            plan.quantizer,
                            &mut rng,
                        )?,
                        bn: BatchNorm::new(l.c_out),
                    }
                }
                LayerKind::DepthwiseConv => NetLayer::Depthwise {
                    weight: Tensor::xavier(&[l.c_in, 1, l.k, l.k], l.k * l.k, l.k * l.k, &mut rng)
                        .with_requires_grad(true),
                    stride: l.stride,
                    pad: l.pad,
                    bn: BatchNorm::new(l.c_in),
                },
                LayerKind::GlobalPool => NetLayer::Pool,
                LayerKind::Dense => {
                    let head = if fc_spn {
                        DenseHead::Spn(SpnConvLayer::new(
                            l.c_in,
                            l.c_out,
                            1,
                            1,
                            0,
                            plan.fc_hidden(l),
                            plan.fc_policy.mixing(),
                            plan.quantizer,
                            &mut rng,
                        )?)
                    } else {
                        DenseHead::Plain {
                            weight: Tensor::xavier(&[l.c_out, l.c_in], l.c_in, l.c_out, &mut rng)
                                .with_requires_grad(true),
                        }
                    };
                    NetLayer::Dense {
                        head,
                        bias: Tensor::zeros(&[l.c_out]).with_requires_grad(true),
                    }
                }
            };
            layers.push(layer);
        }
        Ok(Self {
            spec: spec.clone(),
            plan: *plan,
            lifecycle: Lifecycle::FullPrecision,
            layers,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn plan(&self) -> &QuantPlan {
        &self.plan
    }

    pub fn lifecycle(&self) -> Lifecycle {
        self.lifecycle
    }

    pub fn layers(&self) -> &[NetLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [NetLayer<T>] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Logits `[N, classes]` for input `[N, C, H, W]`. Train mode uses batch
    /// statistics and updates the running estimates.
    pub fn forward<'t>(&mut self, b: &mut Binder<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let in_shape = [
            self.spec.in_channels,
            self.spec.resolution,
            self.spec.resolution,
        ];
        let s = x.shape();
        if s.len() != 4 || s[1..] != in_shape {
            return Err(Error::shape(
                "network",
                format!(
                    "expected [N, {}, {}, {}], got {s:?}",
                    in_shape[0], in_shape[1], in_shape[2]
                ),
            ));
        }
        let mut x = x;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = layer_prefix(i);
            x = match layer {
                NetLayer::Conv { bank, bn } => {
                    let y = bank.forward(b, &join(&p, "conv"), x)?;
                    bn.forward(b, &join(&p, "bn"), y)?.relu()?
                }
                NetLayer::Depthwise {
                    weight,
                    stride,
                    pad,
                    bn,
                } => {
                    let w = b.param(&join(&p, "dw"), weight);
                    let y = x.depthwise_conv2d(w, *stride, *pad)?;
                    bn.forward(b, &join(&p, "bn"), y)?.relu()?
                }
                NetLayer::Pool => x.global_avg_pool()?,
                NetLayer::Dense { head, bias } => {
                    let bias_v = b.param(&join(&p, "fc.b"), bias);
                    match head {
                        DenseHead::Plain { weight } => {
                            x.linear(b.param(&join(&p, "fc.w"), weight), Some(bias_v))?
                        }
                        DenseHead::Spn(spn) => {
                            let sh = x.shape();
                            let y = spn.forward(
                                b,
                                &join(&p, "fc.spn"),
                                x.reshape(&[sh[0], sh[1], 1, 1])?,
                            )?;
                            y.reshape(&[sh[0], spn.c_out()])?.add_channels(bias_v)?
                        }
                    }
                }
            };
        }
        Ok(x)
    }

    /// Eval-mode logits without recording gradients.
    pub fn predict(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let mut b = Binder::new(&tape, Mode::Eval);
        let x = tape.constant(input.clone());
        Ok(self.forward(&mut b, x)?.value())
    }

    fn spn_layers_mut_inner(&mut self) -> Vec<&mut SpnConvLayer<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                NetLayer::Conv { bank, .. } => {
                    if let Some(s) = bank.spn_mut() {
                        out.push(s);
                    }
                }
                NetLayer::Dense {
                    head: DenseHead::Spn(s),
                    ..
                } => out.push(s),
                _ => {}
            }
        }
        out
    }

    /// Named SPN layers in network order.
    pub fn spn_layers(&self) -> Vec<(String, &SpnConvLayer<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let p = layer_prefix(i);
            match layer {
                NetLayer::Conv { bank, .. } => {
                    if let Some(s) = bank.spn() {
                        out.push((join(&p, "conv.spn"), s));
                    }
                }
                NetLayer::Dense {
                    head: DenseHead::Spn(s),
                    ..
                } => out.push((join(&p, "fc.spn"), s)),
                _ => {}
            }
        }
        out
    }

    fn transition_error(&self, op: &'static str, expected: Lifecycle) -> Error {
        Error::Lifecycle {
            op,
            expected: expected.name(),
            found: self.lifecycle.name(),
        }
    }

    /// Moves every SPN layer to `QUANT_ACTIVE`. Networks without SPN layers
    /// only record the transition.
    pub fn activate_quantization(&mut self) -> Result<()> {
        if self.lifecycle != Lifecycle::FullPrecision {
            return Err(self.transition_error("activate_quantization", Lifecycle::FullPrecision));
        }
        for s in self.spn_layers_mut_inner() {
            s.activate_quantization()?;
        }
        self.lifecycle = Lifecycle::QuantActive;
        Ok(())
    }

    /// Freezes every SPN layer and folds its scales into `a_hat`.
    pub fn freeze_and_fold(&mut self) -> Result<()> {
        if self.lifecycle != Lifecycle::QuantActive {
            return Err(self.transition_error("freeze_and_fold", Lifecycle::QuantActive));
        }
        for s in self.spn_layers_mut_inner() {
            s.freeze_and_fold()?;
        }
        self.lifecycle = Lifecycle::FrozenTernary;
        Ok(())
    }

    /// Replaces every conv, depthwise and dense weight with its ternary view
    /// (one scale per tensor). Only meaningful for a TWN plan.
    pub fn ternarize_post_training(&mut self) -> Result<()> {
        if self.plan.mode != QuantMode::Twn {
            return Err(Error::invalid(format!(
                "post-training ternarization needs a twn plan, got {}",
                self.plan.mode.name()
            )));
        }
        let cfg = self.plan.quantizer;
        let tern = |t: &mut Tensor<T>| {
            let v = ternary_view(t, &cfg).with_requires_grad(t.requires_grad());
            *t = v;
        };
        for layer in &mut self.layers {
            match layer {
                NetLayer::Conv { bank, .. } => {
                    if let Some(f) = bank.fp_filters_mut() {
                        tern(f);
                    }
                }
                NetLayer::Depthwise { weight, .. } => tern(weight),
                NetLayer::Dense {
                    head: DenseHead::Plain { weight },
                    ..
                } => tern(weight),
                _ => {}
            }
        }
        Ok(())
    }

    /// Trainable tensors with their weight-decay flags.
    pub fn params_mut(&mut self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = layer_prefix(i);
            match layer {
                NetLayer::Conv { bank, bn } => {
                    out.extend(bank.params_mut(&join(&p, "conv")));
                    out.extend(bn.params_mut(&join(&p, "bn")));
                }
                NetLayer::Depthwise { weight, bn, .. } => {
                    out.push(ParamRef {
                        name: join(&p, "dw"),
                        tensor: weight,
                        decay: true,
                    });
                    out.extend(bn.params_mut(&join(&p, "bn")));
                }
                NetLayer::Pool => {}
                NetLayer::Dense { head, bias } => {
                    match head {
                        DenseHead::Plain { weight } => out.push(ParamRef {
                            name: join(&p, "fc.w"),
                            tensor: weight,
                            decay: true,
                        }),
                        DenseHead::Spn(s) => out.extend(s.params_mut(&join(&p, "fc.spn"))),
                    }
                    out.push(ParamRef {
                        name: join(&p, "fc.b"),
                        tensor: bias,
                        decay: false,
                    });
                }
            }
        }
        out
    }

    /// Number of trainable scalars in the current lifecycle state.
    pub fn num_params(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.tensor.len()).sum()
    }

    /// Every tensor needed to restore the network, in a stable order.
    pub fn state_entries(&self) -> Vec<(String, StateRef<'_, T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let p = layer_prefix(i);
            match layer {
                NetLayer::Conv { bank, bn } => {
                    let q = join(&p, "conv");
                    if let Some(f) = bank.fp_filters() {
                        out.push((join(&q, "fp"), StateRef::Real(f)));
                    }
                    if let Some(s) = bank.spn() {
                        out.extend(s.state_entries(&join(&q, "spn")));
                    }
                    out.extend(bn_entries(&p, bn));
                }
                NetLayer::Depthwise { weight, bn, .. } => {
                    out.push((join(&p, "dw"), StateRef::Real(weight)));
                    out.extend(bn_entries(&p, bn));
                }
                NetLayer::Pool => {}
                NetLayer::Dense { head, bias } => {
                    match head {
                        DenseHead::Plain { weight } => {
                            out.push((join(&p, "fc.w"), StateRef::Real(weight)))
                        }
                        DenseHead::Spn(s) => out.extend(s.state_entries(&join(&p, "fc.spn"))),
                    }
                    out.push((join(&p, "fc.b"), StateRef::Real(bias)));
                }
            }
        }
        out
    }

    /// Restores weights saved by [`Network::state_entries`] from a network
    /// with the same spec and plan. `take` yields the entry for a name.
    pub fn load_state(
        &mut self,
        lifecycle: Lifecycle,
        take: &mut dyn FnMut(&str) -> Result<StateValue<T>>,
    ) -> Result<()> {
        fn real<T: Scalar>(v: StateValue<T>, like: &Tensor<T>, name: &str) -> Result<Tensor<T>> {
            match v {
                StateValue::Real(t) if t.shape() == like.shape() => {
                    Ok(t.with_requires_grad(like.requires_grad()))
                }
                StateValue::Real(t) => Err(Error::shape(
                    "load_state",
                    format!("{name}: {:?} vs {:?}", t.shape(), like.shape()),
                )),
                StateValue::Ternary(_) => {
                    Err(Error::Malformed(format!("{name}: expected a real tensor")))
                }
            }
        }
        let fill = |t: &mut Tensor<T>,
                    name: String,
                    take: &mut dyn FnMut(&str) -> Result<StateValue<T>>|
         -> Result<()> {
            let v = take(&name)?;
            *t = real(v, t, &name)?;
            Ok(())
        };
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = layer_prefix(i);
            let load_bn = |bn: &mut BatchNorm<T>,
                           take: &mut dyn FnMut(&str) -> Result<StateValue<T>>|
             -> Result<()> {
                let q = join(&p, "bn");
                fill(&mut bn.gamma, join(&q, "gamma"), take)?;
                fill(&mut bn.beta, join(&q, "beta"), take)?;
                fill(&mut bn.running_mean, join(&q, "running_mean"), take)?;
                fill(&mut bn.running_var, join(&q, "running_var"), take)
            };
            match layer {
                NetLayer::Conv { bank, bn } => {
                    let q = join(&p, "conv");
                    if let Some(f) = bank.fp_filters_mut() {
                        let name = join(&q, "fp");
                        let v = take(&name)?;
                        *f = real(v, f, &name)?;
                    }
                    if let Some(s) = bank.spn_mut() {
                        s.load_state(&join(&q, "spn"), lifecycle, take)?;
                    }
                    load_bn(bn, take)?;
                }
                NetLayer::Depthwise { weight, bn, .. } => {
                    let name = join(&p, "dw");
                    let v = take(&name)?;
                    *weight = real(v, weight, &name)?;
                    load_bn(bn, take)?;
                }
                NetLayer::Pool => {}
                NetLayer::Dense { head, bias } => {
                    match head {
                        DenseHead::Plain { weight } => {
                            let name = join(&p, "fc.w");
                            let v = take(&name)?;
                            *weight = real(v, weight, &name)?;
                        }
                        DenseHead::Spn(s) => s.load_state(&join(&p, "fc.spn"), lifecycle, take)?,
                    }
                    let name = join(&p, "fc.b");
                    let v = take(&name)?;
                    *bias = real(v, bias, &name)?;
                }
            }
        }
        self.lifecycle = lifecycle;
        Ok(())
    }
}
