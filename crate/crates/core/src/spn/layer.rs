use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{expect_channels, join, Binder, Mode, ParamRef};
use crate::scalar::Scalar;
use crate::spn::exact::SpnTriple;
use crate::spn::ternary::{ternary_quantize, ternary_view, QuantizerConfig, TernaryMatrix};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Lifecycle {
    FullPrecision,
    QuantActive,
    FrozenTernary,
}

impl Lifecycle {
    pub fn name(self) -> &'static str {
        match self {
            Lifecycle::FullPrecision => "FULL_PRECISION",
            Lifecycle::QuantActive => "QUANT_ACTIVE",
            Lifecycle::FrozenTernary => "FROZEN_TERNARY",
        }
    }
}

/// How the hidden products are combined into output channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMixing {
    /// `W_c` is a trained ternary matrix.
    Learned,
    /// `h = 2 c_out` and output `j` is the sum of hidden units `2j` and
    /// `2j + 1`; `W_c` is a fixed constant with no stored parameters.
    Paired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Weights<T> {
    /// Real masters: filters `[c_out, c_in, k, k]`, `W_a [h, c_out c_in k^2]`,
    /// `W_b [h, c_in k^2]` and, for learned mixing, `W_c [c_out, h]`.
    Real {
        filters: Tensor<T>,
        wa: Tensor<T>,
        wb: Tensor<T>,
        wc: Option<Tensor<T>>,
    },
    Frozen {
        wb: TernaryMatrix<T>,
        wc: TernaryMatrix<T>,
        a_hat: Tensor<T>,
    },
}

/// Strassenified convolution: a `k x k` convolution with `W_b` producing
/// `h` hidden maps, a per-map product with `a_hat`, and a `1 x 1`
/// convolution with `W_c` down to `c_out` channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpnConvLayer<T> {
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    mixing: OutputMixing,
    quant: QuantizerConfig,
    state: Lifecycle,
    weights: Weights<T>,
}

/// Fixed pair-summing output matrix `[c_out, 2 c_out]`.
pub fn paired_mixing<T: Scalar>(c_out: usize) -> TernaryMatrix<T> {
    let mut wc = TernaryMatrix::zeros(c_out, 2 * c_out);
    for j in 0..c_out {
        wc.set(j, 2 * j, 1);
        wc.set(j, 2 * j + 1, 1);
    }
    wc
}

impl<T: Scalar> SpnConvLayer<T> {
    /// New layer in `FULL_PRECISION` with Xavier-uniform masters.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        h: usize,
        mixing: OutputMixing,
        quant: QuantizerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 || k == 0 || stride == 0 {
            return Err(Error::invalid(format!(
                "SPN layer needs positive c_in, c_out, k, stride (got {c_in}, {c_out}, {k}, {stride})"
            )));
        }
        if h == 0 {
            return Err(Error::invalid("SPN hidden width h must be >= 1"));
        }
        if mixing == OutputMixing::Paired && h != 2 * c_out {
            return Err(Error::invalid(format!(
                "paired mixing needs h = 2 c_out = {}, got {h}",
                2 * c_out
            )));
        }
        quant.validate()?;
        let patch = c_in * k * k;
        let filters = Tensor::xavier(&[c_out, c_in, k, k], patch, c_out * k * k, rng)
            .with_requires_grad(true);
        let wa =
            Tensor::xavier(&[h, c_out * patch], c_out * patch, h, rng).with_requires_grad(true);
        let wb = Tensor::xavier(&[h, patch], patch, h, rng).with_requires_grad(true);
        let wc = match mixing {
            OutputMixing::Learned => {
                Some(Tensor::xavier(&[c_out, h], h, c_out, rng).with_requires_grad(true))
            }
            OutputMixing::Paired => None,
        };
        Ok(Self {
            c_in,
            c_out,
            k,
            stride,
            pad,
            h,
            mixing,
            quant,
            state: Lifecycle::FullPrecision,
            weights: Weights::Real {
                filters,
                wa,
                wb,
                wc,
            },
        })
    }

    /// Layer already in `FROZEN_TERNARY` built from explicit parts. `W_b`
    /// and `W_c` must have unit scale.
    #[allow(clippy::too_many_arguments)]
    pub fn from_frozen(
        c_in: usize,
        k: usize,
        stride: usize,
        pad: usize,
        wb: TernaryMatrix<T>,
        wc: TernaryMatrix<T>,
        a_hat: Tensor<T>,
        quant: QuantizerConfig,
    ) -> Result<Self> {
        let h = wb.rows();
        if wb.cols() != c_in * k * k || wc.cols() != h || a_hat.shape() != [h] {
            return Err(Error::shape(
                "spn_layer",
                format!(
                    "W_b {}x{}, W_c {}x{}, a_hat {:?} for c_in {c_in}, k {k}",
                    wb.rows(),
                    wb.cols(),
                    wc.rows(),
                    wc.cols(),
                    a_hat.shape()
                ),
            ));
        }
        if wb.scale() != T::one() || wc.scale() != T::one() {
            return Err(Error::invalid("frozen W_b and W_c must have unit scale"));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        let mixing = if wc == paired_mixing(wc.rows()) {
            OutputMixing::Paired
        } else {
            OutputMixing::Learned
        };
        Ok(Self {
            c_in,
            c_out: wc.rows(),
            k,
            stride,
            pad,
            h,
            mixing,
            quant,
            state: Lifecycle::FrozenTernary,
            weights: Weights::Frozen {
                wb,
                wc,
                a_hat: a_hat.with_requires_grad(true),
            },
        })
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn kernel(&self) -> usize {
        self.k
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.pad
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn mixing(&self) -> OutputMixing {
        self.mixing
    }

    pub fn state(&self) -> Lifecycle {
        self.state
    }

    pub fn quantizer(&self) -> &QuantizerConfig {
        &self.quant
    }

    fn lifecycle_error(&self, op: &'static str, expected: Lifecycle) -> Error {
        Error::Lifecycle {
            op,
            expected: expected.name(),
            found: self.state.name(),
        }
    }

    /// `FULL_PRECISION -> QUANT_ACTIVE`.
    pub fn activate_quantization(&mut self) -> Result<()> {
        if self.state != Lifecycle::FullPrecision {
            return Err(self.lifecycle_error("activate_quantization", Lifecycle::FullPrecision));
        }
        self.state = Lifecycle::QuantActive;
        Ok(())
    }

    /// `QUANT_ACTIVE -> FROZEN_TERNARY`: fixes `W_b`, `W_c` at their ternary
    /// values and folds every scale into
    /// `a_hat = s_a s_b s_c (t_a vec(filters))`, which stays trainable.
    pub fn freeze_and_fold(&mut self) -> Result<()> {
        if self.state != Lifecycle::QuantActive {
            return Err(self.lifecycle_error("freeze_and_fold", Lifecycle::QuantActive));
        }
        let triple = self.ternary_triple()?;
        let Weights::Real { filters, .. } = &self.weights else {
            unreachable!("QUANT_ACTIVE layers hold real masters")
        };
        let a_hat = triple.fold_filter(filters.data())?;
        let a_hat = Tensor::from_vec(vec![self.h], a_hat)?.with_requires_grad(true);
        let one = |m: TernaryMatrix<T>| m.with_scale(T::one()).expect("unit scale");
        self.weights = Weights::Frozen {
            wb: one(triple.wb),
            wc: one(triple.wc),
            a_hat,
        };
        self.state = Lifecycle::FrozenTernary;
        Ok(())
    }

    /// Ternary views of the current masters; only defined in `QUANT_ACTIVE`.
    pub fn ternary_triple(&self) -> Result<SpnTriple<T>> {
        match (&self.weights, self.state) {
            (Weights::Real { wa, wb, wc, .. }, Lifecycle::QuantActive) => {
                let q = |t: &Tensor<T>| ternary_quantize(t, &self.quant).matrix;
                let wc = match wc {
                    Some(wc) => q(wc),
                    None => paired_mixing(self.c_out),
                };
                SpnTriple::new(q(wa), q(wb), wc)
            }
            _ => Err(self.lifecycle_error("ternary_triple", Lifecycle::QuantActive)),
        }
    }

    /// Real filter masters, present before freezing.
    pub fn filters(&self) -> Option<&Tensor<T>> {
        match &self.weights {
            Weights::Real { filters, .. } => Some(filters),
            Weights::Frozen { .. } => None,
        }
    }

    pub fn a_hat(&self) -> Option<&Tensor<T>> {
        match &self.weights {
            Weights::Frozen { a_hat, .. } => Some(a_hat),
            Weights::Real { .. } => None,
        }
    }

    pub fn a_hat_mut(&mut self) -> Option<&mut Tensor<T>> {
        match &mut self.weights {
            Weights::Frozen { a_hat, .. } => Some(a_hat),
            Weights::Real { .. } => None,
        }
    }

    /// Frozen `(W_b, W_c)`.
    pub fn frozen_matrices(&self) -> Option<(&TernaryMatrix<T>, &TernaryMatrix<T>)> {
        match &self.weights {
            Weights::Frozen { wb, wc, .. } => Some((wb, wc)),
            Weights::Real { .. } => None,
        }
    }

    pub fn forward<'t>(
        &self,
        b: &mut Binder<'t, T>,
        prefix: &str,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        expect_channels("spn_conv2d", &x.shape(), self.c_in)?;
        let (h, c_in, k, c_out) = (self.h, self.c_in, self.k, self.c_out);
        let (a_hat, wb, wc) = match &self.weights {
            Weights::Real {
                filters,
                wa,
                wb,
                wc,
            } => {
                let quant = self.state == Lifecycle::QuantActive;
                let cfg = self.quant;
                let view = |v: Var<'t, T>| -> Result<Var<'t, T>> {
                    if quant {
                        v.straight_through(|t| Ok(ternary_view(t, &cfg)))
                    } else {
                        Ok(v)
                    }
                };
                let f = b.param(&join(prefix, "filters"), filters);
                let wa_v = view(b.param(&join(prefix, "wa"), wa))?;
                let wb_v = view(b.param(&join(prefix, "wb"), wb))?;
                let wc_v = match wc {
                    Some(wc) => view(b.param(&join(prefix, "wc"), wc))?,
                    None => b.constant(paired_mixing::<T>(c_out).to_tensor()),
                };
                let vec_a = f.reshape(&[c_out * c_in * k * k, 1])?;
                let a_hat = wa_v.matmul(vec_a)?.reshape(&[h])?;
                (a_hat, wb_v, wc_v)
            }
            Weights::Frozen { wb, wc, a_hat } => {
                let a = b.param(&join(prefix, "a_hat"), a_hat);
                (a, b.constant(wb.to_tensor()), b.constant(wc.to_tensor()))
            }
        };
        let hidden = x.conv2d(wb.reshape(&[h, c_in, k, k])?, self.stride, self.pad)?;
        let hidden = hidden.scale_channels(a_hat)?;
        hidden.conv2d(wc.reshape(&[c_out, h, 1, 1])?, 1, 0)
    }

    /// Forward through the ternary views with straight-through gradients to
    /// the real masters. Only valid in `QUANT_ACTIVE`.
    pub fn quantized_forward_ste<'t>(
        &self,
        b: &mut Binder<'t, T>,
        prefix: &str,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        if self.state != Lifecycle::QuantActive {
            return Err(self.lifecycle_error("quantized_forward_ste", Lifecycle::QuantActive));
        }
        self.forward(b, prefix, x)
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamRef<'_, T>> {
        let master_decay = self.state == Lifecycle::FullPrecision;
        match &mut self.weights {
            Weights::Real {
                filters,
                wa,
                wb,
                wc,
            } => {
                let mut out = vec![
                    ParamRef {
                        name: join(prefix, "filters"),
                        tensor: filters,
                        decay: true,
                    },
                    ParamRef {
                        name: join(prefix, "wa"),
                        tensor: wa,
                        decay: master_decay,
                    },
                    ParamRef {
                        name: join(prefix, "wb"),
                        tensor: wb,
                        decay: master_decay,
                    },
                ];
                if let Some(wc) = wc {
                    out.push(ParamRef {
                        name: join(prefix, "wc"),
                        tensor: wc,
                        decay: master_decay,
                    });
                }
                out
            }
            Weights::Frozen { a_hat, .. } => vec![ParamRef {
                name: join(prefix, "a_hat"),
                tensor: a_hat,
                decay: true,
            }],
        }
    }

    /// Named real tensors and ternary matrices for serialization.
    pub(crate) fn state_entries(&self, prefix: &str) -> Vec<(String, StateRef<'_, T>)> {
        match &self.weights {
            Weights::Real {
                filters,
                wa,
                wb,
                wc,
            } => {
                let mut out = vec![
                    (join(prefix, "filters"), StateRef::Real(filters)),
                    (join(prefix, "wa"), StateRef::Real(wa)),
                    (join(prefix, "wb"), StateRef::Real(wb)),
                ];
                if let Some(wc) = wc {
                    out.push((join(prefix, "wc"), StateRef::Real(wc)));
                }
                out
            }
            Weights::Frozen { wb, wc, a_hat } => vec![
                (join(prefix, "wb"), StateRef::Ternary(wb)),
                (join(prefix, "wc"), StateRef::Ternary(wc)),
                (join(prefix, "a_hat"), StateRef::Real(a_hat)),
            ],
        }
    }

    /// Restores lifecycle and weights from serialized entries.
    pub(crate) fn load_state(
        &mut self,
        prefix: &str,
        state: Lifecycle,
        take: &mut dyn FnMut(&str) -> Result<StateValue<T>>,
    ) -> Result<()> {
        let real = |v: StateValue<T>, like: Option<&Tensor<T>>, name: &str| -> Result<Tensor<T>> {
            match v {
                StateValue::Real(t) => {
                    if let Some(like) = like {
                        if like.shape() != t.shape() {
                            return Err(Error::shape(
                                "load_state",
                                format!("{name}: {:?} vs {:?}", t.shape(), like.shape()),
                            ));
                        }
                    }
                    Ok(t.with_requires_grad(true))
                }
                StateValue::Ternary(_) => {
                    Err(Error::Malformed(format!("{name}: expected real tensor")))
                }
            }
        };
        let tern = |v: StateValue<T>, name: &str| -> Result<TernaryMatrix<T>> {
            match v {
                StateValue::Ternary(m) => Ok(m),
                StateValue::Real(_) => {
                    Err(Error::Malformed(format!("{name}: expected ternary matrix")))
                }
            }
        };
        let n = |s: &str| join(prefix, s);
        match state {
            Lifecycle::FullPrecision | Lifecycle::QuantActive => {
                let (filters, wa, wb, wc) = match &self.weights {
                    Weights::Real {
                        filters,
                        wa,
                        wb,
                        wc,
                    } => (
                        real(take(&n("filters"))?, Some(filters), &n("filters"))?,
                        real(take(&n("wa"))?, Some(wa), &n("wa"))?,
                        real(take(&n("wb"))?, Some(wb), &n("wb"))?,
                        match wc {
                            Some(wc) => Some(real(take(&n("wc"))?, Some(wc), &n("wc"))?),
                            None => None,
                        },
                    ),
                    Weights::Frozen { .. } => {
                        return Err(Error::Malformed(format!(
                            "{prefix}: cannot unfreeze a frozen layer"
                        )));
                    }
                };
                self.weights = Weights::Real {
                    filters,
                    wa,
                    wb,
                    wc,
                };
            }
            Lifecycle::FrozenTernary => {
                let wb = tern(take(&n("wb"))?, &n("wb"))?;
                let wc = tern(take(&n("wc"))?, &n("wc"))?;
                let a_hat = real(take(&n("a_hat"))?, None, &n("a_hat"))?;
                if wb.rows() != self.h
                    || wb.cols() != self.c_in * self.k * self.k
                    || wc.rows() != self.c_out
                    || wc.cols() != self.h
                    || a_hat.shape() != [self.h]
                {
                    return Err(Error::shape(
                        "load_state",
                        format!("{prefix}: frozen SPN dimensions"),
                    ));
                }
                self.weights = Weights::Frozen { wb, wc, a_hat };
            }
        }
        self.state = state;
        Ok(())
    }
}

/// Borrowed serialized form of one named entry.
#[derive(Debug, Clone, Copy)]
pub enum StateRef<'a, T> {
    Real(&'a Tensor<T>),
    Ternary(&'a TernaryMatrix<T>),
}

/// Owned serialized form of one named entry.
#[derive(Debug, Clone, PartialEq)]
pub enum StateValue<T> {
    Real(Tensor<T>),
    Ternary(TernaryMatrix<T>),
}

/// Untaped forward of a single SPN layer.
pub fn spn_conv2d<T: Scalar>(layer: &SpnConvLayer<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let mut b = Binder::new(&tape, Mode::Eval);
    let x = tape.constant(input.clone());
    Ok(layer.forward(&mut b, "", x)?.value())
}
