use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::arch::round_half_up;
use crate::nn::{expect_channels, join, Binder, Mode, ParamRef};
use crate::scalar::Scalar;
use crate::spn::{OutputMixing, QuantizerConfig, SpnConvLayer};
use crate::tensor::{Tape, Tensor, Var};

/// Convolution whose leading `round(alpha c_out)` output channels come from
/// full-precision filters and the rest from an SPN, concatenated in that
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridBankLayer<T> {
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    alpha: f64,
    fp_filters: Option<Tensor<T>>,
    spn: Option<SpnConvLayer<T>>,
}

/// Geometry of a bank: channels, kernel, stride and padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> HybridBankLayer<T> {
    /// Splits by `alpha` and sizes the SPN part with `h = round(rho c_out_spn)`.
    /// Full-precision filters use the Xavier bound of the whole layer, so an
    /// `alpha = 1` bank draws exactly the weights of a plain convolution.
    pub fn new<R: Rng + ?Sized>(
        shape: ConvShape,
        alpha: f64,
        rho: f64,
        quant: QuantizerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!(
                "alpha must lie in [0, 1], got {alpha}"
            )));
        }
        if !(rho > 0.0) {
            return Err(Error::invalid(format!("rho must be positive, got {rho}")));
        }
        let fp = round_half_up(alpha * shape.c_out as f64).min(shape.c_out);
        let h = round_half_up(rho * (shape.c_out - fp) as f64).max(1);
        Self::with_split(shape, fp, h, quant, rng)
    }

    /// Explicit split: `fp_channels` plain filters and an SPN of width `h`
    /// for the remainder.
    pub fn with_split<R: Rng + ?Sized>(
        shape: ConvShape,
        fp_channels: usize,
        h: usize,
        quant: QuantizerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let ConvShape {
            c_in,
            c_out,
            k,
            stride,
            pad,
        } = shape;
        if c_in == 0 || c_out == 0 || k == 0 || stride == 0 {
            return Err(Error::invalid(format!(
                "conv needs positive c_in, c_out, k, stride (got {c_in}, {c_out}, {k}, {stride})"
            )));
        }
        if fp_channels > c_out {
            return Err(Error::invalid(format!(
                "{fp_channels} full-precision channels exceed c_out {c_out}"
            )));
        }
        let fp_filters = (fp_channels > 0).then(|| {
            Tensor::xavier(&[fp_channels, c_in, k, k], c_in * k * k, c_out * k * k, rng)
                .with_requires_grad(true)
        });
        let spn_channels = c_out - fp_channels;
        let spn = if spn_channels > 0 {
            Some(SpnConvLayer::new(
                c_in,
                spn_channels,
                k,
                stride,
                pad,
                h,
                OutputMixing::Learned,
                quant,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            c_in,
            c_out,
            k,
            stride,
            pad,
            alpha: fp_channels as f64 / c_out as f64,
            fp_filters,
            spn,
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

    /// Realized full-precision fraction `fp_channels / c_out`.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn fp_channels(&self) -> usize {
        self.fp_filters.as_ref().map_or(0, |f| f.shape()[0])
    }

    pub fn fp_filters(&self) -> Option<&Tensor<T>> {
        self.fp_filters.as_ref()
    }

    pub fn fp_filters_mut(&mut self) -> Option<&mut Tensor<T>> {
        self.fp_filters.as_mut()
    }

    pub fn spn(&self) -> Option<&SpnConvLayer<T>> {
        self.spn.as_ref()
    }

    pub fn spn_mut(&mut self) -> Option<&mut SpnConvLayer<T>> {
        self.spn.as_mut()
    }

    pub fn forward<'t>(
        &self,
        b: &mut Binder<'t, T>,
        prefix: &str,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        expect_channels("hybrid_conv2d", &x.shape(), self.c_in)?;
        let fp = match &self.fp_filters {
            Some(f) => Some(x.conv2d(b.param(&join(prefix, "fp"), f), self.stride, self.pad)?),
            None => None,
        };
        let spn = match &self.spn {
            Some(s) => Some(s.forward(b, &join(prefix, "spn"), x)?),
            None => None,
        };
        match (fp, spn) {
            (Some(f), Some(s)) => f.concat_channels(s),
            (Some(f), None) => Ok(f),
            (None, Some(s)) => Ok(s),
            (None, None) => unreachable!("a bank has at least one output channel"),
        }
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        if let Some(f) = &mut self.fp_filters {
            out.push(ParamRef {
                name: join(prefix, "fp"),
                tensor: f,
                decay: true,
            });
        }
        if let Some(s) = &mut self.spn {
            out.extend(s.params_mut(&join(prefix, "spn")));
        }
        out
    }
}

/// Untaped eval forward of a bank.
pub fn hybrid_forward<T: Scalar>(
    layer: &HybridBankLayer<T>,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let mut b = Binder::new(&tape, Mode::Eval);
    let x = tape.constant(input.clone());
    Ok(layer.forward(&mut b, "", x)?.value())
}
