use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::arch::{round_half_up, ArchSpec, LayerDesc, LayerKind};
use crate::spn::{OutputMixing, QuantizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    Fp16,
    Twn,
    Strassen,
    Hybrid,
}

impl QuantMode {
    pub fn name(self) -> &'static str {
        match self {
            QuantMode::Fp16 => "fp16",
            QuantMode::Twn => "twn",
            QuantMode::Strassen => "strassen",
            QuantMode::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp16" => Ok(QuantMode::Fp16),
            "twn" => Ok(QuantMode::Twn),
            "strassen" | "st" => Ok(QuantMode::Strassen),
            "hybrid" => Ok(QuantMode::Hybrid),
            other => Err(Error::invalid(format!("unknown mode '{other}'"))),
        }
    }
}

/// Strassenified dense layer: hidden width `2 c_out`, combined either by
/// the fixed pair sum or by a trained ternary `W_c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FcPolicy {
    #[default]
    Paired,
    Learned,
}

impl FcPolicy {
    pub fn mixing(self) -> OutputMixing {
        match self {
            FcPolicy::Paired => OutputMixing::Paired,
            FcPolicy::Learned => OutputMixing::Learned,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantPlan {
    pub mode: QuantMode,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "one")]
    pub rho: f64,
    #[serde(default)]
    pub fc_policy: FcPolicy,
    #[serde(default)]
    pub quantizer: QuantizerConfig,
}

fn one() -> f64 {
    1.0
}

/// How one conv layer is split between full-precision and SPN channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSplit {
    pub fp_channels: usize,
    pub spn_channels: usize,
    /// Hidden width of the SPN part, 0 when it is empty.
    pub h: usize,
}

impl QuantPlan {
    pub fn fp16() -> Self {
        Self::with_mode(QuantMode::Fp16, 0.0, 1.0)
    }

    pub fn twn() -> Self {
        Self::with_mode(QuantMode::Twn, 0.0, 1.0)
    }

    pub fn strassen(rho: f64) -> Self {
        Self::with_mode(QuantMode::Strassen, 0.0, rho)
    }

    pub fn hybrid(alpha: f64, rho: f64) -> Self {
        Self::with_mode(QuantMode::Hybrid, alpha, rho)
    }

    fn with_mode(mode: QuantMode, alpha: f64, rho: f64) -> Self {
        Self {
            mode,
            alpha,
            rho,
            fc_policy: FcPolicy::Paired,
            quantizer: QuantizerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.mode != QuantMode::Hybrid && self.alpha != 0.0 {
            return Err(Error::invalid(format!(
                "alpha applies only to hybrid plans (mode {})",
                self.mode.name()
            )));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        self.quantizer.validate()
    }

    /// Channel split of a standard or pointwise conv.
    pub fn conv_split(&self, c_out: usize) -> ConvSplit {
        let fp = match self.mode {
            QuantMode::Fp16 | QuantMode::Twn => c_out,
            QuantMode::Strassen => 0,
            QuantMode::Hybrid => round_half_up(self.alpha * c_out as f64).min(c_out),
        };
        let spn = c_out - fp;
        let h = if spn == 0 {
            0
        } else {
            round_half_up(self.rho * spn as f64).max(1)
        };
        ConvSplit {
            fp_channels: fp,
            spn_channels: spn,
            h,
        }
    }

    /// The dense layer is strassenified whenever some conv channel is, so
    /// that a hybrid plan without SPN channels is exactly the baseline.
    pub fn strassenify_fc(&self, spec: &ArchSpec) -> bool {
        match self.mode {
            QuantMode::Fp16 | QuantMode::Twn => false,
            QuantMode::Strassen => true,
            QuantMode::Hybrid => spec
                .layers
                .iter()
                .any(|l| l.kind.is_quantizable_conv() && self.conv_split(l.c_out).spn_channels > 0),
        }
    }

    pub fn fc_hidden(&self, layer: &LayerDesc) -> usize {
        debug_assert_eq!(layer.kind, LayerKind::Dense);
        2 * layer.c_out
    }

    pub fn label(&self) -> String {
        match self.mode {
            QuantMode::Fp16 | QuantMode::Twn => self.mode.name().to_string(),
            QuantMode::Strassen => format!("strassen(rho={})", self.rho),
            QuantMode::Hybrid => format!("hybrid(alpha={},rho={})", self.alpha, self.rho),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_rounds_half_up() {
        let p = QuantPlan::hybrid(0.375, 1.0);
        assert_eq!(
            p.conv_split(20),
            ConvSplit {
                fp_channels: 8,
                spn_channels: 12,
                h: 12
            }
        );
        let p = QuantPlan::hybrid(0.5, 1.33);
        assert_eq!(
            p.conv_split(3),
            ConvSplit {
                fp_channels: 2,
                spn_channels: 1,
                h: 1
            }
        );
        assert_eq!(QuantPlan::hybrid(1.0, 1.0).conv_split(16).h, 0);
    }

    #[test]
    fn validation() {
        assert!(QuantPlan::hybrid(1.5, 1.0).validate().is_err());
        assert!(QuantPlan::strassen(0.0).validate().is_err());
        let mut p = QuantPlan::strassen(1.0);
        p.alpha = 0.5;
        assert!(p.validate().is_err());
        assert!("HYBRID".parse::<QuantMode>().is_ok());
    }
}
