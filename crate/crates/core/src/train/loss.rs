use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::tape::softmax_rows;
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub enabled: bool,
    pub temperature: f64,
    /// Weight of the soft-target term.
    pub lambda: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            temperature: 4.0,
            lambda: 0.5,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "distillation temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!(
                "distillation lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Whether a teacher forward is needed at all.
    pub fn active(&self) -> bool {
        self.enabled && self.lambda > 0.0
    }
}

/// `(1 - lambda) CE(student, labels) + lambda T^2 KL(softmax(teacher / T) || softmax(student / T))`.
pub fn distillation_loss<'t, T: Scalar>(
    student: Var<'t, T>,
    teacher_logits: &Tensor<T>,
    labels: &[usize],
    temperature: f64,
    lambda: f64,
) -> Result<Var<'t, T>> {
    DistillConfig {
        enabled: true,
        temperature,
        lambda,
    }
    .validate()?;
    if student.shape() != teacher_logits.shape() {
        return Err(Error::shape(
            "distillation_loss",
            format!(
                "student {:?}, teacher {:?}",
                student.shape(),
                teacher_logits.shape()
            ),
        ));
    }
    let ce = student.softmax_cross_entropy(labels)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    let t = T::of(temperature);
    let p = Tensor::from_vec(
        teacher_logits.shape().to_vec(),
        softmax_rows(teacher_logits, t),
    )?;
    let kl = student
        .soft_target_kl(&p, t)?
        .scale(T::of(lambda * temperature * temperature))?;
    if lambda == 1.0 {
        return Ok(kl);
    }
    ce.scale(T::of(1.0 - lambda))?.add(kl)
}
