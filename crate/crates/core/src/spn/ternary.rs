use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Threshold rule for ternarization: `delta = threshold_factor * mean|W|`,
/// scale is the mean magnitude of the entries that survive the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    pub threshold_factor: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            threshold_factor: 0.7,
        }
    }
}

impl QuantizerConfig {
    pub fn new(threshold_factor: f64) -> Result<Self> {
        let cfg = Self { threshold_factor };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_factor > 0.0 && self.threshold_factor < 1.0) {
            return Err(Error::invalid(format!(
                "threshold_factor must lie in (0, 1), got {}",
                self.threshold_factor
            )));
        }
        Ok(())
    }
}

/// Matrix with entries in {-1, 0, +1} and one positive scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TernaryMatrix<T> {
    rows: usize,
    cols: usize,
    entries: Vec<i8>,
    scale: T,
}

impl<T: Scalar> TernaryMatrix<T> {
    pub fn new(rows: usize, cols: usize, entries: Vec<i8>, scale: T) -> Result<Self> {
        if rows == 0 || cols == 0 || entries.len() != rows * cols {
            return Err(Error::shape(
                "ternary_matrix",
                format!("{rows}x{cols} with {} entries", entries.len()),
            ));
        }
        if let Some(&bad) = entries.iter().find(|&&e| !(-1..=1).contains(&e)) {
            return Err(Error::invalid(format!(
                "ternary entry {bad} outside {{-1, 0, 1}}"
            )));
        }
        if !(scale > T::zero() && scale.is_finite()) {
            return Err(Error::invalid(format!(
                "ternary scale must be positive, got {scale}"
            )));
        }
        Ok(Self {
            rows,
            cols,
            entries,
            scale,
        })
    }

    /// Unit-scale matrix from nested rows; panics on malformed constants.
    pub fn from_rows(rows: &[&[i8]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(
            rows.iter().all(|r| r.len() == cols),
            "ragged ternary constant"
        );
        let entries = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, entries, T::one()).expect("valid ternary constant")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0; rows * cols], T::one()).expect("zero ternary matrix")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[i8] {
        &self.entries
    }

    pub fn get(&self, r: usize, c: usize) -> i8 {
        self.entries[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: i8) {
        assert!((-1..=1).contains(&v), "ternary entry {v}");
        self.entries[r * self.cols + c] = v;
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn with_scale(mut self, scale: T) -> Result<Self> {
        if !(scale > T::zero() && scale.is_finite()) {
            return Err(Error::invalid(format!(
                "ternary scale must be positive, got {scale}"
            )));
        }
        self.scale = scale;
        Ok(self)
    }

    pub fn nonzeros(&self) -> usize {
        self.entries.iter().filter(|&&e| e != 0).count()
    }

    pub fn cast<U: Scalar>(&self) -> TernaryMatrix<U> {
        TernaryMatrix {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.clone(),
            scale: U::of(self.scale.to_f64_lossy()),
        }
    }

    /// Dense `[rows, cols]` tensor holding `scale * t`.
    pub fn to_tensor(&self) -> Tensor<T> {
        let s = self.scale;
        let data = self.entries.iter().map(|&e| T::of(e as f64) * s).collect();
        Tensor::from_vec(vec![self.rows, self.cols], data).expect("ternary shape")
    }

    /// `y = scale * (t x)`; the product with `t` uses additions only.
    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        let mut y = self.matvec_unscaled(x, &mut 0)?;
        if self.scale != T::one() {
            y.iter_mut().for_each(|v| *v *= self.scale);
        }
        Ok(y)
    }

    /// `t x` without the scale. Each nonzero entry beyond the first in a row
    /// costs one addition, recorded in `adds`.
    pub fn matvec_unscaled(&self, x: &[T], adds: &mut u64) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(Error::shape(
                "ternary_matvec",
                format!("{}x{} matrix, vector of {}", self.rows, self.cols, x.len()),
            ));
        }
        let mut y = vec![T::zero(); self.rows];
        for (r, yv) in y.iter_mut().enumerate() {
            let mut seen = false;
            for (&e, &xv) in self.entries[r * self.cols..(r + 1) * self.cols]
                .iter()
                .zip(x)
            {
                match e {
                    1 => *yv += xv,
                    -1 => *yv -= xv,
                    _ => continue,
                }
                if seen {
                    *adds += 1;
                }
                seen = true;
            }
        }
        Ok(y)
    }
}

/// Result of [`ternary_quantize`]. `degenerate` is set when no entry
/// exceeded the threshold, in which case the matrix is zero with scale 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized<T> {
    pub matrix: TernaryMatrix<T>,
    pub degenerate: bool,
}

/// Ternarizes a tensor viewed as `[shape[0], rest]` (rank-1 input is a
/// single row).
pub fn ternary_quantize<T: Scalar>(w: &Tensor<T>, cfg: &QuantizerConfig) -> Quantized<T> {
    let (rows, cols) = match w.shape() {
        [n] => (1, *n),
        [r, rest @ ..] => (*r, rest.iter().product()),
        [] => unreachable!("tensors have rank >= 1"),
    };
    let data = w.data();
    let n = T::of(data.len() as f64);
    let mean_abs = data.iter().map(|v| v.abs()).sum::<T>() / n;
    let delta = T::of(cfg.threshold_factor) * mean_abs;
    let mut entries = Vec::with_capacity(data.len());
    let mut kept = T::zero();
    let mut count = 0usize;
    for &v in data {
        if v.abs() > delta {
            entries.push(if v > T::zero() { 1 } else { -1 });
            kept += v.abs();
            count += 1;
        } else {
            entries.push(0);
        }
    }
    if count == 0 {
        return Quantized {
            matrix: TernaryMatrix::zeros(rows, cols),
            degenerate: true,
        };
    }
    let scale = kept / T::of(count as f64);
    Quantized {
        matrix: TernaryMatrix::new(rows, cols, entries, scale)
            .expect("quantizer output is ternary"),
        degenerate: false,
    }
}

/// Forward view used during quantization-aware training: `scale * t`
/// shaped like `w`.
pub fn ternary_view<T: Scalar>(w: &Tensor<T>, cfg: &QuantizerConfig) -> Tensor<T> {
    let q = ternary_quantize(w, cfg);
    q.matrix
        .to_tensor()
        .reshape(w.shape())
        .expect("quantized view keeps element count")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let w = Tensor::from_vec(vec![4], vec![0.3f64, -0.8, 0.05, 0.6]).unwrap();
        let q = ternary_quantize(&w, &QuantizerConfig::default());
        assert_eq!(q.matrix.entries(), &[0, -1, 0, 1]);
        assert!((q.matrix.scale() - 0.7).abs() < 1e-12);
        assert!(!q.degenerate);
    }

    #[test]
    fn zeros_are_degenerate() {
        let q = ternary_quantize(&Tensor::<f32>::zeros(&[3, 2]), &QuantizerConfig::default());
        assert!(q.degenerate);
        assert_eq!(q.matrix.scale(), 1.0);
        assert_eq!(q.matrix.nonzeros(), 0);
    }

    #[test]
    fn config_bounds() {
        assert!(QuantizerConfig::new(0.0).is_err());
        assert!(QuantizerConfig::new(1.0).is_err());
        assert!(QuantizerConfig::new(0.5).is_ok());
    }

    #[test]
    fn entries_validated() {
        assert!(TernaryMatrix::<f64>::new(1, 2, vec![2, 0], 1.0).is_err());
        assert!(TernaryMatrix::<f64>::new(1, 2, vec![1, 0], 0.0).is_err());
    }
}
