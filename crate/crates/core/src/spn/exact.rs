//! Exact bilinear algorithms expressed as ternary SPN triples, and the
//! basis-enumeration verifier that certifies them.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spn::ternary::TernaryMatrix;
use crate::tensor::Tensor;

/// Operation counts of one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCount {
    pub muls: u64,
    pub adds: u64,
}

/// `vec(C) = W_c [(W_b vec(B)) * (W_a vec(A))]` with hidden width
/// `h = W_a.rows()`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpnTriple<T> {
    pub wa: TernaryMatrix<T>,
    pub wb: TernaryMatrix<T>,
    pub wc: TernaryMatrix<T>,
}

impl<T: Scalar> SpnTriple<T> {
    pub fn new(wa: TernaryMatrix<T>, wb: TernaryMatrix<T>, wc: TernaryMatrix<T>) -> Result<Self> {
        if wa.rows() != wb.rows() || wc.cols() != wa.rows() {
            return Err(Error::shape(
                "spn",
                format!(
                    "W_a {}x{}, W_b {}x{}, W_c {}x{}",
                    wa.rows(),
                    wa.cols(),
                    wb.rows(),
                    wb.cols(),
                    wc.rows(),
                    wc.cols()
                ),
            ));
        }
        Ok(Self { wa, wb, wc })
    }

    pub fn h(&self) -> usize {
        self.wa.rows()
    }

    /// Filter-side half: `a_hat = s_a s_b s_c (t_a vec(A))`. Computed once per
    /// filter bank, so its multiplications are not part of the per-input cost.
    pub fn fold_filter(&self, vec_a: &[T]) -> Result<Vec<T>> {
        let s = self.wa.scale() * self.wb.scale() * self.wc.scale();
        let mut a_hat = self.wa.matvec_unscaled(vec_a, &mut 0)?;
        a_hat.iter_mut().for_each(|v| *v *= s);
        Ok(a_hat)
    }

    /// Input-side half given a folded `a_hat`: two ternary products (adds
    /// only) around exactly `h` multiplications.
    pub fn apply_folded(&self, a_hat: &[T], vec_b: &[T], count: &mut OpCount) -> Result<Vec<T>> {
        if a_hat.len() != self.h() {
            return Err(Error::shape(
                "spn",
                format!("a_hat of {} for h = {}", a_hat.len(), self.h()),
            ));
        }
        let mut hidden = self.wb.matvec_unscaled(vec_b, &mut count.adds)?;
        for (x, &a) in hidden.iter_mut().zip(a_hat) {
            *x *= a;
            count.muls += 1;
        }
        self.wc.matvec_unscaled(&hidden, &mut count.adds)
    }

    /// Integer evaluation with unit scales assumed; used for exactness checks.
    pub fn apply_i64(&self, vec_a: &[i64], vec_b: &[i64]) -> Result<Vec<i64>> {
        let ta = int_matvec(&self.wa, vec_a)?;
        let tb = int_matvec(&self.wb, vec_b)?;
        let prod: Vec<i64> = ta.iter().zip(&tb).map(|(a, b)| a * b).collect();
        int_matvec(&self.wc, &prod)
    }

    fn scale_product(&self) -> f64 {
        self.wa.scale().to_f64_lossy()
            * self.wb.scale().to_f64_lossy()
            * self.wc.scale().to_f64_lossy()
    }
}

fn int_matvec<T: Scalar>(m: &TernaryMatrix<T>, x: &[i64]) -> Result<Vec<i64>> {
    if x.len() != m.cols() {
        return Err(Error::shape(
            "spn",
            format!("{} columns, vector of {}", m.cols(), x.len()),
        ));
    }
    Ok((0..m.rows())
        .map(|r| (0..m.cols()).map(|c| m.get(r, c) as i64 * x[c]).sum())
        .collect())
}

/// Integer bilinear map `c_k = sum_ij R[k,i,j] a_i b_j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BilinearMap {
    out_dim: usize,
    a_dim: usize,
    b_dim: usize,
    coeffs: Vec<i64>,
}

impl BilinearMap {
    pub fn from_fn(
        out_dim: usize,
        a_dim: usize,
        b_dim: usize,
        f: impl Fn(usize, usize, usize) -> i64,
    ) -> Self {
        let mut coeffs = Vec::with_capacity(out_dim * a_dim * b_dim);
        for k in 0..out_dim {
            for i in 0..a_dim {
                for j in 0..b_dim {
                    coeffs.push(f(k, i, j));
                }
            }
        }
        Self {
            out_dim,
            a_dim,
            b_dim,
            coeffs,
        }
    }

    /// `C[m,n] = A[m,k] B[k,n]` with row-major vectorization throughout.
    pub fn matmul(m: usize, k: usize, n: usize) -> Self {
        Self::from_fn(m * n, m * k, k * n, |out, ai, bj| {
            let (r, c) = (out / n, out % n);
            let (ar, ac) = (ai / k, ai % k);
            let (br, bc) = (bj / n, bj % n);
            (ar == r && bc == c && ac == br) as i64
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn a_dim(&self) -> usize {
        self.a_dim
    }

    pub fn b_dim(&self) -> usize {
        self.b_dim
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> i64 {
        self.coeffs[(k * self.a_dim + i) * self.b_dim + j]
    }

    /// Substitutes `vec(A) = E s` where `embed[i]` lists the symbol feeding
    /// entry `i`; the result is bilinear in `(s, vec(B))`.
    pub fn restrict_a(&self, embed: &[usize]) -> Result<Self> {
        if embed.len() != self.a_dim {
            return Err(Error::shape(
                "restrict_a",
                format!("{} entries for a_dim {}", embed.len(), self.a_dim),
            ));
        }
        let syms = embed.iter().max().map_or(0, |m| m + 1);
        Ok(Self::from_fn(self.out_dim, syms, self.b_dim, |k, s, j| {
            embed
                .iter()
                .enumerate()
                .filter(|(_, &e)| e == s)
                .map(|(i, _)| self.get(k, i, j))
                .sum()
        }))
    }

    pub fn apply_i64(&self, a: &[i64], b: &[i64]) -> Vec<i64> {
        (0..self.out_dim)
            .map(|k| {
                let mut acc = 0;
                for (i, &av) in a.iter().enumerate() {
                    for (j, &bv) in b.iter().enumerate() {
                        acc += self.get(k, i, j) * av * bv;
                    }
                }
                acc
            })
            .collect()
    }
}

/// Checks `spn` against `reference` on every basis pair `(e_i, e_j)`.
/// Bilinearity makes this equivalent to exactness on all inputs.
pub fn verify_spn_exact<T: Scalar>(spn: &SpnTriple<T>, reference: &BilinearMap) -> Result<bool> {
    if spn.wa.cols() != reference.a_dim()
        || spn.wb.cols() != reference.b_dim()
        || spn.wc.rows() != reference.out_dim()
    {
        return Err(Error::shape(
            "verify_spn_exact",
            format!(
                "SPN maps {}x{} -> {}, reference {}x{} -> {}",
                spn.wa.cols(),
                spn.wb.cols(),
                spn.wc.rows(),
                reference.a_dim(),
                reference.b_dim(),
                reference.out_dim()
            ),
        ));
    }
    let s = spn.scale_product();
    for i in 0..reference.a_dim() {
        for j in 0..reference.b_dim() {
            for k in 0..reference.out_dim() {
                let mut acc: i64 = 0;
                for u in 0..spn.h() {
                    acc +=
                        spn.wc.get(k, u) as i64 * spn.wa.get(u, i) as i64 * spn.wb.get(u, j) as i64;
                }
                if acc as f64 * s != reference.get(k, i, j) as f64 {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// Strassen's 7-multiplication algorithm for 2x2 matrices.
pub fn make_canonical_strassen<T: Scalar>() -> SpnTriple<T> {
    let wa = TernaryMatrix::from_rows(&[
        &[1, 0, 0, 1],
        &[0, 0, 1, 1],
        &[1, 0, 0, 0],
        &[0, 0, 0, 1],
        &[1, 1, 0, 0],
        &[-1, 0, 1, 0],
        &[0, 1, 0, -1],
    ]);
    let wb = TernaryMatrix::from_rows(&[
        &[1, 0, 0, 1],
        &[1, 0, 0, 0],
        &[0, 1, 0, -1],
        &[-1, 0, 1, 0],
        &[0, 0, 0, 1],
        &[1, 1, 0, 0],
        &[0, 0, 1, 1],
    ]);
    let wc = TernaryMatrix::from_rows(&[
        &[1, 0, 0, 1, -1, 0, 1],
        &[0, 0, 1, 0, 1, 0, 0],
        &[0, 1, 0, 1, 0, 0, 0],
        &[1, -1, 1, 0, 0, 1, 0],
    ]);
    let spn = SpnTriple::new(wa, wb, wc).expect("Strassen constants are consistent");
    assert!(
        verify_spn_exact(&spn, &BilinearMap::matmul(2, 2, 2)).expect("matching dimensions"),
        "Strassen constants failed verification"
    );
    spn
}

/// Schoolbook product `A[m,k] B[k,n]` with one multiplication per term,
/// `h = m k n`.
pub fn make_naive_expansion<T: Scalar>(m: usize, k: usize, n: usize) -> SpnTriple<T> {
    let h = m * k * n;
    let mut wa = TernaryMatrix::zeros(h, m * k);
    let mut wb = TernaryMatrix::zeros(h, k * n);
    let mut wc = TernaryMatrix::zeros(m * n, h);
    let mut u = 0;
    for r in 0..m {
        for c in 0..n {
            for p in 0..k {
                wa.set(u, r * k + p, 1);
                wb.set(u, p * n + c, 1);
                wc.set(r * n + c, u, 1);
                u += 1;
            }
        }
    }
    SpnTriple::new(wa, wb, wc).expect("naive expansion is consistent")
}

/// Evaluates the SPN on tensors `A` and `B`, returning `[A.rows, B.cols]`
/// when both are matrices whose product has the SPN's output length, and a
/// flat vector otherwise.
pub fn spn_matmul<T: Scalar>(
    spn: &SpnTriple<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    spn_matmul_counted(spn, a, b).map(|(t, _)| t)
}

/// [`spn_matmul`] plus the operation count of the input-side half.
pub fn spn_matmul_counted<T: Scalar>(
    spn: &SpnTriple<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, OpCount)> {
    if spn.wa.cols() != a.len() || spn.wb.cols() != b.len() {
        return Err(Error::shape(
            "spn_matmul",
            format!(
                "W_a takes {}, vec(A) has {}; W_b takes {}, vec(B) has {}",
                spn.wa.cols(),
                a.len(),
                spn.wb.cols(),
                b.len()
            ),
        ));
    }
    let a_hat = spn.fold_filter(a.data())?;
    let mut count = OpCount::default();
    let c = spn.apply_folded(&a_hat, b.data(), &mut count)?;
    let shape = match (a.shape(), b.shape()) {
        ([m, _], [_, n]) if m * n == c.len() => vec![*m, *n],
        _ => vec![c.len()],
    };
    Ok((Tensor::from_vec(shape, c)?, count))
}
