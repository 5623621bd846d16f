//! Small dense `f64` helpers for the discrete searches: Gram-Schmidt bases
//! and least-squares solves with a handful of unknowns.

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormal basis of `span(vectors)` by modified Gram-Schmidt; vectors
/// whose residual norm falls below `tol` are dropped.
pub(crate) fn orthonormal_basis(vectors: &[&[f64]], tol: f64) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        let mut r = v.to_vec();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&r, q);
                r.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = dot(&r, &r).sqrt();
        if n > tol {
            r.iter_mut().for_each(|x| *x /= n);
            basis.push(r);
        }
    }
    basis
}

/// Solves the square system `a x = b` (row-major `a`) by Gaussian
/// elimination with partial pivoting. Returns `None` when singular.
pub(crate) fn solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let piv =
            (col..n).max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))?;
        if m[piv * n + col].abs() < 1e-12 {
            return None;
        }
        if piv != col {
            for c in 0..n {
                m.swap(piv * n + c, col * n + c);
            }
            x.swap(piv, col);
        }
        for r in col + 1..n {
            let f = m[r * n + col] / m[col * n + col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                m[r * n + c] -= f * m[col * n + c];
            }
            x[r] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        let s: f64 = (col + 1..n).map(|c| m[col * n + c] * x[c]).sum();
        x[col] = (x[col] - s) / m[col * n + col];
    }
    Some(x)
}

/// Least-squares coefficients `c` minimizing `|t - sum_u c_u z_u|^2` via the
/// normal equations. `None` when the atoms are linearly dependent.
pub(crate) fn lstsq(atoms: &[&[f64]], t: &[f64]) -> Option<Vec<f64>> {
    let h = atoms.len();
    let mut g = vec![0.0; h * h];
    let mut rhs = vec![0.0; h];
    for i in 0..h {
        for j in 0..h {
            g[i * h + j] = dot(atoms[i], atoms[j]);
        }
        rhs[i] = dot(atoms[i], t);
    }
    solve(&g, &rhs, h)
}

/// Lower-triangular `L` with `L L^T = a` for a symmetric positive definite
/// `n x n` matrix, row-major.
pub(crate) fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}
