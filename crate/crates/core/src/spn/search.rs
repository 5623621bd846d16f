//! Discrete search for exact ternary SPNs with few hidden units.
//!
//! A hidden unit contributes the rank-one atom `vec(l r^T)` to the bilinear
//! map, where `l` and `r` range over finite factor sets. Given a target, the
//! best output-side coefficients for a set of atoms follow from least
//! squares, so the search only moves atoms: coordinate descent replaces one
//! atom at a time by the best of all candidates (an exact projection), and
//! random one- or two-atom kicks escape local minima.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, lstsq, orthonormal_basis};
use crate::spn::exact::{verify_spn_exact, BilinearMap, SpnTriple};
use crate::spn::ternary::{ternary_quantize, QuantizerConfig, TernaryMatrix};
use crate::tensor::Tensor;

/// All nonzero vectors in `{-1, 0, 1}^n`, in lexicographic order.
pub(crate) fn nonzero_ternary_vectors(n: usize) -> Vec<Vec<i8>> {
    let total = 3usize.pow(n as u32);
    (0..total)
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let d = (code % 3) as i8 - 1;
                    code /= 3;
                    d
                })
                .rev()
                .collect::<Vec<i8>>()
        })
        .filter(|v| v.iter().any(|&x| x != 0))
        .collect()
}

/// Candidate atoms `vec(l r^T)` for every pair of left and right factors.
#[derive(Debug, Clone)]
pub(crate) struct AtomSpace {
    left: Vec<Vec<f64>>,
    right: Vec<Vec<f64>>,
    right_sq: Vec<f64>,
    left_sq: Vec<f64>,
    p: usize,
    q: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct IlsParams {
    pub sweeps: usize,
    pub perturbations: usize,
    /// Residual at or below which the target counts as reproduced.
    pub tol: f64,
}

impl AtomSpace {
    pub fn new(left: Vec<Vec<f64>>, right: Vec<Vec<f64>>) -> Self {
        let p = left[0].len();
        let q = right[0].len();
        let left_sq = left.iter().map(|v| dot(v, v)).collect();
        let right_sq = right.iter().map(|v| dot(v, v)).collect();
        Self {
            left,
            right,
            right_sq,
            left_sq,
            p,
            q,
        }
    }

    pub fn len(&self) -> usize {
        self.left.len() * self.right.len()
    }

    pub fn dim(&self) -> usize {
        self.p * self.q
    }

    /// `(left index, right index)` of an atom id.
    pub fn factors(&self, id: usize) -> (usize, usize) {
        (id / self.right.len(), id % self.right.len())
    }

    pub fn atom(&self, id: usize) -> Vec<f64> {
        let (l, r) = self.factors(id);
        let mut z = Vec::with_capacity(self.dim());
        for &lv in &self.left[l] {
            z.extend(self.right[r].iter().map(|&rv| lv * rv));
        }
        z
    }

    /// `out[id] = <v, atom(id)>` for every atom.
    fn dots(&self, v: &[f64], out: &mut [f64]) {
        let nr = self.right.len();
        let mut proj = vec![0.0; self.q];
        for (il, l) in self.left.iter().enumerate() {
            proj.iter_mut().for_each(|x| *x = 0.0);
            for (s, &lv) in l.iter().enumerate() {
                if lv != 0.0 {
                    let row = &v[s * self.q..(s + 1) * self.q];
                    proj.iter_mut().zip(row).for_each(|(p, &x)| *p += lv * x);
                }
            }
            for (ir, r) in self.right.iter().enumerate() {
                out[il * nr + ir] = dot(&proj, r);
            }
        }
    }

    /// Residual of the best fit of every target row onto `span(atoms)`.
    pub fn loss(&self, target: &[Vec<f64>], idx: &[usize]) -> f64 {
        let atoms: Vec<Vec<f64>> = idx.iter().map(|&i| self.atom(i)).collect();
        let refs: Vec<&[f64]> = atoms.iter().map(|a| a.as_slice()).collect();
        residual(target, &orthonormal_basis(&refs, 1e-9))
    }

    /// Best replacement for position `i`. Returns `(loss, atom id)`.
    fn best_replacement(
        &self,
        target: &[Vec<f64>],
        idx: &[usize],
        i: usize,
        scratch: &mut [f64],
    ) -> (f64, usize) {
        let others: Vec<Vec<f64>> = idx
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &id)| self.atom(id))
            .collect();
        let refs: Vec<&[f64]> = others.iter().map(|a| a.as_slice()).collect();
        let basis = orthonormal_basis(&refs, 1e-9);
        let rows: Vec<Vec<f64>> = target.iter().map(|t| project_out(t, &basis)).collect();
        let total: f64 = rows.iter().map(|r| dot(r, r)).sum();
        let n = self.len();
        let nr = self.right.len();
        // denom[id] = |z|^2 - |Q^T z|^2, num[id] = sum_k <r_k, z>^2
        let mut denom: Vec<f64> = (0..n)
            .map(|id| self.left_sq[id / nr] * self.right_sq[id % nr])
            .collect();
        for q in &basis {
            self.dots(q, scratch);
            denom
                .iter_mut()
                .zip(scratch.iter())
                .for_each(|(d, &c)| *d -= c * c);
        }
        let mut num = vec![0.0; n];
        for r in &rows {
            self.dots(r, scratch);
            num.iter_mut()
                .zip(scratch.iter())
                .for_each(|(d, &c)| *d += c * c);
        }
        let mut best = (f64::NEG_INFINITY, idx[i]);
        for id in 0..n {
            if denom[id] > 1e-9 {
                let gain = num[id] / denom[id];
                if gain > best.0 {
                    best = (gain, id);
                }
            }
        }
        if best.0 == f64::NEG_INFINITY {
            return (total, idx[i]);
        }
        ((total - best.0).max(0.0), best.1)
    }

    fn descend(
        &self,
        target: &[Vec<f64>],
        idx: &mut [usize],
        params: &IlsParams,
        scratch: &mut [f64],
    ) -> f64 {
        let mut best = self.loss(target, idx);
        for _ in 0..params.sweeps {
            let mut improved = false;
            for i in 0..idx.len() {
                if best <= params.tol {
                    return best;
                }
                let (l, id) = self.best_replacement(target, idx, i, scratch);
                if l < best - 1e-12 * (1.0 + best) {
                    idx[i] = id;
                    best = self.loss(target, idx);
                    improved = true;
                }
            }
            if !improved {
                break;
            }
        }
        best
    }

    /// Iterated local search from `idx`. Stops once the residual is within
    /// tolerance and `accept` approves the atom set, or when the kick budget
    /// runs out. Returns the best residual and whether it was accepted.
    pub fn iterated_local_search<R: Rng>(
        &self,
        target: &[Vec<f64>],
        idx: &mut Vec<usize>,
        params: &IlsParams,
        rng: &mut R,
        accept: &mut dyn FnMut(&[usize]) -> bool,
    ) -> (f64, bool) {
        let mut scratch = vec![0.0; self.len()];
        let mut best = self.descend(target, idx, params, &mut scratch);
        let mut kicks = 0;
        loop {
            if best <= params.tol && accept(idx) {
                return (best, true);
            }
            if kicks >= params.perturbations {
                return (best, false);
            }
            kicks += 1;
            let mut cand = idx.clone();
            for _ in 0..rng.random_range(1..=2) {
                let pos = rng.random_range(0..cand.len());
                cand[pos] = rng.random_range(0..self.len());
            }
            let l = self.descend(target, &mut cand, params, &mut scratch);
            if l <= best || (l <= params.tol && best <= params.tol) {
                best = l;
                *idx = cand;
            }
        }
    }
}

fn project_out(v: &[f64], basis: &[Vec<f64>]) -> Vec<f64> {
    let mut r = v.to_vec();
    for q in basis {
        let c = dot(&r, q);
        r.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
    }
    r
}

fn residual(target: &[Vec<f64>], basis: &[Vec<f64>]) -> f64 {
    target
        .iter()
        .map(|t| {
            let r = project_out(t, basis);
            dot(&r, &r)
        })
        .sum()
}

/// Two 2x2 filters stacked as the rows of `A`, with each entry of `vec(A)`
/// naming a symbol; repeated symbols are shared values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterBankTemplate {
    embed: Vec<usize>,
}

impl FilterBankTemplate {
    pub fn new(embed: Vec<usize>) -> Result<Self> {
        if embed.len() != 4 {
            return Err(Error::invalid(format!(
                "template needs 4 entries, got {}",
                embed.len()
            )));
        }
        let syms = embed.iter().max().map_or(0, |m| m + 1);
        if (0..syms).any(|s| !embed.contains(&s)) {
            return Err(Error::invalid(format!(
                "template symbols must be 0..n without gaps: {embed:?}"
            )));
        }
        Ok(Self { embed })
    }

    /// Four independent values, `A = [[a, b], [c, d]]`.
    pub fn generic() -> Self {
        Self {
            embed: vec![0, 1, 2, 3],
        }
    }

    /// Both filters share their first tap, `A = [[a, b], [a, c]]`.
    pub fn shared_value() -> Self {
        Self {
            embed: vec![0, 1, 0, 2],
        }
    }

    pub fn embed(&self) -> &[usize] {
        &self.embed
    }

    pub fn symbols(&self) -> usize {
        self.embed.iter().max().map_or(0, |m| m + 1)
    }

    fn instantiate(&self, sym: &[f64]) -> Vec<f64> {
        self.embed.iter().map(|&s| sym[s]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Gradient steps on random instantiations before rounding.
    pub train_steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Random kicks of the local search within one trial.
    pub perturbations: usize,
    /// Random integer instantiations checked after basis verification.
    pub instance_checks: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            train_steps: 2000,
            learning_rate: 0.02,
            momentum: 0.9,
            perturbations: 100,
            instance_checks: 200,
        }
    }
}

/// Default restart budget of [`search_shared_value_spn`].
pub const DEFAULT_TRIALS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub spn: SpnTriple<f64>,
    /// 1-based index of the successful trial.
    pub trial: usize,
}

/// Looks for an exact `h`-product ternary SPN computing `A B` for every
/// `A` matching `template`. Each trial trains a real SPN on random
/// instantiations, rounds it to ternary, then polishes the rounded atoms by
/// local search. A candidate is returned only after exact verification on
/// the template's basis and on random integer instances.
pub fn search_shared_value_spn(
    template: &FilterBankTemplate,
    h: usize,
    trials: usize,
    seed: u64,
) -> Result<Option<SearchOutcome>> {
    search_with(template, h, trials, seed, &SearchConfig::default())
}

pub fn search_with(
    template: &FilterBankTemplate,
    h: usize,
    trials: usize,
    seed: u64,
    cfg: &SearchConfig,
) -> Result<Option<SearchOutcome>> {
    if h == 0 {
        return Err(Error::invalid("hidden width h must be >= 1"));
    }
    let full = BilinearMap::matmul(2, 2, 2);
    let sym_map = full.restrict_a(template.embed())?;
    let ns = template.symbols();
    let factors = nonzero_ternary_vectors(4);
    let left: Vec<Vec<f64>> = factors
        .iter()
        .map(|a| {
            let mut v = vec![0.0; ns];
            for (i, &s) in template.embed().iter().enumerate() {
                v[s] += a[i] as f64;
            }
            v
        })
        .collect();
    let right: Vec<Vec<f64>> = factors
        .iter()
        .map(|b| b.iter().map(|&x| x as f64).collect())
        .collect();
    let space = AtomSpace::new(left, right);
    let target: Vec<Vec<f64>> = (0..4)
        .map(|k| {
            let mut row = Vec::with_capacity(ns * 4);
            for s in 0..ns {
                row.extend((0..4).map(|j| sym_map.get(k, s, j) as f64));
            }
            row
        })
        .collect();
    let params = IlsParams {
        sweeps: 30,
        perturbations: cfg.perturbations,
        tol: 1e-18,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 1..=trials {
        let (ta, tb) = train_and_round(template, h, cfg, &mut rng)?;
        let code = |t: &[i8]| factors.iter().position(|f| f.as_slice() == t);
        let mut idx: Vec<usize> = (0..h)
            .map(
                |u| match (code(&ta[u * 4..u * 4 + 4]), code(&tb[u * 4..u * 4 + 4])) {
                    (Some(a), Some(b)) => a * factors.len() + b,
                    _ => rng.random_range(0..space.len()),
                },
            )
            .collect();
        let mut found = None;
        let mut accept = |ids: &[usize]| -> bool {
            match ternary_candidate(&space, &factors, &target, ids) {
                Ok(Some(spn)) => {
                    found = Some(spn);
                    true
                }
                _ => false,
            }
        };
        let (_, ok) =
            space.iterated_local_search(&target, &mut idx, &params, &mut rng, &mut accept);
        if !ok {
            continue;
        }
        let spn = found.expect("accepted candidates are recorded");
        if verify_template_exact(&spn, template, cfg.instance_checks, &mut rng)? {
            return Ok(Some(SearchOutcome { spn, trial }));
        }
    }
    Ok(None)
}

/// Solves for the output coefficients and keeps the candidate only if they
/// are exactly ternary.
fn ternary_candidate(
    space: &AtomSpace,
    factors: &[Vec<i8>],
    target: &[Vec<f64>],
    idx: &[usize],
) -> Result<Option<SpnTriple<f64>>> {
    let h = idx.len();
    let atoms: Vec<Vec<f64>> = idx.iter().map(|&i| space.atom(i)).collect();
    let refs: Vec<&[f64]> = atoms.iter().map(|a| a.as_slice()).collect();
    let mut wc = Vec::with_capacity(4 * h);
    for row in target {
        let Some(c) = lstsq(&refs, row) else {
            return Ok(None);
        };
        for v in c {
            let r = v.round();
            if (v - r).abs() > 1e-9 || r.abs() > 1.0 {
                return Ok(None);
            }
            wc.push(r as i8);
        }
    }
    let mut wa = Vec::with_capacity(4 * h);
    let mut wb = Vec::with_capacity(4 * h);
    for &id in idx {
        let (l, r) = space.factors(id);
        wa.extend_from_slice(&factors[l]);
        wb.extend_from_slice(&factors[r]);
    }
    Ok(Some(SpnTriple::new(
        TernaryMatrix::new(h, 4, wa, 1.0)?,
        TernaryMatrix::new(h, 4, wb, 1.0)?,
        TernaryMatrix::new(4, h, wc, 1.0)?,
    )?))
}

/// Exactness of `spn` on every `A` of the template: basis enumeration over
/// (symbol, feature) pairs, then random integer instantiations.
pub fn verify_template_exact<R: Rng>(
    spn: &SpnTriple<f64>,
    template: &FilterBankTemplate,
    instances: usize,
    rng: &mut R,
) -> Result<bool> {
    let full = BilinearMap::matmul(2, 2, 2);
    if template.embed() == [0, 1, 2, 3] && !verify_spn_exact(spn, &full)? {
        return Ok(false);
    }
    let ns = template.symbols();
    for s in 0..ns {
        let a: Vec<i64> = template.embed().iter().map(|&e| (e == s) as i64).collect();
        for j in 0..4 {
            let mut b = vec![0; 4];
            b[j] = 1;
            if spn.apply_i64(&a, &b)? != full.apply_i64(&a, &b) {
                return Ok(false);
            }
        }
    }
    for _ in 0..instances {
        let sym: Vec<i64> = (0..ns).map(|_| rng.random_range(-1000..=1000)).collect();
        let a: Vec<i64> = template.embed().iter().map(|&e| sym[e]).collect();
        let b: Vec<i64> = (0..4).map(|_| rng.random_range(-1000..=1000)).collect();
        if spn.apply_i64(&a, &b)? != full.apply_i64(&a, &b) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Momentum SGD on squared error over random instantiations, then TWN
/// rounding of `W_a` and `W_b`. Returns their ternary entries.
fn train_and_round<R: Rng>(
    template: &FilterBankTemplate,
    h: usize,
    cfg: &SearchConfig,
    rng: &mut R,
) -> Result<(Vec<i8>, Vec<i8>)> {
    let mut wa: Vec<f64> = (0..h * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut wb: Vec<f64> = (0..h * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut wc: Vec<f64> = (0..4 * h).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut va = vec![0.0; h * 4];
    let mut vb = vec![0.0; h * 4];
    let mut vc = vec![0.0; 4 * h];
    let ns = template.symbols();
    for _ in 0..cfg.train_steps {
        let sym: Vec<f64> = (0..ns).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = template.instantiate(&sym);
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = [
            a[0] * b[0] + a[1] * b[2],
            a[0] * b[1] + a[1] * b[3],
            a[2] * b[0] + a[3] * b[2],
            a[2] * b[1] + a[3] * b[3],
        ];
        let ua: Vec<f64> = (0..h).map(|u| dot(&wa[u * 4..u * 4 + 4], &a)).collect();
        let ub: Vec<f64> = (0..h).map(|u| dot(&wb[u * 4..u * 4 + 4], &b)).collect();
        let z: Vec<f64> = ua.iter().zip(&ub).map(|(x, y)| x * y).collect();
        let err: Vec<f64> = (0..4)
            .map(|k| dot(&wc[k * h..(k + 1) * h], &z) - y[k])
            .collect();
        let mut gz = vec![0.0; h];
        let mut gc = vec![0.0; 4 * h];
        for k in 0..4 {
            for u in 0..h {
                gc[k * h + u] = 2.0 * err[k] * z[u];
                gz[u] += 2.0 * err[k] * wc[k * h + u];
            }
        }
        let mut ga = vec![0.0; h * 4];
        let mut gb = vec![0.0; h * 4];
        for u in 0..h {
            for i in 0..4 {
                ga[u * 4 + i] = gz[u] * ub[u] * a[i];
                gb[u * 4 + i] = gz[u] * ua[u] * b[i];
            }
        }
        for (w, v, g) in [
            (&mut wa, &mut va, &ga),
            (&mut wb, &mut vb, &gb),
            (&mut wc, &mut vc, &gc),
        ] {
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = cfg.momentum * *v + g.clamp(-10.0, 10.0);
                *w -= cfg.learning_rate * *v;
            }
        }
        if wa.iter().chain(&wb).chain(&wc).any(|x| !x.is_finite()) {
            break;
        }
    }
    let q = QuantizerConfig::default();
    let tern = |w: &[f64]| -> Result<Vec<i8>> {
        if w.iter().any(|x| !x.is_finite()) {
            return Ok(vec![0; w.len()]);
        }
        let t = Tensor::from_vec(vec![h, 4], w.to_vec())?;
        Ok(ternary_quantize(&t, &q).matrix.entries().to_vec())
    };
    Ok((tern(&wa)?, tern(&wb)?))
}
