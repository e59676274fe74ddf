//! Dense linear-algebra primitives shared by the estimators.
//!
//! The truncated SVD of a large matrix is computed by block subspace iteration,
//! then by Golub–Kahan–Lanczos bidiagonalization with full reorthogonalization
//! if the block does not converge, and finally by a dense SVD. Small matrices go
//! straight to the dense SVD. All routes return factors under the same sign
//! convention, so results do not depend on which route ran.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Relative threshold below which `sign_matrix` treats its input as singular.
pub const SIGN_SINGULAR_TOL: f64 = 1e-12;
/// Absolute threshold on the smallest singular value of a regression design.
pub const REGRESSION_RANK_TOL: f64 = 1e-10;

/// Matrices whose smaller side is at most this many rows/columns use the dense SVD.
const DENSE_CUTOFF: usize = 64;
/// Ritz residual tolerance relative to the largest singular value.
const LANCZOS_TOL: f64 = 1e-12;
/// Extra vectors carried by the block iteration beyond the requested rank.
const BLOCK_OVERSAMPLE: usize = 10;
const BLOCK_MAX_ITERS: usize = 12;
/// Fixed seed for the Lanczos start vector, keeping the SVD a deterministic function of its input.
const LANCZOS_SEED: u64 = 0x51D5_EED5;

/// Rank-r singular triple `(U, S, V)` with `A ≈ U diag(S) Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// n1 x r, orthonormal columns.
    pub u: DMatrix<f64>,
    /// r singular values, descending.
    pub s: DVector<f64>,
    /// n2 x r, orthonormal columns.
    pub v: DMatrix<f64>,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U diag(S) Vᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, mut col) in us.column_iter_mut().enumerate() {
            col *= self.s[j];
        }
        us * self.v.transpose()
    }

    /// Smallest retained singular value.
    pub fn sigma_min(&self) -> f64 {
        self.s[self.s.len() - 1]
    }
}

/// Truncated rank-`r` SVD of `a`: the top-`r` singular triples.
///
/// Columns are normalized so that the largest-magnitude entry of each column
/// of `U` is positive (first occurrence wins on exact ties).
pub fn truncated_svd(a: &DMatrix<f64>, r: usize) -> Result<SvdFactors> {
    let (n1, n2) = a.shape();
    let n_min = n1.min(n2);
    if r == 0 {
        return Err(Error::ZeroRank);
    }
    if r > n_min {
        return Err(Error::RankTooLarge {
            rank: r,
            max: n_min,
        });
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }

    let mut factors = if n_min <= DENSE_CUTOFF || 2 * r + 20 > n_min / 2 {
        dense_svd(a, r)?
    } else {
        match block_svd(a, r).or_else(|| lanczos_svd(a, r)) {
            Some(f) => f,
            None => dense_svd(a, r)?,
        }
    };
    apply_sign_convention(&mut factors);
    if factors
        .u
        .iter()
        .chain(factors.v.iter())
        .any(|x| !x.is_finite())
    {
        return Err(Error::NonFinite);
    }
    Ok(factors)
}

/// All singular values of `a`, descending.
pub fn singular_values(a: &DMatrix<f64>) -> Result<DVector<f64>> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    if a.is_empty() {
        return Ok(DVector::zeros(0));
    }
    let m = to_faer(a);
    let s = m.singular_values().map_err(|_| Error::NonFinite)?;
    Ok(DVector::from_vec(s))
}

fn to_faer(a: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

/// Full thin SVD with singular values in descending order.
fn thin_svd(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let svd = to_faer(a).thin_svd().map_err(|_| Error::NonFinite)?;
    let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
    let k = s.nrows();
    Ok((
        DMatrix::from_fn(u.nrows(), k, |i, j| u[(i, j)]),
        DVector::from_fn(k, |i, _| s[i]),
        DMatrix::from_fn(v.nrows(), k, |i, j| v[(i, j)]),
    ))
}

fn dense_svd(a: &DMatrix<f64>, r: usize) -> Result<SvdFactors> {
    let (u, s, v) = thin_svd(a)?;
    Ok(SvdFactors {
        u: u.columns(0, r).into_owned(),
        s: s.rows(0, r).into_owned(),
        v: v.columns(0, r).into_owned(),
    })
}

fn apply_sign_convention(f: &mut SvdFactors) {
    for j in 0..f.rank() {
        let col = f.u.column(j);
        let mut best = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            f.u.column_mut(j).neg_mut();
            f.v.column_mut(j).neg_mut();
        }
    }
}

/// Growable orthonormal basis stored column-wise.
struct Basis {
    cols: DMatrix<f64>,
    used: usize,
}

impl Basis {
    fn new(dim: usize, capacity: usize) -> Self {
        Basis {
            cols: DMatrix::zeros(dim, capacity),
            used: 0,
        }
    }

    fn push(&mut self, x: &DVector<f64>) {
        if self.used == self.cols.ncols() {
            let grow = self.cols.ncols().max(8);
            let old = std::mem::replace(&mut self.cols, DMatrix::zeros(0, 0));
            self.cols = old.resize_horizontally(self.used + grow, 0.0);
        }
        self.cols.set_column(self.used, x);
        self.used += 1;
    }

    fn column(&self, j: usize) -> DVector<f64> {
        self.cols.column(j).into_owned()
    }

    /// Classical Gram–Schmidt, applied twice.
    fn orthogonalize(&self, x: &mut DVector<f64>) {
        if self.used == 0 {
            return;
        }
        let b = self.cols.columns(0, self.used);
        for _ in 0..2 {
            let c = b.tr_mul(x);
            x.gemv(-1.0, &b, &c, 1.0);
        }
    }

    /// A unit vector orthogonal to the current basis, or `None` if the basis is complete.
    fn fresh_vector(&self, rng: &mut ChaCha8Rng) -> Option<DVector<f64>> {
        let dim = self.cols.nrows();
        for _ in 0..4 {
            let mut x = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
            self.orthogonalize(&mut x);
            let norm = x.norm();
            if norm > 1e-8 {
                return Some(x / norm);
            }
        }
        None
    }
}

/// Returns `None` when the Krylov space would exceed its budget; the caller then uses the dense route.
/// Subspace iteration on `r + 10` vectors; `None` unless the top `r` Ritz
/// triples reach the residual tolerance within the iteration cap.
fn block_svd(a: &DMatrix<f64>, r: usize) -> Option<SvdFactors> {
    let (n1, n2) = a.shape();
    let b = (r + BLOCK_OVERSAMPLE).min(n1.min(n2));
    let a = faer::MatRef::from_column_major_slice(a.as_slice(), n1, n2);
    let mut rng = ChaCha8Rng::seed_from_u64(LANCZOS_SEED);
    let mut x = faer::Mat::from_fn(n2, b, |_, _| StandardNormal.sample(&mut rng));
    let mut ritz: Option<(faer::Mat<f64>, Vec<f64>)> = None;

    for _ in 0..BLOCK_MAX_ITERS {
        let y = a * &x;
        if let Some((u, s)) = &ritz {
            // Aᵀu_i = s_i x_i holds exactly; check A x_i = s_i u_i.
            let tol = LANCZOS_TOL * s[0].max(f64::MIN_POSITIVE);
            let converged = (0..r).all(|i| {
                let res: f64 = (0..n1)
                    .map(|row| (y[(row, i)] - s[i] * u[(row, i)]).powi(2))
                    .sum();
                res.sqrt() <= tol
            });
            if converged {
                return Some(SvdFactors {
                    u: DMatrix::from_fn(n1, r, |i, j| u[(i, j)]),
                    s: DVector::from_fn(r, |i, _| s[i]),
                    v: DMatrix::from_fn(n2, r, |i, j| x[(i, j)]),
                });
            }
        }
        let q = y.qr().compute_thin_Q();
        let z = a.transpose() * &q;
        let svd = z.thin_svd().ok()?;
        let s = svd.S().column_vector();
        ritz = Some((&q * svd.V(), (0..b).map(|i| s[i]).collect()));
        x = svd.U().to_owned();
    }
    None
}

fn lanczos_svd(a: &DMatrix<f64>, r: usize) -> Option<SvdFactors> {
    let (n1, n2) = a.shape();
    let cap = n1.min(n2) / 2;
    let scale = a.norm().max(f64::MIN_POSITIVE);
    let breakdown = 1e-13 * scale;
    let first_check = (2 * r + 10).max(20).min(cap);

    let mut rng = ChaCha8Rng::seed_from_u64(LANCZOS_SEED);
    let mut right = Basis::new(n2, first_check + 8);
    let mut left = Basis::new(n1, first_check + 8);
    let mut alphas: Vec<f64> = Vec::with_capacity(first_check + 8);
    let mut betas: Vec<f64> = Vec::with_capacity(first_check + 8);

    let p0 = right.fresh_vector(&mut rng)?;
    right.push(&p0);
    let mut next_check = first_check;

    let mut q = DVector::zeros(n1);
    let mut p = DVector::zeros(n2);
    loop {
        let j = alphas.len();
        let pj = right.column(j);

        q.gemv(1.0, a, &pj, 0.0);
        if j > 0 {
            q.axpy(-betas[j - 1], &left.column(j - 1), 1.0);
        }
        left.orthogonalize(&mut q);
        let mut alpha = q.norm();
        if alpha <= breakdown {
            q = left.fresh_vector(&mut rng)?;
            alpha = 0.0;
        } else {
            q /= alpha;
        }
        left.push(&q);
        alphas.push(alpha);

        p.gemv_tr(1.0, a, &q, 0.0);
        p.axpy(-alpha, &pj, 1.0);
        right.orthogonalize(&mut p);
        let mut beta = p.norm();
        if beta <= breakdown {
            p = right.fresh_vector(&mut rng)?;
            beta = 0.0;
        } else {
            p /= beta;
        }
        betas.push(beta);

        let steps = alphas.len();
        if steps >= next_check {
            if let Some(factors) = ritz_if_converged(&alphas, &betas, r, &left, &right) {
                return Some(factors);
            }
            if steps >= cap {
                return None;
            }
            next_check = (steps + 8).min(cap);
        }
        right.push(&p);
    }
}

fn ritz_if_converged(
    alphas: &[f64],
    betas: &[f64],
    r: usize,
    left: &Basis,
    right: &Basis,
) -> Option<SvdFactors> {
    let k = alphas.len();
    let mut b = DMatrix::zeros(k, k);
    for i in 0..k {
        b[(i, i)] = alphas[i];
        if i + 1 < k {
            b[(i, i + 1)] = betas[i];
        }
    }
    let (x, s, y) = thin_svd(&b).ok()?;
    let top = s[0].max(f64::MIN_POSITIVE);
    let beta_k = betas[k - 1];
    let converged = (0..r).all(|i| (beta_k * x[(k - 1, i)]).abs() <= LANCZOS_TOL * top);
    if !converged {
        return None;
    }

    let xs = x.columns(0, r);
    let ys = y.columns(0, r);
    let ss = s.rows(0, r).into_owned();
    let q = left.cols.columns(0, k);
    let p = right.cols.columns(0, k);
    Some(SvdFactors {
        u: q * xs,
        s: ss,
        v: p * ys,
    })
}

/// Orthogonal polar factor `X Yᵀ` of `H = X S Yᵀ`.
pub fn sign_matrix(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !h.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "sign_matrix needs a square matrix, got {:?}",
            h.shape()
        )));
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let (x, s, y) = thin_svd(h)?;
    let smax = s.max();
    let smin = s.min();
    if smax == 0.0 || smin <= SIGN_SINGULAR_TOL * smax {
        return Err(Error::Singular {
            ratio: if smax == 0.0 { 0.0 } else { smin / smax },
        });
    }
    Ok(x * y.transpose())
}

/// Least-squares coefficients of each column of `b` on the columns of `u1`.
///
/// Solved through a thin QR of `u1`; fails when `σ_min(u1) ≤ 1e-10`.
pub fn regress_columns(u1: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let qr = ThinQr::new(u1, REGRESSION_RANK_TOL)?;
    if b.nrows() != u1.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "regressand has {} rows, design has {}",
            b.nrows(),
            u1.nrows()
        )));
    }
    Ok(qr.solve(b))
}

/// Thin QR factorization of a tall full-column-rank matrix.
pub(crate) struct ThinQr {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl ThinQr {
    pub(crate) fn new(a: &DMatrix<f64>, rank_tol: f64) -> Result<Self> {
        let (n, r) = a.shape();
        if r == 0 || n < r {
            return Err(Error::RankDeficient { sigma_min: 0.0 });
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        let qr = a.clone().qr();
        let q = qr.q();
        let rr = qr.r();
        // R shares singular values with A.
        let sigma_min = singular_values(&rr)?.min();
        if sigma_min <= rank_tol {
            return Err(Error::RankDeficient { sigma_min });
        }
        Ok(ThinQr { q, r: rr })
    }

    pub(crate) fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let qtb = self.q.tr_mul(b);
        self.r
            .solve_upper_triangular(&qtb)
            .expect("R has a nonzero diagonal after the rank check")
    }

    /// For each row `x` of `rows`, the quadratic form `x (AᵀA)⁻¹ xᵀ`.
    pub(crate) fn gram_quadratic_forms(&self, rows: &DMatrix<f64>) -> DVector<f64> {
        // x (RᵀR)⁻¹ xᵀ = ‖R⁻ᵀ xᵀ‖²
        let w = self
            .r
            .transpose()
            .solve_lower_triangular(&rows.transpose())
            .expect("R has a nonzero diagonal after the rank check");
        DVector::from_iterator(w.ncols(), w.column_iter().map(|c| c.norm_squared()))
    }

    /// `R⁻¹`, so that `(AᵀA)⁻¹ = R⁻¹R⁻ᵀ`.
    pub(crate) fn inverse_r(&self) -> DMatrix<f64> {
        let k = self.r.nrows();
        self.r
            .solve_upper_triangular(&DMatrix::identity(k, k))
            .expect("R has a nonzero diagonal after the rank check")
    }
}

/// `U sgn(UᵀU*) − U*`: the residual after optimally rotating `U` onto `U*`.
pub fn aligned_difference(u: &DMatrix<f64>, ustar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if u.shape() != ustar.shape() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            u.shape(),
            ustar.shape()
        )));
    }
    let h = u.tr_mul(ustar);
    let rot = sign_matrix(&h)?;
    Ok(u * rot - ustar)
}

/// Euclidean norms of the rows of `a`.
pub fn row_norms(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(a.nrows(), a.row_iter().map(|row| row.norm()))
}

/// For every row `x` of `u`, the quadratic form `x (U₁ᵀU₁)⁻¹ xᵀ` where `U₁` is `u1`.
pub fn gram_quadratic_forms(u: &DMatrix<f64>, u1: &DMatrix<f64>) -> Result<DVector<f64>> {
    if u.ncols() != u1.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} columns",
            u.ncols(),
            u1.ncols()
        )));
    }
    Ok(ThinQr::new(u1, REGRESSION_RANK_TOL)?.gram_quadratic_forms(u))
}
