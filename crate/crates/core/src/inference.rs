//! Entrywise variances, confidence intervals, lower bounds and condition diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::estimator::{BlockEstimate, FourBlockEstimate, StaggeredEstimate};
use crate::linalg::{singular_values, ThinQr, REGRESSION_RANK_TOL};
use crate::panel::{block_partition, PanelObservation, StaggeredPattern};

/// Point estimate and interval for one imputed entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceResult {
    pub unit: usize,
    pub period: usize,
    pub estimate: f64,
    pub gamma_hat: f64,
    pub omega_hat_sq: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub alpha: f64,
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile: rational approximation plus one Newton step.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p > 0.5 {
        return -normal_quantile(1.0 - p);
    }
    let x = acklam(p);
    let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    x - (normal_cdf(x) - p) / density
}

fn acklam(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771810e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// `mhat ± Φ⁻¹(1 − α/2)·√γ̂`.
pub fn confidence_interval(mhat: f64, gamma_hat: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::BadAlpha(alpha));
    }
    if !(gamma_hat >= 0.0) {
        return Err(Error::NonFinite);
    }
    let half = normal_quantile(1.0 - alpha / 2.0) * gamma_hat.sqrt();
    Ok((mhat - half, mhat + half))
}

/// `(mhat − mstar)/√γ̂`.
pub fn rescaled_error(mhat: f64, mstar: f64, gamma_hat: f64) -> Result<f64> {
    if !(gamma_hat > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok((mhat - mstar) / gamma_hat.sqrt())
}

/// Per-row quadratic forms `x (A1ᵀA1)⁻¹ xᵀ` for every row `x` of `a`, where `A1` is the top `n1` rows.
fn leverage(a: &DMatrix<f64>, n1: usize) -> Result<DVector<f64>> {
    if n1 == 0 || n1 > a.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "top block of {n1} rows requested from {} rows",
            a.nrows()
        )));
    }
    let top = a.rows(0, n1).into_owned();
    Ok(ThinQr::new(&top, REGRESSION_RANK_TOL)?.gram_quadratic_forms(a))
}

/// Precomputed pieces of `γ = (ω²/NT){U_i(U1ᵀU1)⁻¹U_iᵀ + V_t(V1ᵀV1)⁻¹V_tᵀ}`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceModel {
    row_forms: DVector<f64>,
    col_forms: DVector<f64>,
    omega_sq: f64,
}

impl VarianceModel {
    /// `u` is `N x r` with `U1` its top `n1` rows; `v` is `T x r` with `V1` its top `t1` rows.
    pub fn new(
        u: &DMatrix<f64>,
        n1: usize,
        v: &DMatrix<f64>,
        t1: usize,
        omega_sq: f64,
    ) -> Result<Self> {
        if u.ncols() != v.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "U has {} columns, V has {}",
                u.ncols(),
                v.ncols()
            )));
        }
        Ok(VarianceModel {
            row_forms: leverage(u, n1)?,
            col_forms: leverage(v, t1)?,
            omega_sq,
        })
    }

    /// Plug-in model for a four-block fit, in the fit's own dimensions.
    pub fn from_fit(fb: &FourBlockEstimate, omega_hat_sq: f64) -> Result<Self> {
        Self::new(&fb.left.u, fb.n1(), &fb.upper.v, fb.t1(), omega_hat_sq)
    }

    pub fn from_block(block: &BlockEstimate) -> Result<Self> {
        Self::new(
            &block.u,
            block.n1_bar,
            &block.v,
            block.t1_bar,
            block.omega_hat_sq,
        )
    }

    pub fn n(&self) -> usize {
        self.row_forms.len()
    }

    pub fn t(&self) -> usize {
        self.col_forms.len()
    }

    /// Variance at row `i` of `U` and row `t` of `V`.
    pub fn gamma(&self, i: usize, t: usize) -> f64 {
        let nt = (self.n() * self.t()) as f64;
        self.omega_sq / nt * (self.row_forms[i] + self.col_forms[t])
    }
}

/// Plug-in variance `γ̂` at row `i` of `U_left` and row `t` of `V_upper`, scaled by `1/(n·t)`.
pub fn variance_estimate(
    fb: &FourBlockEstimate,
    i: usize,
    t: usize,
    omega_hat_sq: f64,
    n: usize,
    t_dim: usize,
) -> Result<f64> {
    let a = ThinQr::new(&fb.u1, REGRESSION_RANK_TOL)?
        .gram_quadratic_forms(&fb.left.u.rows(i, 1).into_owned())[0];
    let b = ThinQr::new(&fb.v1, REGRESSION_RANK_TOL)?
        .gram_quadratic_forms(&fb.upper.v.rows(t, 1).into_owned())[0];
    Ok(omega_hat_sq / (n * t_dim) as f64 * (a + b))
}

/// Theoretical variance `γ*` at `(i, t)` for true factors `ustar` (`N x r`) and `vstar` (`T x r`).
pub fn variance_theoretical(
    ustar: &DMatrix<f64>,
    vstar: &DMatrix<f64>,
    nbar1: usize,
    tbar1: usize,
    omega: f64,
    i: usize,
    t: usize,
) -> Result<f64> {
    let model = VarianceModel::new(ustar, nbar1, vstar, tbar1, omega * omega)?;
    Ok(model.gamma(i, t))
}

/// Cramér–Rao bound for entry `(i, t)`; coincides with `γ*`.
pub fn crlb(
    ustar: &DMatrix<f64>,
    vstar: &DMatrix<f64>,
    nbar1: usize,
    tbar1: usize,
    omega: f64,
    i: usize,
    t: usize,
) -> Result<f64> {
    variance_theoretical(ustar, vstar, nbar1, tbar1, omega, i, t)
}

/// `max(0, 1 − c_u π² e² / c_l²)·γ*`.
pub fn local_minimax_bound(gamma_star: f64, e_nt: f64, c_u: f64, c_l: f64) -> Result<f64> {
    let valid = c_l > 0.0 && c_u >= c_l && e_nt >= 0.0 && c_u.is_finite() && e_nt.is_finite();
    if !valid {
        return Err(Error::BadConstants { c_u, c_l, e: e_nt });
    }
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    let factor = 1.0 - c_u * pi2 / (c_l * c_l) * e_nt * e_nt;
    Ok(factor.max(0.0) * gamma_star)
}

/// `(ω/σ_r)/√min(n1, t1)`.
pub fn noise_functional(omega: f64, sigma_r_star: f64, n1: usize, t1: usize) -> Result<f64> {
    if !(sigma_r_star > 0.0) {
        return Err(Error::ZeroSignal);
    }
    if n1 == 0 || t1 == 0 {
        return Err(Error::EmptyPanel { rows: n1, cols: t1 });
    }
    Ok(omega / sigma_r_star / (n1.min(t1) as f64).sqrt())
}

/// `√(n/r)·‖U_i‖` for an `n x r` factor.
pub fn local_incoherence(factor: &DMatrix<f64>, i: usize) -> f64 {
    let (n, r) = factor.shape();
    (n as f64 / r as f64).sqrt() * factor.row(i).norm()
}

/// Constants for the condition checks. The defaults are conventions, not derived values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionConstants {
    pub c_l: f64,
    pub c_u: f64,
    pub c_noise: f64,
    pub c_inc: f64,
}

impl Default for ConditionConstants {
    fn default() -> Self {
        ConditionConstants {
            c_l: 0.5,
            c_u: 2.0,
            c_noise: 1.0,
            c_inc: 1.0,
        }
    }
}

/// Extreme eigenvalues of a sub-block Gram matrix, normalized by its nominal share.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GramRatio {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    /// `max(ē_N, ē_T)`; equals `e_{N,T}` for a native four-block design.
    pub noise_functional: f64,
    pub noise_rows: f64,
    pub noise_cols: f64,
    pub mu_i: f64,
    pub nu_t: f64,
    pub mu_max: f64,
    pub nu_max: f64,
    pub sigma_r_star: f64,
    /// `U1ᵀU1` vs `N̄1/N`, `U1ᵀU1 + U2ᵀU2` vs `N̄/N`, then the same for `V`.
    pub sub_block_ratios: [GramRatio; 4],
    pub noise_ok: bool,
    pub incoherence_ok: bool,
    pub signal_ok: bool,
    pub conditioning_ok: bool,
    /// 1-based groups with fewer units than the rank.
    pub small_groups: Vec<usize>,
    /// 1-based stages with fewer periods than the rank.
    pub small_stages: Vec<usize>,
}

fn gram_ratio(block: DMatrix<f64>, share: f64) -> GramRatio {
    // Gram eigenvalues are squared singular values of the block.
    let s = singular_values(&block).expect("factors are finite");
    GramRatio {
        lo: s.min().powi(2) / share,
        hi: s.max().powi(2) / share,
    }
}

/// Evaluates the sufficient conditions for entry `(i, t)` of block `(i0, j0)`.
///
/// `ustar` and `vstar` are the true factors in sorted row order and `i` is a sorted row.
#[allow(clippy::too_many_arguments)]
pub fn check_conditions(
    ustar: &DMatrix<f64>,
    vstar: &DMatrix<f64>,
    sigma_star: &DVector<f64>,
    pattern: &StaggeredPattern,
    block: (usize, usize),
    entry: (usize, usize),
    omega: f64,
    delta: f64,
    c: &ConditionConstants,
) -> Result<Diagnostics> {
    let (n, r) = ustar.shape();
    let t_dim = vstar.nrows();
    if n != pattern.n() || t_dim != pattern.t() || vstar.ncols() != r || sigma_star.len() != r {
        return Err(Error::DimensionMismatch(format!(
            "factors {:?}, {:?} with {} singular values for a {} x {} pattern",
            ustar.shape(),
            vstar.shape(),
            sigma_star.len(),
            pattern.n(),
            pattern.t()
        )));
    }
    let (i0, j0) = block;
    let (k1, k2) = block_partition(pattern.k(), i0, j0)?;
    let n1: usize = pattern.group_sizes()[..k1].iter().sum();
    let n_bar: usize = pattern.group_sizes()[..i0].iter().sum();
    let t1: usize = pattern.stage_lengths()[..k2].iter().sum();
    let t_bar: usize = pattern.stage_lengths()[..j0].iter().sum();

    let sigma_r = sigma_star.min();
    let noise_rows = noise_functional(omega, sigma_r, n1, n1)?;
    let noise_cols = noise_functional(omega, sigma_r, t1, t1)?;
    let e = noise_rows.max(noise_cols);

    let (i, t) = entry;
    let mu_i = local_incoherence(ustar, i);
    let nu_t = local_incoherence(vstar, t);
    let mu_max = (0..n)
        .map(|row| local_incoherence(ustar, row))
        .fold(0.0, f64::max);
    let nu_max = (0..t_dim)
        .map(|row| local_incoherence(vstar, row))
        .fold(0.0, f64::max);

    let rf = r as f64;
    let log_nt = ((n + t_dim) as f64).ln();
    let noise_ok = e * (rf + log_nt).sqrt() <= c.c_noise * delta;
    let spread = (mu_i * noise_cols).max(nu_t * noise_rows) * rf.sqrt();
    let leverage =
        (mu_i / (n1 as f64).sqrt()).min(nu_t / (t1 as f64).sqrt()) * (rf * log_nt).sqrt();
    let incoherence_ok = spread <= c.c_inc * delta && leverage <= c.c_inc * delta;
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { f64::INFINITY };
    let weakest = ratio(noise_cols, mu_i).min(ratio(noise_rows, nu_t));
    let signal_ok = weakest * (log_nt.sqrt() + log_nt / rf.sqrt()) <= c.c_inc * delta;

    let ratios = [
        gram_ratio(ustar.rows(0, n1).into_owned(), n1 as f64 / n as f64),
        gram_ratio(ustar.rows(0, n_bar).into_owned(), n_bar as f64 / n as f64),
        gram_ratio(vstar.rows(0, t1).into_owned(), t1 as f64 / t_dim as f64),
        gram_ratio(
            vstar.rows(0, t_bar).into_owned(),
            t_bar as f64 / t_dim as f64,
        ),
    ];
    let conditioning_ok = ratios.iter().all(|g| g.lo >= c.c_l && g.hi <= c.c_u);

    let small = |sizes: &[usize]| -> Vec<usize> {
        sizes
            .iter()
            .enumerate()
            .filter(|(_, &s)| s < r)
            .map(|(g, _)| g + 1)
            .collect()
    };

    Ok(Diagnostics {
        noise_functional: e,
        noise_rows,
        noise_cols,
        mu_i,
        nu_t,
        mu_max,
        nu_max,
        sigma_r_star: sigma_r,
        sub_block_ratios: ratios,
        noise_ok,
        incoherence_ok,
        signal_ok,
        conditioning_ok,
        small_groups: small(pattern.group_sizes()),
        small_stages: small(pattern.stage_lengths()),
    })
}

/// Intervals for every imputed entry of a staggered fit, ordered by unit then period
/// in the panel's original unit order.
pub fn infer_staggered(
    panel: &PanelObservation,
    est: &StaggeredEstimate,
    alpha: f64,
) -> Result<Vec<InferenceResult>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::BadAlpha(alpha));
    }
    if let Some(err) = est.failures.values().next() {
        return Err(err.clone());
    }
    let models = est
        .blocks
        .iter()
        .map(|(key, b)| {
            VarianceModel::from_block(b)
                .map(|m| (*key, m))
                .map_err(|e| e.in_block(key.0, key.1))
        })
        .collect::<Result<std::collections::BTreeMap<_, _>>>()?;

    let mut out = Vec::new();
    for unit in 0..panel.n() {
        let row = est.pattern.row_order()[unit];
        for period in 0..panel.t() {
            let Some(key) = est.locate(unit, period) else {
                continue;
            };
            let block = &est.blocks[&key];
            let estimate = block.values[(row - block.rows.start, period - block.cols.start)];
            let gamma_hat = models[&key].gamma(row, period);
            let (ci_lo, ci_hi) = confidence_interval(estimate, gamma_hat, alpha)?;
            out.push(InferenceResult {
                unit,
                period,
                estimate,
                gamma_hat,
                omega_hat_sq: block.omega_hat_sq,
                ci_lo,
                ci_hi,
                alpha,
            });
        }
    }
    Ok(out)
}
