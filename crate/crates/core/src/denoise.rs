//! Truncated-SVD denoising of a fully observed matrix and its first-order error terms.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{aligned_difference, truncated_svd, SvdFactors};

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseResult {
    /// `U diag(S) Vᵀ` of `factors`.
    pub estimate: DMatrix<f64>,
    pub factors: SvdFactors,
}

/// Best rank-`r` approximation of `m`.
pub fn denoise(m: &DMatrix<f64>, r: usize) -> Result<DenoiseResult> {
    let factors = truncated_svd(m, r)?;
    Ok(DenoiseResult {
        estimate: factors.reconstruct(),
        factors,
    })
}

/// Rank-`r` factors of `mstar`, rejecting matrices whose rank is below `r`.
fn true_factors(mstar: &DMatrix<f64>, r: usize) -> Result<SvdFactors> {
    let f = truncated_svd(mstar, r)?;
    let top = f.s[0];
    if !(f.sigma_min() > 1e-10 * top) {
        return Err(Error::RankMismatch {
            expected: r,
            detail: format!("sigma_r = {:e} against sigma_1 = {:e}", f.sigma_min(), top),
        });
    }
    Ok(f)
}

/// `U*U*ᵀE + E V*V*ᵀ` for the rank-`r` factors of `mstar`.
pub fn first_order_matrix_prediction(
    mstar: &DMatrix<f64>,
    e: &DMatrix<f64>,
    r: usize,
) -> Result<DMatrix<f64>> {
    check_shapes(mstar, e)?;
    let f = true_factors(mstar, r)?;
    Ok(&f.u * f.u.tr_mul(e) + (e * &f.v) * f.v.transpose())
}

/// `E V*(Σ*)⁻¹` for the rank-`r` factors of `mstar`.
pub fn first_order_subspace_prediction(
    mstar: &DMatrix<f64>,
    e: &DMatrix<f64>,
    r: usize,
) -> Result<DMatrix<f64>> {
    check_shapes(mstar, e)?;
    let f = truncated_svd(mstar, r)?;
    if !(f.sigma_min() > 1e-10 * f.s[0].max(f64::MIN_POSITIVE)) {
        return Err(Error::ZeroSignal);
    }
    let mut out = e * &f.v;
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col /= f.s[j];
    }
    Ok(out)
}

/// Residuals of both expansions for one noisy draw `mstar + e`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionResiduals {
    /// `UΣVᵀ − M* − (U*U*ᵀE + E V*V*ᵀ)`.
    pub matrix_residual: DMatrix<f64>,
    pub matrix_prediction: DMatrix<f64>,
    /// `U R_U − U* − E V*(Σ*)⁻¹`.
    pub subspace_residual: DMatrix<f64>,
    pub subspace_prediction: DMatrix<f64>,
}

impl ExpansionResiduals {
    /// Frobenius ratio of residual to prediction for the matrix expansion.
    pub fn matrix_ratio(&self) -> f64 {
        self.matrix_residual.norm() / self.matrix_prediction.norm()
    }

    /// Frobenius ratio of residual to prediction for the subspace expansion.
    pub fn subspace_ratio(&self) -> f64 {
        self.subspace_residual.norm() / self.subspace_prediction.norm()
    }
}

pub fn expansion_residuals(
    mstar: &DMatrix<f64>,
    e: &DMatrix<f64>,
    r: usize,
) -> Result<ExpansionResiduals> {
    let matrix_prediction = first_order_matrix_prediction(mstar, e, r)?;
    let subspace_prediction = first_order_subspace_prediction(mstar, e, r)?;
    let fit = denoise(&(mstar + e), r)?;
    let ustar = true_factors(mstar, r)?.u;
    let aligned = aligned_difference(&fit.factors.u, &ustar)?;
    Ok(ExpansionResiduals {
        matrix_residual: &fit.estimate - mstar - &matrix_prediction,
        matrix_prediction,
        subspace_residual: aligned - &subspace_prediction,
        subspace_prediction,
    })
}

fn check_shapes(mstar: &DMatrix<f64>, e: &DMatrix<f64>) -> Result<()> {
    if mstar.shape() != e.shape() {
        return Err(Error::DimensionMismatch(format!(
            "M* is {:?} but E is {:?}",
            mstar.shape(),
            e.shape()
        )));
    }
    Ok(())
}
