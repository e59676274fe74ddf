//! Spectral imputation: the four-block estimator and its staggered extension.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{regress_columns, singular_values, truncated_svd, SvdFactors};
use crate::panel::{
    build_four_block, detect_pattern, FourBlockInstance, PanelObservation, StaggeredPattern,
};

/// Smallest admissible `σ_r(U1)` before the missing block is declared unidentifiable.
pub const U1_RANK_TOL: f64 = 1e-8;

/// Output of the four-block estimator with the intermediates inference needs.
#[derive(Debug, Clone, PartialEq)]
pub struct FourBlockEstimate {
    /// Imputed bottom-right block, `N̄2 x T̄2`.
    pub mhat_d: DMatrix<f64>,
    /// Rank-r SVD of `[M_a; M_c]`.
    pub left: SvdFactors,
    pub u1: DMatrix<f64>,
    pub u2: DMatrix<f64>,
    /// Rank-r SVD of `[M_a, M_b]`.
    pub upper: SvdFactors,
    pub v1: DMatrix<f64>,
    pub v2: DMatrix<f64>,
    pub mhat_b: DMatrix<f64>,
    pub mhat_upper: DMatrix<f64>,
    pub r: usize,
}

impl FourBlockEstimate {
    pub fn n1(&self) -> usize {
        self.u1.nrows()
    }

    pub fn t1(&self) -> usize {
        self.v1.nrows()
    }
}

pub fn estimate_four_block(inst: &FourBlockInstance, r: usize) -> Result<FourBlockEstimate> {
    let (n1, t1) = (inst.n1(), inst.t1());
    if r == 0 {
        return Err(Error::ZeroRank);
    }
    if r > n1.min(t1) {
        return Err(Error::RankTooLarge {
            rank: r,
            max: n1.min(t1),
        });
    }

    let left = truncated_svd(&inst.m_left(), r)?;
    let u1 = left.u.rows(0, n1).into_owned();
    let u2 = left.u.rows(n1, inst.n2()).into_owned();
    let sigma_r = singular_values(&u1)?[r - 1];
    if sigma_r < U1_RANK_TOL {
        return Err(Error::RankDeficientU1 { sigma_r });
    }

    let upper = truncated_svd(&inst.m_upper(), r)?;
    let v1 = upper.v.rows(0, t1).into_owned();
    let v2 = upper.v.rows(t1, inst.t2()).into_owned();
    let mhat_upper = upper.reconstruct();
    let mhat_b = mhat_upper.columns(t1, inst.t2()).into_owned();

    let coef = regress_columns(&u1, &mhat_b)?;
    let mhat_d = &u2 * coef;
    if mhat_d.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }

    Ok(FourBlockEstimate {
        mhat_d,
        left,
        u1,
        u2,
        upper,
        v1,
        v2,
        mhat_b,
        mhat_upper,
        r,
    })
}

/// `(N̄/N̄1)·‖[M_a, M_b] − M̂_upper‖_F²`, computed in instance dimensions.
pub fn noise_variance_estimate(fb: &FourBlockEstimate, inst: &FourBlockInstance) -> f64 {
    let resid = (inst.m_upper() - &fb.mhat_upper).norm_squared();
    inst.n_bar() as f64 / inst.n1() as f64 * resid
}

/// The part of one four-block fit that the staggered estimator keeps.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockEstimate {
    pub i0: usize,
    pub j0: usize,
    /// Sorted-panel rows of the block.
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    /// Imputed values, `N_{i0} x T_{j0}`.
    pub values: DMatrix<f64>,
    /// Left factor of the instance, `N̄ x r`; its top `n1_bar` rows form `U1`.
    pub u: DMatrix<f64>,
    /// Right factor of the instance, `T̄ x r`; its top `t1_bar` rows form `V1`.
    pub v: DMatrix<f64>,
    pub n1_bar: usize,
    pub t1_bar: usize,
    pub omega_hat_sq: f64,
}

impl BlockEstimate {
    fn from_fit(fb: FourBlockEstimate, inst: &FourBlockInstance, i0: usize, j0: usize) -> Self {
        let target = &inst.target;
        let values = fb
            .mhat_d
            .view(
                (target.d_row_offset, target.d_col_offset),
                (target.rows.len(), target.cols.len()),
            )
            .into_owned();
        let omega_hat_sq = noise_variance_estimate(&fb, inst);
        BlockEstimate {
            i0,
            j0,
            rows: target.rows.clone(),
            cols: target.cols.clone(),
            values,
            n1_bar: inst.n1(),
            t1_bar: inst.t1(),
            u: fb.left.u,
            v: fb.upper.v,
            omega_hat_sq,
        }
    }

    pub fn n_bar(&self) -> usize {
        self.u.nrows()
    }

    pub fn t_bar(&self) -> usize {
        self.v.nrows()
    }
}

/// Result of imputing every missing block of a staggered panel.
#[derive(Debug, Clone)]
pub struct StaggeredEstimate {
    pub blocks: BTreeMap<(usize, usize), BlockEstimate>,
    /// Blocks whose four-block fit failed, with the reason.
    pub failures: BTreeMap<(usize, usize), Error>,
    pub pattern: StaggeredPattern,
    pub r: usize,
}

impl StaggeredEstimate {
    /// Block holding `(unit, period)` in original unit order, if that cell is missing.
    pub fn locate(&self, unit: usize, period: usize) -> Option<(usize, usize)> {
        let row = self.pattern.row_order()[unit];
        let i0 = self.pattern.group_of_sorted_row(row);
        let j0 = self.pattern.stage_of_period(period);
        self.pattern.is_unobserved_block(i0, j0).then_some((i0, j0))
    }

    /// Imputed value at `(unit, period)`.
    pub fn imputed(&self, unit: usize, period: usize) -> Result<f64> {
        let key = self
            .locate(unit, period)
            .ok_or(Error::EntryObserved { unit, period })?;
        if let Some(err) = self.failures.get(&key) {
            return Err(err.clone());
        }
        let block = &self.blocks[&key];
        let row = self.pattern.row_order()[unit];
        Ok(block.values[(row - block.rows.start, period - block.cols.start)])
    }

    /// Observed cells echoed, missing cells imputed; NaN where a block failed.
    pub fn completed(&self, panel: &PanelObservation) -> DMatrix<f64> {
        let mut out = panel.values().clone();
        let units = self.pattern.sorted_units();
        for block in self.blocks.values() {
            for (c, period) in block.cols.clone().enumerate() {
                for (r, row) in block.rows.clone().enumerate() {
                    out[(units[row], period)] = block.values[(r, c)];
                }
            }
        }
        out
    }
}

/// Imputes every missing block. Blocks are fitted independently and in parallel;
/// a failing block is recorded in `failures` without aborting the others.
pub fn estimate_staggered(panel: &PanelObservation, r: usize) -> Result<StaggeredEstimate> {
    let pattern = detect_pattern(panel)?;
    estimate_with_pattern(panel, pattern, r)
}

/// As [`estimate_staggered`] with a pattern already in hand.
pub fn estimate_with_pattern(
    panel: &PanelObservation,
    pattern: StaggeredPattern,
    r: usize,
) -> Result<StaggeredEstimate> {
    if r == 0 {
        return Err(Error::ZeroRank);
    }
    let keys = pattern.unobserved_blocks();
    let fits: Vec<((usize, usize), Result<BlockEstimate>)> = keys
        .par_iter()
        .map(|&(i0, j0)| {
            let fit = build_four_block(panel, &pattern, i0, j0).and_then(|inst| {
                let fb = estimate_four_block(&inst, r)?;
                Ok(BlockEstimate::from_fit(fb, &inst, i0, j0))
            });
            ((i0, j0), fit.map_err(|e| e.in_block(i0, j0)))
        })
        .collect();

    let mut blocks = BTreeMap::new();
    let mut failures = BTreeMap::new();
    for (key, fit) in fits {
        match fit {
            Ok(b) => {
                blocks.insert(key, b);
            }
            Err(e) => {
                failures.insert(key, e);
            }
        }
    }
    Ok(StaggeredEstimate {
        blocks,
        failures,
        pattern,
        r,
    })
}

/// `Y − M̂` for a treated cell.
pub fn treatment_effect(
    panel: &PanelObservation,
    est: &StaggeredEstimate,
    treated: &DMatrix<f64>,
    unit: usize,
    period: usize,
) -> Result<f64> {
    if panel.is_observed(unit, period) {
        return Err(Error::EntryObserved { unit, period });
    }
    let y = treated
        .get((unit, period))
        .copied()
        .filter(|y| y.is_finite())
        .ok_or(Error::MissingTreatedOutcome { unit, period })?;
    Ok(y - est.imputed(unit, period)?)
}

/// Rank suggestion from the largest ratio of consecutive singular values of the
/// fully observed columns. A heuristic only; the estimators take `r` as given.
pub fn suggest_rank(panel: &PanelObservation, max_rank: usize) -> Result<usize> {
    let pattern = detect_pattern(panel)?;
    let t1 = pattern.stage_lengths()[0];
    let units = pattern.sorted_units();
    let m = DMatrix::from_fn(panel.n(), t1, |row, col| panel.values()[(units[row], col)]);
    let s = singular_values(&m)?;
    let limit = max_rank.min(s.len().saturating_sub(1)).max(1);
    if s.len() < 2 {
        return Ok(1);
    }
    let floor = s[0] * 1e-14;
    let mut best = (1, 0.0);
    for i in 0..limit {
        let ratio = s[i] / s[i + 1].max(floor);
        if ratio > best.1 {
            best = (i + 1, ratio);
        }
    }
    Ok(best.0)
}
