//! Observed panels, staggered-adoption patterns and four-block reductions.
//!
//! Unit and period indices are 0-based throughout. Group and stage indices
//! (`i0`, `j0`, `k1`, `k2`) are 1-based, matching the block notation used in
//! the documentation of the estimator.

use std::ops::Range;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};

/// An `N x T` panel with an observation mask. Unobserved cells hold NaN.
#[derive(Debug, Clone)]
pub struct PanelObservation {
    values: DMatrix<f64>,
    mask: DMatrix<bool>,
}

/// Panels are equal when their masks agree and their observed values agree.
impl PartialEq for PanelObservation {
    fn eq(&self, other: &Self) -> bool {
        self.mask == other.mask
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .zip(self.mask.iter())
                .all(|((a, b), &m)| !m || a == b)
    }
}

impl PanelObservation {
    /// Builds a panel from values and a mask. Values under a false mask are replaced by NaN.
    pub fn new(mut values: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(Error::DimensionMismatch(format!(
                "values are {:?} but mask is {:?}",
                values.shape(),
                mask.shape()
            )));
        }
        let (n, t) = values.shape();
        for p in 0..t {
            for i in 0..n {
                if mask[(i, p)] {
                    if !values[(i, p)].is_finite() {
                        return Err(Error::NonFiniteObservation { unit: i, period: p });
                    }
                } else {
                    values[(i, p)] = f64::NAN;
                }
            }
        }
        Ok(PanelObservation { values, mask })
    }

    /// Treats every NaN cell as missing. Infinite values are rejected.
    pub fn from_nan_values(values: DMatrix<f64>) -> Result<Self> {
        let mask = values.map(|x| !x.is_nan());
        Self::new(values, mask)
    }

    pub fn fully_observed(values: DMatrix<f64>) -> Result<Self> {
        let mask = DMatrix::from_element(values.nrows(), values.ncols(), true);
        Self::new(values, mask)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn t(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn is_observed(&self, unit: usize, period: usize) -> bool {
        self.mask[(unit, period)]
    }

    pub fn value(&self, unit: usize, period: usize) -> Option<f64> {
        self.mask[(unit, period)].then(|| self.values[(unit, period)])
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Group/stage structure of a staggered panel.
///
/// Group 1 holds the never-treated units and is observed in every period;
/// group `i` is observed on the first `stage_lengths[0] + ... + stage_lengths[k - i]` periods.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StaggeredPattern {
    group_sizes: Vec<usize>,
    stage_lengths: Vec<usize>,
    /// 1-based first missing period per original unit; `T + 1` for never treated.
    adoption_times: Vec<usize>,
    /// Original unit index -> sorted position.
    row_order: Vec<usize>,
    /// Sorted position -> original unit index.
    sorted_units: Vec<usize>,
}

impl StaggeredPattern {
    /// A pattern whose units are already in sorted order.
    pub fn from_sizes(group_sizes: Vec<usize>, stage_lengths: Vec<usize>) -> Result<Self> {
        if group_sizes.is_empty() || group_sizes.len() != stage_lengths.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} group sizes but {} stage lengths",
                group_sizes.len(),
                stage_lengths.len()
            )));
        }
        if let Some(g) = group_sizes.iter().position(|&s| s == 0) {
            return Err(Error::IncompleteStaircase(format!(
                "group {} is empty",
                g + 1
            )));
        }
        if let Some(s) = stage_lengths.iter().position(|&s| s == 0) {
            return Err(Error::IncompleteStaircase(format!(
                "stage {} is empty",
                s + 1
            )));
        }
        let k = group_sizes.len();
        let t: usize = stage_lengths.iter().sum();
        let mut adoption_times = Vec::with_capacity(group_sizes.iter().sum());
        for (g, &size) in group_sizes.iter().enumerate() {
            let observed: usize = stage_lengths[..k - g].iter().sum();
            let adopt = if g == 0 { t + 1 } else { observed + 1 };
            adoption_times.extend(std::iter::repeat_n(adopt, size));
        }
        let n = adoption_times.len();
        Ok(StaggeredPattern {
            group_sizes,
            stage_lengths,
            adoption_times,
            row_order: (0..n).collect(),
            sorted_units: (0..n).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn n(&self) -> usize {
        self.adoption_times.len()
    }

    pub fn t(&self) -> usize {
        self.stage_lengths.iter().sum()
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    pub fn stage_lengths(&self) -> &[usize] {
        &self.stage_lengths
    }

    pub fn adoption_times(&self) -> &[usize] {
        &self.adoption_times
    }

    pub fn row_order(&self) -> &[usize] {
        &self.row_order
    }

    pub fn sorted_units(&self) -> &[usize] {
        &self.sorted_units
    }

    pub fn is_identity_order(&self) -> bool {
        self.row_order.iter().enumerate().all(|(i, &s)| i == s)
    }

    /// Sorted-row range of group `i` (1-based).
    pub fn group_rows(&self, i: usize) -> Range<usize> {
        let start: usize = self.group_sizes[..i - 1].iter().sum();
        start..start + self.group_sizes[i - 1]
    }

    /// Column range of stage `j` (1-based).
    pub fn stage_cols(&self, j: usize) -> Range<usize> {
        let start: usize = self.stage_lengths[..j - 1].iter().sum();
        start..start + self.stage_lengths[j - 1]
    }

    /// 1-based group of a sorted row.
    pub fn group_of_sorted_row(&self, row: usize) -> usize {
        let mut end = 0;
        for (g, &size) in self.group_sizes.iter().enumerate() {
            end += size;
            if row < end {
                return g + 1;
            }
        }
        panic!("row {row} outside the pattern");
    }

    /// 1-based stage of a period.
    pub fn stage_of_period(&self, period: usize) -> usize {
        let mut end = 0;
        for (j, &len) in self.stage_lengths.iter().enumerate() {
            end += len;
            if period < end {
                return j + 1;
            }
        }
        panic!("period {period} outside the pattern");
    }

    /// True when block `(i0, j0)` is missing under the staircase.
    pub fn is_unobserved_block(&self, i0: usize, j0: usize) -> bool {
        j0 + i0 > self.k() + 1
    }

    /// All missing blocks `(i0, j0)` in row-major order.
    pub fn unobserved_blocks(&self) -> Vec<(usize, usize)> {
        let k = self.k();
        let mut out = Vec::new();
        for i0 in 1..=k {
            for j0 in 1..=k {
                if self.is_unobserved_block(i0, j0) {
                    out.push((i0, j0));
                }
            }
        }
        out
    }

    /// Staircase mask in sorted row order.
    pub fn sorted_mask(&self) -> DMatrix<bool> {
        let t = self.t();
        let mut mask = DMatrix::from_element(self.n(), t, false);
        for (row, &unit) in self.sorted_units.iter().enumerate() {
            let observed = self.adoption_times[unit] - 1;
            for p in 0..observed.min(t) {
                mask[(row, p)] = true;
            }
        }
        mask
    }

    /// Staircase mask in original unit order.
    pub fn mask(&self) -> DMatrix<bool> {
        let t = self.t();
        DMatrix::from_fn(self.n(), t, |i, p| p + 1 < self.adoption_times[i])
    }
}

/// Infers the staggered pattern from a panel's mask.
///
/// Units are stable-sorted by adoption time, latest first. Units sharing an
/// adoption time form one group.
pub fn detect_pattern(panel: &PanelObservation) -> Result<StaggeredPattern> {
    let (n, t) = (panel.n(), panel.t());
    if n == 0 || t == 0 {
        return Err(Error::EmptyPanel { rows: n, cols: t });
    }
    let mask = panel.mask();
    let mut adoption_times = Vec::with_capacity(n);
    for i in 0..n {
        let first_missing = (0..t).find(|&p| !mask[(i, p)]);
        if let Some(f) = first_missing {
            if let Some(p) = (f + 1..t).find(|&p| mask[(i, p)]) {
                return Err(Error::NonStaggered { unit: i, period: p });
            }
        }
        adoption_times.push(first_missing.map_or(t + 1, |f| f + 1));
    }
    pattern_from_adoption_times(adoption_times, t)
}

/// Builds the pattern from 1-based adoption times (`T + 1` for never treated).
pub fn pattern_from_adoption_times(
    adoption_times: Vec<usize>,
    t: usize,
) -> Result<StaggeredPattern> {
    let n = adoption_times.len();
    if n == 0 || t == 0 {
        return Err(Error::EmptyPanel { rows: n, cols: t });
    }
    let mut sorted_units: Vec<usize> = (0..n).collect();
    sorted_units.sort_by(|&a, &b| adoption_times[b].cmp(&adoption_times[a]));
    let mut row_order = vec![0; n];
    for (pos, &unit) in sorted_units.iter().enumerate() {
        row_order[unit] = pos;
    }

    let mut distinct: Vec<usize> = Vec::new();
    let mut group_sizes: Vec<usize> = Vec::new();
    for &unit in &sorted_units {
        let a = adoption_times[unit];
        if distinct.last() == Some(&a) {
            *group_sizes.last_mut().unwrap() += 1;
        } else {
            distinct.push(a);
            group_sizes.push(1);
        }
    }
    if distinct[0] != t + 1 {
        return Err(Error::IncompleteStaircase(
            "no unit is observed in every period".into(),
        ));
    }
    let k = distinct.len();
    if distinct[k - 1] <= 1 {
        return Err(Error::IncompleteStaircase(format!(
            "unit {} is never observed",
            sorted_units[n - 1]
        )));
    }
    let mut stage_lengths = Vec::with_capacity(k);
    stage_lengths.push(distinct[k - 1] - 1);
    for j in 2..=k {
        stage_lengths.push(distinct[k - j] - distinct[k + 1 - j]);
    }
    debug_assert_eq!(stage_lengths.iter().sum::<usize>(), t);

    Ok(StaggeredPattern {
        group_sizes,
        stage_lengths,
        adoption_times,
        row_order,
        sorted_units,
    })
}

/// Permutes rows into staircase order.
pub fn sorted_panel(panel: &PanelObservation, pattern: &StaggeredPattern) -> PanelObservation {
    let order = pattern.sorted_units();
    let values = DMatrix::from_fn(panel.n(), panel.t(), |r, p| panel.values[(order[r], p)]);
    let mask = DMatrix::from_fn(panel.n(), panel.t(), |r, p| panel.mask[(order[r], p)]);
    PanelObservation { values, mask }
}

/// Where a four-block instance came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Origin {
    Native,
    Block { i0: usize, j0: usize },
}

/// Location of the target block inside `M_d` and inside the sorted panel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TargetRegion {
    /// Sorted-panel rows of the target block; also the rows of the instance.
    pub rows: Range<usize>,
    /// Panel columns of the target block.
    pub cols: Range<usize>,
    /// Offset of the target block within `M_d`.
    pub d_row_offset: usize,
    pub d_col_offset: usize,
}

/// The observed blocks `M_a`, `M_b`, `M_c` of a four-block problem.
#[derive(Debug, Clone, PartialEq)]
pub struct FourBlockInstance {
    pub m_a: DMatrix<f64>,
    pub m_b: DMatrix<f64>,
    pub m_c: DMatrix<f64>,
    pub origin: Origin,
    pub target: TargetRegion,
}

impl FourBlockInstance {
    pub fn native(m_a: DMatrix<f64>, m_b: DMatrix<f64>, m_c: DMatrix<f64>) -> Result<Self> {
        if m_a.nrows() != m_b.nrows() || m_a.ncols() != m_c.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "M_a {:?}, M_b {:?}, M_c {:?}",
                m_a.shape(),
                m_b.shape(),
                m_c.shape()
            )));
        }
        if [&m_a, &m_b, &m_c].iter().any(|m| m.is_empty()) {
            return Err(Error::EmptyPanel {
                rows: m_a.nrows() + m_c.nrows(),
                cols: m_a.ncols() + m_b.ncols(),
            });
        }
        if [&m_a, &m_b, &m_c]
            .iter()
            .any(|m| m.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::NonFinite);
        }
        let (n1, t1) = m_a.shape();
        let (n2, t2) = (m_c.nrows(), m_b.ncols());
        Ok(FourBlockInstance {
            m_a,
            m_b,
            m_c,
            origin: Origin::Native,
            target: TargetRegion {
                rows: n1..n1 + n2,
                cols: t1..t1 + t2,
                d_row_offset: 0,
                d_col_offset: 0,
            },
        })
    }

    /// Splits a complete matrix at `(n1, t1)`, discarding its bottom-right block.
    pub fn split(full: &DMatrix<f64>, n1: usize, t1: usize) -> Result<Self> {
        let (n, t) = full.shape();
        if n1 == 0 || t1 == 0 || n1 >= n || t1 >= t {
            return Err(Error::DimensionMismatch(format!(
                "cannot split {n} x {t} at ({n1}, {t1})"
            )));
        }
        Self::native(
            full.view((0, 0), (n1, t1)).into_owned(),
            full.view((0, t1), (n1, t - t1)).into_owned(),
            full.view((n1, 0), (n - n1, t1)).into_owned(),
        )
    }

    pub fn n1(&self) -> usize {
        self.m_a.nrows()
    }

    pub fn n2(&self) -> usize {
        self.m_c.nrows()
    }

    pub fn t1(&self) -> usize {
        self.m_a.ncols()
    }

    pub fn t2(&self) -> usize {
        self.m_b.ncols()
    }

    pub fn n_bar(&self) -> usize {
        self.n1() + self.n2()
    }

    pub fn t_bar(&self) -> usize {
        self.t1() + self.t2()
    }

    /// `[M_a; M_c]`.
    pub fn m_left(&self) -> DMatrix<f64> {
        let (n1, n2, t1) = (self.n1(), self.n2(), self.t1());
        let mut out = DMatrix::zeros(n1 + n2, t1);
        out.view_mut((0, 0), (n1, t1)).copy_from(&self.m_a);
        out.view_mut((n1, 0), (n2, t1)).copy_from(&self.m_c);
        out
    }

    /// `[M_a, M_b]`.
    pub fn m_upper(&self) -> DMatrix<f64> {
        let (n1, t1, t2) = (self.n1(), self.t1(), self.t2());
        let mut out = DMatrix::zeros(n1, t1 + t2);
        out.view_mut((0, 0), (n1, t1)).copy_from(&self.m_a);
        out.view_mut((0, t1), (n1, t2)).copy_from(&self.m_b);
        out
    }
}

/// `(k1, k2) = (k + 1 - j0, k + 1 - i0)` after validating that block `(i0, j0)` is missing.
pub fn block_partition(k: usize, i0: usize, j0: usize) -> Result<(usize, usize)> {
    if i0 == 0 || i0 > k {
        return Err(Error::IndexOutOfRange {
            what: "group index i0",
            index: i0,
            max: k,
        });
    }
    if j0 == 0 || j0 > k {
        return Err(Error::IndexOutOfRange {
            what: "stage index j0",
            index: j0,
            max: k,
        });
    }
    if j0 + i0 <= k + 1 {
        return Err(Error::BlockObserved { i0, j0 });
    }
    Ok((k + 1 - j0, k + 1 - i0))
}

/// Four-block reduction used to impute block `(i0, j0)`.
pub fn build_four_block(
    panel: &PanelObservation,
    pattern: &StaggeredPattern,
    i0: usize,
    j0: usize,
) -> Result<FourBlockInstance> {
    if panel.n() != pattern.n() || panel.t() != pattern.t() {
        return Err(Error::DimensionMismatch(format!(
            "panel is {} x {} but pattern is {} x {}",
            panel.n(),
            panel.t(),
            pattern.n(),
            pattern.t()
        )));
    }
    let (k1, k2) = block_partition(pattern.k(), i0, j0)?;
    let n1: usize = pattern.group_sizes[..k1].iter().sum();
    let n_bar: usize = pattern.group_sizes[..i0].iter().sum();
    let t1: usize = pattern.stage_lengths[..k2].iter().sum();
    let t_bar: usize = pattern.stage_lengths[..j0].iter().sum();
    let units = pattern.sorted_units();

    let fetch = |row: usize, col: usize| -> Result<f64> {
        let unit = units[row];
        panel.value(unit, col).ok_or_else(|| {
            Error::IncompleteStaircase(format!(
                "unit {unit} is missing period {col}, which the pattern marks observed"
            ))
        })
    };
    let grab = |rows: Range<usize>, cols: Range<usize>| -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(rows.len(), cols.len());
        for (c, col) in cols.clone().enumerate() {
            for (r, row) in rows.clone().enumerate() {
                out[(r, c)] = fetch(row, col)?;
            }
        }
        Ok(out)
    };

    let m_a = grab(0..n1, 0..t1)?;
    let m_b = grab(0..n1, t1..t_bar)?;
    let m_c = grab(n1..n_bar, 0..t1)?;
    let rows = pattern.group_rows(i0);
    let cols = pattern.stage_cols(j0);
    Ok(FourBlockInstance {
        m_a,
        m_b,
        m_c,
        origin: Origin::Block { i0, j0 },
        target: TargetRegion {
            d_row_offset: rows.start - n1,
            d_col_offset: cols.start - t1,
            rows,
            cols,
        },
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// The 11-unit, 15-period staircase with groups [4, 2, 3, 2] and stages [4, 4, 3, 4].
    pub(crate) fn figure_pattern() -> StaggeredPattern {
        StaggeredPattern::from_sizes(vec![4, 2, 3, 2], vec![4, 4, 3, 4]).unwrap()
    }

    fn panel_from_mask(mask: DMatrix<bool>) -> PanelObservation {
        let values = DMatrix::from_fn(mask.nrows(), mask.ncols(), |i, t| (i * 100 + t) as f64);
        PanelObservation::new(values, mask).unwrap()
    }

    #[test]
    fn detects_figure_staircase() {
        let expected = figure_pattern();
        let panel = panel_from_mask(expected.sorted_mask());
        let p = detect_pattern(&panel).unwrap();
        assert_eq!(p.k(), 4);
        assert_eq!(p.group_sizes(), &[4, 2, 3, 2]);
        assert_eq!(p.stage_lengths(), &[4, 4, 3, 4]);
        assert!(p.is_identity_order());
        assert_eq!(p.adoption_times()[0], 16);
        assert_eq!(p.adoption_times()[4], 12);
        assert_eq!(p.adoption_times()[6], 9);
        assert_eq!(p.adoption_times()[10], 5);
        assert_eq!(p, expected);
    }

    #[test]
    fn staircase_rows_observe_expected_prefix() {
        let p = figure_pattern();
        let mask = p.sorted_mask();
        let k = p.k();
        for i in 1..=k {
            let observed: usize = p.stage_lengths()[..k + 1 - i].iter().sum();
            for row in p.group_rows(i) {
                for col in 0..p.t() {
                    assert_eq!(mask[(row, col)], col < observed);
                }
            }
        }
    }

    #[test]
    fn fully_observed_is_one_group() {
        let panel = PanelObservation::fully_observed(DMatrix::zeros(5, 7)).unwrap();
        let p = detect_pattern(&panel).unwrap();
        assert_eq!(p.k(), 1);
        assert_eq!(p.group_sizes(), &[5]);
        assert_eq!(p.stage_lengths(), &[7]);
        assert!(p.unobserved_blocks().is_empty());
    }

    #[test]
    fn reversal_is_rejected() {
        let mask =
            DMatrix::from_row_slice(2, 4, &[true, true, true, true, true, true, false, true]);
        assert_eq!(
            detect_pattern(&panel_from_mask(mask)),
            Err(Error::NonStaggered { unit: 1, period: 3 })
        );
    }

    #[test]
    fn empty_and_incomplete_panels() {
        let empty = PanelObservation::fully_observed(DMatrix::zeros(0, 3)).unwrap();
        assert_eq!(
            detect_pattern(&empty),
            Err(Error::EmptyPanel { rows: 0, cols: 3 })
        );
        let no_control = DMatrix::from_row_slice(2, 3, &[true, true, false, true, false, false]);
        assert!(matches!(
            detect_pattern(&panel_from_mask(no_control)),
            Err(Error::IncompleteStaircase(_))
        ));
        let never_seen = DMatrix::from_row_slice(2, 2, &[true, true, false, false]);
        assert!(matches!(
            detect_pattern(&panel_from_mask(never_seen)),
            Err(Error::IncompleteStaircase(_))
        ));
    }

    #[test]
    fn non_finite_observed_cell_is_rejected() {
        let mut v = DMatrix::zeros(2, 2);
        v[(1, 0)] = f64::INFINITY;
        assert_eq!(
            PanelObservation::from_nan_values(v),
            Err(Error::NonFiniteObservation { unit: 1, period: 0 })
        );
    }

    #[test]
    fn sorting_swaps_late_adopter_up() {
        // Unit 0 adopts at period 2, unit 1 is never treated.
        let mask = DMatrix::from_row_slice(2, 2, &[true, false, true, true]);
        let panel = panel_from_mask(mask);
        let p = detect_pattern(&panel).unwrap();
        assert_eq!(p.row_order(), &[1, 0]);
        let sorted = sorted_panel(&panel, &p);
        assert_eq!(sorted.values()[(0, 1)], 101.0);
        assert_eq!(sorted.value(1, 0), Some(0.0));
        assert!(!sorted.is_observed(1, 1));
    }

    #[test]
    fn sorting_is_identity_on_sorted_input() {
        let panel = panel_from_mask(figure_pattern().sorted_mask());
        let p = detect_pattern(&panel).unwrap();
        let sorted = sorted_panel(&panel, &p);
        assert_eq!(sorted.mask(), panel.mask());
        assert_eq!(
            sorted.values().iter().filter(|x| !x.is_nan()).count(),
            panel.observed_count()
        );
    }

    #[test]
    fn shuffled_figure_is_restored() {
        let base = figure_pattern().sorted_mask();
        let perm = [7, 2, 10, 0, 5, 9, 1, 4, 8, 3, 6];
        let shuffled = DMatrix::from_fn(11, 15, |i, t| base[(perm[i], t)]);
        let panel = panel_from_mask(shuffled);
        let p = detect_pattern(&panel).unwrap();
        let sorted = sorted_panel(&panel, &p);
        assert_eq!(sorted.mask(), &base);
        let again = detect_pattern(&sorted).unwrap();
        assert!(again.is_identity_order());
        assert_eq!(again.group_sizes(), p.group_sizes());
        assert_eq!(again.stage_lengths(), p.stage_lengths());
    }

    #[test]
    fn partition_examples() {
        assert_eq!(block_partition(6, 5, 4), Ok((3, 2)));
        assert_eq!(block_partition(6, 6, 6), Ok((1, 1)));
        assert_eq!(block_partition(2, 2, 2), Ok((1, 1)));
        assert_eq!(
            block_partition(3, 1, 3),
            Err(Error::BlockObserved { i0: 1, j0: 3 })
        );
        assert!(matches!(
            block_partition(3, 4, 3),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn four_block_for_k6_block_5_4() {
        let sizes = vec![2, 3, 1, 2, 4, 1];
        let stages = vec![1, 2, 3, 2, 1, 3];
        let p = StaggeredPattern::from_sizes(sizes, stages).unwrap();
        let panel = panel_from_mask(p.sorted_mask());
        let inst = build_four_block(&panel, &p, 5, 4).unwrap();
        // k1 = 3 groups of rows, k2 = 2 stages of columns.
        assert_eq!((inst.n1(), inst.n2()), (6, 6));
        assert_eq!((inst.t1(), inst.t2()), (3, 5));
        assert_eq!(inst.m_a[(5, 2)], 502.0);
        assert_eq!(inst.m_b[(0, 0)], 3.0);
        assert_eq!(inst.m_c[(5, 0)], 1100.0);
        assert_eq!(inst.target.rows, 8..12);
        assert_eq!(inst.target.cols, 6..8);
        assert_eq!((inst.target.d_row_offset, inst.target.d_col_offset), (2, 3));
    }

    #[test]
    fn four_block_k2_is_native() {
        let p = StaggeredPattern::from_sizes(vec![3, 2], vec![4, 1]).unwrap();
        let full = DMatrix::from_fn(5, 5, |i, t| (i * 10 + t) as f64);
        let panel = PanelObservation::new(full.clone(), p.sorted_mask()).unwrap();
        let inst = build_four_block(&panel, &p, 2, 2).unwrap();
        let native = FourBlockInstance::split(&full, 3, 4).unwrap();
        assert_eq!(inst.m_a, native.m_a);
        assert_eq!(inst.m_b, native.m_b);
        assert_eq!(inst.m_c, native.m_c);
        assert_eq!(inst.target, native.target);
    }

    #[test]
    fn native_rejects_mismatched_blocks() {
        let a = DMatrix::zeros(2, 2);
        assert!(matches!(
            FourBlockInstance::native(a.clone(), DMatrix::zeros(3, 1), DMatrix::zeros(1, 2)),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
