use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stagcomp::denoise::denoise;
use stagcomp::ensembles::{gaussian_noise, haar_orthonormal};
use stagcomp::estimator::{estimate_four_block, estimate_staggered, estimate_with_pattern};
use stagcomp::inference::{crlb, local_minimax_bound};
use stagcomp::linalg::{regress_columns, sign_matrix, truncated_svd};
use stagcomp::panel::{
    build_four_block, detect_pattern, sorted_panel, PanelObservation, StaggeredPattern,
};

fn low_rank(n: usize, t: usize, r: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(n, r, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
    let b = DMatrix::from_fn(r, t, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
    a * b
}

/// Staircase panel with shuffled rows, plus the row order used.
fn shuffled_panel(
    groups: &[usize],
    stages: &[usize],
    m: &DMatrix<f64>,
    seed: u64,
) -> (PanelObservation, Vec<usize>) {
    let pattern = StaggeredPattern::from_sizes(groups.to_vec(), stages.to_vec()).unwrap();
    let mask = pattern.mask();
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let values = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(order[i], j)]);
    let mask = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| mask[(order[i], j)]);
    (PanelObservation::new(values, mask).unwrap(), order)
}

fn layout(r: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..=4).prop_flat_map(move |k| {
        (
            prop::collection::vec(r + 1..r + 6, k),
            prop::collection::vec(r..r + 6, k),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn detecting_on_sorted_panel_is_idempotent(
        (groups, stages) in layout(1), seed in any::<u64>()
    ) {
        let n: usize = groups.iter().sum();
        let t: usize = stages.iter().sum();
        let (panel, _) = shuffled_panel(&groups, &stages, &low_rank(n, t, 1, seed), seed);
        let pattern = detect_pattern(&panel).unwrap();
        prop_assert_eq!(pattern.group_sizes(), &groups[..]);
        prop_assert_eq!(pattern.stage_lengths(), &stages[..]);
        let sorted = sorted_panel(&panel, &pattern);
        let again = detect_pattern(&sorted).unwrap();
        prop_assert!(again.is_identity_order());
        prop_assert_eq!(again.group_sizes(), pattern.group_sizes());
        prop_assert_eq!(again.stage_lengths(), pattern.stage_lengths());
        prop_assert_eq!(again.group_sizes().iter().sum::<usize>(), n);
        prop_assert_eq!(again.stage_lengths().iter().sum::<usize>(), t);
    }

    #[test]
    fn four_block_instances_only_hold_observed_cells(
        (groups, stages) in layout(1), seed in any::<u64>()
    ) {
        let n: usize = groups.iter().sum();
        let t: usize = stages.iter().sum();
        // Missing cells carry NaN, so any leak shows up as a non-finite entry.
        let full = low_rank(n, t, 1, seed);
        let (mut panel, _) = shuffled_panel(&groups, &stages, &full, seed);
        let values = DMatrix::from_fn(n, t, |i, j| if panel.is_observed(i, j) { panel.values()[(i, j)] } else { f64::NAN });
        panel = PanelObservation::from_nan_values(values).unwrap();
        let pattern = detect_pattern(&panel).unwrap();
        for (i0, j0) in pattern.unobserved_blocks() {
            let inst = build_four_block(&panel, &pattern, i0, j0).unwrap();
            for m in [&inst.m_a, &inst.m_b, &inst.m_c] {
                prop_assert!(m.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn noiseless_panels_are_recovered(
        r in 1usize..=3, seed in any::<u64>(), shape in (1usize..=4)
    ) {
        let groups: Vec<usize> = (0..shape).map(|g| r + 1 + (seed as usize >> g) % 4).collect();
        let stages: Vec<usize> = (0..shape).map(|g| r + (seed as usize >> (g + 8)) % 4).collect();
        let n: usize = groups.iter().sum();
        let t: usize = stages.iter().sum();
        let truth = low_rank(n, t, r, seed);
        let (panel, order) = shuffled_panel(&groups, &stages, &truth, seed ^ 1);
        let shuffled_truth = DMatrix::from_fn(n, t, |i, j| truth[(order[i], j)]);
        let est = estimate_staggered(&panel, r).unwrap();
        prop_assert!(est.failures.is_empty());
        let completed = est.completed(&panel);
        let scale = truth.amax();
        prop_assert!((completed - shuffled_truth).amax() <= 1e-8 * scale);
    }

    #[test]
    fn svd_reconstruction_error_never_grows_with_rank(
        n in 3usize..12, t in 3usize..12, seed in any::<u64>()
    ) {
        let m = gaussian_noise(n, t, (n * t) as f64, seed);
        let mut last = f64::INFINITY;
        for r in 1..=n.min(t) {
            let err = (truncated_svd(&m, r).unwrap().reconstruct() - &m).norm();
            prop_assert!(err <= last * (1.0 + 1e-12) + 1e-12);
            last = err;
        }
    }

    #[test]
    fn minimax_bound_never_exceeds_crlb(
        seed in any::<u64>(), e in 0.0f64..2.0, c_l in 0.05f64..3.0, extra in 0.0f64..3.0
    ) {
        let u = haar_orthonormal(12, 2, seed).unwrap();
        let v = haar_orthonormal(10, 2, seed ^ 7).unwrap();
        let gamma = crlb(&u, &v, 6, 5, 1.3, 11, 9).unwrap();
        let bound = local_minimax_bound(gamma, e, c_l + extra, c_l).unwrap();
        prop_assert!(bound >= 0.0 && bound <= gamma);
    }

    #[test]
    fn denoise_is_idempotent(n in 4usize..15, t in 4usize..15, r in 1usize..4, seed in any::<u64>()) {
        let m = gaussian_noise(n, t, (n * t) as f64, seed);
        let once = denoise(&m, r).unwrap().estimate;
        let twice = denoise(&once, r).unwrap().estimate;
        prop_assert!((&once - twice).amax() <= 1e-9 * once.amax().max(1.0));
    }

    #[test]
    fn regression_fit_is_invariant_to_reparameterizing_u1(seed in any::<u64>()) {
        let u1 = gaussian_noise(15, 3, 15.0 * 3.0f64.sqrt(), seed);
        let b = gaussian_noise(15, 4, 15.0 * 2.0, seed ^ 3);
        let mut g = gaussian_noise(3, 3, 3.0, seed ^ 5);
        g += DMatrix::identity(3, 3) * 3.0;
        let fit = &u1 * regress_columns(&u1, &b).unwrap();
        let u1g = &u1 * &g;
        let refit = &u1g * regress_columns(&u1g, &b).unwrap();
        prop_assert!((fit - refit).amax() <= 1e-9 * b.amax());
    }
}

#[test]
fn sign_matrix_is_the_procrustes_solution() {
    let u = haar_orthonormal(20, 3, 1).unwrap();
    let ustar = haar_orthonormal(20, 3, 2).unwrap();
    let best = (&u * sign_matrix(&(u.transpose() * &ustar)).unwrap() - &ustar).norm();
    for s in 0..100 {
        let rot = haar_orthonormal(3, 3, 100 + s).unwrap();
        assert!(best <= (&u * rot - &ustar).norm() + 1e-12);
    }
}

#[test]
fn permuting_columns_within_a_stage_permutes_the_estimate() {
    let (groups, stages) = (vec![12, 10, 9], vec![11, 9, 8]);
    let n: usize = groups.iter().sum();
    let t: usize = stages.iter().sum();
    let m = low_rank(n, t, 2, 4) + gaussian_noise(n, t, 0.3, 5);
    let pattern = StaggeredPattern::from_sizes(groups, stages).unwrap();
    let panel = PanelObservation::new(m.clone(), pattern.mask()).unwrap();

    // Reverse the columns of the second stage.
    let perm: Vec<usize> = (0..t)
        .map(|j| if (11..20).contains(&j) { 30 - j } else { j })
        .collect();
    let permuted = PanelObservation::new(
        DMatrix::from_fn(n, t, |i, j| m[(i, perm[j])]),
        DMatrix::from_fn(n, t, |i, j| pattern.mask()[(i, perm[j])]),
    )
    .unwrap();

    let base = estimate_with_pattern(&panel, pattern.clone(), 2)
        .unwrap()
        .completed(&panel);
    let other = estimate_with_pattern(&permuted, pattern, 2)
        .unwrap()
        .completed(&permuted);
    let back = DMatrix::from_fn(n, t, |i, j| other[(i, perm[j])]);
    assert!((base - back).amax() < 1e-10);
}

#[test]
fn two_group_panel_matches_the_four_block_estimator() {
    let (groups, stages) = (vec![14, 9], vec![12, 7]);
    let m = low_rank(23, 19, 2, 9) + gaussian_noise(23, 19, 0.5, 10);
    let pattern = StaggeredPattern::from_sizes(groups, stages).unwrap();
    let panel = PanelObservation::new(m.clone(), pattern.mask()).unwrap();
    let staggered = estimate_with_pattern(&panel, pattern, 2).unwrap();
    let direct = estimate_four_block(
        &stagcomp::panel::FourBlockInstance::split(&m, 14, 12).unwrap(),
        2,
    )
    .unwrap();
    let completed = staggered.completed(&panel);
    let block = completed.view((14, 12), (9, 7)).into_owned();
    assert_eq!(block, direct.mhat_d);
}
