use nalgebra::DVector;

use stagcomp::ensembles::haar_orthonormal;
use stagcomp::inference::{check_conditions, ConditionConstants};
use stagcomp::panel::StaggeredPattern;

#[test]
fn haar_factors_on_a_balanced_partition_satisfy_every_condition() {
    let pattern = StaggeredPattern::from_sizes(vec![200, 200, 100], vec![200, 200, 100]).unwrap();
    let sigma = DVector::from_element(3, 1.0);
    // The leverage term is about 0.3 here, so delta = 0.1 needs c_inc near 5.
    let loose = ConditionConstants {
        c_inc: 5.0,
        ..ConditionConstants::default()
    };
    for seed in 0..5 {
        let u = haar_orthonormal(500, 3, 2 * seed).unwrap();
        let v = haar_orthonormal(500, 3, 2 * seed + 1).unwrap();
        let d = check_conditions(
            &u,
            &v,
            &sigma,
            &pattern,
            (3, 3),
            (499, 499),
            1e-3,
            0.1,
            &loose,
        )
        .unwrap();
        assert!(
            d.noise_ok && d.incoherence_ok && d.signal_ok && d.conditioning_ok,
            "{d:?}"
        );
        for g in &d.sub_block_ratios {
            assert!(g.lo > 0.7 && g.hi < 1.3, "{g:?}");
        }
        assert!(d.small_groups.is_empty() && d.small_stages.is_empty());

        let strict = check_conditions(
            &u,
            &v,
            &sigma,
            &pattern,
            (3, 3),
            (499, 499),
            1e-3,
            0.1,
            &ConditionConstants::default(),
        )
        .unwrap();
        assert!(strict.noise_ok && strict.conditioning_ok);
    }
}

#[test]
fn spikes_at_the_target_entry_break_incoherence() {
    let pattern = StaggeredPattern::from_sizes(vec![200, 200, 100], vec![200, 200, 100]).unwrap();
    let sigma = DVector::from_element(3, 1.0);
    let u = stagcomp::ensembles::incoherent_factor(500, 3, 12.9, 3).unwrap();
    let v = stagcomp::ensembles::incoherent_factor(500, 3, 12.9, 4).unwrap();
    let loose = ConditionConstants {
        c_inc: 5.0,
        ..ConditionConstants::default()
    };
    let d = check_conditions(
        &u,
        &v,
        &sigma,
        &pattern,
        (3, 3),
        (499, 499),
        1e-3,
        0.1,
        &loose,
    )
    .unwrap();
    assert!(d.mu_i > 12.0);
    assert!(!d.incoherence_ok);
}
