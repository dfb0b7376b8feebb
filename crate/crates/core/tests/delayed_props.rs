mod common;

use common::delayed::{pool, random_tree};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stkit::delayed::{optimize, DelayedNode};

fn compare(a: &DelayedNode, b: &DelayedNode) -> Result<(), TestCaseError> {
    prop_assert_eq!(a.dims(), b.dims());
    prop_assert_eq!(a.channels(), b.channels());
    let x = a.evaluate::<f64>().unwrap();
    let y = b.evaluate::<f64>().unwrap();
    for (p, q) in x.iter().zip(y.iter()) {
        prop_assert_eq!(p.is_nan(), q.is_nan(), "nan mismatch {} vs {}", p, q);
        if !p.is_nan() {
            // overview levels are stored as f32
            prop_assert!((p - q).abs() <= 1e-6, "{} vs {}", p, q);
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 300, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn optimized_trees_evaluate_identically(seed in any::<u64>()) {
        let pool = pool();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = random_tree(&mut rng, &pool, 4);
        let (opt, report) = optimize(&tree);
        opt.validate().unwrap();
        prop_assert!(report.nodes_after <= report.nodes_before);
        prop_assert!(report.warps_after <= report.warps_before);
        compare(&tree, &opt)?;
        // a second run finds nothing left to do
        let (again, rep2) = optimize(&opt);
        prop_assert_eq!(rep2.nodes_after, report.nodes_after);
        compare(&opt, &again)?;
    }
}

#[test]
fn random_trees_exercise_every_rule() {
    let pool = pool();
    let mut total = stkit::delayed::OptimizeReport::default();
    for seed in 0..400 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = random_tree(&mut rng, &pool, 4);
        let (_, r) = optimize(&tree);
        total.warps_fused += r.warps_fused;
        total.warps_eliminated += r.warps_eliminated;
        total.crops_pushed += r.crops_pushed;
        total.loads_windowed += r.loads_windowed;
        total.overviews_substituted += r.overviews_substituted;
    }
    eprintln!("{total:?}");
    assert!(total.warps_fused > 0);
    assert!(total.warps_eliminated > 0);
    assert!(total.crops_pushed > 0);
    assert!(total.loads_windowed > 0);
    assert!(total.overviews_substituted > 0);
}
