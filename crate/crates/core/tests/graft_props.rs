mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stkit::graft::{from_bytes, graft, load_archive, match_trees, save_archive, shrink_and_perturb, to_bytes, Tensor, WeightTree};

fn arb_tree() -> impl Strategy<Value = WeightTree> {
    let leaf = (prop::collection::vec(1usize..4, 0..3), any::<bool>(), any::<u64>());
    prop::collection::vec(("[a-c]{1,2}(\\.[0-9]{1,2}){0,2}", leaf), 0..12).prop_map(|items| {
        let mut t = WeightTree::new();
        for (name, (shape, f64s, seed)) in items {
            let n: usize = shape.iter().product();
            let mut x = seed;
            let mut next = || {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(x)
            };
            let tensor = if f64s {
                Tensor::from_f64(shape, &(0..n).map(|_| next()).collect::<Vec<_>>()).unwrap()
            } else {
                Tensor::from_f32(shape, &(0..n).map(|_| next() as f32).collect::<Vec<_>>()).unwrap()
            };
            let _ = t.insert(&name, tensor);
        }
        t
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn archive_round_trip_is_bit_exact(t in arb_tree()) {
        let bytes = to_bytes(&t);
        let back = from_bytes(&bytes).unwrap();
        prop_assert!(back == t);
        prop_assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn self_graft_is_identity(t in arb_tree()) {
        let (out, r) = graft(&t, &t, "2024-01-01T00:00:00Z").unwrap();
        prop_assert!(out.leaves() == t.leaves());
        prop_assert_eq!(r.fraction, 1.0);
        prop_assert_eq!(r.unmatched_dst.len(), 0);
    }

    #[test]
    fn prefix_wrapping_keeps_matched_leaves(t in arb_tree()) {
        let plain = graft(&t, &t, "t").unwrap().1;
        let wrapped = graft(&t.wrapped("module").unwrap(), &t, "t").unwrap().1;
        let dsts = |r: &stkit::graft::GraftReport| r.matched.iter().map(|m| m.dst.clone()).collect::<Vec<_>>();
        prop_assert_eq!(dsts(&plain), dsts(&wrapped));
    }

    #[test]
    fn score_is_symmetric(a in arb_tree(), b in arb_tree()) {
        prop_assert_eq!(match_trees(&a, &b).units, match_trees(&b, &a).units);
    }

    #[test]
    fn every_destination_leaf_reported_once(a in arb_tree(), b in arb_tree()) {
        let r = graft(&a, &b, "t").unwrap().1;
        let mut names: Vec<_> = r.matched.iter().map(|m| m.dst.clone()).chain(r.unmatched_dst.clone()).collect();
        names.sort();
        let mut want: Vec<_> = b.leaves().into_iter().map(|(n, _)| n).collect();
        want.sort();
        prop_assert_eq!(names, want);
    }
}

#[test]
fn fig_scenario() {
    let (o, r) = common::fig::run();
    assert!(o.stems_and_head_exact);
    assert_eq!(o.backbone_layers, (0..8).collect::<Vec<_>>());
    assert!(o.msi_unmatched && o.class_head_unmatched && o.fraction_consistent);
    assert!(r.fraction > 0.0 && r.fraction < 1.0);
}

#[test]
fn file_round_trip_and_two_grafts() {
    let dir = tempfile::tempdir().unwrap();
    let a = common::fig::source(3);
    let b = common::fig::destination(4);
    let (c, _) = graft(&a, &b, "2024-01-01T00:00:00Z").unwrap();
    let (d, _) = graft(&a, &c, "2024-03-01T00:00:00Z").unwrap();
    let path = dir.path().join("d.wtree");
    save_archive(&d, &path).unwrap();
    let back = load_archive(&path).unwrap();
    assert!(back == d);
    assert_eq!(back.lineage.len(), 2);
    assert!(back.lineage[0].timestamp < back.lineage[1].timestamp);
}

#[test]
fn shrink_perturb_distribution() {
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let vals: Vec<f32> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -2.0f32..2.0)).collect();
    let t = WeightTree::from_tensors([("w", Tensor::from_f32(vec![n], &vals).unwrap())]).unwrap();
    let (lambda, sigma) = (0.9, 0.01);
    let out = shrink_and_perturb(&t, lambda, sigma, 1234).unwrap();
    let o = out.get("w").unwrap().to_f64_vec();
    let eps: Vec<f64> = o.iter().zip(&vals).map(|(y, &x)| y - lambda * x as f64).collect();
    let mean = eps.iter().sum::<f64>() / n as f64;
    let std = (eps.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    assert!(mean.abs() < 3.0 * sigma / (n as f64).sqrt(), "{mean}");
    assert!((std - sigma).abs() < 0.02 * sigma, "{std}");
}
