mod common;

use common::oracle::{all_trees, brute_force, random_tree};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stkit::graft::{match_trees, match_trees_with, validate_embedding, Strategy};

#[test]
fn exhaustive_small_label_trees() {
    let by_size: Vec<Vec<_>> = (0..=7).map(|n| if n == 0 { Vec::new() } else { all_trees(n) }).collect();
    let mut pairs = 0;
    for n1 in 1..=7 {
        for n2 in 1..=(8 - n1) {
            for a in &by_size[n1] {
                for b in &by_size[n2] {
                    let want = brute_force(a, b);
                    for strategy in [Strategy::Exact, Strategy::Dp] {
                        let e = match_trees_with(a, b, strategy);
                        validate_embedding(a, b, &e).unwrap();
                        assert_eq!(e.units, want, "{strategy:?}: {:?} vs {:?}", a.leaves(), b.leaves());
                    }
                    pairs += 1;
                }
            }
        }
    }
    assert!(pairs > 1000, "{pairs}");
}

#[test]
fn random_pairs_up_to_eight_nodes_each() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..1000 {
        let a = random_tree(&mut rng, 8);
        let b = random_tree(&mut rng, 8);
        let e = match_trees(&a, &b);
        assert!(e.exact);
        validate_embedding(&a, &b, &e).unwrap();
        assert_eq!(e.units, brute_force(&a, &b), "{:?} vs {:?}", a.leaves(), b.leaves());
        assert_eq!(e.units, match_trees(&b, &a).units);
        let dp = match_trees_with(&a, &b, Strategy::Dp);
        validate_embedding(&a, &b, &dp).unwrap();
        assert!(dp.units <= e.units);
    }
}
