//! Networks mirroring a partial weight loading scenario: a two-stem,
//! 8-layer source and a one-stem, 24-layer destination with an extra head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stkit::graft::{Tensor, WeightTree};

pub const WIDTH: usize = 32;

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::from_f32(shape, &v).unwrap()
}

fn layer(rng: &mut ChaCha8Rng, t: &mut WeightTree, i: usize) {
    let p = format!("backbone.layers.{i}");
    t.insert(&format!("{p}.attn.weight"), random(rng, vec![3 * WIDTH, WIDTH])).unwrap();
    t.insert(&format!("{p}.attn.bias"), random(rng, vec![3 * WIDTH])).unwrap();
    t.insert(&format!("{p}.mlp.weight"), random(rng, vec![WIDTH, WIDTH])).unwrap();
    t.insert(&format!("{p}.mlp.bias"), random(rng, vec![WIDTH])).unwrap();
}

pub fn source(seed: u64) -> WeightTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = WeightTree::new();
    t.insert("rgb_stem.conv.weight", random(&mut rng, vec![WIDTH, 3, 3, 3])).unwrap();
    t.insert("msi_stem.conv.weight", random(&mut rng, vec![WIDTH, 10, 3, 3])).unwrap();
    for i in 0..8 {
        layer(&mut rng, &mut t, i);
    }
    t.insert("saliency_head.weight", random(&mut rng, vec![2, WIDTH])).unwrap();
    t.insert("saliency_head.bias", random(&mut rng, vec![2])).unwrap();
    t
}

/// Freshly initialized destination.
pub fn destination(seed: u64) -> WeightTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = WeightTree::new();
    t.insert("rgb_stem.conv.weight", random(&mut rng, vec![WIDTH, 3, 3, 3])).unwrap();
    for i in 0..24 {
        layer(&mut rng, &mut t, i);
    }
    t.insert("saliency_head.weight", random(&mut rng, vec![2, WIDTH])).unwrap();
    t.insert("saliency_head.bias", random(&mut rng, vec![2])).unwrap();
    t.insert("class_head.weight", random(&mut rng, vec![4, WIDTH])).unwrap();
    t.insert("class_head.bias", random(&mut rng, vec![4])).unwrap();
    t
}

pub struct FigOutcome {
    pub stems_and_head_exact: bool,
    pub backbone_layers: Vec<usize>,
    pub msi_unmatched: bool,
    pub class_head_unmatched: bool,
    pub fraction_consistent: bool,
}

/// Grafts `source` into `destination` and checks the outcome by walking
/// the report and the trees independently.
pub fn run() -> (FigOutcome, stkit::graft::GraftReport) {
    let (src, dst) = (source(1), destination(2));
    let (out, report) = stkit::graft::graft(&src, &dst, "2024-01-01T00:00:00Z").unwrap();
    let exact = |name: &str| out.get(name).unwrap().bytes() == src.get(name).unwrap().bytes();
    let stems_and_head_exact = ["rgb_stem.conv.weight", "saliency_head.weight", "saliency_head.bias"].iter().all(|n| exact(n));
    let mut layers: Vec<usize> = report
        .matched
        .iter()
        .filter_map(|m| m.dst.strip_prefix("backbone.layers."))
        .map(|r| r.split('.').next().unwrap().parse().unwrap())
        .collect();
    layers.sort();
    layers.dedup();
    let layers_copied = layers.iter().all(|i| {
        ["attn.weight", "attn.bias", "mlp.weight", "mlp.bias"].iter().all(|l| exact(&format!("backbone.layers.{i}.{l}")))
    });
    let msi_unmatched = report.unmatched_src.iter().any(|n| n == "msi_stem.conv.weight")
        && report.matched.iter().all(|m| !m.src.starts_with("msi_stem"));
    let class_head_unmatched = report.matched.iter().all(|m| !m.dst.starts_with("class_head"))
        && out.get("class_head.weight").unwrap() == dst.get("class_head.weight").unwrap()
        && out.get("class_head.bias").unwrap() == dst.get("class_head.bias").unwrap();
    let walked: usize = report
        .matched
        .iter()
        .map(|m| {
            let a = src.get(&m.src).unwrap().shape();
            let b = dst.get(&m.dst).unwrap().shape();
            a.iter().zip(b).map(|(x, y)| x.min(y)).product::<usize>()
        })
        .sum();
    let dst_total: usize = dst.leaves().iter().map(|(_, t)| t.shape().iter().product::<usize>()).sum();
    let fraction_consistent = (report.fraction - walked as f64 / dst_total as f64).abs() < 1e-12;
    (
        FigOutcome {
            stems_and_head_exact: stems_and_head_exact && layers_copied,
            backbone_layers: layers,
            msi_unmatched,
            class_head_unmatched,
            fraction_consistent,
        },
        report,
    )
}
