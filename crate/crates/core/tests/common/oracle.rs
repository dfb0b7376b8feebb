//! Exhaustive matcher oracle and small-tree generators.

use rand::Rng;
use stkit::graft::{pair_units, Tensor, TensorDType, WeightTree};

/// Best score over every injective, kind-compatible map that preserves
/// proper ancestry in both directions.
pub fn brute_force(src: &WeightTree, dst: &WeightTree) -> i64 {
    let s_nodes: Vec<usize> = (0..src.len()).collect();
    let mut used = vec![false; dst.len()];
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    let mut best = 0;
    search(src, dst, &s_nodes, 0, &mut used, &mut chosen, 0, &mut best);
    best
}

#[allow(clippy::too_many_arguments)]
fn search(
    src: &WeightTree,
    dst: &WeightTree,
    s_nodes: &[usize],
    k: usize,
    used: &mut [bool],
    chosen: &mut Vec<(usize, usize)>,
    acc: i64,
    best: &mut i64,
) {
    if k == s_nodes.len() {
        *best = (*best).max(acc);
        return;
    }
    search(src, dst, s_nodes, k + 1, used, chosen, acc, best);
    let s = s_nodes[k];
    for d in 0..dst.len() {
        if used[d] {
            continue;
        }
        let Some(p) = pair_units(src, dst, s, d) else { continue };
        let ok = chosen.iter().all(|&(s2, d2)| {
            src.is_ancestor(s, s2) == dst.is_ancestor(d, d2) && src.is_ancestor(s2, s) == dst.is_ancestor(d2, d)
        });
        if !ok {
            continue;
        }
        used[d] = true;
        chosen.push((s, d));
        search(src, dst, s_nodes, k + 1, used, chosen, acc + p, best);
        chosen.pop();
        used[d] = false;
    }
}

/// A label tree: `Leaf(label)` or `Node(label, children)`.
#[derive(Debug, Clone)]
pub enum Shape {
    Leaf(char),
    Node(char, Vec<Shape>),
}

fn subtrees(label: char, size: usize) -> Vec<Shape> {
    if size == 1 {
        return vec![Shape::Leaf(label)];
    }
    forests(size - 1).into_iter().map(|f| Shape::Node(label, f)).collect()
}

/// Forests of exactly `size` nodes whose roots carry distinct labels from {a, b}.
fn forests(size: usize) -> Vec<Vec<Shape>> {
    let mut out = Vec::new();
    for l in ['a', 'b'] {
        for t in subtrees(l, size) {
            out.push(vec![t]);
        }
    }
    for i in 1..size {
        for a in subtrees('a', i) {
            for b in subtrees('b', size - i) {
                out.push(vec![a.clone(), b]);
            }
        }
    }
    out
}

fn collect(shape: &Shape, prefix: &str, out: &mut Vec<String>) {
    let join = |l: char| if prefix.is_empty() { l.to_string() } else { format!("{prefix}.{l}") };
    match shape {
        Shape::Leaf(l) => out.push(join(*l)),
        Shape::Node(l, kids) => {
            let p = join(*l);
            for k in kids {
                collect(k, &p, out);
            }
        }
    }
}

/// Every weight tree with `size` nodes (root included) over labels {a, b};
/// leaves are single f32 parameters.
pub fn all_trees(size: usize) -> Vec<WeightTree> {
    if size == 1 {
        return vec![WeightTree::new()];
    }
    forests(size - 1)
        .into_iter()
        .map(|f| {
            let mut names = Vec::new();
            for t in &f {
                collect(t, "", &mut names);
            }
            WeightTree::from_tensors(names.into_iter().map(|n| (n, Tensor::zeros(TensorDType::F32, vec![1])))).unwrap()
        })
        .collect()
}

/// Random tree with at most `max_nodes` nodes, small shapes and mixed dtypes.
pub fn random_tree(rng: &mut impl Rng, max_nodes: usize) -> WeightTree {
    let target = rng.random_range(1..=max_nodes);
    loop {
        let mut t = WeightTree::new();
        let mut internal = vec![String::new()];
        let mut attempts = 0;
        while t.len() < target && attempts < 50 {
            attempts += 1;
            let parent = internal[rng.random_range(0..internal.len())].clone();
            let label = ["a", "b", "c", "0", "1"][rng.random_range(0..5)];
            let name = if parent.is_empty() { label.to_string() } else { format!("{parent}.{label}") };
            if t.find(&name).is_some() {
                continue;
            }
            if t.len() + 2 <= target && rng.random_bool(0.35) {
                internal.push(name.clone());
                let leaf = ["w", "b"][rng.random_range(0..2)];
                t.insert(&format!("{name}.{leaf}"), random_tensor(rng)).unwrap();
            } else {
                t.insert(&name, random_tensor(rng)).unwrap();
            }
        }
        if t.len() <= max_nodes {
            return t;
        }
    }
}

fn random_tensor(rng: &mut impl Rng) -> Tensor {
    let rank = rng.random_range(1..=2);
    let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=4)).collect();
    let dtype = if rng.random_bool(0.85) { TensorDType::F32 } else { TensorDType::F64 };
    Tensor::zeros(dtype, shape)
}
