//! Maximum common subtree embedding between two weight trees.
//!
//! Scores are integers in tenths: every overlapping parameter is worth 10 and
//! every matched pair with identical segment names earns 1.
//!
//! Small instances are solved exactly over every injective map that preserves
//! ancestry both ways, by memoized search over pairs of forest-root sets.
//! Larger ones use a polynomial DP, exact over the constrained class where
//! disjoint subtrees map into disjoint subtrees; it can miss maps that split
//! one forest across a destination node and the children of its sibling.

use std::collections::HashMap;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::Serialize;

use super::tree::WeightTree;
use super::{GraftError, Result};

pub const PARAM_UNITS: i64 = 10;
pub const NAME_BONUS: i64 = 1;
/// Node-pair count above which bipartite candidates are pruned.
pub const BEAM_THRESHOLD: usize = 10_000;
/// Destination candidates kept per source child when pruning.
pub const BEAM_WIDTH: usize = 8;
/// Combined node count up to which the exact search is used.
pub const EXACT_NODES: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Exact search for small trees, DP otherwise.
    Auto,
    Exact,
    Dp,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Embedding {
    /// `(source node, destination node)` pairs in source pre-order.
    pub pairs: Vec<(usize, usize)>,
    /// Score in tenths of a parameter.
    pub units: i64,
    pub beam_limit: Option<usize>,
    pub exact: bool,
}

impl Embedding {
    pub fn score(&self) -> f64 {
        self.units as f64 / PARAM_UNITS as f64
    }
}

/// Score of matching `s` with `d` on its own, or `None` when incompatible.
pub fn pair_units(src: &WeightTree, dst: &WeightTree, s: usize, d: usize) -> Option<i64> {
    let bonus = if src.name(s) == dst.name(d) { NAME_BONUS } else { 0 };
    match (src.tensor(s), dst.tensor(d)) {
        (None, None) => Some(bonus),
        (Some(a), Some(b)) if a.dtype() == b.dtype() && a.shape().len() == b.shape().len() => {
            let overlap: i64 = a.shape().iter().zip(b.shape()).map(|(&x, &y)| x.min(y) as i64).product();
            Some(PARAM_UNITS * overlap + bonus)
        }
        _ => None,
    }
}

struct Dp<'a> {
    src: &'a WeightTree,
    dst: &'a WeightTree,
    nd: usize,
    /// Best embedding of subtree(s) into subtree(d).
    ts: Vec<i64>,
    /// Best embedding of the child forest of s into the child forest of d.
    fs: Vec<i64>,
    beam: Option<usize>,
}

impl Dp<'_> {
    fn at(&self, s: usize, d: usize) -> usize {
        s * self.nd + d
    }

    /// Max-weight assignment between children; returns value and pairs.
    fn assign(&self, s: usize, d: usize) -> (i64, Vec<(usize, usize)>) {
        let (cs, cd) = (self.src.children(s), self.dst.children(d));
        if cs.is_empty() || cd.is_empty() {
            return (0, Vec::new());
        }
        let mut w: Vec<Vec<i64>> = cs.iter().map(|&a| cd.iter().map(|&b| self.ts[self.at(a, b)]).collect()).collect();
        if let Some(k) = self.beam {
            for row in &mut w {
                if row.len() > k {
                    let mut order: Vec<usize> = (0..row.len()).collect();
                    order.sort_by_key(|&j| (std::cmp::Reverse(row[j]), j));
                    for &j in &order[k..] {
                        row[j] = 0;
                    }
                }
            }
        }
        if cs.len() == 1 || cd.len() == 1 {
            let mut best = (0, 0, 0);
            for (i, row) in w.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    if v > best.0 {
                        best = (v, i, j);
                    }
                }
            }
            let pairs = if best.0 > 0 { vec![(cs[best.1], cd[best.2])] } else { Vec::new() };
            return (best.0, pairs);
        }
        let transpose = cs.len() > cd.len();
        let (r, c) = if transpose { (cd.len(), cs.len()) } else { (cs.len(), cd.len()) };
        let data: Vec<i64> = (0..r * c)
            .map(|k| {
                let (i, j) = (k / c, k % c);
                if transpose { w[j][i] } else { w[i][j] }
            })
            .collect();
        let m = Matrix::from_vec(r, c, data).expect("matrix dims");
        let (total, rows_to_cols) = kuhn_munkres(&m);
        let mut pairs = Vec::new();
        for (i, &j) in rows_to_cols.iter().enumerate() {
            let (a, b) = if transpose { (j, i) } else { (i, j) };
            if w[a][b] > 0 {
                pairs.push((cs[a], cd[b]));
            }
        }
        (total, pairs)
    }

    fn fill(&mut self) {
        let (po_s, po_d) = (self.src.postorder(), self.dst.postorder());
        for &s in &po_s {
            for &d in &po_d {
                let mut f = self.assign(s, d).0;
                for &c in self.dst.children(d) {
                    f = f.max(self.fs[self.at(s, c)]);
                }
                for &c in self.src.children(s) {
                    f = f.max(self.fs[self.at(c, d)]);
                }
                let ix = self.at(s, d);
                self.fs[ix] = f;

                let mut t = pair_units(self.src, self.dst, s, d).map_or(0, |p| p + f);
                for &c in self.dst.children(d) {
                    t = t.max(self.ts[self.at(s, c)]);
                }
                for &c in self.src.children(s) {
                    t = t.max(self.ts[self.at(c, d)]);
                }
                self.ts[ix] = t;
            }
        }
    }

    fn rebuild_tree(&self, s: usize, d: usize, out: &mut Vec<(usize, usize)>) {
        let v = self.ts[self.at(s, d)];
        if v == 0 {
            return;
        }
        if let Some(p) = pair_units(self.src, self.dst, s, d) {
            if p + self.fs[self.at(s, d)] == v {
                out.push((s, d));
                self.rebuild_forest(s, d, out);
                return;
            }
        }
        for &c in self.dst.children(d) {
            if self.ts[self.at(s, c)] == v {
                return self.rebuild_tree(s, c, out);
            }
        }
        for &c in self.src.children(s) {
            if self.ts[self.at(c, d)] == v {
                return self.rebuild_tree(c, d, out);
            }
        }
        unreachable!("DP table inconsistent");
    }

    fn rebuild_forest(&self, s: usize, d: usize, out: &mut Vec<(usize, usize)>) {
        let v = self.fs[self.at(s, d)];
        if v == 0 {
            return;
        }
        let (a, pairs) = self.assign(s, d);
        if a == v {
            for (cs, cd) in pairs {
                self.rebuild_tree(cs, cd, out);
            }
            return;
        }
        for &c in self.dst.children(d) {
            if self.fs[self.at(s, c)] == v {
                return self.rebuild_forest(s, c, out);
            }
        }
        for &c in self.src.children(s) {
            if self.fs[self.at(c, d)] == v {
                return self.rebuild_forest(c, d, out);
            }
        }
        unreachable!("DP table inconsistent");
    }
}

pub fn match_trees(src: &WeightTree, dst: &WeightTree) -> Embedding {
    match_trees_with(src, dst, Strategy::Auto)
}

/// # Panics
/// `Strategy::Exact` on trees with more than 64 nodes.
pub fn match_trees_with(src: &WeightTree, dst: &WeightTree, strategy: Strategy) -> Embedding {
    let exact = match strategy {
        Strategy::Auto => src.len() + dst.len() <= EXACT_NODES,
        Strategy::Exact => true,
        Strategy::Dp => false,
    };
    let mut e = if exact { exact_match(src, dst) } else { dp_match(src, dst) };
    let mut pos = vec![0; src.len()];
    for (i, n) in src.preorder().into_iter().enumerate() {
        pos[n] = i;
    }
    e.pairs.sort_by_key(|&(s, _)| pos[s]);
    e
}

struct Exact<'a> {
    src: &'a WeightTree,
    dst: &'a WeightTree,
    s_kids: Vec<u64>,
    d_kids: Vec<u64>,
    d_sub: Vec<u64>,
    memo: HashMap<(u64, u64), i64>,
}

fn bits(mut m: u64) -> impl Iterator<Item = usize> {
    std::iter::from_fn(move || {
        (m != 0).then(|| {
            let i = m.trailing_zeros() as usize;
            m &= m - 1;
            i
        })
    })
}

impl Exact<'_> {
    /// Forest `b` with the root above `d`, the path down to `d` and the
    /// subtree of `d` removed.
    fn without(&self, b: u64, root: usize, d: usize) -> u64 {
        let mut out = b & !(1 << root);
        let mut cur = d;
        while cur != root {
            let p = self.dst.parent(cur).expect("d lies under root");
            out |= self.d_kids[p] & !(1 << cur);
            cur = p;
        }
        out
    }

    /// Options at state `(a, b)`: `None` skips the first source root.
    fn options(&self, a: u64, b: u64) -> Vec<(Option<(usize, usize, u64)>, usize)> {
        let x = a.trailing_zeros() as usize;
        let mut out = vec![(None, x)];
        for r in bits(b) {
            for d in bits(self.d_sub[r]) {
                if pair_units(self.src, self.dst, x, d).is_some() {
                    out.push((Some((d, r, self.without(b, r, d))), x));
                }
            }
        }
        out
    }

    fn value(&mut self, a: u64, b: u64, opt: &(Option<(usize, usize, u64)>, usize)) -> i64 {
        let x = opt.1;
        let rest = a & !(1 << x);
        match opt.0 {
            None => self.solve(rest | self.s_kids[x], b),
            Some((d, _, b_rest)) => {
                pair_units(self.src, self.dst, x, d).unwrap() + self.solve(self.s_kids[x], self.d_kids[d]) + self.solve(rest, b_rest)
            }
        }
    }

    fn solve(&mut self, a: u64, b: u64) -> i64 {
        if a == 0 || b == 0 {
            return 0;
        }
        if let Some(&v) = self.memo.get(&(a, b)) {
            return v;
        }
        let mut best = 0;
        for opt in self.options(a, b) {
            best = best.max(self.value(a, b, &opt));
        }
        self.memo.insert((a, b), best);
        best
    }

    fn rebuild(&mut self, a: u64, b: u64, out: &mut Vec<(usize, usize)>) {
        if a == 0 || b == 0 {
            return;
        }
        let v = self.solve(a, b);
        for opt in self.options(a, b) {
            if self.value(a, b, &opt) != v {
                continue;
            }
            let x = opt.1;
            let rest = a & !(1 << x);
            match opt.0 {
                None => self.rebuild(rest | self.s_kids[x], b, out),
                Some((d, _, b_rest)) => {
                    out.push((x, d));
                    self.rebuild(self.s_kids[x], self.d_kids[d], out);
                    self.rebuild(rest, b_rest, out);
                }
            }
            return;
        }
        unreachable!("memo inconsistent");
    }
}

fn exact_match(src: &WeightTree, dst: &WeightTree) -> Embedding {
    assert!(src.len() <= 64 && dst.len() <= 64, "exact search is limited to 64-node trees");
    let kids = |t: &WeightTree| (0..t.len()).map(|n| t.children(n).iter().fold(0u64, |m, &c| m | 1 << c)).collect::<Vec<_>>();
    let mut d_sub = vec![0u64; dst.len()];
    for n in dst.postorder() {
        d_sub[n] = dst.children(n).iter().fold(1u64 << n, |m, &c| m | d_sub[c]);
    }
    let mut ex = Exact { src, dst, s_kids: kids(src), d_kids: kids(dst), d_sub, memo: HashMap::new() };
    let (a, b) = (1u64 << src.root(), 1u64 << dst.root());
    let units = ex.solve(a, b);
    let mut pairs = Vec::new();
    ex.rebuild(a, b, &mut pairs);
    Embedding { pairs, units, beam_limit: None, exact: true }
}

fn dp_match(src: &WeightTree, dst: &WeightTree) -> Embedding {
    let (ns, nd) = (src.len(), dst.len());
    let beam = (ns * nd > BEAM_THRESHOLD).then_some(BEAM_WIDTH);
    let mut dp = Dp { src, dst, nd, ts: vec![0; ns * nd], fs: vec![0; ns * nd], beam };
    dp.fill();
    let mut pairs = Vec::new();
    dp.rebuild_tree(src.root(), dst.root(), &mut pairs);
    Embedding { units: dp.ts[dp.at(src.root(), dst.root())], pairs, beam_limit: beam, exact: false }
}

/// Structural check of an embedding: injective, kind- and shape-compatible,
/// ancestry preserved both ways, and a score equal to the sum of its pairs.
pub fn validate_embedding(src: &WeightTree, dst: &WeightTree, e: &Embedding) -> Result<()> {
    let bad = |m: String| Err(GraftError::InvalidEmbedding(m));
    let mut seen_s = vec![false; src.len()];
    let mut seen_d = vec![false; dst.len()];
    let mut total = 0;
    for &(s, d) in &e.pairs {
        if s >= src.len() || d >= dst.len() {
            return bad(format!("pair ({s}, {d}) out of range"));
        }
        if std::mem::replace(&mut seen_s[s], true) || std::mem::replace(&mut seen_d[d], true) {
            return bad(format!("pair ({s}, {d}) is not injective"));
        }
        match pair_units(src, dst, s, d) {
            Some(p) => total += p,
            None => return bad(format!("{:?} and {:?} are incompatible", src.path(s), dst.path(d))),
        }
    }
    for &(s1, d1) in &e.pairs {
        for &(s2, d2) in &e.pairs {
            if src.is_ancestor(s1, s2) != dst.is_ancestor(d1, d2) {
                return bad(format!("ancestry of {:?} / {:?} not preserved", src.path(s1), src.path(s2)));
            }
        }
    }
    if total != e.units {
        return bad(format!("score {} does not match pairs ({total})", e.units));
    }
    Ok(())
}
