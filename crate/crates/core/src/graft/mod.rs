//! Partial weight transfer between related networks.

mod archive;
mod matcher;
mod tree;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use archive::{archive_hash, from_bytes, load_archive, save_archive, to_bytes, MAGIC, VERSION};
pub use matcher::{
    match_trees, match_trees_with, pair_units, validate_embedding, Embedding, Strategy, BEAM_THRESHOLD, BEAM_WIDTH, EXACT_NODES,
    NAME_BONUS, PARAM_UNITS,
};
pub use tree::{natural_cmp, Tensor, TensorDType, WeightTree};

#[derive(Debug, Error)]
pub enum GraftError {
    #[error("malformed weight archive: {0}")]
    Malformed(String),
    #[error("duplicate parameter name {0:?}")]
    Duplicate(String),
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),
    #[error("rank mismatch between {src:?} {src_shape:?} and {dst:?} {dst_shape:?}")]
    RankMismatch { src: String, src_shape: Vec<usize>, dst: String, dst_shape: Vec<usize> },
    #[error("leaf of dtype {0} cannot be perturbed")]
    NonFloat(String),
    #[error("{0}")]
    Param(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, GraftError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEvent {
    pub timestamp: String,
    pub source_hash: String,
    pub destination_hash: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CopyMode {
    Exact,
    PartialSlice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedLeaf {
    pub src: String,
    pub dst: String,
    pub mode: CopyMode,
    pub params_copied: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraftReport {
    pub matched: Vec<MatchedLeaf>,
    pub unmatched_dst: Vec<String>,
    pub unmatched_src: Vec<String>,
    pub params_transferred: usize,
    pub dst_params: usize,
    pub fraction: f64,
    pub score: f64,
    pub beam_limit: Option<usize>,
    pub exact: bool,
    pub lineage: LineageEvent,
}

/// Copies the leading hyper-slab `[0..min(d_i))` of `src` into `dst`.
fn copy_slab(src: &Tensor, dst: &mut Tensor) -> usize {
    let rank = src.shape().len();
    let ext: Vec<usize> = src.shape().iter().zip(dst.shape()).map(|(&a, &b)| a.min(b)).collect();
    let count: usize = ext.iter().product();
    if count == 0 {
        return 0;
    }
    let es = src.dtype().size();
    let strides = |shape: &[usize]| {
        let mut s = vec![1usize; rank];
        for k in (0..rank.saturating_sub(1)).rev() {
            s[k] = s[k + 1] * shape[k + 1];
        }
        s
    };
    let (ss, ds) = (strides(src.shape()), strides(dst.shape()));
    let run = if rank == 0 { 1 } else { ext[rank - 1] };
    let outer = rank.saturating_sub(1);
    let mut idx = vec![0usize; outer];
    let (sb, db) = (src.bytes(), dst.bytes_mut());
    loop {
        let so: usize = idx.iter().zip(&ss).map(|(i, s)| i * s).sum();
        let dof: usize = idx.iter().zip(&ds).map(|(i, s)| i * s).sum();
        db[dof * es..(dof + run) * es].copy_from_slice(&sb[so * es..(so + run) * es]);
        let mut k = outer;
        loop {
            if k == 0 {
                return count;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < ext[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Writes matched source values into a copy of `dst`. Unmatched destination
/// leaves keep their values; the caller initializes them beforehand.
pub fn transfer(src: &WeightTree, dst: &WeightTree, e: &Embedding, timestamp: &str) -> Result<(WeightTree, GraftReport)> {
    validate_embedding(src, dst, e)?;
    let mut out = dst.clone();
    let mut matched = Vec::new();
    let mut hit_s = vec![false; src.len()];
    let mut hit_d = vec![false; dst.len()];
    let mut transferred = 0;
    for &(s, d) in &e.pairs {
        let (Some(a), Some(b)) = (src.tensor(s), dst.tensor(d)) else { continue };
        if a.shape().len() != b.shape().len() {
            return Err(GraftError::RankMismatch {
                src: src.path(s),
                src_shape: a.shape().to_vec(),
                dst: dst.path(d),
                dst_shape: b.shape().to_vec(),
            });
        }
        hit_s[s] = true;
        hit_d[d] = true;
        let target = out.tensor_mut(d).expect("leaf");
        let (mode, n) = if a.shape() == b.shape() {
            *target = a.clone();
            (CopyMode::Exact, a.numel())
        } else {
            (CopyMode::PartialSlice, copy_slab(a, target))
        };
        transferred += n;
        matched.push(MatchedLeaf { src: src.path(s), dst: dst.path(d), mode, params_copied: n });
    }
    let unmatched = |t: &WeightTree, hit: &[bool]| t.leaf_ids().into_iter().filter(|&n| !hit[n]).map(|n| t.path(n)).collect();
    let dst_params = dst.total_params();
    let event = LineageEvent {
        timestamp: timestamp.to_string(),
        source_hash: archive_hash(src),
        destination_hash: archive_hash(dst),
        score: e.score(),
    };
    out.lineage.push(event.clone());
    let report = GraftReport {
        matched,
        unmatched_dst: unmatched(dst, &hit_d),
        unmatched_src: unmatched(src, &hit_s),
        params_transferred: transferred,
        dst_params,
        fraction: if dst_params == 0 { 1.0 } else { transferred as f64 / dst_params as f64 },
        score: e.score(),
        beam_limit: e.beam_limit,
        exact: e.exact,
        lineage: event,
    };
    Ok((out, report))
}

/// Matches the trees and transfers in one step.
pub fn graft(src: &WeightTree, dst: &WeightTree, timestamp: &str) -> Result<(WeightTree, GraftReport)> {
    transfer(src, dst, &match_trees(src, dst), timestamp)
}

/// `v ← λ·v + ε`, ε ~ N(0, σ²), drawn leaf by leaf in natural order.
pub fn shrink_and_perturb(t: &WeightTree, lambda: f64, sigma: f64, seed: u64) -> Result<WeightTree> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(GraftError::Param(format!("lambda must lie in (0, 1], got {lambda}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(GraftError::Param(format!("sigma must be finite and ≥ 0, got {sigma}")));
    }
    let noise = Normal::new(0.0, sigma).expect("valid sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = t.clone();
    for id in t.leaf_ids() {
        let tensor = out.tensor_mut(id).expect("leaf");
        if !tensor.dtype().is_float() {
            return Err(GraftError::NonFloat(format!("{:?} ({})", t.path(id), serde_json::to_string(&tensor.dtype()).unwrap())));
        }
        tensor.map_float(|v| lambda * v + if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 })?;
    }
    Ok(out)
}
