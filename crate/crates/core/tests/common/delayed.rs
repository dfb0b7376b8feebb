//! Random delayed trees over a pool of small rasters.

use std::sync::Arc;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stkit::delayed::{DelayedNode, Interpolation};
use stkit::raster::{write_raster, RasterData, RasterParams, RasterReader};
use stkit::Affine;
use tempfile::TempDir;

pub struct Pool {
    _dir: TempDir,
    pub readers: Vec<Arc<RasterReader>>,
}

/// f32 rasters with sprinkled NaN, `(channels, width, height)` each.
pub fn pool_of(shapes: &[(usize, usize, usize)], tile: usize, seed: u64) -> Pool {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut readers = Vec::new();
    for (i, &(c, w, h)) in shapes.iter().enumerate() {
        let a = Array3::from_shape_fn((c, h, w), |_| {
            if rng.random_bool(0.03) {
                f32::NAN
            } else {
                rng.random::<f32>()
            }
        });
        let p = dir.path().join(format!("r{i}.tpr"));
        write_raster(&p, &RasterData::F32(a), RasterParams::default().tile(tile).levels(3)).unwrap();
        readers.push(Arc::new(RasterReader::open(&p).unwrap()));
    }
    Pool { _dir: dir, readers }
}

pub fn pool() -> Pool {
    pool_of(&[(1, 24, 20), (2, 33, 17), (3, 16, 32)], 8, 99)
}

fn random_transform(rng: &mut ChaCha8Rng, w: usize, h: usize) -> (Affine, usize, usize) {
    let q = |rng: &mut ChaCha8Rng| rng.random_range(-8i32..8) as f64 * 0.5;
    match rng.random_range(0..8) {
        0 => (Affine::scale(0.5), w.div_ceil(2), h.div_ceil(2)),
        1 => (Affine::scale(0.25), w.div_ceil(4), h.div_ceil(4)),
        2 => (Affine::scale(2.0), w * 2, h * 2),
        3 => (Affine::translate(q(rng), q(rng)), w, h),
        4 => (Affine::new(-1.0, 0.0, w as f64, 0.0, 1.0, q(rng)), w, h),
        5 => (Affine::new(0.0, 1.0, q(rng), 1.0, 0.0, 0.0), h, w),
        6 => (Affine::new(1.0, 1.0, 0.5, -1.0, 1.0, w as f64), w + h, w + h),
        _ => (Affine::identity(), w, h),
    }
}

/// `p_bilinear` is the chance that a warp interpolates bilinearly.
pub fn random_tree_with(rng: &mut ChaCha8Rng, pool: &Pool, depth: usize, p_bilinear: f64) -> DelayedNode {
    if depth == 0 || rng.random_bool(0.2) {
        let src = pool.readers[rng.random_range(0..pool.readers.len())].clone();
        return DelayedNode::load(src, rng.random_range(0..2)).unwrap();
    }
    let child = random_tree_with(rng, pool, depth - 1, p_bilinear);
    let (w, h) = child.dims();
    match rng.random_range(0..7) {
        0 | 1 => {
            let (t, tw, th) = random_transform(rng, w, h);
            let interp = if rng.random_bool(p_bilinear) { Interpolation::Bilinear } else { Interpolation::Nearest };
            child.warp(t, interp, tw.clamp(1, 80), th.clamp(1, 80)).unwrap()
        }
        2 | 3 => {
            let cw = rng.random_range(1..=w.max(1) + 2);
            let ch = rng.random_range(1..=h.max(1) + 2);
            let x0 = rng.random_range(-2..=(w as i64 - cw as i64 + 2).max(-2));
            let y0 = rng.random_range(-2..=(h as i64 - ch as i64 + 2).max(-2));
            child.crop(x0, y0, cw, ch).unwrap()
        }
        4 => {
            let c = child.channels();
            let k = rng.random_range(1..=c);
            let picks = (0..k).map(|_| rng.random_range(0..c)).collect();
            child.select(picks).unwrap()
        }
        5 => {
            let other = child.clone().dequantize(0.5, 0.25);
            DelayedNode::concat(vec![child, other]).unwrap()
        }
        _ => child.nodata_fill(-1.0),
    }
}

pub fn random_tree(rng: &mut ChaCha8Rng, pool: &Pool, depth: usize) -> DelayedNode {
    random_tree_with(rng, pool, depth, 0.5)
}

pub fn has_bilinear(n: &DelayedNode) -> bool {
    matches!(n, DelayedNode::Warp { interpolation: Interpolation::Bilinear, .. }) || n.children().into_iter().any(has_bilinear)
}

/// Largest absolute difference between two evaluations, `None` when shapes
/// or NaN positions differ. Also reports whether every value is bit-equal.
pub fn difference(a: &DelayedNode, b: &DelayedNode) -> Option<(f64, bool)> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return None;
    }
    let x = a.evaluate::<f64>().unwrap();
    let y = b.evaluate::<f64>().unwrap();
    let mut worst = 0.0f64;
    let mut bits = true;
    for (p, q) in x.iter().zip(y.iter()) {
        if p.is_nan() != q.is_nan() {
            return None;
        }
        if !p.is_nan() {
            worst = worst.max((p - q).abs());
            bits &= p.to_bits() == q.to_bits();
        }
    }
    Some((worst, bits))
}
