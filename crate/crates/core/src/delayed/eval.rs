use ndarray::{s, Array3, ArrayView3, Axis};
use rayon::prelude::*;

use super::{warp_kind, DelayedNode, Interpolation, Result, Window, WarpKind};
use crate::raster::block_mean;
use crate::{Affine, Scalar};

impl DelayedNode {
    /// Materializes the tree as a `channels × height × width` array.
    pub fn evaluate<T: Scalar>(&self) -> Result<Array3<T>> {
        match self {
            Self::Load { source, level, window, nodata } => {
                let hd = source.header();
                if *nodata == hd.nodata {
                    Ok(source.read_region_real::<T>(*level, window.x0, window.y0, window.width, window.height)?)
                } else {
                    let raw = source.read_region(*level, window.x0, window.y0, window.width, window.height)?;
                    let mut out = raw.to_real::<T>(*nodata);
                    // pixels outside the raster come back as the file's fill value
                    mask_outside(&mut out, *window, hd.level_dims(*level));
                    Ok(out)
                }
            }
            Self::Crop { child, window } => Ok(crop_array(child.evaluate::<T>()?.view(), *window)),
            Self::Warp { child, transform, interpolation, width, height } => {
                let src = child.evaluate::<T>()?;
                Ok(match warp_kind(transform, *interpolation) {
                    WarpKind::Box(k) => box_reduce(src, k, *width, *height),
                    WarpKind::General => resample(src.view(), transform, *interpolation, *width, *height),
                })
            }
            Self::ChannelConcat { children } => {
                let parts = children.iter().map(|c| c.evaluate::<T>()).collect::<Result<Vec<_>>>()?;
                let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
                Ok(ndarray::concatenate(Axis(0), &views).expect("concat dims checked at construction"))
            }
            Self::ChannelSelect { child, channels } => {
                let src = child.evaluate::<T>()?;
                Ok(src.select(Axis(0), channels))
            }
            Self::Dequantize { child, scale, offset } => {
                let (s, o) = (T::lit(*scale), T::lit(*offset));
                Ok(child.evaluate::<T>()?.mapv_into(|v| v * s + o))
            }
            Self::NodataFill { child, value } => {
                let fill = T::lit(*value);
                Ok(child.evaluate::<T>()?.mapv_into(|v| if v.is_nan() { fill } else { v }))
            }
        }
    }
}

fn mask_outside<T: Scalar>(a: &mut Array3<T>, win: Window, (lw, lh): (usize, usize)) {
    let (_, h, w) = a.dim();
    for y in 0..h {
        for x in 0..w {
            let (gx, gy) = (win.x0 + x as i64, win.y0 + y as i64);
            if gx < 0 || gy < 0 || gx >= lw as i64 || gy >= lh as i64 {
                a.slice_mut(s![.., y, x]).fill(T::nan());
            }
        }
    }
}

/// Copies `win` out of `src`, NaN where the window leaves the source.
pub(crate) fn crop_array<T: Scalar>(src: ArrayView3<'_, T>, win: Window) -> Array3<T> {
    let (c, h, w) = src.dim();
    let mut out = Array3::from_elem((c, win.height, win.width), T::nan());
    let sx0 = win.x0.max(0);
    let sy0 = win.y0.max(0);
    let sx1 = win.x1().min(w as i64);
    let sy1 = win.y1().min(h as i64);
    if sx0 < sx1 && sy0 < sy1 {
        let (ox, oy) = ((sx0 - win.x0) as usize, (sy0 - win.y0) as usize);
        let (cw, ch) = ((sx1 - sx0) as usize, (sy1 - sy0) as usize);
        out.slice_mut(s![.., oy..oy + ch, ox..ox + cw])
            .assign(&src.slice(s![.., sy0 as usize..sy1 as usize, sx0 as usize..sx1 as usize]));
    }
    out
}

/// One 2×2 box step with ceil-halved dims; NaN propagates.
pub(crate) fn halve<T: Scalar>(src: ArrayView3<'_, T>) -> Array3<T> {
    let (c, h, w) = src.dim();
    let (nw, nh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = Array3::from_elem((c, nh, nw), T::zero());
    let mut vals = [T::zero(); 4];
    for ch in 0..c {
        for y in 0..nh {
            for x in 0..nw {
                let mut n = 0;
                for yy in 2 * y..(2 * y + 2).min(h) {
                    for xx in 2 * x..(2 * x + 2).min(w) {
                        vals[n] = src[[ch, yy, xx]];
                        n += 1;
                    }
                }
                out[[ch, y, x]] = block_mean(&vals[..n]);
            }
        }
    }
    out
}

fn box_reduce<T: Scalar>(mut src: Array3<T>, k: u32, width: usize, height: usize) -> Array3<T> {
    for _ in 0..k {
        src = halve(src.view());
    }
    if src.dim().1 == height && src.dim().2 == width {
        src
    } else {
        crop_array(src.view(), Window::full(width, height))
    }
}

/// Rounding slack when deciding whether a bilinear sample lies on the
/// source's pixel-centre hull.
const EDGE_TOL: f64 = 1e-9;

fn resample<T: Scalar>(
    src: ArrayView3<'_, T>,
    transform: &Affine,
    interp: Interpolation,
    width: usize,
    height: usize,
) -> Array3<T> {
    let inv = transform.invert().expect("warp transforms are invertible");
    let (c, sh, sw) = src.dim();
    let mut out = Array3::from_elem((c, height, width), T::nan());
    // rows are independent; split the output by row
    let mut rows: Vec<Array3<T>> = (0..height)
        .into_par_iter()
        .map(|oy| {
            let mut row = Array3::from_elem((c, 1, width), T::nan());
            for ox in 0..width {
                let (px, py) = inv.apply(ox as f64 + 0.5, oy as f64 + 0.5);
                match interp {
                    Interpolation::Nearest => {
                        let (ix, iy) = (px.floor(), py.floor());
                        if ix >= 0.0 && iy >= 0.0 && ix < sw as f64 && iy < sh as f64 {
                            for ch in 0..c {
                                row[[ch, 0, ox]] = src[[ch, iy as usize, ix as usize]];
                            }
                        }
                    }
                    Interpolation::Bilinear => {
                        let (u, v) = (px - 0.5, py - 0.5);
                        let (umax, vmax) = ((sw - 1) as f64, (sh - 1) as f64);
                        if u < -EDGE_TOL || v < -EDGE_TOL || u > umax + EDGE_TOL || v > vmax + EDGE_TOL {
                            continue;
                        }
                        let (u, v) = (u.clamp(0.0, umax), v.clamp(0.0, vmax));
                        let (i0, j0) = (u.floor() as usize, v.floor() as usize);
                        let (fx, fy) = (u - i0 as f64, v - j0 as f64);
                        let (tx, ty) = (T::lit(fx), T::lit(fy));
                        for ch in 0..c {
                            let rowval = |j: usize| {
                                let a = src[[ch, j, i0]];
                                if fx == 0.0 {
                                    a
                                } else {
                                    a * (T::one() - tx) + src[[ch, j, i0 + 1]] * tx
                                }
                            };
                            row[[ch, 0, ox]] = if fy == 0.0 {
                                rowval(j0)
                            } else {
                                rowval(j0) * (T::one() - ty) + rowval(j0 + 1) * ty
                            };
                        }
                    }
                }
            }
            row
        })
        .collect();
    for (oy, row) in rows.iter_mut().enumerate() {
        out.slice_mut(s![.., oy..oy + 1, ..]).assign(row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{write_raster, RasterData, RasterParams};
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use tempfile::TempDir;

    fn ramp(w: usize, h: usize) -> Array3<f32> {
        Array3::from_shape_fn((1, h, w), |(_, y, x)| (y * w + x) as f32)
    }

    fn node(dir: &TempDir, a: Array3<f32>, levels: usize) -> DelayedNode {
        let p = dir.path().join("r.tpr");
        write_raster(&p, &RasterData::F32(a), RasterParams::default().tile(8).levels(levels)).unwrap();
        DelayedNode::open(&p, 0).unwrap()
    }

    #[test]
    fn identity_warp_copies() {
        let dir = TempDir::new().unwrap();
        let n = node(&dir, ramp(5, 4), 1);
        let a = n.clone().evaluate::<f64>().unwrap();
        for interp in [Interpolation::Nearest, Interpolation::Bilinear] {
            let w = n.clone().warp(Affine::identity(), interp, 5, 4).unwrap();
            assert_eq!(w.evaluate::<f64>().unwrap(), a);
        }
    }

    #[test]
    fn bilinear_half_pixel_shift_averages_neighbours() {
        let dir = TempDir::new().unwrap();
        let n = node(&dir, ramp(4, 1), 1);
        let out = n.warp(Affine::translate(-0.5, 0.0), Interpolation::Bilinear, 4, 1).unwrap();
        let v = out.evaluate::<f64>().unwrap();
        assert_abs_diff_eq!(v[[0, 0, 0]], 0.5);
        assert_abs_diff_eq!(v[[0, 0, 2]], 2.5);
        // sample at u = 3.5 is outside the center hull
        assert!(v[[0, 0, 3]].is_nan());
    }

    #[test]
    fn nearest_upscale_replicates() {
        let dir = TempDir::new().unwrap();
        let n = node(&dir, ramp(2, 2), 1);
        let v = n.warp(Affine::scale(2.0), Interpolation::Nearest, 4, 4).unwrap().evaluate::<f64>().unwrap();
        assert_eq!(v[[0, 0, 1]], 0.0);
        assert_eq!(v[[0, 1, 2]], 1.0);
        assert_eq!(v[[0, 3, 3]], 3.0);
    }

    #[test]
    fn half_scale_bilinear_equals_box_mean() {
        let dir = TempDir::new().unwrap();
        let n = node(&dir, ramp(6, 4), 1);
        let v = n.warp(Affine::scale(0.5), Interpolation::Bilinear, 3, 2).unwrap().evaluate::<f64>().unwrap();
        // block (0..2, 0..2) of the ramp: 0, 1, 6, 7
        assert_abs_diff_eq!(v[[0, 0, 0]], 3.5);
        assert_abs_diff_eq!(v[[0, 1, 2]], (16.0 + 17.0 + 22.0 + 23.0) / 4.0);
    }

    #[test]
    fn half_scale_box_matches_general_bilinear_on_even_dims() {
        // at exactly 1/2 the box reduction and pixel-center bilinear agree
        let a = Array3::from_shape_fn((2, 8, 6), |(c, y, x)| ((c * 7 + y * 3 + x * x) % 11) as f64 * 0.25);
        let boxed = box_reduce(a.clone(), 1, 3, 4);
        let general = resample(a.view(), &Affine::scale(0.5), Interpolation::Bilinear, 3, 4);
        for (x, y) in boxed.iter().zip(general.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn crop_outside_is_nan() {
        let dir = TempDir::new().unwrap();
        let n = node(&dir, ramp(3, 3), 1);
        let v = n.crop(-1, 1, 3, 3).unwrap().evaluate::<f64>().unwrap();
        assert!(v[[0, 0, 0]].is_nan());
        assert_eq!(v[[0, 0, 1]], 3.0);
        assert!(v[[0, 2, 2]].is_nan());
    }

    #[test]
    fn concat_select_dequantize_fill() {
        let dir = TempDir::new().unwrap();
        let n = node(&dir, ramp(2, 2), 1);
        let cat = DelayedNode::concat(vec![n.clone(), n.clone().dequantize(2.0, 1.0)]).unwrap();
        let sel = cat.select(vec![1, 0]).unwrap();
        let v = sel.evaluate::<f64>().unwrap();
        assert_eq!(v[[0, 1, 1]], 7.0);
        assert_eq!(v[[1, 1, 1]], 3.0);
        let filled = n.crop(1, 1, 2, 2).unwrap().nodata_fill(-5.0).evaluate::<f64>().unwrap();
        assert_eq!(filled[[0, 1, 1]], -5.0);
        assert_eq!(filled[[0, 0, 0]], 3.0);
    }

    #[test]
    fn nan_propagates_through_bilinear() {
        let mut a = ramp(4, 4);
        a[[0, 1, 1]] = f32::NAN;
        let dir = TempDir::new().unwrap();
        let n = node(&dir, a, 1);
        let v = n.warp(Affine::translate(-0.5, -0.5), Interpolation::Bilinear, 4, 4).unwrap().evaluate::<f64>().unwrap();
        assert!(v[[0, 0, 0]].is_nan());
        assert!(v[[0, 1, 1]].is_nan());
        assert!(!v[[0, 2, 2]].is_nan());
    }
}
