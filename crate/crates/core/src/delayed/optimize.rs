use serde::Serialize;

use super::{warp_kind, DelayedNode, Interpolation, Window, WarpKind};
use crate::raster::DType;
use crate::Affine;

const MAX_PASSES: usize = 512;

/// What [`optimize`] changed. Node and warp counts never grow.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct OptimizeReport {
    pub nodes_before: usize,
    pub nodes_after: usize,
    pub warps_before: usize,
    pub warps_after: usize,
    /// Adjacent warps composed into one.
    pub warps_fused: usize,
    /// Identity and integer-translation warps turned into crops or dropped.
    pub warps_eliminated: usize,
    /// Crops moved below a warp, concat, select, dequantize or fill, or merged.
    pub crops_pushed: usize,
    /// Crops folded into the window of a load.
    pub loads_windowed: usize,
    /// Power-of-two downscales answered from a coarser pyramid level.
    pub overviews_substituted: usize,
    pub passes: usize,
}

/// Rewrites `node` into an equivalent tree: same dims, channels and
/// evaluated values (up to floating-point reassociation).
pub fn optimize(node: &DelayedNode) -> (DelayedNode, OptimizeReport) {
    let before = node.node_count();
    let (mut out, mut report) = Rewriter::run(node, true);
    if out.node_count() > before {
        // crops fanned out through a concat without reaching loads
        (out, report) = Rewriter::run(node, false);
    }
    report.nodes_before = before;
    report.nodes_after = out.node_count();
    report.warps_before = node.warp_count();
    report.warps_after = out.warp_count();
    (out, report)
}

struct Rewriter {
    report: OptimizeReport,
    push_concat: bool,
    changed: bool,
}

impl Rewriter {
    fn run(node: &DelayedNode, push_concat: bool) -> (DelayedNode, OptimizeReport) {
        let mut rw = Rewriter {
            report: OptimizeReport::default(),
            push_concat,
            changed: false,
        };
        let mut cur = node.clone();
        for _ in 0..MAX_PASSES {
            rw.changed = false;
            rw.report.passes += 1;
            cur = rw.pass(cur);
            if !rw.changed {
                break;
            }
        }
        (cur, rw.report)
    }

    /// Post-order: children first, then at most one rule at this node.
    fn pass(&mut self, node: DelayedNode) -> DelayedNode {
        let node = match node {
            DelayedNode::Load { .. } => node,
            DelayedNode::ChannelConcat { children } => DelayedNode::ChannelConcat {
                children: children.into_iter().map(|c| self.pass(c)).collect(),
            },
            DelayedNode::Warp { child, transform, interpolation, width, height } => DelayedNode::Warp {
                child: Box::new(self.pass(*child)),
                transform,
                interpolation,
                width,
                height,
            },
            DelayedNode::Crop { child, window } => DelayedNode::Crop { child: Box::new(self.pass(*child)), window },
            DelayedNode::ChannelSelect { child, channels } => {
                DelayedNode::ChannelSelect { child: Box::new(self.pass(*child)), channels }
            }
            DelayedNode::Dequantize { child, scale, offset } => {
                DelayedNode::Dequantize { child: Box::new(self.pass(*child)), scale, offset }
            }
            DelayedNode::NodataFill { child, value } => {
                DelayedNode::NodataFill { child: Box::new(self.pass(*child)), value }
            }
        };
        match self.step(node) {
            Ok(n) => {
                self.changed = true;
                n
            }
            Err(n) => n,
        }
    }

    /// `Ok` with the rewritten node if a rule fired, `Err` with the input otherwise.
    fn step(&mut self, node: DelayedNode) -> Result<DelayedNode, DelayedNode> {
        match node {
            DelayedNode::Warp { child, transform, interpolation, width, height } => {
                if let Some((tx, ty)) = integer_translation(&transform) {
                    self.report.warps_eliminated += 1;
                    let win = Window::new(-tx, -ty, width, height);
                    return Ok(if win == Window::full(child.dims().0, child.dims().1) {
                        *child
                    } else {
                        DelayedNode::Crop { child, window: win }
                    });
                }
                let kind = warp_kind(&transform, interpolation);
                match *child {
                    DelayedNode::Warp { child: inner, transform: t2, interpolation: i2, width: w2, height: h2 } => {
                        match fuse(&transform, interpolation, kind, &t2, i2, w2, h2, inner.dims()) {
                            Some((t, i, domain)) => {
                                self.report.warps_fused += 1;
                                let (iw, ih) = inner.dims();
                                let src = if domain == Window::full(iw, ih) {
                                    *inner
                                } else {
                                    DelayedNode::Crop { child: inner, window: domain }
                                };
                                Ok(DelayedNode::Warp { child: Box::new(src), transform: t, interpolation: i, width, height })
                            }
                            None => Err(DelayedNode::Warp {
                                child: Box::new(DelayedNode::Warp {
                                    child: inner,
                                    transform: t2,
                                    interpolation: i2,
                                    width: w2,
                                    height: h2,
                                }),
                                transform,
                                interpolation,
                                width,
                                height,
                            }),
                        }
                    }
                    DelayedNode::Load { source, level, window, nodata } => {
                        let WarpKind::Box(k) = kind else {
                            return Err(rebuild_warp(
                                DelayedNode::Load { source, level, window, nodata },
                                transform,
                                interpolation,
                                width,
                                height,
                            ));
                        };
                        let hd = *source.header();
                        let f = 1i64 << k;
                        let (lw, lh) = hd.level_dims(level);
                        let aligned = |o: i64, n: usize, full: usize| {
                            o % f == 0 && (o + n as i64 == full as i64 || n as i64 % f == 0)
                        };
                        let ok = hd.dtype == DType::F32
                            && hd.nodata.is_none()
                            && nodata.is_none()
                            && level + (k as usize) < hd.num_levels
                            && window.within(lw, lh)
                            && aligned(window.x0, window.width, lw)
                            && aligned(window.y0, window.height, lh);
                        if !ok {
                            return Err(rebuild_warp(
                                DelayedNode::Load { source, level, window, nodata },
                                transform,
                                interpolation,
                                width,
                                height,
                            ));
                        }
                        self.report.overviews_substituted += 1;
                        let coarse = Window::new(
                            window.x0 / f,
                            window.y0 / f,
                            window.width.div_ceil(f as usize),
                            window.height.div_ceil(f as usize),
                        );
                        let load = DelayedNode::Load { source, level: level + k as usize, window: coarse, nodata };
                        Ok(if (coarse.width, coarse.height) == (width, height) {
                            load
                        } else {
                            DelayedNode::Crop { child: Box::new(load), window: Window::full(width, height) }
                        })
                    }
                    other => Err(rebuild_warp(other, transform, interpolation, width, height)),
                }
            }
            DelayedNode::Crop { child, window } => {
                let (cw, ch) = child.dims();
                if window == Window::full(cw, ch) {
                    self.report.crops_pushed += 1;
                    return Ok(*child);
                }
                let contained = window.within(cw, ch);
                match *child {
                    DelayedNode::Load { source, level, window: lw, nodata } if contained => {
                        self.report.loads_windowed += 1;
                        Ok(DelayedNode::Load {
                            source,
                            level,
                            window: Window::new(lw.x0 + window.x0, lw.y0 + window.y0, window.width, window.height),
                            nodata,
                        })
                    }
                    DelayedNode::Crop { child: inner, window: w2 } if contained => {
                        self.report.crops_pushed += 1;
                        Ok(DelayedNode::Crop {
                            child: inner,
                            window: Window::new(w2.x0 + window.x0, w2.y0 + window.y0, window.width, window.height),
                        })
                    }
                    DelayedNode::ChannelConcat { children } if self.push_concat => {
                        self.report.crops_pushed += 1;
                        Ok(DelayedNode::ChannelConcat {
                            children: children
                                .into_iter()
                                .map(|c| DelayedNode::Crop { child: Box::new(c), window })
                                .collect(),
                        })
                    }
                    DelayedNode::ChannelSelect { child: inner, channels } => {
                        self.report.crops_pushed += 1;
                        Ok(DelayedNode::ChannelSelect {
                            child: Box::new(DelayedNode::Crop { child: inner, window }),
                            channels,
                        })
                    }
                    DelayedNode::Dequantize { child: inner, scale, offset } => {
                        self.report.crops_pushed += 1;
                        Ok(DelayedNode::Dequantize {
                            child: Box::new(DelayedNode::Crop { child: inner, window }),
                            scale,
                            offset,
                        })
                    }
                    DelayedNode::NodataFill { child: inner, value } if contained => {
                        self.report.crops_pushed += 1;
                        Ok(DelayedNode::NodataFill {
                            child: Box::new(DelayedNode::Crop { child: inner, window }),
                            value,
                        })
                    }
                    DelayedNode::Warp { child: inner, transform, interpolation, width, height } if contained => {
                        match crop_through_warp(&transform, interpolation, inner.dims(), window) {
                            Some((footprint, t)) => {
                                self.report.crops_pushed += 1;
                                Ok(DelayedNode::Warp {
                                    child: Box::new(DelayedNode::Crop { child: inner, window: footprint }),
                                    transform: t,
                                    interpolation,
                                    width: window.width,
                                    height: window.height,
                                })
                            }
                            None => Err(DelayedNode::Crop {
                                child: Box::new(rebuild_warp(*inner, transform, interpolation, width, height)),
                                window,
                            }),
                        }
                    }
                    other => Err(DelayedNode::Crop { child: Box::new(other), window }),
                }
            }
            other => Err(other),
        }
    }
}

fn rebuild_warp(child: DelayedNode, transform: Affine, interpolation: Interpolation, width: usize, height: usize) -> DelayedNode {
    DelayedNode::Warp {
        child: Box::new(child),
        transform,
        interpolation,
        width,
        height,
    }
}

fn is_int(v: f64) -> bool {
    v.is_finite() && v.fract() == 0.0 && v.abs() < 1e15
}

fn integer_translation(t: &Affine) -> Option<(i64, i64)> {
    (t.a == 1.0 && t.b == 0.0 && t.d == 0.0 && t.e == 1.0 && is_int(t.c) && is_int(t.f)).then_some((t.c as i64, t.f as i64))
}

/// Signed permutation linear part with integer translation.
fn is_lattice(t: &Affine, allow_flips: bool) -> bool {
    let unit = |v: f64| v == 1.0 || (allow_flips && v == -1.0);
    let lin = (unit(t.a) && t.b == 0.0 && t.d == 0.0 && unit(t.e)) || (t.a == 0.0 && unit(t.b) && unit(t.d) && t.e == 0.0);
    lin && is_int(t.c) && is_int(t.f)
}

/// `Some(n)` for `scale(n)` then an integer translation, `n` a power of two.
fn pow2_upscale(t: &Affine) -> Option<u64> {
    let ok = t.b == 0.0 && t.d == 0.0 && t.a == t.e && t.a >= 2.0 && is_int(t.a) && is_int(t.c) && is_int(t.f);
    (ok && (t.a as u64).is_power_of_two()).then_some(t.a as u64)
}

/// Exact composition of `outer ∘ inner`, with the child sub-window the
/// inner warp actually covers. Only lattice-preserving cases qualify,
/// so sampling positions land on the same source pixels.
#[allow(clippy::too_many_arguments)]
fn fuse(
    t1: &Affine,
    i1: Interpolation,
    k1: WarpKind,
    t2: &Affine,
    i2: Interpolation,
    w2: usize,
    h2: usize,
    (xw, xh): (usize, usize),
) -> Option<(Affine, Interpolation, Window)> {
    let interp = match (k1, i1) {
        (WarpKind::General, Interpolation::Nearest) if is_lattice(t2, false) => Interpolation::Nearest,
        (WarpKind::General, Interpolation::Bilinear) if is_lattice(t2, true) => Interpolation::Bilinear,
        (WarpKind::General, Interpolation::Nearest) if i2 == Interpolation::Nearest && pow2_upscale(t2).is_some() => {
            Interpolation::Nearest
        }
        (WarpKind::Box(k), _) if i2 == Interpolation::Nearest && pow2_upscale(t2) == Some(1 << k) => {
            let n = (1u64 << k) as f64;
            let ok = (t2.c / n).fract() == 0.0
                && (t2.f / n).fract() == 0.0
                && (w2 as u64).is_multiple_of(1 << k)
                && (h2 as u64).is_multiple_of(1 << k);
            if !ok {
                return None;
            }
            Interpolation::Nearest
        }
        _ => return None,
    };
    // preimage of the inner output rectangle
    let inv = t2.invert().ok()?;
    let pts = [(0.0, 0.0), (w2 as f64, 0.0), (0.0, h2 as f64), (w2 as f64, h2 as f64)].map(|(x, y)| inv.apply(x, y));
    let xs = pts.map(|p| p.0);
    let ys = pts.map(|p| p.1);
    let (x0, x1) = (xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = (ys.iter().cloned().fold(f64::INFINITY, f64::min), ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    if ![x0, x1, y0, y1].iter().all(|v| is_int(*v)) {
        return None;
    }
    let (x0, x1) = ((x0 as i64).max(0), (x1 as i64).min(xw as i64));
    let (y0, y1) = ((y0 as i64).max(0), (y1 as i64).min(xh as i64));
    if x0 >= x1 || y0 >= y1 {
        return None;
    }
    let domain = Window::new(x0, y0, (x1 - x0) as usize, (y1 - y0) as usize);
    let t = t1.compose(t2).compose(&Affine::translate(x0 as f64, y0 as f64));
    // a general warp must not turn into a box reduction by accident
    if k1 == WarpKind::General && warp_kind(&t, interp) != WarpKind::General {
        return None;
    }
    Some((t, interp, domain))
}

/// Child footprint of an output crop and the re-based transform.
fn crop_through_warp(t: &Affine, interp: Interpolation, (xw, xh): (usize, usize), win: Window) -> Option<(Window, Affine)> {
    let kind = warp_kind(t, interp);
    let (fx0, fy0, fx1, fy1) = match kind {
        WarpKind::Box(k) => {
            let f = 1i64 << k;
            (win.x0 * f, win.y0 * f, (win.x1() * f).min(xw as i64), (win.y1() * f).min(xh as i64))
        }
        WarpKind::General => {
            let inv = t.invert().ok()?;
            let cx = [win.x0 as f64 + 0.5, win.x1() as f64 - 0.5];
            let cy = [win.y0 as f64 + 0.5, win.y1() as f64 - 0.5];
            let pts = [(cx[0], cy[0]), (cx[1], cy[0]), (cx[0], cy[1]), (cx[1], cy[1])].map(|(x, y)| inv.apply(x, y));
            let minx = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let maxx = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            let miny = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let maxy = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            // one pixel of margin beyond the bilinear support on each side
            let lo = |v: f64| (v - 0.5).floor() as i64 - 1;
            let hi = |v: f64| (v - 0.5).floor() as i64 + 3;
            (lo(minx).max(0), lo(miny).max(0), hi(maxx).min(xw as i64), hi(maxy).min(xh as i64))
        }
    };
    if fx0 >= fx1 || fy0 >= fy1 {
        return None;
    }
    let footprint = Window::new(fx0, fy0, (fx1 - fx0) as usize, (fy1 - fy0) as usize);
    let t2 = match kind {
        WarpKind::Box(_) => *t,
        WarpKind::General => {
            let t2 = Affine::translate(-win.x0 as f64, -win.y0 as f64)
                .compose(t)
                .compose(&Affine::translate(fx0 as f64, fy0 as f64));
            if warp_kind(&t2, interp) != WarpKind::General {
                return None;
            }
            t2
        }
    };
    Some((footprint, t2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{write_raster, RasterData, RasterParams};
    use ndarray::Array3;
    use std::sync::Arc;
    use tempfile::TempDir;

    fn raster(dir: &TempDir, name: &str, c: usize, w: usize, h: usize, levels: usize) -> Arc<crate::raster::RasterReader> {
        let a = Array3::from_shape_fn((c, h, w), |(k, y, x)| ((k * 31 + y * 7 + x * 3) % 17) as f32 / 16.0);
        let p = dir.path().join(name);
        write_raster(&p, &RasterData::F32(a), RasterParams::default().tile(16).levels(levels)).unwrap();
        Arc::new(crate::raster::RasterReader::open(&p).unwrap())
    }

    fn assert_same(a: &DelayedNode, b: &DelayedNode) {
        assert_eq!(a.dims(), b.dims());
        assert_eq!(a.channels(), b.channels());
        let (x, y) = (a.evaluate::<f32>().unwrap(), b.evaluate::<f32>().unwrap());
        for (p, q) in x.iter().zip(y.iter()) {
            assert!(p.is_nan() == q.is_nan() && (p.is_nan() || (p - q).abs() <= 1e-6), "{p} vs {q}");
        }
    }

    #[test]
    fn up_then_box_down_fuses_away() {
        let dir = TempDir::new().unwrap();
        let src = raster(&dir, "a.tpr", 1, 20, 12, 1);
        let n = DelayedNode::load(src, 0)
            .unwrap()
            .warp(Affine::scale(2.0), Interpolation::Nearest, 40, 24)
            .unwrap()
            .warp(Affine::scale(0.5), Interpolation::Bilinear, 20, 12)
            .unwrap();
        let (opt, rep) = optimize(&n);
        assert_eq!(opt.warp_count(), 0);
        assert!(matches!(opt, DelayedNode::Load { .. }));
        assert_eq!(rep.warps_fused, 1);
        assert_same(&n, &opt);
    }

    #[test]
    fn lossy_down_then_up_is_not_fused() {
        let dir = TempDir::new().unwrap();
        let src = raster(&dir, "a.tpr", 1, 20, 12, 1);
        let n = DelayedNode::load(src, 0)
            .unwrap()
            .warp(Affine::scale(0.5), Interpolation::Bilinear, 10, 6)
            .unwrap()
            .warp(Affine::scale(2.0), Interpolation::Bilinear, 20, 12)
            .unwrap();
        let (opt, rep) = optimize(&n);
        assert_eq!(rep.warps_fused, 0);
        assert_eq!(opt.warp_count(), 2);
        assert_same(&n, &opt);
    }

    #[test]
    fn crop_of_downscale_becomes_overview_window() {
        let dir = TempDir::new().unwrap();
        let src = raster(&dir, "a.tpr", 2, 64, 48, 3);
        let n = DelayedNode::load(src.clone(), 0)
            .unwrap()
            .warp(Affine::scale(0.25), Interpolation::Bilinear, 16, 12)
            .unwrap()
            .crop(4, 2, 8, 8)
            .unwrap();
        let (opt, rep) = optimize(&n);
        match &opt {
            DelayedNode::Load { level, window, .. } => {
                assert_eq!(*level, 2);
                assert_eq!(*window, Window::new(4, 2, 8, 8));
            }
            other => panic!("unexpected tree\n{}", other.dump()),
        }
        assert_eq!(rep.overviews_substituted, 1);
        assert!(rep.nodes_after < rep.nodes_before);
        assert_same(&n, &opt);
        let (a, b) = (n.evaluate::<f32>().unwrap(), opt.evaluate::<f32>().unwrap());
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn overview_needs_aligned_window() {
        let dir = TempDir::new().unwrap();
        let src = raster(&dir, "a.tpr", 1, 33, 20, 2);
        let n = DelayedNode::load(src, 0)
            .unwrap()
            .crop(1, 0, 30, 20)
            .unwrap()
            .warp(Affine::scale(0.5), Interpolation::Bilinear, 15, 10)
            .unwrap();
        let (opt, rep) = optimize(&n);
        assert_eq!(rep.overviews_substituted, 0);
        assert_eq!(rep.loads_windowed, 1);
        assert_same(&n, &opt);
    }

    #[test]
    fn crop_through_general_warp() {
        let dir = TempDir::new().unwrap();
        let src = raster(&dir, "a.tpr", 1, 30, 30, 1);
        // dyadic inverse, so re-based sample positions are exact
        let t = Affine::new(1.0, 1.0, 1.5, -1.0, 1.0, 20.0);
        for interp in [Interpolation::Nearest, Interpolation::Bilinear] {
            let n = DelayedNode::load(src.clone(), 0)
                .unwrap()
                .warp(t, interp, 64, 52)
                .unwrap()
                .crop(20, 18, 11, 9)
                .unwrap();
            let (opt, rep) = optimize(&n);
            assert_eq!(rep.crops_pushed, 1);
            assert_eq!(rep.loads_windowed, 1);
            assert_same(&n, &opt);
        }
    }

    #[test]
    fn identity_and_translation_warps_vanish() {
        let dir = TempDir::new().unwrap();
        let src = raster(&dir, "a.tpr", 1, 10, 10, 1);
        let n = DelayedNode::load(src, 0)
            .unwrap()
            .warp(Affine::identity(), Interpolation::Bilinear, 10, 10)
            .unwrap()
            .warp(Affine::translate(-2.0, 3.0), Interpolation::Nearest, 8, 8)
            .unwrap();
        let (opt, rep) = optimize(&n);
        assert_eq!(rep.warps_eliminated, 2);
        assert_eq!(opt.warp_count(), 0);
        assert_same(&n, &opt);
    }

    #[test]
    fn crop_fans_through_concat_into_loads() {
        let dir = TempDir::new().unwrap();
        let a = raster(&dir, "a.tpr", 2, 16, 16, 1);
        let b = raster(&dir, "b.tpr", 1, 16, 16, 1);
        let n = DelayedNode::concat(vec![DelayedNode::load(a, 0).unwrap(), DelayedNode::load(b, 0).unwrap()])
            .unwrap()
            .select(vec![2, 0])
            .unwrap()
            .crop(3, 3, 4, 4)
            .unwrap();
        let (opt, rep) = optimize(&n);
        assert_eq!(rep.nodes_after, 4);
        assert_eq!(rep.loads_windowed, 2);
        assert_same(&n, &opt);
    }

    #[test]
    fn stuck_concat_crops_fall_back() {
        let dir = TempDir::new().unwrap();
        let a = raster(&dir, "a.tpr", 1, 16, 16, 1);
        // fills block the crop when it is not contained
        let leaf = DelayedNode::load(a, 0).unwrap().nodata_fill(0.0);
        let n = DelayedNode::concat(vec![leaf.clone(), leaf.clone(), leaf])
            .unwrap()
            .crop(-2, -2, 8, 8)
            .unwrap();
        let (opt, rep) = optimize(&n);
        assert!(rep.nodes_after <= rep.nodes_before);
        assert_same(&n, &opt);
    }
}
