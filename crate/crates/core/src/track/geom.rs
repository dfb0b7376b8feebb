//! Pixel-set geometry: connected components, boundary contours and
//! polygon rasterization.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

/// Axis-aligned polygon with optional holes; vertices are `[x, y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub exterior: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub holes: Vec<Vec<[f64; 2]>>,
}

fn signed_area(ring: &[[f64; 2]]) -> f64 {
    let n = ring.len();
    (0..n)
        .map(|i| {
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

impl Polygon {
    pub fn area(&self) -> f64 {
        signed_area(&self.exterior).abs() - self.holes.iter().map(|h| signed_area(h).abs()).sum::<f64>()
    }

    pub fn scaled(&self, f: f64) -> Polygon {
        let s = |r: &Vec<[f64; 2]>| r.iter().map(|p| [p[0] * f, p[1] * f]).collect();
        Polygon { exterior: s(&self.exterior), holes: self.holes.iter().map(s).collect() }
    }

    fn rings(&self) -> impl Iterator<Item = &Vec<[f64; 2]>> {
        std::iter::once(&self.exterior).chain(&self.holes)
    }

    /// Pixels of a `height×width` grid whose centres fall inside the polygon
    /// after scaling its coordinates by `scale` (even-odd rule).
    pub fn mask(&self, width: usize, height: usize, scale: f64) -> Array2<bool> {
        let mut out = Array2::from_elem((height, width), false);
        let mut xs = Vec::new();
        for r in 0..height {
            let y = r as f64 + 0.5;
            xs.clear();
            for ring in self.rings() {
                let n = ring.len();
                for i in 0..n {
                    let (a, b) = (ring[i], ring[(i + 1) % n]);
                    let (ay, by) = (a[1] * scale, b[1] * scale);
                    if (ay <= y) != (by <= y) {
                        let t = (y - ay) / (by - ay);
                        xs.push((a[0] + t * (b[0] - a[0])) * scale);
                    }
                }
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                // centres c + 0.5 in [x0, x1)
                let c0 = (pair[0] - 0.5).ceil().max(0.0) as usize;
                let c1 = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(width);
                for c in c0..c1 {
                    out[[r, c]] = true;
                }
            }
        }
        out
    }
}

const NEIGHBORS_8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
pub(crate) const NEIGHBORS_4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

pub(crate) fn step(r: usize, c: usize, d: (isize, isize), h: usize, w: usize) -> Option<(usize, usize)> {
    let (nr, nc) = (r as isize + d.0, c as isize + d.1);
    (nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w).then_some((nr as usize, nc as usize))
}

/// 8-connected component labels (0 is background, components numbered from
/// 1 in row-major order of their first pixel) and the component count.
pub fn label_components(mask: ArrayView2<'_, bool>) -> (Array2<u32>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::zeros((h, w));
    let mut n = 0u32;
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] || labels[[r, c]] != 0 {
                continue;
            }
            n += 1;
            labels[[r, c]] = n;
            queue.push_back((r, c));
            while let Some((pr, pc)) = queue.pop_front() {
                for d in NEIGHBORS_8 {
                    if let Some((qr, qc)) = step(pr, pc, d, h, w) {
                        if mask[[qr, qc]] && labels[[qr, qc]] == 0 {
                            labels[[qr, qc]] = n;
                            queue.push_back((qr, qc));
                        }
                    }
                }
            }
        }
    }
    (labels, n as usize)
}

// Edge directions in (dx, dy), y pointing down the rows.
const DIRS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

fn dir_index(d: (i64, i64)) -> usize {
    DIRS.iter().position(|&e| e == d).expect("unit direction")
}

/// Traces the pixel-edge boundary of `mask` into closed rings, foreground
/// kept on the left on screen. At diagonal saddles the trace turns right, so
/// diagonally touching pixels share a ring (8-connectivity).
pub fn trace_rings(mask: ArrayView2<'_, bool>) -> Vec<Vec<[f64; 2]>> {
    let (h, w) = mask.dim();
    let (vh, vw) = (h + 1, w + 1);
    let fg = |r: i64, c: i64| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask[[r as usize, c as usize]];
    // out[v] = bitmask of outgoing directions at vertex v = (x, y)
    let mut out = vec![0u8; vh * vw];
    let mut add = |x: i64, y: i64, d: (i64, i64)| out[y as usize * vw + x as usize] |= 1 << dir_index(d);
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if !fg(r, c) {
                continue;
            }
            if !fg(r - 1, c) {
                add(c + 1, r, (-1, 0));
            }
            if !fg(r + 1, c) {
                add(c, r + 1, (1, 0));
            }
            if !fg(r, c - 1) {
                add(c, r, (0, 1));
            }
            if !fg(r, c + 1) {
                add(c + 1, r + 1, (0, -1));
            }
        }
    }
    let orig = out.clone();
    // Outgoing direction after arriving at `v` heading `d`.
    let next = |v: usize, d: (i64, i64)| {
        let bits = orig[v];
        if bits.count_ones() > 1 {
            (-d.1, d.0)
        } else {
            DIRS[bits.trailing_zeros() as usize]
        }
    };
    let mut rings = Vec::new();
    for start in 0..out.len() {
        while out[start] != 0 {
            let (sx, sy) = ((start % vw) as i64, (start / vw) as i64);
            let d0 = DIRS[out[start].trailing_zeros() as usize];
            let (mut x, mut y, mut d) = (sx, sy, d0);
            let mut verts: Vec<[i64; 2]> = Vec::new();
            loop {
                let v = y as usize * vw + x as usize;
                debug_assert!(out[v] & (1 << dir_index(d)) != 0, "edge used twice");
                out[v] &= !(1 << dir_index(d));
                verts.push([x, y]);
                x += d.0;
                y += d.1;
                let v = y as usize * vw + x as usize;
                d = next(v, d);
                if v == start && d == d0 {
                    break;
                }
            }
            rings.push(simplify(&verts));
        }
    }
    rings
}

/// Drops collinear vertices.
fn simplify(verts: &[[i64; 2]]) -> Vec<[f64; 2]> {
    let n = verts.len();
    (0..n)
        .filter(|&i| {
            let (p, q, r) = (verts[(i + n - 1) % n], verts[i], verts[(i + 1) % n]);
            (q[0] - p[0]) * (r[1] - q[1]) != (q[1] - p[1]) * (r[0] - q[0])
        })
        .map(|i| [verts[i][0] as f64, verts[i][1] as f64])
        .collect()
}

/// Polygon of a single 8-connected pixel set: the largest ring is the
/// exterior, the others are holes.
pub fn polygon_of(mask: ArrayView2<'_, bool>) -> Polygon {
    let mut rings = trace_rings(mask);
    if rings.is_empty() {
        return Polygon { exterior: Vec::new(), holes: Vec::new() };
    }
    let big = (0..rings.len())
        .max_by(|&a, &b| signed_area(&rings[a]).abs().total_cmp(&signed_area(&rings[b]).abs()).then(b.cmp(&a)))
        .unwrap();
    let exterior = rings.remove(big);
    Polygon { exterior, holes: rings }
}

/// Polygon of the pixels labelled `label`, traced inside their bounding box.
pub fn component_polygon(labels: ArrayView2<'_, u32>, label: u32) -> Polygon {
    let (h, w) = labels.dim();
    let (mut r0, mut r1, mut c0, mut c1) = (h, 0, w, 0);
    for ((r, c), &l) in labels.indexed_iter() {
        if l == label {
            r0 = r0.min(r);
            r1 = r1.max(r + 1);
            c0 = c0.min(c);
            c1 = c1.max(c + 1);
        }
    }
    if r0 >= r1 {
        return Polygon { exterior: Vec::new(), holes: Vec::new() };
    }
    let sub = labels.slice(ndarray::s![r0..r1, c0..c1]).mapv(|l| l == label);
    let p = polygon_of(sub.view());
    let shift = |ring: Vec<[f64; 2]>| ring.into_iter().map(|v| [v[0] + c0 as f64, v[1] + r0 as f64]).collect();
    Polygon { exterior: shift(p.exterior), holes: p.holes.into_iter().map(shift).collect() }
}
