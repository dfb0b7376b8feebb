use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::{Array2, ArrayView2, ArrayView3, ArrayView4, Axis};

use super::bas::masked_mean;
use super::geom::{component_polygon, label_components, step, Polygon, NEIGHBORS_4};
use super::{Observation, Phase, Result, TrackError};
use crate::manifest::time::normalize_timestamp;
use crate::Scalar;

/// Active Construction channel index in the class volume.
const ACTIVE: usize = 2;

/// One watershed region, in grid pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub seed: (usize, usize),
    pub pixels: usize,
    pub polygon: Polygon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    /// Response field: time-max of Active Construction × ac-salient, zero
    /// outside the mask.
    pub response: Array2<f64>,
    /// Region label per pixel, 0 outside the mask (1-based, seed order).
    pub labels: Array2<u32>,
    pub kept: Vec<Region>,
    pub removed: Vec<Region>,
}

#[derive(PartialEq)]
struct Item {
    level: f64,
    r: usize,
    c: usize,
}

impl Eq for Item {}

impl Ord for Item {
    // max-heap: higher level first, then smaller (row, col)
    fn cmp(&self, o: &Self) -> Ordering {
        self.level.total_cmp(&o.level).then_with(|| (o.r, o.c).cmp(&(self.r, self.c)))
    }
}

impl PartialOrd for Item {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Seeded priority flood restricted to `mask`. A pixel's flood level is the
/// best over 4-connected paths of the smallest response along the path; it
/// joins the seed that reaches it at the highest level, ties to whichever is
/// popped first in (level, row, col) order. Pixels joined to the rest only
/// diagonally are attached afterwards to their strongest labelled neighbour.
pub fn watershed(response: ArrayView2<'_, f64>, mask: ArrayView2<'_, bool>, seeds: &[(usize, usize)]) -> Array2<u32> {
    let (h, w) = response.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut best = Array2::from_elem((h, w), f64::NEG_INFINITY);
    let mut owner = Array2::<u32>::zeros((h, w));
    let mut heap = BinaryHeap::new();
    for (k, &(r, c)) in seeds.iter().enumerate() {
        best[[r, c]] = response[[r, c]];
        owner[[r, c]] = k as u32 + 1;
        heap.push(Item { level: response[[r, c]], r, c });
    }
    while let Some(Item { level, r, c }) = heap.pop() {
        if labels[[r, c]] != 0 || level < best[[r, c]] {
            continue;
        }
        labels[[r, c]] = owner[[r, c]];
        for d in NEIGHBORS_4 {
            let Some((nr, nc)) = step(r, c, d, h, w) else { continue };
            if !mask[[nr, nc]] || labels[[nr, nc]] != 0 {
                continue;
            }
            let nl = level.min(response[[nr, nc]]);
            if nl > best[[nr, nc]] {
                best[[nr, nc]] = nl;
                owner[[nr, nc]] = labels[[r, c]];
                heap.push(Item { level: nl, r: nr, c: nc });
            }
        }
    }
    if seeds.is_empty() {
        return labels;
    }
    loop {
        let mut changed = false;
        for r in 0..h {
            for c in 0..w {
                if !mask[[r, c]] || labels[[r, c]] != 0 {
                    continue;
                }
                let mut pick: Option<(f64, u32)> = None;
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let Some((nr, nc)) = step(r, c, (dr, dc), h, w) else { continue };
                        let l = labels[[nr, nc]];
                        if l != 0 && pick.is_none_or(|(v, _)| response[[nr, nc]] > v) {
                            pick = Some((response[[nr, nc]], l));
                        }
                    }
                }
                if let Some((_, l)) = pick {
                    labels[[r, c]] = l;
                    changed = true;
                }
            }
        }
        if !changed {
            return labels;
        }
    }
}

fn check_volumes<T: Scalar>(class: &ArrayView4<'_, T>, salient: &ArrayView3<'_, T>) -> Result<(usize, usize, usize)> {
    let (t, k, h, w) = class.dim();
    if k != 4 {
        return Err(TrackError::Shape(format!("class volume has {k} channels, expected 4")));
    }
    if salient.dim() != (t, h, w) {
        return Err(TrackError::Shape(format!("ac-salient volume {:?} does not match class volume {:?}", salient.dim(), (t, h, w))));
    }
    Ok((t, h, w))
}

/// Splits the BAS mask into watershed regions seeded at the peaks of the
/// binarized construction response.
pub fn ac_refine<T: Scalar>(
    class: ArrayView4<'_, T>,
    salient: ArrayView3<'_, T>,
    mask: ArrayView2<'_, bool>,
    thresh: f64,
    min_pixels: usize,
) -> Result<Refinement> {
    let (t, h, w) = check_volumes(&class, &salient)?;
    if mask.dim() != (h, w) {
        return Err(TrackError::Shape(format!("mask {:?} does not match frames {:?}", mask.dim(), (h, w))));
    }
    let mut response = Array2::<f64>::zeros((h, w));
    for i in 0..t {
        let a = class.index_axis(Axis(0), i);
        let a = a.index_axis(Axis(0), ACTIVE);
        ndarray::Zip::from(&mut response).and(&a).and(salient.index_axis(Axis(0), i)).and(mask).for_each(|r, &a, &s, &m| {
            let v = a.as_f64() * s.as_f64();
            if m && v > *r {
                *r = v;
            }
        });
    }
    let (comp, n) = label_components(response.mapv(|v| v >= thresh).view());
    let mut seeds: Vec<Option<(usize, usize)>> = vec![None; n];
    for ((r, c), &l) in comp.indexed_iter() {
        if l != 0 {
            let s = &mut seeds[l as usize - 1];
            if s.is_none_or(|(sr, sc)| response[[r, c]] > response[[sr, sc]]) {
                *s = Some((r, c));
            }
        }
    }
    let seeds: Vec<(usize, usize)> = seeds.into_iter().flatten().collect();
    let labels = watershed(response.view(), mask, &seeds);
    let mut counts = vec![0usize; seeds.len() + 1];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    let (mut kept, mut removed) = (Vec::new(), Vec::new());
    for (k, &seed) in seeds.iter().enumerate() {
        let l = k as u32 + 1;
        let region = Region { seed, pixels: counts[l as usize], polygon: component_polygon(labels.view(), l) };
        if region.pixels >= min_pixels {
            kept.push(region);
        } else {
            removed.push(region);
        }
    }
    Ok(Refinement { response, labels, kept, removed })
}

/// Phase scoring for one polygon.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeling {
    /// Maximum ac-salient under the polygon (NaN when no valid pixel).
    pub singular: f64,
    pub observations: Vec<Observation>,
    /// `Ok((start, end))` or a rejection reason.
    pub outcome: std::result::Result<(String, String), String>,
}

pub const LOW_SALIENCE: &str = "low-salience";
pub const NO_ACTIVITY_PHASES: &str = "no-activity-phases";

/// Index of the largest value, ties to the lower index.
fn argmax(v: &[f64]) -> usize {
    (1..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

/// Per-frame phase labels and the site's temporal extent: start at the first
/// Site Preparation frame, end at the last Active Construction frame.
pub fn ac_score_and_label<T: Scalar>(
    mask: ArrayView2<'_, bool>,
    class: ArrayView4<'_, T>,
    salient: ArrayView3<'_, T>,
    timestamps: &[String],
    site_thresh: f64,
    class_thresh: f64,
) -> Result<Labeling> {
    let (t, h, w) = check_volumes(&class, &salient)?;
    if timestamps.len() != t || mask.dim() != (h, w) {
        return Err(TrackError::Shape("timestamps or mask do not match the volumes".into()));
    }
    let mut frames = Vec::with_capacity(t);
    for (i, s) in timestamps.iter().enumerate() {
        frames.push((normalize_timestamp(s).ok_or_else(|| TrackError::Timestamp(s.clone()))?, i));
    }
    frames.sort();
    let mut singular = f64::NAN;
    for (&v, &m) in salient.iter().zip(mask.broadcast((t, h, w)).expect("mask broadcasts")) {
        let v = v.as_f64();
        if m && !v.is_nan() && !(v <= singular) {
            singular = v;
        }
    }
    let mut observations = Vec::new();
    for (ts, i) in &frames {
        let frame = class.index_axis(Axis(0), *i);
        let means: Vec<f64> = (0..4).map(|k| masked_mean(frame.index_axis(Axis(0), k).mapv(|v| v.as_f64()).view(), mask)).collect();
        if means.iter().any(|v| v.is_nan()) {
            continue;
        }
        let k = argmax(&means);
        let phase = if means[k] >= class_thresh { Phase::ALL[k] } else { Phase::NoActivity };
        observations.push(Observation { timestamp: ts.clone(), score: means[k], phase: Some(phase) });
    }
    let outcome = if !(singular >= site_thresh) {
        Err(LOW_SALIENCE.to_string())
    } else {
        let first = |p: Phase| observations.iter().find(|o| o.phase == Some(p)).map(|o| o.timestamp.clone());
        let last = |p: Phase| observations.iter().rev().find(|o| o.phase == Some(p)).map(|o| o.timestamp.clone());
        let (sp, ac) = (Phase::SitePreparation, Phase::ActiveConstruction);
        match (first(sp).or_else(|| first(ac)), last(ac).or_else(|| last(sp))) {
            (Some(a), Some(b)) => Ok(if a <= b { (a, b) } else { (b, a) }),
            _ => Err(NO_ACTIVITY_PHASES.to_string()),
        }
    };
    Ok(Labeling { singular, observations, outcome })
}
