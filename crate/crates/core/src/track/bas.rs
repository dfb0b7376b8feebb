use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, ArrayView3, Axis};

use super::geom::{component_polygon, label_components, Polygon};
use super::{Observation, Result, TrackError};
use crate::manifest::time::{parse_timestamp, format_timestamp};
use crate::Scalar;

/// An extracted component, in the heatmap grid's pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub polygon: Polygon,
    pub pixels: usize,
    /// Square meters.
    pub area: f64,
}

/// NaN-ignoring per-pixel maximum over the leading axis; all-NaN pixels
/// stay NaN.
pub fn max_over_time<T: Scalar>(volume: ArrayView3<'_, T>) -> Array2<f64> {
    volume.fold_axis(Axis(0), f64::NAN, |&acc, &v| {
        let v = v.as_f64();
        if v.is_nan() || v <= acc {
            acc
        } else {
            v
        }
    })
}

/// Components of the time-maximum at or above `binarize`, kept when the
/// area lies within `[min_area, max_area]`.
pub fn bas_extract<T: Scalar>(volume: ArrayView3<'_, T>, gsd: f64, binarize: f64, min_area: f64, max_area: f64) -> Result<Vec<Candidate>> {
    if volume.len_of(Axis(0)) == 0 {
        return Err(TrackError::Shape("saliency volume has no frames".into()));
    }
    if !(gsd > 0.0 && gsd.is_finite()) {
        return Err(TrackError::Config(format!("gsd must be positive, got {gsd}")));
    }
    let peak = max_over_time(volume);
    let mask = peak.mapv(|v| v >= binarize);
    let (labels, n) = label_components(mask.view());
    let mut counts = vec![0usize; n + 1];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    let px_area = gsd * gsd;
    Ok((1..=n)
        .filter_map(|l| {
            let area = counts[l] as f64 * px_area;
            (area >= min_area && area <= max_area).then(|| Candidate {
                polygon: component_polygon(labels.view(), l as u32),
                pixels: counts[l],
                area,
            })
        })
        .collect())
}

/// Temporal assignment for one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct BasTemporal {
    /// Every calendar-year window with its score (NaN when no valid pixel).
    pub windows: Vec<(i32, f64)>,
    /// Surviving windows, stamped with their first frame's time.
    pub observations: Vec<Observation>,
    /// First frame of the first surviving window and last frame of the last;
    /// `None` when nothing survives.
    pub extent: Option<(String, String)>,
}

/// Mean of `values` over `mask`, NaN excluded.
pub(crate) fn masked_mean(values: ArrayView2<'_, f64>, mask: ArrayView2<'_, bool>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (&v, &m) in values.iter().zip(mask) {
        if m && !v.is_nan() {
            s += v;
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Groups frames into calendar years, averages each year's heatmaps
/// (NaN excluded) and scores the mean under `mask`.
pub fn bas_temporal<T: Scalar>(volume: ArrayView3<'_, T>, timestamps: &[String], mask: ArrayView2<'_, bool>, score_thresh: f64) -> Result<BasTemporal> {
    let (t, h, w) = volume.dim();
    if timestamps.len() != t {
        return Err(TrackError::Shape(format!("{} timestamps for {t} frames", timestamps.len())));
    }
    if mask.dim() != (h, w) {
        return Err(TrackError::Shape(format!("mask {:?} does not match frames {:?}", mask.dim(), (h, w))));
    }
    let mut years: BTreeMap<i32, Vec<(chrono::DateTime<chrono::Utc>, usize)>> = BTreeMap::new();
    for (i, s) in timestamps.iter().enumerate() {
        let ts = parse_timestamp(s).ok_or_else(|| TrackError::Timestamp(s.clone()))?;
        years.entry(chrono::Datelike::year(&ts)).or_default().push((ts, i));
    }
    let mut out = BasTemporal { windows: Vec::new(), observations: Vec::new(), extent: None };
    let mut kept: Vec<(String, String)> = Vec::new();
    for (year, mut frames) in years {
        frames.sort();
        let mut sum = Array2::<f64>::zeros((h, w));
        let mut cnt = Array2::<u32>::zeros((h, w));
        for &(_, i) in &frames {
            for ((s, c), &v) in sum.iter_mut().zip(cnt.iter_mut()).zip(volume.index_axis(Axis(0), i)) {
                let v = v.as_f64();
                if !v.is_nan() {
                    *s += v;
                    *c += 1;
                }
            }
        }
        let mean = ndarray::Zip::from(&sum).and(&cnt).map_collect(|&s, &c| if c == 0 { f64::NAN } else { s / c as f64 });
        let score = masked_mean(mean.view(), mask);
        out.windows.push((year, score));
        if score >= score_thresh {
            let first = format_timestamp(&frames[0].0);
            let last = format_timestamp(&frames[frames.len() - 1].0);
            out.observations.push(Observation { timestamp: first.clone(), score, phase: None });
            kept.push((first, last));
        }
    }
    if let (Some(a), Some(b)) = (kept.first(), kept.last()) {
        out.extent = Some((a.0.clone(), b.1.clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Array3};

    #[test]
    fn empty_and_square() {
        let z = Array3::<f64>::zeros((2, 20, 20));
        assert!(bas_extract(z.view(), 10.0, 0.375, 7200.0, 8e6).unwrap().is_empty());
        let mut v = Array3::<f32>::zeros((2, 20, 20));
        v.slice_mut(s![1, 5..15, 3..13]).fill(1.0);
        let c = bas_extract(v.view(), 10.0, 0.375, 7200.0, 8e6).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].area, 10000.0);
        assert_eq!(c[0].polygon.exterior, vec![[3.0, 5.0], [3.0, 15.0], [13.0, 15.0], [13.0, 5.0]]);
    }

    #[test]
    fn area_gate_is_inclusive() {
        for (n, keep) in [(71, false), (72, true)] {
            let mut v = Array3::<f64>::zeros((1, 10, 10));
            for k in 0..n {
                v[[0, k / 10, k % 10]] = 1.0;
            }
            assert_eq!(bas_extract(v.view(), 10.0, 0.375, 7200.0, 8e6).unwrap().len() == 1, keep, "{n}");
        }
    }

    #[test]
    fn yearly_scores_select_extent() {
        let ts: Vec<String> = (0..4).map(|y| format!("{}-06-01T00:00:00Z", 2018 + y)).collect();
        let mut v = Array3::<f64>::zeros((4, 3, 3));
        for (i, s) in [0.1, 0.5, 0.6, 0.2].into_iter().enumerate() {
            v.index_axis_mut(Axis(0), i).fill(s);
        }
        let mask = Array2::from_elem((3, 3), true);
        let r = bas_temporal(v.view(), &ts, mask.view(), 0.3).unwrap();
        assert_eq!(r.extent, Some((ts[1].clone(), ts[2].clone())));
        assert_eq!(r.observations.len(), 2);
        let low = v.mapv(|x| x * 0.1);
        assert_eq!(bas_temporal(low.view(), &ts, mask.view(), 0.3).unwrap().extent, None);
    }

    #[test]
    fn nan_frames_are_skipped_in_the_mean() {
        let ts = vec!["2020-01-01T00:00:00Z".to_string(), "2020-07-01T00:00:00Z".to_string()];
        let mut v = Array3::<f64>::from_elem((2, 1, 2), 0.8);
        v[[0, 0, 0]] = f64::NAN;
        v[[1, 0, 1]] = 0.2;
        let mask = Array2::from_elem((1, 2), true);
        let r = bas_temporal(v.view(), &ts, mask.view(), 0.3).unwrap();
        assert!((r.windows[0].1 - (0.8 + 0.5) / 2.0).abs() < 1e-12);
        assert_eq!(r.extent.unwrap().1, ts[1]);
    }
}
