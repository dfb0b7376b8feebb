//! Spacetime sample grids, dataset statistics, per-pixel input weights and
//! per-sensor-per-year time averaging.

mod stats;
mod timeavg;

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Utc};
use ndarray::{Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::manifest::time::parse_timestamp;
use crate::manifest::{scaled_extent, ImageFrame, Manifest};
use crate::Scalar;

pub use stats::{compute_stats, compute_stats_cached, manifest_hash, ChannelStats, DatasetStats, Welford};
pub use timeavg::{time_average, Reducer, TimeAverageConfig};

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("video {0} has no frames")]
    EmptyVideo(i64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("frame {image_id}: unparseable timestamp {timestamp:?}")]
    Timestamp { image_id: i64, timestamp: String },
    #[error(transparent)]
    Manifest(#[from] crate::manifest::ManifestError),
    #[error(transparent)]
    Delayed(#[from] crate::delayed::DelayedError),
    #[error(transparent)]
    Raster(#[from] crate::raster::RasterError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = SamplerError> = std::result::Result<T, E>;

/// Relative frame offsets in days around an anchor frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeKernel(Vec<f64>);

impl TimeKernel {
    pub fn new(offsets_days: Vec<f64>) -> Result<Self> {
        if offsets_days.iter().any(|d| !d.is_finite()) {
            return Err(SamplerError::Config("time kernel offsets must be finite".into()));
        }
        if !offsets_days.windows(2).all(|w| w[0] < w[1]) {
            return Err(SamplerError::Config("time kernel offsets must be strictly ascending".into()));
        }
        if !offsets_days.contains(&0.0) {
            return Err(SamplerError::Config("time kernel must contain 0".into()));
        }
        Ok(Self(offsets_days))
    }

    /// The kernel `[0]`: each target sees only its anchor frame.
    pub fn single() -> Self {
        Self(vec![0.0])
    }

    /// Parses a comma-separated list of day offsets.
    pub fn parse(spec: &str) -> Result<Self> {
        let offsets = spec
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| SamplerError::Config(format!("time kernel {spec:?}: {e}")))?;
        Self::new(offsets)
    }

    pub fn offsets(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for TimeKernel {
    type Error = SamplerError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TimeKernel> for Vec<f64> {
    fn from(k: TimeKernel) -> Self {
        k.0
    }
}

impl Default for TimeKernel {
    fn default() -> Self {
        Self::single()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Window (width, height) in sampling-space pixels.
    pub window: (usize, usize),
    pub overlap: f64,
    /// Sampling space = video space × scale.
    pub scale: f64,
    pub kernel: TimeKernel,
    /// Channels requested per sensor. Frames of other sensors are skipped;
    /// an empty map accepts every frame.
    #[serde(default)]
    pub channels: BTreeMap<String, Vec<String>>,
}

impl GridConfig {
    pub fn new(window: (usize, usize), overlap: f64, scale: f64) -> Self {
        Self {
            window,
            overlap,
            scale,
            kernel: TimeKernel::single(),
            channels: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(SamplerError::Config(format!("overlap {} must lie in [0, 1)", self.overlap)));
        }
        if self.window.0 == 0 || self.window.1 == 0 {
            return Err(SamplerError::Config("window must be at least 1×1".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(SamplerError::Config(format!("scale {} must be positive", self.scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTarget {
    pub video_id: i64,
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub scale: f64,
    /// Anchor frame the target predicts for.
    pub anchor_id: i64,
    /// Frames chosen by the time kernel, time-ordered. Duplicates are kept
    /// when several offsets resolve to the same frame.
    pub frame_ids: Vec<i64>,
    pub channels: BTreeMap<String, Vec<String>>,
}

/// Window origins along one axis: stride `round(size·(1−overlap))`, last
/// window shifted inward to end at the boundary.
pub fn axis_origins(extent: usize, size: usize, overlap: f64) -> Vec<usize> {
    let size = size.min(extent);
    let stride = ((size as f64 * (1.0 - overlap)).round() as usize).max(1);
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        if o + size >= extent {
            out.push(extent - size);
            break;
        }
        out.push(o);
        o += stride;
    }
    out
}

pub(crate) fn frame_time(f: &ImageFrame) -> Result<DateTime<Utc>> {
    parse_timestamp(&f.timestamp).ok_or_else(|| SamplerError::Timestamp {
        image_id: f.id,
        timestamp: f.timestamp.clone(),
    })
}

/// Index of the frame nearest to `t`; ties go to the earlier frame.
fn nearest(times: &[DateTime<Utc>], t: DateTime<Utc>) -> usize {
    let mut best = 0;
    let mut best_d = i64::MAX;
    for (i, ti) in times.iter().enumerate() {
        let d = (*ti - t).num_milliseconds().abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Regular spatial grid crossed with one anchor per frame.
///
/// Windows larger than the scaled video are shrunk to its extent.
pub fn build_grid(m: &Manifest, cfg: &GridConfig) -> Result<Vec<SampleTarget>> {
    cfg.validate()?;
    let mut videos: Vec<_> = m.videos.iter().collect();
    videos.sort_by_key(|v| v.id);
    let mut out = Vec::new();
    for v in videos {
        let frames: Vec<&ImageFrame> = m
            .frames_of(v.id)
            .into_iter()
            .filter(|f| cfg.channels.is_empty() || cfg.channels.contains_key(&f.sensor))
            .collect();
        if frames.is_empty() {
            return Err(SamplerError::EmptyVideo(v.id));
        }
        let times = frames.iter().map(|f| frame_time(f)).collect::<Result<Vec<_>>>()?;
        let (sw, sh) = scaled_extent(v.width, v.height, cfg.scale);
        let (ww, wh) = (cfg.window.0.min(sw), cfg.window.1.min(sh));
        let xs = axis_origins(sw, ww, cfg.overlap);
        let ys = axis_origins(sh, wh, cfg.overlap);
        for (ai, anchor) in frames.iter().enumerate() {
            let mut picks: Vec<usize> = cfg
                .kernel
                .offsets()
                .iter()
                .map(|d| nearest(&times, times[ai] + Duration::milliseconds((d * 86_400_000.0).round() as i64)))
                .collect();
            picks.sort_by_key(|&i| (times[i], frames[i].frame_index));
            let frame_ids: Vec<i64> = picks.iter().map(|&i| frames[i].id).collect();
            let channels: BTreeMap<String, Vec<String>> = if cfg.channels.is_empty() {
                let mut c = BTreeMap::new();
                c.insert(anchor.sensor.clone(), anchor.channel_names().map(String::from).collect());
                c
            } else {
                cfg.channels.clone()
            };
            for &y0 in &ys {
                for &x0 in &xs {
                    out.push(SampleTarget {
                        video_id: v.id,
                        x0,
                        y0,
                        width: ww,
                        height: wh,
                        scale: cfg.scale,
                        anchor_id: anchor.id,
                        frame_ids: frame_ids.clone(),
                        channels: channels.clone(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Per-pixel input weight: 0 where any channel is NaN or `low_quality` is
/// set, 1 elsewhere.
pub fn input_weights<T: Scalar>(patch: ArrayView3<'_, T>, low_quality: Option<ArrayView2<'_, bool>>) -> Array2<T> {
    let (_, h, w) = patch.dim();
    if let Some(q) = low_quality {
        assert_eq!(q.dim(), (h, w), "QA mask dims must match the patch");
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        let bad = patch.slice(ndarray::s![.., y, x]).iter().any(|v| v.is_nan())
            || low_quality.is_some_and(|q| q[[y, x]]);
        if bad {
            T::zero()
        } else {
            T::one()
        }
    })
}
