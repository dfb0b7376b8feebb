//! Heatmaps to site proposals: BAS polygon extraction with area and score
//! gates, yearly temporal extents, and AC watershed refinement with phase
//! labels.

mod ac;
mod bas;
mod geom;

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ac::{ac_refine, ac_score_and_label, watershed, Labeling, Refinement, Region, LOW_SALIENCE, NO_ACTIVITY_PHASES};
pub use bas::{bas_extract, bas_temporal, max_over_time, BasTemporal, Candidate};
pub use geom::{component_polygon, label_components, polygon_of, trace_rings, Polygon};

use crate::delayed::{build_view, evaluate_optimized, DelayedError, RasterCache, Space};
use crate::manifest::{scaled_extent, Manifest, Video};
use crate::stitch::{AC_CLASSES, AC_SALIENT, SALIENT};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unparseable timestamp {0:?}")]
    Timestamp(String),
    #[error("invalid tracker setting: {0}")]
    Config(String),
    #[error(transparent)]
    Delayed(#[from] DelayedError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("site export: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrackError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "No Activity")]
    NoActivity,
    #[serde(rename = "Site Preparation")]
    SitePreparation,
    #[serde(rename = "Active Construction")]
    ActiveConstruction,
    #[serde(rename = "Post Construction")]
    PostConstruction,
}

impl Phase {
    /// In class-channel order.
    pub const ALL: [Phase; 4] = [Phase::NoActivity, Phase::SitePreparation, Phase::ActiveConstruction, Phase::PostConstruction];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub timestamp: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Accepted,
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteProposal {
    pub site_id: String,
    pub video_id: i64,
    /// Video-space pixel coordinates.
    pub polygon: Polygon,
    /// Meters per video pixel.
    pub gsd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_date: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_date: Option<String>,
    pub observations: Vec<Observation>,
    pub status: Status,
}

impl SiteProposal {
    pub fn accepted(&self) -> bool {
        self.status == Status::Accepted
    }
}

/// Tracker thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackConfig {
    pub binarize: f64,
    /// Square meters, inclusive.
    pub min_area: f64,
    pub max_area: f64,
    pub bas_score: f64,
    pub ac_thresh: f64,
    pub min_pixels: usize,
    pub site_thresh: f64,
    pub class_thresh: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            binarize: 0.375,
            min_area: 7200.0,
            max_area: 8e6,
            bas_score: 0.3,
            ac_thresh: 0.3,
            min_pixels: 16,
            site_thresh: 0.3,
            class_thresh: 0.3,
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("binarize", self.binarize),
            ("bas_score", self.bas_score),
            ("ac_thresh", self.ac_thresh),
            ("site_thresh", self.site_thresh),
            ("class_thresh", self.class_thresh),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(TrackError::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.min_area >= 0.0 && self.min_area.is_finite() && self.max_area >= self.min_area) {
            return Err(TrackError::Config(format!("need 0 ≤ min_area ≤ max_area, got {} and {}", self.min_area, self.max_area)));
        }
        if self.min_pixels == 0 {
            return Err(TrackError::Config("min_pixels must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(TrackError::Config(format!("scale must be positive, got {scale}")))
    }
}

/// Frames of `video` carrying all `channels`, stacked in time order at
/// `scale` of video space: `(timestamps, T×C×H×W)`.
fn stack(m: &Manifest, video: &Video, channels: &[&str], scale: f64) -> Result<(Vec<String>, Array4<f64>)> {
    let mut frames: Vec<_> = m.frames_of(video.id).into_iter().filter(|f| channels.iter().all(|c| f.find_channel(c).is_some())).collect();
    frames.sort_by(|a, b| (&a.timestamp, a.id).cmp(&(&b.timestamp, b.id)));
    let (w, h) = scaled_extent(video.width, video.height, scale);
    let cache = RasterCache::new();
    let arrays: Vec<Array3<f64>> = frames
        .par_iter()
        .map(|f| {
            let view = build_view(m, &cache, f.id, channels, Space::Video, scale)?;
            evaluate_optimized::<f64>(&view)
        })
        .collect::<std::result::Result<_, DelayedError>>()?;
    let mut out = Array4::zeros((arrays.len(), channels.len(), h, w));
    for (mut dst, a) in out.axis_iter_mut(Axis(0)).zip(&arrays) {
        if a.dim() != (channels.len(), h, w) {
            return Err(TrackError::Shape(format!("frame view {:?} does not match video grid {:?}", a.dim(), (h, w))));
        }
        dst.assign(a);
    }
    let ts = frames.iter().map(|f| f.timestamp.clone()).collect();
    Ok((ts, out))
}

/// BAS over every video's `salient` heatmaps sampled at `scale`.
pub fn track_bas(m: &Manifest, cfg: &TrackConfig, scale: f64) -> Result<Vec<SiteProposal>> {
    cfg.validate()?;
    check_scale(scale)?;
    let mut sites = Vec::new();
    let mut videos: Vec<&Video> = m.videos.iter().collect();
    videos.sort_by_key(|v| v.id);
    for video in videos {
        let (ts, vol) = stack(m, video, &[SALIENT], scale)?;
        if ts.is_empty() {
            continue;
        }
        let vol = vol.index_axis_move(Axis(1), 0);
        let gsd = video.target_gsd / scale;
        for (k, cand) in bas_extract(vol.view(), gsd, cfg.binarize, cfg.min_area, cfg.max_area)?.into_iter().enumerate() {
            let (h, w) = (vol.dim().1, vol.dim().2);
            let mask = cand.polygon.mask(w, h, 1.0);
            let temporal = bas_temporal(vol.view(), &ts, mask.view(), cfg.bas_score)?;
            let (start, end, status) = match temporal.extent {
                Some((a, b)) => (Some(a), Some(b), Status::Accepted),
                None => (None, None, Status::Rejected("low-score".into())),
            };
            sites.push(SiteProposal {
                site_id: format!("{}_{:04}", video.name, k),
                video_id: video.id,
                polygon: cand.polygon.scaled(1.0 / scale),
                gsd: video.target_gsd,
                start_date: start,
                end_date: end,
                observations: temporal.observations,
                status,
            });
        }
    }
    sites.sort_by(|a, b| a.site_id.cmp(&b.site_id));
    Ok(sites)
}

/// AC refinement of each accepted BAS site against the class heatmaps
/// sampled at `scale`. Rejected BAS sites are dropped.
pub fn track_ac(m: &Manifest, bas_sites: &[SiteProposal], cfg: &TrackConfig, scale: f64) -> Result<Vec<SiteProposal>> {
    cfg.validate()?;
    check_scale(scale)?;
    let channels: Vec<&str> = AC_CLASSES.iter().copied().chain([AC_SALIENT]).collect();
    let mut cache: std::collections::HashMap<i64, (Vec<String>, Array4<f64>, Array3<f64>)> = Default::default();
    let mut sites = Vec::new();
    for bas in bas_sites.iter().filter(|s| s.accepted()) {
        let video = m.video(bas.video_id).ok_or_else(|| TrackError::Shape(format!("site {} names unknown video {}", bas.site_id, bas.video_id)))?;
        let (ts, class, sal) = match cache.entry(video.id) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => {
                let (ts, vol) = stack(m, video, &channels, scale)?;
                let class = vol.slice(ndarray::s![.., 0..4, .., ..]).to_owned();
                let sal = vol.index_axis(Axis(1), 4).to_owned();
                e.insert((ts, class, sal))
            }
        };
        if ts.is_empty() {
            continue;
        }
        let (h, w) = (sal.dim().1, sal.dim().2);
        let mask = bas.polygon.mask(w, h, scale);
        let refined = ac_refine(class.view(), sal.view(), mask.view(), cfg.ac_thresh, cfg.min_pixels)?;
        if refined.kept.is_empty() {
            sites.push(SiteProposal {
                status: Status::Rejected("no-seeds".into()),
                start_date: None,
                end_date: None,
                observations: Vec::new(),
                ..bas.clone()
            });
            continue;
        }
        for (j, region) in refined.kept.iter().enumerate() {
            let rmask = region.polygon.mask(w, h, 1.0);
            let l = ac_score_and_label(rmask.view(), class.view(), sal.view(), ts, cfg.site_thresh, cfg.class_thresh)?;
            let (start, end, status) = match l.outcome {
                Ok((a, b)) => (Some(a), Some(b), Status::Accepted),
                Err(reason) => (None, None, Status::Rejected(reason)),
            };
            sites.push(SiteProposal {
                site_id: format!("{}_{:02}", bas.site_id, j),
                video_id: video.id,
                polygon: region.polygon.scaled(1.0 / scale),
                gsd: video.target_gsd,
                start_date: start,
                end_date: end,
                observations: l.observations,
                status,
            });
        }
    }
    sites.sort_by(|a, b| a.site_id.cmp(&b.site_id));
    Ok(sites)
}

/// Serialized site list with the thresholds that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteExport {
    pub config: TrackConfig,
    pub features: Vec<SiteProposal>,
}

impl SiteExport {
    pub fn new(mut sites: Vec<SiteProposal>, config: TrackConfig) -> Self {
        sites.sort_by(|a, b| a.site_id.cmp(&b.site_id));
        Self { config, features: sites }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("site export serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn export_sites(sites: &[SiteProposal], config: &TrackConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = SiteExport::new(sites.to_vec(), config.clone()).to_json();
    std::fs::write(path, text).map_err(|source| TrackError::Io { path: path.to_path_buf(), source })
}

pub fn load_sites(path: impl AsRef<Path>) -> Result<SiteExport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TrackError::Io { path: path.to_path_buf(), source })?;
    SiteExport::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site(id: &str, status: Status) -> SiteProposal {
        SiteProposal {
            site_id: id.into(),
            video_id: 1,
            polygon: Polygon { exterior: vec![[0.0, 0.0], [0.0, 2.0], [2.0, 2.0], [2.0, 0.0]], holes: Vec::new() },
            gsd: 10.0,
            start_date: Some("2020-01-01T00:00:00Z".into()),
            end_date: Some("2021-01-01T00:00:00Z".into()),
            observations: vec![Observation { timestamp: "2020-01-01T00:00:00Z".into(), score: 0.625, phase: Some(Phase::SitePreparation) }],
            status,
        }
    }

    #[test]
    fn export_round_trip_sorted() {
        let sites = vec![site("b", Status::Rejected(LOW_SALIENCE.into())), site("a", Status::Accepted)];
        let e = SiteExport::new(sites, TrackConfig::default());
        assert_eq!(e.features[0].site_id, "a");
        let text = e.to_json();
        assert!(text.contains("\"rejected\": \"low-salience\""));
        assert_eq!(SiteExport::from_json(&text).unwrap(), e);
        let empty = SiteExport::new(Vec::new(), TrackConfig::default()).to_json();
        assert!(empty.contains("\"features\": []") && empty.contains("\"binarize\": 0.375"));
    }

    #[test]
    fn config_ranges() {
        assert!(TrackConfig::default().validate().is_ok());
        assert!(TrackConfig { binarize: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrackConfig { min_area: 10.0, max_area: 5.0, ..Default::default() }.validate().is_err());
        assert!(TrackConfig { min_pixels: 0, ..Default::default() }.validate().is_err());
    }
}
