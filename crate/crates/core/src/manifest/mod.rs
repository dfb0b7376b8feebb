//! Spacetime dataset index: videos, frames, multi-resolution assets and
//! annotations, stored as a single JSON document.
//!
//! Coordinates live in three spaces. Asset pixels map into image space via
//! `warp_asset_to_image`; image pixels map into the shared per-video space via
//! `warp_image_to_video`. Samplers then work in a scaled copy of video space.

mod affine;
pub mod time;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use affine::{AffineTransform, SingularTransform, SINGULAR_DET};

use crate::Affine;

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("failed to read or write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid {entity}: {message}")]
    Validation { entity: String, message: String },
}

impl ManifestError {
    fn invalid(entity: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Validation {
            entity: entity.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = ManifestError> = std::result::Result<T, E>;

/// Ordered channel names of one asset, written as a pipe-joined string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct ChannelList(Vec<String>);

impl ChannelList {
    /// Parses `"red|green|blue"`. Commas are reserved and rejected.
    pub fn parse(spec: &str) -> Result<Self, String> {
        if spec.contains(',') {
            return Err(format!("grouped channel spec {spec:?} is not supported"));
        }
        let names: Vec<String> = spec.split('|').map(str::to_owned).collect();
        Self::from_names(names)
    }

    pub fn from_names<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, String> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() || n.contains(['|', ',']) {
                return Err(format!("bad channel name {n:?}"));
            }
            if !seen.insert(n.as_str()) {
                return Err(format!("duplicate channel {n:?}"));
            }
        }
        if names.is_empty() {
            return Err("empty channel list".into());
        }
        Ok(Self(names))
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|c| c == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.position(name).is_some()
    }
}

impl fmt::Display for ChannelList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("|"))
    }
}

impl Serialize for ChannelList {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ChannelList {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantization {
    pub scale: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Asset {
    pub file_path: String,
    pub channels: ChannelList,
    pub width: usize,
    pub height: usize,
    pub warp_asset_to_image: Affine,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantization: Option<Quantization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodata: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFrame {
    pub id: i64,
    pub video_id: i64,
    pub frame_index: usize,
    pub timestamp: String,
    pub sensor: String,
    pub width: usize,
    pub height: usize,
    pub warp_image_to_video: Affine,
    pub assets: Vec<Asset>,
}

impl ImageFrame {
    /// Finds the asset holding `channel` and the channel's index inside it.
    pub fn find_channel(&self, channel: &str) -> Option<(usize, usize)> {
        self.assets
            .iter()
            .enumerate()
            .find_map(|(ai, a)| a.channels.position(channel).map(|ci| (ai, ci)))
    }

    pub fn channel_names(&self) -> impl Iterator<Item = &str> {
        self.assets
            .iter()
            .flat_map(|a| a.channels.names().iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Video {
    pub id: i64,
    pub name: String,
    pub width: usize,
    pub height: usize,
    /// Ground sample distance of video space, meters per pixel.
    pub target_gsd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: i64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: i64,
    pub image_id: i64,
    pub category: String,
    /// Vertices in image space.
    pub polygon: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_id: Option<i64>,
}

/// The dataset index. `root` is the directory asset paths are relative to;
/// it is not serialized and does not take part in equality.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub videos: Vec<Video>,
    pub images: Vec<ImageFrame>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl PartialEq for Manifest {
    fn eq(&self, other: &Self) -> bool {
        self.videos == other.videos
            && self.images == other.images
            && self.annotations == other.annotations
            && self.categories == other.categories
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ManifestError::Io {
        path: path.to_owned(),
        source,
    })?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| ManifestError::invalid("document", format!("not UTF-8: {e}")))?;
    let mut m = Manifest::from_json(text)?;
    m.root = path.parent().map(Path::to_owned).unwrap_or_default();
    Ok(m)
}

/// Writes `m` to `path`. A manifest with a root is first rebased onto the
/// directory of `path` so its relative asset paths still resolve on reload.
pub fn save_manifest(m: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = if m.root.as_os_str().is_empty() {
        m.to_json()?
    } else {
        let mut moved = m.clone();
        moved.rebase(path.parent().unwrap_or(Path::new("")))?;
        moved.to_json()?
    };
    std::fs::write(path, text).map_err(|source| ManifestError::Io {
        path: path.to_owned(),
        source,
    })
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    /// Canonical JSON form: validated, pretty-printed, fixed key order.
    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn video(&self, id: i64) -> Option<&Video> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn image(&self, id: i64) -> Option<&ImageFrame> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Frames of one video ordered by `frame_index`.
    pub fn frames_of(&self, video_id: i64) -> Vec<&ImageFrame> {
        let mut frames: Vec<_> = self.images.iter().filter(|i| i.video_id == video_id).collect();
        frames.sort_by_key(|f| f.frame_index);
        frames
    }

    pub fn asset_path(&self, asset: &Asset) -> PathBuf {
        self.root.join(&asset.file_path)
    }

    /// Moves the root to `new_root`, rewriting relative asset paths so they
    /// still name the same files. Absolute paths are left alone.
    pub fn rebase(&mut self, new_root: impl AsRef<Path>) -> Result<()> {
        let abs = |p: &Path| {
            let p = if p.as_os_str().is_empty() { Path::new(".") } else { p };
            std::fs::canonicalize(p)
                .or_else(|_| std::path::absolute(p))
                .map_err(|source| ManifestError::Io { path: p.to_path_buf(), source })
        };
        let old = abs(&self.root)?;
        let new = abs(new_root.as_ref())?;
        for img in &mut self.images {
            for a in &mut img.assets {
                if Path::new(&a.file_path).is_relative() {
                    let target = old.join(&a.file_path);
                    let rel = pathdiff::diff_paths(&target, &new).unwrap_or(target);
                    a.file_path = rel.to_string_lossy().into_owned();
                }
            }
        }
        self.root = new;
        Ok(())
    }

    pub fn next_image_id(&self) -> i64 {
        self.images.iter().map(|i| i.id).max().unwrap_or(0) + 1
    }

    /// Single transform from asset pixels to the sampling space, which is
    /// video space scaled by `requested_scale`.
    pub fn resolve_warp(
        &self,
        video_id: i64,
        image_id: i64,
        asset_index: usize,
        requested_scale: f64,
    ) -> Result<Affine> {
        if !(requested_scale > 0.0 && requested_scale.is_finite()) {
            return Err(ManifestError::invalid(
                "request",
                format!("scale {requested_scale} must be positive"),
            ));
        }
        let image = self
            .image(image_id)
            .ok_or_else(|| ManifestError::invalid(format!("image {image_id}"), "not found"))?;
        if image.video_id != video_id || self.video(video_id).is_none() {
            return Err(ManifestError::invalid(
                format!("image {image_id}"),
                format!("does not belong to video {video_id}"),
            ));
        }
        let asset = image.assets.get(asset_index).ok_or_else(|| {
            ManifestError::invalid(
                format!("image {image_id}"),
                format!("has no asset #{asset_index}"),
            )
        })?;
        Ok(Affine::scale(requested_scale)
            .compose(&image.warp_image_to_video)
            .compose(&asset.warp_asset_to_image))
    }

    pub fn validate(&self) -> Result<()> {
        let mut video_ids = HashSet::new();
        for v in &self.videos {
            let ent = format!("video {}", v.id);
            if !video_ids.insert(v.id) {
                return Err(ManifestError::invalid(ent, "duplicate id"));
            }
            if v.width < 1 || v.height < 1 {
                return Err(ManifestError::invalid(ent, "width and height must be >= 1"));
            }
            if !(v.target_gsd > 0.0 && v.target_gsd.is_finite()) {
                return Err(ManifestError::invalid(ent, "target_gsd must be positive"));
            }
        }

        let mut cat_ids = HashSet::new();
        let mut cat_names = HashSet::new();
        for c in &self.categories {
            let ent = format!("category {}", c.id);
            if !cat_ids.insert(c.id) {
                return Err(ManifestError::invalid(ent, "duplicate id"));
            }
            if !cat_names.insert(c.name.as_str()) {
                return Err(ManifestError::invalid(ent, format!("duplicate name {:?}", c.name)));
            }
        }

        let mut image_ids = HashSet::new();
        let mut by_video: BTreeMap<i64, Vec<(usize, chrono::DateTime<chrono::Utc>, i64)>> =
            BTreeMap::new();
        for img in &self.images {
            let ent = format!("image {}", img.id);
            if !image_ids.insert(img.id) {
                return Err(ManifestError::invalid(ent, "duplicate id"));
            }
            if !video_ids.contains(&img.video_id) {
                return Err(ManifestError::invalid(
                    ent,
                    format!("references missing video {}", img.video_id),
                ));
            }
            if img.width < 1 || img.height < 1 {
                return Err(ManifestError::invalid(ent, "width and height must be >= 1"));
            }
            check_warp(&ent, "warp_image_to_video", &img.warp_image_to_video)?;
            let ts = time::parse_timestamp(&img.timestamp).ok_or_else(|| {
                ManifestError::invalid(&ent, format!("bad timestamp {:?}", img.timestamp))
            })?;
            if img.sensor.is_empty() {
                return Err(ManifestError::invalid(ent, "empty sensor name"));
            }
            let mut seen_channels = HashSet::new();
            for (ai, a) in img.assets.iter().enumerate() {
                let aent = format!("image {} asset #{ai}", img.id);
                if a.file_path.is_empty() {
                    return Err(ManifestError::invalid(aent, "empty file_path"));
                }
                if a.width < 1 || a.height < 1 {
                    return Err(ManifestError::invalid(aent, "width and height must be >= 1"));
                }
                check_warp(&aent, "warp_asset_to_image", &a.warp_asset_to_image)?;
                if let Some(q) = a.quantization {
                    if !(q.scale.is_finite() && q.offset.is_finite() && q.scale != 0.0) {
                        return Err(ManifestError::invalid(aent, "bad quantization"));
                    }
                }
                if a.nodata.is_some_and(|n| !n.is_finite()) {
                    return Err(ManifestError::invalid(aent, "nodata must be finite"));
                }
                for ch in a.channels.names() {
                    if !seen_channels.insert(ch.as_str()) {
                        return Err(ManifestError::invalid(
                            aent,
                            format!("channel {ch:?} appears in more than one asset"),
                        ));
                    }
                }
            }
            by_video
                .entry(img.video_id)
                .or_default()
                .push((img.frame_index, ts, img.id));
        }
        for (vid, mut frames) in by_video {
            frames.sort_by_key(|f| f.0);
            for w in frames.windows(2) {
                let ((i0, t0, _), (i1, t1, id1)) = (w[0], w[1]);
                if i0 == i1 {
                    return Err(ManifestError::invalid(
                        format!("image {id1}"),
                        format!("duplicate frame_index {i1} in video {vid}"),
                    ));
                }
                if t1 < t0 {
                    return Err(ManifestError::invalid(
                        format!("image {id1}"),
                        format!("frame_index {i1} is earlier in time than frame_index {i0}"),
                    ));
                }
            }
        }

        let mut ann_ids = HashSet::new();
        for ann in &self.annotations {
            let ent = format!("annotation {}", ann.id);
            if !ann_ids.insert(ann.id) {
                return Err(ManifestError::invalid(ent, "duplicate id"));
            }
            if !image_ids.contains(&ann.image_id) {
                return Err(ManifestError::invalid(
                    ent,
                    format!("references missing image {}", ann.image_id),
                ));
            }
            if !cat_names.contains(ann.category.as_str()) {
                return Err(ManifestError::invalid(
                    ent,
                    format!("references missing category {:?}", ann.category),
                ));
            }
            if ann.polygon.len() < 3 {
                return Err(ManifestError::invalid(ent, "polygon needs at least 3 vertices"));
            }
            if ann.polygon.iter().flatten().any(|v| !v.is_finite()) {
                return Err(ManifestError::invalid(ent, "non-finite polygon vertex"));
            }
            if !is_simple_polygon(&ann.polygon) {
                return Err(ManifestError::invalid(ent, "polygon is not simple"));
            }
        }
        Ok(())
    }

    /// Counts of annotations per category name, including empty categories.
    pub fn category_frequency(&self) -> BTreeMap<String, usize> {
        let mut freq: BTreeMap<String, usize> =
            self.categories.iter().map(|c| (c.name.clone(), 0)).collect();
        for a in &self.annotations {
            *freq.entry(a.category.clone()).or_default() += 1;
        }
        freq
    }

    pub fn images_by_id(&self) -> HashMap<i64, &ImageFrame> {
        self.images.iter().map(|i| (i.id, i)).collect()
    }
}

fn check_warp(entity: &str, field: &str, t: &Affine) -> Result<()> {
    if !t.is_finite() {
        return Err(ManifestError::invalid(entity, format!("{field} has a non-finite coefficient")));
    }
    if t.invert().is_err() {
        return Err(ManifestError::invalid(entity, format!("{field} is singular")));
    }
    Ok(())
}

/// Extent of video space after scaling, rounded up, at least one pixel.
pub fn scaled_extent(width: usize, height: usize, scale: f64) -> (usize, usize) {
    let f = |n: usize| ((n as f64 * scale) - 1e-9).ceil().max(1.0) as usize;
    (f(width), f(height))
}

fn is_simple_polygon(pts: &[[f64; 2]]) -> bool {
    let n = pts.len();
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let on_segment = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| {
        q[0] <= p[0].max(r[0]) && q[0] >= p[0].min(r[0]) && q[1] <= p[1].max(r[1]) && q[1] >= p[1].min(r[1])
    };
    let intersects = |p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]| {
        let d1 = cross(q1, q2, p1);
        let d2 = cross(q1, q2, p2);
        let d3 = cross(p1, p2, q1);
        let d4 = cross(p1, p2, q2);
        if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
            && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
        {
            return true;
        }
        (d1 == 0.0 && on_segment(q1, p1, q2))
            || (d2 == 0.0 && on_segment(q1, p2, q2))
            || (d3 == 0.0 && on_segment(p1, q1, p2))
            || (d4 == 0.0 && on_segment(p1, q2, p2))
    };
    let area2: f64 = (0..n)
        .map(|i| {
            let (p, q) = (pts[i], pts[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    if area2 == 0.0 {
        return false;
    }
    for i in 0..n {
        let (a1, a2) = (pts[i], pts[(i + 1) % n]);
        if a1 == a2 {
            return false;
        }
        for j in i + 1..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (b1, b2) = (pts[j], pts[(j + 1) % n]);
            if intersects(a1, a2, b1, b2) {
                return false;
            }
        }
    }
    true
}
