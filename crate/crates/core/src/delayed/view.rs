use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::{DelayedError, DelayedNode, Interpolation, Result};
use crate::manifest::{scaled_extent, Manifest};
use crate::raster::RasterReader;
use crate::Affine;

/// Output grid of a view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    /// The video's common grid, scaled.
    Video,
    /// The image's own grid, scaled.
    Image,
}

/// Shared open readers, so read statistics accumulate per file.
#[derive(Debug, Default)]
pub struct RasterCache {
    readers: Mutex<HashMap<PathBuf, Arc<RasterReader>>>,
}

impl RasterCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, path: impl AsRef<Path>) -> Result<Arc<RasterReader>> {
        let path = path.as_ref();
        let mut map = self.readers.lock().expect("raster cache poisoned");
        if let Some(r) = map.get(path) {
            return Ok(r.clone());
        }
        let r = Arc::new(RasterReader::open(path)?);
        map.insert(path.to_path_buf(), r.clone());
        Ok(r)
    }

    pub fn tiles_read(&self) -> u64 {
        self.readers.lock().expect("raster cache poisoned").values().map(|r| r.stats().tiles_read()).sum()
    }

    pub fn bytes_read(&self) -> u64 {
        self.readers.lock().expect("raster cache poisoned").values().map(|r| r.stats().bytes_read()).sum()
    }

    pub fn reset_stats(&self) {
        for r in self.readers.lock().expect("raster cache poisoned").values() {
            r.stats().reset();
        }
    }
}

/// Lazy view of `channels` of one image, resampled into `space` at `scale`.
///
/// Each contributing asset becomes `Warp(Load)` (the warp is omitted when
/// it would be an identity), dequantized if the asset is quantized; several
/// assets are concatenated and a final channel select puts the requested
/// channels in order.
pub fn build_view<S: AsRef<str>>(
    manifest: &Manifest,
    cache: &RasterCache,
    image_id: i64,
    channels: &[S],
    space: Space,
    scale: f64,
) -> Result<DelayedNode> {
    let image = manifest
        .image(image_id)
        .ok_or_else(|| DelayedError::Invalid(format!("image {image_id} not found")))?;
    if channels.is_empty() {
        return Err(DelayedError::Invalid("no channels requested".into()));
    }
    let (out_w, out_h) = match space {
        Space::Video => {
            let video = manifest
                .video(image.video_id)
                .ok_or_else(|| DelayedError::Invalid(format!("video {} not found", image.video_id)))?;
            scaled_extent(video.width, video.height, scale)
        }
        Space::Image => scaled_extent(image.width, image.height, scale),
    };

    let mut used: Vec<usize> = Vec::new();
    let mut picks = Vec::with_capacity(channels.len());
    for ch in channels {
        let ch = ch.as_ref();
        let (ai, ci) = image.find_channel(ch).ok_or_else(|| DelayedError::UnresolvableChannel {
            image_id,
            channel: ch.to_string(),
        })?;
        if !used.contains(&ai) {
            used.push(ai);
        }
        picks.push((ai, ci));
    }

    let mut branches = Vec::with_capacity(used.len());
    let mut base = HashMap::new();
    let mut offset = 0;
    for &ai in &used {
        let asset = &image.assets[ai];
        let reader = cache.get(manifest.asset_path(asset))?;
        let hd = *reader.header();
        if hd.channels != asset.channels.len() || (hd.width, hd.height) != (asset.width, asset.height) {
            return Err(DelayedError::Invalid(format!(
                "raster {} is {}x{}x{}, manifest says {}x{}x{}",
                asset.file_path,
                hd.channels,
                hd.height,
                hd.width,
                asset.channels.len(),
                asset.height,
                asset.width
            )));
        }
        let transform = match space {
            Space::Video => manifest.resolve_warp(image.video_id, image_id, ai, scale)?,
            Space::Image => Affine::scale(scale).compose(&asset.warp_asset_to_image),
        };
        let mut node = DelayedNode::load(reader, 0)?;
        if let (Some(nd), DelayedNode::Load { nodata, .. }) = (asset.nodata, &mut node) {
            *nodata = Some(nd);
        }
        if !(transform.is_identity() && (hd.width, hd.height) == (out_w, out_h)) {
            node = node.warp(transform, Interpolation::Bilinear, out_w, out_h)?;
        }
        let q = asset.quantization.unwrap_or(hd.quantization);
        if (q.scale, q.offset) != (1.0, 0.0) {
            node = node.dequantize(q.scale, q.offset);
        }
        base.insert(ai, offset);
        offset += hd.channels;
        branches.push(node);
    }
    let merged = if branches.len() == 1 {
        branches.pop().expect("one branch")
    } else {
        DelayedNode::concat(branches)?
    };
    merged.select(picks.iter().map(|(ai, ci)| base[ai] + ci).collect())
}
