use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Result, SamplerError};
use crate::manifest::Manifest;
use crate::raster::RasterReader;

/// Streaming mean/variance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Parallel combination of two partial accumulators.
    pub fn merge(&mut self, other: &Welford) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let d = other.mean - self.mean;
        self.mean += d * other.count as f64 / n;
        self.m2 += other.m2 + d * d * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub count: u64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// sensor → channel → stats, over valid (non-NaN, non-nodata) pixels.
    pub channels: BTreeMap<String, BTreeMap<String, ChannelStats>>,
    pub category_frequency: BTreeMap<String, usize>,
    /// Assets that could not be read, with the reason.
    pub skipped: Vec<String>,
}

impl DatasetStats {
    pub fn get(&self, sensor: &str, channel: &str) -> Option<&ChannelStats> {
        self.channels.get(sensor)?.get(channel)
    }
}

type Partial = BTreeMap<(String, String), Welford>;

fn image_partial(m: &Manifest, idx: usize) -> (Partial, Vec<String>) {
    let img = &m.images[idx];
    let mut acc = Partial::new();
    let mut skipped = Vec::new();
    for asset in &img.assets {
        let path = m.asset_path(asset);
        let read = || -> crate::raster::Result<_> {
            let r = RasterReader::open(&path)?;
            let hd = *r.header();
            let raw = r.read_level(0)?;
            let nodata = asset.nodata.or(hd.nodata);
            let q = asset.quantization.unwrap_or(hd.quantization);
            Ok(raw.to_real::<f64>(nodata).mapv_into(|v| v * q.scale + q.offset))
        };
        match read() {
            Ok(a) => {
                for (ci, name) in asset.channels.names().iter().enumerate() {
                    let w = acc.entry((img.sensor.clone(), name.clone())).or_default();
                    for &v in a.index_axis(ndarray::Axis(0), ci) {
                        if !v.is_nan() {
                            w.push(v);
                        }
                    }
                }
            }
            Err(e) => skipped.push(format!("image {} asset {}: {e}", img.id, asset.file_path)),
        }
    }
    (acc, skipped)
}

/// Single pass over every asset; per-image partials are computed in
/// parallel and merged in image order.
pub fn compute_stats(m: &Manifest) -> DatasetStats {
    let partials: Vec<_> = (0..m.images.len()).into_par_iter().map(|i| image_partial(m, i)).collect();
    let mut total = Partial::new();
    let mut skipped = Vec::new();
    for (p, s) in partials {
        for (k, w) in p {
            total.entry(k).or_default().merge(&w);
        }
        skipped.extend(s);
    }
    let mut channels: BTreeMap<String, BTreeMap<String, ChannelStats>> = BTreeMap::new();
    for ((sensor, ch), w) in total {
        if w.count == 0 {
            continue;
        }
        channels.entry(sensor).or_default().insert(
            ch,
            ChannelStats {
                count: w.count,
                mean: w.mean,
                std: w.variance().sqrt(),
            },
        );
    }
    DatasetStats {
        channels,
        category_frequency: m.category_frequency(),
        skipped,
    }
}

/// SHA-256 of the manifest's canonical JSON.
pub fn manifest_hash(m: &Manifest) -> Result<String> {
    let json = m.to_json()?;
    Ok(format!("{:x}", Sha256::digest(json.as_bytes())))
}

/// Like [`compute_stats`], reusing `cache_dir/stats-<hash>.json` when present.
pub fn compute_stats_cached(m: &Manifest, cache_dir: &Path) -> Result<DatasetStats> {
    let path = cache_dir.join(format!("stats-{}.json", manifest_hash(m)?));
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(stats) = serde_json::from_str(&text) {
            return Ok(stats);
        }
    }
    let stats = compute_stats(m);
    let io = |source| SamplerError::Io { path: path.clone(), source };
    std::fs::create_dir_all(cache_dir).map_err(io)?;
    let text = serde_json::to_string_pretty(&stats).expect("stats serialize");
    std::fs::write(&path, text).map_err(io)?;
    Ok(stats)
}
