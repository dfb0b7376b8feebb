//! Weighted stitching of overlapping window predictions into per-frame
//! heatmaps.

mod model;

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{named_model, Head, IdentityModel, LinearPixelModel, PixelModel, AC_CLASSES, AC_SALIENT, RGBN, SALIENT};

use crate::delayed::{build_view, evaluate_optimized, DelayedError, RasterCache, Space};
use crate::manifest::{Asset, ChannelList, Manifest, ManifestError, Quantization};
use crate::raster::{auto_levels, quantize_unit_i16, write_raster, RasterData, RasterError, RasterParams, HEATMAP_NODATA, HEATMAP_SCALE};
use crate::sampler::{build_grid, input_weights, GridConfig, SamplerError};
use crate::{Affine, Scalar};

#[derive(Debug, Error)]
pub enum StitchError {
    #[error("window at ({x0}, {y0}) of size {width}x{height} leaves the {buf_w}x{buf_h} buffer")]
    OutOfBounds { x0: usize, y0: usize, width: usize, height: usize, buf_w: usize, buf_h: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("validity weights must be finite and non-negative")]
    InvalidWeight,
    #[error("boundary kernel: {0}")]
    Kernel(String),
    #[error("model: {0}")]
    Model(String),
    #[error("no frame provides every model input ({0})")]
    NoEligibleFrames(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Delayed(#[from] DelayedError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, StitchError>;

/// Separable edge taper: a clipped linear ramp over `margin·L` pixels at
/// each end, never below `floor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryKernel {
    pub margin: f64,
    pub floor: f64,
}

impl Default for BoundaryKernel {
    fn default() -> Self {
        Self { margin: 0.25, floor: 0.01 }
    }
}

impl BoundaryKernel {
    /// Constant 1 everywhere.
    pub fn flat() -> Self {
        Self { margin: f64::MIN_POSITIVE, floor: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin <= 0.5) {
            return Err(StitchError::Kernel(format!("margin {} must lie in (0, 0.5]", self.margin)));
        }
        if !(self.floor > 0.0 && self.floor <= 1.0) {
            return Err(StitchError::Kernel(format!("floor {} must lie in (0, 1]", self.floor)));
        }
        Ok(())
    }

    pub fn axis(&self, i: usize, len: usize) -> f64 {
        let ml = self.margin * len as f64;
        let i = i as f64;
        ((i + 0.5) / ml).min((len as f64 - i - 0.5) / ml).min(1.0).max(self.floor)
    }

    pub fn weights(&self, height: usize, width: usize) -> Array2<f64> {
        let col: Vec<f64> = (0..width).map(|x| self.axis(x, width)).collect();
        let row: Vec<f64> = (0..height).map(|y| self.axis(y, height)).collect();
        Array2::from_shape_fn((height, width), |(y, x)| row[y] * col[x])
    }
}

/// Running weighted sums for one frame and head, in f64.
#[derive(Debug, Clone)]
pub struct AccumBuffer {
    values: Array3<f64>,
    weights: Array2<f64>,
}

impl AccumBuffer {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { values: Array3::zeros((channels, height, width)), weights: Array2::zeros((height, width)) }
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn weight_sum(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Adds a window with effective weight `validity × kernel`.
    pub fn accumulate<T: Scalar>(
        &mut self,
        x0: usize,
        y0: usize,
        pred: ArrayView3<'_, T>,
        validity: ArrayView2<'_, T>,
        kernel: &BoundaryKernel,
    ) -> Result<()> {
        let (_, h, w) = pred.dim();
        let k = kernel.weights(h, w);
        if validity.dim() != (h, w) {
            return Err(StitchError::Shape(format!("validity {:?} vs prediction {h}x{w}", validity.dim())));
        }
        let eff = Array2::from_shape_fn((h, w), |(y, x)| validity[[y, x]].as_f64() * k[[y, x]]);
        self.add_weighted(x0, y0, pred, eff.view())
    }

    /// Adds a window with the given final per-pixel weights. Pixels where any
    /// channel is NaN are skipped.
    pub fn add_weighted<T: Scalar>(&mut self, x0: usize, y0: usize, pred: ArrayView3<'_, T>, weight: ArrayView2<'_, f64>) -> Result<()> {
        let (c, h, w) = pred.dim();
        let (bc, bh, bw) = self.values.dim();
        if c != bc || weight.dim() != (h, w) {
            return Err(StitchError::Shape(format!("prediction {c}x{h}x{w}, weights {:?}, buffer has {bc} channels", weight.dim())));
        }
        if x0 + w > bw || y0 + h > bh {
            return Err(StitchError::OutOfBounds { x0, y0, width: w, height: h, buf_w: bw, buf_h: bh });
        }
        if weight.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(StitchError::InvalidWeight);
        }
        for y in 0..h {
            for x in 0..w {
                let wt = weight[[y, x]];
                if wt == 0.0 || (0..c).any(|ch| pred[[ch, y, x]].is_nan()) {
                    continue;
                }
                for ch in 0..c {
                    self.values[[ch, y0 + y, x0 + x]] += wt * pred[[ch, y, x]].as_f64();
                }
                self.weights[[y0 + y, x0 + x]] += wt;
            }
        }
        Ok(())
    }

    /// Weighted average; NaN where nothing was accumulated.
    pub fn finalize<T: Scalar>(&self) -> Array3<T> {
        let (c, h, w) = self.values.dim();
        Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
            let wt = self.weights[[y, x]];
            if wt > 0.0 {
                T::lit(self.values[[ch, y, x]] / wt)
            } else {
                T::nan()
            }
        })
    }
}

/// Finalized heatmap for one frame, in sampling space (video × `scale`).
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub image_id: i64,
    pub scale: f64,
    pub values: Array3<f64>,
}

/// Writes one int16 raster per heatmap into `out_dir` and registers it as a
/// new asset of its frame. The returned manifest is rooted at `out_dir`.
pub fn write_heatmaps(m: &Manifest, heatmaps: &[Heatmap], head: &Head, out_dir: impl Into<PathBuf>) -> Result<Manifest> {
    let out_dir = out_dir.into();
    std::fs::create_dir_all(&out_dir).map_err(|source| StitchError::Io { path: out_dir.clone(), source })?;
    let channels = ChannelList::from_names(head.channels.iter().cloned()).map_err(StitchError::Model)?;
    let mut out = m.clone();
    out.rebase(&out_dir)?;
    let written: Vec<Result<(i64, Asset)>> = heatmaps
        .par_iter()
        .map(|hm| {
            let img = m.image(hm.image_id).ok_or_else(|| StitchError::Model(format!("image {} not in manifest", hm.image_id)))?;
            let (c, h, w) = hm.values.dim();
            if c != channels.len() {
                return Err(StitchError::Shape(format!("heatmap has {c} channels, head {} has {}", head.name, channels.len())));
            }
            let q = hm.values.mapv(quantize_unit_i16);
            let file = format!("{}_{}.tpr", head.name, hm.image_id);
            let params = RasterParams::default()
                .levels(auto_levels(w, h))
                .nodata(Some(HEATMAP_NODATA as f64))
                .quantization(Quantization { scale: HEATMAP_SCALE, offset: 0.0 });
            write_raster(out_dir.join(&file), &RasterData::I16(q), params)?;
            let to_image = img
                .warp_image_to_video
                .invert()
                .map_err(|e| StitchError::Model(format!("image {}: {e}", img.id)))?
                .compose(&Affine::scale(1.0 / hm.scale));
            Ok((
                hm.image_id,
                Asset {
                    file_path: file,
                    channels: channels.clone(),
                    width: w,
                    height: h,
                    warp_asset_to_image: to_image,
                    quantization: Some(Quantization { scale: HEATMAP_SCALE, offset: 0.0 }),
                    nodata: Some(HEATMAP_NODATA as f64),
                },
            ))
        })
        .collect();
    for r in written {
        let (id, asset) = r?;
        let img = out.images.iter_mut().find(|i| i.id == id).expect("image exists");
        img.assets.retain(|a| a.channels != asset.channels);
        img.assets.push(asset);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    /// Window, overlap, scale and time kernel; the per-sensor channel map
    /// is ignored because the model names its inputs.
    pub grid: GridConfig,
    pub kernel: BoundaryKernel,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub qa_channel: Option<String>,
    #[serde(default = "all_bits")]
    pub qa_bad_bits: u32,
}

fn all_bits() -> u32 {
    u32::MAX
}

impl PredictConfig {
    pub fn new(grid: GridConfig, out_dir: impl Into<PathBuf>) -> Self {
        Self { grid, kernel: BoundaryKernel::default(), out_dir: out_dir.into(), qa_channel: None, qa_bad_bits: u32::MAX }
    }
}

/// Runs `model` over every grid window of every frame that has all of its
/// inputs and returns one finalized heatmap per (head, frame).
pub fn predict_heatmaps(m: &Manifest, model: &dyn PixelModel, cfg: &PredictConfig) -> Result<Vec<Vec<Heatmap>>> {
    cfg.kernel.validate()?;
    let inputs = model.inputs();
    let mut grid = cfg.grid.clone();
    grid.channels.clear();
    let targets = build_grid(m, &grid)?;
    let eligible = |id: i64| m.image(id).is_some_and(|f| inputs.iter().all(|c| f.find_channel(c).is_some()));
    let mut by_frame: BTreeMap<i64, Vec<(usize, usize, usize, usize)>> = BTreeMap::new();
    for t in &targets {
        if eligible(t.anchor_id) {
            by_frame.entry(t.anchor_id).or_default().push((t.x0, t.y0, t.width, t.height));
        }
    }
    if by_frame.is_empty() {
        return Err(StitchError::NoEligibleFrames(inputs.join(", ")));
    }
    let cache = RasterCache::new();
    let heads = model.heads();
    let frames: Vec<(i64, Vec<(usize, usize, usize, usize)>)> = by_frame.into_iter().collect();
    let per_frame: Vec<Result<Vec<Heatmap>>> = frames
        .par_iter()
        .map(|(id, windows)| {
            let img = m.image(*id).expect("eligible");
            let video = m.video(img.video_id).ok_or_else(|| StitchError::Model(format!("video {} missing", img.video_id)))?;
            let (sw, sh) = crate::manifest::scaled_extent(video.width, video.height, grid.scale);
            let view = build_view(m, &cache, *id, inputs, Space::Video, grid.scale)?;
            let qa_view = match cfg.qa_channel.as_deref().filter(|q| img.find_channel(q).is_some()) {
                Some(q) => Some(build_view(m, &cache, *id, &[q], Space::Video, grid.scale)?),
                None => None,
            };
            let preds: Vec<Result<(usize, usize, Vec<Array3<f64>>, Array2<f64>)>> = windows
                .par_iter()
                .map(|&(x0, y0, w, h)| {
                    let patch: Array3<f64> = evaluate_optimized(&view.clone().crop(x0 as i64, y0 as i64, w, h)?)?;
                    let low = match &qa_view {
                        Some(q) => {
                            let qa: Array3<f64> = evaluate_optimized(&q.clone().crop(x0 as i64, y0 as i64, w, h)?)?;
                            Some(qa.index_axis(ndarray::Axis(0), 0).mapv(|v| v.is_nan() || (v.round() as i64 as u32) & cfg.qa_bad_bits != 0))
                        }
                        None => None,
                    };
                    let validity = input_weights(patch.view(), low.as_ref().map(|l| l.view()));
                    let out = model.predict(patch.view());
                    if out.len() != heads.len() {
                        return Err(StitchError::Model(format!("{} returned {} heads, declared {}", model.name(), out.len(), heads.len())));
                    }
                    Ok((x0, y0, out, validity))
                })
                .collect();
            let mut bufs: Vec<AccumBuffer> = heads.iter().map(|hd| AccumBuffer::new(hd.channels.len(), sh, sw)).collect();
            for p in preds {
                let (x0, y0, out, validity) = p?;
                for (buf, pred) in bufs.iter_mut().zip(&out) {
                    buf.accumulate(x0, y0, pred.view(), validity.view(), &cfg.kernel)?;
                }
            }
            Ok(bufs.iter().map(|b| Heatmap { image_id: *id, scale: grid.scale, values: b.finalize() }).collect())
        })
        .collect();
    let mut by_head: Vec<Vec<Heatmap>> = heads.iter().map(|_| Vec::new()).collect();
    for r in per_frame {
        for (k, hm) in r?.into_iter().enumerate() {
            by_head[k].push(hm);
        }
    }
    Ok(by_head)
}

/// Grid → view → model → accumulate → finalize → write, for every head.
pub fn run_prediction(m: &Manifest, model: &dyn PixelModel, cfg: &PredictConfig) -> Result<Manifest> {
    let maps = predict_heatmaps(m, model, cfg)?;
    let mut out = m.clone();
    for (head, hms) in model.heads().iter().zip(&maps) {
        out = write_heatmaps(&out, hms, head, &cfg.out_dir)?;
    }
    Ok(out)
}

/// Applies `model` to a whole frame at once, the reference a stitched
/// prediction is compared against.
pub fn dense_prediction(m: &Manifest, model: &dyn PixelModel, image_id: i64, scale: f64) -> Result<Vec<Array3<f64>>> {
    let cache = RasterCache::new();
    let view = build_view(m, &cache, image_id, model.inputs(), Space::Video, scale)?;
    let x: Array3<f64> = evaluate_optimized(&view)?;
    Ok(model.predict(x.view()))
}
