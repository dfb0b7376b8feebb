//! Flat binary and PNG conversion for tiled rasters.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use ndarray::Array3;
use stkit::raster::{DType, RasterData, RasterReader};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DTypeArg {
    U8,
    I16,
    F32,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::U8 => DType::U8,
            DTypeArg::I16 => DType::I16,
            DTypeArg::F32 => DType::F32,
        }
    }
}

pub fn is_png(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Reads a C×H×W little-endian flat binary.
pub fn read_flat(path: &Path, dtype: DType, c: usize, h: usize, w: usize) -> Result<RasterData> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let n = c * h * w;
    if bytes.len() != n * dtype.size() {
        bail!(super::commands::Usage(format!("{} holds {} bytes, expected {} for {c}×{h}×{w} {dtype:?}", path.display(), bytes.len(), n * dtype.size())));
    }
    Ok(match dtype {
        DType::U8 => RasterData::U8(Array3::from_shape_vec((c, h, w), bytes)?),
        DType::I16 => RasterData::I16(Array3::from_shape_vec((c, h, w), bytes.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect())?),
        DType::F32 => RasterData::F32(Array3::from_shape_vec((c, h, w), bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())?),
    })
}

pub fn write_flat(path: &Path, data: &RasterData) -> Result<()> {
    let mut out = Vec::new();
    match data {
        RasterData::U8(a) => out.extend(a.iter()),
        RasterData::I16(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        RasterData::F32(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// An 8-bit PNG as a u8 raster: gray, gray+alpha, RGB or RGBA channels.
pub fn read_png(path: &Path) -> Result<RasterData> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?;
    let c = img.color().channel_count() as usize;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = match c {
        1 => img.into_luma8().into_raw(),
        2 => img.into_luma_alpha8().into_raw(),
        3 => img.into_rgb8().into_raw(),
        _ => img.into_rgba8().into_raw(),
    };
    let c = c.min(4);
    let hwc = Array3::from_shape_vec((h, w, c), raw)?;
    Ok(RasterData::U8(hwc.permuted_axes([2, 0, 1]).as_standard_layout().into_owned()))
}

/// Stretches `bands` of a level linearly from `range` (or min/max) to 0–255.
/// NaN and nodata pixels become 0.
pub fn write_png(path: &Path, reader: &RasterReader, level: usize, bands: &[usize], range: Option<(f64, f64)>) -> Result<()> {
    let hd = reader.header();
    let bands: Vec<usize> = if bands.is_empty() { (0..if hd.channels >= 3 { 3 } else { 1 }).collect() } else { bands.to_vec() };
    if !(bands.len() == 1 || bands.len() == 3) || bands.iter().any(|&b| b >= hd.channels) {
        bail!(super::commands::Usage(format!("PNG export needs 1 or 3 bands below {}, got {bands:?}", hd.channels)));
    }
    let (w, h) = hd.level_dims(level);
    let vals: Array3<f64> = reader.read_region_real(level, 0, 0, w, h)?;
    let (lo, hi) = range.unwrap_or_else(|| {
        let finite = bands.iter().flat_map(|&b| vals.index_axis(ndarray::Axis(0), b).iter().copied().collect::<Vec<_>>()).filter(|v| v.is_finite());
        finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut buf = Vec::with_capacity(w * h * bands.len());
    for y in 0..h {
        for x in 0..w {
            for &b in &bands {
                let v = vals[[b, y, x]];
                buf.push(if v.is_finite() { ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 });
            }
        }
    }
    let color = if bands.len() == 3 { image::ColorType::Rgb8 } else { image::ColorType::L8 };
    image::save_buffer(path, &buf, w as u32, h as u32, color).with_context(|| format!("writing {}", path.display()))
}
