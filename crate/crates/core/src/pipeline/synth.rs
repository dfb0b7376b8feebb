//! Synthetic multi-sensor scenes with planted construction sites and known
//! ground truth, plus the toy model weights that detect them.
//!
//! Pixels carry `red|green|blue|nir` reflectances drawn around one
//! prototype per phase. `S2` frames are stored at video resolution as f32;
//! `L8` frames at half resolution as quantized i16. Both carry a `qa` band
//! whose bit 0 marks cloud.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::graft::{Tensor, WeightTree};
use crate::manifest::{save_manifest, Annotation, Asset, Category, ChannelList, ImageFrame, Manifest, Quantization, Video};
use crate::raster::{auto_levels, write_raster, RasterData, RasterParams};
use crate::stitch::AC_CLASSES;
use crate::track::{Phase, Polygon};
use crate::Affine;

/// Reflectance prototype (red, green, blue, nir) per phase.
pub fn prototype(p: Phase) -> [f64; 4] {
    match p {
        Phase::NoActivity => [0.2, 0.3, 0.2, 0.7],
        Phase::SitePreparation => [0.7, 0.4, 0.2, 0.3],
        Phase::ActiveConstruction => [0.3, 0.4, 0.8, 0.3],
        Phase::PostConstruction => [0.3, 0.8, 0.3, 0.3],
    }
}

const CLOUD: [f64; 4] = [0.95, 0.95, 0.95, 0.95];
const L8_SCALE: f64 = 1e-4;
const L8_NODATA: f64 = -32768.0;

/// A blob painted with one phase per year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    /// Union of `[x0, y0, x1, y1)` rectangles in video pixels.
    pub rects: Vec<[usize; 4]>,
    /// Phase per year, aligned with the scene's years.
    pub phases: Vec<Phase>,
    /// Whether a detector should report it.
    pub planted: bool,
}

impl BlobSpec {
    fn contains(&self, x: usize, y: usize) -> bool {
        self.rects.iter().any(|r| x >= r[0] && x < r[2] && y >= r[1] && y < r[3])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSpec {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub blobs: Vec<BlobSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub first_year: i32,
    pub years: usize,
    /// Acquisition months per year of the full-resolution sensor.
    pub s2_months: Vec<u32>,
    /// Acquisition months per year of the half-resolution sensor.
    pub l8_months: Vec<u32>,
    pub videos: Vec<VideoSpec>,
    /// Uniform reflectance noise amplitude.
    pub noise: f64,
    /// Probability a frame gets a QA-flagged cloud, and a NaN hole.
    pub cloud_rate: f64,
    pub hole_rate: f64,
    pub seed: u64,
}

fn phases(seq: &[u8]) -> Vec<Phase> {
    seq.iter().map(|&k| Phase::ALL[k as usize]).collect()
}

impl SynthConfig {
    /// Two videos over six years with three planted sites and two decoys
    /// (one too small, one never salient).
    pub fn demo(seed: u64) -> Self {
        Self {
            first_year: 2016,
            years: 6,
            s2_months: vec![3, 9],
            l8_months: vec![6],
            videos: vec![
                VideoSpec {
                    name: "alpha".into(),
                    width: 192,
                    height: 160,
                    blobs: vec![
                        BlobSpec { rects: vec![[24, 20, 64, 52]], phases: phases(&[0, 1, 2, 2, 3, 3]), planted: true },
                        BlobSpec { rects: vec![[112, 88, 160, 136]], phases: phases(&[0, 0, 1, 2, 2, 3]), planted: true },
                        BlobSpec { rects: vec![[20, 110, 60, 150]], phases: phases(&[0, 3, 3, 3, 3, 3]), planted: false },
                    ],
                },
                VideoSpec {
                    name: "beta".into(),
                    width: 160,
                    height: 128,
                    blobs: vec![
                        BlobSpec { rects: vec![[40, 30, 100, 60], [40, 60, 70, 100]], phases: phases(&[0, 0, 0, 1, 2, 2]), planted: true },
                        BlobSpec { rects: vec![[130, 100, 134, 104]], phases: phases(&[0, 2, 2, 2, 2, 2]), planted: false },
                    ],
                },
            ],
            noise: 0.03,
            cloud_rate: 0.35,
            hole_rate: 0.35,
            seed,
        }
    }

    /// A small scene: two videos, two years, one frame per sensor per year.
    pub fn mini(seed: u64) -> Self {
        Self {
            first_year: 2020,
            years: 2,
            s2_months: vec![4],
            l8_months: vec![8],
            videos: vec![
                VideoSpec {
                    name: "alpha".into(),
                    width: 32,
                    height: 32,
                    blobs: vec![BlobSpec { rects: vec![[8, 8, 20, 18]], phases: phases(&[1, 2]), planted: true }],
                },
                VideoSpec {
                    name: "beta".into(),
                    width: 32,
                    height: 24,
                    blobs: vec![BlobSpec { rects: vec![[4, 4, 14, 14]], phases: phases(&[0, 2]), planted: true }],
                },
            ],
            noise: 0.02,
            cloud_rate: 0.0,
            hole_rate: 0.5,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        for v in &self.videos {
            if v.width % 2 != 0 || v.height % 2 != 0 {
                return Err(PipelineError::Config(format!("video {} needs even dimensions", v.name)));
            }
            if v.blobs.iter().any(|b| b.phases.len() != self.years) {
                return Err(PipelineError::Config(format!("video {}: every blob needs one phase per year", v.name)));
            }
        }
        Ok(())
    }
}

/// Ground truth of one planted site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSite {
    pub video_id: i64,
    /// Video-space pixel outline.
    pub polygon: Polygon,
    /// First Site Preparation frame, or first Active Construction frame.
    pub start: String,
    /// Last Active Construction frame.
    pub end: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
    pub truth: Vec<PlantedSite>,
}

struct Acq {
    sensor: &'static str,
    timestamp: String,
    year_index: usize,
}

fn acquisitions(cfg: &SynthConfig) -> Vec<Acq> {
    let mut out = Vec::new();
    for y in 0..cfg.years {
        let year = cfg.first_year + y as i32;
        let mut months: Vec<(u32, &'static str)> = cfg.s2_months.iter().map(|&m| (m, "S2")).collect();
        months.extend(cfg.l8_months.iter().map(|&m| (m, "L8")));
        months.sort();
        for (m, sensor) in months {
            out.push(Acq { sensor, timestamp: format!("{year}-{m:02}-15T00:00:00Z"), year_index: y });
        }
    }
    out
}

fn rect(rng: &mut ChaCha8Rng, w: usize, h: usize, max: usize) -> [usize; 4] {
    let (rw, rh) = (rng.random_range(4..=max.min(w)), rng.random_range(4..=max.min(h)));
    let (x0, y0) = (rng.random_range(0..=w - rw), rng.random_range(0..=h - rh));
    [x0, y0, x0 + rw, y0 + rh]
}

/// Pixel outline of a blob, traced from its mask.
fn blob_polygon(b: &BlobSpec, w: usize, h: usize) -> Polygon {
    let mask = ndarray::Array2::from_shape_fn((h, w), |(y, x)| b.contains(x, y));
    crate::track::polygon_of(mask.view())
}

/// Writes `cfg`'s scene under `dir` and returns its manifest and truth.
/// The manifest file is `<dir>/<name>`.
pub fn generate(cfg: &SynthConfig, dir: impl AsRef<Path>, name: &str) -> Result<SynthScene> {
    cfg.validate()?;
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PipelineError::Io { path, source }
    };
    std::fs::create_dir_all(dir.join("assets")).map_err(io(dir))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut m = Manifest { root: dir.to_path_buf(), ..Manifest::default() };
    m.categories = AC_CLASSES.iter().enumerate().map(|(i, n)| Category { id: i as i64 + 1, name: n.to_string() }).collect();
    let acqs = acquisitions(cfg);
    let mut truth = Vec::new();
    for (vi, spec) in cfg.videos.iter().enumerate() {
        let video_id = vi as i64 + 1;
        m.videos.push(Video { id: video_id, name: spec.name.clone(), width: spec.width, height: spec.height, target_gsd: 10.0 });
        for b in spec.blobs.iter().filter(|b| b.planted) {
            let times = |p: Phase| acqs.iter().filter(move |a| b.phases[a.year_index] == p).map(|a| a.timestamp.clone());
            let start = times(Phase::SitePreparation).next().or_else(|| times(Phase::ActiveConstruction).next());
            let end = times(Phase::ActiveConstruction).next_back().or_else(|| times(Phase::SitePreparation).next_back());
            let (Some(start), Some(end)) = (start, end) else {
                return Err(PipelineError::Config(format!("video {}: planted blob never under construction", spec.name)));
            };
            truth.push(PlantedSite { video_id, polygon: blob_polygon(b, spec.width, spec.height), start, end });
        }
        for (fi, a) in acqs.iter().enumerate() {
            let down = if a.sensor == "L8" { 2 } else { 1 };
            let (w, h) = (spec.width / down, spec.height / down);
            let cloud = rng.random_bool(cfg.cloud_rate).then(|| rect(&mut rng, w, h, w / 3));
            let hole = rng.random_bool(cfg.hole_rate).then(|| rect(&mut rng, w, h, w / 4));
            let mut pix = Array3::<f64>::zeros((4, h, w));
            let mut qa = Array3::<u8>::zeros((1, h, w));
            for y in 0..h {
                for x in 0..w {
                    // L8 pixels cover a 2×2 block: take the phase at its centre
                    let (vx, vy) = (x * down + down / 2, y * down + down / 2);
                    let phase = spec.blobs.iter().rev().find(|b| b.contains(vx, vy)).map_or(Phase::NoActivity, |b| b.phases[a.year_index]);
                    let mut v = prototype(phase);
                    let inside = |r: &Option<[usize; 4]>| r.is_some_and(|r| x >= r[0] && x < r[2] && y >= r[1] && y < r[3]);
                    if inside(&cloud) {
                        v = CLOUD;
                        qa[[0, y, x]] = 1;
                    }
                    for (k, &base) in v.iter().enumerate() {
                        pix[[k, y, x]] = if inside(&hole) { f64::NAN } else { base + rng.random_range(-cfg.noise..=cfg.noise) };
                    }
                }
            }
            let id = m.images.len() as i64 + 1;
            let stem = format!("assets/{}_{:03}_{}", spec.name, fi, a.sensor);
            let params = RasterParams::default().tile(64).levels(auto_levels(w, h));
            let (data, quant, nodata) = if a.sensor == "L8" {
                let q = pix.mapv(|v| if v.is_nan() { L8_NODATA } else { (v / L8_SCALE).round() });
                (RasterData::from_real(q.view(), crate::raster::DType::I16, Some(L8_NODATA))?, Some(Quantization { scale: L8_SCALE, offset: 0.0 }), Some(L8_NODATA))
            } else {
                (RasterData::F32(pix.mapv(|v| v as f32)), None, None)
            };
            let mut rp = params.nodata(nodata);
            if let Some(q) = quant {
                rp = rp.quantization(q);
            }
            write_raster(dir.join(format!("{stem}.tpr")), &data, rp)?;
            write_raster(dir.join(format!("{stem}_qa.tpr")), &RasterData::U8(qa), params)?;
            let asset = |file: String, channels: &str, quantization, nodata| Asset {
                file_path: file,
                channels: ChannelList::parse(channels).expect("static channel list"),
                width: w,
                height: h,
                warp_asset_to_image: Affine::identity(),
                quantization,
                nodata,
            };
            let frame_index = m.frames_of(video_id).len();
            m.images.push(ImageFrame {
                id,
                video_id,
                frame_index,
                timestamp: a.timestamp.clone(),
                sensor: a.sensor.into(),
                width: w,
                height: h,
                warp_image_to_video: Affine::scale(down as f64),
                assets: vec![
                    asset(format!("{stem}.tpr"), "red|green|blue|nir", quant, nodata),
                    asset(format!("{stem}_qa.tpr"), "qa", None, None),
                ],
            });
            for (bi, b) in spec.blobs.iter().enumerate().filter(|(_, b)| b.planted) {
                let phase = b.phases[a.year_index];
                if phase == Phase::NoActivity {
                    continue;
                }
                let poly = blob_polygon(b, spec.width, spec.height).scaled(1.0 / down as f64);
                let cat = AC_CLASSES[Phase::ALL.iter().position(|&p| p == phase).unwrap()];
                m.annotations.push(Annotation {
                    id: m.annotations.len() as i64 + 1,
                    image_id: id,
                    category: cat.into(),
                    polygon: poly.exterior,
                    track_id: Some(video_id * 100 + bi as i64),
                });
            }
        }
    }
    m.validate()?;
    let manifest_path = dir.join(name);
    save_manifest(&m, &manifest_path)?;
    std::fs::write(dir.join("truth.json"), serde_json::to_string_pretty(&truth).expect("truth serializes")).map_err(io(dir))?;
    Ok(SynthScene { manifest_path, manifest: m, truth })
}

fn rows_tensor(rows: &[[f64; 6]], inputs: usize) -> (Tensor, Tensor) {
    let w: Vec<f32> = rows.iter().flat_map(|r| r[1..=inputs].iter().map(|&v| v as f32)).collect();
    let b: Vec<f32> = rows.iter().map(|r| r[0] as f32).collect();
    (Tensor::from_f32(vec![rows.len(), inputs], &w).unwrap(), Tensor::from_f32(vec![rows.len()], &b).unwrap())
}

// [bias, red, green, blue, nir, swir]
const SALIENCY: [[f64; 6]; 1] = [[-7.5, 10.0, 0.0, 10.0, 0.0, 4.0]];
const CLASS: [[f64; 6]; 5] = [
    [-5.0, 0.0, 0.0, 0.0, 10.0, -2.0],
    [-5.0, 10.0, 0.0, 0.0, 0.0, 3.0],
    [-5.0, 0.0, 0.0, 10.0, 0.0, 1.0],
    [-6.0, 0.0, 10.0, 0.0, 0.0, -1.0],
    [-7.5, 10.0, 0.0, 10.0, 0.0, 4.0],
];

/// A donor network trained with an extra short-wave infrared input: heads
/// take `red|green|blue|nir|swir` and a swir normalizer sits beside them.
pub fn donor_weights() -> WeightTree {
    let mut t = WeightTree::new();
    for (name, rows) in [("saliency", &SALIENCY[..]), ("class", &CLASS[..])] {
        let (w, b) = rows_tensor(rows, 5);
        t.insert(&format!("heads.{name}.weight"), w).unwrap();
        t.insert(&format!("heads.{name}.bias"), b).unwrap();
    }
    t.insert("stem.swir_norm.weight", Tensor::from_f32(vec![1], &[0.5]).unwrap()).unwrap();
    t
}

/// The zero-initialized four-band toy model the donor is grafted into.
pub fn toy_destination() -> WeightTree {
    let mut t = crate::stitch::LinearPixelModel::zero_tree(4, &crate::stitch::LinearPixelModel::bas_heads());
    let ac = crate::stitch::LinearPixelModel::zero_tree(4, &crate::stitch::LinearPixelModel::ac_heads());
    for (name, tensor) in ac.leaves() {
        t.insert(&name, tensor.clone()).unwrap();
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graft_keeps_four_band_logits() {
        let (out, report) = crate::graft::graft(&donor_weights(), &toy_destination(), "2024-01-01T00:00:00Z").unwrap();
        assert_eq!(report.fraction, 1.0);
        assert_eq!(report.unmatched_src, vec!["stem.swir_norm.weight".to_string()]);
        let w = out.get("heads.class.weight").unwrap().to_f64_vec();
        assert_eq!(&w[..4], &[0.0, 0.0, 0.0, 10.0]);
        crate::stitch::LinearPixelModel::ac(&out).unwrap();
        crate::stitch::LinearPixelModel::bas(&out).unwrap();
    }

    #[test]
    fn mini_scene_counts() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate(&SynthConfig::mini(1), dir.path(), "m.kwcoco.json").unwrap();
        assert_eq!(s.manifest.images.len(), 8);
        assert_eq!(s.truth.len(), 2);
        assert_eq!(crate::manifest::load_manifest(&s.manifest_path).unwrap(), s.manifest);
    }
}
