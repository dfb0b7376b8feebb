//! End-to-end run: time averaging, BAS prediction and tracking, AC
//! prediction and tracking, driven by one validated configuration.

pub mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graft::WeightTree;
use crate::manifest::{save_manifest, Manifest, ManifestError};
use crate::sampler::{time_average, GridConfig, Reducer, SamplerError, TimeAverageConfig};
use crate::stitch::{run_prediction, BoundaryKernel, LinearPixelModel, PredictConfig, StitchError};
use crate::track::{export_sites, track_ac, track_bas, SiteProposal, TrackConfig, TrackError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Stitch(#[from] StitchError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Raster(#[from] crate::raster::RasterError),
    #[error(transparent)]
    Graft(#[from] crate::graft::GraftError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Whether a default comes from the published method or was chosen here.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Paper,
    Toolkit,
}

impl Provenance {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Paper => "[paper]",
            Self::Toolkit => "[toolkit]",
        }
    }
}

/// Every configuration field: name, provenance, description.
pub const FIELDS: &[(&str, Provenance, &str)] = &[
    ("window", Provenance::Toolkit, "prediction window side in sampling pixels (default 64)"),
    ("overlap", Provenance::Toolkit, "prediction grid overlap fraction in [0, 1) (default 0.5)"),
    ("bas_scale", Provenance::Toolkit, "BAS sampling scale of video space (default 0.5)"),
    ("ac_scale", Provenance::Toolkit, "AC sampling scale of video space (default 1.0)"),
    ("kernel_margin", Provenance::Toolkit, "stitching ramp margin fraction in (0, 0.5] (default 0.25)"),
    ("kernel_floor", Provenance::Toolkit, "stitching minimum weight in (0, 1] (default 0.01)"),
    ("reducer", Provenance::Toolkit, "yearly time-average reducer, median or mean (default median)"),
    ("qa_channel", Provenance::Toolkit, "quality-flag channel, null to disable (default \"qa\")"),
    ("qa_bad_bits", Provenance::Toolkit, "QA bits marking low quality (default all bits)"),
    ("binarize", Provenance::Paper, "BAS binarization threshold on the time-max saliency (default 0.375)"),
    ("min_area", Provenance::Paper, "smallest kept BAS polygon, m² (default 7200)"),
    ("max_area", Provenance::Paper, "largest kept BAS polygon, m² (default 8e6)"),
    ("bas_score", Provenance::Paper, "yearly mean saliency gate (default 0.3)"),
    ("ac_thresh", Provenance::Paper, "AC response binarization threshold (default 0.3)"),
    ("min_pixels", Provenance::Toolkit, "smallest kept AC region in pixels (default 16)"),
    ("site_thresh", Provenance::Paper, "AC singular ac-salient gate (default 0.3)"),
    ("class_thresh", Provenance::Paper, "per-frame class score gate (default 0.3)"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub window: usize,
    pub overlap: f64,
    pub bas_scale: f64,
    pub ac_scale: f64,
    pub kernel_margin: f64,
    pub kernel_floor: f64,
    pub reducer: Reducer,
    pub qa_channel: Option<String>,
    pub qa_bad_bits: u32,
    pub binarize: f64,
    pub min_area: f64,
    pub max_area: f64,
    pub bas_score: f64,
    pub ac_thresh: f64,
    pub min_pixels: usize,
    pub site_thresh: f64,
    pub class_thresh: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let t = TrackConfig::default();
        let k = BoundaryKernel::default();
        Self {
            window: 64,
            overlap: 0.5,
            bas_scale: 0.5,
            ac_scale: 1.0,
            kernel_margin: k.margin,
            kernel_floor: k.floor,
            reducer: Reducer::Median,
            qa_channel: Some("qa".into()),
            qa_bad_bits: u32::MAX,
            binarize: t.binarize,
            min_area: t.min_area,
            max_area: t.max_area,
            bas_score: t.bas_score,
            ac_thresh: t.ac_thresh,
            min_pixels: t.min_pixels,
            site_thresh: t.site_thresh,
            class_thresh: t.class_thresh,
        }
    }
}

impl PipelineConfig {
    pub fn track(&self) -> TrackConfig {
        TrackConfig {
            binarize: self.binarize,
            min_area: self.min_area,
            max_area: self.max_area,
            bas_score: self.bas_score,
            ac_thresh: self.ac_thresh,
            min_pixels: self.min_pixels,
            site_thresh: self.site_thresh,
            class_thresh: self.class_thresh,
        }
    }

    pub fn kernel(&self) -> BoundaryKernel {
        BoundaryKernel { margin: self.kernel_margin, floor: self.kernel_floor }
    }

    pub fn grid(&self, scale: f64) -> GridConfig {
        GridConfig::new((self.window, self.window), self.overlap, scale)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad(format!("overlap must lie in [0, 1), got {}", self.overlap));
        }
        for (name, s) in [("bas_scale", self.bas_scale), ("ac_scale", self.ac_scale)] {
            if !(s > 0.0 && s <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {s}"));
            }
        }
        self.kernel().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.track().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Files written by [`run_pipeline`], all under the output directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineOutputs {
    pub timeavg_manifest: PathBuf,
    pub bas_manifest: PathBuf,
    pub bas_sites: PathBuf,
    pub ac_manifest: PathBuf,
    pub ac_sites: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub outputs: PipelineOutputs,
    pub bas_sites: Vec<SiteProposal>,
    pub ac_sites: Vec<SiteProposal>,
}

/// Runs every stage on `m` with the linear toy models read from `weights`
/// (`heads.saliency` for BAS, `heads.class` for AC).
pub fn run_pipeline(m: &Manifest, weights: &WeightTree, cfg: &PipelineConfig, out_dir: impl AsRef<Path>) -> Result<PipelineRun> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out).map_err(|source| PipelineError::Io { path: out.to_path_buf(), source })?;
    let bas_model = LinearPixelModel::bas(weights)?;
    let ac_model = LinearPixelModel::ac(weights)?;
    let track = cfg.track();

    log::info!("time averaging {} frames", m.images.len());
    let mut ta = TimeAverageConfig::new(out.join("timeavg"));
    ta.reducer = cfg.reducer;
    ta.qa_channel = cfg.qa_channel.clone();
    ta.qa_bad_bits = cfg.qa_bad_bits;
    let averaged = time_average(m, &ta)?;
    let outputs = PipelineOutputs {
        timeavg_manifest: out.join("timeavg.kwcoco.json"),
        bas_manifest: out.join("bas.kwcoco.json"),
        bas_sites: out.join("bas_sites.json"),
        ac_manifest: out.join("ac.kwcoco.json"),
        ac_sites: out.join("ac_sites.json"),
    };
    save_manifest(&averaged, &outputs.timeavg_manifest)?;

    log::info!("BAS prediction at scale {}", cfg.bas_scale);
    let mut pc = PredictConfig::new(cfg.grid(cfg.bas_scale), out.join("bas"));
    pc.kernel = cfg.kernel();
    let with_bas = run_prediction(&averaged, &bas_model, &pc)?;
    save_manifest(&with_bas, &outputs.bas_manifest)?;
    let bas_sites = track_bas(&with_bas, &track, cfg.bas_scale)?;
    export_sites(&bas_sites, &track, &outputs.bas_sites)?;
    log::info!("{} BAS candidates, {} accepted", bas_sites.len(), bas_sites.iter().filter(|s| s.accepted()).count());

    log::info!("AC prediction at scale {}", cfg.ac_scale);
    let mut pc = PredictConfig::new(cfg.grid(cfg.ac_scale), out.join("ac"));
    pc.kernel = cfg.kernel();
    let with_ac = run_prediction(&with_bas, &ac_model, &pc)?;
    save_manifest(&with_ac, &outputs.ac_manifest)?;
    let ac_sites = track_ac(&with_ac, &bas_sites, &track, cfg.ac_scale)?;
    export_sites(&ac_sites, &track, &outputs.ac_sites)?;
    log::info!("{} AC sites, {} accepted", ac_sites.len(), ac_sites.iter().filter(|s| s.accepted()).count());

    Ok(PipelineRun { outputs, bas_sites, ac_sites })
}
