mod commands;
mod rasterio;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use stkit::pipeline::{PipelineConfig, FIELDS};

/// Spacetime raster pipeline toolkit.
#[derive(Debug, Parser)]
#[command(name = "stkit", version, propagate_version = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// JSON file with pipeline configuration fields; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Print machine-readable results to standard output.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads (default: machine parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log verbosity on standard error.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: log::LevelFilter,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Pipeline configuration overrides.
#[derive(Debug, Args, Default)]
#[command(next_help_heading = "Configuration")]
pub struct Overrides {
    /// Prediction window side in sampling pixels (default 64) [toolkit]
    #[arg(long, global = true)]
    pub window: Option<usize>,
    /// Prediction grid overlap fraction in [0, 1) (default 0.5) [toolkit]
    #[arg(long, global = true)]
    pub overlap: Option<f64>,
    /// BAS sampling scale of video space (default 0.5) [toolkit]
    #[arg(long, global = true)]
    pub bas_scale: Option<f64>,
    /// AC sampling scale of video space (default 1.0) [toolkit]
    #[arg(long, global = true)]
    pub ac_scale: Option<f64>,
    /// Stitching ramp margin fraction in (0, 0.5] (default 0.25) [toolkit]
    #[arg(long, global = true)]
    pub kernel_margin: Option<f64>,
    /// Stitching minimum weight in (0, 1] (default 0.01) [toolkit]
    #[arg(long, global = true)]
    pub kernel_floor: Option<f64>,
    /// Yearly time-average reducer (default median) [toolkit]
    #[arg(long, global = true)]
    pub reducer: Option<ReducerArg>,
    /// Quality-flag channel, "none" to disable (default qa) [toolkit]
    #[arg(long, global = true)]
    pub qa_channel: Option<String>,
    /// QA bits marking low quality (default all bits) [toolkit]
    #[arg(long, global = true)]
    pub qa_bad_bits: Option<u32>,
    /// BAS binarization threshold on the time-max saliency (default 0.375) [paper]
    #[arg(long, global = true)]
    pub binarize: Option<f64>,
    /// Smallest kept BAS polygon in m² (default 7200) [paper]
    #[arg(long, global = true)]
    pub min_area: Option<f64>,
    /// Largest kept BAS polygon in m² (default 8e6) [paper]
    #[arg(long, global = true)]
    pub max_area: Option<f64>,
    /// Yearly mean saliency gate (default 0.3) [paper]
    #[arg(long, global = true)]
    pub bas_score: Option<f64>,
    /// AC response binarization threshold (default 0.3) [paper]
    #[arg(long, global = true)]
    pub ac_thresh: Option<f64>,
    /// Smallest kept AC region in pixels (default 16) [toolkit]
    #[arg(long, global = true)]
    pub min_pixels: Option<usize>,
    /// AC singular ac-salient gate (default 0.3) [paper]
    #[arg(long, global = true)]
    pub site_thresh: Option<f64>,
    /// Per-frame class score gate (default 0.3) [paper]
    #[arg(long, global = true)]
    pub class_thresh: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReducerArg {
    Median,
    Mean,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Manifest tools.
    #[command(subcommand)]
    Manifest(ManifestCmd),
    /// Tiled raster tools.
    #[command(subcommand)]
    Raster(RasterCmd),
    /// Spacetime sample grids.
    #[command(subcommand)]
    Sample(SampleCmd),
    /// One averaged frame per video, sensor and calendar year.
    Timeavg {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for the averaged rasters.
        #[arg(long)]
        out_dir: PathBuf,
        /// Output manifest path.
        #[arg(long)]
        out: PathBuf,
        /// Channels re-attached to the nearest averaged frame instead of averaged.
        #[arg(long, value_delimiter = ',')]
        aux: Vec<String>,
    },
    /// Stitched prediction of a named toy model.
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        /// bas-linear, ac-linear or identity:<channel>.
        #[arg(long)]
        model: String,
        /// Weight archive for the linear models.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Sampling scale of video space.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Directory for the heatmap rasters.
        #[arg(long)]
        out_dir: PathBuf,
        /// Output manifest path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Site tracking from heatmaps.
    #[command(subcommand)]
    Track(TrackCmd),
    /// Weight archive surgery.
    #[command(subcommand)]
    Weights(WeightsCmd),
    /// Full runs.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Synthetic scenes with planted sites and toy weights.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "demo")]
        preset: Preset,
        /// Manifest file name inside the output directory.
        #[arg(long, default_value = "scene.kwcoco.json")]
        name: String,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Demo,
    Mini,
}

#[derive(Debug, Subcommand)]
pub enum ManifestCmd {
    /// Checks references, warps, channels and timestamps.
    Validate { path: PathBuf },
    /// Per-sensor, per-channel statistics and category frequencies.
    Stats {
        path: PathBuf,
        /// Reuse or write cached statistics in this directory.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum RasterCmd {
    /// Builds a tiled raster from a flat binary (C×H×W little-endian) or a PNG.
    Import {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Flat binary only.
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long, value_enum)]
        dtype: Option<rasterio::DTypeArg>,
        #[arg(long)]
        nodata: Option<f64>,
        #[arg(long, default_value_t = 256)]
        tile: usize,
        /// Pyramid levels (default: automatic).
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        quant_scale: f64,
        #[arg(long, default_value_t = 0.0)]
        quant_offset: f64,
    },
    /// Writes one level as a flat binary (stored type) or an 8-bit PNG.
    Export {
        #[arg(long)]
        input: PathBuf,
        /// `.png` selects PNG; anything else writes flat binary.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        level: usize,
        /// PNG channels (1 or 3), default the first one or three.
        #[arg(long, value_delimiter = ',')]
        bands: Vec<usize>,
        /// PNG stretch range "lo,hi" on real values (default min,max).
        #[arg(long, value_delimiter = ',', num_args = 2)]
        range: Vec<f64>,
    },
    /// Header and pyramid layout.
    Info { path: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum SampleCmd {
    /// Regular spatial grid crossed with one anchor per frame.
    Grid {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Time kernel as day offsets, e.g. "-365,0,365".
        #[arg(long, default_value = "0", allow_hyphen_values = true)]
        time_kernel: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum TrackCmd {
    /// Site candidates from `salient` heatmaps.
    Bas {
        #[arg(long)]
        manifest: PathBuf,
        /// Scale the heatmaps were predicted at (default: bas_scale).
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// AC refinement and phase labels of BAS sites.
    Ac {
        #[arg(long)]
        manifest: PathBuf,
        /// BAS site export.
        #[arg(long)]
        sites: PathBuf,
        /// Scale the heatmaps were predicted at (default: ac_scale).
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum WeightsCmd {
    /// Transfers the best-matching source weights into the destination.
    Graft {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        dst: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Lineage timestamp (default: the Unix epoch, for reproducible output).
        #[arg(long, default_value = "1970-01-01T00:00:00Z")]
        timestamp: String,
        /// Also write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Shrink towards zero and add Gaussian noise (seeded by --seed).
    Perturb {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        sigma: f64,
    },
    /// Parameter names, shapes and lineage.
    Info { path: PathBuf },
    /// Writes the toy donor (five-band) and destination (four-band) archives.
    Toy {
        #[arg(long)]
        donor: PathBuf,
        #[arg(long)]
        dest: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum PipelineCmd {
    /// timeavg → predict BAS → track BAS → predict AC → track AC.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Failure kinds and their exit codes.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let e = e.into();
        if is_validation(&e) {
            Failure::Validation(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

/// Bad input files and settings are validation errors; everything else
/// (I/O, evaluation) is a runtime error.
fn is_validation(e: &anyhow::Error) -> bool {
    use stkit::graft::GraftError;
    use stkit::manifest::ManifestError;
    use stkit::pipeline::PipelineError;
    use stkit::raster::RasterError;
    use stkit::sampler::SamplerError;
    use stkit::stitch::StitchError;
    use stkit::track::TrackError;
    e.chain().any(|c| {
        if let Some(m) = c.downcast_ref::<ManifestError>() {
            return !matches!(m, ManifestError::Io { .. });
        }
        if let Some(s) = c.downcast_ref::<SamplerError>() {
            return matches!(s, SamplerError::Config(_) | SamplerError::Timestamp { .. });
        }
        if let Some(s) = c.downcast_ref::<StitchError>() {
            return matches!(s, StitchError::Kernel(_) | StitchError::Model(_) | StitchError::NoEligibleFrames(_));
        }
        if let Some(p) = c.downcast_ref::<PipelineError>() {
            return matches!(p, PipelineError::Config(_));
        }
        if let Some(t) = c.downcast_ref::<TrackError>() {
            return matches!(t, TrackError::Config(_) | TrackError::Json(_));
        }
        if let Some(g) = c.downcast_ref::<GraftError>() {
            return !matches!(g, GraftError::Io { .. });
        }
        if let Some(r) = c.downcast_ref::<RasterError>() {
            return !matches!(r, RasterError::Io { .. });
        }
        c.downcast_ref::<commands::Usage>().is_some()
    })
}

/// Configuration from `--config` with flag overrides applied, validated.
pub fn resolve_config(g: &Global) -> Result<PipelineConfig, Failure> {
    let mut c = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let o = &g.overrides;
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = o.$f { c.$f = v; } )* };
    }
    set!(window, overlap, bas_scale, ac_scale, kernel_margin, kernel_floor, qa_bad_bits, binarize, min_area, max_area, bas_score, ac_thresh, min_pixels, site_thresh, class_thresh);
    if let Some(r) = o.reducer {
        c.reducer = match r {
            ReducerArg::Median => stkit::sampler::Reducer::Median,
            ReducerArg::Mean => stkit::sampler::Reducer::Mean,
        };
    }
    if let Some(q) = &o.qa_channel {
        c.qa_channel = (q != "none").then(|| q.clone());
    }
    c.validate()?;
    Ok(c)
}

fn config_help() -> String {
    let mut s = String::from("Configuration fields (JSON keys for --config, same names as flags):\n");
    for (name, prov, doc) in FIELDS {
        s.push_str(&format!("  {name:<14} {doc} {}\n", prov.tag()));
    }
    s
}

fn command() -> clap::Command {
    fn annotate(cmd: clap::Command, help: &str) -> clap::Command {
        let cmd = cmd.after_long_help(help.to_string());
        let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
        names.into_iter().fold(cmd, |c, n| c.mut_subcommand(n, |s| annotate(s, help)))
    }
    annotate(Cli::command(), &config_help())
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::new().filter_level(cli.global.log_level).target(env_logger::Target::Stderr).init();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Validation(e) | Failure::Runtime(e)) = &f;
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}
