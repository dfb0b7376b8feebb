use std::io::Write;
use std::path::Path;

use anyhow::Context;
use serde_json::{json, Value};

use stkit::graft::{archive_hash, graft, load_archive, save_archive, shrink_and_perturb};
use stkit::manifest::{load_manifest, save_manifest, Manifest};
use stkit::pipeline::synth::{donor_weights, generate, toy_destination, SynthConfig};
use stkit::pipeline::run_pipeline;
use stkit::raster::{auto_levels, write_raster, RasterParams, RasterReader};
use stkit::sampler::{build_grid, compute_stats, compute_stats_cached, time_average, TimeKernel, TimeAverageConfig};
use stkit::stitch::{named_model, run_prediction, PredictConfig};
use stkit::track::{export_sites, load_sites, track_ac, track_bas};

use crate::rasterio;
use crate::{resolve_config, Cli, Command, Failure, ManifestCmd, PipelineCmd, Preset, RasterCmd, SampleCmd, TrackCmd, WeightsCmd};

/// A command-line mistake the parser cannot catch.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Validation(Usage(msg.into()).into())
}

/// Writes `value` to standard output as JSON, or `text` otherwise.
/// A closed pipe on the reading side is not an error.
fn emit(cli: &Cli, value: Value, text: impl FnOnce() -> String) {
    let t = if cli.global.json { serde_json::to_string_pretty(&value).expect("json value") } else { text() };
    if !t.is_empty() {
        let _ = writeln!(std::io::stdout().lock(), "{t}");
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn open_manifest(path: &Path) -> Result<Manifest, Failure> {
    let m = load_manifest(path)?;
    m.validate()?;
    Ok(m)
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = resolve_config(&cli.global)?;
    match &cli.command {
        Command::Manifest(ManifestCmd::Validate { path }) => {
            let m = open_manifest(path)?;
            emit(cli, json!({"valid": true, "videos": m.videos.len(), "images": m.images.len(), "annotations": m.annotations.len()}), || {
                format!("{}: ok ({} videos, {} images, {} annotations)", path.display(), m.videos.len(), m.images.len(), m.annotations.len())
            });
        }
        Command::Manifest(ManifestCmd::Stats { path, cache_dir }) => {
            let m = open_manifest(path)?;
            let stats = match cache_dir {
                Some(d) => {
                    std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
                    compute_stats_cached(&m, d)?
                }
                None => compute_stats(&m),
            };
            let v = serde_json::to_value(&stats).map_err(anyhow::Error::from)?;
            let text = serde_json::to_string_pretty(&v).map_err(anyhow::Error::from)?;
            emit(cli, v, || text);
        }
        Command::Raster(cmd) => raster(cli, cmd)?,
        Command::Sample(SampleCmd::Grid { manifest, out, scale, time_kernel }) => {
            let m = open_manifest(manifest)?;
            let mut grid = cfg.grid(*scale);
            grid.kernel = TimeKernel::parse(time_kernel)?;
            let targets = build_grid(&m, &grid)?;
            write_json(out, &targets)?;
            emit(cli, json!({"targets": targets.len(), "out": out}), || format!("{} targets → {}", targets.len(), out.display()));
        }
        Command::Timeavg { manifest, out_dir, out, aux } => {
            let m = open_manifest(manifest)?;
            let mut ta = TimeAverageConfig::new(out_dir);
            ta.reducer = cfg.reducer;
            ta.qa_channel = cfg.qa_channel.clone();
            ta.qa_bad_bits = cfg.qa_bad_bits;
            ta.aux_channels = aux.clone();
            let averaged = time_average(&m, &ta)?;
            save_manifest(&averaged, out)?;
            emit(cli, json!({"images": averaged.images.len(), "out": out}), || format!("{} averaged frames → {}", averaged.images.len(), out.display()));
        }
        Command::Predict { manifest, model, weights, scale, out_dir, out } => {
            let m = open_manifest(manifest)?;
            let tree = weights.as_ref().map(load_archive).transpose()?;
            let model = named_model(model, tree.as_ref()).map_err(|e| usage(e.to_string()))?;
            let mut pc = PredictConfig::new(cfg.grid(*scale), out_dir);
            pc.kernel = cfg.kernel();
            let pred = run_prediction(&m, model.as_ref(), &pc)?;
            save_manifest(&pred, out)?;
            emit(cli, json!({"images": pred.images.len(), "out": out}), || format!("heatmaps for {} frames → {}", pred.images.len(), out.display()));
        }
        Command::Track(TrackCmd::Bas { manifest, scale, out }) => {
            let m = open_manifest(manifest)?;
            let track = cfg.track();
            let sites = track_bas(&m, &track, scale.unwrap_or(cfg.bas_scale))?;
            export_sites(&sites, &track, out)?;
            summarize(cli, &sites, out);
        }
        Command::Track(TrackCmd::Ac { manifest, sites, scale, out }) => {
            let m = open_manifest(manifest)?;
            let track = cfg.track();
            let bas = load_sites(sites)?;
            let ac = track_ac(&m, &bas.features, &track, scale.unwrap_or(cfg.ac_scale))?;
            export_sites(&ac, &track, out)?;
            summarize(cli, &ac, out);
        }
        Command::Weights(cmd) => weights(cli, cmd)?,
        Command::Pipeline(PipelineCmd::Run { manifest, weights, out_dir }) => {
            let m = open_manifest(manifest)?;
            let tree = load_archive(weights)?;
            let run = run_pipeline(&m, &tree, &cfg, out_dir)?;
            write_json(&out_dir.join("config.json"), &cfg)?;
            let accepted = run.ac_sites.iter().filter(|s| s.accepted()).count();
            emit(cli, json!({"outputs": run.outputs, "bas_sites": run.bas_sites.len(), "ac_sites": run.ac_sites.len(), "accepted": accepted}), || {
                format!("{} BAS candidates, {} AC sites ({accepted} accepted) → {}", run.bas_sites.len(), run.ac_sites.len(), run.outputs.ac_sites.display())
            });
        }
        Command::Synth { out_dir, preset, name } => {
            let sc = match preset {
                Preset::Demo => SynthConfig::demo(cli.global.seed),
                Preset::Mini => SynthConfig::mini(cli.global.seed),
            };
            let scene = generate(&sc, out_dir, name)?;
            save_archive(&donor_weights(), out_dir.join("donor.wtree"))?;
            save_archive(&toy_destination(), out_dir.join("toy.wtree"))?;
            emit(cli, json!({"manifest": scene.manifest_path, "images": scene.manifest.images.len(), "planted": scene.truth.len()}), || {
                format!("{} frames, {} planted sites → {}", scene.manifest.images.len(), scene.truth.len(), scene.manifest_path.display())
            });
        }
    }
    Ok(())
}

fn summarize(cli: &Cli, sites: &[stkit::track::SiteProposal], out: &Path) {
    let accepted = sites.iter().filter(|s| s.accepted()).count();
    emit(cli, json!({"sites": sites.len(), "accepted": accepted, "out": out}), || format!("{} sites ({accepted} accepted) → {}", sites.len(), out.display()));
}

fn raster(cli: &Cli, cmd: &RasterCmd) -> Result<(), Failure> {
    match cmd {
        RasterCmd::Import { input, out, width, height, channels, dtype, nodata, tile, levels, quant_scale, quant_offset } => {
            let data = if rasterio::is_png(input) {
                rasterio::read_png(input)?
            } else {
                let (Some(w), Some(h), Some(c), Some(d)) = (width, height, channels, dtype) else {
                    return Err(usage("flat binary import needs --width, --height, --channels and --dtype"));
                };
                rasterio::read_flat(input, (*d).into(), *c, *h, *w)?
            };
            let (_, h, w) = data.dim();
            let params = RasterParams::default()
                .tile(*tile)
                .levels(levels.unwrap_or_else(|| auto_levels(w, h)))
                .nodata(*nodata)
                .quantization(stkit::manifest::Quantization { scale: *quant_scale, offset: *quant_offset });
            let hd = write_raster(out, &data, params)?;
            emit(cli, header_json(&hd), || format!("{}: {}×{}×{} {:?}, {} levels", out.display(), hd.channels, hd.height, hd.width, hd.dtype, hd.num_levels));
        }
        RasterCmd::Export { input, out, level, bands, range } => {
            let r = RasterReader::open(input)?;
            if *level >= r.header().num_levels {
                return Err(usage(format!("level {level} out of range ({} levels)", r.header().num_levels)));
            }
            if rasterio::is_png(out) {
                rasterio::write_png(out, &r, *level, bands, (range.len() == 2).then(|| (range[0], range[1])))?;
            } else {
                rasterio::write_flat(out, &r.read_level(*level)?)?;
            }
            let (w, h) = r.header().level_dims(*level);
            emit(cli, json!({"out": out, "level": level, "width": w, "height": h}), || format!("level {level} ({w}×{h}) → {}", out.display()));
        }
        RasterCmd::Info { path } => {
            let r = RasterReader::open(path)?;
            let hd = *r.header();
            let levels: Vec<String> = (0..hd.num_levels).map(|l| format!("{:?}", hd.level_dims(l))).collect();
            emit(cli, header_json(&hd), || {
                format!(
                    "{}: {} channels, {}×{} {:?}, tile {}, nodata {:?}, scale {} offset {}\nlevels: {}",
                    path.display(),
                    hd.channels,
                    hd.width,
                    hd.height,
                    hd.dtype,
                    hd.tile_size,
                    hd.nodata,
                    hd.quantization.scale,
                    hd.quantization.offset,
                    levels.join(" ")
                )
            });
        }
    }
    Ok(())
}

fn header_json(hd: &stkit::raster::RasterHeader) -> Value {
    json!({
        "dtype": hd.dtype,
        "channels": hd.channels,
        "width": hd.width,
        "height": hd.height,
        "tile_size": hd.tile_size,
        "num_levels": hd.num_levels,
        "levels": (0..hd.num_levels).map(|l| hd.level_dims(l)).collect::<Vec<_>>(),
        "nodata": hd.nodata,
        "quantization": hd.quantization,
    })
}

fn weights(cli: &Cli, cmd: &WeightsCmd) -> Result<(), Failure> {
    match cmd {
        WeightsCmd::Graft { src, dst, out, timestamp, report } => {
            let (s, d) = (load_archive(src)?, load_archive(dst)?);
            let (tree, rep) = graft(&s, &d, timestamp)?;
            save_archive(&tree, out)?;
            if let Some(p) = report {
                write_json(p, &rep)?;
            }
            let v = serde_json::to_value(&rep).map_err(anyhow::Error::from)?;
            emit(cli, v, || {
                format!(
                    "{} leaves matched, {} of {} destination parameters transferred ({:.4}) → {}",
                    rep.matched.len(),
                    rep.params_transferred,
                    rep.dst_params,
                    rep.fraction,
                    out.display()
                )
            });
        }
        WeightsCmd::Perturb { input, out, lambda, sigma } => {
            let t = load_archive(input)?;
            let p = shrink_and_perturb(&t, *lambda, *sigma, cli.global.seed)?;
            save_archive(&p, out)?;
            emit(cli, json!({"out": out, "hash": archive_hash(&p), "params": p.total_params()}), || format!("{} parameters → {}", p.total_params(), out.display()));
        }
        WeightsCmd::Info { path } => {
            let t = load_archive(path)?;
            let leaves: Vec<Value> = t.leaves().into_iter().map(|(n, x)| json!({"name": n, "dtype": x.dtype(), "shape": x.shape()})).collect();
            emit(cli, json!({"hash": archive_hash(&t), "params": t.total_params(), "leaves": leaves, "lineage": t.lineage}), || {
                let mut s = format!("{}: {} parameters, sha256 {}\n", path.display(), t.total_params(), archive_hash(&t));
                for (n, x) in t.leaves() {
                    s.push_str(&format!("  {n} {:?} {}\n", x.shape(), serde_json::to_string(&x.dtype()).unwrap_or_default().trim_matches('"')));
                }
                for e in &t.lineage {
                    s.push_str(&format!("  lineage {} src {} score {}\n", e.timestamp, &e.source_hash[..12.min(e.source_hash.len())], e.score));
                }
                s.trim_end().to_string()
            });
        }
        WeightsCmd::Toy { donor, dest } => {
            save_archive(&donor_weights(), donor)?;
            save_archive(&toy_destination(), dest)?;
            emit(cli, json!({"donor": donor, "dest": dest}), || format!("{} {}", donor.display(), dest.display()));
        }
    }
    Ok(())
}
