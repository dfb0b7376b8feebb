use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, TimeZone, Utc};
use ndarray::{Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{frame_time, Result, SamplerError};
use crate::delayed::{build_view, optimize, RasterCache, Space};
use crate::manifest::time::format_timestamp;
use crate::manifest::{Asset, ChannelList, ImageFrame, Manifest};
use crate::raster::{auto_levels, write_raster, RasterData, RasterParams};
use crate::Affine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reducer {
    #[default]
    Median,
    Mean,
}

impl std::str::FromStr for Reducer {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "median" => Ok(Self::Median),
            "mean" => Ok(Self::Mean),
            other => Err(format!("unknown reducer {other:?} (expected median or mean)")),
        }
    }
}

impl Reducer {
    /// NaN-excluding reduction; all-NaN gives NaN. An even-sized median is
    /// the mean of the two central values.
    pub fn reduce(self, vals: &mut Vec<f64>) -> f64 {
        vals.retain(|v| !v.is_nan());
        if vals.is_empty() {
            return f64::NAN;
        }
        match self {
            Self::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
            Self::Median => {
                vals.sort_by(f64::total_cmp);
                let n = vals.len();
                if n % 2 == 1 {
                    vals[n / 2]
                } else {
                    0.5 * (vals[n / 2 - 1] + vals[n / 2])
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeAverageConfig {
    pub reducer: Reducer,
    /// Directory for the averaged rasters; the returned manifest is rooted here.
    pub out_dir: PathBuf,
    /// Channel whose nonzero bits (under `qa_bad_bits`) mark low-quality pixels.
    pub qa_channel: Option<String>,
    pub qa_bad_bits: u32,
    /// Channels that are not averaged but attached to the nearest averaged frame.
    pub aux_channels: Vec<String>,
}

impl TimeAverageConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            reducer: Reducer::Median,
            out_dir: out_dir.into(),
            qa_channel: None,
            qa_bad_bits: u32::MAX,
            aux_channels: Vec::new(),
        }
    }
}

struct Group<'a> {
    video_id: i64,
    sensor: String,
    year: i32,
    frames: Vec<&'a ImageFrame>,
    channels: Vec<String>,
}

struct Synthetic {
    frame: ImageFrame,
    time: DateTime<Utc>,
    members: Vec<i64>,
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|source| SamplerError::Io { path: p.to_path_buf(), source })
}

/// One averaged frame per (video, sensor, UTC calendar year).
///
/// Each frame is resampled into video space at full resolution, masked by
/// its QA channel, and reduced per pixel. Auxiliary assets are re-attached
/// to the averaged frame nearest in time (same video, ties to the earlier).
pub fn time_average(m: &Manifest, cfg: &TimeAverageConfig) -> Result<Manifest> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|source| SamplerError::Io { path: cfg.out_dir.clone(), source })?;
    let out_abs = absolute(&cfg.out_dir)?;
    let is_plain = |c: &str| Some(c) != cfg.qa_channel.as_deref() && !cfg.aux_channels.iter().any(|a| a == c);

    let mut videos: Vec<_> = m.videos.iter().collect();
    videos.sort_by_key(|v| v.id);
    let mut groups: Vec<Group> = Vec::new();
    for v in &videos {
        let frames = m.frames_of(v.id);
        if frames.is_empty() {
            return Err(SamplerError::EmptyVideo(v.id));
        }
        let mut keyed: BTreeMap<(String, i32), Vec<&ImageFrame>> = BTreeMap::new();
        for f in frames {
            keyed.entry((f.sensor.clone(), frame_time(f)?.year())).or_default().push(f);
        }
        for ((sensor, year), frames) in keyed {
            let mut channels: Vec<String> = Vec::new();
            for f in &frames {
                for a in &f.assets {
                    if a.channels.names().iter().all(|c| is_plain(c)) {
                        for c in a.channels.names() {
                            if !channels.contains(c) {
                                channels.push(c.clone());
                            }
                        }
                    }
                }
            }
            if !channels.is_empty() {
                groups.push(Group { video_id: v.id, sensor, year, frames, channels });
            }
        }
    }

    let cache = RasterCache::new();
    let rendered: Vec<Result<Synthetic>> = groups
        .par_iter()
        .map(|g| average_group(m, &cache, cfg, g))
        .collect();
    let mut synth: Vec<Synthetic> = rendered.into_iter().collect::<Result<_>>()?;

    // aux assets, nearest first so the closest wins a channel collision
    let mut aux: Vec<(usize, i64, &ImageFrame, &Asset)> = Vec::new();
    for f in &m.images {
        let t = frame_time(f)?;
        for a in &f.assets {
            if a.channels.names().iter().any(|c| cfg.aux_channels.contains(c)) {
                let best = synth
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.frame.video_id == f.video_id)
                    .min_by_key(|(_, s)| ((s.time - t).num_seconds().abs(), s.time));
                if let Some((si, s)) = best {
                    aux.push((si, (s.time - t).num_seconds().abs(), f, a));
                }
            }
        }
    }
    aux.sort_by_key(|(si, d, f, _)| (*si, *d, f.id));
    for (si, _, f, a) in aux {
        let target = &mut synth[si].frame;
        if a.channels.names().iter().any(|c| target.find_channel(c).is_some()) {
            continue;
        }
        let src = absolute(&m.asset_path(a))?;
        let rel = pathdiff::diff_paths(&src, &out_abs).unwrap_or(src);
        target.assets.push(Asset {
            file_path: rel.to_string_lossy().into_owned(),
            warp_asset_to_image: f.warp_image_to_video.compose(&a.warp_asset_to_image),
            ..a.clone()
        });
    }

    // ids and frame order
    let mut out = Manifest {
        videos: m.videos.clone(),
        categories: m.categories.clone(),
        root: cfg.out_dir.clone(),
        ..Manifest::default()
    };
    synth.sort_by(|a, b| {
        (a.frame.video_id, a.time, &a.frame.sensor).cmp(&(b.frame.video_id, b.time, &b.frame.sensor))
    });
    let mut member_of = BTreeMap::new();
    let mut index_in_video: BTreeMap<i64, usize> = BTreeMap::new();
    for (i, s) in synth.iter_mut().enumerate() {
        s.frame.id = i as i64 + 1;
        let idx = index_in_video.entry(s.frame.video_id).or_default();
        s.frame.frame_index = *idx;
        *idx += 1;
        for &mid in &s.members {
            member_of.insert(mid, s.frame.id);
        }
    }
    for a in &m.annotations {
        let Some(img) = m.image(a.image_id) else { continue };
        let Some(&new_id) = member_of.get(&a.image_id) else { continue };
        let w = img.warp_image_to_video;
        let mut na = a.clone();
        na.image_id = new_id;
        na.polygon = a.polygon.iter().map(|p| { let (x, y) = w.apply(p[0], p[1]); [x, y] }).collect();
        out.annotations.push(na);
    }
    out.images = synth.into_iter().map(|s| s.frame).collect();
    out.validate()?;
    Ok(out)
}

fn average_group(m: &Manifest, cache: &RasterCache, cfg: &TimeAverageConfig, g: &Group) -> Result<Synthetic> {
    let video = m.video(g.video_id).expect("group video exists");
    let (w, h) = (video.width, video.height);
    let c = g.channels.len();
    let mut stacks: Vec<Array3<f64>> = Vec::with_capacity(g.frames.len());
    let mut secs = 0i128;
    for f in &g.frames {
        secs += frame_time(f)?.timestamp() as i128;
        let mut layer = Array3::from_elem((c, h, w), f64::NAN);
        let present: Vec<&String> = g.channels.iter().filter(|ch| f.find_channel(ch).is_some()).collect();
        if !present.is_empty() {
            let view = build_view(m, cache, f.id, &present, Space::Video, 1.0)?;
            let vals = optimize(&view).0.evaluate::<f64>()?;
            for (k, ch) in present.iter().enumerate() {
                let dst = g.channels.iter().position(|x| x == *ch).expect("present channel");
                layer.index_axis_mut(Axis(0), dst).assign(&vals.index_axis(Axis(0), k));
            }
        }
        if let Some(qa) = cfg.qa_channel.as_deref().filter(|q| f.find_channel(q).is_some()) {
            let view = build_view(m, cache, f.id, &[qa], Space::Video, 1.0)?;
            let flags = optimize(&view).0.evaluate::<f64>()?;
            for y in 0..h {
                for x in 0..w {
                    let q = flags[[0, y, x]];
                    let bad = q.is_nan() || (q.round() as i64 as u32) & cfg.qa_bad_bits != 0;
                    if bad {
                        layer.slice_mut(ndarray::s![.., y, x]).fill(f64::NAN);
                    }
                }
            }
        }
        stacks.push(layer);
    }
    let n = g.frames.len();
    let mut out = Array3::<f32>::zeros((c, h, w));
    let mut buf = Vec::with_capacity(n);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                buf.clear();
                buf.extend(stacks.iter().map(|s| s[[ch, y, x]]));
                out[[ch, y, x]] = cfg.reducer.reduce(&mut buf) as f32;
            }
        }
    }
    let name = format!("{}_{}_{}.tpr", sanitize(&video.name), sanitize(&g.sensor), g.year);
    write_raster(
        cfg.out_dir.join(&name),
        &RasterData::F32(out),
        RasterParams::default().levels(auto_levels(w, h)),
    )?;
    let time = Utc.timestamp_opt((secs / n as i128) as i64, 0).single().expect("mean of valid times");
    let channels = ChannelList::from_names(g.channels.iter().cloned()).expect("channels unique");
    Ok(Synthetic {
        frame: ImageFrame {
            id: 0,
            video_id: g.video_id,
            frame_index: 0,
            timestamp: format_timestamp(&time),
            sensor: g.sensor.clone(),
            width: w,
            height: h,
            warp_image_to_video: Affine::identity(),
            assets: vec![Asset {
                file_path: name,
                channels,
                width: w,
                height: h,
                warp_asset_to_image: Affine::identity(),
                quantization: None,
                nodata: None,
            }],
        },
        time,
        members: g.frames.iter().map(|f| f.id).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Video;
    use crate::raster::RasterReader;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    fn add_frame(m: &mut Manifest, dir: &Path, id: i64, ts: &str, sensor: &str, assets: Vec<(&str, Array3<f32>)>) {
        let mut list = Vec::new();
        for (k, (chans, a)) in assets.into_iter().enumerate() {
            let (_, h, w) = a.dim();
            let file = format!("in{id}_{k}.tpr");
            write_raster(dir.join(&file), &RasterData::F32(a), RasterParams::default()).unwrap();
            list.push(Asset {
                file_path: file,
                channels: ChannelList::parse(chans).unwrap(),
                width: w,
                height: h,
                warp_asset_to_image: Affine::identity(),
                quantization: None,
                nodata: None,
            });
        }
        let idx = m.images.len();
        m.images.push(ImageFrame {
            id,
            video_id: 1,
            frame_index: idx,
            timestamp: ts.into(),
            sensor: sensor.into(),
            width: 6,
            height: 5,
            warp_image_to_video: Affine::identity(),
            assets: list,
        });
    }

    fn base(dir: &Path) -> Manifest {
        let mut m = Manifest::default();
        m.root = dir.to_path_buf();
        m.videos.push(Video { id: 1, name: "site".into(), width: 6, height: 5, target_gsd: 10.0 });
        m
    }

    fn read(m: &Manifest, f: &ImageFrame) -> Array3<f64> {
        RasterReader::open(m.asset_path(&f.assets[0])).unwrap().read_region_real(0, 0, 0, 6, 5).unwrap()
    }

    #[test]
    fn reducer_values() {
        assert_eq!(Reducer::Median.reduce(&mut vec![9.0, 1.0, 2.0]), 2.0);
        assert_eq!(Reducer::Median.reduce(&mut vec![4.0, f64::NAN, 1.0]), 2.5);
        assert_eq!(Reducer::Mean.reduce(&mut vec![1.0, 2.0, 9.0]), 4.0);
        assert!(Reducer::Mean.reduce(&mut vec![f64::NAN]).is_nan());
    }

    #[test]
    fn median_of_three_frames_and_singletons() {
        let dir = TempDir::new().unwrap();
        let mut m = base(dir.path());
        for (i, v) in [1.0f32, 2.0, 9.0].into_iter().enumerate() {
            add_frame(&mut m, dir.path(), i as i64 + 1, &format!("2020-0{}-01", i + 2), "S2", vec![("red", Array3::from_elem((1, 5, 6), v))]);
        }
        add_frame(&mut m, dir.path(), 4, "2021-03-01", "S2", vec![("red", Array3::from_elem((1, 5, 6), 5.0))]);
        m.validate().unwrap();
        let out = time_average(&m, &TimeAverageConfig::new(dir.path().join("avg"))).unwrap();
        assert_eq!(out.images.len(), 2);
        assert!(read(&out, &out.images[0]).iter().all(|&v| v == 2.0));
        assert!(read(&out, &out.images[1]).iter().all(|&v| v == 5.0));
        assert_eq!(out.images[1].timestamp, "2021-03-01T00:00:00Z");
    }

    #[test]
    fn random_stacks_match_per_pixel_oracle() {
        let dir = TempDir::new().unwrap();
        let mut m = base(dir.path());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut layers = Vec::new();
        for i in 0..5 {
            let a = Array3::from_shape_fn((2, 5, 6), |_| if rng.random_bool(0.3) { f32::NAN } else { rng.random_range(0.0..10.0) });
            layers.push(a.clone());
            add_frame(&mut m, dir.path(), i + 1, &format!("2019-0{}-10", i + 1), "L8", vec![("red|nir", a)]);
        }
        for reducer in [Reducer::Median, Reducer::Mean] {
            let mut cfg = TimeAverageConfig::new(dir.path().join(format!("{reducer:?}")));
            cfg.reducer = reducer;
            let out = time_average(&m, &cfg).unwrap();
            assert_eq!(out.images.len(), 1);
            let r = RasterReader::open(out.asset_path(&out.images[0].assets[0])).unwrap().read_region_real::<f64>(0, 0, 0, 6, 5).unwrap();
            for ((c, y, x), &got) in r.indexed_iter() {
                let mut vals: Vec<f64> = layers.iter().map(|l| l[[c, y, x]] as f64).filter(|v| !v.is_nan()).collect();
                vals.sort_by(f64::total_cmp);
                let want = if vals.is_empty() {
                    f64::NAN
                } else if reducer == Reducer::Mean {
                    vals.iter().sum::<f64>() / vals.len() as f64
                } else if vals.len() % 2 == 1 {
                    vals[vals.len() / 2]
                } else {
                    (vals[vals.len() / 2 - 1] + vals[vals.len() / 2]) / 2.0
                };
                assert!(got.is_nan() == want.is_nan() && (want.is_nan() || (got - (want as f32) as f64).abs() < 1e-9));
            }
        }
    }

    #[test]
    fn qa_masks_and_aux_attach_nearest() {
        let dir = TempDir::new().unwrap();
        let mut m = base(dir.path());
        let mut qa = Array3::zeros((1, 5, 6));
        qa[[0, 0, 0]] = 8.0;
        add_frame(&mut m, dir.path(), 1, "2020-02-01", "S2", vec![("red", Array3::from_elem((1, 5, 6), 1.0)), ("qa", qa)]);
        add_frame(&mut m, dir.path(), 2, "2020-03-01", "S2", vec![("red", Array3::from_elem((1, 5, 6), 3.0)), ("qa", Array3::zeros((1, 5, 6)))]);
        add_frame(&mut m, dir.path(), 3, "2021-06-01", "S2", vec![("red", Array3::from_elem((1, 5, 6), 4.0))]);
        add_frame(&mut m, dir.path(), 4, "2021-01-01", "COLD", vec![("cold", Array3::from_elem((1, 5, 6), 7.0))]);
        m.images.sort_by(|a, b| a.timestamp.cmp(&b.timestamp));
        for (i, f) in m.images.iter_mut().enumerate() {
            f.frame_index = i;
        }
        m.validate().unwrap();
        let mut cfg = TimeAverageConfig::new(dir.path().join("avg"));
        cfg.qa_channel = Some("qa".into());
        cfg.aux_channels = vec!["cold".into()];
        let out = time_average(&m, &cfg).unwrap();
        assert_eq!(out.images.len(), 2);
        let first = read(&out, &out.images[0]);
        assert_eq!(first[[0, 0, 0]], 3.0);
        assert_eq!(first[[0, 1, 1]], 2.0);
        assert!(out.images[0].find_channel("qa").is_none());
        // the 2021-01-01 aux frame is ~150 days from June 2021 and ~320 from mid-February 2020
        let with_cold: Vec<_> = out.images.iter().filter(|f| f.find_channel("cold").is_some()).collect();
        assert_eq!(with_cold.len(), 1);
        assert_eq!(with_cold[0].timestamp[..4].to_string(), "2021");
        let v = build_view(&out, &RasterCache::new(), with_cold[0].id, &["cold"], Space::Video, 1.0).unwrap();
        assert!(v.evaluate::<f64>().unwrap().iter().all(|&x| x == 7.0));
    }

    #[test]
    fn idempotent() {
        let dir = TempDir::new().unwrap();
        let mut m = base(dir.path());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..4 {
            let a = Array3::from_shape_fn((1, 5, 6), |_| rng.random_range(0.0f32..1.0));
            add_frame(&mut m, dir.path(), i + 1, &format!("{}-05-0{}", 2018 + i / 2, 1 + i), "S2", vec![("red", a)]);
        }
        let once = time_average(&m, &TimeAverageConfig::new(dir.path().join("a"))).unwrap();
        let twice = time_average(&once, &TimeAverageConfig::new(dir.path().join("b"))).unwrap();
        assert_eq!(once, twice);
        for (f, g) in once.images.iter().zip(&twice.images) {
            assert_eq!(read(&once, f), read(&twice, g));
        }
    }
}
