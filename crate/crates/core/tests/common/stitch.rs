//! Window-blending oracle and a one-video raster fixture.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stkit::manifest::{Asset, ChannelList, ImageFrame, Manifest, Video};
use stkit::raster::{write_raster, RasterData, RasterParams};
use stkit::stitch::{AccumBuffer, BoundaryKernel};
use stkit::Affine;
use tempfile::TempDir;

#[derive(Clone)]
pub struct Window {
    pub x0: usize,
    pub y0: usize,
    pub pred: Array3<f64>,
    pub validity: Array2<f64>,
}

pub fn random_windows(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Vec<Window> {
    (0..rng.random_range(1..8))
        .map(|_| {
            let (wh, ww) = (rng.random_range(1..=h), rng.random_range(1..=w));
            let (y0, x0) = (rng.random_range(0..=h - wh), rng.random_range(0..=w - ww));
            let pred = Array3::from_shape_fn((c, wh, ww), |_| if rng.random_bool(0.05) { f64::NAN } else { rng.random_range(-3.0..3.0) });
            let validity = Array2::from_shape_fn((wh, ww), |_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.0) });
            Window { x0, y0, pred, validity }
        })
        .collect()
}

pub fn stitch(c: usize, h: usize, w: usize, wins: &[Window], k: &BoundaryKernel, scale: f64) -> Array3<f64> {
    let mut b = AccumBuffer::new(c, h, w);
    for win in wins {
        b.accumulate(win.x0, win.y0, win.pred.view(), (&win.validity * scale).view(), k).unwrap();
    }
    b.finalize()
}

pub fn dense_oracle(c: usize, h: usize, w: usize, wins: &[Window], k: &BoundaryKernel) -> Array3<f64> {
    let mut out = Array3::from_elem((c, h, w), f64::NAN);
    for y in 0..h {
        for x in 0..w {
            let mut num = vec![0.0; c];
            let mut den = 0.0;
            for win in wins {
                let (_, wh, ww) = win.pred.dim();
                if y < win.y0 || x < win.x0 || y >= win.y0 + wh || x >= win.x0 + ww {
                    continue;
                }
                let (ly, lx) = (y - win.y0, x - win.x0);
                if (0..c).any(|ch| win.pred[[ch, ly, lx]].is_nan()) {
                    continue;
                }
                let wt = win.validity[[ly, lx]] * k.axis(ly, wh) * k.axis(lx, ww);
                for ch in 0..c {
                    num[ch] += wt * win.pred[[ch, ly, lx]];
                }
                den += wt;
            }
            if den > 0.0 {
                for ch in 0..c {
                    out[[ch, y, x]] = num[ch] / den;
                }
            }
        }
    }
    out
}

pub fn close(a: &Array3<f64>, b: &Array3<f64>, tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x.is_nan() && y.is_nan()) || (x - y).abs() <= tol)
}

/// One video, one frame per entry of `frames`, each with an rgbn asset.
/// `image_scale` > 1 stores the image coarser than video space.
pub fn fixture(dir: &TempDir, frames: Vec<Array3<f32>>, image_scale: f64) -> Manifest {
    let mut m = Manifest::default();
    m.root = dir.path().to_path_buf();
    let (_, h, w) = frames[0].dim();
    let (vw, vh) = ((w as f64 * image_scale) as usize, (h as f64 * image_scale) as usize);
    m.videos.push(Video { id: 1, name: "v".into(), width: vw, height: vh, target_gsd: 10.0 });
    for (i, a) in frames.into_iter().enumerate() {
        let id = i as i64 + 1;
        let file = format!("f{id}.tpr");
        write_raster(dir.path().join(&file), &RasterData::F32(a), RasterParams::default().levels(3)).unwrap();
        m.images.push(ImageFrame {
            id,
            video_id: 1,
            frame_index: i,
            timestamp: format!("{}-06-01", 2015 + i),
            sensor: "S2".into(),
            width: w,
            height: h,
            warp_image_to_video: Affine::scale(image_scale),
            assets: vec![Asset {
                file_path: file,
                channels: ChannelList::parse("red|green|blue|nir").unwrap(),
                width: w,
                height: h,
                warp_asset_to_image: Affine::identity(),
                quantization: None,
                nodata: None,
            }],
        });
    }
    m
}

pub fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f32> {
    Array3::from_shape_fn((4, h, w), |_| rng.random_range(0.0f32..1.0))
}
