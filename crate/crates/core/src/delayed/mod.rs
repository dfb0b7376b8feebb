//! Lazy image-operation trees.
//!
//! A [`DelayedNode`] describes how to produce a C×H×W array from tiled
//! rasters without touching pixels. [`optimize`] rewrites a tree into an
//! equivalent, cheaper one (fused warps, crops pushed to windowed reads,
//! power-of-two downscales replaced by overview reads) and
//! [`DelayedNode::evaluate`] materializes it.
//!
//! Warp semantics: the transform maps child pixel coordinates to output
//! coordinates, pixel `(i, j)` covering `[i, i+1) × [j, j+1)`. Output pixel
//! centers are pulled back through the inverse. A bilinear warp whose
//! transform is exactly `scale(2^-k)` is a k-fold 2×2 box reduction, which
//! is what makes overview substitution exact.

mod eval;
mod optimize;
mod view;

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::raster::{RasterError, RasterReader};
use crate::Affine;

pub use optimize::{optimize, OptimizeReport};
pub use view::{build_view, RasterCache, Space};

#[derive(Debug, thiserror::Error)]
pub enum DelayedError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Manifest(#[from] crate::manifest::ManifestError),
    #[error("invalid tree: {0}")]
    Invalid(String),
    #[error("image {image_id} has no channel {channel:?}")]
    UnresolvableChannel { image_id: i64, channel: String },
}

pub type Result<T, E = DelayedError> = std::result::Result<T, E>;

/// Optimizes then evaluates.
pub fn evaluate_optimized<T: crate::Scalar>(node: &DelayedNode) -> Result<ndarray::Array3<T>> {
    optimize(node).0.evaluate()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    #[default]
    Bilinear,
}

/// Pixel rectangle; the origin may lie outside the parent's extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window {
    pub x0: i64,
    pub y0: i64,
    pub width: usize,
    pub height: usize,
}

impl Window {
    pub fn new(x0: i64, y0: i64, width: usize, height: usize) -> Self {
        Self { x0, y0, width, height }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::new(0, 0, width, height)
    }

    pub fn x1(&self) -> i64 {
        self.x0 + self.width as i64
    }

    pub fn y1(&self) -> i64 {
        self.y0 + self.height as i64
    }

    /// Whether this window lies inside `[0, width) × [0, height)`.
    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x0 >= 0 && self.y0 >= 0 && self.x1() <= width as i64 && self.y1() <= height as i64
    }
}

#[derive(Debug, Clone)]
pub enum DelayedNode {
    /// Windowed read of one pyramid level. Out-of-bounds pixels and the
    /// nodata sentinel read as NaN.
    Load {
        source: Arc<RasterReader>,
        level: usize,
        window: Window,
        nodata: Option<f64>,
    },
    Warp {
        child: Box<DelayedNode>,
        transform: Affine,
        interpolation: Interpolation,
        width: usize,
        height: usize,
    },
    /// Sub-window of the child; pixels outside the child are NaN.
    Crop { child: Box<DelayedNode>, window: Window },
    ChannelConcat { children: Vec<DelayedNode> },
    ChannelSelect { child: Box<DelayedNode>, channels: Vec<usize> },
    Dequantize { child: Box<DelayedNode>, scale: f64, offset: f64 },
    /// Replaces NaN with `value`.
    NodataFill { child: Box<DelayedNode>, value: f64 },
}

impl DelayedNode {
    /// Full-extent read of `level`, using the raster's own nodata sentinel.
    pub fn load(source: Arc<RasterReader>, level: usize) -> Result<Self> {
        let hd = *source.header();
        if level >= hd.num_levels {
            return Err(RasterError::BadLevel { level, num_levels: hd.num_levels }.into());
        }
        let (w, h) = hd.level_dims(level);
        Ok(Self::Load {
            source,
            level,
            window: Window::full(w, h),
            nodata: hd.nodata,
        })
    }

    pub fn open(path: impl AsRef<Path>, level: usize) -> Result<Self> {
        Self::load(Arc::new(RasterReader::open(path)?), level)
    }

    pub fn warp(self, transform: Affine, interpolation: Interpolation, width: usize, height: usize) -> Result<Self> {
        if !transform.is_finite() || transform.invert().is_err() {
            return Err(DelayedError::Invalid(format!("warp transform {transform:?} is not invertible")));
        }
        if width == 0 || height == 0 {
            return Err(DelayedError::Invalid("warp output must be non-empty".into()));
        }
        Ok(Self::Warp {
            child: Box::new(self),
            transform,
            interpolation,
            width,
            height,
        })
    }

    pub fn crop(self, x0: i64, y0: i64, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(DelayedError::Invalid("crop must be non-empty".into()));
        }
        Ok(Self::Crop {
            child: Box::new(self),
            window: Window::new(x0, y0, width, height),
        })
    }

    pub fn concat(children: Vec<DelayedNode>) -> Result<Self> {
        let first = children
            .first()
            .ok_or_else(|| DelayedError::Invalid("concat needs at least one child".into()))?
            .dims();
        if children.iter().any(|c| c.dims() != first) {
            return Err(DelayedError::Invalid("concat children differ in dims".into()));
        }
        Ok(Self::ChannelConcat { children })
    }

    pub fn select(self, channels: Vec<usize>) -> Result<Self> {
        let n = self.channels();
        if channels.is_empty() || channels.iter().any(|&c| c >= n) {
            return Err(DelayedError::Invalid(format!("channel selection {channels:?} out of range 0..{n}")));
        }
        Ok(Self::ChannelSelect { child: Box::new(self), channels })
    }

    pub fn dequantize(self, scale: f64, offset: f64) -> Self {
        Self::Dequantize { child: Box::new(self), scale, offset }
    }

    pub fn nodata_fill(self, value: f64) -> Self {
        Self::NodataFill { child: Box::new(self), value }
    }

    pub fn channels(&self) -> usize {
        match self {
            Self::Load { source, .. } => source.header().channels,
            Self::ChannelConcat { children } => children.iter().map(Self::channels).sum(),
            Self::ChannelSelect { channels, .. } => channels.len(),
            Self::Warp { child, .. }
            | Self::Crop { child, .. }
            | Self::Dequantize { child, .. }
            | Self::NodataFill { child, .. } => child.channels(),
        }
    }

    /// Output (width, height).
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Self::Load { window, .. } | Self::Crop { window, .. } => (window.width, window.height),
            Self::Warp { width, height, .. } => (*width, *height),
            Self::ChannelConcat { children } => children[0].dims(),
            Self::ChannelSelect { child, .. }
            | Self::Dequantize { child, .. }
            | Self::NodataFill { child, .. } => child.dims(),
        }
    }

    pub fn children(&self) -> Vec<&DelayedNode> {
        match self {
            Self::Load { .. } => vec![],
            Self::ChannelConcat { children } => children.iter().collect(),
            Self::Warp { child, .. }
            | Self::Crop { child, .. }
            | Self::ChannelSelect { child, .. }
            | Self::Dequantize { child, .. }
            | Self::NodataFill { child, .. } => vec![child],
        }
    }

    pub fn node_count(&self) -> usize {
        1 + self.children().into_iter().map(Self::node_count).sum::<usize>()
    }

    pub fn warp_count(&self) -> usize {
        let own = matches!(self, Self::Warp { .. }) as usize;
        own + self.children().into_iter().map(Self::warp_count).sum::<usize>()
    }

    pub fn load_count(&self) -> usize {
        let own = matches!(self, Self::Load { .. }) as usize;
        own + self.children().into_iter().map(Self::load_count).sum::<usize>()
    }

    /// Checks the structural invariants the constructors enforce.
    pub fn validate(&self) -> Result<()> {
        for c in self.children() {
            c.validate()?;
        }
        match self {
            Self::ChannelConcat { children } => {
                let Some(first) = children.first() else {
                    return Err(DelayedError::Invalid("empty concat".into()));
                };
                if children.iter().any(|c| c.dims() != first.dims()) {
                    return Err(DelayedError::Invalid("concat children differ in dims".into()));
                }
            }
            Self::ChannelSelect { child, channels } => {
                if channels.is_empty() || channels.iter().any(|&c| c >= child.channels()) {
                    return Err(DelayedError::Invalid("channel selection out of range".into()));
                }
            }
            Self::Warp { transform, width, height, .. } => {
                if transform.invert().is_err() || *width == 0 || *height == 0 {
                    return Err(DelayedError::Invalid("bad warp".into()));
                }
            }
            Self::Load { source, level, window, .. } => {
                if *level >= source.header().num_levels || window.width == 0 || window.height == 0 {
                    return Err(DelayedError::Invalid("bad load".into()));
                }
            }
            Self::Crop { window, .. } => {
                if window.width == 0 || window.height == 0 {
                    return Err(DelayedError::Invalid("empty crop".into()));
                }
            }
            Self::Dequantize { .. } | Self::NodataFill { .. } => {}
        }
        Ok(())
    }

    /// Indented text form, one node per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        self.dump_into(&mut out, 0);
        out
    }

    fn dump_into(&self, out: &mut String, depth: usize) {
        let (w, h) = self.dims();
        let pad = "  ".repeat(depth);
        let dims = format!("{}x{}x{}", self.channels(), h, w);
        let _ = match self {
            Self::Load { source, level, window, .. } => writeln!(
                out,
                "{pad}Load {dims} file={} level={level} window=({},{},{},{})",
                source.path().file_name().map(|f| f.to_string_lossy()).unwrap_or_default(),
                window.x0,
                window.y0,
                window.width,
                window.height
            ),
            Self::Warp { transform, interpolation, .. } => writeln!(
                out,
                "{pad}Warp {dims} {interpolation:?} transform={:?}",
                transform.to_array()
            ),
            Self::Crop { window, .. } => writeln!(
                out,
                "{pad}Crop {dims} window=({},{},{},{})",
                window.x0, window.y0, window.width, window.height
            ),
            Self::ChannelConcat { .. } => writeln!(out, "{pad}ChannelConcat {dims}"),
            Self::ChannelSelect { channels, .. } => writeln!(out, "{pad}ChannelSelect {dims} channels={channels:?}"),
            Self::Dequantize { scale, offset, .. } => writeln!(out, "{pad}Dequantize {dims} scale={scale} offset={offset}"),
            Self::NodataFill { value, .. } => writeln!(out, "{pad}NodataFill {dims} value={value}"),
        };
        for c in self.children() {
            c.dump_into(out, depth + 1);
        }
    }
}

/// Classification of a warp by how it can be evaluated and rewritten.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum WarpKind {
    /// Bilinear `scale(2^-k)`, evaluated as a k-fold 2×2 box reduction.
    Box(u32),
    General,
}

pub(crate) fn warp_kind(t: &Affine, interp: Interpolation) -> WarpKind {
    if interp == Interpolation::Bilinear {
        if let Some(k) = pure_downscale(t) {
            return WarpKind::Box(k);
        }
    }
    WarpKind::General
}

/// `Some(k)` when `t` is exactly `scale(2^-k)` with `k >= 1`.
pub(crate) fn pure_downscale(t: &Affine) -> Option<u32> {
    if t.b != 0.0 || t.c != 0.0 || t.d != 0.0 || t.f != 0.0 || t.a != t.e {
        return None;
    }
    let inv = 1.0 / t.a;
    if inv >= 2.0 && inv.fract() == 0.0 && (inv as u64).is_power_of_two() && (inv as u64) < (1 << 31) {
        Some((inv as u64).trailing_zeros())
    } else {
        None
    }
}
