//! Tiled-pyramid raster files (`.tpr`).
//!
//! Layout, all integers little-endian and unsigned:
//!
//! ```text
//! magic      8 bytes  "TPRASTER"
//! version    u16      1
//! dtype      u8       0 = u8, 1 = i16, 2 = f32
//! channels   u32
//! width      u32      level-0 pixels
//! height     u32
//! tile_size  u32      power of two
//! num_levels u32
//! nodata     u8 flag (0/1) + f64 sentinel
//! quant      f64 scale, f64 offset   (real = stored * scale + offset)
//! index      per level, row-major tiles: u64 offset, u64 length
//! data       tiles, band-sequential, each padded to tile_size² pixels
//! ```
//!
//! Tile offsets are relative to the start of the data section. Level `L`
//! has dims `ceil(width / 2^L) × ceil(height / 2^L)` and is built from level
//! `L - 1` by 2×2 block means that skip nodata.

mod pyramid;
mod quant;

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use ndarray::{s, Array3, ArrayView3};

use crate::manifest::Quantization;
use crate::Scalar;

pub use pyramid::{block_mean, build_level};
pub use quant::{
    dequantize, quantize_unit_i16, HEATMAP_NODATA, HEATMAP_QUANT_MAX, HEATMAP_SCALE,
};

pub const MAGIC: &[u8; 8] = b"TPRASTER";
pub const VERSION: u16 = 1;
pub const DEFAULT_TILE_SIZE: usize = 256;
const HEADER_LEN: usize = 8 + 2 + 1 + 4 * 5 + 1 + 8 + 8 + 8;
const MAX_LEVELS: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a tiled raster: {0}")]
    Format(String),
    #[error("corrupt tile index: {0}")]
    CorruptIndex(String),
    #[error("level {level} out of range (raster has {num_levels})")]
    BadLevel { level: usize, num_levels: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("value {value} not representable as {dtype:?}")]
    Unrepresentable { value: f64, dtype: DType },
}

pub type Result<T, E = RasterError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum DType {
    U8 = 0,
    I16 = 1,
    F32 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::I16 => 2,
            DType::F32 => 4,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::U8),
            1 => Some(DType::I16),
            2 => Some(DType::F32),
            _ => None,
        }
    }

    /// Whether `v` can be stored exactly.
    pub fn represents(self, v: f64) -> bool {
        match self {
            DType::U8 => v.fract() == 0.0 && (0.0..=255.0).contains(&v),
            DType::I16 => v.fract() == 0.0 && (-32768.0..=32767.0).contains(&v),
            DType::F32 => v.is_nan() || (v as f32) as f64 == v,
        }
    }
}

/// A storable pixel type.
pub trait Sample: Copy + PartialEq + Send + Sync + std::fmt::Debug + 'static {
    const DTYPE: DType;
    fn to_f64(self) -> f64;
    /// Caller guarantees `v` is representable.
    fn from_f64(v: f64) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Sample for u8 {
    const DTYPE: DType = DType::U8;
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as u8
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

impl Sample for i16 {
    const DTYPE: DType = DType::I16;
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as i16
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        i16::from_le_bytes([bytes[0], bytes[1]])
    }
}

impl Sample for f32 {
    const DTYPE: DType = DType::F32;
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_bits().to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_bits(u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]))
    }
}

/// Pixels in their stored type, C×H×W.
#[derive(Debug, Clone, PartialEq)]
pub enum RasterData {
    U8(Array3<u8>),
    I16(Array3<i16>),
    F32(Array3<f32>),
}

macro_rules! dispatch {
    ($data:expr, $arr:ident => $body:expr) => {
        match $data {
            RasterData::U8($arr) => $body,
            RasterData::I16($arr) => $body,
            RasterData::F32($arr) => $body,
        }
    };
}

impl RasterData {
    pub fn dtype(&self) -> DType {
        match self {
            RasterData::U8(_) => DType::U8,
            RasterData::I16(_) => DType::I16,
            RasterData::F32(_) => DType::F32,
        }
    }

    /// (channels, height, width)
    pub fn dim(&self) -> (usize, usize, usize) {
        dispatch!(self, a => a.dim())
    }

    /// Converts stored values to reals; the nodata sentinel becomes NaN.
    /// Scale and offset are not applied.
    pub fn to_real<T: Scalar>(&self, nodata: Option<f64>) -> Array3<T> {
        dispatch!(self, a => a.mapv(|v| {
            let x = v.to_f64();
            if nodata == Some(x) { T::nan() } else { T::lit(x) }
        }))
    }

    /// Converts reals to `dtype`. NaN maps to `nodata` (or stays NaN for
    /// f32 without a sentinel); anything else must be representable.
    pub fn from_real<T: Scalar>(
        values: ArrayView3<'_, T>,
        dtype: DType,
        nodata: Option<f64>,
    ) -> Result<Self> {
        fn conv<S: Sample, T: Scalar>(
            values: ArrayView3<'_, T>,
            nodata: Option<f64>,
        ) -> Result<Array3<S>> {
            let mut out = Vec::with_capacity(values.len());
            for &v in values.iter() {
                let mut x = v.as_f64();
                if x.is_nan() {
                    match nodata {
                        Some(n) => x = n,
                        None if S::DTYPE == DType::F32 => {}
                        None => return Err(RasterError::Unrepresentable { value: x, dtype: S::DTYPE }),
                    }
                }
                if !S::DTYPE.represents(x) {
                    return Err(RasterError::Unrepresentable { value: x, dtype: S::DTYPE });
                }
                out.push(S::from_f64(x));
            }
            Ok(Array3::from_shape_vec(values.raw_dim(), out).expect("shape preserved"))
        }
        Ok(match dtype {
            DType::U8 => RasterData::U8(conv(values, nodata)?),
            DType::I16 => RasterData::I16(conv(values, nodata)?),
            DType::F32 => RasterData::F32(conv(values, nodata)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterHeader {
    pub dtype: DType,
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    pub num_levels: usize,
    pub nodata: Option<f64>,
    pub quantization: Quantization,
}

impl RasterHeader {
    /// (width, height) of a pyramid level.
    pub fn level_dims(&self, level: usize) -> (usize, usize) {
        level_dims(self.width, self.height, level)
    }

    /// (columns, rows) of tiles at a level.
    pub fn tile_grid(&self, level: usize) -> (usize, usize) {
        let (w, h) = self.level_dims(level);
        (w.div_ceil(self.tile_size), h.div_ceil(self.tile_size))
    }

    pub fn tile_bytes(&self) -> usize {
        self.tile_size * self.tile_size * self.channels * self.dtype.size()
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype as u8);
        for v in [self.channels, self.width, self.height, self.tile_size, self.num_levels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(self.nodata.is_some() as u8);
        out.extend_from_slice(&self.nodata.unwrap_or(0.0).to_le_bytes());
        out.extend_from_slice(&self.quantization.scale.to_le_bytes());
        out.extend_from_slice(&self.quantization.offset.to_le_bytes());
    }

    fn decode(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_LEN {
            return Err(RasterError::Format("truncated header".into()));
        }
        if &b[..8] != MAGIC {
            return Err(RasterError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes([b[8], b[9]]);
        if version != VERSION {
            return Err(RasterError::Format(format!("unsupported version {version}")));
        }
        let dtype = DType::from_code(b[10])
            .ok_or_else(|| RasterError::Format(format!("unknown dtype code {}", b[10])))?;
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let flag = b[31];
        if flag > 1 {
            return Err(RasterError::Format("bad nodata flag".into()));
        }
        let header = RasterHeader {
            dtype,
            channels: u32_at(11),
            width: u32_at(15),
            height: u32_at(19),
            tile_size: u32_at(23),
            num_levels: u32_at(27),
            nodata: (flag == 1).then(|| f64_at(32)),
            quantization: Quantization {
                scale: f64_at(40),
                offset: f64_at(48),
            },
        };
        header.check().map_err(RasterError::Format)?;
        Ok(header)
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.channels == 0 || self.width == 0 || self.height == 0 {
            return Err("zero-sized raster".into());
        }
        if !self.tile_size.is_power_of_two() {
            return Err(format!("tile size {} is not a power of two", self.tile_size));
        }
        if self.tile_size > 1 << 14 {
            return Err(format!("tile size {} too large", self.tile_size));
        }
        if self.num_levels == 0 || self.num_levels > MAX_LEVELS {
            return Err(format!("num_levels {} out of range", self.num_levels));
        }
        if let Some(n) = self.nodata {
            if !self.dtype.represents(n) || n.is_nan() {
                return Err(format!("nodata {n} not representable as {:?}", self.dtype));
            }
        }
        let q = self.quantization;
        if !(q.scale.is_finite() && q.offset.is_finite() && q.scale != 0.0) {
            return Err("bad quantization".into());
        }
        Ok(())
    }
}

pub fn level_dims(width: usize, height: usize, level: usize) -> (usize, usize) {
    let f = |n: usize| n.div_ceil(1 << level).max(1);
    (f(width), f(height))
}

/// Pyramid depth for generated rasters: halve while the short side of the
/// next level stays at least 16 pixels, at most 6 levels.
pub fn auto_levels(width: usize, height: usize) -> usize {
    let mut n = 1;
    while n < 6 && width.min(height) >> n >= 16 {
        n += 1;
    }
    n
}

/// Writer options beyond the pixel array itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterParams {
    pub tile_size: usize,
    pub num_levels: usize,
    pub nodata: Option<f64>,
    pub quantization: Quantization,
}

impl Default for RasterParams {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE_SIZE,
            num_levels: 1,
            nodata: None,
            quantization: Quantization { scale: 1.0, offset: 0.0 },
        }
    }
}

impl RasterParams {
    pub fn levels(mut self, n: usize) -> Self {
        self.num_levels = n;
        self
    }

    pub fn tile(mut self, n: usize) -> Self {
        self.tile_size = n;
        self
    }

    pub fn nodata(mut self, v: Option<f64>) -> Self {
        self.nodata = v;
        self
    }

    pub fn quantization(mut self, q: Quantization) -> Self {
        self.quantization = q;
        self
    }
}

/// Writes `pixels` with a full overview pyramid.
pub fn write_raster(path: impl AsRef<Path>, pixels: &RasterData, params: RasterParams) -> Result<RasterHeader> {
    let path = path.as_ref();
    let (c, h, w) = pixels.dim();
    let header = RasterHeader {
        dtype: pixels.dtype(),
        channels: c,
        width: w,
        height: h,
        tile_size: params.tile_size,
        num_levels: params.num_levels,
        nodata: params.nodata,
        quantization: params.quantization,
    };
    header.check().map_err(RasterError::DimMismatch)?;
    if w > u32::MAX as usize || h > u32::MAX as usize || c > u32::MAX as usize {
        return Err(RasterError::DimMismatch("dimension exceeds u32".into()));
    }
    let bytes = dispatch!(pixels, a => encode_file(&header, a.clone()));
    let io = |source| RasterError::Io { path: path.to_owned(), source };
    let mut f = BufWriter::new(File::create(path).map_err(io)?);
    f.write_all(&bytes).map_err(io)?;
    f.flush().map_err(io)?;
    Ok(header)
}

fn encode_file<S: Sample>(header: &RasterHeader, level0: Array3<S>) -> Vec<u8> {
    let mut levels = vec![level0];
    for _ in 1..header.num_levels {
        let next = build_level(levels.last().unwrap().view(), header.nodata);
        levels.push(next);
    }
    let fill = S::from_f64(header.nodata.unwrap_or(if S::DTYPE == DType::F32 { f64::NAN } else { 0.0 }));
    let tb = header.tile_bytes();
    let mut index = Vec::new();
    let mut data = Vec::new();
    let ts = header.tile_size;
    for (l, arr) in levels.iter().enumerate() {
        let (cols, rows) = header.tile_grid(l);
        let (_, lh, lw) = arr.dim();
        for ty in 0..rows {
            for tx in 0..cols {
                index.push((data.len() as u64, tb as u64));
                for ch in 0..header.channels {
                    for y in ty * ts..(ty + 1) * ts {
                        for x in tx * ts..(tx + 1) * ts {
                            let v = if y < lh && x < lw { arr[[ch, y, x]] } else { fill };
                            v.write_le(&mut data);
                        }
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + index.len() * 16 + data.len());
    header.encode(&mut out);
    for (o, n) in index {
        out.extend_from_slice(&o.to_le_bytes());
        out.extend_from_slice(&n.to_le_bytes());
    }
    out.extend_from_slice(&data);
    out
}

/// Counters of tile traffic through one reader.
#[derive(Debug, Default)]
pub struct ReadStats {
    tiles: AtomicU64,
    bytes: AtomicU64,
}

impl ReadStats {
    pub fn tiles_read(&self) -> u64 {
        self.tiles.load(Ordering::Relaxed)
    }

    pub fn bytes_read(&self) -> u64 {
        self.bytes.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.tiles.store(0, Ordering::Relaxed);
        self.bytes.store(0, Ordering::Relaxed);
    }
}

/// Random-access reader; only tiles overlapping a request are read.
#[derive(Debug)]
pub struct RasterReader {
    path: PathBuf,
    header: RasterHeader,
    /// Per level, row-major (offset, length).
    index: Vec<Vec<(u64, u64)>>,
    data_start: u64,
    file: Mutex<File>,
    stats: ReadStats,
}

impl RasterReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_owned();
        let io = |source| RasterError::Io { path: path.clone(), source };
        let mut file = File::open(&path).map_err(io)?;
        let file_len = file.metadata().map_err(io)?.len();
        let mut hb = vec![0u8; HEADER_LEN];
        read_exact_or_format(&mut file, &mut hb, "truncated header")?;
        let header = RasterHeader::decode(&hb)?;

        let mut index = Vec::with_capacity(header.num_levels);
        let mut total_tiles = 0u64;
        for l in 0..header.num_levels {
            let (c, r) = header.tile_grid(l);
            total_tiles += (c * r) as u64;
        }
        let index_len = total_tiles
            .checked_mul(16)
            .filter(|n| HEADER_LEN as u64 + n <= file_len)
            .ok_or_else(|| RasterError::CorruptIndex("index extends past end of file".into()))?;
        let mut ib = vec![0u8; index_len as usize];
        read_exact_or_format(&mut file, &mut ib, "truncated tile index")?;
        let data_start = HEADER_LEN as u64 + index_len;
        let data_len = file_len - data_start;
        let tb = header.tile_bytes() as u64;
        let mut entries = ib.chunks_exact(16).map(|e| {
            (
                u64::from_le_bytes(e[..8].try_into().unwrap()),
                u64::from_le_bytes(e[8..].try_into().unwrap()),
            )
        });
        let mut spans = Vec::with_capacity(total_tiles as usize);
        for l in 0..header.num_levels {
            let (c, r) = header.tile_grid(l);
            let lvl: Vec<(u64, u64)> = entries.by_ref().take(c * r).collect();
            for &(o, n) in &lvl {
                if n != tb {
                    return Err(RasterError::CorruptIndex(format!(
                        "tile length {n}, expected {tb}"
                    )));
                }
                if o.checked_add(n).is_none_or(|end| end > data_len) {
                    return Err(RasterError::CorruptIndex("tile extends past end of file".into()));
                }
                spans.push((o, o + n));
            }
            index.push(lvl);
        }
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(RasterError::CorruptIndex("overlapping tiles".into()));
        }
        Ok(Self {
            path,
            header,
            index,
            data_start,
            file: Mutex::new(file),
            stats: ReadStats::default(),
        })
    }

    pub fn header(&self) -> &RasterHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn stats(&self) -> &ReadStats {
        &self.stats
    }

    fn read_tile(&self, level: usize, tx: usize, ty: usize) -> Result<Vec<u8>> {
        let (cols, _) = self.header.tile_grid(level);
        let (off, len) = self.index[level][ty * cols + tx];
        let mut buf = vec![0u8; len as usize];
        {
            let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
            let io = |source| RasterError::Io { path: self.path.clone(), source };
            f.seek(SeekFrom::Start(self.data_start + off)).map_err(io)?;
            read_exact_or_format(&mut *f, &mut buf, "truncated tile data")?;
        }
        self.stats.tiles.fetch_add(1, Ordering::Relaxed);
        self.stats.bytes.fetch_add(len, Ordering::Relaxed);
        Ok(buf)
    }

    /// Reads a window of a level in the stored dtype. Pixels outside the
    /// level are filled with the nodata sentinel (NaN for f32 without one,
    /// zero for integer types without one).
    pub fn read_region(&self, level: usize, x0: i64, y0: i64, w: usize, h: usize) -> Result<RasterData> {
        Ok(match self.header.dtype {
            DType::U8 => RasterData::U8(self.read_typed(level, x0, y0, w, h)?),
            DType::I16 => RasterData::I16(self.read_typed(level, x0, y0, w, h)?),
            DType::F32 => RasterData::F32(self.read_typed(level, x0, y0, w, h)?),
        })
    }

    fn read_typed<S: Sample>(&self, level: usize, x0: i64, y0: i64, w: usize, h: usize) -> Result<Array3<S>> {
        if level >= self.header.num_levels {
            return Err(RasterError::BadLevel { level, num_levels: self.header.num_levels });
        }
        let hd = &self.header;
        let fill = S::from_f64(hd.nodata.unwrap_or(if S::DTYPE == DType::F32 { f64::NAN } else { 0.0 }));
        let mut out = Array3::from_elem((hd.channels, h, w), fill);
        let (lw, lh) = hd.level_dims(level);
        let ix0 = x0.max(0);
        let iy0 = y0.max(0);
        let ix1 = (x0 + w as i64).min(lw as i64);
        let iy1 = (y0 + h as i64).min(lh as i64);
        if ix0 >= ix1 || iy0 >= iy1 {
            return Ok(out);
        }
        let ts = hd.tile_size as i64;
        let dsz = S::DTYPE.size();
        for ty in iy0 / ts..=(iy1 - 1) / ts {
            for tx in ix0 / ts..=(ix1 - 1) / ts {
                let tile = self.read_tile(level, tx as usize, ty as usize)?;
                let (tx0, ty0) = (tx * ts, ty * ts);
                let xa = ix0.max(tx0);
                let xb = ix1.min(tx0 + ts);
                let ya = iy0.max(ty0);
                let yb = iy1.min(ty0 + ts);
                for c in 0..hd.channels {
                    let band = c * (ts * ts) as usize;
                    for y in ya..yb {
                        let row = band + ((y - ty0) * ts) as usize;
                        for x in xa..xb {
                            let p = (row + (x - tx0) as usize) * dsz;
                            out[[c, (y - y0) as usize, (x - x0) as usize]] = S::read_le(&tile[p..p + dsz]);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Window as reals: nodata and out-of-bounds pixels become NaN.
    /// Scale and offset are not applied.
    pub fn read_region_real<T: Scalar>(&self, level: usize, x0: i64, y0: i64, w: usize, h: usize) -> Result<Array3<T>> {
        let mut out = self.read_region(level, x0, y0, w, h)?.to_real::<T>(self.header.nodata);
        let (lw, lh) = self.header.level_dims(level);
        let in_x = |x: usize| (0..lw as i64).contains(&(x0 + x as i64));
        let in_y = |y: usize| (0..lh as i64).contains(&(y0 + y as i64));
        if (0..w).all(in_x) && (0..h).all(in_y) {
            return Ok(out);
        }
        for ((_, y, x), v) in out.indexed_iter_mut() {
            if !in_x(x) || !in_y(y) {
                *v = T::nan();
            }
        }
        Ok(out)
    }

    /// Entire level in the stored dtype.
    pub fn read_level(&self, level: usize) -> Result<RasterData> {
        let (w, h) = self.header.level_dims(level.min(self.header.num_levels.saturating_sub(1)));
        self.read_region(level, 0, 0, w, h)
    }
}

fn read_exact_or_format(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            RasterError::Format(what.into())
        } else {
            RasterError::Format(format!("{what}: {e}"))
        }
    })
}

/// Slice of a C×H×W array, used by tests and the evaluator.
pub fn window<T: Clone>(a: &Array3<T>, x0: usize, y0: usize, w: usize, h: usize) -> Array3<T> {
    a.slice(s![.., y0..y0 + h, x0..x0 + w]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn constant_overview() {
        let dir = tmp();
        let p = dir.path().join("c.tpr");
        let a = Array3::from_elem((1, 4, 4), 7.0f32);
        write_raster(&p, &RasterData::F32(a), RasterParams::default().levels(2)).unwrap();
        let r = RasterReader::open(&p).unwrap();
        assert_eq!(r.read_level(1).unwrap(), RasterData::F32(Array3::from_elem((1, 2, 2), 7.0)));
    }

    #[test]
    fn two_by_two_mean() {
        let dir = tmp();
        let p = dir.path().join("m.tpr");
        let a = Array3::from_shape_vec((1, 2, 2), vec![1.0f32, 3.0, 5.0, 7.0]).unwrap();
        write_raster(&p, &RasterData::F32(a), RasterParams::default().levels(2)).unwrap();
        let r = RasterReader::open(&p).unwrap();
        assert_eq!(r.read_level(1).unwrap(), RasterData::F32(Array3::from_elem((1, 1, 1), 4.0)));
    }

    #[test]
    fn random_f32_round_trip_all_levels() {
        let dir = tmp();
        let p = dir.path().join("r.tpr");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array3::from_shape_fn((3, 100, 80), |_| rng.random::<f32>() * 10.0 - 5.0);
        write_raster(&p, &RasterData::F32(a.clone()), RasterParams::default().levels(3).tile(32)).unwrap();
        let r = RasterReader::open(&p).unwrap();
        assert_eq!(r.read_region(0, 0, 0, 80, 100).unwrap(), RasterData::F32(a));
        assert_eq!(r.header().level_dims(2), (20, 25));
    }

    #[test]
    fn outside_read_is_nodata() {
        let dir = tmp();
        let p = dir.path().join("o.tpr");
        let a = Array3::from_elem((1, 10, 10), 3u8);
        write_raster(&p, &RasterData::U8(a), RasterParams::default().nodata(Some(255.0)).tile(4)).unwrap();
        let r = RasterReader::open(&p).unwrap();
        let out = r.read_region(0, 20, 20, 3, 3).unwrap();
        assert_eq!(out, RasterData::U8(Array3::from_elem((1, 3, 3), 255)));
        assert_eq!(r.stats().tiles_read(), 0);
        let real = r.read_region_real::<f64>(0, 8, 8, 4, 4).unwrap();
        assert_eq!(real[[0, 0, 0]], 3.0);
        assert!(real[[0, 3, 3]].is_nan());
    }

    #[test]
    fn random_windows_match_full_level() {
        let dir = tmp();
        let p = dir.path().join("w.tpr");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Array3::from_shape_fn((2, 70, 90), |_| rng.random_range(-1000i16..1000));
        write_raster(&p, &RasterData::I16(a), RasterParams::default().levels(3).tile(16).nodata(Some(-32768.0))).unwrap();
        let r = RasterReader::open(&p).unwrap();
        for level in 0..3 {
            let RasterData::I16(full) = r.read_level(level).unwrap() else { panic!() };
            let (lw, lh) = r.header().level_dims(level);
            for _ in 0..1000 / 3 {
                let w = rng.random_range(1..=lw);
                let h = rng.random_range(1..=lh);
                let x0 = rng.random_range(0..=lw - w);
                let y0 = rng.random_range(0..=lh - h);
                let RasterData::I16(got) = r.read_region(level, x0 as i64, y0 as i64, w, h).unwrap() else { panic!() };
                assert_eq!(got, window(&full, x0, y0, w, h));
            }
        }
    }

    #[test]
    fn disjoint_tile_reads_are_counted() {
        let dir = tmp();
        let p = dir.path().join("t.tpr");
        let a = Array3::from_elem((1, 64, 64), 1.0f32);
        write_raster(&p, &RasterData::F32(a), RasterParams::default().tile(16)).unwrap();
        let r = RasterReader::open(&p).unwrap();
        for (tx, ty) in [(0, 0), (1, 2), (3, 3)] {
            r.read_region(0, tx * 16, ty * 16, 16, 16).unwrap();
        }
        assert_eq!(r.stats().tiles_read(), 3);
        assert_eq!(r.stats().bytes_read(), 3 * 16 * 16 * 4);
    }

    #[test]
    fn unrepresentable_values_rejected() {
        let a = Array3::from_elem((1, 2, 2), 300.0f64);
        assert!(RasterData::from_real(a.view(), DType::U8, None).is_err());
        let mut b = Array3::from_elem((1, 2, 2), 1.0f64);
        b[[0, 0, 0]] = f64::NAN;
        assert!(RasterData::from_real(b.view(), DType::I16, None).is_err());
        let ok = RasterData::from_real(b.view(), DType::I16, Some(-1.0)).unwrap();
        assert_eq!(ok, RasterData::I16(Array3::from_shape_vec((1, 2, 2), vec![-1, 1, 1, 1]).unwrap()));
    }

    #[test]
    fn bad_level_and_headers() {
        let dir = tmp();
        let p = dir.path().join("b.tpr");
        write_raster(&p, &RasterData::U8(Array3::zeros((1, 3, 3))), RasterParams::default()).unwrap();
        let r = RasterReader::open(&p).unwrap();
        assert!(matches!(r.read_region(1, 0, 0, 1, 1), Err(RasterError::BadLevel { .. })));
        let bad = RasterParams::default().tile(3);
        assert!(write_raster(&p, &RasterData::U8(Array3::zeros((1, 3, 3))), bad).is_err());
    }
}
