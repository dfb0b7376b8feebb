use ndarray::Array3;

use super::RasterData;
use crate::manifest::Quantization;
use crate::Scalar;

/// Stored value for a heatmap value of 1.0.
pub const HEATMAP_QUANT_MAX: f64 = 32760.0;
pub const HEATMAP_NODATA: i16 = i16::MIN;
pub const HEATMAP_SCALE: f64 = 1.0 / HEATMAP_QUANT_MAX;

/// Heatmap int16 convention: `round(clamp(v, 0, 1) · 32760)`, NaN → −32768.
pub fn quantize_unit_i16(v: f64) -> i16 {
    if v.is_nan() {
        HEATMAP_NODATA
    } else {
        (v.clamp(0.0, 1.0) * HEATMAP_QUANT_MAX).round() as i16
    }
}

/// `real = stored · scale + offset`; the nodata sentinel becomes NaN.
pub fn dequantize<T: Scalar>(stored: &RasterData, q: Quantization, nodata: Option<f64>) -> Array3<T> {
    let (s, o) = (T::lit(q.scale), T::lit(q.offset));
    stored.to_real::<T>(nodata).mapv_into(|v| v * s + o)
}
