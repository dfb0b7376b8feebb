use ndarray::{Array3, ArrayView3};

use super::{DType, Sample};
use crate::Scalar;

/// Mean of a 2×2 (or boundary 2×1 / 1×1) block, summed in f64 and rounded
/// once to the output type. Shared rounding keeps overview reads and
/// evaluated box downscales bit-identical.
#[inline]
pub fn block_mean<T: Scalar>(vals: &[T]) -> T {
    let mut sum = 0.0f64;
    for v in vals {
        sum += v.as_f64();
    }
    T::lit(sum / vals.len() as f64)
}

/// Next pyramid level: ceil-halved dims, 2×2 means that skip the nodata
/// sentinel. Without a sentinel NaN propagates.
pub fn build_level<S: Sample>(prev: ArrayView3<'_, S>, nodata: Option<f64>) -> Array3<S> {
    let (c, h, w) = prev.dim();
    let (nw, nh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = Array3::from_elem((c, nh, nw), S::from_f64(0.0));
    let mut vals = [0.0f64; 4];
    for ch in 0..c {
        for y in 0..nh {
            for x in 0..nw {
                let mut n = 0;
                for yy in 2 * y..(2 * y + 2).min(h) {
                    for xx in 2 * x..(2 * x + 2).min(w) {
                        let v = prev[[ch, yy, xx]].to_f64();
                        let missing = nodata.is_some_and(|nd| v == nd || v.is_nan());
                        if !missing {
                            vals[n] = v;
                            n += 1;
                        }
                    }
                }
                out[[ch, y, x]] = if n == 0 {
                    S::from_f64(nodata.expect("missing samples imply a sentinel"))
                } else {
                    let m = block_mean(&vals[..n]);
                    match S::DTYPE {
                        DType::F32 => S::from_f64(m as f32 as f64),
                        _ => S::from_f64(m.round()),
                    }
                };
            }
        }
    }
    out
}
