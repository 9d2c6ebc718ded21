use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};

/// Source coordinate for destination index `i` under half-pixel centers, clamped at
/// the leading edge. Returns the two taps and the weight of the second.
#[inline]
fn taps(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let x = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
    let x0 = (x.floor() as usize).min(src - 1);
    let x1 = (x0 + 1).min(src - 1);
    (x0, x1, x - x0 as f64)
}

/// Bilinear upsampling of an `H × W × D` grid to `H' × W' × D`.
///
/// Pixel centers sit at `(i + 0.5) / H` (no corner alignment), matching
/// `align_corners=False` in the common deep-learning frameworks. Equal sizes pass the
/// input through untouched; shrinking either axis is an error.
pub fn upsample_bilinear(
    x: ArrayView3<f32>,
    target_h: usize,
    target_w: usize,
) -> Result<Array3<f32>> {
    let (h, w, d) = x.dim();
    if h == 0 || w == 0 {
        return Err(Error::shape("upsample source grid", "non-empty", (h, w)));
    }
    if target_h < h || target_w < w {
        return Err(Error::Config(format!(
            "upsampling cannot shrink {h}x{w} to {target_h}x{target_w}"
        )));
    }
    if (target_h, target_w) == (h, w) {
        return Ok(x.to_owned());
    }
    let cols: Vec<_> = (0..target_w).map(|j| taps(j, w, target_w)).collect();
    let mut out = Array3::<f32>::zeros((target_h, target_w, d));
    for i in 0..target_h {
        let (y0, y1, fy) = taps(i, h, target_h);
        for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            for c in 0..d {
                let v = w00 * x[[y0, x0, c]] as f64
                    + w01 * x[[y0, x1, c]] as f64
                    + w10 * x[[y1, x0, c]] as f64
                    + w11 * x[[y1, x1, c]] as f64;
                out[[i, j, c]] = v as f32;
            }
        }
    }
    Ok(out)
}
