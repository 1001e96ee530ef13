use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Corner-aligned bilinear resampling of a 2-D map to `(rows, cols)`.
///
/// Source coordinate for target row `y` is `y * (H - 1) / (rows - 1)`
/// (0 when `rows == 1`), likewise for columns. A same-shape target returns
/// the map unchanged.
pub fn interpolate_bilinear(map: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    if map.ndim() != 2 {
        return Err(Error::shape(
            "interpolate_bilinear",
            format!("map must be [H,M], got {:?}", map.shape()),
        ));
    }
    let (rows, cols) = target;
    if rows == 0 || cols == 0 {
        return Err(Error::shape(
            "interpolate_bilinear",
            format!("target {rows}x{cols} has a zero dimension"),
        ));
    }
    let (h, w) = (map.dim(0), map.dim(1));
    if (h, w) == (rows, cols) {
        return Ok(map.clone());
    }
    let src = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let d = map.data();
    let mut out = Vec::with_capacity(rows * cols);
    for y in 0..rows {
        let (y0, y1, fy) = src(y, rows, h);
        for x in 0..cols {
            let (x0, x1, fx) = src(x, cols, w);
            let top = d[y0 * w + x0] as f64 * (1.0 - fx) + d[y0 * w + x1] as f64 * fx;
            let bottom = d[y1 * w + x0] as f64 * (1.0 - fx) + d[y1 * w + x1] as f64 * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Tensor::new(&[rows, cols], out)
}
