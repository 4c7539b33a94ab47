//! RoI max pooling onto a fixed `size x size` grid.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Pooled features, one row per box laid out as `channel * size * size + y * size + x`,
/// plus the flat feature-map index each output was taken from.
#[derive(Debug, Clone)]
pub struct RoiPool {
    pub pooled: Array2<f64>,
    pub argmax: Vec<u32>,
    pub feature_shape: (usize, usize, usize),
}

fn bin_range(start: f64, bin: f64, i: usize, limit: usize) -> (usize, usize) {
    let lo = (start + i as f64 * bin).floor().max(0.0) as usize;
    let hi = ((start + (i + 1) as f64 * bin).ceil() as usize).max(lo + 1);
    let lo = lo.min(limit - 1);
    (lo, hi.min(limit).max(lo + 1))
}

/// Max-pools every box from `features` (`channels x h x w`, spatial scale `1/stride`).
///
/// Boxes must lie inside the `h*stride x w*stride` image.
pub fn roi_max_pool(
    features: &Array3<f64>,
    boxes: &[BBox],
    stride: f64,
    size: usize,
) -> Result<RoiPool> {
    let (d, h, w) = features.dim();
    let (img_w, img_h) = (w as f64 * stride, h as f64 * stride);
    let fs = features.as_slice().expect("standard layout");
    let cells = size * size;
    let mut pooled = Array2::zeros((boxes.len(), d * cells));
    let mut argmax = vec![0u32; boxes.len() * d * cells];
    for (m, b) in boxes.iter().enumerate() {
        if !b.within(img_w + 1e-9, img_h + 1e-9) {
            return Err(Error::domain(format!(
                "box {:?} outside the {img_w}x{img_h} raster",
                b.to_array()
            )));
        }
        let (x0, y0) = (b.x1() / stride, b.y1() / stride);
        let (bw, bh) = (
            b.width() / stride / size as f64,
            b.height() / stride / size as f64,
        );
        let mut row = pooled.row_mut(m);
        let arg = &mut argmax[m * d * cells..(m + 1) * d * cells];
        for py in 0..size {
            let (ylo, yhi) = bin_range(y0, bh, py, h);
            for px in 0..size {
                let (xlo, xhi) = bin_range(x0, bw, px, w);
                for c in 0..d {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for y in ylo..yhi {
                        let base = (c * h + y) * w;
                        for x in xlo..xhi {
                            let v = fs[base + x];
                            if v > best {
                                best = v;
                                best_idx = base + x;
                            }
                        }
                    }
                    let o = c * cells + py * size + px;
                    row[o] = best;
                    arg[o] = best_idx as u32;
                }
            }
        }
    }
    Ok(RoiPool {
        pooled,
        argmax,
        feature_shape: (d, h, w),
    })
}

/// Routes pooled-feature gradients back to the argmax locations.
pub fn roi_max_pool_backward(pool: &RoiPool, grad: &Array2<f64>) -> Array3<f64> {
    let mut out = Array3::zeros(pool.feature_shape);
    let dst = out.as_slice_mut().expect("standard layout");
    for (g, &i) in grad.iter().zip(pool.argmax.iter()) {
        dst[i as usize] += g;
    }
    out
}
