//! Block dropout on RoI feature maps.
//!
//! Block top-left corners are drawn independently with probability `gamma`
//! over the `(size - block + 1)^2` valid positions; every cell covered by a
//! selected block is zeroed across all channels and the survivors are scaled
//! by `cells / kept`.

use ndarray::{Array3, ArrayView3};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

fn check(size: usize, block: usize, drop_prob: f64) -> Result<()> {
    if block == 0 || block > size {
        return Err(Error::Precondition(format!(
            "dropblock block size {block} must lie in [1, {size}]"
        )));
    }
    if !(0.0..=1.0).contains(&drop_prob) {
        return Err(Error::Precondition(format!(
            "drop probability {drop_prob} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Per-corner seeding rate chosen so that, ignoring overlaps, `drop_prob` of the map is dropped.
pub fn gamma(size: usize, block: usize, drop_prob: f64) -> f64 {
    let valid = (size - block + 1) as f64;
    (drop_prob / (block * block) as f64 * (size * size) as f64 / (valid * valid)).min(1.0)
}

/// Samples a `size * size` multiplier map (zeros on dropped cells, rescale elsewhere).
pub fn dropblock_mask(
    rng: &mut Rng,
    size: usize,
    block: usize,
    drop_prob: f64,
) -> Result<Vec<f64>> {
    check(size, block, drop_prob)?;
    let cells = size * size;
    if drop_prob == 0.0 {
        return Ok(vec![1.0; cells]);
    }
    let g = gamma(size, block, drop_prob);
    let valid = size - block + 1;
    let mut keep = vec![true; cells];
    for cy in 0..valid {
        for cx in 0..valid {
            if rng.random_bool(g) {
                for y in cy..cy + block {
                    for x in cx..cx + block {
                        keep[y * size + x] = false;
                    }
                }
            }
        }
    }
    let kept = keep.iter().filter(|&&k| k).count();
    let scale = if kept == 0 {
        0.0
    } else {
        cells as f64 / kept as f64
    };
    Ok(keep
        .into_iter()
        .map(|k| if k { scale } else { 0.0 })
        .collect())
}

/// Closed-form expected fraction of dropped cells.
pub fn expected_drop_fraction(size: usize, block: usize, drop_prob: f64) -> f64 {
    let g = gamma(size, block, drop_prob);
    let valid = size - block + 1;
    let covering = |i: usize| -> usize {
        // corners c with c <= i < c + block and 0 <= c < valid
        let lo = i.saturating_sub(block - 1);
        let hi = i.min(valid - 1);
        hi + 1 - lo
    };
    let mut total = 0.0;
    for y in 0..size {
        for x in 0..size {
            let n = (covering(y) * covering(x)) as i32;
            total += 1.0 - (1.0 - g).powi(n);
        }
    }
    total / (size * size) as f64
}

/// Applies block dropout to one `channels x size x size` RoI map.
pub fn dropblock(
    f: ArrayView3<f64>,
    block: usize,
    drop_prob: f64,
    rng: &mut Rng,
) -> Result<Array3<f64>> {
    let (_, h, w) = f.dim();
    if h != w {
        return Err(Error::Precondition("dropblock expects square maps".into()));
    }
    let mask = dropblock_mask(rng, h, block, drop_prob)?;
    let mut out = f.to_owned();
    for mut ch in out.outer_iter_mut() {
        for ((y, x), v) in ch.indexed_iter_mut() {
            *v *= mask[y * w + x];
        }
    }
    Ok(out)
}
