//! Region proposals: a multi-scale sliding grid, jittered copies of the object
//! boxes (standing in for a high-recall external proposal method), and
//! uniformly random boxes.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    /// Side lengths of the square grid windows.
    pub grid_scales: Vec<f64>,
    /// Grid stride as a fraction of the window side.
    pub grid_stride: f64,
    /// Jittered boxes per object.
    pub jitter_per_object: usize,
    /// Std-dev of the relative center shift and log-scale of jittered boxes.
    pub jitter_sigma: f64,
    pub random_count: usize,
    pub min_size: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            grid_scales: vec![24.0, 40.0, 64.0],
            grid_stride: 0.5,
            jitter_per_object: 10,
            jitter_sigma: 0.25,
            random_count: 40,
            min_size: 8.0,
        }
    }
}

impl ProposalConfig {
    pub fn grid_only() -> Self {
        Self {
            jitter_per_object: 0,
            random_count: 0,
            ..Self::default()
        }
    }
}

fn grid(width: f64, height: f64, cfg: &ProposalConfig) -> Vec<BBox> {
    let mut out = Vec::new();
    for &s in &cfg.grid_scales {
        if s > width || s > height {
            continue;
        }
        let stride = (s * cfg.grid_stride).round().max(1.0);
        let mut y = 0.0;
        while y + s <= height {
            let mut x = 0.0;
            while x + s <= width {
                out.push(BBox::new(x, y, x + s, y + s).expect("positive scale"));
                x += stride;
            }
            y += stride;
        }
    }
    out
}

fn jitter(
    rng: &mut Rng,
    b: &BBox,
    sigma: f64,
    width: f64,
    height: f64,
    min_size: f64,
) -> Option<BBox> {
    let n = Normal::new(0.0, sigma).expect("valid sigma");
    let (cx, cy) = b.center();
    let cx = cx + n.sample(rng) * b.width();
    let cy = cy + n.sample(rng) * b.height();
    let w = b.width() * n.sample(rng).exp();
    let h = b.height() * n.sample(rng).exp();
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
        .ok()?
        .clip(width, height, min_size)
        .ok()
}

/// Builds the proposal set for an image whose objects are `objects`.
///
/// The object boxes are only consulted here, at generation time. The first
/// jitter of every object is a tight one so each object has a proposal with
/// IoU >= 0.5.
pub fn generate_proposals(
    objects: &[BBox],
    width: usize,
    height: usize,
    rng: &mut Rng,
    cfg: &ProposalConfig,
) -> Result<Vec<BBox>> {
    let (w, h) = (width as f64, height as f64);
    let mut out = grid(w, h, cfg);
    for b in objects {
        for j in 0..cfg.jitter_per_object {
            let sigma = if j == 0 { 0.04 } else { cfg.jitter_sigma };
            let mut candidate = None;
            for _ in 0..50 {
                if let Some(p) = jitter(rng, b, sigma, w, h, cfg.min_size) {
                    if j > 0 || iou(&p, b) >= 0.5 {
                        candidate = Some(p);
                        break;
                    }
                }
            }
            out.push(candidate.unwrap_or(*b));
        }
    }
    let max_side = (w.min(h) / 2.0).max(cfg.min_size + 1.0);
    for _ in 0..cfg.random_count {
        let bw = rng.random_range(cfg.min_size..max_side);
        let bh = rng.random_range(cfg.min_size..max_side);
        let x = rng.random_range(0.0..=(w - bw));
        let y = rng.random_range(0.0..=(h - bh));
        out.push(BBox::new(x, y, x + bw, y + bh)?);
    }
    if out.is_empty() {
        return Err(Error::config("proposal configuration produced no boxes"));
    }
    Ok(out)
}
