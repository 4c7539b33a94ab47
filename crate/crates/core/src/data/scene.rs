//! Textured-shape scenes.
//!
//! Each category has a distinctive interior texture, so a sub-window of an
//! object is already discriminative (the part-domination trap), some images
//! pack several same-category objects side by side (grouped instances), and
//! many images hold more than one object of a class (missing objects under
//! argmax labeling). Background clutter reuses the shape colours.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{GtInstance, LabeledImage, ProposalConfig, Raster};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
        ShapeKind::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Cross => "cross",
        }
    }

    /// Silhouette test in box-normalized coordinates `u, v` in `[0, 1]`.
    fn contains(self, u: f64, v: f64) -> bool {
        let (cu, cv) = (u - 0.5, v - 0.5);
        match self {
            ShapeKind::Circle => cu * cu + cv * cv <= 0.25,
            ShapeKind::Square => true,
            ShapeKind::Triangle => (cu.abs() * 2.0) <= v,
            ShapeKind::Diamond => cu.abs() + cv.abs() <= 0.5,
            ShapeKind::Cross => cu.abs() <= 0.18 || cv.abs() <= 0.18,
        }
    }

    /// Interior texture in `[0, 1]` at pixel offset `(dx, dy)` from the box corner.
    fn texture(self, dx: f64, dy: f64) -> f64 {
        match self {
            // horizontal stripes
            ShapeKind::Circle => f64::from(((dy / 3.0).floor() as i64).rem_euclid(2) == 0),
            // checkerboard
            ShapeKind::Square => {
                let k = (dx / 4.0).floor() as i64 + (dy / 4.0).floor() as i64;
                f64::from(k.rem_euclid(2) == 0)
            }
            // dot lattice
            ShapeKind::Triangle => {
                let (fx, fy) = (dx.rem_euclid(5.0) - 2.5, dy.rem_euclid(5.0) - 2.5);
                f64::from(fx * fx + fy * fy > 2.0)
            }
            // diagonal stripes
            ShapeKind::Diamond => f64::from((((dx + dy) / 3.0).floor() as i64).rem_euclid(2) == 0),
            // vertical stripes
            ShapeKind::Cross => f64::from(((dx / 3.0).floor() as i64).rem_euclid(2) == 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub num_categories: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Probability that an image contains an adjacent group of 2+ objects of one category.
    pub cluster_prob: f64,
    pub max_cluster_size: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub clutter: usize,
    /// Exactly this many scattered instances, overriding the sampling above.
    pub forced_instances: Option<usize>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            num_categories: 3,
            min_instances: 1,
            max_instances: 4,
            cluster_prob: 0.5,
            max_cluster_size: 3,
            min_size: 20.0,
            max_size: 38.0,
            clutter: 10,
            forced_instances: None,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_categories == 0 {
            return Err(Error::config("scene needs at least one category"));
        }
        if self.num_categories > ShapeKind::ALL.len() {
            return Err(Error::config(format!(
                "at most {} categories are available",
                ShapeKind::ALL.len()
            )));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(Error::config(
                "instances range must satisfy 1 <= min <= max",
            ));
        }
        if !(0.0..=1.0).contains(&self.cluster_prob) {
            return Err(Error::config("cluster_prob must lie in [0, 1]"));
        }
        if self.max_cluster_size < 2 || self.max_cluster_size > self.max_instances {
            return Err(Error::config(
                "max_cluster_size must lie in [2, max_instances]",
            ));
        }
        if !(self.min_size >= 4.0 && self.min_size <= self.max_size) {
            return Err(Error::config("object size range is invalid"));
        }
        let limit = 3.0 * self.max_size;
        if (self.width as f64) < limit || (self.height as f64) < limit {
            return Err(Error::config("canvas too small for the object sizes"));
        }
        if let Some(n) = self.forced_instances {
            if n == 0 {
                return Err(Error::config("forced_instances must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacedShape {
    pub category: usize,
    pub bbox: BBox,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub shapes: Vec<PlacedShape>,
    pub clustered: bool,
}

impl Layout {
    /// Whether some category occurs at least twice.
    pub fn has_repeated_category(&self) -> bool {
        let mut seen = [0usize; 8];
        for s in &self.shapes {
            seen[s.category] += 1;
        }
        seen.iter().any(|&n| n >= 2)
    }
}

/// Probability that [`sample_layout`] yields an image with a repeated
/// category, computed from the sampling distribution itself.
pub fn expected_multi_instance_fraction(cfg: &SceneConfig) -> f64 {
    if let Some(n) = cfg.forced_instances {
        return if n > cfg.num_categories { 1.0 } else { 0.0 };
    }
    let span = (cfg.max_instances - cfg.min_instances + 1) as f64;
    let scattered = (cfg.min_instances..=cfg.max_instances)
        .filter(|&n| n > cfg.num_categories)
        .count() as f64
        / span;
    cfg.cluster_prob + (1.0 - cfg.cluster_prob) * scattered
}

fn random_color(rng: &mut Rng) -> [f64; 3] {
    // saturated colours away from the background mid-grey
    let mut c = [0.0; 3];
    loop {
        for v in c.iter_mut() {
            *v = rng.random_range(0.1..0.95);
        }
        let (mx, mn) = (
            c.iter().cloned().fold(f64::MIN, f64::max),
            c.iter().cloned().fold(f64::MAX, f64::min),
        );
        if mx - mn > 0.35 {
            return c;
        }
    }
}

fn random_box(rng: &mut Rng, cfg: &SceneConfig) -> BBox {
    let w = rng.random_range(cfg.min_size..=cfg.max_size);
    let h = (w * rng.random_range(0.85..1.15)).clamp(cfg.min_size, cfg.max_size);
    let x = rng.random_range(1.0..(cfg.width as f64 - w - 1.0));
    let y = rng.random_range(1.0..(cfg.height as f64 - h - 1.0));
    BBox::new(x.floor(), y.floor(), (x + w).floor(), (y + h).floor()).expect("positive size")
}

fn separated(a: &BBox, b: &BBox, gap: f64) -> bool {
    a.x2() + gap <= b.x1()
        || b.x2() + gap <= a.x1()
        || a.y2() + gap <= b.y1()
        || b.y2() + gap <= a.y1()
}

fn fits(cfg: &SceneConfig, b: &BBox) -> bool {
    b.x1() >= 1.0
        && b.y1() >= 1.0
        && b.x2() <= cfg.width as f64 - 1.0
        && b.y2() <= cfg.height as f64 - 1.0
}

/// Places a group of `count` boxes chained edge to edge.
fn place_cluster(
    rng: &mut Rng,
    cfg: &SceneConfig,
    count: usize,
    taken: &[BBox],
) -> Option<Vec<BBox>> {
    'attempt: for _ in 0..200 {
        let mut group = vec![random_box(rng, cfg)];
        while group.len() < count {
            let prev = *group.last().unwrap();
            let size = random_box(rng, cfg);
            let (w, h) = (size.width(), size.height());
            let gap = rng.random_range(1.0..5.0f64).floor();
            let jitter = rng.random_range(-0.3..0.3) * prev.height().min(prev.width());
            let (x1, y1) = match rng.random_range(0..4) {
                0 => (prev.x2() + gap, prev.y1() + jitter),
                1 => (prev.x1() - gap - w, prev.y1() + jitter),
                2 => (prev.x1() + jitter, prev.y2() + gap),
                _ => (prev.x1() + jitter, prev.y1() - gap - h),
            };
            let (x1, y1) = (x1.floor(), y1.floor());
            let Ok(b) = BBox::new(x1, y1, x1 + w, y1 + h) else {
                continue 'attempt;
            };
            if !fits(cfg, &b) || group.iter().any(|g| !separated(g, &b, 1.0)) {
                continue 'attempt;
            }
            group.push(b);
        }
        if group
            .iter()
            .all(|b| taken.iter().all(|t| separated(t, b, 4.0)))
        {
            return Some(group);
        }
    }
    None
}

fn place_scattered(rng: &mut Rng, cfg: &SceneConfig, taken: &[BBox]) -> Option<BBox> {
    (0..300)
        .map(|_| random_box(rng, cfg))
        .find(|b| taken.iter().all(|t| separated(t, b, 6.0)))
}

/// Samples object categories and positions without rendering.
pub fn sample_layout(rng: &mut Rng, cfg: &SceneConfig) -> Result<Layout> {
    cfg.validate()?;
    let c = cfg.num_categories;
    let clustered = cfg.forced_instances.is_none() && rng.random_bool(cfg.cluster_prob);
    let mut shapes: Vec<PlacedShape> = Vec::new();
    let mut taken: Vec<BBox> = Vec::new();

    if clustered {
        let group_cat = rng.random_range(0..c);
        let size = rng.random_range(2..=cfg.max_cluster_size);
        let boxes = place_cluster(rng, cfg, size, &taken)
            .ok_or_else(|| Error::domain("could not place an object group"))?;
        for b in boxes {
            shapes.push(PlacedShape {
                category: group_cat,
                bbox: b,
                color: random_color(rng),
            });
            taken.push(b);
        }
        // extra objects from the remaining categories, one each
        let mut others: Vec<usize> = (0..c).filter(|&k| k != group_cat).collect();
        others.shuffle(rng);
        let extra = rng
            .random_range(0..=(cfg.max_instances - size))
            .min(others.len());
        for &cat in &others[..extra] {
            if let Some(b) = place_scattered(rng, cfg, &taken) {
                shapes.push(PlacedShape {
                    category: cat,
                    bbox: b,
                    color: random_color(rng),
                });
                taken.push(b);
            }
        }
    } else {
        let n = cfg
            .forced_instances
            .unwrap_or_else(|| rng.random_range(cfg.min_instances..=cfg.max_instances));
        let mut cats: Vec<usize> = (0..c).collect();
        cats.shuffle(rng);
        cats.truncate(n);
        while cats.len() < n {
            cats.push(rng.random_range(0..c));
        }
        for cat in cats {
            let b = place_scattered(rng, cfg, &taken)
                .ok_or_else(|| Error::domain("could not place an object"))?;
            shapes.push(PlacedShape {
                category: cat,
                bbox: b,
                color: random_color(rng),
            });
            taken.push(b);
        }
    }
    Ok(Layout { shapes, clustered })
}

fn paint_shape(
    raster: &mut Raster,
    kind: ShapeKind,
    bbox: &BBox,
    color: [f64; 3],
    phase: (f64, f64),
) {
    let (x0, y0) = (bbox.x1() as usize, bbox.y1() as usize);
    let (x1, y1) = (bbox.x2() as usize, bbox.y2() as usize);
    let (w, h) = (bbox.width(), bbox.height());
    for y in y0..y1.min(raster.height()) {
        for x in x0..x1.min(raster.width()) {
            let u = (x as f64 + 0.5 - bbox.x1()) / w;
            let v = (y as f64 + 0.5 - bbox.y1()) / h;
            if !kind.contains(u, v) {
                continue;
            }
            let t = kind.texture(
                x as f64 - bbox.x1() + phase.0,
                y as f64 - bbox.y1() + phase.1,
            );
            let k = 0.45 + 0.55 * t;
            raster.set(y, x, [color[0] * k, color[1] * k, color[2] * k]);
        }
    }
}

/// Renders a layout with a noisy background and clutter.
pub fn render_layout(rng: &mut Rng, cfg: &SceneConfig, layout: &Layout) -> Raster {
    let (w, h) = (cfg.width, cfg.height);
    let mut raster = Raster::new(w, h);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.6));
    let grad: [f64; 2] = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
    let noise = Normal::new(0.0, 0.035).expect("valid sigma");
    for y in 0..h {
        for x in 0..w {
            let g = grad[0] * (x as f64 / w as f64 - 0.5) + grad[1] * (y as f64 / h as f64 - 0.5);
            let rgb: [f64; 3] = std::array::from_fn(|c| base[c] + g + noise.sample(rng));
            raster.set(y, x, rgb);
        }
    }
    // clutter: small untextured blobs and thin bars
    for _ in 0..cfg.clutter {
        let color = random_color(rng);
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        if rng.random_bool(0.5) {
            let r = rng.random_range(2.0..5.0f64);
            for y in (cy - r).max(0.0) as usize..((cy + r) as usize + 1).min(h) {
                for x in (cx - r).max(0.0) as usize..((cx + r) as usize + 1).min(w) {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if dx * dx + dy * dy <= r * r {
                        raster.set(y, x, color);
                    }
                }
            }
        } else {
            let len = rng.random_range(6.0..18.0f64);
            let horizontal = rng.random_bool(0.5);
            for t in 0..len as usize {
                let (x, y) = if horizontal {
                    (cx as usize + t, cy as usize)
                } else {
                    (cx as usize, cy as usize + t)
                };
                if x < w && y < h {
                    raster.set(y, x, color);
                }
            }
        }
    }
    for s in &layout.shapes {
        let kind = ShapeKind::ALL[s.category];
        let phase = (
            rng.random_range(0.0..6.0f64).floor(),
            rng.random_range(0.0..6.0f64).floor(),
        );
        paint_shape(&mut raster, kind, &s.bbox, s.color, phase);
    }
    raster
}

/// Generates one labelled scene with proposals; a pure function of the rng state and configs.
pub fn generate_scene(
    id: impl Into<String>,
    rng: &mut Rng,
    cfg: &SceneConfig,
    proposals: &ProposalConfig,
) -> Result<LabeledImage> {
    let layout = sample_layout(rng, cfg)?;
    let raster = render_layout(rng, cfg, &layout);
    let gt: Vec<GtInstance> = layout
        .shapes
        .iter()
        .map(|s| GtInstance {
            category: s.category,
            bbox: s.bbox,
            difficult: false,
        })
        .collect();
    let mut labels = vec![false; cfg.num_categories];
    for g in &gt {
        labels[g.category] = true;
    }
    let boxes: Vec<BBox> = gt.iter().map(|g| g.bbox).collect();
    let props = super::generate_proposals(&boxes, cfg.width, cfg.height, rng, proposals)?;
    let image = LabeledImage {
        id: id.into(),
        raster,
        proposals: props,
        image_labels: labels,
        gt_instances: Some(gt),
    };
    debug_assert!(image.validate().is_ok());
    Ok(image)
}
