//! Box arithmetic shared by every stage of the pipeline: IoU, greedy NMS and
//! the center/log-size delta parameterization used by the regression branch.
//!
//! Coordinates are continuous `[x1, y1, x2, y2]` with area `(x2-x1)*(y2-y1)`;
//! there is no `+1` pixel correction anywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle with strictly positive width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::domain(format!(
                "non-finite box [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::domain(format!(
                "degenerate box [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Whether the box lies inside a `width x height` canvas.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    /// Clips to the canvas, keeping at least `min_size` pixels on each side.
    /// Fails if the clipped box would be degenerate.
    pub fn clip(&self, width: f64, height: f64, min_size: f64) -> Result<Self> {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        let x2 = self.x2.clamp(0.0, width);
        let y2 = self.y2.clamp(0.0, height);
        if x2 - x1 < min_size || y2 - y1 < min_size {
            return Err(Error::domain("box vanishes after clipping"));
        }
        BBox::new(x1, y1, x2, y2)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Greedy non-maximum suppression.
///
/// Returns kept indices in descending score order; equal scores keep the lower
/// original index first. A box is dropped when its IoU with an already kept box
/// is strictly greater than `threshold`.
pub fn nms(boxes: &[BBox], scores: &[f64], threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::Precondition(format!(
            "nms: {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Precondition(format!(
            "nms threshold {threshold} outside [0, 1]"
        )));
    }
    let order = descending_order(scores);
    Ok(nms_ordered(boxes, &order, threshold))
}

/// Stable sort of indices by descending score (ties keep index order).
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy suppression over a caller-supplied priority order.
pub fn nms_ordered(boxes: &[BBox], order: &[usize], threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for &i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Regression target relative to an anchor box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDeltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDeltas {
    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }
}

/// `((gcx-pcx)/pw, (gcy-pcy)/ph, ln(gw/pw), ln(gh/ph))`
pub fn encode(anchor: &BBox, target: &BBox) -> BoxDeltas {
    let (pcx, pcy) = anchor.center();
    let (gcx, gcy) = target.center();
    let (pw, ph) = (anchor.width(), anchor.height());
    BoxDeltas {
        dx: (gcx - pcx) / pw,
        dy: (gcy - pcy) / ph,
        dw: (target.width() / pw).ln(),
        dh: (target.height() / ph).ln(),
    }
}

/// Inverse of [`encode`].
pub fn decode(anchor: &BBox, deltas: &BoxDeltas) -> Result<BBox> {
    let d = deltas.to_array();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite box deltas"));
    }
    let (pcx, pcy) = anchor.center();
    let (pw, ph) = (anchor.width(), anchor.height());
    let cx = pcx + deltas.dx * pw;
    let cy = pcy + deltas.dy * ph;
    let w = pw * deltas.dw.exp();
    let h = ph * deltas.dh.exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        // 5x5 overlap over 100 + 100 - 25
        let v = iou(&a, &b(5.0, 5.0, 15.0, 15.0));
        assert!((v - 25.0 / 175.0).abs() < 1e-15);
        assert!((v - 0.142857).abs() < 1e-6);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(matches!(
            BBox::new(0.0, 0.0, 0.0, 5.0),
            Err(Error::Domain(_))
        ));
        assert!(BBox::new(0.0, 0.0, f64::NAN, 5.0).is_err());
        assert!(serde_json::from_str::<BBox>("[3, 3, 1, 1]").is_err());
    }

    #[test]
    fn serializes_as_array() {
        let s = serde_json::to_string(&b(1.0, 2.0, 3.5, 4.0)).unwrap();
        assert_eq!(s, "[1.0,2.0,3.5,4.0]");
    }

    #[test]
    fn nms_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[a], &[0.3], 0.0).unwrap(), vec![0]);
        assert_eq!(nms(&[a, a], &[0.8, 0.9], 0.5).unwrap(), vec![1]);
        let far = b(50.0, 50.0, 60.0, 60.0);
        assert_eq!(nms(&[a, far], &[0.2, 0.7], 0.5).unwrap(), vec![1, 0]);
        assert!(nms(&[], &[], 0.5).unwrap().is_empty());
        // equal scores: lower index wins
        assert_eq!(nms(&[a, a], &[0.5, 0.5], 0.5).unwrap(), vec![0]);
        assert!(nms(&[a], &[], 0.5).is_err());
    }

    #[test]
    fn delta_identity() {
        let p = b(3.0, 4.0, 20.0, 11.0);
        assert_eq!(encode(&p, &p), BoxDeltas::default());
        assert_eq!(decode(&p, &BoxDeltas::default()).unwrap(), p);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..200.0f64, 0.0..200.0f64, 0.5..120.0f64, 0.5..120.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let u = iou(&a, &c);
            prop_assert_eq!(u, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&u));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn delta_round_trip(p in arb_box(), g in arb_box()) {
            let back = decode(&p, &encode(&p, &g)).unwrap();
            for (x, y) in back.to_array().iter().zip(g.to_array()) {
                prop_assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
            }
        }
    }
}
