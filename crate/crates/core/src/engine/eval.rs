use serde::Serialize;

use crate::data::GtInstance;
use crate::geometry::{iou, BBox};

use super::config::{ApMode, EvalConfig};
use super::infer::Detection;

/// IoU thresholds `0.5:0.05:0.95` used for average recall.
pub fn recall_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Area under the precision envelope at every recall step.
fn all_point_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mpre: Vec<f64> = std::iter::once(0.0)
        .chain(precision.iter().copied())
        .chain([0.0])
        .collect();
    let mrec: Vec<f64> = std::iter::once(0.0)
        .chain(recall.iter().copied())
        .chain([1.0])
        .collect();
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len())
        .filter(|&i| mrec[i] != mrec[i - 1])
        .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
        .sum()
}

fn eleven_point_ap(recall: &[f64], precision: &[f64]) -> f64 {
    (0..=10)
        .map(|t| {
            let t = t as f64 / 10.0;
            recall
                .iter()
                .zip(precision)
                .filter(|(r, _)| **r >= t)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Average precision of one class. `dets` holds `(image, score, box)`;
/// `gts[n]` lists that image's boxes of the class with their difficult flag.
/// Matches to difficult boxes are ignored. `None` when the class has no
/// non-difficult instance.
pub fn average_precision(
    dets: &[(usize, f64, BBox)],
    gts: &[Vec<(BBox, bool)>],
    threshold: f64,
    mode: ApMode,
) -> Option<f64> {
    let npos = gts.iter().flatten().filter(|(_, d)| !d).count();
    if npos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for &i in &order {
        let (n, _, b) = dets[i];
        let best = gts[n]
            .iter()
            .enumerate()
            .map(|(j, (g, _))| (j, iou(&b, g)))
            .fold(None, |acc: Option<(usize, f64)>, (j, o)| match acc {
                Some((_, bo)) if bo >= o => acc,
                _ => Some((j, o)),
            });
        match best {
            Some((j, o)) if o >= threshold => {
                if gts[n][j].1 {
                    continue;
                }
                if taken[n][j] {
                    fp += 1.0;
                } else {
                    taken[n][j] = true;
                    tp += 1.0;
                }
            }
            _ => fp += 1.0,
        }
        recall.push(tp / npos as f64);
        precision.push(tp / (tp + fp));
    }
    Some(match mode {
        ApMode::AllPoint => all_point_ap(&recall, &precision),
        ApMode::ElevenPoint => eleven_point_ap(&recall, &precision),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassEval {
    pub category: usize,
    /// Non-difficult instances.
    pub num_gt: usize,
    pub ap: Option<f64>,
    pub corloc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub classes: Vec<ClassEval>,
    /// Mean AP over classes that have instances.
    pub map: f64,
    pub corloc: f64,
    pub ar1: f64,
    pub ar10: f64,
    pub ar100: f64,
}

fn mean_some(v: impl Iterator<Item = Option<f64>>) -> f64 {
    let xs: Vec<f64> = v.flatten().collect();
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn class_gts(gts: &[&[GtInstance]], c: usize) -> Vec<Vec<(BBox, bool)>> {
    gts.iter()
        .map(|g| {
            g.iter()
                .filter(|g| g.category == c)
                .map(|g| (g.bbox, g.difficult))
                .collect()
        })
        .collect()
}

/// Fraction of images containing class `c` whose top-scoring detection of
/// `c` overlaps one of its boxes by at least `threshold`.
pub fn corloc(
    detections: &[Vec<Detection>],
    gts: &[Vec<(BBox, bool)>],
    c: usize,
    threshold: f64,
) -> Option<f64> {
    let mut positives = 0usize;
    let mut hits = 0usize;
    for (dets, g) in detections.iter().zip(gts) {
        if g.is_empty() {
            continue;
        }
        positives += 1;
        let top =
            dets.iter()
                .filter(|d| d.category == c)
                .fold(None, |acc: Option<&Detection>, d| match acc {
                    Some(a) if a.score >= d.score => acc,
                    _ => Some(d),
                });
        if let Some(d) = top {
            if g.iter().any(|(b, _)| iou(&d.bbox, b) >= threshold) {
                hits += 1;
            }
        }
    }
    (positives > 0).then(|| hits as f64 / positives as f64)
}

/// Recall of class `c` using each image's `k` best detections of the class,
/// averaged over [`recall_thresholds`]. Each box matches at most one detection.
pub fn average_recall(
    detections: &[Vec<Detection>],
    gts: &[Vec<(BBox, bool)>],
    c: usize,
    k: usize,
) -> Option<f64> {
    let npos = gts.iter().flatten().filter(|(_, d)| !d).count();
    if npos == 0 {
        return None;
    }
    let thresholds = recall_thresholds();
    let mut total = 0.0;
    for &t in &thresholds {
        let mut matched = 0usize;
        for (dets, g) in detections.iter().zip(gts) {
            let mut mine: Vec<&Detection> = dets.iter().filter(|d| d.category == c).collect();
            mine.sort_by(|a, b| b.score.total_cmp(&a.score));
            let mut taken = vec![false; g.len()];
            for d in mine.into_iter().take(k) {
                let best = g
                    .iter()
                    .enumerate()
                    .filter(|(j, (_, diff))| !taken[*j] && !diff)
                    .map(|(j, (b, _))| (j, iou(&d.bbox, b)))
                    .filter(|&(_, o)| o >= t)
                    .fold(None, |acc: Option<(usize, f64)>, (j, o)| match acc {
                        Some((_, bo)) if bo >= o => acc,
                        _ => Some((j, o)),
                    });
                if let Some((j, _)) = best {
                    taken[j] = true;
                    matched += 1;
                }
            }
        }
        total += matched as f64 / npos as f64;
    }
    Some(total / thresholds.len() as f64)
}

/// Evaluates `detections[n]` against `gts[n]` for every class.
pub fn evaluate(
    detections: &[Vec<Detection>],
    gts: &[&[GtInstance]],
    num_classes: usize,
    cfg: &EvalConfig,
) -> EvalReport {
    let mut classes = Vec::with_capacity(num_classes);
    let mut ar = [Vec::new(), Vec::new(), Vec::new()];
    for c in 0..num_classes {
        let g = class_gts(gts, c);
        let scored: Vec<(usize, f64, BBox)> = detections
            .iter()
            .enumerate()
            .flat_map(|(n, ds)| {
                ds.iter()
                    .filter(|d| d.category == c)
                    .map(move |d| (n, d.score, d.bbox))
            })
            .collect();
        for (slot, k) in ar.iter_mut().zip([1, 10, 100]) {
            slot.push(average_recall(detections, &g, c, k));
        }
        classes.push(ClassEval {
            category: c,
            num_gt: g.iter().flatten().filter(|(_, d)| !d).count(),
            ap: average_precision(&scored, &g, cfg.iou_threshold, cfg.ap_mode),
            corloc: corloc(detections, &g, c, cfg.iou_threshold),
        });
    }
    let [ar1, ar10, ar100] = ar.map(|v| mean_some(v.into_iter()));
    EvalReport {
        map: mean_some(classes.iter().map(|c| c.ap)),
        corloc: mean_some(classes.iter().map(|c| c.corloc)),
        classes,
        ar1,
        ar10,
        ar100,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, s: f64) -> BBox {
        BBox::new(x, y, x + s, y + s).unwrap()
    }

    fn det(c: usize, bx: BBox, score: f64) -> Detection {
        Detection {
            category: c,
            bbox: bx,
            score,
        }
    }

    fn gt(c: usize, bx: BBox) -> GtInstance {
        GtInstance {
            category: c,
            bbox: bx,
            difficult: false,
        }
    }

    #[test]
    fn perfect_detections_score_one() {
        let g = vec![gt(0, b(0.0, 0.0, 10.0)), gt(1, b(20.0, 20.0, 10.0))];
        let d = vec![
            det(0, b(0.0, 0.0, 10.0), 0.9),
            det(1, b(20.0, 20.0, 10.0), 0.8),
        ];
        let r = evaluate(&[d], &[&g], 3, &EvalConfig::default());
        assert_eq!(r.map, 1.0);
        assert_eq!(r.corloc, 1.0);
        assert_eq!(r.ar1, 1.0);
        assert_eq!(r.classes[2].ap, None);
    }

    #[test]
    fn no_detections_score_zero() {
        let g = vec![gt(0, b(0.0, 0.0, 10.0))];
        let r = evaluate(&[vec![]], &[&g], 1, &EvalConfig::default());
        assert_eq!(r.map, 0.0);
        assert_eq!(r.corloc, 0.0);
        assert_eq!(r.ar100, 0.0);
    }

    #[test]
    fn hand_computed_ap() {
        // Two gts; detections ranked TP, FP, TP: precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1.
        let g = vec![vec![
            (b(0.0, 0.0, 10.0), false),
            (b(50.0, 50.0, 10.0), false),
        ]];
        let d = vec![
            (0, 0.9, b(0.0, 0.0, 10.0)),
            (0, 0.8, b(30.0, 0.0, 10.0)),
            (0, 0.7, b(50.0, 50.0, 10.0)),
        ];
        let ap = average_precision(&d, &g, 0.5, ApMode::AllPoint).unwrap();
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        let ap11 = average_precision(&d, &g, 0.5, ApMode::ElevenPoint).unwrap();
        assert!((ap11 - (6.0 * 1.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-12);
    }

    #[test]
    fn duplicates_and_difficult() {
        let g = vec![vec![(b(0.0, 0.0, 10.0), false), (b(40.0, 0.0, 10.0), true)]];
        let d = vec![
            (0, 0.9, b(0.0, 0.0, 10.0)),
            (0, 0.8, b(40.0, 0.0, 10.0)),
            (0, 0.7, b(0.0, 0.0, 10.0)),
        ];
        // The difficult match is ignored and the duplicate is a false positive.
        let ap = average_precision(&d, &g, 0.5, ApMode::AllPoint).unwrap();
        assert_eq!(ap, 1.0);
        assert_eq!(
            average_precision(
                &[],
                &[vec![(b(0.0, 0.0, 1.0), true)]],
                0.5,
                ApMode::AllPoint
            ),
            None
        );
    }

    #[test]
    fn recall_respects_top_k() {
        let g = vec![vec![
            (b(0.0, 0.0, 10.0), false),
            (b(40.0, 0.0, 10.0), false),
        ]];
        let d = vec![vec![
            det(0, b(0.0, 0.0, 10.0), 0.9),
            det(0, b(40.0, 0.0, 10.0), 0.5),
        ]];
        assert_eq!(average_recall(&d, &g, 0, 1), Some(0.5));
        assert_eq!(average_recall(&d, &g, 0, 10), Some(1.0));
    }

    proptest! {
        #[test]
        fn metrics_lie_in_unit_interval(
            boxes in prop::collection::vec((0.0..80.0f64, 0.0..80.0f64, 4.0..20.0f64, 0.0..1.0f64, 0usize..2), 1..12),
            gts in prop::collection::vec((0.0..80.0f64, 0.0..80.0f64, 4.0..20.0f64, 0usize..2), 1..6),
        ) {
            let d: Vec<Detection> = boxes.iter().map(|&(x, y, s, sc, c)| det(c, b(x, y, s), sc)).collect();
            let g: Vec<GtInstance> = gts.iter().map(|&(x, y, s, c)| gt(c, b(x, y, s))).collect();
            let r = evaluate(&[d], &[&g], 2, &EvalConfig::default());
            for v in [r.map, r.corloc, r.ar1, r.ar10, r.ar100] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(r.ar1 <= r.ar10 + 1e-12 && r.ar10 <= r.ar100 + 1e-12);
        }
    }
}
