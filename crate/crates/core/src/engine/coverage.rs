use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{GtInstance, VocRecord};
use crate::discovery::PseudoGroundTruth;
use crate::geometry::iou;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub category: String,
    pub selected: usize,
    pub total: usize,
    pub fraction: f64,
}

impl CoverageRow {
    fn new(category: impl Into<String>, selected: usize, total: usize) -> Self {
        Self {
            category: category.into(),
            selected,
            total,
            fraction: if total == 0 {
                0.0
            } else {
                selected as f64 / total as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub with_difficult: bool,
    pub categories: Vec<CoverageRow>,
    pub overall: CoverageRow,
}

/// How many annotated instances a one-box-per-present-class labeling can
/// reach: every (image, present category) pair selects exactly one.
pub fn argmax_coverage(records: &[VocRecord], with_difficult: bool) -> CoverageReport {
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in records {
        for (name, count) in r.counts(with_difficult) {
            let e = per.entry(name).or_default();
            e.0 += 1;
            e.1 += count;
        }
    }
    let categories: Vec<CoverageRow> = per
        .into_iter()
        .map(|(n, (s, t))| CoverageRow::new(n, s, t))
        .collect();
    let (s, t) = categories
        .iter()
        .fold((0, 0), |(s, t), r| (s + r.selected, t + r.total));
    CoverageReport {
        with_difficult,
        categories,
        overall: CoverageRow::new("all", s, t),
    }
}

/// One image of a discovery dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryRecord {
    pub id: String,
    /// Pseudo ground truths of every stage.
    pub pseudo_gts: Vec<PseudoGroundTruth>,
}

/// Instances covered by a same-category pseudo ground truth with IoU at
/// least `threshold`. `gts[n]` pairs with `dumps[n]`.
pub fn discovery_coverage(
    gts: &[&[GtInstance]],
    dumps: &[&[PseudoGroundTruth]],
    names: &[String],
    threshold: f64,
    with_difficult: bool,
) -> CoverageReport {
    let mut per = vec![(0usize, 0usize); names.len()];
    for (g, pgts) in gts.iter().zip(dumps) {
        for inst in g.iter().filter(|i| with_difficult || !i.difficult) {
            let e = &mut per[inst.category];
            e.1 += 1;
            if pgts
                .iter()
                .any(|p| p.category == inst.category && iou(&p.bbox, &inst.bbox) >= threshold)
            {
                e.0 += 1;
            }
        }
    }
    let categories: Vec<CoverageRow> = names
        .iter()
        .zip(&per)
        .filter(|(_, (_, t))| *t > 0)
        .map(|(n, &(s, t))| CoverageRow::new(n.clone(), s, t))
        .collect();
    let (s, t) = categories
        .iter()
        .fold((0, 0), |(s, t), r| (s + r.selected, t + r.total));
    CoverageReport {
        with_difficult,
        categories,
        overall: CoverageRow::new("all", s, t),
    }
}
