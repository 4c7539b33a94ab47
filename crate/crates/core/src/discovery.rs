//! Object discovery: for every image, stage and present class, the
//! previous stage's top-scoring proposal becomes a pseudo ground truth, and
//! proposals whose embeddings resemble it more than the class bank does on
//! average become additional ones after NMS. Proposals overlapping a pseudo
//! ground truth are relabeled with its class, and the discovered embeddings
//! are appended to the bank.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{descending_order, iou, BBox};
use crate::sampling::{
    select_argmax, Augmentation, BankEntry, ContrastiveBank, EmbeddingSource, Provenance,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    #[default]
    Similarity,
    Classification,
}

/// Weight given to discovered bank entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscoveredOmega {
    /// The same normalized MIL score as sampled entries.
    #[default]
    MilFormula,
    One,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoveryConfig {
    pub enabled: bool,
    pub criterion: Criterion,
    /// Fixed score threshold for the classification criterion; `None` is adaptive.
    pub cls_threshold: Option<f64>,
    pub tau_nms: f64,
    /// IoU above which a proposal inherits a pseudo ground truth's class.
    pub fg_iou: f64,
    pub discovered_omega: DiscoveredOmega,
    /// Whether discovered pseudo ground truths also yield regression targets.
    pub regress_discovered: bool,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            criterion: Criterion::Similarity,
            cls_threshold: None,
            tau_nms: 0.1,
            fg_iou: 0.5,
            discovered_omega: DiscoveredOmega::MilFormula,
            regress_discovered: true,
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_nms) {
            return Err(Error::config("tau_nms must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.fg_iou) {
            return Err(Error::config("fg_iou must lie in [0, 1)"));
        }
        if let Some(t) = self.cls_threshold {
            if !t.is_finite() {
                return Err(Error::config("cls_threshold must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgtSource {
    Argmax,
    Discovered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoGroundTruth {
    pub category: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub proposal: usize,
    /// Stage supervised by this pseudo ground truth, `1..=K`.
    pub stage: usize,
    pub source: PgtSource,
    /// Previous-stage score of the proposal for `category`.
    pub score: f64,
}

/// Per-proposal labels of one stage: a class index (`C` is background),
/// a loss weight, and the index of the claiming pseudo ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceLabels {
    pub num_classes: usize,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
    pub matched: Vec<Option<usize>>,
    claim_iou: Vec<f64>,
    nearest_iou: Vec<f64>,
}

impl InstanceLabels {
    /// Every proposal background, weight zero.
    pub fn background(num_classes: usize, proposals: usize) -> Self {
        Self {
            num_classes,
            labels: vec![num_classes; proposals],
            weights: vec![0.0; proposals],
            matched: vec![None; proposals],
            claim_iou: vec![0.0; proposals],
            nearest_iou: vec![-1.0; proposals],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_foreground(&self, m: usize) -> bool {
        self.labels[m] < self.num_classes
    }

    /// One-hot `(C + 1) x M` matrix.
    pub fn to_matrix(&self) -> ndarray::Array2<u8> {
        let mut y = ndarray::Array2::zeros((self.num_classes + 1, self.len()));
        for (m, &c) in self.labels.iter().enumerate() {
            y[[c, m]] = 1;
        }
        y
    }
}

fn dot<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean similarity between the argmax embedding and the class bank.
///
/// A running mean, so a bank of identical entries reproduces their common
/// similarity bit for bit.
pub fn compute_threshold(z_argmax: ArrayView1<'_, f64>, bank_class: &[BankEntry]) -> Result<f64> {
    if bank_class.is_empty() {
        return Err(Error::domain("similarity threshold over an empty bank"));
    }
    let mut mean = 0.0;
    for (i, e) in bank_class.iter().enumerate() {
        mean += (dot(&e.embedding, z_argmax.iter()) - mean) / (i + 1) as f64;
    }
    Ok(mean)
}

/// `{m : z_m · z_anchor > tau}`.
pub fn similarity_candidates(z: ArrayView2<'_, f64>, anchor: usize, tau: f64) -> Vec<usize> {
    let za = z.row(anchor);
    (0..z.nrows())
        .filter(|&m| dot(z.row(m).iter(), za.iter()) > tau)
        .collect()
}

/// `{m : scores_m > tau}`.
pub fn classification_candidates(scores: ArrayView1<'_, f64>, tau: f64) -> Vec<usize> {
    (0..scores.len()).filter(|&m| scores[m] > tau).collect()
}

/// NMS over `[anchor] ++ candidates` (candidates by descending score), with the anchor always first and kept.
#[allow(clippy::too_many_arguments)]
pub fn select_pseudo_gts(
    anchor: usize,
    candidates: &[usize],
    scores: ArrayView1<'_, f64>,
    proposals: &[BBox],
    tau_nms: f64,
    category: usize,
    stage: usize,
) -> Vec<PseudoGroundTruth> {
    let make = |m: usize, source| PseudoGroundTruth {
        category,
        bbox: proposals[m],
        proposal: m,
        stage,
        source,
        score: scores[m],
    };
    let mut kept = vec![make(anchor, PgtSource::Argmax)];
    let cand_scores: Vec<f64> = candidates.iter().map(|&m| scores[m]).collect();
    for i in descending_order(&cand_scores) {
        let m = candidates[i];
        if kept.iter().all(|k| iou(&k.bbox, &proposals[m]) <= tau_nms) {
            kept.push(make(m, PgtSource::Discovered));
        }
    }
    kept
}

/// Relabels proposals against `pgts`, whose indices in `labels.matched` start at `first_index`.
///
/// A proposal goes to the pseudo ground truth it overlaps most; ties keep the
/// earlier one. Above `fg_iou` it takes that class and score, otherwise it
/// stays background weighted by its nearest pseudo ground truth's score.
pub fn relabel(
    labels: &mut InstanceLabels,
    pgts: &[PseudoGroundTruth],
    first_index: usize,
    proposals: &[BBox],
    fg_iou: f64,
) {
    for (j, g) in pgts.iter().enumerate() {
        for (m, p) in proposals.iter().enumerate() {
            let o = iou(p, &g.bbox);
            if o > labels.nearest_iou[m] {
                labels.nearest_iou[m] = o;
                if !labels.is_foreground(m) {
                    labels.weights[m] = g.score;
                }
            }
            if o > fg_iou && o > labels.claim_iou[m] {
                labels.claim_iou[m] = o;
                labels.labels[m] = g.category;
                labels.weights[m] = g.score;
                labels.matched[m] = Some(first_index + j);
            }
        }
    }
}

/// One image's inputs to discovery.
#[derive(Debug, Clone)]
pub struct DiscoveryImage<'a> {
    pub id: &'a str,
    /// Position in the batch.
    pub index: usize,
    pub proposals: &'a [BBox],
    pub labels: &'a [bool],
    /// Foreground scores `M x C` of stages `0..K` (stage 0 is the MIL head).
    pub stage_scores: Vec<ArrayView2<'a, f64>>,
    /// MIL scores `X`.
    pub mil_scores: ArrayView2<'a, f64>,
    /// Clean embeddings, required when discovery is enabled with the similarity criterion.
    pub embeddings: Option<ArrayView2<'a, f64>>,
    /// `ω` denominator per class.
    pub omega_totals: Vec<f64>,
}

/// Labels and pseudo ground truths of stages `1..=K` for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDiscovery {
    pub labels: Vec<InstanceLabels>,
    pub pseudo_gts: Vec<Vec<PseudoGroundTruth>>,
}

fn adaptive_cls_threshold(
    bank_class: &[BankEntry],
    images: &[DiscoveryImage<'_>],
    prev_stage: usize,
    c: usize,
) -> Option<f64> {
    let scores: Vec<f64> = bank_class
        .iter()
        .filter_map(|e| {
            let image = match e.source? {
                EmbeddingSource::Clean { image, .. } | EmbeddingSource::Augmented { image, .. } => {
                    image
                }
            };
            images
                .get(image)
                .map(|img| img.stage_scores[prev_stage][[e.provenance.proposal, c]])
        })
        .collect();
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Runs argmax labeling, and when enabled discovery, for every image in
/// order, stage `1..=K` and present class. Discovered embeddings are appended
/// to `bank` as they are found.
pub fn run_object_discovery(
    images: &[DiscoveryImage<'_>],
    bank: &mut ContrastiveBank,
    cfg: &DiscoveryConfig,
    stages: usize,
) -> Result<Vec<ImageDiscovery>> {
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        if img.stage_scores.len() < stages {
            return Err(Error::Precondition(format!(
                "{}: {} stage score matrices for {stages} stages",
                img.id,
                img.stage_scores.len()
            )));
        }
        let num_classes = img.labels.len();
        let mut result = ImageDiscovery {
            labels: Vec::with_capacity(stages),
            pseudo_gts: Vec::with_capacity(stages),
        };
        for k in 1..=stages {
            let prev = img.stage_scores[k - 1];
            let mut labels = InstanceLabels::background(num_classes, img.proposals.len());
            let mut pgts: Vec<PseudoGroundTruth> = Vec::new();
            for c in (0..num_classes).filter(|&c| img.labels[c]) {
                let anchor = select_argmax(prev, c, img.labels)?;
                let col = prev.column(c);
                let found = if cfg.enabled {
                    let mut cands = match cfg.criterion {
                        Criterion::Similarity => {
                            let z = img.embeddings.ok_or_else(|| {
                                Error::Precondition("similarity discovery needs embeddings".into())
                            })?;
                            let tau = compute_threshold(z.row(anchor), bank.class(c))?;
                            similarity_candidates(z, anchor, tau)
                        }
                        Criterion::Classification => {
                            let tau = match cfg.cls_threshold {
                                Some(t) => t,
                                None => adaptive_cls_threshold(bank.class(c), images, k - 1, c)
                                    .ok_or_else(|| {
                                        Error::domain("adaptive threshold over an empty bank")
                                    })?,
                            };
                            classification_candidates(col, tau)
                        }
                    };
                    cands.retain(|&m| !labels.is_foreground(m));
                    select_pseudo_gts(anchor, &cands, col, img.proposals, cfg.tau_nms, c, k)
                } else {
                    select_pseudo_gts(anchor, &[], col, img.proposals, cfg.tau_nms, c, k)
                };
                relabel(&mut labels, &found, pgts.len(), img.proposals, cfg.fg_iou);
                if let Some(z) = img.embeddings.filter(|_| cfg.enabled) {
                    for g in found.iter().filter(|g| g.source == PgtSource::Discovered) {
                        let weight = match cfg.discovered_omega {
                            DiscoveredOmega::One => 1.0,
                            DiscoveredOmega::MilFormula => {
                                let t = img.omega_totals[c];
                                if t > 0.0 {
                                    img.mil_scores[[g.proposal, c]] / t
                                } else {
                                    0.0
                                }
                            }
                        };
                        bank.push(BankEntry {
                            embedding: z.row(g.proposal).to_vec(),
                            label: c,
                            weight,
                            provenance: Provenance {
                                image: img.id.to_string(),
                                proposal: g.proposal,
                                stage: k,
                                augmentation: Augmentation::Discovered,
                            },
                            source: Some(EmbeddingSource::Clean {
                                image: img.index,
                                row: g.proposal,
                            }),
                        })?;
                    }
                }
                pgts.extend(found);
            }
            result.labels.push(labels);
            result.pseudo_gts.push(pgts);
        }
        out.push(result);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::nms;
    use crate::rng::rng_for;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn entry(z: Vec<f64>, c: usize) -> BankEntry {
        BankEntry {
            embedding: z,
            label: c,
            weight: 1.0,
            provenance: Provenance {
                image: "i".into(),
                proposal: 0,
                stage: 0,
                augmentation: Augmentation::Iou,
            },
            source: None,
        }
    }

    fn random_unit(rng: &mut crate::rng::Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn bx(x: f64, y: f64, s: f64) -> BBox {
        BBox::new(x, y, x + s, y + s).unwrap()
    }

    #[test]
    fn threshold_examples() {
        let z = vec![0.6, 0.8];
        let zv = ndarray::arr1(&z);
        assert_eq!(
            compute_threshold(zv.view(), &[entry(z.clone(), 0)]).unwrap(),
            1.0
        );
        let neg = z.iter().map(|v| -v).collect();
        assert_eq!(
            compute_threshold(zv.view(), &[entry(z.clone(), 0), entry(neg, 0)]).unwrap(),
            0.0
        );
        assert!(compute_threshold(zv.view(), &[]).is_err());

        let mut rng = rng_for(5, &[]);
        let bank: Vec<BankEntry> = (0..50)
            .map(|_| entry(random_unit(&mut rng, 16), 0))
            .collect();
        let q = ndarray::Array1::from(random_unit(&mut rng, 16));
        let mut direct = 0.0;
        for e in &bank {
            for i in 0..16 {
                direct += e.embedding[i] * q[i];
            }
        }
        assert!((compute_threshold(q.view(), &bank).unwrap() - direct / 50.0).abs() < 1e-9);
    }

    #[test]
    fn candidate_examples() {
        let z = Array2::from_shape_vec((3, 3), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        assert!(similarity_candidates(z.view(), 1, 1.0).is_empty());
        assert_eq!(similarity_candidates(z.view(), 1, 0.5), vec![1]);
        let s = ndarray::arr1(&[0.1, 0.5, 0.41]);
        assert_eq!(classification_candidates(s.view(), 0.4), vec![1, 2]);
    }

    #[test]
    fn pseudo_gt_selection_examples() {
        let props = vec![
            bx(0.0, 0.0, 10.0),
            bx(1.0, 0.0, 10.0),
            bx(50.0, 50.0, 10.0),
            bx(0.0, 0.0, 10.0),
        ];
        let s = ndarray::arr1(&[0.9, 0.5, 0.4, 0.3]);
        let only = select_pseudo_gts(0, &[], s.view(), &props, 0.1, 2, 1);
        assert_eq!(only.len(), 1);
        assert_eq!(only[0].source, PgtSource::Argmax);
        let got = select_pseudo_gts(2, &[0, 1], s.view(), &props, 0.1, 2, 1);
        assert_eq!(
            got.iter().map(|g| g.proposal).collect::<Vec<_>>(),
            vec![2, 0]
        );
        let dup = select_pseudo_gts(0, &[3], s.view(), &props, 0.1, 2, 1);
        assert_eq!(dup.len(), 1);
    }

    #[test]
    fn relabel_examples() {
        let props = vec![bx(0.0, 0.0, 10.0), bx(30.0, 0.0, 10.0), bx(60.0, 0.0, 10.0)];
        let mut l = InstanceLabels::background(2, 3);
        relabel(&mut l, &[], 0, &props, 0.5);
        assert!(l.labels.iter().all(|&c| c == 2));
        let g = PseudoGroundTruth {
            category: 1,
            bbox: props[1],
            proposal: 1,
            stage: 1,
            source: PgtSource::Argmax,
            score: 0.7,
        };
        relabel(&mut l, &[g], 0, &props, 0.5);
        assert_eq!(l.labels, vec![2, 1, 2]);
        assert_eq!(l.weights, vec![0.7, 0.7, 0.7]);
        assert_eq!(l.matched, vec![None, Some(0), None]);
        let y = l.to_matrix();
        for m in 0..3 {
            assert_eq!(y.column(m).sum(), 1);
        }
    }

    #[test]
    fn disabled_discovery_is_argmax_labeling() {
        let props = vec![
            bx(0.0, 0.0, 10.0),
            bx(1.0, 0.0, 10.0),
            bx(40.0, 40.0, 10.0),
            bx(41.0, 41.0, 10.0),
        ];
        let x0 =
            Array2::from_shape_vec((4, 2), vec![0.1, 0.0, 0.5, 0.0, 0.2, 0.3, 0.2, 0.1]).unwrap();
        let x1 =
            Array2::from_shape_vec((4, 2), vec![0.6, 0.0, 0.1, 0.0, 0.2, 0.1, 0.2, 0.4]).unwrap();
        let img = DiscoveryImage {
            id: "a",
            index: 0,
            proposals: &props,
            labels: &[true, true],
            stage_scores: vec![x0.view(), x1.view()],
            mil_scores: x0.view(),
            embeddings: None,
            omega_totals: vec![1.0, 1.0],
        };
        let cfg = DiscoveryConfig {
            enabled: false,
            ..DiscoveryConfig::default()
        };
        let mut bank = ContrastiveBank::new(2);
        let out = run_object_discovery(&[img], &mut bank, &cfg, 2).unwrap();
        assert_eq!(out[0].labels[0].labels, vec![0, 0, 1, 1]);
        assert_eq!(out[0].labels[0].weights, vec![0.5, 0.5, 0.3, 0.3]);
        assert_eq!(out[0].labels[1].labels, vec![0, 0, 1, 1]);
        assert_eq!(out[0].labels[1].weights, vec![0.6, 0.6, 0.4, 0.4]);
        assert!(bank.is_empty());
    }

    #[test]
    fn discovery_appends_to_bank_and_never_drops_the_argmax() {
        let props = vec![bx(0.0, 0.0, 10.0), bx(40.0, 0.0, 10.0), bx(80.0, 0.0, 10.0)];
        let x = Array2::from_shape_vec((3, 1), vec![0.7, 0.2, 0.1]).unwrap();
        let z: Array2<f64> =
            Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 0.995, 0.0998749, 0.0, 1.0]).unwrap();
        let mut zz = z.clone();
        for mut r in zz.rows_mut() {
            let n: f64 = r.dot(&r).sqrt();
            r /= n;
        }
        let mut bank = ContrastiveBank::new(1);
        bank.push(entry(vec![1.0, 0.0], 0)).unwrap();
        bank.push(entry(vec![0.0, 1.0], 0)).unwrap();
        bank.seal();
        let img = DiscoveryImage {
            id: "a",
            index: 0,
            proposals: &props,
            labels: &[true],
            stage_scores: vec![x.view()],
            mil_scores: x.view(),
            embeddings: Some(zz.view()),
            omega_totals: vec![1.0],
        };
        let out = run_object_discovery(&[img], &mut bank, &DiscoveryConfig::default(), 1).unwrap();
        let pg = &out[0].pseudo_gts[0];
        assert_eq!(pg[0].source, PgtSource::Argmax);
        assert_eq!(pg[0].proposal, 0);
        assert_eq!(pg.len(), 2);
        assert_eq!(pg[1].proposal, 1);
        assert_eq!(out[0].labels[0].labels, vec![0, 0, 1]);
        let disc: Vec<_> = bank.discovered().collect();
        assert_eq!(disc.len(), 1);
        assert_eq!(disc[0].provenance.augmentation, Augmentation::Discovered);
        assert!((disc[0].weight - 0.2).abs() < 1e-12);
        assert_eq!(bank.sampled().count(), 2);
    }

    #[test]
    fn bank_of_argmax_copies_discovers_nothing() {
        let props = vec![bx(0.0, 0.0, 10.0), bx(40.0, 0.0, 10.0)];
        let x = Array2::from_shape_vec((2, 1), vec![0.7, 0.3]).unwrap();
        let z = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let mut bank = ContrastiveBank::new(1);
        for _ in 0..4 {
            bank.push(entry(vec![1.0, 0.0], 0)).unwrap();
        }
        bank.seal();
        let img = DiscoveryImage {
            id: "a",
            index: 0,
            proposals: &props,
            labels: &[true],
            stage_scores: vec![x.view()],
            mil_scores: x.view(),
            embeddings: Some(z.view()),
            omega_totals: vec![1.0],
        };
        let out = run_object_discovery(&[img], &mut bank, &DiscoveryConfig::default(), 1).unwrap();
        assert_eq!(out[0].pseudo_gts[0].len(), 1);
        assert_eq!(bank.discovered().count(), 0);
    }

    proptest! {
        #[test]
        fn similarity_candidates_match_filter(seed in any::<u64>(), m in 1usize..40, tau in -1.0f64..1.0) {
            let mut rng = rng_for(seed, &[]);
            let rows: Vec<Vec<f64>> = (0..m).map(|_| random_unit(&mut rng, 8)).collect();
            let z = Array2::from_shape_fn((m, 8), |(i, j)| rows[i][j]);
            let anchor = m / 3;
            let got = similarity_candidates(z.view(), anchor, tau);
            let expect: Vec<usize> = (0..m)
                .filter(|&i| (0..8).map(|j| rows[i][j] * rows[anchor][j]).sum::<f64>() > tau)
                .collect();
            prop_assert_eq!(got, expect);
        }

        #[test]
        fn relabel_matches_exhaustive_matching(
            raw in prop::collection::vec((0.0f64..60.0, 0.0f64..60.0, 5.0f64..30.0), 2..25),
            ng in 1usize..5,
        ) {
            let props: Vec<BBox> = raw.iter().map(|&(x, y, s)| bx(x, y, s)).collect();
            let ng = ng.min(props.len());
            let pgts: Vec<PseudoGroundTruth> = (0..ng).map(|j| PseudoGroundTruth {
                category: j % 2,
                bbox: props[j],
                proposal: j,
                stage: 1,
                source: PgtSource::Argmax,
                score: 0.1 + j as f64 * 0.1,
            }).collect();
            let mut l = InstanceLabels::background(2, props.len());
            relabel(&mut l, &pgts, 0, &props, 0.5);
            for (m, p) in props.iter().enumerate() {
                let mut best = 0;
                for j in 1..ng {
                    if iou(p, &pgts[j].bbox) > iou(p, &pgts[best].bbox) { best = j; }
                }
                let o = iou(p, &pgts[best].bbox);
                if o > 0.5 {
                    prop_assert_eq!(l.labels[m], pgts[best].category);
                    prop_assert_eq!(l.matched[m], Some(best));
                } else {
                    prop_assert_eq!(l.labels[m], 2);
                }
                prop_assert_eq!(l.weights[m], pgts[best].score);
            }
        }

        #[test]
        fn pseudo_gt_nms_matches_reference(
            raw in prop::collection::vec((0.0f64..60.0, 0.0f64..60.0, 5.0f64..30.0, 0.0f64..1.0), 2..30),
        ) {
            let props: Vec<BBox> = raw.iter().map(|&(x, y, s, _)| bx(x, y, s)).collect();
            let mut scores: Vec<f64> = raw.iter().map(|r| r.3).collect();
            scores[0] = 2.0;
            let s = ndarray::Array1::from(scores.clone());
            let cands: Vec<usize> = (1..props.len()).collect();
            let got: Vec<usize> = select_pseudo_gts(0, &cands, s.view(), &props, 0.1, 0, 1).iter().map(|g| g.proposal).collect();
            let expect = nms(&props, &scores, 0.1).unwrap();
            prop_assert_eq!(got, expect);
        }
    }
}
