//! Contrastive bank construction: per-stage argmax proposals, IoU sampling
//! around them, masked and noisy feature-level views, and per-sample
//! difficulty weights from the MIL scores.

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::model::{AugmentedPass, ImageForward, Network};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Iou,
    Mask,
    Noise,
    Discovered,
}

/// What `ω` is normalized over within one (image, class).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaDenominator {
    /// The sampled proposals only, so weights of distinct sources sum to one.
    #[default]
    Sampled,
    /// Every proposal of the image.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub image: String,
    pub proposal: usize,
    /// Stage whose argmax produced the sample (0 is the MIL head).
    pub stage: usize,
    pub augmentation: Augmentation,
}

/// Where an embedding lives in the step's forward state, for routing gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    /// Row of the clean embedding matrix of batch image `image`.
    Clean { image: usize, row: usize },
    /// Row `row` of augmented pass `pass` of batch image `image`.
    Augmented {
        image: usize,
        pass: usize,
        row: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub embedding: Vec<f64>,
    pub label: usize,
    pub weight: f64,
    pub provenance: Provenance,
    #[serde(skip)]
    pub source: Option<EmbeddingSource>,
}

/// Per-category embedding collections `S_c`. Entries appended after
/// [`ContrastiveBank::seal`] are the discovered ones.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContrastiveBank {
    buckets: Vec<Vec<BankEntry>>,
    sealed: Option<Vec<usize>>,
}

impl ContrastiveBank {
    pub fn new(num_classes: usize) -> Self {
        Self {
            buckets: vec![Vec::new(); num_classes],
            sealed: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.buckets.len()
    }

    pub fn push(&mut self, entry: BankEntry) -> Result<()> {
        let c = entry.label;
        let n = (entry.embedding.iter().map(|v| v * v).sum::<f64>()).sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::domain(format!("bank entry norm {n} is not 1")));
        }
        if !(entry.weight >= 0.0 && entry.weight.is_finite()) {
            return Err(Error::domain(format!(
                "bank entry weight {} is invalid",
                entry.weight
            )));
        }
        let bucket = self
            .buckets
            .get_mut(c)
            .ok_or_else(|| Error::domain(format!("label {c} outside the bank")))?;
        bucket.push(entry);
        Ok(())
    }

    /// Freezes the sampled part; later pushes count as discoveries.
    pub fn seal(&mut self) {
        self.sealed = Some(self.buckets.iter().map(Vec::len).collect());
    }

    pub fn class(&self, c: usize) -> &[BankEntry] {
        &self.buckets[c]
    }

    /// `S^U`, class-major.
    pub fn iter(&self) -> impl Iterator<Item = &BankEntry> {
        self.buckets.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `S`, the entries present at sealing time.
    pub fn sampled(&self) -> impl Iterator<Item = &BankEntry> {
        self.buckets.iter().enumerate().flat_map(move |(c, b)| {
            let n = self.sealed.as_ref().map_or(b.len(), |s| s[c]);
            b[..n].iter()
        })
    }

    /// `S^U \ S`.
    pub fn discovered(&self) -> impl Iterator<Item = &BankEntry> {
        self.buckets.iter().enumerate().flat_map(move |(c, b)| {
            let n = self.sealed.as_ref().map_or(b.len(), |s| s[c]);
            b[n..].iter()
        })
    }

    /// One JSON object per line, embeddings rounded to 6 decimals.
    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for e in self.iter() {
            let rounded: Vec<f64> = e
                .embedding
                .iter()
                .map(|v| (v * 1e6).round() / 1e6)
                .collect();
            let line = serde_json::json!({
                "label": e.label,
                "weight": e.weight,
                "image": e.provenance.image,
                "proposal": e.provenance.proposal,
                "stage": e.provenance.stage,
                "augmentation": e.provenance.augmentation,
                "embedding": rounded,
            });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Index of the largest score of class `c`; ties resolve to the lowest index.
pub fn select_argmax(scores: ArrayView2<'_, f64>, c: usize, labels: &[bool]) -> Result<usize> {
    if !labels.get(c).copied().unwrap_or(false) {
        return Err(Error::Precondition(format!(
            "class {c} is not present in the image"
        )));
    }
    if scores.nrows() == 0 {
        return Err(Error::Precondition("no proposals to select from".into()));
    }
    let col = scores.column(c);
    let mut best = 0;
    for (m, &v) in col.iter().enumerate() {
        if v > col[best] {
            best = m;
        }
    }
    Ok(best)
}

/// Proposals whose IoU with `proposals[anchor]` exceeds `tau`, ascending.
pub fn iou_sample(proposals: &[BBox], anchor: usize, tau: f64) -> Vec<usize> {
    let a = proposals[anchor];
    (0..proposals.len())
        .filter(|&m| iou(&proposals[m], &a) > tau)
        .collect()
}

/// Union of [`iou_sample`] over several anchors, ascending and deduplicated.
pub fn iou_sample_union(proposals: &[BBox], anchors: &[usize], tau: f64) -> Vec<usize> {
    let mut keep = vec![false; proposals.len()];
    for &a in anchors {
        for m in iou_sample(proposals, a, tau) {
            keep[m] = true;
        }
    }
    (0..proposals.len()).filter(|&m| keep[m]).collect()
}

/// Binary keep map: cells with `U(0,1) < tau_drop` are zero, the rest one.
pub fn mask_map(rng: &mut Rng, cells: usize, tau_drop: f64) -> Vec<f64> {
    (0..cells)
        .map(|_| {
            if rng.random::<f64>() < tau_drop {
                0.0
            } else {
                1.0
            }
        })
        .collect()
}

/// Multiplier `1 + D_noise` with `D_noise ~ N(0, 1)`, so that `f ⊙ map = f + f ⊙ D_noise`.
pub fn noise_map(rng: &mut Rng, cells: usize) -> Vec<f64> {
    (0..cells)
        .map(|_| 1.0 + rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Embeddings of the rows' RoI maps under one augmentation, with a fresh
/// random map per row. `Iou` uses the unmodified maps.
pub fn augment_features(
    net: &Network,
    fwd: &ImageForward,
    rows: Vec<usize>,
    mode: Augmentation,
    tau_drop: f64,
    rng: &mut Rng,
) -> Result<AugmentedPass> {
    let cells = net.config.roi_cells();
    let mut maps = Array2::ones((rows.len(), cells));
    match mode {
        Augmentation::Iou => {}
        Augmentation::Mask => {
            if !(0.0..1.0).contains(&tau_drop) {
                return Err(Error::Precondition(format!(
                    "tau_drop {tau_drop} outside [0, 1)"
                )));
            }
            for mut r in maps.rows_mut() {
                r.assign(&ndarray::Array1::from(mask_map(rng, cells, tau_drop)));
            }
        }
        Augmentation::Noise => {
            for mut r in maps.rows_mut() {
                r.assign(&ndarray::Array1::from(noise_map(rng, cells)));
            }
        }
        Augmentation::Discovered => {
            return Err(Error::Precondition(
                "discovered is not a feature augmentation".into(),
            ));
        }
    }
    Ok(net.augmented_pass(fwd, rows, maps))
}

/// Sampled proposals of one present class in one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSample {
    pub class: usize,
    /// Argmax proposal per stage `0..K`.
    pub anchors: Vec<usize>,
    /// `∪_k M^{n,k}_c`, ascending.
    pub rows: Vec<usize>,
    /// Stage that first sampled each row (the lowest `k` whose set contains it).
    pub stages: Vec<usize>,
}

/// Anchors and IoU samples for every present class, over stages `0..stages`.
pub fn sample_image(
    fwd: &ImageForward,
    proposals: &[BBox],
    labels: &[bool],
    stages: usize,
    tau_iou: f64,
) -> Result<Vec<ClassSample>> {
    if !(tau_iou > 0.0 && tau_iou < 1.0) {
        return Err(Error::Precondition(format!(
            "tau_iou {tau_iou} outside (0, 1)"
        )));
    }
    let mut out = Vec::new();
    for c in (0..labels.len()).filter(|&c| labels[c]) {
        let anchors = (0..stages)
            .map(|k| select_argmax(fwd.stage_scores(k), c, labels))
            .collect::<Result<Vec<_>>>()?;
        let mut first = vec![usize::MAX; proposals.len()];
        for (k, &a) in anchors.iter().enumerate() {
            for m in iou_sample(proposals, a, tau_iou) {
                first[m] = first[m].min(k);
            }
        }
        let rows: Vec<usize> = (0..proposals.len())
            .filter(|&m| first[m] != usize::MAX)
            .collect();
        let stages = rows.iter().map(|&m| first[m]).collect();
        out.push(ClassSample {
            class: c,
            anchors,
            rows,
            stages,
        });
    }
    Ok(out)
}

/// One image's contribution to the bank.
#[derive(Debug, Clone, Copy)]
pub struct SampledImage<'a> {
    pub id: &'a str,
    /// Position in the batch, used for gradient routing.
    pub index: usize,
    /// MIL scores `X`, `M x C`.
    pub mil_scores: ArrayView2<'a, f64>,
    /// Clean embeddings, `M x E`.
    pub clean: ArrayView2<'a, f64>,
    pub classes: &'a [ClassSample],
    /// Masked and noisy embeddings; rows follow the classes' `rows` concatenated.
    pub masked: ArrayView2<'a, f64>,
    pub noisy: ArrayView2<'a, f64>,
}

/// Rows of every class concatenated, the layout [`SampledImage::masked`] expects.
pub fn concatenated_rows(classes: &[ClassSample]) -> Vec<usize> {
    classes
        .iter()
        .flat_map(|s| s.rows.iter().copied())
        .collect()
}

/// Difficulty weights of a class sample, one per sampled row.
pub fn omega(
    mil_scores: ArrayView2<'_, f64>,
    sample: &ClassSample,
    denominator: OmegaDenominator,
) -> Vec<f64> {
    let col = mil_scores.column(sample.class);
    let total: f64 = match denominator {
        OmegaDenominator::Sampled => sample.rows.iter().map(|&m| col[m]).sum(),
        OmegaDenominator::All => col.sum(),
    };
    sample
        .rows
        .iter()
        .map(|&m| if total > 0.0 { col[m] / total } else { 0.0 })
        .collect()
}

/// Builds `S_c` from the IoU, masked and noisy views of every sampled proposal, then seals it.
pub fn build_bank(
    images: &[SampledImage<'_>],
    num_classes: usize,
    denominator: OmegaDenominator,
) -> Result<ContrastiveBank> {
    let mut bank = ContrastiveBank::new(num_classes);
    for img in images {
        let mut offset = 0;
        for s in img.classes {
            if s.rows.is_empty() {
                return Err(Error::domain(format!(
                    "{}: empty sample for class {}",
                    img.id, s.class
                )));
            }
            let w = omega(img.mil_scores, s, denominator);
            for (i, &m) in s.rows.iter().enumerate() {
                let views = [
                    (
                        Augmentation::Iou,
                        img.clean.row(m),
                        EmbeddingSource::Clean {
                            image: img.index,
                            row: m,
                        },
                    ),
                    (
                        Augmentation::Mask,
                        img.masked.row(offset + i),
                        EmbeddingSource::Augmented {
                            image: img.index,
                            pass: 0,
                            row: offset + i,
                        },
                    ),
                    (
                        Augmentation::Noise,
                        img.noisy.row(offset + i),
                        EmbeddingSource::Augmented {
                            image: img.index,
                            pass: 1,
                            row: offset + i,
                        },
                    ),
                ];
                for (aug, z, src) in views {
                    bank.push(BankEntry {
                        embedding: z.to_vec(),
                        label: s.class,
                        weight: w[i],
                        provenance: Provenance {
                            image: img.id.to_string(),
                            proposal: m,
                            stage: s.stages[i],
                            augmentation: aug,
                        },
                        source: Some(src),
                    })?;
                }
            }
            offset += s.rows.len();
        }
    }
    bank.seal();
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn argmax_examples() {
        let s = Array2::from_shape_vec((3, 1), vec![0.1, 0.9, 0.3]).unwrap();
        assert_eq!(select_argmax(s.view(), 0, &[true]).unwrap(), 1);
        let t = Array2::from_shape_vec((2, 1), vec![0.5, 0.5]).unwrap();
        assert_eq!(select_argmax(t.view(), 0, &[true]).unwrap(), 0);
        assert!(matches!(
            select_argmax(t.view(), 0, &[false]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn iou_sampling_examples() {
        let b = |x: f64| BBox::new(x, 0.0, x + 10.0, 10.0).unwrap();
        let disjoint = vec![b(0.0), b(20.0), b(40.0)];
        assert_eq!(iou_sample(&disjoint, 1, 0.5), vec![1]);
        let close = vec![b(0.0), b(1.0), b(6.0)];
        assert_eq!(iou_sample(&close, 0, 0.5), vec![0, 1]);
        assert_eq!(iou_sample_union(&close, &[0, 2], 0.5), vec![0, 1, 2]);
    }

    #[test]
    fn mask_keep_fraction() {
        let mut rng = rng_for(4, &[]);
        let draws = 10_000;
        let kept: f64 = (0..draws)
            .map(|_| mask_map(&mut rng, 49, 0.3).iter().sum::<f64>())
            .sum();
        let frac = kept / (draws * 49) as f64;
        assert!((frac - 0.7).abs() < 0.02, "{frac}");
        assert!(mask_map(&mut rng, 49, 0.0).iter().all(|&v| v == 1.0));
    }

    fn sample(class: usize, rows: Vec<usize>) -> ClassSample {
        let n = rows.len();
        ClassSample {
            class,
            anchors: vec![rows[0]],
            rows,
            stages: vec![0; n],
        }
    }

    #[test]
    fn singleton_bank_has_unit_weights() {
        let x = Array2::from_shape_vec((2, 1), vec![0.2, 0.7]).unwrap();
        let z = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let aug = Array2::from_shape_vec((1, 2), vec![0.6, 0.8]).unwrap();
        let classes = [sample(0, vec![1])];
        let img = SampledImage {
            id: "a",
            index: 0,
            mil_scores: x.view(),
            clean: z.view(),
            classes: &classes,
            masked: aug.view(),
            noisy: aug.view(),
        };
        let bank = build_bank(&[img], 1, OmegaDenominator::Sampled).unwrap();
        assert_eq!(bank.class(0).len(), 3);
        assert!(bank.iter().all(|e| e.weight == 1.0));
        assert_eq!(bank.discovered().count(), 0);
        assert_eq!(bank.sampled().count(), 3);
    }

    #[test]
    fn cross_image_union_and_weight_normalisation() {
        let x = Array2::from_shape_vec((3, 2), vec![0.2, 0.1, 0.3, 0.0, 0.5, 0.4]).unwrap();
        let z = Array2::from_shape_fn(
            (3, 2),
            |(i, j)| if i == j { 1.0 } else { 0.0 } + if i == 2 { 0.6 } else { 0.0 },
        );
        let z = Array2::from_shape_fn((3, 2), |(i, j)| unit(&[z[[i, 0]], z[[i, 1]]])[j]);
        let classes = [sample(0, vec![0, 2]), sample(1, vec![2])];
        let rows = concatenated_rows(&classes);
        let aug = z.select(ndarray::Axis(0), &rows);
        let mk = |id, index| SampledImage {
            id,
            index,
            mil_scores: x.view(),
            clean: z.view(),
            classes: &classes,
            masked: aug.view(),
            noisy: aug.view(),
        };
        let bank = build_bank(&[mk("a", 0), mk("b", 1)], 2, OmegaDenominator::Sampled).unwrap();
        assert_eq!(bank.class(0).len(), 12);
        let ids: std::collections::HashSet<_> = bank
            .class(0)
            .iter()
            .map(|e| e.provenance.image.as_str())
            .collect();
        assert_eq!(ids.len(), 2);
        for img in ["a", "b"] {
            let mut per_source = std::collections::BTreeMap::new();
            for e in bank.class(0).iter().filter(|e| e.provenance.image == img) {
                per_source.insert(e.provenance.proposal, e.weight);
            }
            assert!((per_source.values().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let all = build_bank(&[mk("a", 0)], 2, OmegaDenominator::All).unwrap();
        let w0 = all.class(0)[0].weight;
        assert!((w0 - 0.2 / 1.0).abs() < 1e-12);
    }

    #[test]
    fn bank_rejects_non_unit_entries() {
        let mut bank = ContrastiveBank::new(1);
        let e = BankEntry {
            embedding: vec![0.5, 0.5],
            label: 0,
            weight: 1.0,
            provenance: Provenance {
                image: "x".into(),
                proposal: 0,
                stage: 0,
                augmentation: Augmentation::Iou,
            },
            source: None,
        };
        assert!(bank.push(e.clone()).is_err());
        let mut ok = e;
        ok.embedding = unit(&[0.5, 0.5]);
        bank.push(ok).unwrap();
        let mut buf = Vec::new();
        bank.write_jsonl(&mut buf).unwrap();
        let line: serde_json::Value =
            serde_json::from_slice(buf.split(|&b| b == b'\n').next().unwrap()).unwrap();
        assert_eq!(
            line["embedding"][0],
            (std::f64::consts::FRAC_1_SQRT_2 * 1e6).round() / 1e6
        );
        assert_eq!(line["augmentation"], "iou");
    }

    proptest! {
        #[test]
        fn argmax_matches_linear_scan(vals in prop::collection::vec(0.0f64..1.0, 1..60)) {
            let m = vals.len();
            let s = Array2::from_shape_vec((m, 1), vals.clone()).unwrap();
            let got = select_argmax(s.view(), 0, &[true]).unwrap();
            let mut best = 0;
            for i in 0..m {
                if vals[i] > vals[best] { best = i; }
            }
            prop_assert_eq!(got, best);
        }

        #[test]
        fn iou_sample_matches_filter(
            raw in prop::collection::vec((0.0f64..90.0, 0.0f64..90.0, 2.0f64..40.0, 2.0f64..40.0), 1..50),
            tau in 0.05f64..0.95,
        ) {
            let boxes: Vec<BBox> = raw.iter().map(|&(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap()).collect();
            let anchor = raw.len() / 2;
            let got = iou_sample(&boxes, anchor, tau);
            prop_assert!(got.contains(&anchor));
            let mut expect = Vec::new();
            for (m, b) in boxes.iter().enumerate() {
                let ix = (b.x2().min(boxes[anchor].x2()) - b.x1().max(boxes[anchor].x1())).max(0.0);
                let iy = (b.y2().min(boxes[anchor].y2()) - b.y1().max(boxes[anchor].y1())).max(0.0);
                let inter = ix * iy;
                let u = b.area() + boxes[anchor].area() - inter;
                if inter / u > tau { expect.push(m); }
            }
            prop_assert_eq!(got, expect);
        }
    }
}
