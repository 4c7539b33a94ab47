//! Network: a small convolutional backbone, RoI max pooling, the shared
//! extractor `eta` (two FC layers), and the MIL, refinement and similarity
//! heads.
//!
//! Score matrices are stored one row per proposal, so the MIL class softmax
//! runs along rows and the region softmax along columns.

pub mod checkpoint;
mod dropblock;
mod forward;
mod layers;
mod roi;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::TrainingImage;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng::Rng;

pub use dropblock::{dropblock, dropblock_mask, expected_drop_fraction, gamma};
pub use forward::{AugmentedPass, EtaCache, ForwardMode, HeadGrads, ImageForward, SimCache};
pub use layers::{softmax_cols, softmax_rows, Conv2d, Linear};
pub use roi::{roi_max_pool, roi_max_pool_backward, RoiPool};

/// Total backbone stride (three stride-2 layers and one stride-1 layer).
pub const FEATURE_STRIDE: usize = 8;
const CONV_STRIDES: [usize; 4] = [2, 2, 2, 1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Number of refinement stages `K`.
    pub stages: usize,
    pub backbone_channels: [usize; 4],
    /// RoI grid side `H = W`.
    pub roi_size: usize,
    /// Width `D'` of the extractor output.
    pub hidden: usize,
    pub embed_hidden: usize,
    pub embed_dim: usize,
    pub dropblock_size: usize,
    pub dropblock_prob: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            stages: 3,
            backbone_channels: [16, 32, 64, 64],
            roi_size: 7,
            hidden: 256,
            embed_hidden: 256,
            embed_dim: 128,
            dropblock_size: 3,
            dropblock_prob: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if self.stages == 0 {
            return Err(Error::config("at least one refinement stage is required"));
        }
        if self.backbone_channels.contains(&0)
            || [
                self.roi_size,
                self.hidden,
                self.embed_hidden,
                self.embed_dim,
            ]
            .contains(&0)
        {
            return Err(Error::config("layer widths must be positive"));
        }
        if self.dropblock_size == 0 || self.dropblock_size > self.roi_size {
            return Err(Error::config(format!(
                "dropblock_size {} must lie in [1, roi_size = {}]",
                self.dropblock_size, self.roi_size
            )));
        }
        if !(0.0..=1.0).contains(&self.dropblock_prob) {
            return Err(Error::config("dropblock_prob must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone_channels[3]
    }

    pub fn roi_cells(&self) -> usize {
        self.roi_size * self.roi_size
    }

    pub fn roi_features(&self) -> usize {
        self.feature_channels() * self.roi_cells()
    }
}

/// Every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub convs: Vec<Conv2d>,
    pub fc1: Linear,
    pub fc2: Linear,
    pub mil_cls: Linear,
    pub mil_det: Linear,
    pub refine: Vec<Linear>,
    pub bbox: Linear,
    pub sim1: Linear,
    pub sim2: Linear,
}

fn push_linear<'a>(out: &mut Vec<(String, &'a [f64])>, name: &str, l: &'a Linear) {
    out.push((
        format!("{name}.weight"),
        l.weight.as_slice().expect("standard layout"),
    ));
    out.push((
        format!("{name}.bias"),
        l.bias.as_slice().expect("standard layout"),
    ));
}

fn push_linear_mut<'a>(out: &mut Vec<(String, &'a mut [f64])>, name: &str, l: &'a mut Linear) {
    out.push((
        format!("{name}.weight"),
        l.weight.as_slice_mut().expect("standard layout"),
    ));
    out.push((
        format!("{name}.bias"),
        l.bias.as_slice_mut().expect("standard layout"),
    ));
}

impl Params {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let mut convs = Vec::with_capacity(4);
        let mut cin = 3;
        for (&cout, &stride) in cfg.backbone_channels.iter().zip(&CONV_STRIDES) {
            convs.push(Conv2d::he(cin, cout, 3, stride, rng));
            cin = cout;
        }
        let d = cfg.hidden;
        let c = cfg.num_classes;
        Self {
            convs,
            fc1: Linear::he(cfg.roi_features(), d, rng),
            fc2: Linear::he(d, d, rng),
            mil_cls: Linear::normal(d, c, 0.01, rng),
            mil_det: Linear::normal(d, c, 0.01, rng),
            refine: (0..cfg.stages)
                .map(|_| Linear::normal(d, c + 1, 0.01, rng))
                .collect(),
            bbox: Linear::normal(d, 4, 0.001, rng),
            sim1: Linear::he(d, cfg.embed_hidden, rng),
            sim2: Linear::he(cfg.embed_hidden, cfg.embed_dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear| Linear::zeros(l.inputs(), l.outputs());
        Self {
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
            fc1: z(&self.fc1),
            fc2: z(&self.fc2),
            mil_cls: z(&self.mil_cls),
            mil_det: z(&self.mil_det),
            refine: self.refine.iter().map(z).collect(),
            bbox: z(&self.bbox),
            sim1: z(&self.sim1),
            sim2: z(&self.sim2),
        }
    }

    /// Tensors keyed `module.layer.tensor`, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((
                format!("backbone.conv{}.weight", i + 1),
                c.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("backbone.conv{}.bias", i + 1),
                c.bias.as_slice().expect("standard layout"),
            ));
        }
        push_linear(&mut out, "extractor.fc1", &self.fc1);
        push_linear(&mut out, "extractor.fc2", &self.fc2);
        push_linear(&mut out, "mil.cls", &self.mil_cls);
        push_linear(&mut out, "mil.det", &self.mil_det);
        for (k, l) in self.refine.iter().enumerate() {
            push_linear(&mut out, &format!("refine.stage{}", k + 1), l);
        }
        push_linear(&mut out, "refine.bbox", &self.bbox);
        push_linear(&mut out, "similarity.fc1", &self.sim1);
        push_linear(&mut out, "similarity.fc2", &self.sim2);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            out.push((
                format!("backbone.conv{}.weight", i + 1),
                c.weight.as_slice_mut().expect("standard layout"),
            ));
            out.push((
                format!("backbone.conv{}.bias", i + 1),
                c.bias.as_slice_mut().expect("standard layout"),
            ));
        }
        push_linear_mut(&mut out, "extractor.fc1", &mut self.fc1);
        push_linear_mut(&mut out, "extractor.fc2", &mut self.fc2);
        push_linear_mut(&mut out, "mil.cls", &mut self.mil_cls);
        push_linear_mut(&mut out, "mil.det", &mut self.mil_det);
        for (k, l) in self.refine.iter_mut().enumerate() {
            push_linear_mut(&mut out, &format!("refine.stage{}", k + 1), l);
        }
        push_linear_mut(&mut out, "refine.bbox", &mut self.bbox);
        push_linear_mut(&mut out, "similarity.fc1", &mut self.sim1);
        push_linear_mut(&mut out, "similarity.fc2", &mut self.sim2);
        out
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Params) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Pooled RoI maps `f` (one flattened `D x H x W` map per row) and the
/// extractor outputs `v` (clean) and `ṽ` (regularized).
#[derive(Debug, Clone)]
pub struct RoiVectors {
    pub maps: Array2<f64>,
    pub clean: Array2<f64>,
    pub regularized: Array2<f64>,
}

/// MIL head outputs, `M x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct MilScores {
    /// Softmax over classes (each row sums to one).
    pub cls: Array2<f64>,
    /// Softmax over proposals (each column sums to one).
    pub det: Array2<f64>,
    /// `cls ⊙ det`.
    pub scores: Array2<f64>,
    /// Image-level score per class, the column sums of `scores` clamped to `[0, 1]`.
    pub image: Array1<f64>,
}

impl MilScores {
    pub fn from_logits(cls_logits: &Array2<f64>, det_logits: &Array2<f64>) -> Self {
        let cls = softmax_rows(cls_logits);
        let det = softmax_cols(det_logits);
        let scores = &cls * &det;
        let image = scores.sum_axis(Axis(0)).mapv(|v| v.clamp(0.0, 1.0));
        Self {
            cls,
            det,
            scores,
            image,
        }
    }
}

/// One refinement stage: `M x (C + 1)` class scores (background last) and `M x 4` deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    /// 1-based stage index.
    pub stage: usize,
    pub scores: Array2<f64>,
    pub deltas: Array2<f64>,
}

/// Unit-norm embeddings, one row per proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(pub Array2<f64>);

impl EmbeddingMatrix {
    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn row(&self, m: usize) -> ndarray::ArrayView1<'_, f64> {
        self.0.row(m)
    }
}

/// Embeddings with a smaller pre-normalization norm map to the first basis vector.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub params: Params,
}

impl Network {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, rng);
        Ok(Self { config, params })
    }

    /// Backbone, RoI pooling and `eta`. Block dropout is applied only when `training`.
    pub fn extract_roi_vectors(
        &self,
        image: TrainingImage<'_>,
        boxes: &[BBox],
        training: bool,
        rng: &mut Rng,
    ) -> Result<RoiVectors> {
        let (features, _) = forward::backbone_forward(&self.params, image.raster);
        let pool = roi_max_pool(
            &features,
            boxes,
            FEATURE_STRIDE as f64,
            self.config.roi_size,
        )?;
        let clean = forward::eta_forward(&self.params, pool.pooled.clone()).out;
        let regularized = if training {
            let masks = forward::sample_drop_masks(&self.config, boxes.len(), rng)?;
            let dropped = forward::apply_spatial(&pool.pooled, &masks, self.config.roi_cells());
            forward::eta_forward(&self.params, dropped).out
        } else {
            clean.clone()
        };
        Ok(RoiVectors {
            maps: pool.pooled,
            clean,
            regularized,
        })
    }

    pub fn mil_head(&self, v_tilde: ArrayView2<'_, f64>) -> Result<MilScores> {
        if v_tilde.nrows() == 0 {
            return Err(Error::domain("MIL head needs at least one proposal"));
        }
        Ok(MilScores::from_logits(
            &self.params.mil_cls.forward(v_tilde),
            &self.params.mil_det.forward(v_tilde),
        ))
    }

    /// Stage `k` in `1..=K`.
    pub fn refinement_head(&self, v_tilde: ArrayView2<'_, f64>, k: usize) -> Result<StageOutput> {
        if k == 0 || k > self.config.stages {
            return Err(Error::domain(format!(
                "stage {k} outside 1..={}",
                self.config.stages
            )));
        }
        Ok(StageOutput {
            stage: k,
            scores: softmax_rows(&self.params.refine[k - 1].forward(v_tilde)),
            deltas: self.params.bbox.forward(v_tilde),
        })
    }

    pub fn similarity_head(&self, v: ArrayView2<'_, f64>) -> EmbeddingMatrix {
        EmbeddingMatrix(forward::sim_forward(&self.params, v).z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, ProposalConfig, SceneConfig};
    use crate::rng::rng_for;
    use proptest::prelude::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            backbone_channels: [4, 6, 8, 8],
            roi_size: 4,
            hidden: 16,
            embed_hidden: 12,
            embed_dim: 8,
            dropblock_size: 2,
            ..ModelConfig::default()
        }
    }

    fn scene() -> crate::data::LabeledImage {
        let cfg = SceneConfig {
            width: 64,
            height: 64,
            min_size: 14.0,
            max_size: 20.0,
            ..SceneConfig::default()
        };
        generate_scene("t", &mut rng_for(1, &[]), &cfg, &ProposalConfig::default()).unwrap()
    }

    #[test]
    fn identical_boxes_give_identical_vectors_and_eval_is_clean() {
        let net = Network::new(tiny(), &mut rng_for(0, &[])).unwrap();
        let img = scene();
        let b = img.proposals[3];
        let out = net
            .extract_roi_vectors(img.training_view(), &[b, b], false, &mut rng_for(0, &[]))
            .unwrap();
        assert_eq!(out.clean.row(0), out.clean.row(1));
        assert_eq!(out.clean, out.regularized);
        let train = net
            .extract_roi_vectors(img.training_view(), &[b, b], true, &mut rng_for(0, &[]))
            .unwrap();
        assert_eq!(train.clean, out.clean);
    }

    #[test]
    fn boxes_outside_the_raster_are_rejected() {
        let net = Network::new(tiny(), &mut rng_for(0, &[])).unwrap();
        let img = scene();
        let b = BBox::new(10.0, 10.0, 70.0, 30.0).unwrap();
        assert!(matches!(
            net.extract_roi_vectors(img.training_view(), &[b], false, &mut rng_for(0, &[])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn mil_single_region_and_uniform_cases() {
        let s = MilScores::from_logits(
            &Array2::from_shape_vec((1, 3), vec![0.3, -1.0, 2.0]).unwrap(),
            &Array2::from_elem((1, 3), 0.7),
        );
        assert!(s.det.iter().all(|&v| v == 1.0));
        for c in 0..3 {
            assert_eq!(s.image[c], s.cls[[0, c]]);
        }
        let z = MilScores::from_logits(&Array2::zeros((5, 3)), &Array2::zeros((5, 3)));
        assert!(z.cls.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(z.det.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!(z.image.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn dead_similarity_head_still_gives_unit_embeddings() {
        let mut net = Network::new(tiny(), &mut rng_for(0, &[])).unwrap();
        net.params.sim2.weight.fill(0.0);
        net.params.sim2.bias.fill(0.0);
        let v = Array2::from_shape_fn((4, 16), |(i, j)| (i + j) as f64);
        let z = net.similarity_head(v.view()).0;
        for row in z.rows() {
            assert_eq!(row[0], 1.0);
            assert_eq!(row.dot(&row), 1.0);
        }
    }

    #[test]
    fn refinement_stage_bounds_and_isolation() {
        let mut net = Network::new(tiny(), &mut rng_for(0, &[])).unwrap();
        let v = Array2::from_shape_fn((6, 16), |(i, j)| ((i * 16 + j) as f64 * 0.3).sin());
        assert!(net.refinement_head(v.view(), 0).is_err());
        assert!(net.refinement_head(v.view(), 4).is_err());
        let before = net.refinement_head(v.view(), 2).unwrap();
        net.params.refine[0].weight.mapv_inplace(|w| w + 0.5);
        assert_eq!(net.refinement_head(v.view(), 2).unwrap(), before);
        net.params.refine[1].weight.fill(0.0);
        net.params.refine[1].bias.fill(0.0);
        let u = net.refinement_head(v.view(), 2).unwrap();
        assert!(u.scores.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn identical_inputs_embed_identically() {
        let net = Network::new(tiny(), &mut rng_for(0, &[])).unwrap();
        let v = Array2::from_shape_fn((2, 16), |(_, j)| j as f64 * 0.1);
        let z = net.similarity_head(v.view());
        assert!((z.row(0).dot(&z.row(1)) - 1.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn head_normalisation_invariants(seed in any::<u64>(), m in 1usize..12, scale in 0.01f64..20.0) {
            let mut rng = rng_for(seed, &[]);
            let net = Network::new(tiny(), &mut rng).unwrap();
            let mut net = net;
            for (_, t) in net.params.tensors_mut() {
                for (i, x) in t.iter_mut().enumerate() {
                    *x *= scale * (1.0 + (i % 3) as f64);
                }
            }
            let v = Array2::from_shape_fn((m, 16), |(i, j)| ((seed % 97) as f64 + (i * 16 + j) as f64).cos() * scale);
            let mil = net.mil_head(v.view()).unwrap();
            for row in mil.cls.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            }
            for col in mil.det.columns() {
                prop_assert!((col.sum() - 1.0).abs() < 1e-6);
            }
            for c in 0..3 {
                let direct: f64 = (0..m).map(|i| mil.cls[[i, c]] * mil.det[[i, c]]).sum();
                prop_assert!((direct - mil.image[c]).abs() < 1e-9);
                prop_assert!((0.0..=1.0).contains(&mil.image[c]));
            }
            for k in 1..=3 {
                let s = net.refinement_head(v.view(), k).unwrap();
                for row in s.scores.rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }
            let z = net.similarity_head(v.view());
            for row in z.0.rows() {
                let n = row.dot(&row).sqrt();
                prop_assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }
}
