//! Images, proposals and annotations.
//!
//! Training code only ever sees a [`TrainingImage`], a borrowed view that
//! carries the raster, proposals and image-level labels but not the instance
//! boxes.

mod proposals;
mod scene;
mod store;
mod voc;

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

pub use proposals::{generate_proposals, ProposalConfig};
pub use scene::{
    expected_multi_instance_fraction, generate_scene, render_layout, sample_layout, Layout,
    PlacedShape, SceneConfig, ShapeKind,
};
pub use store::{
    generate_dataset, load_split, save_split, AnnotationRecord, DatasetManifest, GtRecord,
    ImageRecord,
};
pub use voc::{load_voc_annotations, VocLoadReport, VocObject, VocRecord};

/// 8-bit RGB raster; channel values read back as `u8 / 255` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_rgb8(width: usize, height: usize, data: Vec<u8>) -> Option<Self> {
        (data.len() == width * height * 3).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_rgb8(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        f64::from(self.data[(y * self.width + x) * 3 + c]) / 255.0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let base = (y * self.width + x) * 3;
        for (c, v) in rgb.iter().enumerate() {
            self.data[base + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }

    #[inline]
    pub fn get_rgb(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(y, x, 0), self.get(y, x, 1), self.get(y, x, 2)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub category: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default)]
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub raster: Raster,
    pub proposals: Vec<BBox>,
    pub image_labels: Vec<bool>,
    /// Evaluation-only instance boxes.
    pub gt_instances: Option<Vec<GtInstance>>,
}

/// What the training path is allowed to read.
#[derive(Debug, Clone, Copy)]
pub struct TrainingImage<'a> {
    pub id: &'a str,
    pub raster: &'a Raster,
    pub proposals: &'a [BBox],
    pub labels: &'a [bool],
}

impl LabeledImage {
    pub fn training_view(&self) -> TrainingImage<'_> {
        TrainingImage {
            id: &self.id,
            raster: &self.raster,
            proposals: &self.proposals,
            labels: &self.image_labels,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.image_labels.len()
    }

    pub fn gt(&self) -> &[GtInstance] {
        self.gt_instances.as_deref().unwrap_or(&[])
    }

    /// Checks the labels/gt consistency and proposal bounds.
    pub fn validate(&self) -> crate::Result<()> {
        if self.proposals.is_empty() {
            return Err(crate::Error::domain(format!("{}: no proposals", self.id)));
        }
        let (w, h) = (self.raster.width() as f64, self.raster.height() as f64);
        if let Some(p) = self.proposals.iter().find(|p| !p.within(w, h)) {
            return Err(crate::Error::domain(format!(
                "{}: proposal {:?} outside {w}x{h}",
                self.id,
                p.to_array()
            )));
        }
        if let Some(gt) = &self.gt_instances {
            for (c, &present) in self.image_labels.iter().enumerate() {
                if present != gt.iter().any(|g| g.category == c) {
                    return Err(crate::Error::domain(format!(
                        "{}: label {c} disagrees with instances",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Category names used by the synthetic generator.
pub fn category_names(num_categories: usize) -> Vec<String> {
    ShapeKind::ALL
        .iter()
        .take(num_categories)
        .map(|k| k.name().to_string())
        .collect()
}
