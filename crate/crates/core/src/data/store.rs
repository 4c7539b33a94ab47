//! On-disk dataset layout:
//!
//! ```text
//! <root>/<split>/manifest.json      DatasetManifest
//! <root>/<split>/annotations.json   [AnnotationRecord]
//! <root>/<split>/images/<id>.png
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{generate_scene, GtInstance, LabeledImage, ProposalConfig, Raster, SceneConfig};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::par::{self, Execution};
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Relative to the split directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub seed: u64,
    pub categories: Vec<String>,
    pub images: Vec<ImageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub category: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default)]
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
    pub proposals: Vec<BBox>,
    #[serde(default)]
    pub gt: Vec<GtRecord>,
}

impl AnnotationRecord {
    pub fn from_image(img: &LabeledImage) -> Self {
        Self {
            id: img.id.clone(),
            width: img.raster.width(),
            height: img.raster.height(),
            labels: img.image_labels.iter().map(|&b| u8::from(b)).collect(),
            proposals: img.proposals.clone(),
            gt: img
                .gt()
                .iter()
                .map(|g| GtRecord {
                    category: g.category,
                    bbox: g.bbox,
                    difficult: g.difficult,
                })
                .collect(),
        }
    }

    pub fn gt_instances(&self) -> Vec<GtInstance> {
        self.gt
            .iter()
            .map(|g| GtInstance {
                category: g.category,
                bbox: g.bbox,
                difficult: g.difficult,
            })
            .collect()
    }
}

/// Generates `count` scenes with per-image derived seeds; ids are `<split>_<index>`.
pub fn generate_dataset(
    split: &str,
    seed: u64,
    count: usize,
    scene: &SceneConfig,
    proposals: &ProposalConfig,
    exec: Execution,
) -> Result<Vec<LabeledImage>> {
    scene.validate()?;
    let tag = split
        .bytes()
        .fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(u64::from(b)));
    par::map_range(exec, count, |i| {
        let mut rng = rng_for(seed, &[tag, i as u64]);
        generate_scene(format!("{split}_{i:05}"), &mut rng, scene, proposals)
    })
    .into_iter()
    .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes a split under `root/<split>`.
pub fn save_split(
    root: &Path,
    split: &str,
    seed: u64,
    categories: &[String],
    images: &[LabeledImage],
) -> Result<PathBuf> {
    let dir = root.join(split);
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut records = Vec::with_capacity(images.len());
    for img in images {
        let rel = format!("images/{}.png", img.id);
        let path = dir.join(&rel);
        image::save_buffer(
            &path,
            img.raster.as_rgb8(),
            img.raster.width() as u32,
            img.raster.height() as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        records.push(ImageRecord {
            id: img.id.clone(),
            path: rel,
        });
    }
    let manifest = DatasetManifest {
        split: split.to_string(),
        seed,
        categories: categories.to_vec(),
        images: records,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    let ann: Vec<AnnotationRecord> = images.iter().map(AnnotationRecord::from_image).collect();
    write_json(&dir.join("annotations.json"), &ann)?;
    Ok(dir)
}

/// Loads a split directory written by [`save_split`].
pub fn load_split(dir: &Path) -> Result<(DatasetManifest, Vec<LabeledImage>)> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    let ann_path = dir.join("annotations.json");
    let annotations: Vec<AnnotationRecord> = read_json(&ann_path)?;
    let mut seen = HashSet::new();
    for r in &manifest.images {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Parse {
                path: dir.join("manifest.json"),
                message: format!("duplicate image id {}", r.id),
            });
        }
    }
    let mut images = Vec::with_capacity(manifest.images.len());
    for rec in &manifest.images {
        let ann = annotations
            .iter()
            .find(|a| a.id == rec.id)
            .ok_or_else(|| Error::Parse {
                path: ann_path.clone(),
                message: format!("no annotation for {}", rec.id),
            })?;
        let path = dir.join(&rec.path);
        if !path.exists() {
            return Err(Error::io(
                &path,
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "image listed in manifest is missing",
                ),
            ));
        }
        let rgb = image::open(&path)?.into_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        if (w, h) != (ann.width, ann.height) {
            return Err(Error::Parse {
                path,
                message: format!(
                    "raster is {w}x{h}, annotation says {}x{}",
                    ann.width, ann.height
                ),
            });
        }
        let raster = Raster::from_rgb8(w, h, rgb.into_raw()).expect("rgb8 buffer size");
        let image = LabeledImage {
            id: rec.id.clone(),
            raster,
            proposals: ann.proposals.clone(),
            image_labels: ann.labels.iter().map(|&l| l != 0).collect(),
            gt_instances: Some(ann.gt_instances()),
        };
        image.validate()?;
        images.push(image);
    }
    Ok((manifest, images))
}
