use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledImage, TrainingImage};
use crate::error::{Error, Result};
use crate::geometry::{decode, nms, BBox, BoxDeltas};
use crate::model::{ForwardMode, Network};
use crate::par::{self, Execution};
use crate::rng::rng_for;

use super::config::InferConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub category: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// One entry of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub id: String,
    pub category: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// Refined box of proposal `m`, falling back to the proposal when decoding
/// or clipping degenerates.
fn refined_box(proposal: &BBox, deltas: [f64; 4], width: f64, height: f64) -> BBox {
    decode(proposal, &BoxDeltas::from_array(deltas))
        .and_then(|b| b.clip(width, height, 1.0))
        .unwrap_or(*proposal)
}

/// Mean of the refinement stages' foreground scores, `M x C`.
pub fn averaged_scores(stages: &[Array2<f64>]) -> Array2<f64> {
    let (m, c1) = stages[0].dim();
    let mut avg = Array2::zeros((m, c1 - 1));
    for s in stages {
        avg += &s.slice(ndarray::s![.., ..c1 - 1]);
    }
    avg / stages.len() as f64
}

/// Detections of one image: averaged stage scores, refined boxes, per-class
/// NMS and a score floor, best first.
pub fn detect(
    net: &Network,
    image: TrainingImage<'_>,
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    let fwd = net.forward(image, ForwardMode::EVAL, &mut rng_for(0, &[]))?;
    let scores = averaged_scores(&fwd.stages);
    let (w, h) = (image.raster.width() as f64, image.raster.height() as f64);
    let boxes: Vec<BBox> = image
        .proposals
        .iter()
        .enumerate()
        .map(|(m, p)| {
            let d = fwd.deltas.row(m);
            refined_box(p, [d[0], d[1], d[2], d[3]], w, h)
        })
        .collect();
    let mut out = Vec::new();
    for c in 0..scores.ncols() {
        let keep: Vec<usize> = (0..boxes.len())
            .filter(|&m| scores[[m, c]] >= cfg.score_threshold)
            .collect();
        let cand: Vec<BBox> = keep.iter().map(|&m| boxes[m]).collect();
        let cs: Vec<f64> = keep.iter().map(|&m| scores[[m, c]]).collect();
        for i in nms(&cand, &cs, cfg.nms)? {
            out.push(Detection {
                category: c,
                bbox: cand[i],
                score: cs[i],
            });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(cfg.max_per_image);
    Ok(out)
}

pub fn detect_all(
    net: &Network,
    images: &[LabeledImage],
    cfg: &InferConfig,
    exec: Execution,
) -> Result<Vec<Vec<Detection>>> {
    par::map(exec, images, |_, img| detect(net, img.training_view(), cfg))
        .into_iter()
        .collect()
}

/// Flattens per-image detections into records, image order then score order.
pub fn detection_records(ids: &[&str], dets: &[Vec<Detection>]) -> Vec<DetectionRecord> {
    ids.iter()
        .zip(dets)
        .flat_map(|(id, ds)| {
            ds.iter().map(move |d| DetectionRecord {
                id: id.to_string(),
                category: d.category,
                bbox: d.bbox,
                score: d.score,
            })
        })
        .collect()
}

/// Writes the detections as one JSON array.
pub fn write_detections(path: &Path, ids: &[&str], dets: &[Vec<Detection>]) -> Result<()> {
    let text = serde_json::to_string_pretty(&detection_records(ids, dets))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a detections file and groups it by `ids`; unknown ids are an error.
pub fn read_detections(path: &Path, ids: &[&str]) -> Result<Vec<Vec<Detection>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let records: Vec<DetectionRecord> =
        serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut out = vec![Vec::new(); ids.len()];
    for rec in records {
        let i = *index
            .get(rec.id.as_str())
            .ok_or_else(|| parse_err(format!("unknown image id {}", rec.id)))?;
        out[i].push(Detection {
            category: rec.category,
            bbox: rec.bbox,
            score: rec.score,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, ProposalConfig, SceneConfig};
    use crate::model::ModelConfig;

    #[test]
    fn averaging_drops_background() {
        let a = ndarray::arr2(&[[0.2, 0.3, 0.5]]);
        let b = ndarray::arr2(&[[0.4, 0.1, 0.5]]);
        let avg = averaged_scores(&[a, b]);
        assert_eq!(avg.dim(), (1, 2));
        assert!((avg[[0, 0]] - 0.3).abs() < 1e-15 && (avg[[0, 1]] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn degenerate_refinement_falls_back() {
        let p = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(refined_box(&p, [0.0; 4], 50.0, 50.0), p);
        assert_eq!(refined_box(&p, [100.0, 0.0, 0.0, 0.0], 50.0, 50.0), p);
        let shifted = refined_box(&p, [0.1, 0.0, 0.0, 0.0], 50.0, 50.0);
        assert!((shifted.x1() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn detections_are_sorted_and_round_trip() {
        let cfg = ModelConfig {
            backbone_channels: [4, 4, 4, 4],
            roi_size: 3,
            hidden: 8,
            embed_hidden: 8,
            embed_dim: 4,
            dropblock_size: 2,
            ..ModelConfig::default()
        };
        let net = Network::new(cfg, &mut rng_for(1, &[])).unwrap();
        let scene = SceneConfig {
            width: 64,
            height: 64,
            min_size: 12.0,
            max_size: 20.0,
            ..SceneConfig::default()
        };
        let img = generate_scene(
            "a",
            &mut rng_for(2, &[]),
            &scene,
            &ProposalConfig::default(),
        )
        .unwrap();
        let infer = InferConfig::default();
        let dets = detect(&net, img.training_view(), &infer).unwrap();
        assert!(!dets.is_empty());
        assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(dets
            .iter()
            .all(|d| (infer.score_threshold..=1.0).contains(&d.score)));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        write_detections(&path, &["a"], std::slice::from_ref(&dets)).unwrap();
        assert_eq!(read_detections(&path, &["a"]).unwrap(), vec![dets]);
        assert!(read_detections(&path, &["b"]).is_err());
    }
}
