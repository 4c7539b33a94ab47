//! Finite-difference verification of the analytic backward pass for each
//! loss term on a two-image fixture.
//!
//! Sampling outcomes, pseudo labels and bank membership are computed once
//! and frozen, so every perturbed evaluation differentiates the same graph.
//! Coordinates whose perturbation flips a rectifier or a max-pool winner are
//! skipped, since the loss is not differentiable there.

use rand::Rng as _;
use serde::Serialize;

use crate::data::{generate_dataset, LabeledImage, ProposalConfig, SceneConfig, TrainingImage};
use crate::error::Result;
use crate::model::{ModelConfig, Network};
use crate::par::Execution;
use crate::rng::rng_for;

use super::config::TrainConfig;
use super::train::{
    compute_losses, forward_batch, init_network, parameter_grads, supervise, BatchState, LossTerms,
};

const STREAM: [u64; 2] = [7, 0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub step: f64,
    /// Coordinates sampled per tensor (all of them when the tensor is smaller).
    pub per_tensor: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            step: 1e-5,
            per_tensor: 6,
            floor: 1e-6,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub loss: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    /// Largest analytic gradient magnitude among the checked coordinates.
    pub max_abs_grad: f64,
    /// Tensor and index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub passed: bool,
}

/// Two 64x64 images with eight proposals each, three classes and a small network.
pub fn fixture(seed: u64) -> Result<(TrainConfig, Vec<LabeledImage>)> {
    let cfg = TrainConfig {
        seed,
        model: ModelConfig {
            num_classes: 3,
            stages: 3,
            backbone_channels: [3, 4, 5, 5],
            roi_size: 3,
            hidden: 8,
            embed_hidden: 6,
            embed_dim: 5,
            dropblock_size: 2,
            dropblock_prob: 0.3,
        },
        execution: Execution::Sequential,
        ..TrainConfig::default()
    };
    let scene = SceneConfig {
        width: 64,
        height: 64,
        min_size: 12.0,
        max_size: 20.0,
        ..SceneConfig::default()
    };
    let proposals = ProposalConfig {
        random_count: 4,
        jitter_per_object: 3,
        ..ProposalConfig::default()
    };
    let mut images = generate_dataset(
        "gradcheck",
        seed,
        2,
        &scene,
        &proposals,
        Execution::Sequential,
    )?;
    for img in &mut images {
        let n = img.proposals.len();
        let keep: Vec<_> = (0..8).map(|i| img.proposals[i * n / 8]).collect();
        img.proposals = keep;
    }
    Ok((cfg, images))
}

fn signatures(state: &BatchState) -> Vec<u64> {
    state
        .forwards
        .iter()
        .map(|f| f.branch_signature())
        .chain(
            state
                .augmented
                .iter()
                .flatten()
                .map(|a| a.branch_signature()),
        )
        .collect()
}

const TERMS: [(&str, LossTerms); 4] = [
    (
        "mil",
        LossTerms {
            mil: true,
            cls: false,
            reg: false,
            wscl: false,
        },
    ),
    (
        "cls",
        LossTerms {
            mil: false,
            cls: true,
            reg: false,
            wscl: false,
        },
    ),
    (
        "reg",
        LossTerms {
            mil: false,
            cls: false,
            reg: true,
            wscl: false,
        },
    ),
    (
        "wscl",
        LossTerms {
            mil: false,
            cls: false,
            reg: false,
            wscl: true,
        },
    ),
];

pub fn run_gradcheck(gc: &GradcheckConfig) -> Result<Vec<GradcheckRow>> {
    let (cfg, images) = fixture(gc.seed)?;
    let net = init_network(&cfg)?;
    let views: Vec<TrainingImage<'_>> = images.iter().map(LabeledImage::training_view).collect();
    let base = forward_batch(&net, &cfg, &views, &STREAM, true, None)?;
    let sup = supervise(&cfg, &views, &base)?;
    let frozen = base.samples.clone();
    let base_sig = signatures(&base);

    let analytic = TERMS
        .iter()
        .map(|(_, t)| {
            let (_, heads) = compute_losses(&cfg, &views, &base, &sup, *t)?;
            Ok(parameter_grads(&net, &cfg, &base, &heads))
        })
        .collect::<Result<Vec<_>>>()?;

    let evaluate = |probe: &Network| -> Result<Option<Vec<f64>>> {
        let state = forward_batch(probe, &cfg, &views, &STREAM, true, Some(&frozen))?;
        if signatures(&state) != base_sig {
            return Ok(None);
        }
        let (report, _) = compute_losses(&cfg, &views, &state, &sup, LossTerms::ALL)?;
        Ok(Some(
            TERMS.iter().map(|(_, t)| t.objective(&report)).collect(),
        ))
    };

    let mut rows: Vec<GradcheckRow> = TERMS
        .iter()
        .map(|(name, _)| GradcheckRow {
            loss: name.to_string(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            max_abs_grad: 0.0,
            worst: None,
            passed: true,
        })
        .collect();
    let mut rng = rng_for(gc.seed, &[STREAM[0], 1]);
    let names: Vec<(String, usize)> = net
        .params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    for (ti, (name, len)) in names.iter().enumerate() {
        let coords: Vec<usize> = if *len <= gc.per_tensor {
            (0..*len).collect()
        } else {
            (0..gc.per_tensor)
                .map(|_| rng.random_range(0..*len))
                .collect()
        };
        for idx in coords {
            let mut plus = net.clone();
            plus.params.tensors_mut()[ti].1[idx] += gc.step;
            let mut minus = net.clone();
            minus.params.tensors_mut()[ti].1[idx] -= gc.step;
            let (Some(lp), Some(lm)) = (evaluate(&plus)?, evaluate(&minus)?) else {
                for r in &mut rows {
                    r.skipped += 1;
                }
                continue;
            };
            for (t, row) in rows.iter_mut().enumerate() {
                let numeric = (lp[t] - lm[t]) / (2.0 * gc.step);
                let a = analytic[t].tensors()[ti].1[idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(gc.floor);
                row.checked += 1;
                row.max_abs_grad = row.max_abs_grad.max(a.abs());
                if rel > row.max_rel_err {
                    row.max_rel_err = rel;
                    row.worst = Some((name.clone(), idx));
                }
            }
        }
    }
    for r in &mut rows {
        r.passed = r.checked > 0 && r.max_rel_err < gc.tolerance;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_shape() {
        let (cfg, images) = fixture(0).unwrap();
        assert_eq!(images.len(), 2);
        assert!(images.iter().all(|i| i.proposals.len() == 8));
        assert_eq!(cfg.model.num_classes, 3);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let rows = run_gradcheck(&GradcheckConfig::default()).unwrap();
        for r in &rows {
            eprintln!("{r:?}");
            assert!(r.passed, "{r:?}");
        }
    }
}
