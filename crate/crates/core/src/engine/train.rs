use ndarray::{ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::data::{LabeledImage, TrainingImage};
use crate::discovery::{
    run_object_discovery, DiscoveryImage, ImageDiscovery, InstanceLabels, PgtSource,
};
use crate::error::{Error, Result};
use crate::geometry::encode;
use crate::losses::{
    mil_loss, refinement_cls_loss, regression_loss, total_loss, wscl, LossReport, RegressionTarget,
};
use crate::model::{AugmentedPass, ForwardMode, HeadGrads, ImageForward, Network, Params};
use crate::par;
use crate::rng::rng_for;
use crate::sampling::{
    augment_features, build_bank, concatenated_rows, sample_image, Augmentation, ClassSample,
    ContrastiveBank, EmbeddingSource, OmegaDenominator, SampledImage,
};

use super::config::TrainConfig;

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_STEP: u64 = 3;

pub fn init_network(cfg: &TrainConfig) -> Result<Network> {
    Network::new(cfg.model.clone(), &mut rng_for(cfg.seed, &[STREAM_INIT]))
}

/// Dataset indices of step `iteration`: consecutive slices of a per-epoch shuffle.
pub fn batch_indices(seed: u64, iteration: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for j in 0..batch {
        let p = iteration * batch + j;
        if p / n != epoch {
            epoch = p / n;
            perm = (0..n).collect();
            perm.shuffle(&mut rng_for(seed, &[STREAM_SHUFFLE, epoch as u64]));
        }
        out.push(perm[p % n]);
    }
    out
}

/// Forward state of one step.
#[derive(Debug, Clone)]
pub struct BatchState {
    pub forwards: Vec<ImageForward>,
    pub samples: Vec<Vec<ClassSample>>,
    /// Masked then noisy pass per image; empty when no bank is built.
    pub augmented: Vec<Vec<AugmentedPass>>,
}

/// Bank and per-stage labels derived from a [`BatchState`].
#[derive(Debug, Clone)]
pub struct Supervision {
    pub bank: ContrastiveBank,
    pub discoveries: Vec<ImageDiscovery>,
}

/// Which loss terms contribute gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub mil: bool,
    pub cls: bool,
    pub reg: bool,
    pub wscl: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        mil: true,
        cls: true,
        reg: true,
        wscl: true,
    };

    /// The part of the total objective these terms make up.
    pub fn objective(&self, r: &LossReport) -> f64 {
        let mut v = 0.0;
        if self.mil {
            v += r.mil;
        }
        if self.cls {
            v += r.cls;
        }
        if self.reg {
            v += r.reg;
        }
        if self.wscl {
            v += r.lambda * r.wscl;
        }
        v
    }
}

/// Runs every image's forward pass, IoU sampling and feature augmentations.
/// Each image draws from its own stream `stream ++ [position]`. `frozen`
/// replaces the sampling outcome, which keeps the computation graph fixed
/// under parameter perturbations.
pub fn forward_batch(
    net: &Network,
    cfg: &TrainConfig,
    batch: &[TrainingImage<'_>],
    stream: &[u64],
    training: bool,
    frozen: Option<&[Vec<ClassSample>]>,
) -> Result<BatchState> {
    let with_bank = cfg.needs_bank();
    let mode = ForwardMode {
        training,
        embeddings: with_bank,
    };
    let stages = net.config.stages;
    let results = par::map(cfg.execution, batch, |i, img| -> Result<_> {
        let mut s = stream.to_vec();
        s.push(i as u64);
        let mut rng = rng_for(cfg.seed, &s);
        let fwd = net.forward(*img, mode, &mut rng)?;
        let samples = match frozen {
            Some(f) => f[i].clone(),
            None if with_bank => {
                sample_image(&fwd, img.proposals, img.labels, stages, cfg.tau_iou)?
            }
            None => Vec::new(),
        };
        let mut aug = Vec::new();
        if with_bank {
            let rows = concatenated_rows(&samples);
            aug.push(augment_features(
                net,
                &fwd,
                rows.clone(),
                Augmentation::Mask,
                cfg.tau_drop,
                &mut rng,
            )?);
            aug.push(augment_features(
                net,
                &fwd,
                rows,
                Augmentation::Noise,
                cfg.tau_drop,
                &mut rng,
            )?);
        }
        Ok((fwd, samples, aug))
    });
    let mut state = BatchState {
        forwards: Vec::with_capacity(batch.len()),
        samples: Vec::with_capacity(batch.len()),
        augmented: Vec::with_capacity(batch.len()),
    };
    for r in results {
        let (f, s, a) = r?;
        state.forwards.push(f);
        state.samples.push(s);
        state.augmented.push(a);
    }
    Ok(state)
}

fn omega_totals(
    fwd: &ImageForward,
    samples: &[ClassSample],
    num_classes: usize,
    denom: OmegaDenominator,
) -> Vec<f64> {
    (0..num_classes)
        .map(|c| {
            let col = fwd.mil.scores.column(c);
            match samples.iter().find(|s| s.class == c) {
                Some(s) => match denom {
                    OmegaDenominator::Sampled => s.rows.iter().map(|&m| col[m]).sum(),
                    OmegaDenominator::All => col.sum(),
                },
                None => 0.0,
            }
        })
        .collect()
}

/// Builds the bank and runs labeling plus discovery over the batch, in image order.
pub fn supervise(
    cfg: &TrainConfig,
    batch: &[TrainingImage<'_>],
    state: &BatchState,
) -> Result<Supervision> {
    let num_classes = cfg.model.num_classes;
    let mut bank = if cfg.needs_bank() {
        let sampled = batch
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let f = &state.forwards[i];
                let clean = f.embedding_matrix().ok_or_else(|| {
                    Error::Precondition("bank construction needs embeddings".into())
                })?;
                Ok(SampledImage {
                    id: img.id,
                    index: i,
                    mil_scores: f.mil.scores.view(),
                    clean: clean.view(),
                    classes: &state.samples[i],
                    masked: state.augmented[i][0].embeddings().view(),
                    noisy: state.augmented[i][1].embeddings().view(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        build_bank(&sampled, num_classes, cfg.omega_denominator)?
    } else {
        ContrastiveBank::new(num_classes)
    };
    let images: Vec<DiscoveryImage<'_>> = batch
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let f = &state.forwards[i];
            DiscoveryImage {
                id: img.id,
                index: i,
                proposals: img.proposals,
                labels: img.labels,
                stage_scores: (0..cfg.model.stages).map(|k| f.stage_scores(k)).collect(),
                mil_scores: f.mil.scores.view(),
                embeddings: f.embedding_matrix().map(|z| z.view()),
                omega_totals: omega_totals(
                    f,
                    &state.samples[i],
                    num_classes,
                    cfg.omega_denominator,
                ),
            }
        })
        .collect();
    let discoveries = run_object_discovery(&images, &mut bank, &cfg.discovery, cfg.model.stages)?;
    Ok(Supervision { bank, discoveries })
}

/// Regression terms per image and stage: every proposal matched to a pseudo
/// ground truth regresses toward it with the proposal's label weight.
pub fn regression_targets(
    batch: &[TrainingImage<'_>],
    discoveries: &[ImageDiscovery],
    regress_discovered: bool,
) -> Vec<Vec<Vec<RegressionTarget>>> {
    batch
        .iter()
        .zip(discoveries)
        .map(|(img, d)| {
            d.labels
                .iter()
                .zip(&d.pseudo_gts)
                .map(|(labels, pgts)| {
                    labels
                        .matched
                        .iter()
                        .enumerate()
                        .filter_map(|(m, j)| {
                            let g = &pgts[(*j)?];
                            if g.source == PgtSource::Discovered && !regress_discovered {
                                return None;
                            }
                            Some(RegressionTarget {
                                proposal: m,
                                target: encode(&img.proposals[m], &g.bbox).to_array(),
                                weight: labels.weights[m],
                            })
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn embedding_row(state: &BatchState, src: EmbeddingSource) -> Result<&[f64]> {
    let row = match src {
        EmbeddingSource::Clean { image, row } => state.forwards[image]
            .embedding_matrix()
            .ok_or_else(|| Error::Precondition("bank entry refers to missing embeddings".into()))?
            .row(row),
        EmbeddingSource::Augmented { image, pass, row } => {
            state.augmented[image][pass].embeddings().row(row)
        }
    };
    row.to_slice()
        .ok_or_else(|| Error::Precondition("embedding row is not contiguous".into()))
}

/// Every loss of the step and `dL/d(head outputs)` per image for the selected terms.
pub fn compute_losses(
    cfg: &TrainConfig,
    batch: &[TrainingImage<'_>],
    state: &BatchState,
    sup: &Supervision,
    terms: LossTerms,
) -> Result<(LossReport, Vec<HeadGrads>)> {
    let mut grads: Vec<HeadGrads> = state
        .forwards
        .iter()
        .zip(&state.augmented)
        .map(|(f, a)| HeadGrads::zeros(f, a))
        .collect();

    let phi: Vec<ArrayView1<'_, f64>> = state.forwards.iter().map(|f| f.mil.image.view()).collect();
    let labels: Vec<&[bool]> = batch.iter().map(|b| b.labels).collect();
    let (l_mil, d_phi) = mil_loss(&phi, &labels);
    if terms.mil {
        for (g, d) in grads.iter_mut().zip(&d_phi) {
            for mut row in g.mil_scores.rows_mut() {
                row += d;
            }
        }
    }

    let scores: Vec<Vec<ArrayView2<'_, f64>>> = state
        .forwards
        .iter()
        .map(|f| f.stages.iter().map(|s| s.view()).collect())
        .collect();
    let stage_labels: Vec<&[InstanceLabels]> = sup
        .discoveries
        .iter()
        .map(|d| d.labels.as_slice())
        .collect();
    let (l_cls, d_cls) = refinement_cls_loss(&scores, &stage_labels);
    if terms.cls {
        for (g, d) in grads.iter_mut().zip(d_cls) {
            for (gs, ds) in g.stages.iter_mut().zip(d) {
                *gs += &ds;
            }
        }
    }

    let targets = regression_targets(batch, &sup.discoveries, cfg.discovery.regress_discovered);
    let preds: Vec<ArrayView2<'_, f64>> = state.forwards.iter().map(|f| f.deltas.view()).collect();
    let (l_reg, d_reg) = regression_loss(&preds, &targets);
    if terms.reg {
        for (g, d) in grads.iter_mut().zip(d_reg) {
            g.deltas += &d;
        }
    }

    let mut l_wscl = 0.0;
    if cfg.wscl && !sup.bank.is_empty() {
        let entries: Vec<_> = sup.bank.iter().collect();
        let sources = entries
            .iter()
            .map(|e| {
                e.source
                    .ok_or_else(|| Error::Precondition("bank entry without a source".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let embs = sources
            .iter()
            .map(|&s| embedding_row(state, s))
            .collect::<Result<Vec<_>>>()?;
        let ls: Vec<usize> = entries.iter().map(|e| e.label).collect();
        let ws: Vec<f64> = entries.iter().map(|e| e.weight).collect();
        let (l, d) = wscl(&embs, &ls, &ws, cfg.temperature);
        l_wscl = l;
        if terms.wscl {
            for (src, dz) in sources.iter().zip(d) {
                let mut target = match *src {
                    EmbeddingSource::Clean { image, row } => grads[image]
                        .embeddings
                        .as_mut()
                        .expect("clean embeddings present")
                        .row_mut(row),
                    EmbeddingSource::Augmented { image, pass, row } => {
                        grads[image].augmented[pass].row_mut(row)
                    }
                };
                for (t, v) in target.iter_mut().zip(&dz) {
                    *t += cfg.lambda * v;
                }
            }
        }
    }
    Ok((total_loss(l_mil, l_cls, l_reg, l_wscl, cfg.lambda), grads))
}

/// Parameter gradient summed over the batch in image order.
pub fn parameter_grads(
    net: &Network,
    cfg: &TrainConfig,
    state: &BatchState,
    heads: &[HeadGrads],
) -> Params {
    let per_image = par::map_range(cfg.execution, heads.len(), |i| {
        let mut g = net.params.zeros_like();
        net.backward(&state.forwards[i], &state.augmented[i], &heads[i], &mut g);
        g
    });
    let mut total = net.params.zeros_like();
    for g in &per_image {
        total.accumulate(g);
    }
    total
}

/// `v = μ v + (g + wd θ)`, `θ -= lr v`.
pub fn sgd_update(
    params: &mut Params,
    velocity: &mut Params,
    grad: &Params,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
) {
    for ((_, p), ((_, v), (_, g))) in params
        .tensors_mut()
        .into_iter()
        .zip(velocity.tensors_mut().into_iter().zip(grad.tensors()))
    {
        for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = momentum * *v + g + weight_decay * *p;
            *p -= lr * *v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    /// Steps completed after this one.
    pub iteration: usize,
    pub losses: LossReport,
    pub bank_size: usize,
    pub discovered: usize,
}

impl StepReport {
    pub fn json_line(&self) -> String {
        let mut v: serde_json::Value =
            serde_json::from_str(&self.losses.json_line(self.iteration)).expect("valid json");
        v["bank"] = self.bank_size.into();
        v["discovered"] = self.discovered.into();
        v.to_string()
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Network,
    pub cfg: TrainConfig,
    velocity: Params,
    /// Steps completed so far.
    pub iteration: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = init_network(&cfg)?;
        Ok(Self::from_network(net, cfg, 0))
    }

    pub fn from_network(net: Network, cfg: TrainConfig, iteration: usize) -> Self {
        let velocity = net.params.zeros_like();
        Self {
            net,
            cfg,
            velocity,
            iteration,
        }
    }

    fn non_finite(&self, batch: &[TrainingImage<'_>], losses: &LossReport, what: &str) -> Error {
        let detail = serde_json::json!({
            "what": what,
            "batch": batch.iter().map(|b| b.id).collect::<Vec<_>>(),
            "losses": losses,
        });
        Error::NonFinite {
            iteration: self.iteration,
            detail: detail.to_string(),
        }
    }

    /// One SGD step on `batch`.
    pub fn step(&mut self, batch: &[TrainingImage<'_>]) -> Result<StepReport> {
        let stream = [STREAM_STEP, self.iteration as u64];
        let state = forward_batch(&self.net, &self.cfg, batch, &stream, true, None)?;
        let sup = supervise(&self.cfg, batch, &state)?;
        let (losses, heads) = compute_losses(&self.cfg, batch, &state, &sup, LossTerms::ALL)?;
        if !losses.is_finite() {
            return Err(self.non_finite(batch, &losses, "loss"));
        }
        let grad = parameter_grads(&self.net, &self.cfg, &state, &heads);
        if !grad.all_finite() {
            return Err(self.non_finite(batch, &losses, "gradient"));
        }
        sgd_update(
            &mut self.net.params,
            &mut self.velocity,
            &grad,
            self.cfg.lr,
            self.cfg.weight_decay,
            self.cfg.momentum,
        );
        self.iteration += 1;
        Ok(StepReport {
            iteration: self.iteration,
            losses,
            bank_size: sup.bank.len(),
            discovered: sup.bank.discovered().count(),
        })
    }

    /// Steps until `iterations` steps have completed, calling `on_step` after each.
    pub fn run(
        &mut self,
        images: &[LabeledImage],
        iterations: usize,
        mut on_step: impl FnMut(&Trainer, &StepReport) -> Result<()>,
    ) -> Result<()> {
        if images.is_empty() {
            return Err(Error::Precondition("no training images".into()));
        }
        let views: Vec<TrainingImage<'_>> =
            images.iter().map(LabeledImage::training_view).collect();
        while self.iteration < iterations {
            let idx = batch_indices(
                self.cfg.seed,
                self.iteration,
                views.len(),
                self.cfg.batch_size,
            );
            let batch: Vec<TrainingImage<'_>> = idx.iter().map(|&i| views[i]).collect();
            let report = self.step(&batch)?;
            on_step(self, &report)?;
        }
        Ok(())
    }
}

/// Pseudo ground truths of `images` under a trained network, using clean
/// (dropout-free) scores. The batch stream is tagged with `tag`.
pub fn discover(
    net: &Network,
    cfg: &TrainConfig,
    images: &[TrainingImage<'_>],
    tag: u64,
) -> Result<Supervision> {
    let state = forward_batch(net, cfg, images, &[STREAM_STEP, u64::MAX, tag], false, None)?;
    supervise(cfg, images, &state)
}
