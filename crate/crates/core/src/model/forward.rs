//! Cached training forward pass and its reverse-mode counterpart.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};

use super::layers::{
    relu_backward_inplace, relu_inplace, softmax_cols_backward, softmax_rows,
    softmax_rows_backward, ConvCache,
};
use super::{
    dropblock_mask, roi_max_pool, roi_max_pool_backward, MilScores, ModelConfig, Network, Params,
    RoiPool, FEATURE_STRIDE, NORM_EPS,
};
use crate::data::{Raster, TrainingImage};
use crate::error::Result;
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct BackboneCache {
    convs: Vec<ConvCache>,
    /// Post-rectifier outputs of each layer.
    acts: Vec<Array3<f64>>,
}

fn raster_tensor(r: &Raster) -> Array3<f64> {
    Array3::from_shape_fn((3, r.height(), r.width()), |(c, y, x)| {
        (r.get(y, x, c) - 0.5) / 0.25
    })
}

pub(crate) fn backbone_forward(p: &Params, raster: &Raster) -> (Array3<f64>, BackboneCache) {
    let mut x = raster_tensor(raster);
    let mut convs = Vec::with_capacity(p.convs.len());
    let mut acts = Vec::with_capacity(p.convs.len());
    for conv in &p.convs {
        let (mut y, cache) = conv.forward(&x);
        relu_inplace(&mut y);
        let (ho, wo) = cache.out_hw;
        x = y
            .into_shape_with_order((conv.out_channels(), ho, wo))
            .expect("contiguous conv output");
        acts.push(x.clone());
        convs.push(cache);
    }
    (x, BackboneCache { convs, acts })
}

fn backbone_backward(p: &Params, cache: &BackboneCache, dfeat: Array3<f64>, grad: &mut Params) {
    let mut d = dfeat;
    for i in (0..p.convs.len()).rev() {
        ndarray::Zip::from(&mut d)
            .and(&cache.acts[i])
            .for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
        let (o, ho, wo) = d.dim();
        let d2 = d
            .into_shape_with_order((o, ho * wo))
            .expect("contiguous gradient");
        match p.convs[i].backward(&cache.convs[i], &d2, &mut grad.convs[i], i > 0) {
            Some(dx) => d = dx,
            None => break,
        }
    }
}

/// Inputs and activations of `eta` for one batch of rows.
#[derive(Debug, Clone)]
pub struct EtaCache {
    pub input: Array2<f64>,
    pub h1: Array2<f64>,
    pub out: Array2<f64>,
}

impl EtaCache {
    fn select(&self, rows: &[usize]) -> Self {
        Self {
            input: self.input.select(Axis(0), rows),
            h1: self.h1.select(Axis(0), rows),
            out: self.out.select(Axis(0), rows),
        }
    }
}

pub(crate) fn eta_forward(p: &Params, input: Array2<f64>) -> EtaCache {
    let mut h1 = p.fc1.forward(input.view());
    relu_inplace(&mut h1);
    let mut out = p.fc2.forward(h1.view());
    relu_inplace(&mut out);
    EtaCache { input, h1, out }
}

fn eta_backward(p: &Params, c: &EtaCache, mut dout: Array2<f64>, grad: &mut Params) -> Array2<f64> {
    relu_backward_inplace(&mut dout, &c.out);
    let mut dh = p
        .fc2
        .backward(c.h1.view(), dout.view(), &mut grad.fc2, true)
        .expect("dx requested");
    relu_backward_inplace(&mut dh, &c.h1);
    p.fc1
        .backward(c.input.view(), dh.view(), &mut grad.fc1, true)
        .expect("dx requested")
}

/// Similarity-head activations: hidden layer, pre-normalization output, its norms, and `z`.
#[derive(Debug, Clone)]
pub struct SimCache {
    pub h: Array2<f64>,
    pub u: Array2<f64>,
    pub norms: Array1<f64>,
    pub z: Array2<f64>,
}

impl SimCache {
    fn select(&self, rows: &[usize]) -> Self {
        Self {
            h: self.h.select(Axis(0), rows),
            u: self.u.select(Axis(0), rows),
            norms: self.norms.select(Axis(0), rows),
            z: self.z.select(Axis(0), rows),
        }
    }
}

pub(crate) fn sim_forward(p: &Params, v: ArrayView2<'_, f64>) -> SimCache {
    let mut h = p.sim1.forward(v);
    relu_inplace(&mut h);
    let u = p.sim2.forward(h.view());
    let norms = u.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut z = u.clone();
    for (mut row, &n) in z.rows_mut().into_iter().zip(norms.iter()) {
        if n > NORM_EPS {
            row /= n;
        } else {
            // degenerate output: a fixed unit direction with zero gradient
            row.fill(0.0);
            row[0] = 1.0;
        }
    }
    SimCache { h, u, norms, z }
}

fn sim_backward(
    p: &Params,
    v: ArrayView2<'_, f64>,
    c: &SimCache,
    dz: &Array2<f64>,
    grad: &mut Params,
) -> Array2<f64> {
    let mut du = Array2::zeros(c.u.raw_dim());
    for (((mut dur, ur), dzr), &n) in du
        .rows_mut()
        .into_iter()
        .zip(c.u.rows())
        .zip(dz.rows())
        .zip(c.norms.iter())
    {
        if n <= NORM_EPS {
            continue;
        }
        let proj = ur.dot(&dzr) / (n * n * n);
        ndarray::Zip::from(&mut dur)
            .and(&ur)
            .and(&dzr)
            .for_each(|o, &u, &g| *o = g / n - u * proj);
    }
    let mut dh = p
        .sim2
        .backward(c.h.view(), du.view(), &mut grad.sim2, true)
        .expect("dx requested");
    relu_backward_inplace(&mut dh, &c.h);
    p.sim1
        .backward(v, dh.view(), &mut grad.sim1, true)
        .expect("dx requested")
}

/// One block-dropout multiplier map per row, `rows x cells`.
pub(crate) fn sample_drop_masks(
    cfg: &ModelConfig,
    rows: usize,
    rng: &mut Rng,
) -> Result<Array2<f64>> {
    let cells = cfg.roi_cells();
    let mut out = Array2::zeros((rows, cells));
    for mut row in out.rows_mut() {
        let m = dropblock_mask(rng, cfg.roi_size, cfg.dropblock_size, cfg.dropblock_prob)?;
        row.assign(&Array1::from(m));
    }
    Ok(out)
}

/// Multiplies each flattened `channels x cells` row by a per-row spatial map.
pub(crate) fn apply_spatial(x: &Array2<f64>, maps: &Array2<f64>, cells: usize) -> Array2<f64> {
    let mut out = x.clone();
    for (mut row, map) in out.rows_mut().into_iter().zip(maps.rows()) {
        let map = map.as_slice().expect("standard layout");
        for chunk in row
            .as_slice_mut()
            .expect("standard layout")
            .chunks_mut(cells)
        {
            for (v, m) in chunk.iter_mut().zip(map) {
                *v *= m;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    /// Applies block dropout on the MIL/refinement path.
    pub training: bool,
    /// Runs the clean extractor path and the similarity head.
    pub embeddings: bool,
}

impl ForwardMode {
    pub const EVAL: ForwardMode = ForwardMode {
        training: false,
        embeddings: false,
    };
}

/// Everything one image's forward pass produced, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ImageForward {
    backbone: BackboneCache,
    pub pool: RoiPool,
    pub drop_masks: Option<Array2<f64>>,
    /// Clean extractor pass; absent in eval mode, where `regularized` is already clean.
    pub clean: Option<EtaCache>,
    pub regularized: EtaCache,
    pub mil: MilScores,
    /// Per-stage `M x (C + 1)` scores.
    pub stages: Vec<Array2<f64>>,
    pub deltas: Array2<f64>,
    pub embeddings: Option<SimCache>,
}

impl ImageForward {
    pub fn num_proposals(&self) -> usize {
        self.mil.scores.nrows()
    }

    /// Scores of stage `k` restricted to the foreground classes; stage 0 is the MIL head.
    pub fn stage_scores(&self, k: usize) -> ArrayView2<'_, f64> {
        if k == 0 {
            self.mil.scores.view()
        } else {
            let s = &self.stages[k - 1];
            s.slice(ndarray::s![.., ..s.ncols() - 1])
        }
    }

    /// `v`, the clean extractor output.
    pub fn clean_vectors(&self) -> &Array2<f64> {
        &self.clean.as_ref().unwrap_or(&self.regularized).out
    }

    fn clean_cache(&self) -> &EtaCache {
        self.clean.as_ref().unwrap_or(&self.regularized)
    }

    pub fn embedding_matrix(&self) -> Option<&Array2<f64>> {
        self.embeddings.as_ref().map(|s| &s.z)
    }

    /// A cheap signature of every piecewise-linear branch taken (max-pool
    /// winners and rectifier patterns); equal signatures mean the pass is
    /// locally smooth between two parameter settings.
    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for &a in &self.pool.argmax {
            feed(u64::from(a));
        }
        let mut bits = |arr: &mut dyn Iterator<Item = &f64>| {
            for (i, &v) in arr.enumerate() {
                if v > 0.0 {
                    feed(i as u64);
                }
            }
        };
        for a in &self.backbone.acts {
            bits(&mut a.iter());
        }
        for c in std::iter::once(&self.regularized).chain(self.clean.as_ref()) {
            bits(&mut c.h1.iter());
            bits(&mut c.out.iter());
        }
        if let Some(s) = &self.embeddings {
            bits(&mut s.h.iter());
        }
        h
    }
}

/// Embeddings of spatially modulated copies of selected RoI maps.
#[derive(Debug, Clone)]
pub struct AugmentedPass {
    pub rows: Vec<usize>,
    /// `rows.len() x cells` spatial multipliers.
    pub maps: Array2<f64>,
    pub eta: EtaCache,
    pub sim: SimCache,
}

impl AugmentedPass {
    pub fn embeddings(&self) -> &Array2<f64> {
        &self.sim.z
    }

    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0x8422_2325_cbf2_9ce4;
        for arr in [&self.eta.h1, &self.eta.out, &self.sim.h] {
            for (i, &v) in arr.iter().enumerate() {
                if v > 0.0 {
                    h ^= i as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Loss gradients with respect to every head output of one image.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    /// `dL/dX`, `M x C`.
    pub mil_scores: Array2<f64>,
    /// `dL/dx^k`, `M x (C + 1)` per stage.
    pub stages: Vec<Array2<f64>>,
    pub deltas: Array2<f64>,
    /// `dL/dz` for the clean embeddings.
    pub embeddings: Option<Array2<f64>>,
    /// `dL/dz` per augmented pass, aligned with the passes given to the backward call.
    pub augmented: Vec<Array2<f64>>,
}

impl HeadGrads {
    pub fn zeros(fwd: &ImageForward, augmented: &[AugmentedPass]) -> Self {
        Self {
            mil_scores: Array2::zeros(fwd.mil.scores.raw_dim()),
            stages: fwd
                .stages
                .iter()
                .map(|s| Array2::zeros(s.raw_dim()))
                .collect(),
            deltas: Array2::zeros(fwd.deltas.raw_dim()),
            embeddings: fwd
                .embeddings
                .as_ref()
                .map(|s| Array2::zeros(s.z.raw_dim())),
            augmented: augmented
                .iter()
                .map(|a| Array2::zeros(a.sim.z.raw_dim()))
                .collect(),
        }
    }
}

fn scatter_rows(dst: &mut Array2<f64>, rows: &[usize], src: &Array2<f64>) {
    for (r, &m) in rows.iter().enumerate() {
        let mut d = dst.row_mut(m);
        d += &src.row(r);
    }
}

impl Network {
    /// Full forward pass over an image's proposals.
    pub fn forward(
        &self,
        image: TrainingImage<'_>,
        mode: ForwardMode,
        rng: &mut Rng,
    ) -> Result<ImageForward> {
        let p = &self.params;
        let (features, backbone) = backbone_forward(p, image.raster);
        let pool = roi_max_pool(
            &features,
            image.proposals,
            FEATURE_STRIDE as f64,
            self.config.roi_size,
        )?;
        let (drop_masks, clean, regularized) = if mode.training {
            let masks = sample_drop_masks(&self.config, image.proposals.len(), rng)?;
            let reg = eta_forward(
                p,
                apply_spatial(&pool.pooled, &masks, self.config.roi_cells()),
            );
            let clean = mode.embeddings.then(|| eta_forward(p, pool.pooled.clone()));
            (Some(masks), clean, reg)
        } else {
            (None, None, eta_forward(p, pool.pooled.clone()))
        };
        let vt = regularized.out.view();
        let mil = self.mil_head(vt)?;
        let stages = p
            .refine
            .iter()
            .map(|l| softmax_rows(&l.forward(vt)))
            .collect();
        let deltas = p.bbox.forward(vt);
        let embeddings = mode.embeddings.then(|| {
            let v = clean.as_ref().unwrap_or(&regularized).out.view();
            sim_forward(p, v)
        });
        Ok(ImageForward {
            backbone,
            pool,
            drop_masks,
            clean,
            regularized,
            mil,
            stages,
            deltas,
            embeddings,
        })
    }

    /// Runs `eta` and the similarity head on `f[rows] ⊙ maps`.
    pub fn augmented_pass(
        &self,
        fwd: &ImageForward,
        rows: Vec<usize>,
        maps: Array2<f64>,
    ) -> AugmentedPass {
        let selected = fwd.pool.pooled.select(Axis(0), &rows);
        let eta = eta_forward(
            &self.params,
            apply_spatial(&selected, &maps, self.config.roi_cells()),
        );
        let sim = sim_forward(&self.params, eta.out.view());
        AugmentedPass {
            rows,
            maps,
            eta,
            sim,
        }
    }

    /// Accumulates parameter gradients of one image into `grad`.
    pub fn backward(
        &self,
        fwd: &ImageForward,
        augmented: &[AugmentedPass],
        g: &HeadGrads,
        grad: &mut Params,
    ) {
        let p = &self.params;
        let vt = fwd.regularized.out.view();
        let d_cls = &g.mil_scores * &fwd.mil.det;
        let d_det = &g.mil_scores * &fwd.mil.cls;
        let dl_cls = softmax_rows_backward(&fwd.mil.cls, &d_cls);
        let dl_det = softmax_cols_backward(&fwd.mil.det, &d_det);
        let mut dvt = p
            .mil_cls
            .backward(vt, dl_cls.view(), &mut grad.mil_cls, true)
            .expect("dx requested");
        dvt += &p
            .mil_det
            .backward(vt, dl_det.view(), &mut grad.mil_det, true)
            .expect("dx requested");
        for (k, (scores, ds)) in fwd.stages.iter().zip(&g.stages).enumerate() {
            let dl = softmax_rows_backward(scores, ds);
            dvt += &p.refine[k]
                .backward(vt, dl.view(), &mut grad.refine[k], true)
                .expect("dx requested");
        }
        dvt += &p
            .bbox
            .backward(vt, g.deltas.view(), &mut grad.bbox, true)
            .expect("dx requested");
        let df_reg = eta_backward(p, &fwd.regularized, dvt, grad);
        let cells = self.config.roi_cells();
        let mut df = match &fwd.drop_masks {
            Some(m) => apply_spatial(&df_reg, m, cells),
            None => df_reg,
        };

        if let (Some(dz), Some(sim)) = (&g.embeddings, &fwd.embeddings) {
            let rows: Vec<usize> = (0..dz.nrows())
                .filter(|&m| dz.row(m).iter().any(|&v| v != 0.0))
                .collect();
            if !rows.is_empty() {
                let eta = fwd.clean_cache().select(&rows);
                let sim = sim.select(&rows);
                let dz = dz.select(Axis(0), &rows);
                let dv = sim_backward(p, eta.out.view(), &sim, &dz, grad);
                let dx = eta_backward(p, &eta, dv, grad);
                scatter_rows(&mut df, &rows, &dx);
            }
        }
        for (a, dz) in augmented.iter().zip(&g.augmented) {
            let dv = sim_backward(p, a.eta.out.view(), &a.sim, dz, grad);
            let dx = eta_backward(p, &a.eta, dv, grad);
            scatter_rows(&mut df, &a.rows, &apply_spatial(&dx, &a.maps, cells));
        }

        let dfeat = roi_max_pool_backward(&fwd.pool, &df);
        backbone_backward(p, &fwd.backbone, dfeat, grad);
    }
}
