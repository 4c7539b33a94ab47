//! Training objectives and their analytic gradients.
//!
//! Every function returns the scalar loss together with the gradient with
//! respect to its score or embedding inputs; the network's backward pass
//! carries those the rest of the way.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::Serialize;

use crate::discovery::InstanceLabels;

/// Lower clamp applied before every logarithm.
pub const LOG_EPS: f64 = 1e-8;

/// Value and derivative of `ln(clamp(x, LOG_EPS, 1))`; zero derivative when clamped.
fn clamped_log(x: f64, lo: f64, hi: f64) -> (f64, f64) {
    if x < lo {
        (lo.ln(), 0.0)
    } else if x > hi {
        (hi.ln(), 0.0)
    } else {
        (x.ln(), 1.0 / x)
    }
}

/// Multi-label binary cross-entropy on the image scores `φ`, averaged over
/// the batch. Returns the loss and `dL/dφ` per image.
pub fn mil_loss(phi: &[ArrayView1<'_, f64>], labels: &[&[bool]]) -> (f64, Vec<Array1<f64>>) {
    let n = phi.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(phi.len());
    for (p, y) in phi.iter().zip(labels) {
        let mut g = Array1::zeros(p.len());
        for c in 0..p.len() {
            let x = p[c];
            if y[c] {
                let (l, d) = clamped_log(x, LOG_EPS, 1.0 - LOG_EPS);
                loss -= l;
                g[c] = -d / n;
            } else {
                let (l, d) = clamped_log(1.0 - x, LOG_EPS, 1.0 - LOG_EPS);
                loss -= l;
                g[c] = d / n;
            }
        }
        grads.push(g);
    }
    (loss / n, grads)
}

/// Weighted instance classification over `K` stages.
///
/// `scores[n][k]` is `M x (C + 1)`; `labels[n][k]` the matching instance
/// labels. Returns the loss and `dL/dx` with the same layout as `scores`.
pub fn refinement_cls_loss(
    scores: &[Vec<ArrayView2<'_, f64>>],
    labels: &[&[InstanceLabels]],
) -> (f64, Vec<Vec<Array2<f64>>>) {
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(scores.len());
    for (stages, lab) in scores.iter().zip(labels) {
        let k_total = stages.len() as f64;
        let mut per_stage = Vec::with_capacity(stages.len());
        for (x, l) in stages.iter().zip(lab.iter()) {
            let m_total = x.nrows() as f64;
            let scale = 1.0 / (n * k_total * m_total);
            let mut g = Array2::zeros(x.raw_dim());
            for m in 0..x.nrows() {
                let c = l.labels[m];
                let w = l.weights[m];
                if w == 0.0 {
                    continue;
                }
                let (lv, d) = clamped_log(x[[m, c]], LOG_EPS, f64::INFINITY);
                loss -= scale * w * lv;
                g[[m, c]] = -scale * w * d;
            }
            per_stage.push(g);
        }
        grads.push(per_stage);
    }
    (loss, grads)
}

/// One regression term: predicted-delta row, target deltas and weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionTarget {
    pub proposal: usize,
    pub target: [f64; 4],
    pub weight: f64,
}

pub fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Smooth-L1 box regression. `targets[n][k]` lists the terms of image `n`
/// at stage `k`; each `(n, k)` is averaged over its own term count and
/// contributes nothing when empty. Returns the loss and `dL/d(deltas)`.
pub fn regression_loss(
    pred: &[ArrayView2<'_, f64>],
    targets: &[Vec<Vec<RegressionTarget>>],
) -> (f64, Vec<Array2<f64>>) {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for (p, stages) in pred.iter().zip(targets) {
        let k_total = stages.len() as f64;
        let mut g = Array2::zeros(p.raw_dim());
        for terms in stages {
            if terms.is_empty() {
                continue;
            }
            let scale = 1.0 / (n * k_total * terms.len() as f64);
            for t in terms {
                for j in 0..4 {
                    let (v, d) = smooth_l1(p[[t.proposal, j]] - t.target[j]);
                    loss += scale * t.weight * v;
                    g[[t.proposal, j]] += scale * t.weight * d;
                }
            }
        }
        grads.push(g);
    }
    (loss, grads)
}

/// Weighted supervised contrastive loss over unit embeddings.
///
/// Returns the loss and `dL/ds_i` per entry. Classes with a single member
/// contribute no term of their own but still act as negatives; fewer than two
/// entries give zero.
pub fn wscl(
    embeddings: &[&[f64]],
    labels: &[usize],
    weights: &[f64],
    temperature: f64,
) -> (f64, Vec<Vec<f64>>) {
    let s = embeddings.len();
    let dim = embeddings.first().map_or(0, |e| e.len());
    let mut grads = vec![vec![0.0; dim]; s];
    if s < 2 {
        log::warn!("contrastive bank has {s} entries; loss is zero");
        return (0.0, grads);
    }
    let mut sim = vec![0.0; s * s];
    for i in 0..s {
        for j in i..s {
            let d: f64 = embeddings[i]
                .iter()
                .zip(embeddings[j])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / temperature;
            sim[i * s + j] = d;
            sim[j * s + i] = d;
        }
    }
    let mut loss = 0.0;
    let norm = 1.0 / s as f64;
    let mut p = vec![0.0; s];
    for i in 0..s {
        let positives = (0..s).filter(|&j| j != i && labels[j] == labels[i]).count();
        if positives == 0 || weights[i] == 0.0 {
            continue;
        }
        let row = &sim[i * s..(i + 1) * s];
        let mx = (0..s)
            .filter(|&l| l != i)
            .map(|l| row[l])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in (0..s).filter(|&l| l != i) {
            p[l] = (row[l] - mx).exp();
            z += p[l];
        }
        let log_z = mx + z.ln();
        let pos_sum: f64 = (0..s)
            .filter(|&j| j != i && labels[j] == labels[i])
            .map(|j| row[j])
            .sum();
        let li = log_z - pos_sum / positives as f64;
        let w = weights[i] * norm;
        loss += w * li;
        // d li / d sim_il = p_il - [l positive] / P, and d sim_il = s_l / T (for s_i) and s_i / T (for s_l).
        for l in (0..s).filter(|&l| l != i) {
            let coef = p[l] / z
                - if labels[l] == labels[i] {
                    1.0 / positives as f64
                } else {
                    0.0
                };
            let c = w * coef / temperature;
            if c == 0.0 {
                continue;
            }
            for d in 0..dim {
                grads[i][d] += c * embeddings[l][d];
                grads[l][d] += c * embeddings[i][d];
            }
        }
    }
    (loss, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub mil: f64,
    pub cls: f64,
    pub reg: f64,
    /// Unweighted contrastive term.
    pub wscl: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn total_loss(mil: f64, cls: f64, reg: f64, wscl: f64, lambda: f64) -> LossReport {
    LossReport {
        mil,
        cls,
        reg,
        wscl,
        lambda,
        total: mil + cls + reg + lambda * wscl,
    }
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.mil, self.cls, self.reg, self.wscl, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// `{"iter": n, "mil": .., "cls": .., "reg": .., "wscl": .., "total": ..}`
    pub fn json_line(&self, iter: usize) -> String {
        serde_json::json!({
            "iter": iter,
            "mil": self.mil,
            "cls": self.cls,
            "reg": self.reg,
            "wscl": self.wscl,
            "total": self.total,
        })
        .to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use ndarray::arr1;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn mil_examples() {
        let phi = arr1(&[0.5]);
        let (l, _) = mil_loss(&[phi.view()], &[&[true]]);
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let perfect = arr1(&[1.0, 0.0]);
        let (l, _) = mil_loss(&[perfect.view()], &[&[true, false]]);
        assert!(l < 1e-7);
        let phi = arr1(&[0.3, 0.8, 0.1]);
        let y: &[bool] = &[true, false, true];
        let (_, g) = mil_loss(&[phi.view(), phi.view()], &[y, y]);
        for c in 0..3 {
            let f = |v: f64| {
                let mut p = phi.clone();
                p[c] = v;
                mil_loss(&[p.view(), phi.view()], &[y, y]).0
            };
            assert!(rel(g[0][c], fd(f, phi[c])) < 1e-4);
        }
    }

    fn labels(ls: Vec<usize>, ws: Vec<f64>, c: usize) -> InstanceLabels {
        let mut l = InstanceLabels::background(c, ls.len());
        l.labels = ls;
        l.weights = ws;
        l
    }

    #[test]
    fn refinement_examples() {
        let bg = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let l = labels(vec![1, 1], vec![1.0, 1.0], 1);
        let (v, _) = refinement_cls_loss(&[vec![bg.view()]], &[std::slice::from_ref(&l)]);
        assert_eq!(v, 0.0);

        let e = (-1.0f64).exp();
        let x = Array2::from_shape_vec((1, 2), vec![e, 1.0 - e]).unwrap();
        let l = labels(vec![0], vec![1.0], 1);
        let ls = [l.clone(), l.clone()];
        let (v, _) = refinement_cls_loss(
            &[vec![x.view(), x.view()], vec![x.view(), x.view()]],
            &[&ls, &ls],
        );
        assert!((v - 1.0).abs() < 1e-12);
        let (v1, _) = refinement_cls_loss(&[vec![x.view()]], &[std::slice::from_ref(&l)]);
        assert!((v1 - 1.0).abs() < 1e-12);

        let x = Array2::from_shape_vec((3, 3), vec![0.2, 0.3, 0.5, 0.6, 0.1, 0.3, 0.1, 0.1, 0.8])
            .unwrap();
        let l = labels(vec![0, 2, 1], vec![0.4, 0.9, 0.2], 2);
        let (_, g) = refinement_cls_loss(&[vec![x.view()]], &[std::slice::from_ref(&l)]);
        for m in 0..3 {
            for c in 0..3 {
                let f = |v: f64| {
                    let mut y = x.clone();
                    y[[m, c]] = v;
                    refinement_cls_loss(&[vec![y.view()]], &[std::slice::from_ref(&l)]).0
                };
                let num = fd(f, x[[m, c]]);
                assert!((g[0][0][[m, c]] - num).abs() < 1e-8, "{m},{c}");
            }
        }
    }

    #[test]
    fn regression_examples() {
        let p = Array2::from_shape_vec((1, 4), vec![0.5, 0.0, 0.0, 0.0]).unwrap();
        let t = |target| {
            vec![vec![RegressionTarget {
                proposal: 0,
                target,
                weight: 1.0,
            }]]
        };
        let (v, _) = regression_loss(&[p.view()], &[t([0.5, 0.0, 0.0, 0.0])]);
        assert_eq!(v, 0.0);
        let (v, _) = regression_loss(&[p.view()], &[t([0.0; 4])]);
        assert!((v - 0.125).abs() < 1e-12);
        let two = vec![t([0.0; 4])[0].clone(), vec![]];
        let (v, _) = regression_loss(&[p.view(), p.view()], &[two.clone(), two]);
        assert!((v - 0.125 / 2.0).abs() < 1e-12);
        let q = Array2::from_shape_vec((1, 4), vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let (v, _) = regression_loss(&[q.view()], &[t([0.0; 4])]);
        assert!((v - 1.5).abs() < 1e-12);
        let (v, g) = regression_loss(&[q.view()], &[vec![vec![]]]);
        assert_eq!(v, 0.0);
        assert!(g[0].iter().all(|&x| x == 0.0));
    }

    fn random_bank(
        rng: &mut crate::rng::Rng,
        n: usize,
        d: usize,
        classes: usize,
    ) -> (Vec<Vec<f64>>, Vec<usize>) {
        let e = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let l = (0..n).map(|_| rng.random_range(0..classes)).collect();
        (e, l)
    }

    #[test]
    fn wscl_two_sample_case_is_zero() {
        let a = [0.6, 0.8];
        let b = [1.0, 0.0];
        let (v, _) = wscl(&[&a, &b], &[0, 0], &[1.0, 1.0], 0.2);
        assert_eq!(v, 0.0);
        let (v, _) = wscl(&[&a], &[0], &[1.0], 0.2);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn wscl_identical_embeddings_closed_form() {
        let e = [0.0, 1.0, 0.0];
        let n = 7;
        let bank: Vec<&[f64]> = (0..n).map(|_| &e[..]).collect();
        let (v, _) = wscl(&bank, &vec![0; n], &vec![1.0; n], 0.2);
        assert!((v - ((n - 1) as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn wscl_gradient_and_permutation() {
        let mut rng = rng_for(21, &[]);
        let (e, l) = random_bank(&mut rng, 12, 5, 3);
        let w: Vec<f64> = (0..12).map(|i| 0.2 + 0.07 * i as f64).collect();
        let refs: Vec<&[f64]> = e.iter().map(Vec::as_slice).collect();
        let (v, g) = wscl(&refs, &l, &w, 0.2);
        for i in 0..12 {
            for d in 0..5 {
                let f = |x: f64| {
                    let mut e2 = e.clone();
                    e2[i][d] = x;
                    let r: Vec<&[f64]> = e2.iter().map(Vec::as_slice).collect();
                    wscl(&r, &l, &w, 0.2).0
                };
                assert!(
                    rel(g[i][d], fd(f, e[i][d])) < 1e-4 || (g[i][d] - fd(f, e[i][d])).abs() < 1e-9
                );
            }
        }
        let perm: Vec<usize> = (0..12).rev().collect();
        let pr: Vec<&[f64]> = perm.iter().map(|&i| e[i].as_slice()).collect();
        let pl: Vec<usize> = perm.iter().map(|&i| l[i]).collect();
        let pw: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
        assert!((wscl(&pr, &pl, &pw, 0.2).0 - v).abs() < 1e-12);
    }

    #[test]
    fn report_arithmetic() {
        let r = total_loss(1.0, 1.0, 1.0, 1.0, 0.03);
        assert!((r.total - 3.03).abs() < 1e-12);
        assert_eq!(total_loss(0.2, 0.3, 0.1, 99.0, 0.0).total, 0.2 + 0.3 + 0.1);
        let v: serde_json::Value = serde_json::from_str(&r.json_line(7)).unwrap();
        assert_eq!(v["iter"], 7);
        assert_eq!(v["total"], r.total);
    }

    proptest! {
        #[test]
        fn report_invariant(m in 0.0f64..10.0, c in 0.0f64..10.0, r in 0.0f64..10.0, w in 0.0f64..10.0, lambda in 0.0f64..1.0) {
            let rep = total_loss(m, c, r, w, lambda);
            prop_assert!((rep.total - (m + c + r + lambda * w)).abs() < 1e-9);
        }

        #[test]
        fn losses_are_nonnegative(seed in any::<u64>()) {
            let mut rng = rng_for(seed, &[]);
            let (e, l) = random_bank(&mut rng, 10, 4, 2);
            let refs: Vec<&[f64]> = e.iter().map(Vec::as_slice).collect();
            let w: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
            prop_assert!(wscl(&refs, &l, &w, 0.2).0 >= 0.0);
            let phi = arr1(&[rng.random::<f64>(), rng.random::<f64>()]);
            prop_assert!(mil_loss(&[phi.view()], &[&[true, false]]).0 >= 0.0);
        }
    }
}
