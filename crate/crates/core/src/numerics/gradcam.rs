//! Grad-CAM over ViT patch activations.
//!
//! `E` is the N × d matrix of patch tokens after the last encoder block. For
//! class `c` with score `y`:
//!
//! ```text
//! α_p   = (1/N) Σ_k ∂y/∂E[p,k]
//! raw_p = ReLU(α_p · Σ_k E[p,k])
//! ```
//!
//! and the map is `raw` min-max scaled to [0, 1] when it is not all zero.

use serde::{Deserialize, Serialize};

use super::matrix::{dot, ensure_finite, Matrix};
use super::patch::PatchSet;
use super::vit::{softmax_in_place, EncoderState};
use crate::error::{Error, Result};

/// Class-score heads reading the final activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassHead {
    /// `y_c = w_c · cls + b_c`
    Cls { weights: Matrix, bias: Vec<f64> },
    /// `y_c = w_c · mean_p(E_p) + b_c`
    MeanPool { weights: Matrix, bias: Vec<f64> },
    /// `y_c = w_c · Σ_p a_p E_p + b_c` with `a = softmax_p(q · E_p)`
    AttentionPool { query: Vec<f64>, weights: Matrix, bias: Vec<f64> },
    /// `y_c = Σ_p W_c[p] · E_p + b_c`, one N × d weight per class
    PatchLinear { weights: Vec<Matrix>, bias: Vec<f64> },
}

impl ClassHead {
    pub fn classes(&self) -> usize {
        match self {
            ClassHead::Cls { bias, .. }
            | ClassHead::MeanPool { bias, .. }
            | ClassHead::AttentionPool { bias, .. }
            | ClassHead::PatchLinear { bias, .. } => bias.len(),
        }
    }

    fn check_class(&self, c: usize) -> Result<()> {
        if c >= self.classes() {
            return Err(Error::InvalidInput(format!("class {c} out of range for {} classes", self.classes())));
        }
        Ok(())
    }

    fn attention_weights(query: &[f64], e: &Matrix) -> Vec<f64> {
        let mut a: Vec<f64> = (0..e.rows()).map(|p| dot(query, e.row(p))).collect();
        softmax_in_place(&mut a);
        a
    }

    pub fn score(&self, e: &Matrix, cls: &[f64], c: usize) -> Result<f64> {
        self.check_class(c)?;
        let n = e.rows() as f64;
        let y = match self {
            ClassHead::Cls { weights, bias } => dot(weights.row(c), cls) + bias[c],
            ClassHead::MeanPool { weights, bias } => {
                let mean: Vec<f64> = e.column_sums().iter().map(|s| s / n).collect();
                dot(weights.row(c), &mean) + bias[c]
            }
            ClassHead::AttentionPool { query, weights, bias } => {
                let a = Self::attention_weights(query, e);
                let pooled = Matrix::from_vec(1, e.rows(), a)?.matmul(e)?;
                dot(weights.row(c), pooled.row(0)) + bias[c]
            }
            ClassHead::PatchLinear { weights, bias } => {
                let w = &weights[c];
                if w.shape() != e.shape() {
                    return Err(Error::DimensionMismatch {
                        expected: w.rows() * w.cols(),
                        actual: e.rows() * e.cols(),
                    });
                }
                dot(w.as_slice(), e.as_slice()) + bias[c]
            }
        };
        if !y.is_finite() {
            return Err(Error::Numerical("non-finite class score".into()));
        }
        Ok(y)
    }

    /// Closed-form `∂y_c/∂E`.
    pub fn grad_patches(&self, e: &Matrix, c: usize) -> Result<Matrix> {
        self.check_class(c)?;
        let (n, d) = e.shape();
        let mut g = Matrix::zeros(n, d);
        match self {
            ClassHead::Cls { .. } => {}
            ClassHead::MeanPool { weights, .. } => {
                for p in 0..n {
                    for (gv, w) in g.row_mut(p).iter_mut().zip(weights.row(c)) {
                        *gv = w / n as f64;
                    }
                }
            }
            ClassHead::AttentionPool { query, weights, .. } => {
                let w = weights.row(c);
                let a = Self::attention_weights(query, e);
                let scores: Vec<f64> = (0..n).map(|p| dot(w, e.row(p))).collect();
                let pooled: f64 = a.iter().zip(&scores).map(|(x, s)| x * s).sum();
                for p in 0..n {
                    let shift = a[p] * (scores[p] - pooled);
                    for ((gv, wk), qk) in g.row_mut(p).iter_mut().zip(w).zip(query) {
                        *gv = a[p] * wk + shift * qk;
                    }
                }
            }
            ClassHead::PatchLinear { weights, .. } => {
                g = weights[c].clone();
            }
        }
        Ok(g)
    }

    /// Same head with every class score multiplied by `s`.
    pub fn scaled(&self, s: f64) -> ClassHead {
        let scale_vec = |v: &[f64]| v.iter().map(|x| x * s).collect::<Vec<_>>();
        let scale_mat = |m: &Matrix| {
            let mut m = m.clone();
            m.scale(s);
            m
        };
        match self {
            ClassHead::Cls { weights, bias } => ClassHead::Cls {
                weights: scale_mat(weights),
                bias: scale_vec(bias),
            },
            ClassHead::MeanPool { weights, bias } => ClassHead::MeanPool {
                weights: scale_mat(weights),
                bias: scale_vec(bias),
            },
            ClassHead::AttentionPool { query, weights, bias } => ClassHead::AttentionPool {
                query: query.clone(),
                weights: scale_mat(weights),
                bias: scale_vec(bias),
            },
            ClassHead::PatchLinear { weights, bias } => ClassHead::PatchLinear {
                weights: weights.iter().map(scale_mat).collect(),
                bias: scale_vec(bias),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub encoder: EncoderState,
    pub head: ClassHead,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradMethod {
    Analytic,
    /// Central differences over every component of E.
    FiniteDifference { step: f64 },
}

impl Classifier {
    /// Final patch activations E and the [CLS] output.
    pub fn activations(&self, patches: &PatchSet) -> Result<(Matrix, Vec<f64>)> {
        let out = self.encoder.forward(patches)?;
        Ok((out.h, out.cls))
    }

    pub fn class_score(&self, patches: &PatchSet, c: usize) -> Result<f64> {
        let (e, cls) = self.activations(patches)?;
        self.head.score(&e, &cls, c)
    }
}

pub fn finite_difference_patch_grad(head: &ClassHead, e: &Matrix, cls: &[f64], c: usize, step: f64) -> Result<Matrix> {
    if !(step > 0.0) {
        return Err(Error::InvalidInput("finite-difference step must be positive".into()));
    }
    let mut g = Matrix::zeros(e.rows(), e.cols());
    let mut probe = e.clone();
    for idx in 0..e.as_slice().len() {
        let x0 = e.as_slice()[idx];
        probe.as_mut_slice()[idx] = x0 + step;
        let up = head.score(&probe, cls, c)?;
        probe.as_mut_slice()[idx] = x0 - step;
        let down = head.score(&probe, cls, c)?;
        probe.as_mut_slice()[idx] = x0;
        g.as_mut_slice()[idx] = (up - down) / (2.0 * step);
    }
    Ok(g)
}

/// `∂y_c/∂E` at the final patch activations.
pub fn grad_wrt_patch_embeddings(model: &Classifier, patches: &PatchSet, c: usize, method: GradMethod) -> Result<Matrix> {
    let (e, cls) = model.activations(patches)?;
    let g = match method {
        GradMethod::Analytic => model.head.grad_patches(&e, c)?,
        GradMethod::FiniteDifference { step } => finite_difference_patch_grad(&model.head, &e, &cls, c, step)?,
    };
    ensure_finite(&g, "patch gradients")?;
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamMap {
    /// α_p, one per patch.
    pub weights: Vec<f64>,
    /// Post-ReLU relevance before scaling.
    pub raw: Vec<f64>,
    /// `raw` min-max scaled to [0, 1], or all zeros.
    pub map: Vec<f64>,
}

impl CamMap {
    pub fn argmax(&self) -> Option<usize> {
        argmax(&self.raw)
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
}

pub fn cam_from_gradients(e: &Matrix, grads: &Matrix) -> Result<CamMap> {
    if e.shape() != grads.shape() {
        return Err(Error::DimensionMismatch {
            expected: e.rows() * e.cols(),
            actual: grads.rows() * grads.cols(),
        });
    }
    let n = e.rows();
    let z = n as f64;
    let weights: Vec<f64> = (0..n).map(|p| grads.row(p).iter().sum::<f64>() / z).collect();
    let raw: Vec<f64> = (0..n)
        .map(|p| (weights[p] * e.row(p).iter().sum::<f64>()).max(0.0))
        .collect();
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let map = if n > 0 && hi > 0.0 {
        if hi > lo {
            raw.iter().map(|x| (x - lo) / (hi - lo)).collect()
        } else {
            vec![1.0; n]
        }
    } else {
        vec![0.0; n]
    };
    Ok(CamMap { weights, raw, map })
}

pub fn grad_cam(model: &Classifier, patches: &PatchSet, c: usize) -> Result<CamMap> {
    let (e, _) = model.activations(patches)?;
    let g = model.head.grad_patches(&e, c)?;
    ensure_finite(&g, "patch gradients")?;
    cam_from_gradients(&e, &g)
}

/// Score drop from zeroing each patch activation in turn.
pub fn occlusion_drops(head: &ClassHead, e: &Matrix, cls: &[f64], c: usize) -> Result<Vec<f64>> {
    let base = head.score(e, cls, c)?;
    let mut probe = e.clone();
    (0..e.rows())
        .map(|p| {
            let saved = probe.row(p).to_vec();
            probe.row_mut(p).iter_mut().for_each(|x| *x = 0.0);
            let y = head.score(&probe, cls, c);
            probe.row_mut(p).copy_from_slice(&saved);
            y.map(|y| base - y)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture(layers: usize, head: ClassHead) -> (Classifier, PatchSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let patches = PatchSet {
            patches: Matrix::random_normal(4, 6, 1.0, &mut rng),
            patch_size: 1,
            grid_height: 2,
            grid_width: 2,
        };
        let encoder = EncoderState::seeded(6, 5, layers, Some(4), 4);
        (Classifier { encoder, head }, patches)
    }

    fn heads(n: usize, d: usize) -> Vec<ClassHead> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        vec![
            ClassHead::Cls {
                weights: Matrix::random_normal(2, d, 1.0, &mut rng),
                bias: vec![0.1, -0.1],
            },
            ClassHead::MeanPool {
                weights: Matrix::random_normal(2, d, 1.0, &mut rng),
                bias: vec![0.0, 0.3],
            },
            ClassHead::AttentionPool {
                query: Matrix::random_normal(1, d, 1.0, &mut rng).row(0).to_vec(),
                weights: Matrix::random_normal(2, d, 1.0, &mut rng),
                bias: vec![0.0, 0.0],
            },
            ClassHead::PatchLinear {
                weights: vec![Matrix::random_normal(n, d, 1.0, &mut rng), Matrix::random_normal(n, d, 1.0, &mut rng)],
                bias: vec![0.2, 0.0],
            },
        ]
    }

    #[test]
    fn cls_head_on_zero_layer_encoder_has_zero_patch_gradient() {
        let (m, p) = fixture(0, heads(4, 5).remove(0));
        let g = grad_wrt_patch_embeddings(&m, &p, 0, GradMethod::Analytic).unwrap();
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
        let g = grad_wrt_patch_embeddings(&m, &p, 0, GradMethod::FiniteDifference { step: 1e-5 }).unwrap();
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mean_pool_gradient_rows_are_w_over_n() {
        let head = heads(4, 5).remove(1);
        let w = match &head {
            ClassHead::MeanPool { weights, .. } => weights.row(1).to_vec(),
            _ => unreachable!(),
        };
        let (m, p) = fixture(2, head);
        let g = grad_wrt_patch_embeddings(&m, &p, 1, GradMethod::Analytic).unwrap();
        for r in 0..4 {
            for (a, b) in g.row(r).iter().zip(&w) {
                assert!((a - b / 4.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn analytic_matches_finite_differences_for_every_head() {
        for head in heads(4, 5) {
            let (m, p) = fixture(2, head);
            for c in 0..2 {
                let a = grad_wrt_patch_embeddings(&m, &p, c, GradMethod::Analytic).unwrap();
                let f = grad_wrt_patch_embeddings(&m, &p, c, GradMethod::FiniteDifference { step: 1e-5 }).unwrap();
                let mut diff = a.clone();
                diff.sub_scaled(&f, 1.0).unwrap();
                let scale = a.frobenius_norm().max(f.frobenius_norm());
                assert!(diff.frobenius_norm() <= 1e-4 * scale.max(1e-300), "{diff:?}");
            }
        }
    }

    #[test]
    fn relu_kills_negative_evidence() {
        let e = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.5]]).unwrap();
        let g = Matrix::from_rows(&[vec![-1.0, 0.0], vec![-0.2, -0.3]]).unwrap();
        let cam = cam_from_gradients(&e, &g).unwrap();
        assert!(cam.map.iter().all(|&x| x == 0.0));
        assert!(cam.raw.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn map_is_non_negative_and_scale_invariant() {
        for head in heads(4, 5) {
            let (m, p) = fixture(1, head.clone());
            let cam = grad_cam(&m, &p, 0).unwrap();
            assert!(cam.map.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let scaled = Classifier {
                encoder: m.encoder.clone(),
                head: head.scaled(3.5),
            };
            let cam2 = grad_cam(&scaled, &p, 0).unwrap();
            assert_eq!(cam.argmax(), cam2.argmax());
            for (a, b) in cam.map.iter().zip(&cam2.map) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn occlusion_of_patch_linear_is_the_patch_term() {
        let head = heads(4, 5).remove(3);
        let (m, p) = fixture(1, head.clone());
        let (e, cls) = m.activations(&p).unwrap();
        let drops = occlusion_drops(&head, &e, &cls, 0).unwrap();
        let w = match &head {
            ClassHead::PatchLinear { weights, .. } => weights[0].clone(),
            _ => unreachable!(),
        };
        for (q, d) in drops.iter().enumerate() {
            assert!((d - dot(w.row(q), e.row(q))).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_takes_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }
}
