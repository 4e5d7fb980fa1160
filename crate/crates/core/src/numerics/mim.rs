//! Masked token prediction and the [CLS] auxiliary loss.
//!
//! `L_CLS` reuses the masked cross-entropy, with logits from a head whose
//! input is `[cls ; h_i]` for each masked patch `i`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{ensure_finite, Matrix};
use super::patch::PatchSet;
use super::vit::{softmax_in_place, EncoderState};
use super::vq::{quantize_all, Codebook};
use crate::error::{Error, Result};
use crate::stream::Image;

pub const DEFAULT_MASK_RATIO: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Sorted, unique patch indices.
    pub masked: Vec<usize>,
    pub ratio: f64,
}

impl MaskSpec {
    pub fn count_for(n: usize, ratio: f64) -> usize {
        (ratio * n as f64).round() as usize
    }

    pub fn random<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::InvalidInput(format!("mask ratio {ratio} outside [0, 1]")));
        }
        let mut masked = sample(rng, n, Self::count_for(n, ratio)).into_vec();
        masked.sort_unstable();
        Ok(MaskSpec { masked, ratio })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.masked.len() != Self::count_for(n, self.ratio) {
            return Err(Error::InvalidInput(format!(
                "mask has {} indices, expected round({} * {n})",
                self.masked.len(),
                self.ratio
            )));
        }
        if self.masked.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("mask indices must be sorted and unique".into()));
        }
        if let Some(&m) = self.masked.last() {
            if m >= n {
                return Err(Error::InvalidInput(format!("mask index {m} out of range for {n} patches")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MimLoss {
    pub loss: f64,
    /// Same shape as the logits; rows of unmasked patches are zero.
    pub grad_logits: Matrix,
}

/// `−Σ_{i∈M} log softmax(logits_i)[z_i]` over an N × K logit matrix; rows
/// outside the mask are ignored.
pub fn mim_loss(logits: &Matrix, targets: &[usize], mask: &MaskSpec) -> Result<MimLoss> {
    let (n, k) = logits.shape();
    if targets.len() != n {
        return Err(Error::LengthMismatch {
            left: targets.len(),
            right: n,
        });
    }
    mask.validate(n)?;
    ensure_finite(logits, "logits")?;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, k);
    for &i in &mask.masked {
        let z = targets[i];
        if z >= k {
            return Err(Error::InvalidInput(format!("target index {z} out of range for {k} classes")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - row[z];
        let g = grad.row_mut(i);
        g.copy_from_slice(row);
        softmax_in_place(g);
        g[z] -= 1.0;
    }
    Ok(MimLoss { loss, grad_logits: grad })
}

/// `L = L_MIM + L_CLS`
pub fn total_loss(mim: f64, cls: f64) -> f64 {
    mim + cls
}

/// Affine map `x W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn seeded(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearHead {
            weight: Matrix::random_normal(input, output, 1.0 / (input as f64).sqrt(), rng),
            bias: vec![0.0; output],
        }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight)?;
        y.add_row_vector(&self.bias)?;
        Ok(y)
    }

    /// Parameter gradients given the input and the gradient at the output.
    pub fn backward(&self, x: &Matrix, grad_out: &Matrix) -> Result<LinearHead> {
        Ok(LinearHead {
            weight: x.transpose().matmul(grad_out)?,
            bias: grad_out.column_sums(),
        })
    }

    pub fn step(&mut self, grad: &LinearHead, lr: f64) -> Result<()> {
        self.weight.sub_scaled(&grad.weight, lr)?;
        for (b, g) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g;
        }
        Ok(())
    }
}

/// Rows `[cls ; h_i]` for every patch.
pub fn cls_conditioned_inputs(h: &Matrix, cls: &[f64]) -> Result<Matrix> {
    let d = h.cols();
    if cls.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: cls.len(),
        });
    }
    let mut x = Matrix::zeros(h.rows(), 2 * d);
    for i in 0..h.rows() {
        let row = x.row_mut(i);
        row[..d].copy_from_slice(cls);
        row[d..].copy_from_slice(h.row(i));
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_enc: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub layers: usize,
    pub mask_ratio: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            image_size: 32,
            patch_size: 8,
            d_enc: 32,
            codebook_size: 32,
            code_dim: 8,
            layers: 2,
            mask_ratio: DEFAULT_MASK_RATIO,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub mim: f64,
    pub cls: f64,
    pub total: f64,
}

/// A seeded masked-modeling instance. The encoder and tokenizer are frozen;
/// gradient descent updates the two prediction heads.
#[derive(Debug, Clone)]
pub struct ToyPretrainer {
    pub encoder: EncoderState,
    pub codebook: Codebook,
    pub mim_head: LinearHead,
    pub cls_head: LinearHead,
    pub mask: MaskSpec,
    /// Visual-token targets from the unmasked forward pass.
    pub targets: Vec<usize>,
    h_masked: Matrix,
    cls_inputs: Matrix,
}

impl ToyPretrainer {
    pub fn seeded(cfg: &ToyConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.image_size;
        let pixels = (0..s * s * 3).map(|_| rng.gen()).collect();
        let patches = super::patch::patchify(&Image::new(s, s, pixels)?, cfg.patch_size)?;
        let n = patches.len();
        let encoder = EncoderState::seeded(patches.patch_dim(), cfg.d_enc, cfg.layers, Some(n), rng.gen());
        let codebook = Codebook::seeded(cfg.codebook_size, cfg.code_dim, cfg.d_enc, rng.gen())?;
        let mask = MaskSpec::random(n, cfg.mask_ratio, &mut rng)?;
        let mim_head = LinearHead::seeded(cfg.d_enc, cfg.codebook_size, &mut rng);
        let cls_head = LinearHead::seeded(2 * cfg.d_enc, cfg.codebook_size, &mut rng);
        Self::new(encoder, codebook, mim_head, cls_head, &patches, mask)
    }

    pub fn new(
        encoder: EncoderState,
        codebook: Codebook,
        mim_head: LinearHead,
        cls_head: LinearHead,
        patches: &PatchSet,
        mask: MaskSpec,
    ) -> Result<Self> {
        mask.validate(patches.len())?;
        let clean = encoder.forward(patches)?;
        let targets = quantize_all(&clean.h, &codebook)?;
        let masked = encoder.forward_masked(patches, &mask.masked)?;
        let cls_inputs = cls_conditioned_inputs(&masked.h, &masked.cls)?;
        Ok(ToyPretrainer {
            encoder,
            codebook,
            mim_head,
            cls_head,
            mask,
            targets,
            h_masked: masked.h,
            cls_inputs,
        })
    }

    pub fn loss(&self) -> Result<LossBreakdown> {
        Ok(self.loss_and_grads()?.0)
    }

    pub fn loss_and_grads(&self) -> Result<(LossBreakdown, LinearHead, LinearHead)> {
        let mim = mim_loss(&self.mim_head.apply(&self.h_masked)?, &self.targets, &self.mask)?;
        let cls = mim_loss(&self.cls_head.apply(&self.cls_inputs)?, &self.targets, &self.mask)?;
        let g_mim = self.mim_head.backward(&self.h_masked, &mim.grad_logits)?;
        let g_cls = self.cls_head.backward(&self.cls_inputs, &cls.grad_logits)?;
        let breakdown = LossBreakdown {
            mim: mim.loss,
            cls: cls.loss,
            total: total_loss(mim.loss, cls.loss),
        };
        Ok((breakdown, g_mim, g_cls))
    }

    /// One descent step; returns the loss before the update.
    pub fn step(&mut self, lr: f64) -> Result<f64> {
        let (l, g_mim, g_cls) = self.loss_and_grads()?;
        self.mim_head.step(&g_mim, lr)?;
        self.cls_head.step(&g_cls, lr)?;
        Ok(l.total)
    }

    /// Loss trajectory of `steps` updates, including the final loss.
    pub fn descend(&mut self, steps: usize, lr: f64) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(steps + 1);
        for _ in 0..steps {
            losses.push(self.step(lr)?);
        }
        losses.push(self.loss()?.total);
        Ok(losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(idx: &[usize], n: usize) -> MaskSpec {
        MaskSpec {
            masked: idx.to_vec(),
            ratio: idx.len() as f64 / n as f64,
        }
    }

    #[test]
    fn uniform_logits_give_m_ln_k() {
        let logits = Matrix::zeros(5, 7);
        let m = mask(&[0, 2, 4], 5);
        let l = mim_loss(&logits, &[1, 2, 3, 4, 5], &m).unwrap();
        assert!((l.loss - 3.0 * 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let mut logits = Matrix::zeros(2, 3);
        logits.set(0, 1, 60.0);
        logits.set(1, 2, 60.0);
        let l = mim_loss(&logits, &[1, 2], &mask(&[0, 1], 2)).unwrap();
        assert!(l.loss >= 0.0 && l.loss < 1e-20);
    }

    #[test]
    fn unmasked_rows_have_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = Matrix::random_normal(4, 3, 1.0, &mut rng);
        let l = mim_loss(&logits, &[0, 1, 2, 0], &mask(&[1, 3], 4)).unwrap();
        assert!(l.grad_logits.row(0).iter().all(|&g| g == 0.0));
        assert!(l.grad_logits.row(2).iter().all(|&g| g == 0.0));
        let s: f64 = l.grad_logits.row(1).iter().sum();
        assert!(s.abs() < 1e-15);
    }

    #[test]
    fn bad_targets_and_masks_fail() {
        let logits = Matrix::zeros(3, 2);
        assert!(mim_loss(&logits, &[0, 5, 0], &mask(&[1], 3)).is_err());
        assert!(mim_loss(&logits, &[0, 0, 0], &mask(&[1, 1], 3)).is_err());
        assert!(mim_loss(&logits, &[0, 0], &mask(&[1], 3)).is_err());
    }

    #[test]
    fn random_mask_size_is_rounded_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MaskSpec::random(16, 0.4, &mut rng).unwrap();
        assert_eq!(m.masked.len(), 6);
        m.validate(16).unwrap();
    }

    #[test]
    fn total_is_a_sum() {
        assert_eq!(total_loss(1.5, 0.0), 1.5);
        assert_eq!(total_loss(1.0, 1.0), 2.0);
    }

    #[test]
    fn toy_descent_decreases_loss() {
        let mut t = ToyPretrainer::seeded(&ToyConfig::default(), 3).unwrap();
        let losses = t.descend(20, 1e-2).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
    }
}
