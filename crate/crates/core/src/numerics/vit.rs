//! Pre-norm ViT encoder.
//!
//! Token sequence: `[CLS; x_1 W + b; ...; x_N W + b]` plus optional learned
//! positional embeddings. Each block computes
//! `X += Attn(LN1(X))` then `X += MLP(LN2(X))` with single-head scaled
//! dot-product attention and an exact-erf GELU MLP. There is no final layer
//! norm, so `H` is the residual stream after the last block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{dot, ensure_finite, Matrix};
use super::patch::PatchSet;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        let d = x.cols() as f64;
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for ((v, g), b) in row.iter_mut().zip(&self.gamma).zip(&self.beta) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub ln2: LayerNorm,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

impl Block {
    fn seeded(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        Block {
            ln1: LayerNorm::identity(d),
            wq: Matrix::random_normal(d, d, s, rng),
            wk: Matrix::random_normal(d, d, s, rng),
            wv: Matrix::random_normal(d, d, s, rng),
            wo: Matrix::random_normal(d, d, s, rng),
            bo: vec![0.0; d],
            ln2: LayerNorm::identity(d),
            w1: Matrix::random_normal(d, hidden, s, rng),
            b1: vec![0.0; hidden],
            w2: Matrix::random_normal(hidden, d, 1.0 / (hidden as f64).sqrt(), rng),
            b2: vec![0.0; d],
        }
    }

    fn attention(&self, x: &Matrix) -> Result<Matrix> {
        let q = x.matmul(&self.wq)?;
        let k = x.matmul(&self.wk)?;
        let v = x.matmul(&self.wv)?;
        let scale = 1.0 / (q.cols() as f64).sqrt();
        let n = x.rows();
        let mut mixed = Matrix::zeros(n, v.cols());
        let mut scores = vec![0.0; n];
        for i in 0..n {
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(q.row(i), k.row(j)) * scale;
            }
            softmax_in_place(&mut scores);
            let out = mixed.row_mut(i);
            for (j, &a) in scores.iter().enumerate() {
                for (o, &vj) in out.iter_mut().zip(v.row(j)) {
                    *o += a * vj;
                }
            }
        }
        let mut y = mixed.matmul(&self.wo)?;
        y.add_row_vector(&self.bo)?;
        Ok(y)
    }

    fn mlp(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.matmul(&self.w1)?;
        h.add_row_vector(&self.b1)?;
        for v in h.as_mut_slice() {
            *v = gelu(*v);
        }
        let mut y = h.matmul(&self.w2)?;
        y.add_row_vector(&self.b2)?;
        Ok(y)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut x = x.clone();
        x.add_assign(&self.attention(&self.ln1.apply(&x))?)?;
        x.add_assign(&self.mlp(&self.ln2.apply(&x))?)?;
        Ok(x)
    }

    fn check(&self, d: usize) -> Result<()> {
        let hidden = self.w1.cols();
        let shapes = [
            (self.wq.shape(), (d, d)),
            (self.wk.shape(), (d, d)),
            (self.wv.shape(), (d, d)),
            (self.wo.shape(), (d, d)),
            (self.w1.shape(), (d, hidden)),
            (self.w2.shape(), (hidden, d)),
        ];
        for (got, want) in shapes {
            if got != want {
                return Err(Error::DimensionMismatch {
                    expected: want.0 * want.1,
                    actual: got.0 * got.1,
                });
            }
        }
        for v in [&self.ln1.gamma, &self.ln1.beta, &self.ln2.gamma, &self.ln2.beta, &self.bo, &self.b2] {
            check_len(v, d)?;
        }
        check_len(&self.b1, hidden)?;
        for m in [&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.w2] {
            ensure_finite(m, "block weights")?;
        }
        Ok(())
    }
}

fn check_len(v: &[f64], want: usize) -> Result<()> {
    if v.len() != want {
        return Err(Error::DimensionMismatch {
            expected: want,
            actual: v.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    /// (p·p·3) × d_enc
    pub patch_projection: Matrix,
    pub patch_bias: Vec<f64>,
    pub cls_token: Vec<f64>,
    /// Replaces the projected embedding of masked patches.
    pub mask_token: Vec<f64>,
    /// (N + 1) × d_enc, row 0 for [CLS]; `None` disables positions.
    pub pos_embedding: Option<Matrix>,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// N × d_enc
    pub h: Matrix,
    pub cls: Vec<f64>,
}

impl EncoderState {
    pub fn seeded(patch_dim: usize, d_enc: usize, layers: usize, n_patches: Option<usize>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = Matrix::random_normal(patch_dim, d_enc, 1.0 / (patch_dim as f64).sqrt(), &mut rng);
        let cls = Matrix::random_normal(1, d_enc, 0.5, &mut rng).row(0).to_vec();
        let mask = Matrix::random_normal(1, d_enc, 0.5, &mut rng).row(0).to_vec();
        let pos = n_patches.map(|n| Matrix::random_normal(n + 1, d_enc, 0.1, &mut rng));
        let blocks = (0..layers).map(|_| Block::seeded(d_enc, 2 * d_enc, &mut rng)).collect();
        EncoderState {
            patch_projection: proj,
            patch_bias: vec![0.0; d_enc],
            cls_token: cls,
            mask_token: mask,
            pos_embedding: pos,
            blocks,
        }
    }

    pub fn d_enc(&self) -> usize {
        self.patch_projection.cols()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_projection.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_enc();
        check_len(&self.patch_bias, d)?;
        check_len(&self.cls_token, d)?;
        check_len(&self.mask_token, d)?;
        ensure_finite(&self.patch_projection, "patch projection")?;
        let vectors_finite = [&self.patch_bias, &self.cls_token, &self.mask_token]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !vectors_finite {
            return Err(Error::Numerical("non-finite encoder vectors".into()));
        }
        if let Some(pos) = &self.pos_embedding {
            if pos.cols() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: pos.cols(),
                });
            }
            ensure_finite(pos, "positional embedding")?;
        }
        for b in &self.blocks {
            b.check(d)?;
        }
        Ok(())
    }

    /// Linear patch embedding without [CLS] or positions: `X W + b`.
    pub fn embed_patches(&self, patches: &Matrix) -> Result<Matrix> {
        let mut e = patches.matmul(&self.patch_projection)?;
        e.add_row_vector(&self.patch_bias)?;
        Ok(e)
    }

    pub fn forward(&self, patches: &PatchSet) -> Result<EncoderOutput> {
        self.forward_masked(patches, &[])
    }

    /// Forward pass with the listed patch positions replaced by the mask token.
    pub fn forward_masked(&self, patches: &PatchSet, masked: &[usize]) -> Result<EncoderOutput> {
        self.validate()?;
        if patches.patch_dim() != self.patch_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.patch_dim(),
                actual: patches.patch_dim(),
            });
        }
        let n = patches.len();
        let d = self.d_enc();
        let e = self.embed_patches(&patches.patches)?;
        let mut x = Matrix::zeros(n + 1, d);
        x.row_mut(0).copy_from_slice(&self.cls_token);
        for i in 0..n {
            x.row_mut(i + 1).copy_from_slice(e.row(i));
        }
        for &m in masked {
            if m >= n {
                return Err(Error::InvalidInput(format!("mask index {m} out of range for {n} patches")));
            }
            x.row_mut(m + 1).copy_from_slice(&self.mask_token);
        }
        if let Some(pos) = &self.pos_embedding {
            if pos.rows() != n + 1 {
                return Err(Error::DimensionMismatch {
                    expected: n + 1,
                    actual: pos.rows(),
                });
            }
            x.add_assign(pos)?;
        }
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        ensure_finite(&x, "encoder output")?;
        let cls = x.row(0).to_vec();
        let h = Matrix::from_vec(n, d, x.as_slice()[d..].to_vec())?;
        Ok(EncoderOutput { h, cls })
    }
}
