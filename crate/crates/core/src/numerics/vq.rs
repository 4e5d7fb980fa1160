//! Vector-quantized tokenizer: codebook lookup and the distillation loss.
//!
//! Patch embeddings `h` (width d_enc) are mapped into code space by a
//! projection `P` (d_enc × D), `ĥ = Pᵀh`, before the normalized lookup.
//!
//! The loss is written for minimization:
//!
//! ```text
//! L = Σ_i [ −cos(o_i, t_i) + ‖sg[n(ĥ_i)] − n(v_zi)‖² + ‖n(ĥ_i) − sg[n(v_zi)]‖² ]
//! ```
//!
//! where `n` is ℓ2 normalization. The second term only moves codebook rows,
//! the third only moves `h` (and `P`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{dot, ensure_finite, l2_normalize, norm, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    /// K × D
    pub vectors: Matrix,
    /// d_enc × D
    pub projection: Matrix,
}

impl Codebook {
    /// Gaussian rows; projection with orthonormal columns (needs D ≤ d_enc).
    pub fn seeded(k: usize, code_dim: usize, d_enc: usize, seed: u64) -> Result<Self> {
        if code_dim > d_enc {
            return Err(Error::Config(format!(
                "code dimension {code_dim} exceeds encoder width {d_enc}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors = Matrix::random_normal(k, code_dim, 1.0, &mut rng);
        let raw = Matrix::random_normal(d_enc, code_dim, 1.0, &mut rng);
        let cb = Codebook {
            vectors,
            projection: orthonormal_columns(&raw)?,
        };
        cb.validate()?;
        Ok(cb)
    }

    pub fn size(&self) -> usize {
        self.vectors.rows()
    }

    pub fn code_dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn d_enc(&self) -> usize {
        self.projection.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.size() < 2 {
            return Err(Error::Config("codebook needs at least 2 entries".into()));
        }
        if self.projection.cols() != self.code_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.code_dim(),
                actual: self.projection.cols(),
            });
        }
        ensure_finite(&self.vectors, "codebook")?;
        ensure_finite(&self.projection, "codebook projection")?;
        let normalized = self.normalized_rows()?;
        for i in 0..normalized.len() {
            for j in i + 1..normalized.len() {
                if normalized[i] == normalized[j] {
                    return Err(Error::Config(format!("codebook rows {i} and {j} coincide after normalization")));
                }
            }
        }
        Ok(())
    }

    pub fn normalized_rows(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.size()).map(|j| l2_normalize(self.vectors.row(j))).collect()
    }

    /// `ĥ = Pᵀh`
    pub fn project(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.projection.vec_mul(h)
    }
}

/// Gram-Schmidt on the columns of `m`.
pub fn orthonormal_columns(m: &Matrix) -> Result<Matrix> {
    let t = m.transpose();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(t.rows());
    for c in 0..t.rows() {
        let mut v = t.row(c).to_vec();
        for b in &basis {
            let proj = dot(&v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        basis.push(l2_normalize(&v).map_err(|_| Error::Numerical("rank-deficient projection".into()))?);
    }
    Ok(Matrix::from_rows(&basis)?.transpose())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub index: usize,
    /// The unnormalized codebook row v_z.
    pub code: Vec<f64>,
    /// ‖n(ĥ) − n(v_z)‖²
    pub distance: f64,
}

/// Nearest normalized codebook row to the normalized projection of `h`.
/// Ties go to the smallest index.
pub fn quantize(h: &[f64], cb: &Codebook) -> Result<Quantized> {
    if h.len() != cb.d_enc() {
        return Err(Error::DimensionMismatch {
            expected: cb.d_enc(),
            actual: h.len(),
        });
    }
    if !h.iter().all(|x| x.is_finite()) {
        return Err(Error::Numerical("non-finite patch embedding".into()));
    }
    let nh = l2_normalize(&cb.project(h)?)?;
    let mut best = (usize::MAX, f64::INFINITY);
    for j in 0..cb.size() {
        let nv = l2_normalize(cb.vectors.row(j))?;
        let d: f64 = nh.iter().zip(&nv).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    Ok(Quantized {
        index: best.0,
        code: cb.vectors.row(best.0).to_vec(),
        distance: best.1,
    })
}

pub fn quantize_all(h: &Matrix, cb: &Codebook) -> Result<Vec<usize>> {
    (0..h.rows()).map(|i| quantize(h.row(i), cb).map(|q| q.index)).collect()
}

/// Single linear decoder layer from code vectors to teacher space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    /// D × d_t
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Decoder {
    pub fn seeded(code_dim: usize, teacher_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Decoder {
            weight: Matrix::random_normal(code_dim, teacher_dim, 1.0 / (code_dim as f64).sqrt(), &mut rng),
            bias: vec![0.0; teacher_dim],
        }
    }

    pub fn decode(&self, cb: &Codebook, indices: &[usize]) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = indices.iter().map(|&z| cb.vectors.row(z).to_vec()).collect();
        let mut o = Matrix::from_rows(&rows)?.matmul(&self.weight)?;
        o.add_row_vector(&self.bias)?;
        Ok(o)
    }
}

/// Synthetic teacher: a fixed seeded linear map of raw patches.
pub fn teacher_targets(patches: &Matrix, teacher_dim: usize, seed: u64) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Matrix::random_normal(patches.cols(), teacher_dim, 1.0, &mut rng);
    patches.matmul(&w)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct VqkdTerms {
    pub cosine: f64,
    pub codebook: f64,
    pub commitment: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqkdLoss {
    pub loss: f64,
    pub terms: VqkdTerms,
    pub indices: Vec<usize>,
    pub grad_h: Matrix,
    pub grad_o: Matrix,
    pub grad_codebook: Matrix,
    pub grad_projection: Matrix,
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::Undefined("cosine similarity with a zero vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// `(I − n nᵀ) r / ‖x‖`: the Jacobian-transpose of ℓ2 normalization at `x` applied to `r`.
fn normalize_backward(x: &[f64], n: &[f64], r: &[f64]) -> Vec<f64> {
    let nx = norm(x);
    let p = dot(n, r);
    r.iter().zip(n).map(|(ri, ni)| (ri - p * ni) / nx).collect()
}

fn check_rows(m: &Matrix, rows: usize, what: &str) -> Result<()> {
    if m.rows() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            actual: m.rows(),
        });
    }
    ensure_finite(m, what)
}

pub fn vqkd_loss(h: &Matrix, o: &Matrix, t: &Matrix, cb: &Codebook) -> Result<VqkdLoss> {
    let indices = quantize_all(h, cb)?;
    vqkd_loss_with_indices(h, o, t, cb, &indices)
}

/// Loss and gradients with the code assignment held fixed.
pub fn vqkd_loss_with_indices(h: &Matrix, o: &Matrix, t: &Matrix, cb: &Codebook, indices: &[usize]) -> Result<VqkdLoss> {
    let n = h.rows();
    check_rows(h, n, "patch embeddings")?;
    check_rows(o, n, "decoder outputs")?;
    check_rows(t, n, "teacher targets")?;
    if o.cols() != t.cols() {
        return Err(Error::DimensionMismatch {
            expected: t.cols(),
            actual: o.cols(),
        });
    }
    if h.cols() != cb.d_enc() {
        return Err(Error::DimensionMismatch {
            expected: cb.d_enc(),
            actual: h.cols(),
        });
    }
    if indices.len() != n {
        return Err(Error::LengthMismatch {
            left: indices.len(),
            right: n,
        });
    }
    let mut terms = VqkdTerms::default();
    let mut grad_h = Matrix::zeros(n, h.cols());
    let mut grad_o = Matrix::zeros(n, o.cols());
    let mut grad_codebook = Matrix::zeros(cb.size(), cb.code_dim());
    let mut grad_projection = Matrix::zeros(cb.d_enc(), cb.code_dim());
    for i in 0..n {
        let (oi, ti) = (o.row(i), t.row(i));
        let c = cosine(oi, ti)?;
        terms.cosine -= c;
        let (no, nt) = (norm(oi), norm(ti));
        for ((g, &ov), &tv) in grad_o.row_mut(i).iter_mut().zip(oi).zip(ti) {
            *g = -(tv / (no * nt) - c * ov / (no * no));
        }

        let z = indices[i];
        if z >= cb.size() {
            return Err(Error::InvalidInput(format!("code index {z} out of range")));
        }
        let v = cb.vectors.row(z);
        let hh = cb.project(h.row(i))?;
        let nh = l2_normalize(&hh)?;
        let nv = l2_normalize(v)?;
        let diff: Vec<f64> = nh.iter().zip(&nv).map(|(a, b)| a - b).collect();
        let sq = dot(&diff, &diff);
        terms.codebook += sq;
        terms.commitment += sq;

        // term 2: ‖sg[n(ĥ)] − n(v)‖², gradient to v only
        let neg: Vec<f64> = diff.iter().map(|x| -2.0 * x).collect();
        let gv = normalize_backward(v, &nv, &neg);
        for (g, x) in grad_codebook.row_mut(z).iter_mut().zip(&gv) {
            *g += x;
        }

        // term 3: ‖n(ĥ) − sg[n(v)]‖², gradient to ĥ, then to h and P
        let pos: Vec<f64> = diff.iter().map(|x| 2.0 * x).collect();
        let ghat = normalize_backward(&hh, &nh, &pos);
        let gh = cb.projection.mul_vec(&ghat)?;
        grad_h.row_mut(i).copy_from_slice(&gh);
        for (j, &hj) in h.row(i).iter().enumerate() {
            for (g, &gk) in grad_projection.row_mut(j).iter_mut().zip(&ghat) {
                *g += hj * gk;
            }
        }
    }
    Ok(VqkdLoss {
        loss: terms.cosine + terms.codebook + terms.commitment,
        terms,
        indices: indices.to_vec(),
        grad_h,
        grad_o,
        grad_codebook,
        grad_projection,
    })
}

/// The loss as a function of live and frozen copies: `h_live`/`p_live` feed
/// term 3 and `v_live` feeds term 2, while the frozen copies stand in for the
/// stop-gradient operands. Used by the finite-difference oracle.
pub fn vqkd_objective_sg(
    h_live: &Matrix,
    p_live: &Matrix,
    v_live: &Matrix,
    o: &Matrix,
    t: &Matrix,
    h_frozen: &Matrix,
    p_frozen: &Matrix,
    v_frozen: &Matrix,
    indices: &[usize],
) -> Result<VqkdTerms> {
    let mut terms = VqkdTerms::default();
    for (i, &z) in indices.iter().enumerate() {
        terms.cosine -= cosine(o.row(i), t.row(i))?;
        let nh_frozen = l2_normalize(&p_frozen.vec_mul(h_frozen.row(i))?)?;
        let nv_live = l2_normalize(v_live.row(z))?;
        terms.codebook += nh_frozen.iter().zip(&nv_live).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let nh_live = l2_normalize(&p_live.vec_mul(h_live.row(i))?)?;
        let nv_frozen = l2_normalize(v_frozen.row(z))?;
        terms.commitment += nh_live.iter().zip(&nv_frozen).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(terms)
}
