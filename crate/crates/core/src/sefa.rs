//! Closed-form edit directions for the latent 1×1 layer.
//!
//! The directions are the right singular vectors of the latent matrix `W`
//! (equivalently the eigenvectors of `WᵀW`), computed with a one-sided
//! Jacobi sweep. An edit adds `m·Σ ηᵢηᵢᵀ` over a contiguous index range.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::netcore::{Direction, Generated, Generator};
use crate::tensor::{Real, Tensor};

pub const BASIS_SIZE: usize = 16;
const MAX_SWEEPS: usize = 80;

/// Leading singular directions of one generator's latent matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eigenbasis {
    pub direction: Direction,
    pub channels: usize,
    /// Unit vectors of length `channels`, strongest first.
    pub vectors: Vec<Vec<f64>>,
    /// Singular values, non-increasing, aligned with `vectors`.
    pub sigmas: Vec<f64>,
    /// Set when the layer has fewer than [`BASIS_SIZE`] channels.
    pub truncated: bool,
    pub fingerprint: String,
}

impl Eigenbasis {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// `Σ_{i=j..k} ηᵢηᵢᵀ`, row-major, with 1-based inclusive bounds.
    pub fn projector(&self, j: usize, k: usize) -> Result<Vec<f64>> {
        check_range(j, k, self.len())?;
        let c = self.channels;
        let mut p = vec![0.0; c * c];
        for eta in &self.vectors[j - 1..k] {
            for r in 0..c {
                for col in 0..c {
                    p[r * c + col] += eta[r] * eta[col];
                }
            }
        }
        Ok(p)
    }
}

/// Hex sha256 over the little-endian bytes of a row-major matrix.
pub fn fingerprint(w: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in w {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Right singular vectors of a `c×c` row-major matrix, sorted by singular
/// value, each signed so its first non-negligible entry is positive.
pub fn extract_basis(w: &[f64], c: usize, direction: Direction) -> Result<Eigenbasis> {
    if c == 0 || w.len() != c * c {
        return Err(Error::Shape(format!("latent matrix must be {c}×{c}, got {} values", w.len())));
    }
    if !w.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("latent matrix has non-finite entries".into()));
    }
    // Columns of U = W·V, stored column-major so rotations touch contiguous memory.
    let mut u: Vec<Vec<f64>> = (0..c).map(|j| (0..c).map(|i| w[i * c + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..c).map(|j| (0..c).map(|i| f64::from(u8::from(i == j))).collect()).collect();
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..c {
            for q in p + 1..c {
                let alpha: f64 = u[p].iter().map(|x| x * x).sum();
                let beta: f64 = u[q].iter().map(|x| x * x).sum();
                let gamma: f64 = u[p].iter().zip(&u[q]).map(|(a, b)| a * b).sum();
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for m in [&mut u, &mut v] {
                    let (lo, hi) = m.split_at_mut(q);
                    for (a, b) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                        let (x, y) = (*a, *b);
                        *a = cs * x - sn * y;
                        *b = sn * x + cs * y;
                    }
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!("Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")));
    }
    let sig: Vec<f64> = u.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| sig[b].total_cmp(&sig[a]).then(a.cmp(&b)));
    let keep = c.min(BASIS_SIZE);
    let mut vectors = Vec::with_capacity(keep);
    let mut sigmas = Vec::with_capacity(keep);
    for &i in &order[..keep] {
        let mut eta = v[i].clone();
        let norm = eta.iter().map(|x| x * x).sum::<f64>().sqrt();
        let tiny = 1e-12 * eta.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if let Some(first) = eta.iter().find(|x| x.abs() > tiny) {
            let s = first.signum() / norm;
            eta.iter_mut().for_each(|x| *x *= s);
        }
        vectors.push(eta);
        sigmas.push(sig[i]);
    }
    Ok(Eigenbasis {
        direction,
        channels: c,
        vectors,
        sigmas,
        truncated: c < BASIS_SIZE,
        fingerprint: fingerprint(w),
    })
}

/// Basis of a generator's current latent matrix.
pub fn generator_basis<T: Real>(g: &Generator<T>) -> Result<Eigenbasis> {
    extract_basis(&g.latent_matrix(), g.config().latent(), g.direction())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditParams {
    pub direction: Direction,
    /// First basis index, 1-based.
    pub j: usize,
    /// Last basis index, inclusive.
    pub k: usize,
    pub m: f64,
}

fn check_range(j: usize, k: usize, len: usize) -> Result<()> {
    if j < 1 || j > k || k > len {
        return Err(Error::Validation(format!("edit range {j}..{k} must satisfy 1 ≤ j ≤ k ≤ {len}")));
    }
    Ok(())
}

impl EditParams {
    pub fn validate(&self, basis_len: usize) -> Result<()> {
        check_range(self.j, self.k, basis_len)?;
        if !self.m.is_finite() {
            return Err(Error::Validation(format!("edit magnitude must be finite, got {}", self.m)));
        }
        Ok(())
    }
}

fn check_basis(w: &[f64], basis: &Eigenbasis, params: &EditParams) -> Result<()> {
    if params.direction != basis.direction {
        return Err(Error::Validation(format!(
            "edit targets {} but the basis belongs to {}",
            params.direction, basis.direction
        )));
    }
    params.validate(basis.len())?;
    let found = fingerprint(w);
    if found != basis.fingerprint {
        return Err(Error::StaleBasis {
            expected: basis.fingerprint.clone(),
            found,
        });
    }
    Ok(())
}

/// `W + m·P(j, k)` for a row-major `W`. With `m = 0` the input comes back
/// unchanged, bit for bit.
pub fn compose_weights(w: &[f64], basis: &Eigenbasis, params: &EditParams) -> Result<Vec<f64>> {
    check_basis(w, basis, params)?;
    if params.m == 0.0 {
        return Ok(w.to_vec());
    }
    let p = basis.projector(params.j, params.k)?;
    Ok(w.iter().zip(&p).map(|(a, b)| a + params.m * b).collect())
}

/// The edited latent weight in the generator's own precision and layout,
/// or `None` when the edit is a no-op (`m = 0`).
pub fn edited_latent<T: Real>(g: &Generator<T>, basis: &Eigenbasis, params: &EditParams) -> Result<Option<Tensor<T>>> {
    if params.direction != g.direction() {
        return Err(Error::Validation(format!(
            "edit targets {} but the generator is {}",
            params.direction,
            g.direction()
        )));
    }
    let w = g.latent_matrix();
    let edited = compose_weights(&w, basis, params)?;
    if params.m == 0.0 {
        return Ok(None);
    }
    let shape = g.latent_weight().shape().to_vec();
    Tensor::from_vec(&shape, edited.into_iter().map(T::lit).collect()).map(Some)
}

/// Forward pass with the edited latent layer; the stored weights are untouched.
pub fn edited_generate<T: Real>(
    g: &Generator<T>,
    basis: &Eigenbasis,
    params: &EditParams,
    image: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<Generated<T>> {
    let w = edited_latent(g, basis, params)?;
    g.generate(image, mask, w.as_ref())
}
