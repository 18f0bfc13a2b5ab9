//! Frame similarity: per-token best-match cosine heatmaps, motion scores,
//! and Frechet feature-distance fidelity scores driving keyframe selection.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("feature dims differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("heatmap is empty")]
    EmptyHeatmap,
    #[error("need at least 2 tokens to fit statistics, got {0}")]
    TooFewTokens(usize),
    #[error("eigendecomposition did not converge")]
    EigenFailure,
    #[error("token {0} is all-zero")]
    ZeroToken(usize),
    #[error("invalid feature map shape: {0}")]
    BadShape(String),
}

/// One frame's feature tokens, row-major P x d. Zero token vectors are
/// rejected at construction since cosine similarity is undefined for them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    dim: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<FeatureMap, SimilarityError> {
        if dim == 0 || values.is_empty() || values.len() % dim != 0 {
            return Err(SimilarityError::BadShape(format!(
                "{} values for dim {dim}",
                values.len()
            )));
        }
        for (p, tok) in values.chunks_exact(dim).enumerate() {
            if tok.iter().all(|&v| v == 0.0) {
                return Err(SimilarityError::ZeroToken(p));
            }
        }
        Ok(FeatureMap { dim, values })
    }

    pub fn tokens(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token(&self, p: usize) -> &[f64] {
        &self.values[p * self.dim..(p + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Elementwise linear blend (1-w)*a + w*b of two maps of equal shape.
    pub fn lerp(a: &FeatureMap, b: &FeatureMap, w: f64) -> Result<FeatureMap, SimilarityError> {
        if a.dim != b.dim {
            return Err(SimilarityError::DimMismatch(a.dim, b.dim));
        }
        if a.tokens() != b.tokens() {
            return Err(SimilarityError::BadShape(format!(
                "token counts differ: {} vs {}",
                a.tokens(),
                b.tokens()
            )));
        }
        let values = a
            .values
            .iter()
            .zip(b.values.iter())
            .map(|(&x, &y)| (1.0 - w) * x + w * y)
            .collect();
        FeatureMap::new(a.dim, values)
    }
}

/// Load a [T, P, d] feature sequence tensor into per-frame maps.
pub fn feature_sequence_from_tensor(t: &Tensor) -> Result<Vec<FeatureMap>, SimilarityError> {
    if t.dims.len() != 3 {
        return Err(SimilarityError::BadShape(format!(
            "expected [T,P,d], got {:?}",
            t.dims
        )));
    }
    let (n, p, d) = (t.dims[0], t.dims[1], t.dims[2]);
    (0..n)
        .map(|i| {
            let chunk = &t.data[i * p * d..(i + 1) * p * d];
            FeatureMap::new(d, chunk.iter().map(|&v| v as f64).collect())
        })
        .collect()
}

pub fn feature_sequence_to_tensor(maps: &[FeatureMap]) -> Result<Tensor, SimilarityError> {
    let (p, d) = (maps[0].tokens(), maps[0].dim());
    let mut data = Vec::with_capacity(maps.len() * p * d);
    for m in maps {
        if m.tokens() != p || m.dim() != d {
            return Err(SimilarityError::BadShape("feature map shapes differ".into()));
        }
        data.extend(m.values.iter().map(|&v| v as f32));
    }
    Tensor::new(vec![maps.len(), p, d], data).map_err(|e| SimilarityError::BadShape(e.to_string()))
}

/// Per-source-token best-match cosine similarities, each in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Vec<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// For every token p of `fi`, the maximum cosine similarity against any
/// token of `fj`. Ties in the argmax go to the lowest index (the value is
/// unaffected).
pub fn dift_heatmap(fi: &FeatureMap, fj: &FeatureMap) -> Result<Heatmap, SimilarityError> {
    if fi.dim() != fj.dim() {
        return Err(SimilarityError::DimMismatch(fi.dim(), fj.dim()));
    }
    let values = (0..fi.tokens())
        .into_par_iter()
        .map(|p| {
            let tok = fi.token(p);
            let mut best = f64::NEG_INFINITY;
            for q in 0..fj.tokens() {
                let c = cosine(tok, fj.token(q));
                if c > best {
                    best = c;
                }
            }
            best
        })
        .collect();
    Ok(Heatmap { values })
}

/// Arithmetic mean of heatmap values. A frame pair is a keyframe candidate
/// when this falls below the segmentation threshold.
pub fn motion_score(h: &Heatmap) -> Result<f64, SimilarityError> {
    if h.values.is_empty() {
        return Err(SimilarityError::EmptyHeatmap);
    }
    Ok(h.values.iter().sum::<f64>() / h.values.len() as f64)
}

/// Gaussian fit of a token population: mean and unbiased covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major d x d, symmetrized as (S + S^T)/2.
    pub covariance: Vec<f64>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Fit token statistics over one or more maps sharing a dim.
pub fn fit_stats(maps: &[&FeatureMap]) -> Result<FeatureStats, SimilarityError> {
    let dim = maps.first().map(|m| m.dim()).unwrap_or(0);
    if dim == 0 {
        return Err(SimilarityError::TooFewTokens(0));
    }
    for m in maps {
        if m.dim() != dim {
            return Err(SimilarityError::DimMismatch(dim, m.dim()));
        }
    }
    let mut tokens = Vec::new();
    for m in maps {
        tokens.extend_from_slice(&m.values);
    }
    fit_stats_tokens(dim, &tokens)
}

/// Fit statistics over a raw row-major token array. Unlike [`FeatureMap`],
/// zero token vectors are fine here: only cosine similarity forbids them.
pub fn fit_stats_tokens(dim: usize, tokens: &[f64]) -> Result<FeatureStats, SimilarityError> {
    if dim == 0 || tokens.len() % dim != 0 {
        return Err(SimilarityError::BadShape(format!(
            "{} values for dim {dim}",
            tokens.len()
        )));
    }
    let n = tokens.len() / dim;
    if n < 2 {
        return Err(SimilarityError::TooFewTokens(n));
    }
    let mut mean = vec![0.0; dim];
    for tok in tokens.chunks_exact(dim) {
        for (s, &v) in mean.iter_mut().zip(tok) {
            *s += v;
        }
    }
    for s in &mut mean {
        *s /= n as f64;
    }
    let mut cov = vec![0.0; dim * dim];
    for tok in tokens.chunks_exact(dim) {
        for i in 0..dim {
            let di = tok[i] - mean[i];
            for j in 0..dim {
                cov[i * dim + j] += di * (tok[j] - mean[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for v in &mut cov {
        *v /= denom;
    }
    // Symmetrize to wash out accumulation-order asymmetry.
    for i in 0..dim {
        for j in (i + 1)..dim {
            let s = 0.5 * (cov[i * dim + j] + cov[j * dim + i]);
            cov[i * dim + j] = s;
            cov[j * dim + i] = s;
        }
    }
    Ok(FeatureStats { mean, covariance: cov })
}

const EIGEN_EPS: f64 = 1e-12;
const EIGEN_MAX_ITERS: usize = 1000;

/// Symmetric PSD square root via eigendecomposition, negative eigenvalues
/// clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>, SimilarityError> {
    let sym = (m + m.transpose()).scale(0.5);
    let eig = nalgebra::SymmetricEigen::try_new(sym, EIGEN_EPS, EIGEN_MAX_ITERS)
        .ok_or(SimilarityError::EigenFailure)?;
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose())
}

/// Squared Frechet distance between Gaussian fits:
/// d2 = |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)),
/// with the cross term computed as Tr((Sa^(1/2) Sb Sa^(1/2))^(1/2)).
/// The result is clamped to be non-negative.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64, SimilarityError> {
    if a.dim() != b.dim() {
        return Err(SimilarityError::DimMismatch(a.dim(), b.dim()));
    }
    let d = a.dim();
    let sa = DMatrix::from_row_slice(d, d, &a.covariance);
    let sb = DMatrix::from_row_slice(d, d, &b.covariance);
    let sa_sqrt = psd_sqrt(&sa)?;
    let inner = &sa_sqrt * &sb * &sa_sqrt;
    let cross = psd_sqrt(&inner)?;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    let d2 = mean_term + sa.trace() + sb.trace() - 2.0 * cross.trace();
    Ok(d2.max(0.0))
}

/// Sum of Frechet distances from a frame's token statistics to the two
/// input-state statistics. Lower means more faithful to the inputs.
pub fn fidelity_score(
    frame: &FeatureMap,
    start: &FeatureMap,
    end: &FeatureMap,
) -> Result<f64, SimilarityError> {
    let sf = fit_stats(&[frame])?;
    let ss = fit_stats(&[start])?;
    let se = fit_stats(&[end])?;
    Ok(frechet_distance(&sf, &ss)? + frechet_distance(&sf, &se)?)
}
