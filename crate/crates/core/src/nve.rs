//! Normal-variation erasing: residuals against the nearest normal patch,
//! local PCA over the top-k normal neighbours, and suppression of the
//! residual component that lies in that local subspace.
//!
//! The same path is applied to abnormal reference patches during training
//! and to query patches at scoring time. Nothing here is differentiated;
//! outputs are constants for the deviation encoder.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, symmetric_eigen};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NveError {
    #[error("normal reference pool is empty")]
    EmptyPool,
    #[error("k={k} exceeds the normal pool of {pool} patches")]
    Capacity { k: usize, pool: usize },
    #[error("rank r={r} must satisfy r < min(k-1, C) with k={k}, C={c}")]
    InvalidRank { r: usize, k: usize, c: usize },
    #[error("channel mismatch: {0} vs {1}")]
    Channels(usize, usize),
    #[error("alpha {0} outside [0, 1]")]
    Alpha(f64),
}

pub type Result<T> = std::result::Result<T, NveError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NveConfig {
    /// Normal neighbours used for the local subspace.
    pub k: usize,
    /// Retained principal components.
    pub rank: usize,
    /// Elimination strength.
    pub alpha: f64,
    /// When false, denoised deviations are the raw residuals.
    pub enabled: bool,
}

impl Default for NveConfig {
    fn default() -> Self {
        Self {
            k: 12,
            rank: 4,
            alpha: 0.8,
            enabled: true,
        }
    }
}

impl NveConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(NveError::Alpha(self.alpha));
        }
        if self.enabled {
            check_rank(self.k, self.rank, channels)?;
        }
        Ok(())
    }
}

fn check_rank(k: usize, r: usize, c: usize) -> Result<()> {
    if k < 2 || r >= (k - 1).min(c) && r > 0 {
        return Err(NveError::InvalidRank { r, k, c });
    }
    Ok(())
}

/// Normal reference patches with cached squared norms.
#[derive(Clone, Debug)]
pub struct NormalPool {
    features: Tensor<f32>,
    sq_norms: Vec<f64>,
}

impl NormalPool {
    pub fn new(features: Tensor<f32>) -> Result<Self> {
        if features.is_empty() {
            return Err(NveError::EmptyPool);
        }
        let sq_norms = (0..features.rows())
            .map(|i| features.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>())
            .collect();
        Ok(Self { features, sq_norms })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor<f32> {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.features.row(i)
    }

    fn distance(&self, f: &[f32], f_sq: f64, i: usize) -> f64 {
        let ni = self.sq_norms[i];
        if f_sq.sqrt() < 1e-12 || ni.sqrt() < 1e-12 {
            return 1.0;
        }
        let d: f64 = f.iter().zip(self.row(i)).map(|(&a, &b)| a as f64 * b as f64).sum();
        1.0 - (d / (f_sq * ni).sqrt()).clamp(-1.0, 1.0)
    }

    fn distances(&self, f: &[f32]) -> Vec<f64> {
        let sq = f.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        (0..self.len()).map(|i| self.distance(f, sq, i)).collect()
    }

    /// Index and cosine distance of the closest normal patch; ties go to the
    /// lowest index.
    pub fn nearest(&self, f: &[f32]) -> Result<(usize, f64)> {
        if f.len() != self.channels() {
            return Err(NveError::Channels(f.len(), self.channels()));
        }
        let d = self.distances(f);
        let mut best = 0;
        for (i, &v) in d.iter().enumerate().skip(1) {
            if v < d[best] {
                best = i;
            }
        }
        Ok((best, d[best]))
    }

    /// The `k` closest normal patches, ascending by distance then index.
    pub fn top_k(&self, f: &[f32], k: usize) -> Result<Vec<usize>> {
        if f.len() != self.channels() {
            return Err(NveError::Channels(f.len(), self.channels()));
        }
        if k > self.len() {
            return Err(NveError::Capacity {
                k,
                pool: self.len(),
            });
        }
        Ok(smallest_k(&self.distances(f), k))
    }
}

fn smallest_k(d: &[f64], k: usize) -> Vec<usize> {
    let cmp = |&i: &usize, &j: &usize| d[i].total_cmp(&d[j]).then(i.cmp(&j));
    let mut idx: Vec<usize> = (0..d.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

/// Local normal-variation subspace around one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalSubspace {
    pub mean: Vec<f64>,
    /// `r` orthonormal `C`-vectors, descending eigenvalue.
    pub basis: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Leading columns backed by observed variance; only these project.
    pub effective_rank: usize,
}

impl LocalSubspace {
    pub fn is_degenerate(&self) -> bool {
        self.effective_rank < self.basis.len()
    }

    /// `U_eff U_effᵀ v` over the effective columns.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for u in &self.basis[..self.effective_rank] {
            let c = linalg::dot(u, v);
            for (o, &x) in out.iter_mut().zip(u) {
                *o += c * x;
            }
        }
        out
    }
}

/// PCA of `k` neighbour rows through the `k × k` Gram matrix of the centered
/// data (same non-zero spectrum as the `C × C` covariance, divisor `k-1`).
pub fn local_pca(neighbors: &[&[f32]], r: usize) -> Result<LocalSubspace> {
    let k = neighbors.len();
    let c = neighbors.first().map_or(0, |n| n.len());
    check_rank(k, r, c)?;

    let mut mean = vec![0.0f64; c];
    for n in neighbors {
        for (m, &v) in mean.iter_mut().zip(*n) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);
    let centered: Vec<Vec<f64>> = neighbors
        .iter()
        .map(|n| n.iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect())
        .collect();

    let denom = (k - 1) as f64;
    let mut gram = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let g = linalg::dot(&centered[i], &centered[j]) / denom;
            gram[i * k + j] = g;
            gram[j * k + i] = g;
        }
    }
    let trace: f64 = (0..k).map(|i| gram[i * k + i]).sum();
    let (values, vectors) = symmetric_eigen(&gram, k);
    let cutoff = 1e-10 * trace;

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut eigenvalues = Vec::with_capacity(r);
    let mut data_dirs: Vec<Vec<f64>> = Vec::new();
    for (j, (&lambda, w)) in values.iter().zip(&vectors).enumerate() {
        if lambda <= cutoff || lambda <= 0.0 {
            break;
        }
        let mut u = vec![0.0; c];
        for (row, &wi) in centered.iter().zip(w) {
            for (x, &v) in u.iter_mut().zip(row) {
                *x += wi * v;
            }
        }
        let Some(mut u) = linalg::orthogonalize(&u, &data_dirs) else {
            break;
        };
        linalg::fix_sign(&mut u);
        data_dirs.push(u.clone());
        if j < r {
            basis.push(u);
            eigenvalues.push(lambda);
        }
    }
    let effective_rank = basis.len();
    // pad with directions orthogonal to everything the data spans
    let mut e = 0;
    while basis.len() < r && e < c {
        let mut unit = vec![0.0; c];
        unit[e] = 1.0;
        e += 1;
        let avoid: Vec<Vec<f64>> = basis.iter().chain(&data_dirs[effective_rank..]).cloned().collect();
        if let Some(mut u) = linalg::orthogonalize(&unit, &avoid) {
            linalg::fix_sign(&mut u);
            basis.push(u);
            eigenvalues.push(0.0);
        }
    }
    e = 0;
    while basis.len() < r && e < c {
        let mut unit = vec![0.0; c];
        unit[e] = 1.0;
        e += 1;
        if let Some(u) = linalg::orthogonalize(&unit, &basis) {
            basis.push(u);
            eigenvalues.push(0.0);
        }
    }
    Ok(LocalSubspace {
        mean,
        basis,
        eigenvalues,
        effective_rank,
    })
}

/// Residuals and denoised deviations for a block of patches.
#[derive(Clone, Debug)]
pub struct DeviationField {
    pub residuals: Tensor<f32>,
    pub denoised: Tensor<f32>,
    pub nearest_idx: Vec<usize>,
    /// Cosine distance from each patch to its nearest normal.
    pub nearest_dist: Vec<f64>,
    /// Empty when denoising is disabled.
    pub subspaces: Vec<LocalSubspace>,
}

impl DeviationField {
    pub fn degenerate_count(&self) -> usize {
        self.subspaces.iter().filter(|s| s.is_degenerate()).count()
    }
}

/// `f_res = f - nearest_normal(f)` for every row.
pub fn residual_deviations(patches: &Tensor<f32>, pool: &NormalPool) -> Result<Tensor<f32>> {
    let mut out = Vec::with_capacity(patches.len());
    for i in 0..patches.rows() {
        let f = patches.row(i);
        let (j, _) = pool.nearest(f)?;
        out.extend(f.iter().zip(pool.row(j)).map(|(&a, &b)| a - b));
    }
    Ok(Tensor::matrix(patches.rows(), patches.cols(), out).expect("same shape as input"))
}

/// `f_den = f_res - α·U Uᵀ f_res` row by row.
pub fn denoise(residuals: &Tensor<f32>, subspaces: &[LocalSubspace], alpha: f64) -> Tensor<f32> {
    let mut out = residuals.clone();
    for (i, s) in subspaces.iter().enumerate() {
        let r: Vec<f64> = residuals.row(i).iter().map(|&v| v as f64).collect();
        let p = s.project(&r);
        for (o, (x, y)) in out.row_mut(i).iter_mut().zip(r.iter().zip(&p)) {
            *o = (x - alpha * y) as f32;
        }
    }
    out
}

struct PatchDeviation {
    residual: Vec<f32>,
    denoised: Vec<f32>,
    nearest: usize,
    dist: f64,
    subspace: Option<LocalSubspace>,
}

fn patch_deviation(f: &[f32], pool: &NormalPool, cfg: &NveConfig) -> Result<PatchDeviation> {
    let (nearest, dist) = pool.nearest(f)?;
    let res64: Vec<f64> = f
        .iter()
        .zip(pool.row(nearest))
        .map(|(&a, &b)| a as f64 - b as f64)
        .collect();
    let residual: Vec<f32> = res64.iter().map(|&v| v as f32).collect();
    if !cfg.enabled || cfg.alpha == 0.0 && cfg.rank == 0 {
        return Ok(PatchDeviation {
            denoised: residual.clone(),
            residual,
            nearest,
            dist,
            subspace: None,
        });
    }
    let neighbours = pool.top_k(f, cfg.k)?;
    let rows: Vec<&[f32]> = neighbours.iter().map(|&j| pool.row(j)).collect();
    let sub = local_pca(&rows, cfg.rank)?;
    let p = sub.project(&res64);
    let denoised = res64
        .iter()
        .zip(&p)
        .map(|(x, y)| (x - cfg.alpha * y) as f32)
        .collect();
    Ok(PatchDeviation {
        residual,
        denoised,
        nearest,
        dist,
        subspace: Some(sub),
    })
}

/// Nearest normal, top-k neighbours, local PCA, residual and denoising for
/// every row of `patches`. Rows are processed in parallel; output order
/// follows input order.
pub fn deviation_field(
    patches: &Tensor<f32>,
    pool: &NormalPool,
    cfg: &NveConfig,
) -> Result<DeviationField> {
    let c = pool.channels();
    if patches.cols() != c {
        return Err(NveError::Channels(patches.cols(), c));
    }
    cfg.validate(c)?;
    if cfg.enabled && cfg.k > pool.len() {
        return Err(NveError::Capacity {
            k: cfg.k,
            pool: pool.len(),
        });
    }
    let per_patch: Vec<PatchDeviation> = (0..patches.rows())
        .into_par_iter()
        .map(|i| patch_deviation(patches.row(i), pool, cfg))
        .collect::<Result<_>>()?;

    let n = patches.rows();
    let mut residuals = Vec::with_capacity(n * c);
    let mut denoised = Vec::with_capacity(n * c);
    let mut nearest_idx = Vec::with_capacity(n);
    let mut nearest_dist = Vec::with_capacity(n);
    let mut subspaces = Vec::new();
    for p in per_patch {
        residuals.extend_from_slice(&p.residual);
        denoised.extend_from_slice(&p.denoised);
        nearest_idx.push(p.nearest);
        nearest_dist.push(p.dist);
        subspaces.extend(p.subspace);
    }
    Ok(DeviationField {
        residuals: Tensor::matrix(n, c, residuals).expect("n×c"),
        denoised: Tensor::matrix(n, c, denoised).expect("n×c"),
        nearest_idx,
        nearest_dist,
        subspaces,
    })
}
