//! Synthetic feature worlds with known structure: a per-cell base pattern,
//! Gaussian variation inside a nuisance subspace, and anomalies shifted
//! along planted deviation directions. Used to test the learning claims at
//! small scale, together with the brute-force references in [`oracle`].

pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, FeatureSet, Label};
use crate::linalg::{self, symmetric_eigen};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world spec: {0}")]
    Spec(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthWorldSpec {
    pub channels: usize,
    /// Patch grid side; each image has `grid²` patches.
    pub grid: usize,
    pub normal_images: usize,
    pub abnormal_images: usize,
    pub nuisance_dim: usize,
    /// Per-axis standard deviation inside the nuisance subspace.
    pub nuisance_amplitude: f64,
    /// Number of planted deviation directions.
    pub directions: usize,
    /// Length of the shift applied to anomalous patches.
    pub offset: f64,
    /// Share of an abnormal image's patches that are shifted.
    pub anomaly_fraction: f64,
    /// Norm of the shared base pattern.
    pub base_norm: f64,
    /// Expected norm of the per-cell perturbation of the base.
    pub cell_jitter: f64,
    /// Expected norm of the isotropic per-patch noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthWorldSpec {
    fn default() -> Self {
        Self {
            channels: 64,
            grid: 8,
            normal_images: 200,
            abnormal_images: 60,
            nuisance_dim: 4,
            nuisance_amplitude: 1.0,
            directions: 3,
            offset: 1.0,
            anomaly_fraction: 0.12,
            base_norm: 1.0,
            cell_jitter: 0.3,
            noise: 0.5,
            seed: 0,
        }
    }
}

impl SynthWorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.grid == 0 || self.channels == 0 {
            return bad("grid and channels must be positive".into());
        }
        if self.directions == 0 {
            return bad("need at least one deviation direction".into());
        }
        if self.directions + self.nuisance_dim >= self.channels {
            return bad(format!(
                "D={} plus nuisance dim {} must stay below C={}",
                self.directions, self.nuisance_dim, self.channels
            ));
        }
        if !(self.anomaly_fraction > 0.0 && self.anomaly_fraction <= 1.0) {
            return bad(format!("anomaly fraction {} outside (0, 1]", self.anomaly_fraction));
        }
        let scales = [
            self.nuisance_amplitude,
            self.offset,
            self.base_norm,
            self.cell_jitter,
            self.noise,
        ];
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("scales must be finite and non-negative".into());
        }
        if self.base_norm == 0.0 && self.cell_jitter == 0.0 {
            return bad("base pattern would be zero".into());
        }
        Ok(())
    }

    /// Parses and validates; omitted keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| SynthError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    /// Shifted patches per abnormal image.
    pub fn anomalous_patches(&self) -> usize {
        ((self.anomaly_fraction * self.patches() as f64).round() as usize).clamp(1, self.patches())
    }
}

/// A generated world. `train` and `test` share geometry but are drawn
/// independently.
#[derive(Clone, Debug)]
pub struct World {
    pub train: FeatureSet,
    pub test: FeatureSet,
    /// Planted deviation directions, orthonormal.
    pub directions: Vec<Vec<f64>>,
    /// Orthonormal basis of the nuisance subspace.
    pub nuisance: Vec<Vec<f64>>,
    /// Base pattern per grid cell.
    pub base: Vec<Vec<f64>>,
}

/// Anomaly-type tag for direction `d`.
pub fn direction_tag(d: usize) -> String {
    format!("dir{d}")
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn generate_world(spec: &SynthWorldSpec) -> Result<World> {
    spec.validate()?;
    let c = spec.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut frame: Vec<Vec<f64>> = Vec::new();
    while frame.len() < spec.directions + spec.nuisance_dim {
        if let Some(u) = linalg::orthogonalize(&gaussian(&mut rng, c), &frame) {
            frame.push(u);
        }
    }
    let directions = frame[..spec.directions].to_vec();
    let nuisance = frame[spec.directions..].to_vec();

    // The base lives in the complement of both subspaces.
    let complement = |v: Vec<f64>| -> Vec<f64> {
        let mut w = v;
        for u in &frame {
            let p = linalg::dot(&w, u);
            w.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
        }
        w
    };
    let b0 = complement(gaussian(&mut rng, c));
    let n0 = linalg::norm(&b0).max(f64::MIN_POSITIVE);
    let root_c = (c as f64).sqrt();
    let base: Vec<Vec<f64>> = (0..spec.patches())
        .map(|_| {
            let jitter = complement(gaussian(&mut rng, c));
            b0.iter()
                .zip(&jitter)
                .map(|(b, j)| spec.base_norm * b / n0 + spec.cell_jitter * j / root_c)
                .collect()
        })
        .collect();

    let mut world = World {
        train: FeatureSet::new(spec.patches(), c)?,
        test: FeatureSet::new(spec.patches(), c)?,
        directions,
        nuisance,
        base,
    };
    for split in 0..2u64 {
        let images: Vec<(Label, String, Vec<bool>, Vec<f32>)> = (0..spec.normal_images + spec.abnormal_images)
            .into_par_iter()
            .map(|i| draw_image(spec, &world, split, i))
            .collect();
        let set = if split == 0 { &mut world.train } else { &mut world.test };
        for (label, tag, mask, feats) in images {
            set.push_image(label, &tag, mask, &feats)?;
        }
    }
    Ok(world)
}

fn draw_image(spec: &SynthWorldSpec, world: &World, split: u64, i: usize) -> (Label, String, Vec<bool>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1 + (split << 32) + i as u64);
    let c = spec.channels;
    let g = spec.grid;
    let root_c = (c as f64).sqrt();
    let mut feats = Vec::with_capacity(spec.patches() * c);
    for base in &world.base {
        let mut f = base.clone();
        for u in &world.nuisance {
            let z = spec.nuisance_amplitude * rng.sample::<f64, _>(StandardNormal);
            f.iter_mut().zip(u).for_each(|(x, y)| *x += z * y);
        }
        for x in f.iter_mut() {
            *x += spec.noise * rng.sample::<f64, _>(StandardNormal) / root_c;
        }
        feats.extend(f);
    }
    let mut mask = vec![false; spec.patches()];
    if i < spec.normal_images {
        return (Label::Normal, String::new(), mask, feats.into_iter().map(|v| v as f32).collect());
    }
    let ty = (i - spec.normal_images) % spec.directions;
    let k = spec.anomalous_patches();
    let side = ((k as f64).sqrt().ceil() as usize).min(g);
    let y0 = rng.random_range(0..=g - side);
    let x0 = rng.random_range(0..=g - side);
    let cells = (0..side).flat_map(|a| (0..side).map(move |b| (y0 + a) * g + x0 + b));
    let cells: Vec<usize> = cells.chain(0..spec.patches()).take(k).collect();
    for p in cells {
        mask[p] = true;
        let row = &mut feats[p * c..(p + 1) * c];
        row.iter_mut()
            .zip(&world.directions[ty])
            .for_each(|(x, d)| *x += spec.offset * d);
    }
    (
        Label::Abnormal,
        direction_tag(ty),
        mask,
        feats.into_iter().map(|v| v as f32).collect(),
    )
}

/// Checks that rows of `a` are orthonormal within `tol`.
pub fn check_orthonormal(a: &[Vec<f64>], tol: f64) -> Result<()> {
    for (i, u) in a.iter().enumerate() {
        for (j, v) in a.iter().enumerate().skip(i) {
            let want = if i == j { 1.0 } else { 0.0 };
            let got = linalg::dot(u, v);
            if (got - want).abs() > tol {
                return Err(SynthError::Contract(format!(
                    "basis vectors {i} and {j} have inner product {got}"
                )));
            }
        }
    }
    Ok(())
}

/// Principal angles (radians, ascending) between the spans of two
/// orthonormal row sets of equal width.
pub fn principal_angles(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_orthonormal(a, 1e-5)?;
    check_orthonormal(b, 1e-5)?;
    let c = a.first().or(b.first()).map_or(0, Vec::len);
    if a.iter().chain(b).any(|v| v.len() != c) {
        return Err(SynthError::Contract("bases have different widths".into()));
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let p = small.len();
    // Singular values of the cross-product come from its p×p Gram matrix.
    let cross: Vec<Vec<f64>> = small
        .iter()
        .map(|u| large.iter().map(|v| linalg::dot(u, v)).collect())
        .collect();
    let mut gram = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            gram[i * p + j] = linalg::dot(&cross[i], &cross[j]);
        }
    }
    let (values, _) = symmetric_eigen(&gram, p);
    Ok(values
        .iter()
        .map(|&s2| s2.max(0.0).sqrt().min(1.0).acos())
        .collect())
}
