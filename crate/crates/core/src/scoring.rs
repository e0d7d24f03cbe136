//! Projection scoring of query deviations onto the intrinsic deviation
//! vectors, the normal-matching complement, image-level aggregation and
//! pixel upsampling.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::ReferenceSet;
use crate::ide::{self, EncoderInput, IdeConfig, IdeError, IdeParams, Mode};
use crate::nve::{self, NormalPool, NveConfig, NveError};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Nve(#[from] NveError),
    #[error(transparent)]
    Ide(#[from] IdeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("score map format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ScoreError>;

/// Which pipeline components take part in scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Denoised deviations projected onto the encoder output.
    #[default]
    Full,
    /// Encoder on raw residuals, no denoising.
    IdeOnly,
    /// Denoised deviations matched against masked abnormal references.
    NveOnly,
    /// Raw features matched against masked abnormal references.
    MatchingOnly,
}

impl Ablation {
    pub fn uses_encoder(self) -> bool {
        matches!(self, Ablation::Full | Ablation::IdeOnly)
    }

    pub fn uses_denoising(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NveOnly)
    }

    /// The denoising config actually applied under this ablation.
    pub fn effective_nve(self, cfg: &NveConfig) -> NveConfig {
        NveConfig {
            enabled: cfg.enabled && self.uses_denoising(),
            ..*cfg
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub ablation: Ablation,
    pub upsample: Upsample,
    /// Pixels per patch side in the upsampled map.
    pub patch_side: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            ablation: Ablation::Full,
            upsample: Upsample::Bilinear,
            patch_side: 14,
        }
    }
}

/// `Σ_m ⟨f,t_m⟩/⟨t_m,t_m⟩ · t_m`; near-zero tokens contribute nothing.
pub fn project(f: &[f64], tokens: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; f.len()];
    for t in tokens {
        let tt: f64 = t.iter().map(|x| x * x).sum();
        if tt < 1e-12 {
            continue;
        }
        let c = f.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / tt;
        for (o, x) in out.iter_mut().zip(t) {
            *o += c * x;
        }
    }
    out
}

fn cosine64(a: &[f64], b: &[f64]) -> f64 {
    let (aa, bb) = (crate::linalg::dot(a, a), crate::linalg::dot(b, b));
    if aa.sqrt() < 1e-12 || bb.sqrt() < 1e-12 {
        return 0.0;
    }
    (crate::linalg::dot(a, b) / (aa * bb).sqrt()).clamp(-1.0, 1.0)
}

/// `clamp(½·(cos(f_den, f̃) + d_cos(f, f_nmin)), 0, 1)`.
pub fn patch_score(den: &[f64], projected: &[f64], query: &[f64], nearest_normal: &[f64]) -> f64 {
    combine(cosine64(den, projected), 1.0 - cosine64(query, nearest_normal))
}

fn combine(similarity: f64, normal_distance: f64) -> f64 {
    (0.5 * (similarity + normal_distance)).clamp(0.0, 1.0)
}

/// Number of patches averaged into the image score: `⌈N/100⌉`.
pub fn top_count(n: usize) -> usize {
    n.div_ceil(100).max(1)
}

/// Mean of the `⌈N/100⌉` largest patch scores.
pub fn image_score(scores: &[f64]) -> f64 {
    let k = top_count(scores.len());
    let mut s = scores.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s[..k].iter().sum::<f64>() / k as f64
}

/// Corner-aligned bilinear resampling of a `g × g` grid to `h × w`.
pub fn upsample_bilinear(grid: &[f64], g: usize, h: usize, w: usize) -> Vec<f64> {
    let coord = |i: usize, n: usize| {
        if n <= 1 || g == 1 {
            0.0
        } else {
            i as f64 * (g - 1) as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = coord(y, h);
        let y0 = (sy.floor() as usize).min(g - 1);
        let y1 = (y0 + 1).min(g - 1);
        let fy = sy - y0 as f64;
        for x in 0..w {
            let sx = coord(x, w);
            let x0 = (sx.floor() as usize).min(g - 1);
            let x1 = (x0 + 1).min(g - 1);
            let fx = sx - x0 as f64;
            let top = grid[y0 * g + x0] * (1.0 - fx) + grid[y0 * g + x1] * fx;
            let bot = grid[y1 * g + x0] * (1.0 - fx) + grid[y1 * g + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

pub fn upsample_nearest(grid: &[f64], g: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let gy = (y * g / h).min(g - 1);
        for x in 0..w {
            out.push(grid[gy * g + (x * g / w).min(g - 1)]);
        }
    }
    out
}

/// Per-patch scores, pixel map and image score for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub grid: usize,
    pub patch_scores: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub pixel_map: Vec<f32>,
    pub image_score: f32,
}

const MAP_MAGIC: &[u8; 4] = b"IDSM";

impl ScoreMap {
    pub fn from_patch_scores(scores: &[f64], grid: usize, cfg: &ScoreConfig) -> Result<Self> {
        if grid == 0 || scores.len() != grid * grid {
            return Err(ScoreError::Contract(format!(
                "{} patch scores for a {grid}×{grid} grid",
                scores.len()
            )));
        }
        let side = grid * cfg.patch_side.max(1);
        let pixels = match cfg.upsample {
            Upsample::Bilinear => upsample_bilinear(scores, grid, side, side),
            Upsample::Nearest => upsample_nearest(scores, grid, side, side),
        };
        Ok(Self {
            grid,
            patch_scores: scores.iter().map(|&v| v as f32).collect(),
            height: side,
            width: side,
            pixel_map: pixels.iter().map(|&v| v as f32).collect(),
            image_score: image_score(scores) as f32,
        })
    }

    /// `IDSM`, `H`, `W`, `N` as u32, then pixel map, patch scores and image
    /// score as little-endian f32.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * (self.pixel_map.len() + self.patch_scores.len() + 1));
        out.extend_from_slice(MAP_MAGIC);
        for v in [self.height, self.width, self.patch_scores.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.pixel_map.iter().chain(&self.patch_scores) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.image_score.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| ScoreError::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAP_MAGIC {
            return Err(bad("missing IDSM header"));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (h, w, n) = (u(0), u(1), u(2));
        let grid = crate::features::grid_side(n).ok_or_else(|| bad("patch count is not square"))?;
        let floats = h * w + n + 1;
        if bytes.len() != 16 + 4 * floats {
            return Err(bad("length does not match header"));
        }
        let vals: Vec<f32> = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            grid,
            height: h,
            width: w,
            pixel_map: vals[..h * w].to_vec(),
            patch_scores: vals[h * w..h * w + n].to_vec(),
            image_score: vals[h * w + n],
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |source| ScoreError::Io {
            path: path.display().to_string(),
            source,
        };
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.encode()))
            .map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let io = |source| ScoreError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(io)?;
        Self::decode(&buf)
    }
}

/// The trained encoder with the architecture it was built for.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: IdeConfig,
    pub params: IdeParams,
}

/// Encoder inputs for a reference set: the normal pool plus the abnormal
/// references' denoised deviations.
pub struct PreparedReferences {
    pub pool: NormalPool,
    pub abnormal: nve::DeviationField,
}

impl PreparedReferences {
    pub fn new(refs: &ReferenceSet, nve_cfg: &NveConfig) -> Result<Self> {
        let pool = NormalPool::new(refs.normals.clone())?;
        let abnormal = nve::deviation_field(&refs.abnormals, &pool, nve_cfg)?;
        Ok(Self { pool, abnormal })
    }

    pub fn encoder_input<T: Real>(&self, cfg: &IdeConfig, refs: &ReferenceSet) -> Result<EncoderInput<T>> {
        Ok(EncoderInput::new(
            cfg,
            &refs.abnormals,
            &self.abnormal.denoised,
            &refs.abnormal_mask,
            &refs.abnormal_positions,
            refs.grid,
        )?)
    }
}

enum Similarity {
    /// Encoder output, one row per token.
    Tokens(Vec<Vec<f64>>),
    /// Masked abnormal reference rows compared against denoised deviations.
    Denoised(Vec<Vec<f64>>),
    /// Masked abnormal reference rows compared against raw features.
    Raw(Vec<Vec<f64>>),
}

/// Everything derived from one manifest's references, computed once and
/// shared read-only by every query.
pub struct ReferenceContext {
    config: ScoreConfig,
    nve: NveConfig,
    prepared: PreparedReferences,
    similarity: Similarity,
    grid: usize,
}

impl ReferenceContext {
    pub fn build(
        refs: &ReferenceSet,
        model: Option<&Model>,
        nve_cfg: &NveConfig,
        config: &ScoreConfig,
    ) -> Result<Self> {
        let nve = config.ablation.effective_nve(nve_cfg);
        let prepared = PreparedReferences::new(refs, &nve)?;
        let masked: Vec<usize> = (0..refs.abnormal_mask.len())
            .filter(|&i| refs.abnormal_mask[i])
            .collect();
        let rows64 = |t: &Tensor<f32>| -> Vec<Vec<f64>> {
            masked
                .iter()
                .map(|&i| t.row(i).iter().map(|&v| v as f64).collect())
                .collect()
        };
        let similarity = match config.ablation {
            Ablation::Full | Ablation::IdeOnly => {
                let model = model.ok_or_else(|| {
                    ScoreError::Contract("this scoring mode needs a trained encoder".into())
                })?;
                let t = deviation_vectors(model, refs, &prepared)?;
                Similarity::Tokens((0..t.rows()).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect())
            }
            Ablation::NveOnly => Similarity::Denoised(rows64(&prepared.abnormal.denoised)),
            Ablation::MatchingOnly => Similarity::Raw(rows64(&refs.abnormals)),
        };
        Ok(Self {
            config: *config,
            nve,
            prepared,
            similarity,
            grid: refs.grid,
        })
    }

    /// Encoder output in eval mode, when this context uses one.
    pub fn tokens(&self) -> Option<&[Vec<f64>]> {
        match &self.similarity {
            Similarity::Tokens(t) => Some(t),
            _ => None,
        }
    }

    pub fn pool(&self) -> &NormalPool {
        &self.prepared.pool
    }

    pub fn deviations(&self, query: &Tensor<f32>) -> Result<nve::DeviationField> {
        Ok(nve::deviation_field(query, &self.prepared.pool, &self.nve)?)
    }

    /// Raw per-patch scores for a query's `N × C` features.
    pub fn patch_scores(&self, query: &Tensor<f32>) -> Result<Vec<f64>> {
        let field = self.deviations(query)?;
        Ok((0..query.rows())
            .map(|i| {
                let den: Vec<f64> = field.denoised.row(i).iter().map(|&v| v as f64).collect();
                let sim = match &self.similarity {
                    Similarity::Tokens(t) => cosine64(&den, &project(&den, t)),
                    Similarity::Denoised(rows) => max_cosine(&den, rows),
                    Similarity::Raw(rows) => {
                        let raw: Vec<f64> = query.row(i).iter().map(|&v| v as f64).collect();
                        max_cosine(&raw, rows)
                    }
                };
                combine(sim, field.nearest_dist[i])
            })
            .collect())
    }

    pub fn score(&self, query: &Tensor<f32>) -> Result<ScoreMap> {
        if query.rows() != self.grid * self.grid {
            return Err(ScoreError::Contract(format!(
                "query has {} patches, references use a {}×{} grid",
                query.rows(),
                self.grid,
                self.grid
            )));
        }
        ScoreMap::from_patch_scores(&self.patch_scores(query)?, self.grid, &self.config)
    }

    /// Scores many queries in parallel; output order follows input order.
    pub fn score_all(&self, queries: &[Tensor<f32>]) -> Result<Vec<ScoreMap>> {
        queries.par_iter().map(|q| self.score(q)).collect()
    }
}

fn max_cosine(f: &[f64], rows: &[Vec<f64>]) -> f64 {
    rows.iter().map(|r| cosine64(f, r)).fold(f64::NEG_INFINITY, f64::max)
}

/// Encoder output (eval mode) for a reference set.
pub fn deviation_vectors(model: &Model, refs: &ReferenceSet, prepared: &PreparedReferences) -> Result<Tensor<f32>> {
    let input = prepared.encoder_input::<f32>(&model.config, refs)?;
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, false);
    let out = ide::forward(&mut tape, &model.config, &vars, &input, Mode::Eval)?;
    Ok(tape.value(out.deviations).clone())
}

/// Patch scores recorded on a tape: projection onto `deviations`, cosine
/// with the denoised query rows, the constant normal-matching term, clamp.
pub fn patch_scores_on_tape<T: Real>(
    tape: &mut Tape<T>,
    deviations: Var,
    denoised: &Tensor<T>,
    normal_distance: &[T],
) -> Result<Var> {
    let unit = tape.normalize_rows(deviations)?;
    let den = tape.constant(denoised.clone());
    let coeff = tape.matmul_bt(den, unit)?;
    let proj = tape.matmul(coeff, unit)?;
    let cos = tape.row_cosine(den, proj)?;
    let half: Vec<T> = normal_distance.iter().map(|&d| d * T::of(0.5)).collect();
    let raw = tape.scale(cos, 0.5)?;
    let raw = tape.add_const(raw, &half)?;
    Ok(tape.clamp(raw, 0.0, 1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        let e1 = vec![1.0, 0.0, 0.0];
        assert_eq!(project(&[1.0, 1.0, 0.0], &[e1.clone()]), vec![1.0, 0.0, 0.0]);
        assert_eq!(project(&[0.0, 0.0, 2.0], &[e1.clone()]), vec![0.0, 0.0, 0.0]);
        let s = 1.0 / 2f64.sqrt();
        let p = project(&[0.0, 1.0, 0.0], &[e1.clone(), vec![s, s, 0.0]]);
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        let pp = project(&p, &[e1, vec![s, s, 0.0]]);
        assert!((pp[0] - p[0]).abs() > 0.1);
        assert_eq!(project(&[1.0, 2.0], &[vec![0.0, 0.0]]), vec![0.0, 0.0]);
    }

    #[test]
    fn patch_score_endpoints() {
        let f = [1.0, 2.0, 0.0];
        let d = [0.0, 1.0, 0.0];
        assert_eq!(patch_score(&d, &d, &f, &f), 0.5);
        assert_eq!(patch_score(&d, &[0.0; 3], &f, &f), 0.0);
        assert_eq!(patch_score(&d, &d, &[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]), 1.0);
        assert_eq!(patch_score(&d, &[0.0, -1.0, 0.0], &[1.0, 0.0, 0.0], &[-1.0, 0.0, 0.0]), 0.5);
    }

    #[test]
    fn image_score_rule() {
        assert_eq!(top_count(1024), 11);
        assert_eq!(top_count(50), 1);
        assert_eq!(top_count(100), 1);
        assert_eq!(top_count(101), 2);
        assert_eq!(image_score(&[0.3; 64]), 0.3);
        let mut s: Vec<f64> = (0..1024).map(|i| i as f64 / 1024.0).collect();
        s.reverse();
        let want: f64 = (1013..1024).map(|i| i as f64 / 1024.0).sum::<f64>() / 11.0;
        assert!((image_score(&s) - want).abs() < 1e-15);
        let mut t = vec![0.1; 50];
        t[17] = 0.9;
        assert_eq!(image_score(&t), 0.9);
    }

    #[test]
    fn upsample_examples() {
        assert!(upsample_bilinear(&[0.4; 9], 3, 5, 7).iter().all(|&v| (v - 0.4).abs() < 1e-15));
        let m = upsample_bilinear(&[0.0, 1.0, 0.0, 1.0], 2, 2, 4);
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for r in 0..2 {
            for c in 0..4 {
                assert!((m[r * 4 + c] - want[c]).abs() < 1e-15);
            }
        }
        let n = upsample_nearest(&[0.0, 1.0, 2.0, 3.0], 2, 4, 4);
        assert_eq!(&n[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(&n[12..], &[2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn score_map_round_trip() {
        let scores: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        let cfg = ScoreConfig {
            patch_side: 3,
            ..Default::default()
        };
        let m = ScoreMap::from_patch_scores(&scores, 4, &cfg).unwrap();
        assert_eq!((m.height, m.width), (12, 12));
        let bytes = m.encode();
        assert_eq!(&bytes[..4], b"IDSM");
        assert_eq!(ScoreMap::decode(&bytes).unwrap(), m);
        assert!(ScoreMap::decode(&bytes[..bytes.len() - 2]).is_err());
        assert!(ScoreMap::from_patch_scores(&scores[..15], 4, &cfg).is_err());
    }

    #[test]
    fn tape_scores_match_direct_evaluation() {
        let tokens = Tensor::from_rows(&[[1.0f64, 0.0, 0.5], [0.2, -1.0, 0.0]]).unwrap();
        let den = Tensor::from_rows(&[[0.3f64, 0.1, -0.2], [0.0, 0.0, 0.0], [1.0, 2.0, 0.5]]).unwrap();
        let dist = [0.2f64, 0.0, 1.7];
        let mut tape = Tape::new();
        let t = tape.param(tokens.clone());
        let s = patch_scores_on_tape(&mut tape, t, &den, &dist).unwrap();
        let rows: Vec<Vec<f64>> = (0..2).map(|i| tokens.row(i).to_vec()).collect();
        for i in 0..3 {
            let d = den.row(i);
            let want = combine(cosine64(d, &project(d, &rows)), dist[i]);
            assert!((tape.value(s).data()[i] - want).abs() < 1e-12);
        }
    }
}
