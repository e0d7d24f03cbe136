//! Slow, straight-line `f64` references for the engine's fast paths. Each
//! function recomputes its quantity from the definition, sharing no code
//! with the implementation it checks.

use nalgebra::{DMatrix, SymmetricEigen};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d = (dot(a, a) * dot(b, b)).sqrt();
    if d == 0.0 { 0.0 } else { dot(a, b) / d }
}

pub fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Linear scan for the most cosine-similar row; lowest index on ties.
pub fn nearest(f: &[f64], pool: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, p) in pool.iter().enumerate() {
        let d = 1.0 - cos(f, p);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Full sort by cosine distance, index as tie-break, first `k`.
pub fn top_k(f: &[f64], pool: &[Vec<f64>], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = pool.iter().enumerate().map(|(j, p)| (1.0 - cos(f, p), j)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Top-`r` eigenvectors of the dense `C × C` sample covariance, keeping only
/// directions with eigenvalue above `1e-10 · trace`.
pub fn covariance_subspace(rows: &[Vec<f64>], r: usize) -> Vec<Vec<f64>> {
    let k = rows.len();
    let c = rows[0].len();
    let mean: Vec<f64> = (0..c).map(|j| rows.iter().map(|x| x[j]).sum::<f64>() / k as f64).collect();
    let mut cov = DMatrix::<f64>::zeros(c, c);
    for x in rows {
        for i in 0..c {
            for j in 0..c {
                cov[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]) / (k - 1) as f64;
            }
        }
    }
    let trace = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    order
        .into_iter()
        .take(r)
        .filter(|&j| eig.eigenvalues[j] > 1e-10 * trace)
        .map(|j| eig.eigenvectors.column(j).iter().copied().collect())
        .collect()
}

pub struct NveReference {
    pub residuals: Vec<Vec<f64>>,
    pub denoised: Vec<Vec<f64>>,
    pub subspaces: Vec<Vec<Vec<f64>>>,
}

/// Residual against the nearest normal, then removal of `alpha` times its
/// projection on the dense local subspace.
pub fn nve(patches: &[Vec<f64>], pool: &[Vec<f64>], k: usize, r: usize, alpha: f64) -> NveReference {
    let mut out = NveReference {
        residuals: Vec::new(),
        denoised: Vec::new(),
        subspaces: Vec::new(),
    };
    for f in patches {
        let (j, _) = nearest(f, pool);
        let res: Vec<f64> = f.iter().zip(&pool[j]).map(|(a, b)| a - b).collect();
        let nbrs: Vec<Vec<f64>> = top_k(f, pool, k).into_iter().map(|i| pool[i].clone()).collect();
        let u = covariance_subspace(&nbrs, r);
        let mut den = res.clone();
        for b in &u {
            let p = dot(b, &res);
            for (d, x) in den.iter_mut().zip(b) {
                *d -= alpha * p * x;
            }
        }
        out.residuals.push(res);
        out.denoised.push(den);
        out.subspaces.push(u);
    }
    out
}

/// Principal angles from the singular values of the cross-product matrix.
pub fn principal_angles(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<f64> {
    let m = DMatrix::from_fn(a.len(), b.len(), |i, j| dot(&a[i], &b[j]));
    let mut s: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s.into_iter().map(|v| v.clamp(0.0, 1.0).acos()).collect()
}

/// Counts every positive/negative pair.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0usize);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

fn distinct_desc(scores: &[f64]) -> Vec<f64> {
    let mut t = scores.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn counts_at(scores: &[f64], labels: &[bool], t: f64) -> (usize, usize) {
    let tp = scores.iter().zip(labels).filter(|(s, l)| **l && **s >= t).count();
    let fp = scores.iter().zip(labels).filter(|(s, l)| !**l && **s >= t).count();
    (tp, fp)
}

/// Precision-weighted recall increments over every distinct threshold.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in distinct_desc(scores) {
        let (tp, fp) = counts_at(scores, labels, t);
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
    }
    Some(ap)
}

pub fn f1_max(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let mut best: f64 = 0.0;
    for t in distinct_desc(scores) {
        let (tp, fp) = counts_at(scores, labels, t);
        if tp > 0 {
            let p = tp as f64 / (tp + fp) as f64;
            let r = tp as f64 / pos as f64;
            best = best.max(2.0 * p * r / (p + r));
        }
    }
    Some(best)
}

/// 8-connected regions by repeated label propagation until a fixed point.
pub fn regions(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut label: Vec<usize> = (0..h * w).collect();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if !mask[p] {
                    continue;
                }
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let q = ny as usize * w + nx as usize;
                        if mask[q] && label[q] < label[p] {
                            label[p] = label[q];
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut roots: Vec<usize> = (0..h * w).filter(|&p| mask[p]).map(|p| label[p]).collect();
    roots.sort_unstable();
    roots.dedup();
    roots
        .iter()
        .map(|&r| (0..h * w).filter(|&p| mask[p] && label[p] == r).collect())
        .collect()
}

/// Per-region overlap curve at every distinct score, integrated with the
/// trapezoid rule up to `cap` and normalized by it.
pub fn pro(maps: &[(Vec<f64>, Vec<bool>, usize, usize)], cap: f64) -> Option<f64> {
    let mut regs: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut negatives = 0;
    let mut all = Vec::new();
    for (i, (s, m, h, w)) in maps.iter().enumerate() {
        regs.extend(regions(m, *h, *w).into_iter().map(|r| (i, r)));
        negatives += m.iter().filter(|&&b| !b).count();
        all.extend_from_slice(s);
    }
    if regs.is_empty() {
        return None;
    }
    let mut pts = vec![(0.0, 0.0)];
    for t in distinct_desc(&all) {
        let fp: usize = maps
            .iter()
            .map(|(s, m, _, _)| (0..s.len()).filter(|&p| !m[p] && s[p] >= t).count())
            .sum();
        let mut overlap = 0.0;
        for (i, r) in &regs {
            let hit = r.iter().filter(|&&p| maps[*i].0[p] >= t).count();
            overlap += hit as f64 / r.len() as f64;
        }
        let fpr = if negatives == 0 { 0.0 } else { fp as f64 / negatives as f64 };
        pts.push((fpr, overlap / regs.len() as f64));
    }
    let mut area = 0.0;
    for k in 1..pts.len() {
        let (x0, y0) = pts[k - 1];
        let (x1, y1) = pts[k];
        if x0 >= cap {
            break;
        }
        if x1 > cap {
            area += y0 * (cap - x0);
            break;
        }
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    Some(area / cap)
}

/// Mean best cosine of each test row against all reference rows.
pub fn task_difficulty(references: &[Vec<f64>], tests: &[Vec<f64>]) -> Option<f64> {
    if references.is_empty() || tests.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for t in tests {
        let mut best = f64::NEG_INFINITY;
        for r in references {
            best = best.max(cos(t, r));
        }
        total += best;
    }
    Some(total / tests.len() as f64)
}

/// Weights of a single-head encoder, every matrix `in × out` row-major as
/// nested rows.
pub struct EncoderWeights {
    pub tokens: Vec<Vec<f64>>,
    pub wq: Vec<Vec<f64>>,
    pub bq: Vec<f64>,
    pub wk: Vec<Vec<f64>>,
    pub bk: Vec<f64>,
    pub wv: Vec<Vec<f64>>,
    pub bv: Vec<f64>,
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
}

fn affine(x: &[f64], w: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    (0..b.len())
        .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i][j]).sum::<f64>())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Single-head masked cross-attention of tokens over `keys`/`values`,
/// followed by the GELU feed-forward, with optional residual paths.
pub fn encoder(
    w: &EncoderWeights,
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    mask: &[bool],
    scale: f64,
    residuals: bool,
) -> Vec<Vec<f64>> {
    let k: Vec<Vec<f64>> = keys.iter().map(|x| affine(x, &w.wk, &w.bk)).collect();
    let v: Vec<Vec<f64>> = values.iter().map(|x| affine(x, &w.wv, &w.bv)).collect();
    w.tokens
        .iter()
        .map(|t| {
            let q = affine(t, &w.wq, &w.bq);
            let logits: Vec<f64> = k
                .iter()
                .zip(mask)
                .map(|(kj, &m)| if m { dot(&q, kj) * scale } else { f64::NEG_INFINITY })
                .collect();
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut att = vec![0.0; t.len()];
            for (ej, vj) in e.iter().zip(&v) {
                for (a, x) in att.iter_mut().zip(vj) {
                    *a += ej / z * x;
                }
            }
            let x1: Vec<f64> = if residuals {
                t.iter().zip(&att).map(|(a, b)| a + b).collect()
            } else {
                att
            };
            let h: Vec<f64> = affine(&x1, &w.w1, &w.b1).into_iter().map(gelu).collect();
            let f = affine(&h, &w.w2, &w.b2);
            if residuals {
                x1.iter().zip(&f).map(|(a, b)| a + b).collect()
            } else {
                f
            }
        })
        .collect()
}
