//! Detection and localization metrics: AUROC, AP, F1-max, PRO, and the
//! mask-aware task-difficulty similarity.
//!
//! Metrics that are undefined for the given labels return `None`.

use std::collections::VecDeque;

/// Indices sorted by descending score (stable, so ties keep input order).
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Cumulative (tp, fp) after each block of tied scores, highest first.
fn tie_blocks(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let idx = descending(scores);
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((tp, fp));
    }
    out
}

/// Probability that a positive outscores a negative, ties counting half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // Σ over tie blocks of (positives in block)·(negatives strictly below + ½ tied)
    let blocks = tie_blocks(scores, labels);
    let mut wins2 = 0u128;
    let (mut ptp, mut pfp) = (0, 0);
    for &(tp, fp) in &blocks {
        let (bp, bn) = (tp - ptp, fp - pfp);
        let below = neg - fp;
        wins2 += (2 * bp * below + bp * bn) as u128;
        ptp = tp;
        pfp = fp;
    }
    Some(wins2 as f64 / (2 * pos * neg) as f64)
}

/// `Σ_k (R_k − R_{k−1})·P_k` over descending thresholds, ties as one block.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in tie_blocks(scores, labels) {
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

pub(crate) fn f1(tp: usize, fp: usize, pos: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / pos as f64;
    2.0 * p * r / (p + r)
}

/// Best F1 over thresholds at every distinct score, `score ≥ threshold`
/// predicted positive.
pub fn f1_max(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    tie_blocks(scores, labels)
        .into_iter()
        .map(|(tp, fp)| f1(tp, fp, pos))
        .reduce(f64::max)
}

/// 8-connected components of `mask` (`h × w`); `0` is background, regions
/// are numbered from 1 in raster order of their first pixel.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> (Vec<usize>, usize) {
    let mut labels = vec![0usize; h * w];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && labels[q] == 0 {
                        labels[q] = next;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    (labels, next)
}

/// One anomaly map with its ground truth, both `height × width`.
#[derive(Clone, Debug)]
pub struct PixelSample<'a> {
    pub scores: &'a [f64],
    pub mask: &'a [bool],
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProConfig {
    pub fpr_cap: f64,
    pub steps: usize,
}

impl Default for ProConfig {
    fn default() -> Self {
        Self {
            fpr_cap: 0.3,
            steps: 100,
        }
    }
}

/// Area under the (FPR, mean region overlap) curve up to `fpr_cap`,
/// divided by the cap.
///
/// Thresholds are every distinct score when there are at most `steps` of
/// them, otherwise `steps` evenly spaced values from max to min. The curve
/// starts at (0, 0); the segment crossing the cap contributes its left
/// value held flat.
pub fn pro(samples: &[PixelSample<'_>], cfg: &ProConfig) -> Option<f64> {
    let mut regions: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut neg_total = 0usize;
    let mut all_scores = Vec::new();
    for (s, sample) in samples.iter().enumerate() {
        let (labels, n) = connected_components(sample.mask, sample.height, sample.width);
        let base = regions.len();
        regions.resize(base + n, Vec::new());
        for (p, &l) in labels.iter().enumerate() {
            if l > 0 {
                regions[base + l - 1].push((s, p));
            }
        }
        neg_total += sample.mask.iter().filter(|&&m| !m).count();
        all_scores.extend_from_slice(sample.scores);
    }
    if regions.is_empty() || cfg.steps < 2 || cfg.fpr_cap <= 0.0 {
        return None;
    }
    let thresholds = pro_thresholds(&all_scores, cfg.steps);
    let mut curve = vec![(0.0f64, 0.0f64)];
    for &t in &thresholds {
        let fp: usize = samples
            .iter()
            .map(|s| s.scores.iter().zip(s.mask).filter(|(&v, &m)| !m && v >= t).count())
            .sum();
        let fpr = if neg_total == 0 { 0.0 } else { fp as f64 / neg_total as f64 };
        let overlap: f64 = regions
            .iter()
            .map(|r| {
                let hit = r.iter().filter(|&&(s, p)| samples[s].scores[p] >= t).count();
                hit as f64 / r.len() as f64
            })
            .sum::<f64>()
            / regions.len() as f64;
        curve.push((fpr, overlap));
    }
    Some(integrate_capped(&curve, cfg.fpr_cap) / cfg.fpr_cap)
}

fn pro_thresholds(scores: &[f64], steps: usize) -> Vec<f64> {
    let mut distinct = scores.to_vec();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    if distinct.len() <= steps {
        return distinct;
    }
    let (hi, lo) = (distinct[0], distinct[distinct.len() - 1]);
    (0..steps)
        .map(|i| hi - i as f64 * (hi - lo) / (steps - 1) as f64)
        .collect()
}

/// Trapezoid area of a curve with non-decreasing x up to `cap`.
pub(crate) fn integrate_capped(curve: &[(f64, f64)], cap: f64) -> f64 {
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= cap {
            break;
        }
        if x1 <= cap {
            area += 0.5 * (y0 + y1) * (x1 - x0);
        } else {
            area += y0 * (cap - x0);
            break;
        }
    }
    area
}

/// Mean over anomalous test patches of the best cosine similarity to any
/// masked abnormal-reference patch.
pub fn task_difficulty(references: &[&[f32]], tests: &[&[f32]]) -> Option<f64> {
    if references.is_empty() || tests.is_empty() {
        return None;
    }
    let total: f64 = tests
        .iter()
        .map(|t| {
            references
                .iter()
                .map(|r| crate::tensor::cosine_f64(t, r))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Some(total / tests.len() as f64)
}

/// Image- and pixel-level results for one evaluation; absent entries were
/// undefined for the data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub image_auroc: Option<f64>,
    pub image_ap: Option<f64>,
    pub image_f1max: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub pixel_pro: Option<f64>,
    pub pixel_f1max: Option<f64>,
    pub task_difficulty: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
}

impl EvalReport {
    /// `key = value` lines in a fixed order; undefined metrics print `none`.
    pub fn to_text(&self) -> String {
        let f = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:.6}"));
        format!(
            "image_auroc = {}\nimage_ap = {}\nimage_f1max = {}\npixel_auroc = {}\npixel_pro = {}\npixel_f1max = {}\ntask_difficulty = {}\npositives = {}\nnegatives = {}\n",
            f(self.image_auroc),
            f(self.image_ap),
            f(self.image_f1max),
            f(self.pixel_auroc),
            f(self.pixel_pro),
            f(self.pixel_f1max),
            f(self.task_difficulty),
            self.positives,
            self.negatives
        )
    }

    /// `(image AUROC / pixel AUROC)` in percent.
    pub fn summary(&self) -> String {
        let p = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
        format!("({} / {})", p(self.image_auroc), p(self.pixel_auroc))
    }
}

/// One scored query with its ground truth.
pub struct EvalSample<'a> {
    pub label: bool,
    pub image_score: f64,
    /// Row-major `height × width` pixel scores.
    pub pixel_scores: &'a [f32],
    pub height: usize,
    pub width: usize,
    /// Patch mask on a `grid × grid` layout.
    pub patch_mask: &'a [bool],
    pub grid: usize,
}

/// Patch mask spread over pixels: pixel `(y, x)` takes the bit of the patch
/// it falls in.
pub fn pixel_mask(patch_mask: &[bool], grid: usize, height: usize, width: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let py = y * grid / height;
        for x in 0..width {
            out.push(patch_mask[py * grid + x * grid / width]);
        }
    }
    out
}

/// Image metrics from image scores; pixel metrics pooled over every pixel
/// of every query. Task difficulty is left for the caller.
pub fn evaluate(samples: &[EvalSample<'_>], pro_cfg: &ProConfig) -> EvalReport {
    let scores: Vec<f64> = samples.iter().map(|s| s.image_score).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    let masks: Vec<Vec<bool>> = samples
        .iter()
        .map(|s| pixel_mask(s.patch_mask, s.grid, s.height, s.width))
        .collect();
    let pixels: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| s.pixel_scores.iter().map(|&v| v as f64).collect())
        .collect();
    let flat_scores: Vec<f64> = pixels.iter().flatten().copied().collect();
    let flat_mask: Vec<bool> = masks.iter().flatten().copied().collect();
    let pro_samples: Vec<PixelSample<'_>> = samples
        .iter()
        .zip(pixels.iter().zip(&masks))
        .map(|(s, (p, m))| PixelSample {
            scores: p,
            mask: m,
            height: s.height,
            width: s.width,
        })
        .collect();
    EvalReport {
        image_auroc: auroc(&scores, &labels),
        image_ap: average_precision(&scores, &labels),
        image_f1max: f1_max(&scores, &labels),
        pixel_auroc: auroc(&flat_scores, &flat_mask),
        pixel_pro: pro(&pro_samples, pro_cfg),
        pixel_f1max: f1_max(&flat_scores, &flat_mask),
        task_difficulty: None,
        positives: labels.iter().filter(|&&l| l).count(),
        negatives: labels.iter().filter(|&&l| !l).count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.9], &[false, true]), Some(1.0));
        assert_eq!(auroc(&[0.4; 5], &[true, false, true, false, false]), Some(0.5));
        assert_eq!(auroc(&[0.1, 0.2], &[true, true]), None);
        let s = [0.3, 0.7, 0.5, 0.5];
        let y = [true, false, true, false];
        assert_eq!(auroc(&s, &y).unwrap(), 1.0 - auroc(&s, &y.map(|b| !b)).unwrap());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]), Some(1.0));
        assert_eq!(average_precision(&[0.1, 0.5, 0.6, 0.7], &[true, false, false, false]), Some(0.25));
        assert_eq!(average_precision(&[0.1], &[false]), None);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_max(&[0.9, 0.1], &[true, false]), Some(1.0));
        let v = f1_max(&[0.1, 0.5, 0.6, 0.7], &[true, false, false, false]).unwrap();
        assert!((v - 0.4).abs() < 1e-15);
    }

    #[test]
    fn components_are_eight_connected() {
        #[rustfmt::skip]
        let m = [
            true, false, false,
            false, true, false,
            false, false, false,
        ];
        assert_eq!(connected_components(&m, 3, 3).1, 1);
        #[rustfmt::skip]
        let m = [
            true, false, true,
            false, false, false,
            true, true, false,
        ];
        assert_eq!(connected_components(&m, 3, 3).1, 3);
    }

    #[test]
    fn pro_examples() {
        let mask: Vec<bool> = (0..16).map(|i| i % 4 < 2).collect();
        let scores: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let s = PixelSample { scores: &scores, mask: &mask, height: 4, width: 4 };
        assert_eq!(pro(&[s], &ProConfig::default()), Some(1.0));
        let flat = vec![0.5; 16];
        let s = PixelSample { scores: &flat, mask: &mask, height: 4, width: 4 };
        assert_eq!(pro(&[s], &ProConfig::default()), Some(0.0));
        let empty = vec![false; 16];
        let s = PixelSample { scores: &flat, mask: &empty, height: 4, width: 4 };
        assert_eq!(pro(&[s], &ProConfig::default()), None);
    }

    #[test]
    fn task_difficulty_examples() {
        let a = [1.0f32, 0.0];
        let b = [0.0f32, 1.0];
        assert_eq!(task_difficulty(&[&a], &[&a]), Some(1.0));
        assert_eq!(task_difficulty(&[&a], &[&b]), Some(0.0));
        assert_eq!(task_difficulty(&[], &[&b]), None);
    }

    #[test]
    fn pixel_mask_follows_patches() {
        let m = pixel_mask(&[true, false, false, true], 2, 4, 4);
        assert_eq!(m.iter().filter(|&&b| b).count(), 8);
        assert!(m[0] && m[5] && !m[2] && m[15]);
    }

    #[test]
    fn perfect_scores_give_unit_metrics() {
        let mask = [false, true, false, false];
        let bright: Vec<f32> = pixel_mask(&mask, 2, 4, 4).iter().map(|&b| b as u8 as f32).collect();
        let dark = vec![0.0f32; 16];
        let clean = [false; 4];
        let samples = [
            EvalSample { label: true, image_score: 0.9, pixel_scores: &bright, height: 4, width: 4, patch_mask: &mask, grid: 2 },
            EvalSample { label: false, image_score: 0.1, pixel_scores: &dark, height: 4, width: 4, patch_mask: &clean, grid: 2 },
        ];
        let r = evaluate(&samples, &ProConfig::default());
        for v in [r.image_auroc, r.image_ap, r.image_f1max, r.pixel_auroc, r.pixel_pro, r.pixel_f1max] {
            assert_eq!(v, Some(1.0));
        }
        assert_eq!((r.positives, r.negatives), (1, 1));
    }

    #[test]
    fn report_text_has_fixed_order() {
        let r = EvalReport {
            image_auroc: Some(1.0),
            positives: 2,
            negatives: 3,
            ..Default::default()
        };
        let t = r.to_text();
        assert!(t.starts_with("image_auroc = 1.000000\nimage_ap = none\n"));
        assert_eq!(r.summary(), "(100.0 / -)");
    }
}
