//! Segmentation and classification metrics.
//!
//! All binarization is strict: a pixel (or image) is predicted anomalous when
//! its score is greater than the threshold. Pixel statistics are pooled over
//! every image of a set before ratios are taken.

use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{fill_holes, fill_holes_grey};

/// Default false-positive-rate integration limit.
pub const FPR_LIMIT: f64 = 0.05;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall; 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }

    fn add(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Score {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: Counts,
}

impl From<Counts> for F1Score {
    fn from(counts: Counts) -> Self {
        Self {
            f1: counts.f1(),
            precision: counts.precision(),
            recall: counts.recall(),
            counts,
        }
    }
}

/// Per-category evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub category: String,
    pub threshold: f32,
    pub pixel_f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub auroc_limit: f64,
    pub aupro_limit: f64,
    pub class_f1: f64,
    pub image_threshold: f32,
    pub fpr_limit: f64,
    pub counts: Counts,
}

fn check_shapes<A, B>(a: &[Array2<A>], b: &[Array2<B>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!(
            "{} maps but {} ground-truth masks",
            a.len(),
            b.len()
        )));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.dim() != y.dim() {
            return Err(Error::Validation(format!(
                "image {i}: prediction {:?} vs ground truth {:?}",
                x.dim(),
                y.dim()
            )));
        }
    }
    Ok(())
}

/// Pooled confusion counts and F1 over a set of binary predictions.
pub fn pixel_f1(pred: &[Array2<bool>], gt: &[Array2<bool>]) -> Result<F1Score> {
    check_shapes(pred, gt)?;
    let mut counts = Counts::default();
    for (p, g) in pred.iter().zip(gt) {
        for (&a, &b) in p.iter().zip(g.iter()) {
            counts.add(a, b);
        }
    }
    Ok(counts.into())
}

/// `map > threshold`, followed by hole filling when requested.
pub fn binarize(map: &Array2<f32>, threshold: f32, hole_fill: bool) -> Array2<bool> {
    let bin = map.mapv(|v| v > threshold);
    if hole_fill {
        fill_holes(&bin)
    } else {
        bin
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdChoice {
    pub threshold: f32,
    pub f1: f64,
}

/// Candidate thresholds over a pooled, sorted score list: one value just below
/// the minimum (everything positive), then every distinct score. Each
/// candidate costs two binary searches, so the sweep is exact at any size.
pub fn threshold_candidates(sorted: &[f32]) -> Vec<f32> {
    let Some(&min) = sorted.first() else {
        return Vec::new();
    };
    let mut out = Vec::with_capacity(sorted.len() + 1);
    out.push(min.next_down());
    out.extend_from_slice(sorted);
    out.dedup();
    out
}

/// Best F1 over `candidates` given ascending positive- and negative-class
/// scores. Ties keep the smallest threshold.
fn sweep(pos: &[f32], neg: &[f32], candidates: &[f32]) -> ThresholdChoice {
    let mut best = ThresholdChoice {
        threshold: candidates[0],
        f1: -1.0,
    };
    for &t in candidates {
        let tp = (pos.len() - pos.partition_point(|&s| s <= t)) as u64;
        let fp = (neg.len() - neg.partition_point(|&s| s <= t)) as u64;
        let counts = Counts {
            tp,
            fp,
            fn_: pos.len() as u64 - tp,
            tn: neg.len() as u64 - fp,
        };
        let f1 = counts.f1();
        if f1 > best.f1 {
            best = ThresholdChoice { threshold: t, f1 };
        }
    }
    best
}

/// Threshold maximizing pooled pixel F1 over the candidate sweep of
/// [`threshold_candidates`]. With `hole_fill`, each binarized map has its
/// enclosed holes filled before counting.
pub fn best_threshold(
    maps: &[Array2<f32>],
    gt: &[Array2<bool>],
    hole_fill: bool,
) -> Result<ThresholdChoice> {
    check_shapes(maps, gt)?;
    if !gt.iter().any(|g| g.iter().any(|&b| b)) {
        return Err(Error::UndefinedMetric(
            "no anomalous ground-truth pixel; the F1 optimum is undefined".into(),
        ));
    }
    let mut pooled: Vec<f32> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite anomaly score".into()));
    }
    pooled.sort_unstable_by(f32::total_cmp);
    let candidates = threshold_candidates(&pooled);
    drop(pooled);

    // thresholding the grey-filled map equals filling each thresholded map
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (m, g) in maps.iter().zip(gt) {
        let effective = if hole_fill {
            fill_holes_grey(m)
        } else {
            m.clone()
        };
        for (&s, &b) in effective.iter().zip(g.iter()) {
            if b {
                pos.push(s)
            } else {
                neg.push(s)
            }
        }
    }
    pos.sort_unstable_by(f32::total_cmp);
    neg.sort_unstable_by(f32::total_cmp);
    Ok(sweep(&pos, &neg, &candidates))
}

/// Trapezoidal area under a monotone curve traced point by point, cut at
/// `x = limit` with linear interpolation and divided by `limit`.
struct LimitedArea {
    limit: f64,
    last: (f64, f64),
    area: f64,
    done: bool,
}

impl LimitedArea {
    fn new(limit: f64) -> Self {
        Self {
            limit,
            last: (0.0, 0.0),
            area: 0.0,
            done: false,
        }
    }

    fn push(&mut self, x: f64, y: f64) {
        if self.done {
            return;
        }
        let (x0, y0) = self.last;
        if x <= self.limit {
            self.area += (x - x0) * (y0 + y) / 2.0;
            self.last = (x, y);
            if x == self.limit {
                self.done = true;
            }
        } else {
            let yl = y0 + (y - y0) * (self.limit - x0) / (x - x0);
            self.area += (self.limit - x0) * (y0 + yl) / 2.0;
            self.done = true;
        }
    }

    fn finish(self) -> f64 {
        self.area / self.limit
    }
}

fn check_limit(limit: f64) -> Result<()> {
    if !(limit > 0.0 && limit <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "FPR limit must lie in (0, 1], got {limit}"
        )));
    }
    Ok(())
}

/// Descending-score sweep; `step` sees each pixel and `emit` fires once per
/// group of equal scores.
fn sweep_descending<T: Copy>(
    mut items: Vec<(f32, T)>,
    mut step: impl FnMut(T),
    mut emit: impl FnMut() -> bool,
) {
    items.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    let mut i = 0;
    while i < items.len() {
        let s = items[i].0;
        while i < items.len() && items[i].0 == s {
            step(items[i].1);
            i += 1;
        }
        if !emit() {
            break;
        }
    }
}

/// Pixel ROC area for false-positive rates up to `limit`, normalized by
/// `limit`. Chance level is `limit / 2`; a perfect ranking gives 1.
pub fn auroc_fpr_limit(scores: &[Array2<f32>], gt: &[Array2<bool>], limit: f64) -> Result<f64> {
    check_shapes(scores, gt)?;
    check_limit(limit)?;
    let items: Vec<(f32, bool)> = scores
        .iter()
        .zip(gt)
        .flat_map(|(s, g)| s.iter().copied().zip(g.iter().copied()))
        .collect();
    let n_pos = items.iter().filter(|x| x.1).count() as f64;
    let n_neg = items.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::UndefinedMetric(
            "ROC needs both normal and anomalous pixels".into(),
        ));
    }
    let mut area = LimitedArea::new(limit);
    let counts = std::cell::Cell::new((0.0f64, 0.0f64)); // (true positives, false positives)
    sweep_descending(
        items,
        |label| {
            let (t, f) = counts.get();
            counts.set(if label { (t + 1.0, f) } else { (t, f + 1.0) });
        },
        || {
            let (t, f) = counts.get();
            area.push(f / n_neg, t / n_pos);
            !area.done
        },
    );
    Ok(area.finish())
}

/// 8-connected components of a boolean mask. Returns a label per cell
/// (0 = background, components numbered from 1) and the component count.
pub fn connected_components(mask: &Array2<bool>) -> (Array2<u32>, u32) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for i in 0..h {
        for j in 0..w {
            if !mask[[i, j]] || labels[[i, j]] != 0 {
                continue;
            }
            next += 1;
            labels[[i, j]] = next;
            queue.push_back((i, j));
            while let Some((y, x)) = queue.pop_front() {
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = next;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, next)
}

/// Area under the per-region-overlap curve for pooled false-positive rates
/// up to `limit`, normalized by `limit`. Regions are the 8-connected
/// components of each ground-truth mask; PRO is their unweighted mean
/// coverage. Every distinct pooled score is a curve point.
pub fn aupro_fpr_limit(maps: &[Array2<f32>], gt: &[Array2<bool>], limit: f64) -> Result<f64> {
    check_shapes(maps, gt)?;
    check_limit(limit)?;
    // per pixel: None for normal, Some(region) for anomalous
    let mut items: Vec<(f32, Option<u32>)> = Vec::new();
    let mut areas: Vec<u64> = Vec::new();
    for (m, g) in maps.iter().zip(gt) {
        let (labels, n) = connected_components(g);
        let base = areas.len() as u32;
        areas.extend(std::iter::repeat_n(0, n as usize));
        for (&s, &l) in m.iter().zip(labels.iter()) {
            if l == 0 {
                items.push((s, None));
            } else {
                let region = base + l - 1;
                areas[region as usize] += 1;
                items.push((s, Some(region)));
            }
        }
    }
    if areas.is_empty() {
        return Err(Error::UndefinedMetric(
            "PRO needs at least one anomalous ground-truth region".into(),
        ));
    }
    let n_neg = items.iter().filter(|x| x.1.is_none()).count() as f64;
    if n_neg == 0.0 {
        return Err(Error::UndefinedMetric(
            "PRO false-positive rate needs normal pixels".into(),
        ));
    }
    let n_regions = areas.len() as f64;
    let weights: Vec<f64> = areas.iter().map(|&a| 1.0 / a as f64).collect();
    let state = std::cell::Cell::new((0.0f64, 0.0f64)); // (false positives, sum of coverage)
    let mut area = LimitedArea::new(limit);
    sweep_descending(
        items,
        |region| {
            let (fp, cov) = state.get();
            state.set(match region {
                None => (fp + 1.0, cov),
                Some(r) => (fp, cov + weights[r as usize]),
            });
        },
        || {
            let (fp, cov) = state.get();
            area.push(fp / n_neg, cov / n_regions);
            !area.done
        },
    );
    Ok(area.finish())
}

/// Image-level F1 with anomalous as the positive class; 0 when undefined.
pub fn class_f1(image_scores: &[f32], labels: &[bool], threshold: f32) -> f64 {
    let mut counts = Counts::default();
    for (&s, &l) in image_scores.iter().zip(labels) {
        counts.add(s > threshold, l);
    }
    counts.f1()
}

/// Image threshold maximizing [`class_f1`], chosen by the same sweep as
/// [`best_threshold`].
pub fn best_class_threshold(image_scores: &[f32], labels: &[bool]) -> Result<ThresholdChoice> {
    if image_scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} scores but {} labels",
            image_scores.len(),
            labels.len()
        )));
    }
    if !labels.iter().any(|&l| l) {
        return Err(Error::UndefinedMetric("no anomalous image".into()));
    }
    let mut sorted = image_scores.to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    let candidates = threshold_candidates(&sorted);
    let (mut pos, mut neg): (Vec<f32>, Vec<f32>) = (Vec::new(), Vec::new());
    for (&s, &l) in image_scores.iter().zip(labels) {
        if l {
            pos.push(s)
        } else {
            neg.push(s)
        }
    }
    pos.sort_unstable_by(f32::total_cmp);
    neg.sort_unstable_by(f32::total_cmp);
    Ok(sweep(&pos, &neg, &candidates))
}
