//! Farthest-first (greedy k-center) selection of reference images.

use ndarray::ArrayView2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature_store::ImageFeatures;

/// Result of a greedy coreset run.
#[derive(Debug, Clone, PartialEq)]
pub struct CoresetSelection {
    /// Point indices in selection order.
    pub selected: Vec<usize>,
    /// `radii[i]`: largest distance from any point to its nearest center among
    /// the first `i + 1` selections.
    pub radii: Vec<f64>,
}

fn sq_dist(a: ndarray::ArrayView1<'_, f32>, b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

/// Index of the maximum of `values`, restricted to `eligible`; ties resolve to
/// the lowest index.
fn argmax_lowest(values: &[f64], eligible: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if !eligible(i) {
            continue;
        }
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Greedy k-center selection over the rows of `points`.
///
/// The first center is the point farthest from the centroid; every later one
/// is the unselected point farthest from the current center set. Ties go to
/// the lowest index throughout. Distances are exact Euclidean.
pub fn greedy_coreset(points: ArrayView2<'_, f32>, k: usize) -> Result<CoresetSelection> {
    let (n, d) = points.dim();
    if n == 0 {
        return Err(Error::EmptyInput("coreset over zero points".into()));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in 1..={n}"
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite coordinate".into()));
    }

    let mut centroid = vec![0.0f64; d];
    for row in points.rows() {
        for (c, &x) in centroid.iter_mut().zip(row) {
            *c += x as f64;
        }
    }
    for c in &mut centroid {
        *c /= n as f64;
    }
    let to_centroid: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_dist(points.row(i), &centroid))
        .collect();
    let first = argmax_lowest(&to_centroid, |_| true).expect("n > 0");

    let mut chosen = vec![false; n];
    let mut selected = Vec::with_capacity(k);
    let mut radii = Vec::with_capacity(k);
    let mut nearest = vec![f64::INFINITY; n];
    let mut next = first;
    loop {
        chosen[next] = true;
        selected.push(next);
        let center: Vec<f64> = points.row(next).iter().map(|&x| x as f64).collect();
        nearest.par_iter_mut().enumerate().for_each(|(i, m)| {
            let dist = sq_dist(points.row(i), &center);
            if dist < *m {
                *m = dist;
            }
        });
        radii.push(nearest.iter().copied().fold(0.0, f64::max).sqrt());
        if selected.len() == k {
            break;
        }
        next = argmax_lowest(&nearest, |i| !chosen[i]).expect("k <= n leaves a candidate");
    }
    Ok(CoresetSelection { selected, radii })
}

/// Picks `k` diverse reference images by greedy coreset over their CLS
/// embeddings; ids are returned in selection order.
pub fn select_references(train: &[ImageFeatures], k: usize) -> Result<Vec<String>> {
    if train.len() < k {
        return Err(Error::InvalidArgument(format!(
            "need at least {k} training images, have {}",
            train.len()
        )));
    }
    if train.is_empty() {
        return Err(Error::EmptyInput("no training images".into()));
    }
    let dim = train[0].cls.len();
    if let Some(bad) = train.iter().find(|f| f.cls.len() != dim) {
        return Err(Error::Validation(format!(
            "{}: CLS dim {} differs from {dim}",
            bad.image_id,
            bad.cls.len()
        )));
    }
    let flat: Vec<f32> = train.iter().flat_map(|f| f.cls.iter().copied()).collect();
    let points = ArrayView2::from_shape((train.len(), dim), &flat).expect("shape checked");
    let selection = greedy_coreset(points, k)?;
    Ok(selection
        .selected
        .into_iter()
        .map(|i| train[i].image_id.clone())
        .collect())
}
