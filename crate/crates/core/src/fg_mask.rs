//! Foreground masks from the first principal component of patch features.
//!
//! Pipeline: project the centered patch features on their top principal
//! axis, threshold the scores, orient the mask so the foreground is the side
//! with the larger median per-channel variance, then dilate and close on the
//! patch grid.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};

use crate::config::CategoryConfig;
use crate::error::{Error, Result};
use crate::feature_store::ImageFeatures;
use crate::io::write_atomic;
use crate::morphology::{closing, dilate};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// Unit principal axis; its largest-magnitude component is positive.
    pub direction: Vec<f64>,
    /// Scores of the mean-centered rows on `direction`.
    pub projections: Vec<f64>,
    /// Sample variance (n - 1 denominator) along `direction`.
    pub explained_variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    /// `grid_h x grid_w`, true = foreground. All-true when `degenerate`.
    pub grid: Array2<bool>,
    pub tau: f64,
    pub kernel: usize,
    /// The thresholded mask was negated by the variance test.
    pub inverted: bool,
    /// No usable foreground was found; the mask keeps everything.
    pub degenerate: bool,
}

impl ForegroundMask {
    pub fn all_true(shape: (usize, usize), tau: f64, kernel: usize) -> Self {
        Self {
            grid: Array2::from_elem(shape, true),
            tau,
            kernel,
            inverted: false,
            degenerate: true,
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }
}

fn to_f64(x: ArrayView2<'_, f32>) -> Array2<f64> {
    x.mapv(|v| v as f64)
}

/// Top principal axis of the rows of `x` (mean-centered, not scaled).
pub fn first_principal_component(x: ArrayView2<'_, f32>) -> Result<PcaResult> {
    pca_f64(to_f64(x))
}

fn pca_f64(mut x: Array2<f64>) -> Result<PcaResult> {
    let (n, d) = x.dim();
    if n < 2 || d == 0 {
        return Err(Error::InvalidInput(format!(
            "PCA needs at least 2 rows and 1 column, got {n}x{d}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite feature value".into()));
    }
    let mean = x.mean_axis(ndarray::Axis(0)).expect("n >= 2");
    x -= &mean;
    if x.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateData("all rows identical".into()));
    }

    let xc = DMatrix::from_row_iterator(n, d, x.iter().copied());
    let denom = (n - 1) as f64;
    // eigendecompose the smaller of the covariance (d x d) and Gram (n x n) matrices
    let (value, mut direction) = if d <= n {
        let cov = (xc.transpose() * &xc) / denom;
        let (val, vec) = top_eigenpair(cov);
        (val, vec)
    } else {
        let gram = (&xc * xc.transpose()) / denom;
        let (val, u) = top_eigenpair(gram);
        let v = xc.transpose() * u;
        (val, v)
    };
    if !(value > 0.0) {
        return Err(Error::DegenerateData(format!(
            "top covariance eigenvalue is {value}"
        )));
    }
    direction /= direction.norm();

    let mut pivot = 0;
    for i in 1..d {
        if direction[i].abs() > direction[pivot].abs() {
            pivot = i;
        }
    }
    if direction[pivot] < 0.0 {
        direction = -direction;
    }

    let projections: Vec<f64> = (&xc * &direction).iter().copied().collect();
    Ok(PcaResult {
        direction: direction.iter().copied().collect(),
        projections,
        explained_variance: value,
    })
}

fn top_eigenpair(sym: DMatrix<f64>) -> (f64, nalgebra::DVector<f64>) {
    let eig = SymmetricEigen::new(sym);
    let mut best = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    (eig.eigenvalues[best], eig.eigenvectors.column(best).into_owned())
}

/// `projections[i] > tau`, strictly.
pub fn initial_mask(projections: &[f64], tau: f64) -> Vec<bool> {
    projections.iter().map(|&p| p > tau).collect()
}

fn median_channel_variance(x: ArrayView2<'_, f32>, rows: &[usize]) -> f64 {
    let n = rows.len() as f64;
    let mut variances: Vec<f64> = (0..x.ncols())
        .map(|c| {
            let mean = rows.iter().map(|&r| x[[r, c]] as f64).sum::<f64>() / n;
            rows.iter()
                .map(|&r| {
                    let d = x[[r, c]] as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / (n - 1.0)
        })
        .collect();
    variances.sort_by(f64::total_cmp);
    let m = variances.len();
    if m % 2 == 1 {
        variances[m / 2]
    } else {
        (variances[m / 2 - 1] + variances[m / 2]) / 2.0
    }
}

/// Keeps `mask` when the masked rows have a median per-channel variance at
/// least that of the unmasked rows, otherwise negates it. Returns the mask
/// and whether it was negated. With fewer than two rows on either side the
/// mask is returned unchanged.
pub fn resolve_orientation(x: ArrayView2<'_, f32>, mask: &[bool]) -> Result<(Vec<bool>, bool)> {
    if mask.len() != x.nrows() {
        return Err(Error::Validation(format!(
            "mask length {} != row count {}",
            mask.len(),
            x.nrows()
        )));
    }
    let inside: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let outside: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
    if inside.len() < 2 || outside.len() < 2 || x.ncols() == 0 {
        return Ok((mask.to_vec(), false));
    }
    if median_channel_variance(x, &inside) >= median_channel_variance(x, &outside) {
        Ok((mask.to_vec(), false))
    } else {
        Ok((mask.iter().map(|&b| !b).collect(), true))
    }
}

/// Dilation followed by closing, both with a `kernel x kernel` square.
pub fn refine_mask(grid: &Array2<bool>, kernel: usize) -> Array2<bool> {
    closing(&dilate(grid, kernel), kernel)
}

fn standardized(x: ArrayView2<'_, f32>) -> Array2<f64> {
    let mut x = to_f64(x);
    let n = x.nrows() as f64;
    for mut col in x.columns_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        let sd = var.sqrt();
        col.mapv_inplace(|v| if sd > 0.0 { (v - mean) / sd } else { v - mean });
    }
    x
}

/// Foreground mask of one image from its `config.mask_layer` patch grid.
pub fn compute_foreground_mask(
    features: &ImageFeatures,
    config: &CategoryConfig,
) -> Result<ForegroundMask> {
    let layer = features.layer(config.mask_layer).ok_or_else(|| {
        Error::Validation(format!(
            "{}: mask layer {} missing",
            features.image_id, config.mask_layer
        ))
    })?;
    let shape = (layer.grid_h as usize, layer.grid_w as usize);
    let degenerate = || ForegroundMask::all_true(shape, config.tau, config.kernel);
    if layer.n_patches() < 2 {
        return Ok(degenerate());
    }
    let x = layer.as_matrix();
    let pca = if config.standardize_features {
        pca_f64(standardized(x))
    } else {
        first_principal_component(x)
    };
    let pca = match pca {
        Ok(p) => p,
        Err(Error::DegenerateData(reason)) => {
            log::debug!("{}: degenerate PCA ({reason})", features.image_id);
            return Ok(degenerate());
        }
        Err(e) => return Err(e),
    };
    let init = initial_mask(&pca.projections, config.tau);
    let (oriented, inverted) = resolve_orientation(x, &init)?;
    let grid = Array2::from_shape_vec(shape, oriented).expect("one entry per patch");
    let refined = refine_mask(&grid, config.kernel);
    if !refined.iter().any(|&b| b) {
        return Ok(ForegroundMask {
            inverted,
            ..degenerate()
        });
    }
    Ok(ForegroundMask {
        grid: refined,
        tau: config.tau,
        kernel: config.kernel,
        inverted,
        degenerate: false,
    })
}

/// Binary PGM (P5), 255 = foreground, one byte per grid cell.
pub fn mask_to_pgm(mask: &Array2<bool>) -> Vec<u8> {
    let (h, w) = mask.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn write_mask_pgm(mask: &Array2<bool>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &mask_to_pgm(mask))
}
