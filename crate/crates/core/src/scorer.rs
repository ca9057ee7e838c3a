//! Nearest-neighbor anomaly maps against a memory bank.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::bank::{BankLayer, MemoryBank};
use crate::config::CategoryConfig;
use crate::error::{Error, Result};
use crate::feature_store::{ImageFeatures, PatchFeatureGrid};
use crate::fg_mask::compute_foreground_mask;
use crate::io::{read_file, write_atomic, Reader, Writer};

pub use crate::morphology::fill_holes;

/// Score given to a zero-length test patch (the largest cosine distance).
pub const ZERO_PATCH_SCORE: f32 = 2.0;

const TEST_CHUNK: usize = 32;
const BANK_TILE: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub image_id: String,
    /// `original_h x original_w`, values in `[0, 2]`.
    pub full_res: Array2<f32>,
    /// Per-layer grid maps, kept only in debug runs.
    pub grid_maps: Option<Vec<(u16, Array2<f32>)>>,
    /// Maximum of `full_res`.
    pub image_score: f32,
}

#[inline]
fn dot(a: &[f64], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l] as f64;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * *y as f64;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Minimum cosine distance (`1 - max cosine similarity`) from each row of
/// `test` to the rows of `bank`, by exhaustive search. Zero test rows score
/// [`ZERO_PATCH_SCORE`]. Each (test, bank) pair is reduced in a fixed order,
/// so the result does not depend on how work is split across threads.
pub fn nn_cosine_distance(test: ArrayView2<'_, f32>, bank: ArrayView2<'_, f32>) -> Result<Vec<f64>> {
    let (n_test, dim) = test.dim();
    let (n_bank, bank_dim) = bank.dim();
    if dim != bank_dim {
        return Err(Error::Validation(format!(
            "test dim {dim} != bank dim {bank_dim}"
        )));
    }
    if n_bank == 0 {
        return Err(Error::EmptyInput("bank layer has no rows".into()));
    }
    let bank = bank.as_standard_layout();
    let bank_flat = bank.as_slice().expect("standard layout");
    let bank_inv_norm: Vec<f64> = bank_flat
        .chunks_exact(dim.max(1))
        .map(|r| {
            let n = norm(r);
            if n > 0.0 {
                1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    let test = test.as_standard_layout();
    let test_flat = test.as_slice().expect("standard layout");

    let mut out = vec![0.0f64; n_test];
    out.par_chunks_mut(TEST_CHUNK)
        .enumerate()
        .for_each(|(chunk, out)| {
            let start = chunk * TEST_CHUNK;
            let units: Vec<Option<Vec<f64>>> = (start..start + out.len())
                .map(|i| {
                    let row = &test_flat[i * dim..(i + 1) * dim];
                    let n = norm(row);
                    (n > 0.0).then(|| row.iter().map(|&x| x as f64 / n).collect())
                })
                .collect();
            let mut best = vec![f64::NEG_INFINITY; out.len()];
            for tile_start in (0..n_bank).step_by(BANK_TILE) {
                let tile_end = (tile_start + BANK_TILE).min(n_bank);
                for (t, unit) in units.iter().enumerate() {
                    let Some(unit) = unit else { continue };
                    let mut m = best[t];
                    for b in tile_start..tile_end {
                        let sim = dot(unit, &bank_flat[b * dim..(b + 1) * dim]) * bank_inv_norm[b];
                        if sim > m {
                            m = sim;
                        }
                    }
                    best[t] = m;
                }
            }
            for ((o, unit), b) in out.iter_mut().zip(&units).zip(best) {
                *o = if unit.is_some() {
                    (1.0 - b).clamp(0.0, 2.0)
                } else {
                    ZERO_PATCH_SCORE as f64
                };
            }
        });
    Ok(out)
}

/// Per-patch anomaly scores of one layer, shaped as the patch grid.
pub fn layer_anomaly_map(test_grid: &PatchFeatureGrid, bank_layer: &BankLayer) -> Result<Array2<f32>> {
    if test_grid.layer_index != bank_layer.layer_index {
        return Err(Error::Validation(format!(
            "test layer {} scored against bank layer {}",
            test_grid.layer_index, bank_layer.layer_index
        )));
    }
    let scores = nn_cosine_distance(test_grid.as_matrix(), bank_layer.vectors.view())?;
    Ok(Array2::from_shape_vec(
        (test_grid.grid_h as usize, test_grid.grid_w as usize),
        scores.into_iter().map(|s| s as f32).collect(),
    )
    .expect("one score per patch"))
}

/// Elementwise mean of equally-shaped maps.
pub fn fuse_maps(maps: &[Array2<f32>]) -> Result<Array2<f32>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::EmptyInput("no maps to fuse".into()))?;
    if let Some(m) = maps.iter().find(|m| m.dim() != first.dim()) {
        return Err(Error::Validation(format!(
            "map shapes differ: {:?} vs {:?}",
            first.dim(),
            m.dim()
        )));
    }
    let mut acc = Array2::<f64>::zeros(first.dim());
    for m in maps {
        acc.zip_mut_with(m, |a, &v| *a += v as f64);
    }
    let n = maps.len() as f64;
    Ok(acc.mapv(|a| (a / n) as f32))
}

/// Source sample positions for bilinear resampling of `src` cells onto
/// `dst` pixels, cell centers aligned to pixel-block centers and clamped at
/// the edges: (lower index, upper index, upper weight).
fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|x| {
            let u = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = u.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, u - lo as f64)
        })
        .collect()
}

/// Bilinear upsampling of a grid map to `target = (H, W)` pixels.
pub fn upsample(grid_map: &Array2<f32>, target: (usize, usize)) -> Result<Array2<f32>> {
    let (h, w) = grid_map.dim();
    let (th, tw) = target;
    if h == 0 || w == 0 {
        return Err(Error::EmptyInput("empty grid map".into()));
    }
    if th < h || tw < w {
        return Err(Error::InvalidArgument(format!(
            "target {th}x{tw} is smaller than grid {h}x{w}"
        )));
    }
    let ys = linear_taps(h, th);
    let xs = linear_taps(w, tw);
    // interpolate along x for every grid row, then along y
    let rows: Vec<Vec<f64>> = grid_map
        .rows()
        .into_iter()
        .map(|row| {
            xs.iter()
                .map(|&(lo, hi, f)| row[lo] as f64 * (1.0 - f) + row[hi] as f64 * f)
                .collect()
        })
        .collect();
    let mut out = Array2::<f32>::zeros((th, tw));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(ys.par_iter())
        .for_each(|(mut line, &(lo, hi, f))| {
            for (x, px) in line.iter_mut().enumerate() {
                *px = (rows[lo][x] * (1.0 - f) + rows[hi][x] * f) as f32;
            }
        });
    Ok(out)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Gaussian blur with radius `ceil(3 sigma)` and mirrored borders
/// (`d c b a | a b c d`). `sigma == 0` returns the input unchanged.
pub fn smooth(map: &Array2<f32>, sigma: f64) -> Result<Array2<f32>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 || map.is_empty() {
        return Ok(map.clone());
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = map.dim();
    let src = map.mapv(|v| v as f64);
    let mut tmp = Array2::<f64>::zeros((h, w));
    tmp.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut line)| {
            for j in 0..w {
                line[j] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * src[[i, reflect(j as isize + k as isize - r, w)]])
                    .sum();
            }
        });
    let mut out = Array2::<f32>::zeros((h, w));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut line)| {
            for j in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * tmp[[reflect(i as isize + k as isize - r, h), j]])
                    .sum();
                line[j] = v as f32;
            }
        });
    Ok(out)
}

/// Full scoring of one test image: per-layer maps, optional background
/// suppression, fusion, upsampling to the original size and smoothing.
pub fn score_image(
    test: &ImageFeatures,
    bank: &MemoryBank,
    config: &CategoryConfig,
    keep_grid_maps: bool,
) -> Result<AnomalyMap> {
    if bank.config_hash != config.bank_hash() {
        return Err(Error::Validation(format!(
            "bank for '{}' was built with a different configuration",
            bank.category
        )));
    }
    test.check_layers(&config.layer_indices)?;
    if bank.layer_indices() != config.layer_indices {
        return Err(Error::Validation(format!(
            "bank layers {:?} do not match configured {:?}",
            bank.layer_indices(),
            config.layer_indices
        )));
    }
    let mut maps = Vec::with_capacity(test.layers.len());
    for grid in &test.layers {
        let bank_layer = bank.layer(grid.layer_index).expect("layers checked");
        maps.push(layer_anomaly_map(grid, bank_layer)?);
    }
    let mut fused = fuse_maps(&maps)?;
    if config.use_fg_mask {
        let mask = compute_foreground_mask(test, config)?;
        fused.zip_mut_with(&mask.grid, |v, &fg| {
            if !fg {
                *v = 0.0;
            }
        });
    }
    let (oh, ow) = test.original_size;
    let full = upsample(&fused, (oh as usize, ow as usize))?;
    let full_res = smooth(&full, config.smoothing_sigma)?;
    let image_score = full_res.iter().copied().fold(0.0f32, f32::max);
    let grid_maps = keep_grid_maps.then(|| {
        test.layers
            .iter()
            .map(|g| g.layer_index)
            .zip(maps)
            .collect()
    });
    Ok(AnomalyMap {
        image_id: test.image_id.clone(),
        full_res,
        grid_maps,
        image_score,
    })
}

/// `.anom` encoding: u32 height, u32 width, then row-major f32 values (LE).
pub fn anomaly_map_to_bytes(map: &Array2<f32>) -> Vec<u8> {
    let (h, w) = map.dim();
    let mut out = Writer::new();
    out.u32(h as u32);
    out.u32(w as u32);
    out.f32s(&map.iter().copied().collect::<Vec<_>>());
    out.buf
}

pub fn write_anomaly_map(map: &Array2<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &anomaly_map_to_bytes(map))
}

pub fn read_anomaly_map(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    let data = read_file(path)?;
    let mut r = Reader::new(&data, path);
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let count = h.checked_mul(w).ok_or_else(|| r.corrupt("map size overflows"))?;
    let values = r.f32s(count, "map values")?;
    r.finish()?;
    Ok(Array2::from_shape_vec((h, w), values).expect("count = h*w"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn self_match_is_zero_and_orthogonal_is_one() {
        let bank = array![[1.0f32, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let test = array![[3.0f32, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]];
        let d = nn_cosine_distance(test.view(), bank.view()).unwrap();
        assert!(d[0].abs() <= 1e-6 && d[1].abs() <= 1e-6);
        assert!((d[2] - 1.0).abs() <= 1e-6);
        assert_eq!(d[3], ZERO_PATCH_SCORE as f64);
    }

    #[test]
    fn dim_mismatch() {
        let bank = array![[1.0f32, 0.0]];
        let test = array![[1.0f32, 0.0, 0.0]];
        assert!(matches!(
            nn_cosine_distance(test.view(), bank.view()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn fuse_examples() {
        let z = Array2::<f32>::zeros((2, 3));
        let o = Array2::<f32>::ones((2, 3));
        assert_eq!(fuse_maps(&[z.clone()]).unwrap(), z);
        assert_eq!(fuse_maps(&[z.clone(), o]).unwrap(), Array2::from_elem((2, 3), 0.5));
        assert!(fuse_maps(&[z, Array2::zeros((3, 2))]).is_err());
        assert!(fuse_maps(&[]).is_err());
    }

    #[test]
    fn upsample_hand_case() {
        let g = array![[0.0f32, 1.0]];
        let up = upsample(&g, (1, 4)).unwrap();
        assert_eq!(up, array![[0.0f32, 0.25, 0.75, 1.0]]);
    }

    #[test]
    fn upsample_constant_and_identity() {
        let g = Array2::from_elem((3, 4), 0.7f32);
        assert!(upsample(&g, (42, 56)).unwrap().iter().all(|&v| v == 0.7));
        let g = array![[0.1f32, 0.5], [0.9, 0.3]];
        assert_eq!(upsample(&g, (2, 2)).unwrap(), g);
        assert!(upsample(&g, (1, 4)).is_err());
    }

    #[test]
    fn smooth_identity_constant_and_impulse() {
        let m = array![[0.0f32, 1.0, 2.0], [3.0, 4.0, 5.0]];
        assert_eq!(smooth(&m, 0.0).unwrap(), m);
        let c = Array2::from_elem((7, 9), 0.25f32);
        let s = smooth(&c, 1.5).unwrap();
        assert!(s.iter().all(|&v| (v - 0.25).abs() < 1e-9));
        let mut imp = Array2::<f32>::zeros((11, 11));
        imp[[5, 5]] = 1.0;
        let s = smooth(&imp, 1.0).unwrap();
        let (mut bi, mut bv) = ((0, 0), f32::MIN);
        for ((i, j), &v) in s.indexed_iter() {
            if v > bv {
                bv = v;
                bi = (i, j);
            }
        }
        assert_eq!(bi, (5, 5));
        for i in 0..11 {
            for j in 0..11 {
                assert!((s[[i, j]] - s[[10 - i, j]]).abs() < 1e-7);
                assert!((s[[i, j]] - s[[j, i]]).abs() < 1e-7);
            }
        }
        assert!((s.sum() - 1.0).abs() < 1e-5);
        assert!(smooth(&imp, -1.0).is_err());
    }

    #[test]
    fn reflect_indices() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
        assert_eq!(reflect(-5, 2), 0);
    }

    #[test]
    fn anom_round_trip() {
        let dir = std::env::temp_dir().join(format!("anom-{}", std::process::id()));
        let m = array![[0.0f32, 1.5, 2.0], [0.25, 0.5, 1e-7]];
        let p = dir.join("x.anom");
        write_anomaly_map(&m, &p).unwrap();
        assert_eq!(read_anomaly_map(&p).unwrap(), m);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], &[2, 0, 0, 0, 3, 0, 0, 0]);
        std::fs::remove_dir_all(dir).ok();
    }
}
