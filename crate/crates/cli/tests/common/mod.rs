//! Synthetic mini-dataset: normal images from one feature cluster and
//! anomalous images with an off-cluster block of patches.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use superad::feature_store::{preprocess_dims, write_feature_file, ImageFeatures, PatchFeatureGrid};

pub const CATEGORY: &str = "can";
pub const LAYERS: [u16; 4] = [6, 12, 18, 24];
pub const DIM: usize = 32;
/// Original image size; the patch grid is half of it in each direction.
pub const ORIGINAL: (u32, u32) = (16, 24);
pub const SHORT_SIDE: u32 = 112;

pub struct Synthetic {
    pub root: PathBuf,
    pub dataset_root: PathBuf,
    pub features_root: PathBuf,
    pub config: PathBuf,
    /// (stem, implant mask at original resolution) per anomalous image.
    pub implants: Vec<(String, Array2<bool>)>,
}

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

struct Cluster {
    normal: Vec<Vec<f32>>,
    odd: Vec<Vec<f32>>,
}

impl Cluster {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut normal = Vec::new();
        let mut odd = Vec::new();
        for _ in LAYERS {
            let n = unit((0..DIM).map(|_| rng.gen_range(0.5f32..1.5)).collect());
            // off-cluster direction, orthogonal to the normal one
            let r: Vec<f32> = (0..DIM).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let dot: f32 = r.iter().zip(&n).map(|(a, b)| a * b).sum();
            let o = unit(r.iter().zip(&n).map(|(a, b)| a - dot * b).collect());
            normal.push(n);
            odd.push(o);
        }
        Cluster { normal, odd }
    }
}

fn noisy(rng: &mut ChaCha8Rng, base: &[f32], amp: f32) -> impl Iterator<Item = f32> {
    base.iter()
        .map(|&b| b + rng.gen_range(-amp..amp))
        .collect::<Vec<_>>()
        .into_iter()
}

fn make_image(rng: &mut ChaCha8Rng, c: &Cluster, id: &str, implant: Option<&Array2<bool>>) -> ImageFeatures {
    let resized = preprocess_dims(ORIGINAL, SHORT_SIDE, 14).unwrap();
    let (gh, gw) = (resized.0 / 14, resized.1 / 14);
    assert_eq!((gh * 2, gw * 2), ORIGINAL);
    let layers = LAYERS
        .iter()
        .enumerate()
        .map(|(l, &li)| {
            let mut values = Vec::with_capacity((gh * gw) as usize * DIM);
            for p in 0..(gh * gw) as usize {
                let cell = (p / gw as usize, p % gw as usize);
                let odd = implant.is_some_and(|m| m[cell]);
                let base = if odd { &c.odd[l] } else { &c.normal[l] };
                values.extend(noisy(rng, base, 0.02));
            }
            PatchFeatureGrid {
                layer_index: li,
                grid_h: gh,
                grid_w: gw,
                dim: DIM as u32,
                values,
            }
        })
        .collect();
    ImageFeatures {
        image_id: id.to_string(),
        original_size: ORIGINAL,
        resized_size: resized,
        patch_size: 14,
        cls: noisy(rng, &c.normal[3], 0.1).collect(),
        layers,
    }
}

fn write_png_mask(mask: &Array2<bool>, path: &Path) {
    let (h, w) = mask.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    img.save(path).unwrap();
}

/// 8 normal training images and 4 anomalous test images under `root`.
pub fn generate(root: &Path, seed: u64) -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cluster = Cluster::new(&mut rng);
    let features_root = root.join("features");
    let dataset_root = root.join("dataset");
    let train = features_root.join(CATEGORY).join("train").join("good");
    for i in 0..8 {
        let id = format!("train_{i:03}");
        let f = make_image(&mut rng, &cluster, &id, None);
        write_feature_file(&f, train.join(format!("{id}.sadf"))).unwrap();
    }

    let (gh, gw) = (ORIGINAL.0 as usize / 2, ORIGINAL.1 as usize / 2);
    let blocks = [(1, 2, 2, 3), (4, 7, 3, 2), (0, 0, 2, 2), (5, 1, 3, 4)];
    let mut implants = Vec::new();
    for (i, &(r0, c0, bh, bw)) in blocks.iter().enumerate() {
        let stem = format!("{i:03}_implant");
        let cells = Array2::from_shape_fn((gh, gw), |(r, c)| {
            (r0..r0 + bh).contains(&r) && (c0..c0 + bw).contains(&c)
        });
        let f = make_image(&mut rng, &cluster, &stem, Some(&cells));
        let path = features_root
            .join(CATEGORY)
            .join("test_public")
            .join("bad")
            .join(format!("{stem}.sadf"));
        write_feature_file(&f, path).unwrap();
        let pixels = Array2::from_shape_fn((ORIGINAL.0 as usize, ORIGINAL.1 as usize), |(y, x)| cells[[y / 2, x / 2]]);
        write_png_mask(
            &pixels,
            &dataset_root
                .join(CATEGORY)
                .join("test_public")
                .join("ground_truth")
                .join("bad")
                .join(format!("{stem}_mask.png")),
        );
        implants.push((stem, pixels));
    }

    let config = root.join("run.toml");
    std::fs::write(
        &config,
        format!(
            "categories = [\"{CATEGORY}\"]\n\n[category.{CATEGORY}]\nshort_side = {SHORT_SIDE}\nk_refs = 8\n"
        ),
    )
    .unwrap();
    Synthetic {
        root: root.to_path_buf(),
        dataset_root,
        features_root,
        config,
        implants,
    }
}

pub fn superad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_superad"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

impl Synthetic {
    /// build-bank, score and evaluate into `out`; returns the first failing step.
    pub fn run_pipeline(&self, out: &Path) -> Result<(), String> {
        let common = [
            "--config",
            self.config.to_str().unwrap(),
            "--dataset-root",
            self.dataset_root.to_str().unwrap(),
            "--features-root",
            self.features_root.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
        ];
        for cmd in ["build-bank", "score", "evaluate"] {
            let mut args = vec![cmd];
            args.extend(common);
            let o = superad(&args);
            if !o.status.success() {
                return Err(format!(
                    "{cmd} failed ({}): {}",
                    o.status,
                    String::from_utf8_lossy(&o.stderr)
                ));
            }
        }
        Ok(())
    }
}

/// Relative path and contents of every file below `dir`, sorted.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.push((p.strip_prefix(base).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
