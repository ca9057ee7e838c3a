use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use superad::feature_store::{preprocess_dims, ImageFeatures, PatchFeatureGrid};
use superad::scorer::{
    fill_holes, fuse_maps, nn_cosine_distance, read_anomaly_map, smooth, upsample, write_anomaly_map,
    ZERO_PATCH_SCORE,
};
use superad::{build_memory_bank, score_image, CategoryConfig};
use superad_oracles as oracle;

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f32> {
    Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0f32..1.0))
}

fn to_rows(a: &Array2<f32>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

#[test]
fn nn_distance_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..100 {
        let d = rng.gen_range(1..=48);
        let (nt, nb) = (rng.gen_range(1..=80), rng.gen_range(1..=120));
        let test = random_rows(&mut rng, nt, d);
        let bank = random_rows(&mut rng, nb, d);
        let got = nn_cosine_distance(test.view(), bank.view()).unwrap();
        let want = oracle::nn_cosine_distance(&to_rows(&test), &to_rows(&bank));
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-7, "{g} vs {w}");
        }
    }
}

#[test]
fn self_match_scores_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    for _ in 0..20 {
        let bank = random_rows(&mut rng, 50, 24);
        let d = nn_cosine_distance(bank.view(), bank.view()).unwrap();
        assert!(d.iter().all(|&v| v <= 1e-6));
    }
}

#[test]
fn growing_the_bank_never_raises_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    for _ in 0..30 {
        let test = random_rows(&mut rng, 40, 16);
        let big = random_rows(&mut rng, 60, 16);
        let cut = rng.gen_range(1..60);
        let small = big.slice(ndarray::s![..cut, ..]).to_owned();
        let ds = nn_cosine_distance(test.view(), small.view()).unwrap();
        let db = nn_cosine_distance(test.view(), big.view()).unwrap();
        assert!(ds.iter().zip(&db).all(|(s, b)| b <= s));
    }
}

#[test]
fn scores_are_bounded_and_zero_patches_are_maximal() {
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    let mut test = random_rows(&mut rng, 30, 8);
    test.row_mut(3).fill(0.0);
    let bank = random_rows(&mut rng, 30, 8);
    let d = nn_cosine_distance(test.view(), bank.view()).unwrap();
    assert!(d.iter().all(|&v| (0.0..=2.0).contains(&v)));
    assert_eq!(d[3], ZERO_PATCH_SCORE as f64);
}

#[test]
fn fusion_stays_within_layer_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for _ in 0..50 {
        let maps: Vec<Array2<f32>> = (0..rng.gen_range(1..5))
            .map(|_| Array2::from_shape_fn((5, 7), |_| rng.gen_range(0.0f32..2.0)))
            .collect();
        let fused = fuse_maps(&maps).unwrap();
        for (ix, &v) in fused.indexed_iter() {
            let lo = maps.iter().map(|m| m[ix]).fold(f32::INFINITY, f32::min);
            let hi = maps.iter().map(|m| m[ix]).fold(f32::NEG_INFINITY, f32::max);
            assert!(lo <= v && v <= hi);
        }
    }
}

#[test]
fn upsampling_keeps_a_spike_in_its_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(56);
    for _ in 0..100 {
        let (gh, gw) = (rng.gen_range(1..8), rng.gen_range(1..8));
        let mut grid = Array2::from_shape_fn((gh, gw), |_| rng.gen_range(0.0f32..0.2));
        let (si, sj) = (rng.gen_range(0..gh), rng.gen_range(0..gw));
        grid[[si, sj]] = 1.0;
        let (fh, fw) = (rng.gen_range(4..10), rng.gen_range(4..10));
        let (h, w) = (gh * fh + rng.gen_range(0..fh), gw * fw + rng.gen_range(0..fw));
        let up = upsample(&grid, (h, w)).unwrap();
        assert_eq!(up.dim(), (h, w));
        let (mut best, mut at) = (f32::NEG_INFINITY, (0, 0));
        for (ix, &v) in up.indexed_iter() {
            if v > best {
                best = v;
                at = ix;
            }
        }
        let block_i = at.0 * gh / h;
        let block_j = at.1 * gw / w;
        assert_eq!((block_i, block_j), (si, sj), "grid {gh}x{gw} -> {h}x{w}");
        assert!(up.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn smoothing_preserves_constants_and_zero_sigma_is_identity() {
    let c = Array2::from_elem((9, 13), 0.75f32);
    let s = smooth(&c, 2.0).unwrap();
    assert!(s.iter().all(|&v| (v - 0.75).abs() <= 1e-6));
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    let r = Array2::from_shape_fn((6, 6), |_| rng.gen_range(0.0f32..2.0));
    assert_eq!(smooth(&r, 0.0).unwrap(), r);
    let sm = smooth(&r, 1.5).unwrap();
    let (lo, hi) = r.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(sm.iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
}

#[test]
fn fill_holes_is_idempotent_and_extensive() {
    let mut rng = ChaCha8Rng::seed_from_u64(58);
    for _ in 0..200 {
        let m = Array2::from_shape_fn((12, 12), |_| rng.gen_bool(0.45));
        let f = fill_holes(&m);
        assert!(m.iter().zip(f.iter()).all(|(&a, &b)| !a || b));
        assert_eq!(fill_holes(&f), f);
    }
}

fn image(id: &str, orig: (u32, u32), dim: u32, layers: &[u16], patch: impl Fn(usize, u16) -> Vec<f32>) -> ImageFeatures {
    let resized = preprocess_dims(orig, 28, 14).unwrap();
    let (gh, gw) = (resized.0 / 14, resized.1 / 14);
    ImageFeatures {
        image_id: id.into(),
        original_size: orig,
        resized_size: resized,
        patch_size: 14,
        cls: vec![1.0; dim as usize],
        layers: layers
            .iter()
            .map(|&li| PatchFeatureGrid {
                layer_index: li,
                grid_h: gh,
                grid_w: gw,
                dim,
                values: (0..(gh * gw) as usize).flat_map(|p| patch(p, li)).collect(),
            })
            .collect(),
    }
}

fn scorer_config() -> CategoryConfig {
    CategoryConfig {
        short_side: 28,
        layer_indices: vec![6, 12],
        ..CategoryConfig::for_category("can")
    }
}

#[test]
fn scoring_a_reference_against_itself_is_near_zero() {
    let cfg = scorer_config();
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let values: Vec<Vec<f32>> = (0..8).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let img = image("ref", (40, 60), 6, &[6, 12], |p, _| values[p].clone());
    let (bank, warnings) = build_memory_bank(std::slice::from_ref(&img), None, &cfg).unwrap();
    assert!(warnings.is_empty());
    let map = score_image(&img, &bank, &cfg, true).unwrap();
    assert_eq!(map.full_res.dim(), (40, 60));
    assert!(map.full_res.iter().all(|&v| v <= 1e-6));
    assert!(map.image_score <= 1e-6);
    assert_eq!(map.grid_maps.as_ref().map(|g| g.len()), Some(2));
}

#[test]
fn an_orthogonal_patch_stands_out() {
    let cfg = scorer_config();
    let normal = |_: usize, _: u16| vec![1.0f32, 0.0, 0.0, 0.0];
    let train = image("train", (56, 56), 4, &[6, 12], normal);
    let (bank, _) = build_memory_bank(&[train], None, &cfg).unwrap();
    // 2x2 grid; patch 3 (bottom-right) is orthogonal to everything in the bank
    let test = image("test", (56, 56), 4, &[6, 12], |p, _| {
        if p == 3 {
            vec![0.0, 1.0, 0.0, 0.0]
        } else {
            vec![1.0, 0.0, 0.0, 0.0]
        }
    });
    let map = score_image(&test, &bank, &cfg, false).unwrap();
    assert!((map.image_score - 1.0).abs() <= 1e-6);
    assert!(map.grid_maps.is_none());
    let (mut best, mut at) = (f32::NEG_INFINITY, (0, 0));
    for (ix, &v) in map.full_res.indexed_iter() {
        if v > best {
            best = v;
            at = ix;
        }
    }
    assert!(at.0 >= 28 && at.1 >= 28, "peak at {at:?}");
    assert!(map.full_res[[0, 0]] <= 1e-6);
    // determinism
    assert_eq!(score_image(&test, &bank, &cfg, false).unwrap(), map);
}

#[test]
fn mismatched_configuration_is_rejected() {
    let cfg = scorer_config();
    let img = image("x", (28, 28), 2, &[6, 12], |_, _| vec![1.0, 1.0]);
    let (bank, _) = build_memory_bank(std::slice::from_ref(&img), None, &cfg).unwrap();
    let other = CategoryConfig {
        k_refs: 3,
        ..cfg.clone()
    };
    assert!(score_image(&img, &bank, &other, false).is_err());
    let smoothed = CategoryConfig {
        smoothing_sigma: 1.0,
        ..cfg.clone()
    };
    assert!(score_image(&img, &bank, &smoothed, false).is_ok());
    let missing = image("y", (28, 28), 2, &[6], |_, _| vec![1.0, 1.0]);
    assert!(score_image(&missing, &bank, &cfg, false).is_err());
}

#[test]
fn anomaly_maps_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.anom");
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let m = Array2::from_shape_fn((7, 11), |_| rng.gen_range(0.0f32..2.0));
    write_anomaly_map(&m, &path).unwrap();
    assert_eq!(read_anomaly_map(&path).unwrap(), m);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.pop();
    std::fs::write(&path, &bytes).unwrap();
    assert!(read_anomaly_map(&path).is_err());
}
