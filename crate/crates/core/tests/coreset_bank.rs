use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use superad::bank::{read_memory_bank, write_memory_bank, BankWarning};
use superad::feature_store::{ImageFeatures, PatchFeatureGrid};
use superad::{build_memory_bank, greedy_coreset, select_references, CategoryConfig, ForegroundMask};
use superad_oracles as oracle;

fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f32> {
    Array2::from_shape_fn((n, d), |_| rng.gen_range(-5.0f32..5.0))
}

fn as_rows(x: ArrayView2<'_, f32>) -> Vec<Vec<f64>> {
    x.rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

#[test]
fn coreset_matches_bruteforce_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.gen_range(1..=64);
        let d = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=n);
        let pts = random_points(&mut rng, n, d);
        let sel = greedy_coreset(pts.view(), k).unwrap();
        let rows = as_rows(pts.view());
        assert_eq!(sel.selected, oracle::kcenter_greedy(&rows, k));
        assert_eq!(sel.selected.len(), k);
        assert!(sel.radii.windows(2).all(|w| w[0] >= w[1]));
        for (i, &r) in sel.radii.iter().enumerate() {
            let expect = oracle::coverage_radius(&rows, &sel.selected[..=i]);
            assert!((r - expect).abs() <= 1e-12 * expect.max(1.0));
        }
    }
}

#[test]
fn oracle_agrees_on_grid_points_with_ties() {
    // integer lattice points produce many exact distance ties
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.gen_range(1..=30);
        let pts = Array2::from_shape_fn((n, 2), |_| rng.gen_range(0..4) as f32);
        let k = rng.gen_range(1..=n);
        let sel = greedy_coreset(pts.view(), k).unwrap();
        assert_eq!(sel.selected, oracle::kcenter_greedy(&as_rows(pts.view()), k));
        let mut uniq = sel.selected.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), k);
    }
}

#[test]
fn final_radius_zero_iff_every_point_covered() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let distinct = rng.gen_range(1..6);
        let base = random_points(&mut rng, distinct, 3);
        let n = rng.gen_range(distinct..12);
        let pts = Array2::from_shape_fn((n, 3), |(i, j)| base[[i % distinct, j]]);
        for k in 1..=n {
            let sel = greedy_coreset(pts.view(), k).unwrap();
            let covered = k >= distinct;
            assert_eq!(*sel.radii.last().unwrap() == 0.0, covered, "k={k} distinct={distinct}");
        }
    }
}

#[test]
fn selection_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let n = rng.gen_range(2..40);
        let pts = random_points(&mut rng, n, 4);
        let k = rng.gen_range(1..=n);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let shuffled = Array2::from_shape_fn((n, 4), |(i, j)| pts[[perm[i], j]]);
        let a = greedy_coreset(pts.view(), k).unwrap().selected;
        let b: Vec<usize> = greedy_coreset(shuffled.view(), k)
            .unwrap()
            .selected
            .into_iter()
            .map(|i| perm[i])
            .collect();
        assert_eq!(a, b);
    }
}

fn image(id: &str, grid: (u32, u32), dim: u32, layers: &[u16], fill: impl Fn(u16, usize) -> f32) -> ImageFeatures {
    let (gh, gw) = grid;
    let n = (gh * gw * dim) as usize;
    ImageFeatures {
        image_id: id.into(),
        original_size: (gh * 14, gw * 14),
        resized_size: (gh * 14, gw * 14),
        patch_size: 14,
        cls: (0..dim).map(|i| fill(0, i as usize)).collect(),
        layers: layers
            .iter()
            .map(|&li| PatchFeatureGrid {
                layer_index: li,
                grid_h: gh,
                grid_w: gw,
                dim,
                values: (0..n).map(|i| fill(li, i)).collect(),
            })
            .collect(),
    }
}

fn two_layer_config() -> CategoryConfig {
    CategoryConfig {
        category: "can".into(),
        layer_indices: vec![6, 12],
        mask_layer: 6,
        k_refs: 2,
        ..CategoryConfig::for_category("can")
    }
}

#[test]
fn select_references_returns_all_when_k_equals_n() {
    let train: Vec<ImageFeatures> = (0..16)
        .map(|i| image(&format!("t{i:02}"), (1, 1), 3, &[6], move |_, j| (i * 3 + j) as f32))
        .collect();
    let mut ids = select_references(&train, 16).unwrap();
    ids.sort();
    let mut all: Vec<String> = train.iter().map(|t| t.image_id.clone()).collect();
    all.sort();
    assert_eq!(ids, all);
    assert!(select_references(&train, 17).is_err());
}

#[test]
fn duplicate_cls_vectors_pick_first_occurrences() {
    // CLS values: a, b, a, b, c with a=(0,0), b=(10,0), c=(5,1)
    let cls: [[f32; 2]; 5] = [[0.0, 0.0], [10.0, 0.0], [0.0, 0.0], [10.0, 0.0], [5.0, 1.0]];
    let train: Vec<ImageFeatures> = cls
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut f = image(&format!("t{i}"), (1, 1), 2, &[6], |_, _| 1.0);
            f.cls = c.to_vec();
            f
        })
        .collect();
    let ids = select_references(&train, 3).unwrap();
    let rows: Vec<Vec<f64>> = cls.iter().map(|c| c.iter().map(|&v| v as f64).collect()).collect();
    let expect: Vec<String> = oracle::kcenter_greedy(&rows, 3)
        .into_iter()
        .map(|i| format!("t{i}"))
        .collect();
    assert_eq!(ids, expect);
    assert_eq!(ids, vec!["t0", "t1", "t4"]);
}

#[test]
fn bank_rows_two_refs_no_mask() {
    let cfg = two_layer_config();
    let refs = vec![
        image("a", (2, 2), 3, &[6, 12], |l, i| (i as f32 + 1.0) * l as f32),
        image("b", (2, 2), 3, &[6, 12], |l, i| (i as f32 - 5.5) / l as f32),
    ];
    let (bank, warnings) = build_memory_bank(&refs, None, &cfg).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(bank.layer_indices(), vec![6, 12]);
    for layer in &bank.layers {
        assert_eq!(layer.vectors.dim(), (8, 3));
        for row in layer.vectors.rows() {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() <= 1e-5);
        }
    }
    // row order: reference order then row-major grid order
    let first = refs[1].layers[0].patch(0);
    let norm = first.iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!((bank.layers[0].vectors[[4, 0]] - first[0] / norm).abs() < 1e-6);
    assert_eq!(bank.source_ids, vec!["a", "b"]);
    assert_eq!(bank.config_hash, cfg.bank_hash());
}

fn mask(grid: Array2<bool>) -> ForegroundMask {
    ForegroundMask {
        grid,
        tau: 1.0,
        kernel: 3,
        inverted: false,
        degenerate: false,
    }
}

#[test]
fn bank_respects_foreground_masks() {
    let cfg = two_layer_config();
    let refs = vec![
        image("a", (2, 2), 3, &[6, 12], |l, i| (i as f32 + 1.0) * l as f32),
        image("b", (2, 2), 3, &[6, 12], |l, i| (i as f32 + 2.0) / l as f32),
    ];
    let masks = vec![
        mask(ndarray::array![[true, true], [false, true]]),
        mask(Array2::from_elem((2, 2), true)),
    ];
    let (bank, warnings) = build_memory_bank(&refs, Some(&masks), &cfg).unwrap();
    assert!(warnings.is_empty());
    for layer in &bank.layers {
        assert_eq!(layer.vectors.nrows(), 7);
    }

    let masks = vec![
        mask(Array2::from_elem((2, 2), false)),
        mask(ndarray::array![[true, false], [false, false]]),
    ];
    let (bank, warnings) = build_memory_bank(&refs, Some(&masks), &cfg).unwrap();
    assert_eq!(bank.layers[0].vectors.nrows(), 5);
    assert_eq!(
        warnings,
        vec![BankWarning::EmptyForeground { image_id: "a".into() }]
    );

    let bad = vec![mask(Array2::from_elem((3, 2), true)), mask(Array2::from_elem((2, 2), true))];
    assert!(build_memory_bank(&refs, Some(&bad), &cfg).is_err());
}

#[test]
fn zero_vectors_are_excluded() {
    let cfg = two_layer_config();
    let refs = vec![image("a", (2, 2), 3, &[6, 12], |l, i| {
        if l == 6 && i < 3 {
            0.0
        } else {
            1.0 + i as f32
        }
    })];
    let (bank, warnings) = build_memory_bank(&refs, None, &cfg).unwrap();
    assert_eq!(bank.layer(6).unwrap().vectors.nrows(), 3);
    assert_eq!(bank.layer(12).unwrap().vectors.nrows(), 4);
    assert_eq!(
        warnings,
        vec![BankWarning::ZeroVectorsDropped { image_id: "a".into(), layer_index: 6, count: 1 }]
    );
}

#[test]
fn bank_validation_errors() {
    let cfg = two_layer_config();
    assert!(build_memory_bank(&[], None, &cfg).is_err());
    let refs = vec![
        image("a", (2, 2), 3, &[6, 12], |_, i| i as f32 + 1.0),
        image("b", (2, 2), 4, &[6, 12], |_, i| i as f32 + 1.0),
    ];
    assert!(build_memory_bank(&refs, None, &cfg).is_err());
    let refs = vec![image("a", (2, 2), 3, &[6], |_, i| i as f32 + 1.0)];
    assert!(build_memory_bank(&refs, None, &cfg).is_err());
}

#[test]
fn bank_persistence_round_trip_and_determinism() {
    let dir = tempdir();
    let cfg = two_layer_config();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let refs: Vec<ImageFeatures> = (0..3)
        .map(|k| {
            let vals: Vec<f32> = (0..2 * 3 * 5 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            image(&format!("r{k}"), (2, 3), 5, &[6, 12], move |_, i| vals[i % vals.len()])
        })
        .collect();
    let (b1, _) = build_memory_bank(&refs, None, &cfg).unwrap();
    let (b2, _) = build_memory_bank(&refs, None, &cfg).unwrap();
    assert_eq!(b1, b2);
    let p1 = dir.join("one.sadb");
    let p2 = dir.join("two.sadb");
    write_memory_bank(&b1, &p1).unwrap();
    write_memory_bank(&b2, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(read_memory_bank(&p1).unwrap(), b1);
    let sidecar = std::fs::read_to_string(dir.join("one.sources.jsonl")).unwrap();
    assert_eq!(sidecar, "{\"image_id\":\"r0\"}\n{\"image_id\":\"r1\"}\n{\"image_id\":\"r2\"}\n");

    let mut bytes = std::fs::read(&p1).unwrap();
    bytes[0] = b'Z';
    std::fs::write(&p1, &bytes).unwrap();
    assert!(matches!(read_memory_bank(&p1), Err(superad::Error::Format { .. })));
    std::fs::remove_dir_all(dir).ok();
}

fn tempdir() -> std::path::PathBuf {
    use std::sync::atomic::{AtomicUsize, Ordering};
    static N: AtomicUsize = AtomicUsize::new(0);
    let d = std::env::temp_dir().join(format!(
        "superad-bank-{}-{}",
        std::process::id(),
        N.fetch_add(1, Ordering::SeqCst)
    ));
    std::fs::create_dir_all(&d).unwrap();
    d
}
