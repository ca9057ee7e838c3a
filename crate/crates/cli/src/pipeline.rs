//! The pipeline stages behind each subcommand. Every stage reads only
//! persisted outputs of earlier stages, so any stage can be rerun alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use superad::fg_mask::write_mask_pgm;
use superad::metrics::{
    aupro_fpr_limit, auroc_fpr_limit, best_class_threshold, best_threshold, binarize, class_f1,
    pixel_f1, FPR_LIMIT,
};
use superad::scorer::{read_anomaly_map, write_anomaly_map};
use superad::{
    build_memory_bank, compute_foreground_mask, read_feature_file, read_memory_bank, score_image,
    select_references, write_atomic, write_memory_bank, BankWarning, CategoryConfig, EvalResult,
    ImageFeatures,
};

use crate::dataset;
use crate::error::{CliError, Result};
use crate::render;
use crate::report::Report;
use crate::settings::{Layout, Settings};

/// One line of a split's score index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image_id: String,
    pub label: Option<String>,
    pub stem: String,
    pub image_score: f32,
}

impl ScoreRecord {
    fn rel(&self) -> PathBuf {
        match &self.label {
            Some(l) => Path::new(l).join(&self.stem),
            None => PathBuf::from(&self.stem),
        }
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Runs `f` over `items` in parallel and returns the results in input order,
/// reporting the first failure by position.
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync + Send) -> Result<Vec<U>> {
    items.par_iter().map(f).collect::<Vec<_>>().into_iter().collect()
}

fn check_unique_ids(images: &[ImageFeatures], category: &str) -> Result<()> {
    let mut seen = BTreeMap::new();
    for f in images {
        if seen.insert(f.image_id.as_str(), ()).is_some() {
            return Err(CliError::Data(format!(
                "{category}: image id '{}' appears twice in the training split",
                f.image_id
            )));
        }
    }
    Ok(())
}

/// Selects references from the training split, builds the memory bank and
/// writes it. Returns the bank paths.
pub fn build_banks(settings: &Settings, debug: bool) -> Result<Vec<PathBuf>> {
    settings
        .categories
        .par_iter()
        .map(|cat| build_bank(settings, cat, debug))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

fn build_bank(settings: &Settings, category: &str, debug: bool) -> Result<PathBuf> {
    let cfg = settings.config(category);
    let split = &settings.layout.train_split;
    let entries = dataset::list_split(settings, category, split)?;
    if entries.is_empty() {
        return Err(CliError::Data(format!(
            "no .{} files under {}",
            dataset::FEATURE_EXT,
            dataset::split_dir(settings, category, split).display()
        )));
    }
    let train = par_map(&entries, |e| Ok(read_feature_file(&e.feature_path)?))?;
    check_unique_ids(&train, category)?;
    for (f, e) in train.iter().zip(&entries) {
        f.check_layers(&cfg.layer_indices)
            .map_err(|err| CliError::Data(format!("{}: {err}", e.feature_path.display())))?;
    }

    let k = if cfg.k_refs > train.len() {
        warn!(
            "{category}: k_refs = {} but only {} training images; using all of them",
            cfg.k_refs,
            train.len()
        );
        train.len()
    } else {
        cfg.k_refs
    };
    let ids = select_references(&train, k)?;
    info!("{category}: selected references {}", ids.join(", "));
    let by_id: BTreeMap<&str, &ImageFeatures> = train.iter().map(|f| (f.image_id.as_str(), f)).collect();
    let refs: Vec<ImageFeatures> = ids.iter().map(|id| by_id[id.as_str()].clone()).collect();

    let masks = if cfg.use_fg_mask {
        let masks = par_map(&refs, |f| Ok(compute_foreground_mask(f, cfg)?))?;
        for (f, m) in refs.iter().zip(&masks) {
            if m.degenerate {
                warn!("{category}/{}: degenerate foreground mask, keeping all patches", f.image_id);
            }
            if debug {
                write_mask_pgm(&m.grid, dataset::fg_mask_path(settings, category, &f.image_id))?;
            }
        }
        Some(masks)
    } else {
        None
    };
    let (bank, warnings) = build_memory_bank(&refs, masks.as_deref(), cfg)?;
    for w in warnings {
        match w {
            BankWarning::EmptyForeground { image_id } => {
                warn!("{category}/{image_id}: empty foreground, using the full grid")
            }
            BankWarning::ZeroVectorsDropped {
                image_id,
                layer_index,
                count,
            } => warn!("{category}/{image_id}: dropped {count} zero vectors from layer {layer_index}"),
        }
    }
    let path = dataset::bank_path(settings, category);
    write_memory_bank(&bank, &path)?;
    info!(
        "{category}: bank with {} vectors per layer written to {}",
        bank.layers.first().map_or(0, |l| l.vectors.nrows()),
        path.display()
    );
    Ok(path)
}

fn load_bank(settings: &Settings, category: &str, cfg: &CategoryConfig) -> Result<superad::MemoryBank> {
    let path = dataset::bank_path(settings, category);
    if !path.is_file() {
        return Err(CliError::Data(format!(
            "no memory bank for {category} at {}; run build-bank first",
            path.display()
        )));
    }
    let bank = read_memory_bank(&path)?;
    if bank.config_hash != cfg.bank_hash() || bank.category != category {
        return Err(CliError::Config(format!(
            "{} was built with a different configuration; rerun build-bank",
            path.display()
        )));
    }
    Ok(bank)
}

/// Scores every image of `split`, writing one `.anom` map per image and a
/// JSON-lines index of image scores per category.
pub fn score(settings: &Settings, split: &str, debug: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for cat in &settings.categories {
        out.push(score_category(settings, cat, split, debug)?);
    }
    Ok(out)
}

fn score_category(settings: &Settings, category: &str, split: &str, debug: bool) -> Result<PathBuf> {
    let cfg = settings.config(category);
    let bank = load_bank(settings, category, cfg)?;
    let entries = dataset::list_split(settings, category, split)?;
    let records = par_map(&entries, |e| {
        let features = read_feature_file(&e.feature_path)?;
        let map = score_image(&features, &bank, cfg, debug)
            .map_err(|err| CliError::Data(format!("{}: {err}", e.feature_path.display())))?;
        let rel = e.rel();
        write_anomaly_map(&map.full_res, dataset::map_path(settings, category, split, &rel))?;
        for (layer, grid) in map.grid_maps.iter().flatten() {
            write_anomaly_map(grid, dataset::debug_map_path(settings, category, split, &rel, *layer))?;
        }
        Ok(ScoreRecord {
            image_id: features.image_id,
            label: e.label.clone(),
            stem: e.stem.clone(),
            image_score: map.image_score,
        })
    })?;
    let mut index = Vec::new();
    for r in &records {
        index.extend(serde_json::to_vec(r).expect("serializable"));
        index.push(b'\n');
    }
    let path = dataset::index_path(settings, category, split);
    write_atomic(&path, &index)?;
    info!("{category}/{split}: scored {} images", records.len());
    Ok(path)
}

pub fn read_index(settings: &Settings, category: &str, split: &str) -> Result<Vec<ScoreRecord>> {
    let path = dataset::index_path(settings, category, split);
    if !path.is_file() {
        return Err(CliError::Data(format!(
            "no scores for {category}/{split} at {}; run score first",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Where evaluation thresholds come from.
#[derive(Debug, Clone, Default)]
pub struct ThresholdSource {
    /// Fixed pixel threshold for every category.
    pub pixel: Option<f32>,
    /// Report of an earlier evaluation whose per-category thresholds are reused.
    pub frozen: Option<PathBuf>,
}

fn is_anomalous(label: &Option<String>, layout: &Layout) -> bool {
    label.as_deref() != Some(layout.good_label.as_str())
}

fn load_ground_truth(
    settings: &Settings,
    category: &str,
    split: &str,
    records: &[ScoreRecord],
    maps: &[Array2<f32>],
) -> Result<Vec<Array2<bool>>> {
    let layout = &settings.layout;
    if let Some(r) = records.iter().find(|r| r.label.is_none()) {
        return Err(CliError::Data(format!(
            "{category}/{split}: image '{}' has no label folder, so it has no ground truth",
            r.stem
        )));
    }
    let mut missing = Vec::new();
    let mut paths = Vec::with_capacity(records.len());
    for r in records {
        let label = r.label.as_deref().expect("checked above");
        if is_anomalous(&r.label, layout) {
            let p = dataset::gt_path(settings, category, split, label, &r.stem)?;
            if !p.is_file() {
                missing.push(p.display().to_string());
            }
            paths.push(Some(p));
        } else {
            paths.push(None);
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "{category}/{split}: {} ground-truth masks missing:\n  {}",
            missing.len(),
            missing.join("\n  ")
        )));
    }
    let idx: Vec<usize> = (0..records.len()).collect();
    par_map(&idx, |&i| match &paths[i] {
        None => Ok(Array2::from_elem(maps[i].dim(), false)),
        Some(p) => {
            let gt = render::read_mask(p)?;
            if gt.dim() != maps[i].dim() {
                return Err(CliError::Data(format!(
                    "{}: mask is {:?} but the anomaly map is {:?}",
                    p.display(),
                    gt.dim(),
                    maps[i].dim()
                )));
            }
            Ok(gt)
        }
    })
}

/// Thresholds, pixel F1, limited AU-ROC / AU-PRO and class F1 for every
/// category, plus binarized masks and a combined report.
pub fn evaluate(settings: &Settings, split: &str, thresholds: &ThresholdSource) -> Result<Report> {
    let frozen = thresholds.frozen.as_deref().map(read_json::<Report>).transpose()?;
    let mut results = Vec::new();
    for cat in &settings.categories {
        let fixed = match &frozen {
            Some(report) => {
                let r = report.category(cat).ok_or_else(|| {
                    CliError::Config(format!(
                        "{} has no thresholds for category '{cat}'",
                        thresholds.frozen.as_ref().expect("frozen").display()
                    ))
                })?;
                Some((r.threshold, r.image_threshold))
            }
            None => None,
        };
        let pixel = thresholds.pixel.or(fixed.map(|f| f.0));
        let result = evaluate_category(settings, cat, split, pixel, fixed.map(|f| f.1))?;
        write_json(&result, &dataset::eval_path(settings, cat, split))?;
        info!(
            "{cat}/{split}: F1 {:.4} at {:.6}, AU-ROC {:.4}, AU-PRO {:.4}",
            result.pixel_f1, result.threshold, result.auroc_limit, result.aupro_limit
        );
        results.push(result);
    }
    let report = Report::new(split, FPR_LIMIT, results)?;
    write_report(settings, &report)?;
    Ok(report)
}

fn evaluate_category(
    settings: &Settings,
    category: &str,
    split: &str,
    pixel_threshold: Option<f32>,
    image_threshold: Option<f32>,
) -> Result<EvalResult> {
    let cfg = settings.config(category);
    let records = read_index(settings, category, split)?;
    if records.is_empty() {
        return Err(CliError::Data(format!("{category}/{split}: no scored images to evaluate")));
    }
    let maps = par_map(&records, |r| {
        Ok(read_anomaly_map(dataset::map_path(settings, category, split, &r.rel()))?)
    })?;
    let gt = load_ground_truth(settings, category, split, &records, &maps)?;

    let threshold = match pixel_threshold {
        Some(t) => t,
        None => best_threshold(&maps, &gt, cfg.use_hole_fill)?.threshold,
    };
    let preds: Vec<Array2<bool>> = maps
        .par_iter()
        .map(|m| binarize(m, threshold, cfg.use_hole_fill))
        .collect();
    for (r, p) in records.iter().zip(&preds) {
        render::write_mask_png(p, &dataset::mask_path(settings, category, split, &r.rel()))?;
    }
    let f1 = pixel_f1(&preds, &gt)?;
    let auroc = auroc_fpr_limit(&maps, &gt, FPR_LIMIT)?;
    let aupro = aupro_fpr_limit(&maps, &gt, FPR_LIMIT)?;

    let scores: Vec<f32> = records.iter().map(|r| r.image_score).collect();
    let labels: Vec<bool> = records.iter().map(|r| is_anomalous(&r.label, &settings.layout)).collect();
    let image_threshold = match image_threshold {
        Some(t) => t,
        None => best_class_threshold(&scores, &labels)?.threshold,
    };
    Ok(EvalResult {
        category: category.to_string(),
        threshold,
        pixel_f1: f1.f1,
        precision: f1.precision,
        recall: f1.recall,
        auroc_limit: auroc,
        aupro_limit: aupro,
        class_f1: class_f1(&scores, &labels, image_threshold),
        image_threshold,
        fpr_limit: FPR_LIMIT,
        counts: f1.counts,
    })
}

fn write_report(settings: &Settings, report: &Report) -> Result<()> {
    write_atomic(&dataset::report_path(settings, &report.split, "json"), &report.to_json())?;
    write_atomic(&dataset::report_path(settings, &report.split, "csv"), &report.to_csv())?;
    Ok(())
}

/// Rebuilds the combined report of `split` from the per-category evaluations on disk.
pub fn report(settings: &Settings, split: &str) -> Result<Report> {
    let mut results = Vec::new();
    for cat in &settings.categories {
        let path = dataset::eval_path(settings, cat, split);
        if !path.is_file() {
            return Err(CliError::Data(format!(
                "no evaluation for {cat}/{split} at {}; run evaluate first",
                path.display()
            )));
        }
        results.push(read_json::<EvalResult>(&path)?);
    }
    let report = Report::new(split, FPR_LIMIT, results)?;
    write_report(settings, &report)?;
    Ok(report)
}

/// Renders the overlay of one map on its source image.
pub fn overlay(map: &Path, image: &Path, out: &Path, threshold: Option<f32>) -> Result<()> {
    let m = read_anomaly_map(map)?;
    let img = render::read_rgb(image)?;
    let t = threshold.unwrap_or_else(|| 0.5 * m.iter().copied().fold(0.0f32, f32::max));
    let rendered = render::overlay(&m, &img, t)?;
    render::write_rgb_png(&rendered, out)
}

#[derive(Debug, Serialize)]
struct CategoryOutputs<'a> {
    config: &'a CategoryConfig,
    bank: Option<PathBuf>,
    scores: BTreeMap<String, PathBuf>,
    evaluations: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    tool_version: &'static str,
    config_hash: String,
    dataset_root: Option<&'a Path>,
    features_root: &'a Path,
    output_root: &'a Path,
    layout: &'a Layout,
    categories: BTreeMap<&'a str, CategoryOutputs<'a>>,
    reports: Vec<PathBuf>,
}

fn stems_in(dir: &Path, ext: &str) -> Vec<(String, PathBuf)> {
    let Ok(rd) = std::fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut out: Vec<(String, PathBuf)> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .filter_map(|p| Some((p.file_stem()?.to_str()?.to_owned(), p)))
        .collect();
    out.sort();
    out
}

/// Records the configuration and every stage output present under the output root.
pub fn write_manifest(settings: &Settings) -> Result<PathBuf> {
    let mut categories = BTreeMap::new();
    for cat in &settings.categories {
        let out = dataset::category_out(settings, cat);
        let bank = dataset::bank_path(settings, cat);
        categories.insert(
            cat.as_str(),
            CategoryOutputs {
                config: settings.config(cat),
                bank: bank.is_file().then_some(bank),
                scores: stems_in(&out.join("scores"), "jsonl").into_iter().collect(),
                evaluations: stems_in(&out.join("eval"), "json").into_iter().collect(),
            },
        );
    }
    let mut reports: Vec<PathBuf> = stems_in(&settings.output_root.join("reports"), "json")
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    reports.extend(
        stems_in(&settings.output_root.join("reports"), "csv")
            .into_iter()
            .map(|(_, p)| p),
    );
    reports.sort();
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        config_hash: settings.config_hash(),
        dataset_root: settings.dataset_root.as_deref(),
        features_root: &settings.features_root,
        output_root: &settings.output_root,
        layout: &settings.layout,
        categories,
        reports,
    };
    let path = dataset::manifest_path(settings);
    write_json(&manifest, &path)?;
    Ok(path)
}
