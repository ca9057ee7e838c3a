//! Directory layout of feature files, ground truth and run outputs.
//!
//! ```text
//! <features_root>/<category>/<split>/<label>/<stem>.sadf
//! <dataset_root>/<category>/<split>/<ground_truth_dir>/<label>/<stem><mask_suffix>
//! <output_root>/<category>/bank.sadb
//! <output_root>/<category>/maps/<split>/<label>/<stem>.anom
//! <output_root>/<category>/scores/<split>.jsonl
//! <output_root>/<category>/masks/<split>/<label>/<stem>.png
//! <output_root>/<category>/eval/<split>.json
//! <output_root>/reports/<split>.{json,csv}
//! ```
//!
//! Splits without label folders (feature files directly under `<split>`) are
//! scored as unlabeled.

use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};
use crate::settings::Settings;

pub const FEATURE_EXT: &str = "sadf";

/// One image of a split.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Entry {
    /// Label folder, `None` for flat splits.
    pub label: Option<String>,
    pub stem: String,
    pub feature_path: PathBuf,
}

impl Entry {
    /// `label/stem` (or `stem`), used for every per-image output path.
    pub fn rel(&self) -> PathBuf {
        match &self.label {
            Some(l) => Path::new(l).join(&self.stem),
            None => PathBuf::from(&self.stem),
        }
    }
}

/// Appends `suffix` to the file name; stems may themselves contain dots.
fn with_suffix(path: PathBuf, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out = Vec::new();
    for item in rd {
        out.push(item.map_err(|e| CliError::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn feature_stem(path: &Path) -> Option<String> {
    (path.is_file() && path.extension().is_some_and(|e| e == FEATURE_EXT))
        .then(|| path.file_stem()?.to_str().map(str::to_owned))
        .flatten()
}

pub fn split_dir(settings: &Settings, category: &str, split: &str) -> PathBuf {
    settings.features_root.join(category).join(split)
}

/// Feature files of a split, sorted by label then stem.
pub fn list_split(settings: &Settings, category: &str, split: &str) -> Result<Vec<Entry>> {
    let dir = split_dir(settings, category, split);
    if !dir.is_dir() {
        return Err(CliError::Data(format!(
            "no feature directory for {category}/{split}: expected {}",
            dir.display()
        )));
    }
    let mut entries = Vec::new();
    for path in sorted_dir(&dir)? {
        if let Some(stem) = feature_stem(&path) {
            entries.push(Entry {
                label: None,
                stem,
                feature_path: path,
            });
        } else if path.is_dir() {
            let label = path.file_name().and_then(|n| n.to_str()).map(str::to_owned);
            for file in sorted_dir(&path)? {
                if let Some(stem) = feature_stem(&file) {
                    entries.push(Entry {
                        label: label.clone(),
                        stem,
                        feature_path: file,
                    });
                }
            }
        }
    }
    entries.sort();
    Ok(entries)
}

pub fn category_out(settings: &Settings, category: &str) -> PathBuf {
    settings.output_root.join(category)
}

pub fn bank_path(settings: &Settings, category: &str) -> PathBuf {
    category_out(settings, category).join("bank.sadb")
}

pub fn map_path(settings: &Settings, category: &str, split: &str, rel: &Path) -> PathBuf {
    with_suffix(category_out(settings, category).join("maps").join(split).join(rel), ".anom")
}

pub fn debug_map_path(settings: &Settings, category: &str, split: &str, rel: &Path, layer: u16) -> PathBuf {
    let base = category_out(settings, category)
        .join("debug")
        .join("maps")
        .join(split)
        .join(rel);
    with_suffix(base, &format!(".layer{layer}.anom"))
}

pub fn fg_mask_path(settings: &Settings, category: &str, image_id: &str) -> PathBuf {
    category_out(settings, category)
        .join("debug")
        .join("fg")
        .join(format!("{image_id}.pgm"))
}

pub fn index_path(settings: &Settings, category: &str, split: &str) -> PathBuf {
    category_out(settings, category)
        .join("scores")
        .join(format!("{split}.jsonl"))
}

pub fn mask_path(settings: &Settings, category: &str, split: &str, rel: &Path) -> PathBuf {
    with_suffix(category_out(settings, category).join("masks").join(split).join(rel), ".png")
}

pub fn eval_path(settings: &Settings, category: &str, split: &str) -> PathBuf {
    category_out(settings, category)
        .join("eval")
        .join(format!("{split}.json"))
}

pub fn report_path(settings: &Settings, split: &str, ext: &str) -> PathBuf {
    settings.output_root.join("reports").join(format!("{split}.{ext}"))
}

pub fn manifest_path(settings: &Settings) -> PathBuf {
    settings.output_root.join("manifest.json")
}

/// Ground-truth mask of an anomalous image.
pub fn gt_path(settings: &Settings, category: &str, split: &str, label: &str, stem: &str) -> Result<PathBuf> {
    let l = &settings.layout;
    Ok(settings
        .dataset_root()?
        .join(category)
        .join(split)
        .join(&l.ground_truth_dir)
        .join(label)
        .join(format!("{stem}{}", l.mask_suffix)))
}
