//! Run configuration: a TOML document plus command-line overrides, resolved
//! into one [`CategoryConfig`] per selected category.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use superad::config::canonical_hash;
use superad::{CategoryConfig, CATEGORIES};

use crate::error::{CliError, Result};

/// Where things live below the dataset and feature roots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Layout {
    pub train_split: String,
    pub eval_split: String,
    /// Directory under `<category>/<split>` holding one folder of masks per label.
    pub ground_truth_dir: String,
    pub mask_suffix: String,
    /// Label folder of defect-free images.
    pub good_label: String,
}

impl Default for Layout {
    fn default() -> Self {
        Self {
            train_split: "train".into(),
            eval_split: "test_public".into(),
            ground_truth_dir: "ground_truth".into(),
            mask_suffix: "_mask.png".into(),
            good_label: "good".into(),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    dataset_root: Option<PathBuf>,
    features_root: Option<PathBuf>,
    output_root: Option<PathBuf>,
    categories: Option<Vec<String>>,
    #[serde(default)]
    layout: Layout,
    /// Overrides applied to every category.
    #[serde(default)]
    defaults: toml::Table,
    /// Per-category overrides, applied after `defaults`.
    #[serde(default)]
    category: BTreeMap<String, toml::Table>,
}

/// Values given on the command line; they win over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub dataset_root: Option<PathBuf>,
    pub features_root: Option<PathBuf>,
    pub output_root: Option<PathBuf>,
    pub categories: Vec<String>,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub dataset_root: Option<PathBuf>,
    pub features_root: PathBuf,
    pub output_root: PathBuf,
    pub categories: Vec<String>,
    pub layout: Layout,
    pub configs: BTreeMap<String, CategoryConfig>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn check_category(name: &str) -> Result<()> {
    if CATEGORIES.contains(&name) {
        Ok(())
    } else {
        Err(config_err(format!(
            "unknown category '{name}'; expected one of {}",
            CATEGORIES.join(", ")
        )))
    }
}

fn overlay(base: &mut Value, table: &toml::Table, what: &str) -> Result<()> {
    let patch = serde_json::to_value(table).map_err(|e| config_err(format!("{what}: {e}")))?;
    let (Value::Object(base), Value::Object(patch)) = (base, patch) else {
        unreachable!("configs and tables are objects");
    };
    for (k, v) in patch {
        if k == "category" {
            return Err(config_err(format!("{what}: 'category' cannot be overridden")));
        }
        base.insert(k, v);
    }
    Ok(())
}

impl Settings {
    pub fn load(ov: &Overrides) -> Result<Self> {
        let (file, base_dir) = match &ov.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
                let file: ConfigFile = toml::from_str(&text)
                    .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
                let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (file, dir)
            }
            None => (ConfigFile::default(), PathBuf::new()),
        };
        let from_file = |p: Option<PathBuf>| p.map(|p| base_dir.join(p));

        let features_root = ov
            .features_root
            .clone()
            .or(from_file(file.features_root))
            .ok_or_else(|| config_err("no features root given (--features-root or features_root)"))?;
        let output_root = ov
            .output_root
            .clone()
            .or(from_file(file.output_root))
            .ok_or_else(|| config_err("no output directory given (--output or output_root)"))?;
        let dataset_root = ov.dataset_root.clone().or(from_file(file.dataset_root));

        let categories = if !ov.categories.is_empty() {
            ov.categories.clone()
        } else {
            file.categories
                .unwrap_or_else(|| CATEGORIES.iter().map(|c| c.to_string()).collect())
        };
        if categories.is_empty() {
            return Err(config_err("no categories selected"));
        }
        for c in &categories {
            check_category(c)?;
        }
        for c in file.category.keys() {
            check_category(c)?;
        }
        let mut unique = categories.clone();
        unique.sort();
        unique.dedup();
        if unique.len() != categories.len() {
            return Err(config_err("a category was selected twice"));
        }

        let mut configs = BTreeMap::new();
        for cat in &categories {
            let mut value = serde_json::to_value(CategoryConfig::for_category(cat)).expect("serializes");
            overlay(&mut value, &file.defaults, "[defaults]")?;
            if let Some(t) = file.category.get(cat) {
                overlay(&mut value, t, &format!("[category.{cat}]"))?;
            }
            if let Some(s) = ov.sigma {
                value["smoothing_sigma"] = s.into();
            }
            let cfg: CategoryConfig = serde_json::from_value(value)
                .map_err(|e| config_err(format!("category '{cat}': {e}")))?;
            cfg.validate()
                .map_err(|e| config_err(format!("category '{cat}': {e}")))?;
            configs.insert(cat.clone(), cfg);
        }

        Ok(Settings {
            dataset_root,
            features_root,
            output_root,
            categories,
            layout: file.layout,
            configs,
        })
    }

    pub fn config(&self, category: &str) -> &CategoryConfig {
        &self.configs[category]
    }

    pub fn dataset_root(&self) -> Result<&Path> {
        self.dataset_root
            .as_deref()
            .ok_or_else(|| config_err("no dataset root given (--dataset-root or dataset_root)"))
    }

    /// Digest of the effective configuration (layout and every category config).
    pub fn config_hash(&self) -> String {
        let value = serde_json::json!({
            "layout": self.layout,
            "categories": self.configs,
        });
        hex::encode(canonical_hash(&value))
    }
}
