//! Per-split summary over categories, as JSON and CSV.

use serde::{Deserialize, Serialize};
use superad::metrics::EvalResult;

use crate::error::{CliError, Result};

/// Arithmetic mean of the per-category scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub pixel_f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub auroc_limit: f64,
    pub aupro_limit: f64,
    pub class_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub split: String,
    pub fpr_limit: f64,
    pub categories: Vec<EvalResult>,
    pub mean: MeanRow,
}

impl Report {
    pub fn new(split: &str, fpr_limit: f64, categories: Vec<EvalResult>) -> Result<Self> {
        if categories.is_empty() {
            return Err(CliError::Data(format!("no evaluated category for split '{split}'")));
        }
        let n = categories.len() as f64;
        let mean = |f: fn(&EvalResult) -> f64| categories.iter().map(f).sum::<f64>() / n;
        let mean = MeanRow {
            pixel_f1: mean(|r| r.pixel_f1),
            precision: mean(|r| r.precision),
            recall: mean(|r| r.recall),
            auroc_limit: mean(|r| r.auroc_limit),
            aupro_limit: mean(|r| r.aupro_limit),
            class_f1: mean(|r| r.class_f1),
        };
        Ok(Report {
            split: split.to_string(),
            fpr_limit,
            categories,
            mean,
        })
    }

    pub fn category(&self, name: &str) -> Option<&EvalResult> {
        self.categories.iter().find(|r| r.category == name)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }

    /// One row per category plus a final `mean` row.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "category",
            "threshold",
            "pixel_f1",
            "precision",
            "recall",
            "auroc_limit",
            "aupro_limit",
            "class_f1",
            "image_threshold",
            "tp",
            "fp",
            "fn",
            "tn",
        ])
        .expect("in-memory write");
        for r in &self.categories {
            w.write_record([
                r.category.clone(),
                r.threshold.to_string(),
                r.pixel_f1.to_string(),
                r.precision.to_string(),
                r.recall.to_string(),
                r.auroc_limit.to_string(),
                r.aupro_limit.to_string(),
                r.class_f1.to_string(),
                r.image_threshold.to_string(),
                r.counts.tp.to_string(),
                r.counts.fp.to_string(),
                r.counts.fn_.to_string(),
                r.counts.tn.to_string(),
            ])
            .expect("in-memory write");
        }
        let m = &self.mean;
        w.write_record([
            "mean".to_string(),
            String::new(),
            m.pixel_f1.to_string(),
            m.precision.to_string(),
            m.recall.to_string(),
            m.auroc_limit.to_string(),
            m.aupro_limit.to_string(),
            m.class_f1.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ])
        .expect("in-memory write");
        w.into_inner().expect("in-memory flush")
    }
}
