//! Per-layer memory banks of unit-normalized reference patch vectors.
//!
//! A bank is persisted as a SADB binary plus a JSON-lines sidecar listing the
//! contributing image ids, one `{"image_id": ...}` object per line:
//!
//! ```text
//! "SADB" | u16 version=1 | 32-byte config hash
//! u32 category_len | category bytes (UTF-8)
//! u8 n_layers
//! per layer: u16 layer_index | u32 n_vectors | u32 dim | n_vectors*dim x f32
//! ```

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{CategoryConfig, ConfigHash};
use crate::error::{Error, Result};
use crate::feature_store::ImageFeatures;
use crate::fg_mask::ForegroundMask;
use crate::io::{read_file, write_atomic, Reader, Writer};

pub const SADB_MAGIC: &[u8; 4] = b"SADB";
pub const SADB_VERSION: u16 = 1;

/// Tolerance on the L2 norm of stored rows.
pub const UNIT_NORM_TOL: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BankLayer {
    pub layer_index: u16,
    /// `n_vectors x dim`, every row unit length.
    pub vectors: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub category: String,
    pub layers: Vec<BankLayer>,
    pub source_ids: Vec<String>,
    pub config_hash: ConfigHash,
}

/// Non-fatal conditions met while building a bank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BankWarning {
    /// The foreground mask kept no patch; the full grid was used instead.
    EmptyForeground { image_id: String },
    /// Zero-length patch vectors were left out of the bank.
    ZeroVectorsDropped {
        image_id: String,
        layer_index: u16,
        count: usize,
    },
}

#[derive(Serialize, Deserialize)]
struct SourceRecord {
    image_id: String,
}

impl MemoryBank {
    pub fn layer(&self, layer_index: u16) -> Option<&BankLayer> {
        self.layers.iter().find(|l| l.layer_index == layer_index)
    }

    pub fn layer_indices(&self) -> Vec<u16> {
        self.layers.iter().map(|l| l.layer_index).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Validation("bank has no layers".into()));
        }
        for layer in &self.layers {
            let (n, d) = layer.vectors.dim();
            if n == 0 || d == 0 {
                return Err(Error::Validation(format!(
                    "bank layer {} is empty ({n}x{d})",
                    layer.layer_index
                )));
            }
            for (i, row) in layer.vectors.rows().into_iter().enumerate() {
                let norm = row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
                if !norm.is_finite() || (norm as f32 - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::Validation(format!(
                        "bank layer {} row {i} has norm {norm}",
                        layer.layer_index
                    )));
                }
            }
        }
        Ok(())
    }

    /// Path of the JSON-lines sidecar that accompanies a bank file.
    pub fn sidecar_path(bank_path: &Path) -> PathBuf {
        bank_path.with_extension("sources.jsonl")
    }
}

fn unit_rows<'a>(
    patches: impl Iterator<Item = &'a [f32]>,
    out: &mut Vec<f32>,
) -> (usize, usize) {
    let (mut kept, mut dropped) = (0, 0);
    for p in patches {
        let norm = p.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if norm == 0.0 {
            dropped += 1;
            continue;
        }
        out.extend(p.iter().map(|&x| (x as f64 / norm) as f32));
        kept += 1;
    }
    (kept, dropped)
}

/// Stacks the (optionally foreground-only) patch vectors of every reference
/// image into one unit-normalized matrix per layer. Rows follow reference
/// order, then row-major grid order.
pub fn build_memory_bank(
    refs: &[ImageFeatures],
    masks: Option<&[ForegroundMask]>,
    config: &CategoryConfig,
) -> Result<(MemoryBank, Vec<BankWarning>)> {
    config.validate()?;
    let first = refs
        .first()
        .ok_or_else(|| Error::EmptyInput("memory bank needs at least one reference".into()))?;
    let dim = first.dim();
    for r in refs {
        r.check_layers(&config.layer_indices)?;
        if r.dim() != dim {
            return Err(Error::Validation(format!(
                "{}: feature dim {} differs from {dim}",
                r.image_id,
                r.dim()
            )));
        }
    }
    if let Some(masks) = masks {
        if masks.len() != refs.len() {
            return Err(Error::Validation(format!(
                "{} masks for {} references",
                masks.len(),
                refs.len()
            )));
        }
        for (r, m) in refs.iter().zip(masks) {
            if m.grid.dim() != r.grid_shape() {
                return Err(Error::Validation(format!(
                    "{}: mask {:?} does not match grid {:?}",
                    r.image_id,
                    m.grid.dim(),
                    r.grid_shape()
                )));
            }
        }
    }

    let mut warnings = Vec::new();
    // per-image list of patch indices that enter the bank
    let keep: Vec<Vec<usize>> = refs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let n = r.grid_shape().0 * r.grid_shape().1;
            let Some(mask) = masks.map(|m| &m[i].grid) else {
                return (0..n).collect();
            };
            let kept: Vec<usize> = mask
                .iter()
                .enumerate()
                .filter(|(_, &fg)| fg)
                .map(|(p, _)| p)
                .collect();
            if kept.is_empty() {
                log::warn!("{}: foreground mask is empty, using full grid", r.image_id);
                warnings.push(BankWarning::EmptyForeground {
                    image_id: r.image_id.clone(),
                });
                (0..n).collect()
            } else {
                kept
            }
        })
        .collect();

    let mut layers = Vec::with_capacity(config.layer_indices.len());
    for &li in &config.layer_indices {
        let mut data = Vec::new();
        let mut rows = 0;
        for (r, idx) in refs.iter().zip(&keep) {
            let grid = r.layer(li).expect("layers checked");
            let (kept, dropped) = unit_rows(idx.iter().map(|&p| grid.patch(p)), &mut data);
            rows += kept;
            if dropped > 0 {
                log::warn!("{}: dropped {dropped} zero vectors from layer {li}", r.image_id);
                warnings.push(BankWarning::ZeroVectorsDropped {
                    image_id: r.image_id.clone(),
                    layer_index: li,
                    count: dropped,
                });
            }
        }
        if rows == 0 {
            return Err(Error::DegenerateData(format!(
                "layer {li}: every reference patch vector is zero"
            )));
        }
        layers.push(BankLayer {
            layer_index: li,
            vectors: Array2::from_shape_vec((rows, dim), data).expect("row count tracked"),
        });
    }

    let bank = MemoryBank {
        category: config.category.clone(),
        layers,
        source_ids: refs.iter().map(|r| r.image_id.clone()).collect(),
        config_hash: config.bank_hash(),
    };
    Ok((bank, warnings))
}

pub fn bank_to_bytes(bank: &MemoryBank) -> Result<Vec<u8>> {
    bank.validate()?;
    let mut w = Writer::new();
    w.bytes(SADB_MAGIC);
    w.u16(SADB_VERSION);
    w.bytes(&bank.config_hash);
    let cat = bank.category.as_bytes();
    w.u32(cat.len() as u32);
    w.bytes(cat);
    let n_layers =
        u8::try_from(bank.layers.len()).map_err(|_| Error::Validation("too many layers".into()))?;
    w.u8(n_layers);
    for layer in &bank.layers {
        let (n, d) = layer.vectors.dim();
        w.u16(layer.layer_index);
        w.u32(n as u32);
        w.u32(d as u32);
        match layer.vectors.as_slice() {
            Some(s) => w.f32s(s),
            None => w.f32s(&layer.vectors.iter().copied().collect::<Vec<_>>()),
        }
    }
    Ok(w.buf)
}

/// Writes the SADB file and its source-id sidecar.
pub fn write_memory_bank(bank: &MemoryBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = bank_to_bytes(bank)?;
    let mut sidecar = String::new();
    for id in &bank.source_ids {
        let rec = SourceRecord {
            image_id: id.clone(),
        };
        sidecar.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        sidecar.push('\n');
    }
    write_atomic(path, &bytes)?;
    write_atomic(&MemoryBank::sidecar_path(path), sidecar.as_bytes())
}

pub fn read_memory_bank(path: impl AsRef<Path>) -> Result<MemoryBank> {
    let path = path.as_ref();
    let data = read_file(path)?;
    let mut r = Reader::new(&data, path);
    let magic = r.take(4, "magic")?;
    if magic != SADB_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u16("version")?;
    if version != SADB_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("unsupported version {version}"),
        });
    }
    let config_hash: ConfigHash = r.take(32, "config_hash")?.try_into().unwrap();
    let cat_len = r.u32("category_len")? as usize;
    let category = String::from_utf8(r.take(cat_len, "category")?.to_vec())
        .map_err(|_| r.corrupt("category is not valid UTF-8"))?;
    let n_layers = r.u8("n_layers")?;
    let mut layers = Vec::with_capacity(n_layers as usize);
    for _ in 0..n_layers {
        let layer_index = r.u16("layer_index")?;
        let n = r.u32("n_vectors")? as usize;
        let d = r.u32("dim")? as usize;
        let count = n
            .checked_mul(d)
            .ok_or_else(|| r.corrupt("layer size overflows"))?;
        let values = r.f32s(count, "bank vectors")?;
        layers.push(BankLayer {
            layer_index,
            vectors: Array2::from_shape_vec((n, d), values).expect("count = n*d"),
        });
    }
    r.finish()?;

    let sidecar = MemoryBank::sidecar_path(path);
    let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let mut source_ids = Vec::new();
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: SourceRecord = serde_json::from_str(line).map_err(|e| Error::Corrupt {
            path: sidecar.clone(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        source_ids.push(rec.image_id);
    }
    let bank = MemoryBank {
        category,
        layers,
        source_ids,
        config_hash,
    };
    bank.validate()?;
    Ok(bank)
}
