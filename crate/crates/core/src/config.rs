//! Per-category pipeline configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Side length in pixels of one ViT patch.
pub const PATCH_SIZE: u32 = 14;

/// The eight categories of the benchmark, in canonical (snake_case) form.
pub const CATEGORIES: [&str; 8] = [
    "can",
    "fabric",
    "fruit_jelly",
    "rice",
    "sheet_metal",
    "vial",
    "wallplugs",
    "walnuts",
];

/// Digest of a canonicalized [`CategoryConfig`].
pub type ConfigHash = [u8; 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CategoryConfig {
    pub category: String,
    /// Target length of the shorter image side after resizing, in pixels.
    pub short_side: u32,
    /// 1-based transformer block indices, ascending.
    pub layer_indices: Vec<u16>,
    /// Number of reference images kept in the memory bank.
    pub k_refs: usize,
    /// Restrict bank (and test) patches to the PCA foreground.
    pub use_fg_mask: bool,
    /// Fill enclosed holes of the binarized segmentation.
    pub use_hole_fill: bool,
    pub tau: f64,
    /// Square structuring element side for mask refinement (odd).
    pub kernel: usize,
    pub pca_components: usize,
    /// Gaussian smoothing of the full-resolution map, pixels; 0 disables.
    pub smoothing_sigma: f64,
    /// Layer whose patch grid drives the foreground mask.
    pub mask_layer: u16,
    /// Standardize channels to unit variance before PCA (centering is always applied).
    pub standardize_features: bool,
}

impl Default for CategoryConfig {
    fn default() -> Self {
        Self {
            category: String::new(),
            short_side: 672,
            layer_indices: vec![6, 12, 18, 24],
            k_refs: 16,
            use_fg_mask: false,
            use_hole_fill: false,
            tau: 1.0,
            kernel: 3,
            pca_components: 1,
            smoothing_sigma: 0.0,
            mask_layer: 6,
            standardize_features: false,
        }
    }
}

impl CategoryConfig {
    /// Defaults for a named category: 448 px short side for sheet metal,
    /// foreground masking for vial and wallplugs, hole filling for fabric and walnuts.
    pub fn for_category(name: &str) -> Self {
        Self {
            category: name.to_string(),
            short_side: if name == "sheet_metal" { 448 } else { 672 },
            use_fg_mask: matches!(name, "vial" | "wallplugs"),
            use_hole_fill: matches!(name, "fabric" | "walnuts"),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.k_refs == 0 {
            return bad("k_refs must be at least 1".into());
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return bad(format!("kernel must be odd and >= 1, got {}", self.kernel));
        }
        if self.short_side == 0 || !self.short_side.is_multiple_of(PATCH_SIZE) {
            return bad(format!(
                "short_side must be a positive multiple of {PATCH_SIZE}, got {}",
                self.short_side
            ));
        }
        if self.pca_components != 1 {
            return bad(format!(
                "only one principal component is supported, got {}",
                self.pca_components
            ));
        }
        if self.layer_indices.is_empty() || self.layer_indices.windows(2).any(|w| w[0] >= w[1]) {
            return bad("layer_indices must be non-empty and strictly ascending".into());
        }
        if self.layer_indices.contains(&0) {
            return bad("layer indices are 1-based".into());
        }
        if self.use_fg_mask && !self.layer_indices.contains(&self.mask_layer) {
            return bad(format!(
                "mask_layer {} is not among layer_indices {:?}",
                self.mask_layer, self.layer_indices
            ));
        }
        if !self.tau.is_finite() {
            return bad("tau must be finite".into());
        }
        if !(self.smoothing_sigma >= 0.0 && self.smoothing_sigma.is_finite()) {
            return bad(format!("smoothing_sigma must be >= 0, got {}", self.smoothing_sigma));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (object keys sorted).
    pub fn config_hash(&self) -> ConfigHash {
        let value = serde_json::to_value(self).expect("config serializes");
        canonical_hash(&value)
    }

    /// Hash over the fields that determine a memory bank. Post-processing
    /// settings (smoothing, hole filling) are left out so they can change
    /// without rebuilding the bank.
    pub fn bank_hash(&self) -> ConfigHash {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let map = value.as_object_mut().expect("config is an object");
        for key in ["smoothing_sigma", "use_hole_fill"] {
            map.remove(key);
        }
        canonical_hash(&value)
    }
}

/// SHA-256 over a compact JSON rendering of `value` with object keys sorted
/// at every level, so two documents differing only in key order hash identically.
pub fn canonical_hash(value: &serde_json::Value) -> ConfigHash {
    let mut text = String::new();
    write_canonical(value, &mut text);
    Sha256::digest(text.as_bytes()).into()
}

fn write_canonical(value: &serde_json::Value, out: &mut String) {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(v, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}
