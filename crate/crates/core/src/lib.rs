//! Training-free anomaly segmentation on frozen vision-transformer features.
//!
//! The pipeline works on pre-extracted patch features (see [`feature_store`]):
//!
//! 1. [`coreset`] picks diverse reference images by greedy k-center selection
//!    over their global embeddings.
//! 2. [`bank`] stacks the references' unit-normalized patch vectors into one
//!    memory bank per layer, optionally restricted to the foreground found by
//!    [`fg_mask`].
//! 3. [`scorer`] gives each test patch its cosine distance to the nearest bank
//!    vector, averages the layers and upsamples to the image size.
//! 4. [`metrics`] evaluates maps with threshold-optimized pixel F1,
//!    FPR-limited ROC and PRO areas, and image-level F1.

pub mod bank;
pub mod config;
pub mod coreset;
pub mod error;
pub mod feature_store;
pub mod fg_mask;
mod io;
pub mod metrics;
pub mod morphology;
pub mod scorer;

pub use bank::{build_memory_bank, read_memory_bank, write_memory_bank, BankWarning, MemoryBank};
pub use config::{CategoryConfig, ConfigHash, CATEGORIES, PATCH_SIZE};
pub use coreset::{greedy_coreset, select_references, CoresetSelection};
pub use error::{Error, Result};
pub use feature_store::{
    preprocess_dims, read_feature_file, write_feature_file, ImageFeatures, PatchFeatureGrid,
};
pub use fg_mask::{compute_foreground_mask, ForegroundMask, PcaResult};
pub use io::write_atomic;
pub use metrics::EvalResult;
pub use scorer::{score_image, AnomalyMap};
