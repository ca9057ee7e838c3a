//! Per-image feature bundles and the SADF on-disk format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SADF" | u16 version=1 | u16 patch_size
//! u32 id_len | id bytes (UTF-8)
//! u32 original_h | u32 original_w | u32 resized_h | u32 resized_w
//! u32 dim | u32 cls_len (= dim) | cls_len x f32
//! u8 n_layers
//! per layer: u16 layer_index | u32 grid_h | u32 grid_w | grid_h*grid_w*dim x f32
//! ```
//!
//! Patch vectors are stored row-major over the grid (left to right, top to
//! bottom) with the `dim` channels of one patch contiguous.

use std::path::Path;

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic, Reader, Writer};

pub const SADF_MAGIC: &[u8; 4] = b"SADF";
pub const SADF_VERSION: u16 = 1;

/// Patch tokens of one transformer block laid out on the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureGrid {
    /// 1-based transformer block index.
    pub layer_index: u16,
    pub grid_h: u32,
    pub grid_w: u32,
    pub dim: u32,
    /// Row-major, `grid_h * grid_w * dim` values.
    pub values: Vec<f32>,
}

impl PatchFeatureGrid {
    pub fn n_patches(&self) -> usize {
        self.grid_h as usize * self.grid_w as usize
    }

    pub fn patch(&self, index: usize) -> &[f32] {
        let d = self.dim as usize;
        &self.values[index * d..(index + 1) * d]
    }

    /// `(grid_h * grid_w) x dim` view, one patch per row.
    pub fn as_matrix(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.n_patches(), self.dim as usize), &self.values)
            .expect("buffer length checked by validate")
    }

    fn validate(&self) -> Result<()> {
        let expected = self.grid_h as u64 * self.grid_w as u64 * self.dim as u64;
        if self.values.len() as u64 != expected {
            return Err(Error::Validation(format!(
                "layer {}: buffer holds {} values, expected {}x{}x{} = {expected}",
                self.layer_index,
                self.values.len(),
                self.grid_h,
                self.grid_w,
                self.dim
            )));
        }
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "layer {}: non-finite value at offset {pos}",
                self.layer_index
            )));
        }
        Ok(())
    }
}

/// Global and multi-layer patch features of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub image_id: String,
    /// (height, width) of the source image in pixels.
    pub original_size: (u32, u32),
    /// (height, width) fed to the backbone.
    pub resized_size: (u32, u32),
    pub patch_size: u16,
    /// Global (CLS) embedding, length `dim`.
    pub cls: Vec<f32>,
    /// Ascending by `layer_index`.
    pub layers: Vec<PatchFeatureGrid>,
}

impl ImageFeatures {
    pub fn grid_shape(&self) -> (usize, usize) {
        let p = self.patch_size as usize;
        (
            self.resized_size.0 as usize / p,
            self.resized_size.1 as usize / p,
        )
    }

    pub fn dim(&self) -> usize {
        self.cls.len()
    }

    pub fn layer(&self, layer_index: u16) -> Option<&PatchFeatureGrid> {
        self.layers.iter().find(|l| l.layer_index == layer_index)
    }

    pub fn layer_indices(&self) -> Vec<u16> {
        self.layers.iter().map(|l| l.layer_index).collect()
    }

    /// Checks every structural invariant of the bundle.
    pub fn validate(&self) -> Result<()> {
        let v = |msg: String| Err(Error::Validation(format!("{}: {msg}", self.image_id)));
        let (oh, ow) = self.original_size;
        let (rh, rw) = self.resized_size;
        let p = self.patch_size as u32;
        if p == 0 {
            return v("patch_size is zero".into());
        }
        if oh == 0 || ow == 0 {
            return v(format!("original size {oh}x{ow} has a zero side"));
        }
        if rh == 0 || rw == 0 || rh % p != 0 || rw % p != 0 {
            return v(format!(
                "resized size {rh}x{rw} is not a positive multiple of patch size {p}"
            ));
        }
        let expected = preprocess_dims((oh, ow), rh.min(rw), p)?;
        if expected != (rh, rw) {
            return v(format!(
                "resized size {rh}x{rw} disagrees with the resize rule for {oh}x{ow} ({}x{})",
                expected.0, expected.1
            ));
        }
        if self.cls.is_empty() {
            return v("feature dim is zero".into());
        }
        if self.cls.iter().any(|x| !x.is_finite()) {
            return v("non-finite CLS value".into());
        }
        if self.layers.is_empty() {
            return v("no patch layers".into());
        }
        let (gh, gw) = (rh / p, rw / p);
        let dim = self.cls.len() as u32;
        let mut prev = 0u16;
        for layer in &self.layers {
            if layer.layer_index <= prev {
                return v(format!(
                    "layer indices must be 1-based and strictly ascending, got {:?}",
                    self.layer_indices()
                ));
            }
            prev = layer.layer_index;
            if layer.grid_h != gh || layer.grid_w != gw {
                return v(format!(
                    "layer {} grid {}x{} does not match resized/patch = {gh}x{gw}",
                    layer.layer_index, layer.grid_h, layer.grid_w
                ));
            }
            if layer.dim != dim {
                return v(format!(
                    "layer {} dim {} differs from CLS dim {dim}",
                    layer.layer_index, layer.dim
                ));
            }
            layer.validate()?;
        }
        Ok(())
    }

    /// Fails unless the bundle carries exactly `expected` layers.
    pub fn check_layers(&self, expected: &[u16]) -> Result<()> {
        let have = self.layer_indices();
        if have != expected {
            return Err(Error::Validation(format!(
                "{}: layers {have:?} do not match configured {expected:?}",
                self.image_id
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = Writer::new();
        w.bytes(SADF_MAGIC);
        w.u16(SADF_VERSION);
        w.u16(self.patch_size);
        let id = self.image_id.as_bytes();
        w.u32(u32::try_from(id.len()).map_err(|_| Error::Validation("image_id too long".into()))?);
        w.bytes(id);
        w.u32(self.original_size.0);
        w.u32(self.original_size.1);
        w.u32(self.resized_size.0);
        w.u32(self.resized_size.1);
        let dim = self.cls.len() as u32;
        w.u32(dim);
        w.u32(dim);
        w.f32s(&self.cls);
        let n_layers = u8::try_from(self.layers.len())
            .map_err(|_| Error::Validation("more than 255 layers".into()))?;
        w.u8(n_layers);
        for layer in &self.layers {
            w.u16(layer.layer_index);
            w.u32(layer.grid_h);
            w.u32(layer.grid_w);
            w.f32s(&layer.values);
        }
        Ok(w.buf)
    }

    /// Parses and validates a SADF buffer; `path` is only used in errors.
    pub fn from_bytes(data: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(data, path);
        let format_err = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let magic = r.take(4, "magic")?;
        if magic != SADF_MAGIC {
            return Err(format_err(format!("bad magic {magic:?}")));
        }
        let version = r.u16("version")?;
        if version != SADF_VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let patch_size = r.u16("patch_size")?;
        let id_len = r.u32("id_len")? as usize;
        let id_bytes = r.take(id_len, "image_id")?;
        let image_id = String::from_utf8(id_bytes.to_vec())
            .map_err(|_| r.corrupt("image_id is not valid UTF-8"))?;
        let original_size = (r.u32("original_h")?, r.u32("original_w")?);
        let resized_size = (r.u32("resized_h")?, r.u32("resized_w")?);
        let dim = r.u32("dim")?;
        let cls_len = r.u32("cls_len")?;
        if cls_len != dim {
            return Err(Error::Validation(format!(
                "{image_id}: cls_len {cls_len} differs from dim {dim}"
            )));
        }
        let cls = r.f32s(cls_len as usize, "cls")?;
        let n_layers = r.u8("n_layers")?;
        let mut layers = Vec::with_capacity(n_layers as usize);
        for i in 0..n_layers {
            let layer_index = r.u16("layer_index")?;
            let grid_h = r.u32("grid_h")?;
            let grid_w = r.u32("grid_w")?;
            let count = grid_h as u64 * grid_w as u64 * dim as u64;
            let count = usize::try_from(count)
                .map_err(|_| r.corrupt(format!("layer {i}: size overflows")))?;
            let values = r.f32s(count, "layer values")?;
            layers.push(PatchFeatureGrid {
                layer_index,
                grid_h,
                grid_w,
                dim,
                values,
            });
        }
        r.finish()?;
        let features = ImageFeatures {
            image_id,
            original_size,
            resized_size,
            patch_size,
            cls,
            layers,
        };
        features.validate()?;
        Ok(features)
    }
}

/// Aspect-preserving resize target: the shorter side becomes `short_side`,
/// the longer side is rounded to the nearest multiple of `patch_size` (ties up).
pub fn preprocess_dims(original: (u32, u32), short_side: u32, patch_size: u32) -> Result<(u32, u32)> {
    let (h, w) = original;
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput(format!("image size {h}x{w} has a zero side")));
    }
    if patch_size == 0 || short_side == 0 || !short_side.is_multiple_of(patch_size) {
        return Err(Error::InvalidArgument(format!(
            "short side {short_side} is not a positive multiple of patch size {patch_size}"
        )));
    }
    let (short, long) = (h.min(w) as u64, h.max(w) as u64);
    let (s, p) = (short_side as u64, patch_size as u64);
    // round(long * s / (short * p)), halves rounded up, in exact integer arithmetic
    let multiples = (2 * long * s + short * p) / (2 * short * p);
    let long_out = u32::try_from(multiples * p)
        .map_err(|_| Error::InvalidInput(format!("resized long side overflows for {h}x{w}")))?;
    Ok(if h <= w {
        (short_side, long_out)
    } else {
        (long_out, short_side)
    })
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<ImageFeatures> {
    let path = path.as_ref();
    let data = read_file(path)?;
    ImageFeatures::from_bytes(&data, path)
}

/// Validates, then writes atomically; nothing is written for an invalid bundle.
pub fn write_feature_file(features: &ImageFeatures, path: impl AsRef<Path>) -> Result<()> {
    let bytes = features.to_bytes()?;
    write_atomic(path.as_ref(), &bytes)
}
