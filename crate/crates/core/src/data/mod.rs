//! Benchmark dataset loading: SPair-71k, PF-Willow, and CUB-200-2011
//! normalized into [`CorrespondencePair`] records, plus a synthetic fixture
//! dataset for hermetic end-to-end runs.
//!
//! Loaders parse the published annotation layouts, convert every pixel
//! annotation to normalized coordinates immediately (raw pixels never leave
//! this module), and return pairs sorted by class and pair id so a load is
//! reproducible byte for byte. Images are referenced by [`ImageHandle`] and
//! decoded lazily: annotation-only work (counting, manifests) never touches
//! pixel data beyond the image headers needed for normalization.

mod cub;
mod pfwillow;
mod spair;
mod synthetic;

pub use cub::load_cub;
pub use pfwillow::load_pfwillow;
pub use spair::load_spair;
pub use synthetic::synthetic_dataset;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::types::{ImageRecord, Point, Rect};

/// Benchmark identity; decides the PCK threshold reference and the loader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Spair,
    PfWillow,
    Cub,
    Synthetic,
}

impl DatasetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::Spair => "spair",
            DatasetKind::PfWillow => "pfwillow",
            DatasetKind::Cub => "cub",
            DatasetKind::Synthetic => "synthetic",
        }
    }

    /// Thresholds are bounding-box relative where the benchmark annotates
    /// boxes and image relative otherwise (CUB); the synthetic set keeps the
    /// image rule because its keypoint-extent boxes can be arbitrarily
    /// small.
    pub fn pck_reference(&self) -> PckReference {
        match self {
            DatasetKind::Spair | DatasetKind::PfWillow => PckReference::BBox,
            DatasetKind::Cub | DatasetKind::Synthetic => PckReference::Image,
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "spair" => Ok(DatasetKind::Spair),
            "pfwillow" => Ok(DatasetKind::PfWillow),
            "cub" => Ok(DatasetKind::Cub),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(format!("unknown dataset '{other}' (spair|pfwillow|cub|synthetic)")),
        }
    }
}

/// Which dimension the PCK threshold is a fraction of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PckReference {
    /// `alpha * max(bbox width, bbox height)` of the target's box.
    BBox,
    /// `alpha * max(image width, image height)` of the target image.
    Image,
}

/// Dataset split. Only `val` (hyperparameter search) and `test`
/// (evaluation) are consumed; `train` exists for completeness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" | "trn" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}' (train|val|test)")),
        }
    }
}

#[derive(Debug, Clone)]
enum ImageSource {
    File(PathBuf),
    Inline(Arc<ImageRecord>),
}

/// A lazily decoded image: its id, annotation-time size, and where the
/// pixels come from.
#[derive(Debug, Clone)]
pub struct ImageHandle {
    pub id: String,
    /// `(height, width)` in original pixels.
    pub size: (usize, usize),
    source: ImageSource,
}

impl ImageHandle {
    pub fn from_file(id: impl Into<String>, path: PathBuf, size: (usize, usize)) -> Self {
        ImageHandle { id: id.into(), size, source: ImageSource::File(path) }
    }

    pub fn from_record(record: ImageRecord) -> Self {
        ImageHandle {
            id: record.id.clone(),
            size: record.original_size,
            source: ImageSource::Inline(Arc::new(record)),
        }
    }

    /// Decode (or clone) the full-resolution raster. The decoded size must
    /// still match the size the annotations were normalized against.
    pub fn load(&self) -> Result<ImageRecord> {
        match &self.source {
            ImageSource::Inline(record) => Ok((**record).clone()),
            ImageSource::File(path) => {
                let decoded = image::open(path)
                    .map_err(|e| Error::file(path, format!("image decode failed: {e}")))?;
                let rgb = decoded.to_rgb8();
                let (w, h) = rgb.dimensions();
                if (h as usize, w as usize) != self.size {
                    return Err(Error::file(
                        path,
                        format!(
                            "image is {w}x{h} but annotations were normalized for {}x{}",
                            self.size.1, self.size.0
                        ),
                    ));
                }
                let mut pixels = Array3::zeros((h as usize, w as usize, 3));
                for (x, y, p) in rgb.enumerate_pixels() {
                    for c in 0..3 {
                        pixels[[y as usize, x as usize, c]] = f64::from(p.0[c]) / 255.0;
                    }
                }
                ImageRecord::new(self.id.clone(), pixels, (h as usize, w as usize))
            }
        }
    }
}

/// One annotated keypoint, present in both images.
#[derive(Debug, Clone)]
pub struct Keypoint {
    pub source: Point,
    pub target: Point,
    pub id: String,
}

/// An annotated image pair: index-aligned keypoints in normalized
/// coordinates, plus the boxes the PCK threshold may reference.
#[derive(Debug, Clone)]
pub struct CorrespondencePair {
    pub source: ImageHandle,
    pub target: ImageHandle,
    pub keypoints: Vec<Keypoint>,
    pub class_name: String,
    pub bbox_source: Option<Rect>,
    pub bbox_target: Option<Rect>,
    pub split: Split,
}

impl CorrespondencePair {
    /// The invariants every loader promises: normalized coordinates and a
    /// class label. Checked on load so a malformed root fails loudly
    /// instead of skewing PCK silently.
    pub fn validate(&self) -> Result<()> {
        if self.class_name.is_empty() {
            return Err(Error::DatasetRecord {
                record: format!("{} -> {}", self.source.id, self.target.id),
                message: "empty class name".into(),
            });
        }
        for kp in &self.keypoints {
            for (side, p) in [("source", kp.source), ("target", kp.target)] {
                if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) {
                    return Err(Error::DatasetRecord {
                        record: format!("{} -> {}", self.source.id, self.target.id),
                        message: format!(
                            "keypoint {} {side} coordinate ({}, {}) outside [0,1]",
                            kp.id, p.x, p.y
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Audit manifest: one line per pair, `class, src_image, tgt_image, n_kps`.
pub fn manifest_lines(pairs: &[CorrespondencePair]) -> String {
    let mut out = String::new();
    for pair in pairs {
        out.push_str(&format!(
            "{}, {}, {}, {}\n",
            pair.class_name,
            pair.source.id,
            pair.target.id,
            pair.keypoints.len()
        ));
    }
    out
}

/// Load a dataset root by kind. `split` only varies for SPair-71k; the
/// other benchmarks are test-only. The synthetic set ignores `root`.
pub fn load_dataset(
    kind: DatasetKind,
    root: &Path,
    split: Split,
) -> Result<Vec<CorrespondencePair>> {
    match kind {
        DatasetKind::Spair => load_spair(root, split),
        DatasetKind::PfWillow => load_pfwillow(root),
        DatasetKind::Cub => load_cub(root, 3),
        DatasetKind::Synthetic => synthetic_dataset(0, 6, 4, 64),
    }
}

/// `(height, width)` from an image header, cached per path since dataset
/// annotations reference the same images repeatedly.
fn cached_image_size(
    cache: &mut HashMap<PathBuf, (usize, usize)>,
    path: &Path,
) -> Result<(usize, usize)> {
    if let Some(&size) = cache.get(path) {
        return Ok(size);
    }
    let (w, h) = image::image_dimensions(path)
        .map_err(|e| Error::file(path, format!("cannot read image header: {e}")))?;
    let size = (h as usize, w as usize);
    cache.insert(path.to_path_buf(), size);
    Ok(size)
}

/// Convert a raw pixel keypoint to normalized coordinates, erroring (with
/// the offending record) when it lies outside the raster it annotates.
fn keypoint_from_pixels(
    record: &str,
    kp: &str,
    px: f64,
    py: f64,
    size: (usize, usize),
) -> Result<Point> {
    let (h, w) = size;
    let in_range = px.is_finite()
        && py.is_finite()
        && (-0.5..=w as f64 - 0.5).contains(&px)
        && (-0.5..=h as f64 - 0.5).contains(&py);
    if !in_range {
        return Err(Error::DatasetRecord {
            record: record.to_string(),
            message: format!("keypoint {kp} at ({px}, {py}) lies outside the {w}x{h} image"),
        });
    }
    Ok(Point::from_pixel(px, py, h, w))
}

/// Normalize a pixel-edge box against the image size, clamped into the
/// frame (real annotations occasionally overshoot a border by a pixel).
fn rect_from_pixels(record: &str, corners: [f64; 4], size: (usize, usize)) -> Result<Rect> {
    let (h, w) = size;
    let [x0, y0, x1, y1] = corners;
    if corners.iter().any(|v| !v.is_finite()) || x0 >= x1 || y0 >= y1 {
        return Err(Error::DatasetRecord {
            record: record.to_string(),
            message: format!("degenerate bounding box [{x0}, {y0}, {x1}, {y1}]"),
        });
    }
    Rect::new(
        (x0 / w as f64).clamp(0.0, 1.0),
        (y0 / h as f64).clamp(0.0, 1.0),
        (x1 / w as f64).clamp(0.0, 1.0),
        (y1 / h as f64).clamp(0.0, 1.0),
    )
}

/// Tight normalized box around a keypoint set.
fn keypoint_extent(points: impl Iterator<Item = Point>) -> Option<Rect> {
    let mut bounds: Option<(f64, f64, f64, f64)> = None;
    for p in points {
        bounds = Some(match bounds {
            None => (p.x, p.y, p.x, p.y),
            Some((x0, y0, x1, y1)) => (x0.min(p.x), y0.min(p.y), x1.max(p.x), y1.max(p.y)),
        });
    }
    bounds.and_then(|(x0, y0, x1, y1)| Rect::new(x0, y0, x1, y1).ok())
}
