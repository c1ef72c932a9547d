//! Shared domain types and coordinate conventions.
//!
//! Coordinates are `(x, y)` with x rightward, y downward, origin at the
//! top-left corner, normalized by `(width, height)` of the raster they
//! index. Cell `(row, col)` of an `H x W` raster has its center at
//! `x = (col + 0.5) / W`, `y = (row + 0.5) / H`.

use ndarray::{Array2, Array3};

use crate::{Error, Result};

/// Side length of the square network input frame.
pub const INPUT_SIZE: usize = 512;

/// A point in normalized `[0,1]^2` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) || !x.is_finite() || !y.is_finite()
        {
            return Err(Error::InvalidInput(format!(
                "point ({x}, {y}) outside [0,1]^2"
            )));
        }
        Ok(Point { x, y })
    }

    /// Continuous pixel coordinates on an `(height, width)` raster, in the
    /// convention where integer coordinates land on cell centers.
    pub fn to_pixel(&self, height: usize, width: usize) -> (f64, f64) {
        (self.x * width as f64 - 0.5, self.y * height as f64 - 0.5)
    }

    /// Inverse of [`Point::to_pixel`]; the input is clamped into the raster.
    pub fn from_pixel(px: f64, py: f64, height: usize, width: usize) -> Self {
        let x = ((px + 0.5) / width as f64).clamp(0.0, 1.0);
        let y = ((py + 0.5) / height as f64).clamp(0.0, 1.0);
        Point { x, y }
    }

    /// Euclidean distance to `other` measured in pixels of an
    /// `(height, width)` raster.
    pub fn pixel_distance(&self, other: &Point, height: usize, width: usize) -> f64 {
        let dx = (self.x - other.x) * width as f64;
        let dy = (self.y - other.y) * height as f64;
        (dx * dx + dy * dy).sqrt()
    }
}

/// An axis-aligned rectangle in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x0 <= x1 && y0 <= y1) || [x0, y0, x1, y1].iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "degenerate rect ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        Ok(Rect { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
}

/// An RGB raster with values in `[0,1]`, plus the size of the original
/// image its annotations refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    /// `(height, width, 3)`, row-major, values in `[0,1]`.
    pub pixels: Array3<f64>,
    /// `(height, width)` of the image the annotations were made on.
    pub original_size: (usize, usize),
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, pixels: Array3<f64>, original_size: (usize, usize)) -> Result<Self> {
        let id = id.into();
        let dim = pixels.dim();
        if dim.0 == 0 || dim.1 == 0 || dim.2 != 3 {
            return Err(Error::Image {
                id,
                message: format!("bad raster shape {dim:?}; want (h, w, 3)"),
            });
        }
        if original_size.0 == 0 || original_size.1 == 0 {
            return Err(Error::Image {
                id,
                message: "original size must be at least 1x1".into(),
            });
        }
        Ok(ImageRecord { id, pixels, original_size })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// Bilinearly resample to `size x size` (the backend input contract).
    /// Identity when the raster already has that shape.
    pub fn to_backend_input(&self, size: usize) -> ImageRecord {
        if self.height() == size && self.width() == size {
            return self.clone();
        }
        let mut out = Array3::zeros((size, size, 3));
        for c in 0..3 {
            let chan = self.pixels.index_axis(ndarray::Axis(2), c).to_owned();
            let res = crate::util::bilinear_resize(&chan, size, size);
            out.index_axis_mut(ndarray::Axis(2), c).assign(&res);
        }
        ImageRecord {
            id: self.id.clone(),
            pixels: out,
            original_size: self.original_size,
        }
    }

    /// Single channel as a standalone array.
    pub fn channel(&self, c: usize) -> Array2<f64> {
        self.pixels.index_axis(ndarray::Axis(2), c).to_owned()
    }
}

/// Provenance attached to an optimized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub source_image_id: String,
    pub query: Point,
    pub seed: u64,
    pub hp_digest: String,
}

/// The optimized conditioning matrix `e` (P tokens x D dims).
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    /// `(P, D)`.
    pub matrix: Array2<f64>,
    /// Which token's attention map is the query map. Never 0 or `P - 1`;
    /// those are reserved for special termination tokens.
    pub token_index: usize,
    pub provenance: Provenance,
    /// Per-step loss values recorded during optimization, when available.
    pub loss_trace: Option<Vec<f64>>,
}

impl PromptEmbedding {
    pub fn new(
        matrix: Array2<f64>,
        token_index: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        let (p, _d) = matrix.dim();
        if p < 3 {
            return Err(Error::InvalidInput(format!(
                "embedding needs at least 3 tokens, got {p}"
            )));
        }
        if token_index == 0 || token_index >= p - 1 {
            return Err(Error::InvalidInput(format!(
                "token index {token_index} selects a special token (P = {p})"
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("embedding has non-finite entries".into()));
        }
        Ok(PromptEmbedding { matrix, token_index, provenance, loss_trace: None })
    }

    pub fn token_count(&self) -> usize {
        self.matrix.dim().0
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim().1
    }
}

/// Crop window parameters: a `scale`-sized square window at `offset`,
/// in normalized full-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropParams {
    pub scale: f64,
    pub offset: (f64, f64),
}

impl CropParams {
    pub fn new(scale: f64, offset: (f64, f64)) -> Result<Self> {
        let (dx, dy) = offset;
        let ok = scale > 0.0
            && scale <= 1.0
            && dx >= 0.0
            && dy >= 0.0
            && dx + scale <= 1.0 + 1e-12
            && dy + scale <= 1.0 + 1e-12;
        if !ok {
            return Err(Error::InvalidInput(format!(
                "crop scale {scale} offset ({dx}, {dy}) leaves [0,1]^2"
            )));
        }
        Ok(CropParams { scale, offset })
    }

    pub fn identity() -> Self {
        CropParams { scale: 1.0, offset: (0.0, 0.0) }
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.offset == (0.0, 0.0)
    }

    /// Full-frame normalized point -> crop-frame normalized point.
    pub fn to_crop(&self, p: Point) -> Point {
        Point {
            x: (p.x - self.offset.0) / self.scale,
            y: (p.y - self.offset.1) / self.scale,
        }
    }

    /// Crop-frame normalized point -> full-frame normalized point.
    pub fn to_full(&self, p: Point) -> Point {
        Point {
            x: p.x * self.scale + self.offset.0,
            y: p.y * self.scale + self.offset.1,
        }
    }

    /// Whether the full-frame point lies inside the window, with a margin
    /// expressed as a fraction of the window side.
    pub fn contains(&self, p: Point, margin_frac: f64) -> bool {
        let m = margin_frac * self.scale;
        p.x >= self.offset.0 + m
            && p.x <= self.offset.0 + self.scale - m
            && p.y >= self.offset.1 + m
            && p.y <= self.offset.1 + self.scale - m
    }
}

/// Run hyperparameters. Defaults are the values selected by random search
/// on the SPair-71k validation subset.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// U-Net layer indices whose cross-attention is aggregated (0-based
    /// over the 16 attention layers).
    pub layers: Vec<usize>,
    pub learning_rate: f64,
    /// Gaussian target std, in pixels of the 512x512 input frame.
    pub sigma: f64,
    /// Forward-noising level, `1 <= timestep <= total_steps`.
    pub timestep: u32,
    pub total_steps: u32,
    /// Adam iterations per optimization round.
    pub opt_steps: usize,
    /// Crop side as a fraction of the image side, in `(0, 1]`.
    pub crop_fraction: f64,
    /// Optimization rounds per query (ensemble size R).
    pub n_embeddings: usize,
    /// Crops averaged at inference, identity crop included.
    pub n_inference_crops: usize,
    /// Common aggregation grid `(h, w)` for loss and heatmaps.
    pub loss_resolution: (usize, usize),
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            layers: vec![7, 8, 9, 10],
            learning_rate: 2.37e-3,
            sigma: 27.98,
            timestep: 8,
            total_steps: 50,
            opt_steps: 129,
            crop_fraction: 0.9317,
            n_embeddings: 10,
            n_inference_crops: 30,
            loss_resolution: (64, 64),
        }
    }
}

impl HyperParams {
    /// Per-dataset augmentation presets: SPair-71k uses fewer rounds and
    /// crops than PF-Willow/CUB.
    pub fn preset(dataset: &str) -> Self {
        let mut hp = HyperParams::default();
        if dataset.eq_ignore_ascii_case("spair") {
            hp.n_embeddings = 5;
            hp.n_inference_crops = 20;
        }
        hp
    }

    /// Short stable fingerprint over every field, recorded in embedding
    /// provenance so results can be traced back to their hyperparameters.
    pub fn digest(&self) -> String {
        let layers = self
            .layers
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let text = format!(
            "layers={layers};lr={};sigma={};t={}/{};steps={};crop={};R={};crops={};res={}x{}",
            self.learning_rate,
            self.sigma,
            self.timestep,
            self.total_steps,
            self.opt_steps,
            self.crop_fraction,
            self.n_embeddings,
            self.n_inference_crops,
            self.loss_resolution.0,
            self.loss_resolution.1,
        );
        crate::util::sha256_hex(text.as_bytes())[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config_key("layers", "must name at least one layer"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config_key("learning_rate", "must be positive"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config_key("sigma", "must be positive"));
        }
        if self.timestep < 1 || self.timestep > self.total_steps {
            return Err(Error::config_key("timestep", "timestep out of range"));
        }
        if self.opt_steps == 0 {
            return Err(Error::config_key("opt_steps", "must be at least 1"));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::config_key("crop_fraction", "must lie in (0, 1]"));
        }
        if self.n_embeddings == 0 {
            return Err(Error::config_key("n_embeddings", "must be at least 1"));
        }
        if self.n_inference_crops == 0 {
            return Err(Error::config_key("n_inference_crops", "must be at least 1"));
        }
        if self.loss_resolution.0 == 0 || self.loss_resolution.1 == 0 {
            return Err(Error::config_key("loss_resolution", "must be at least 1x1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_round_trip_stays_within_half_pixel() {
        for &(h, w) in &[(1usize, 1usize), (7, 13), (64, 64), (375, 500), (512, 512)] {
            for row in [0, h / 3, h - 1] {
                for col in [0, w / 2, w - 1] {
                    let p = Point::from_pixel(col as f64, row as f64, h, w);
                    let (px, py) = p.to_pixel(h, w);
                    assert!((px - col as f64).abs() <= 0.5, "{h}x{w} col {col} -> {px}");
                    assert!((py - row as f64).abs() <= 0.5, "{h}x{w} row {row} -> {py}");
                }
            }
        }
    }

    #[test]
    fn point_rejects_out_of_range() {
        assert!(Point::new(-0.01, 0.5).is_err());
        assert!(Point::new(0.5, 1.01).is_err());
        assert!(Point::new(f64::NAN, 0.5).is_err());
        assert!(Point::new(0.0, 1.0).is_ok());
    }

    #[test]
    fn crop_transform_round_trips() {
        let c = CropParams::new(0.9317, (0.03, 0.05)).unwrap();
        let p = Point { x: 0.4, y: 0.7 };
        let q = c.to_full(c.to_crop(p));
        assert!((q.x - p.x).abs() < 1e-12 && (q.y - p.y).abs() < 1e-12);
    }

    #[test]
    fn crop_corner_maps_to_origin() {
        let c = CropParams::new(0.5, (0.25, 0.125)).unwrap();
        let p = c.to_crop(Point { x: 0.25, y: 0.125 });
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12);
    }

    #[test]
    fn token_index_excludes_special_tokens() {
        let prov = Provenance {
            source_image_id: "img".into(),
            query: Point { x: 0.5, y: 0.5 },
            seed: 0,
            hp_digest: String::new(),
        };
        let m = Array2::zeros((8, 4));
        assert!(PromptEmbedding::new(m.clone(), 0, prov.clone()).is_err());
        assert!(PromptEmbedding::new(m.clone(), 7, prov.clone()).is_err());
        assert!(PromptEmbedding::new(m, 1, prov).is_ok());
    }

    #[test]
    fn default_hyperparams_validate() {
        HyperParams::default().validate().unwrap();
        assert_eq!(HyperParams::preset("spair").n_embeddings, 5);
        assert_eq!(HyperParams::preset("spair").n_inference_crops, 20);
        assert_eq!(HyperParams::preset("cub").n_embeddings, 10);
    }

    #[test]
    fn timestep_zero_is_rejected() {
        let hp = HyperParams { timestep: 0, ..HyperParams::default() };
        let err = hp.validate().unwrap_err();
        assert!(err.to_string().contains("timestep out of range"));
    }
}
