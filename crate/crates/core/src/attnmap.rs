//! Attention-map mathematics: token selection, head/layer aggregation
//! onto a common grid, Gaussian targets, bilinear indexing, and the map
//! file format. Everything here is pure and backend-agnostic.

use std::io::Read;
use std::path::Path;

use ndarray::Array2;

use crate::backend::AttentionStack;
use crate::types::{CropParams, Point};
use crate::util::{bilinear_resize, bilinear_resize_adjoint, bilinear_sample, write_atomic};
use crate::{Error, Result};

/// Which raster a map's cells index: the full image frame or one crop
/// window of it.
#[derive(Debug, Clone, PartialEq)]
pub struct MapFrame {
    pub image_id: String,
    /// `None` for the full frame.
    pub crop: Option<CropParams>,
}

impl MapFrame {
    pub fn full(image_id: impl Into<String>) -> Self {
        MapFrame { image_id: image_id.into(), crop: None }
    }

    pub fn crop(image_id: impl Into<String>, crop: CropParams) -> Self {
        MapFrame { image_id: image_id.into(), crop: Some(crop) }
    }
}

/// A head/layer-averaged attention map on the common aggregation grid.
/// Values stay in [0, 1] because every step is a convex combination of
/// softmax probabilities.
#[derive(Debug, Clone)]
pub struct AggregatedMap {
    pub values: Array2<f64>,
    pub frame: MapFrame,
}

impl AggregatedMap {
    pub fn new(values: Array2<f64>, frame: MapFrame) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty aggregated map".into()));
        }
        for &v in values.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!("map value {v} outside [0,1]")));
            }
        }
        Ok(AggregatedMap { values, frame })
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Gaussian supervision target, peak 1 at `center`, width `sigma` given
/// in pixels of the 512x512 input frame.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    pub values: Array2<f64>,
    pub center: Point,
    pub sigma: f64,
}

/// Per-layer token maps: head-mean of one token's column, reshaped to the
/// layer grid. The aggregation input and the per-layer visualization unit.
pub fn select_token(stack: &AttentionStack, token_index: usize) -> Result<Vec<(usize, Array2<f64>)>> {
    if stack.layers.is_empty() {
        return Err(Error::InvalidInput("attention stack has no layers".into()));
    }
    let p = stack.token_count();
    if token_index == 0 || token_index + 1 >= p {
        return Err(Error::InvalidInput(format!(
            "token {token_index} is a special token (P = {p})"
        )));
    }
    let mut maps = Vec::with_capacity(stack.layers.len());
    for la in &stack.layers {
        let (heads, cells, tokens) = la.probs.dim();
        if token_index >= tokens {
            return Err(Error::InvalidInput(format!(
                "token {token_index} out of bounds for layer {} ({} tokens)",
                la.layer, tokens
            )));
        }
        let g = la.geometry;
        debug_assert_eq!(cells, g.h * g.w);
        let mut map = Array2::zeros((g.h, g.w));
        for s in 0..cells {
            let mut acc = 0.0;
            for hd in 0..heads {
                acc += la.probs[[hd, s, token_index]];
            }
            map[[s / g.w, s % g.w]] = acc / heads as f64;
        }
        maps.push((la.layer, map));
    }
    Ok(maps)
}

/// Head-mean, bilinear-resample to `out_res`, then layer-mean — the
/// cross-layer average map for one token.
pub fn aggregate(
    stack: &AttentionStack,
    token_index: usize,
    out_res: (usize, usize),
    frame: MapFrame,
) -> Result<AggregatedMap> {
    if out_res.0 == 0 || out_res.1 == 0 {
        return Err(Error::InvalidInput("aggregation resolution must be at least 1x1".into()));
    }
    let per_layer = select_token(stack, token_index)?;
    let mut acc = Array2::zeros(out_res);
    for (_, map) in &per_layer {
        acc = acc + bilinear_resize(map, out_res.0, out_res.1);
    }
    acc /= per_layer.len() as f64;
    AggregatedMap::new(acc, frame)
}

/// Adjoint of [`aggregate`] with respect to the stack: scatters a
/// cotangent on the output grid back onto every (head, cell) of the
/// selected token column. Satisfies
/// `<aggregate(stack), g> == <stack, aggregate_pullback(g)>`.
pub fn aggregate_pullback(
    stack: &AttentionStack,
    token_index: usize,
    cotangent: &Array2<f64>,
) -> Result<AttentionStack> {
    let p = stack.token_count();
    if token_index == 0 || token_index + 1 >= p {
        return Err(Error::InvalidInput(format!(
            "token {token_index} is a special token (P = {p})"
        )));
    }
    let n_layers = stack.layers.len() as f64;
    let mut out = stack.zeros_like();
    for (la, dst) in stack.layers.iter().zip(&mut out.layers) {
        let g = la.geometry;
        let heads = g.heads as f64;
        // Layer mean, then resize adjoint, then head mean.
        let spatial = bilinear_resize_adjoint(&(cotangent / n_layers), g.h, g.w);
        for s in 0..g.h * g.w {
            let v = spatial[[s / g.w, s % g.w]] / heads;
            for hd in 0..g.heads {
                dst.probs[[hd, s, token_index]] = v;
            }
        }
    }
    Ok(out)
}

/// Evaluate the unnormalized Gaussian exp(-d^2 / (2 sigma^2)) at `p`,
/// with d the distance from `center` measured in pixels of the 512 frame.
pub fn gaussian_value(center: Point, sigma: f64, p: Point) -> f64 {
    let scale = crate::types::INPUT_SIZE as f64;
    let dx = (p.x - center.x) * scale;
    let dy = (p.y - center.y) * scale;
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

/// Rasterize the Gaussian target on an `out_res` grid (cell centers).
/// No renormalization: the continuous peak is exactly 1.
pub fn gaussian_target(center: Point, sigma: f64, out_res: (usize, usize)) -> Result<GaussianTarget> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
    }
    let (h, w) = out_res;
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput("target resolution must be at least 1x1".into()));
    }
    let values = Array2::from_shape_fn((h, w), |(r, c)| {
        let p = Point {
            x: (c as f64 + 0.5) / w as f64,
            y: (r as f64 + 0.5) / h as f64,
        };
        gaussian_value(center, sigma, p)
    });
    Ok(GaussianTarget { values, center, sigma })
}

/// Gaussian target expressed in a crop's frame: the center moves to
/// crop coordinates and sigma dilates by 1/scale (one crop-frame pixel
/// covers `scale` full-frame pixels). Rendering this equals cropping the
/// full-frame target, which is what makes crop-augmented losses
/// consistent with the full-frame objective.
pub fn gaussian_target_in_crop(
    center_full: Point,
    sigma: f64,
    crop: CropParams,
    out_res: (usize, usize),
) -> Result<GaussianTarget> {
    let c = crop.to_crop(center_full);
    gaussian_target(c, sigma / crop.scale, out_res)
}

/// Bilinear lookup of a map at a normalized point. Exact at cell centers;
/// points past the border clamp to the edge cells.
pub fn sample_map(map: &AggregatedMap, u: Point) -> f64 {
    let (h, w) = map.resolution();
    let (px, py) = u.to_pixel(h, w);
    bilinear_sample(&map.values, py, px)
}

const AMAP_MAGIC: &[u8; 4] = b"AMAP";

/// Serialize a map: 16-byte header (magic `AMAP`, u32 H, u32 W, u32
/// reserved) + row-major little-endian f32 values.
pub fn write_map(path: &Path, values: &Array2<f64>) -> Result<()> {
    let (h, w) = values.dim();
    let mut bytes = Vec::with_capacity(16 + h * w * 4);
    bytes.extend_from_slice(AMAP_MAGIC);
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    for v in values.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_atomic(path, &bytes)
}

/// Read a map file written by [`write_map`].
pub fn read_map(path: &Path) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != AMAP_MAGIC {
        return Err(Error::file(path, "not a map file (bad magic)"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let want = 16 + h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::file(path, "header dimensions overflow"))?;
    if bytes.len() != want {
        return Err(Error::file(
            path,
            format!("expected {want} bytes for a {h}x{w} map, found {}", bytes.len()),
        ));
    }
    let mut values = Array2::zeros((h, w));
    for (i, v) in values.iter_mut().enumerate() {
        let off = 16 + 4 * i;
        *v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{LayerAttention, LayerGeometry};
    use crate::util::standard_normal;
    use ndarray::{array, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Stack with arbitrary (not necessarily stochastic) values — the
    /// aggregation ops are linear and do not assume normalization.
    fn stack_from(values: Vec<(usize, Array3<f64>, (usize, usize))>) -> AttentionStack {
        AttentionStack {
            layers: values
                .into_iter()
                .map(|(layer, probs, (h, w))| {
                    let heads = probs.dim().0;
                    LayerAttention {
                        layer,
                        geometry: LayerGeometry { h, w, d: 4, heads },
                        probs,
                    }
                })
                .collect(),
        }
    }

    fn random_stack(rng: &mut ChaCha8Rng, tokens: usize) -> AttentionStack {
        // Random row-stochastic stacks: 2 layers at mixed resolutions.
        let mut layers = Vec::new();
        for (layer, (h, w), heads) in [(7usize, (4usize, 4usize), 2usize), (10, (8, 8), 3)] {
            let mut probs = Array3::zeros((heads, h * w, tokens));
            for hd in 0..heads {
                for s in 0..h * w {
                    let mut row: Vec<f64> =
                        (0..tokens).map(|_| standard_normal(rng).exp()).collect();
                    let sum: f64 = row.iter().sum();
                    for v in &mut row {
                        *v /= sum;
                    }
                    for (t, v) in row.iter().enumerate() {
                        probs[[hd, s, t]] = *v;
                    }
                }
            }
            layers.push(LayerAttention {
                layer,
                geometry: LayerGeometry { h, w, d: 4, heads },
                probs,
            });
        }
        AttentionStack { layers }
    }

    #[test]
    fn select_token_rejects_special_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = random_stack(&mut rng, 5);
        assert!(select_token(&stack, 0).is_err());
        assert!(select_token(&stack, 4).is_err());
        assert!(select_token(&stack, 1).is_ok());
    }

    #[test]
    fn select_token_recovers_a_one_hot_cell() {
        let mut probs = Array3::zeros((2, 4, 3));
        // Token 1 is one-hot at cell 2 in both heads; spread the rest
        // over token 0 so rows still sum to 1.
        for hd in 0..2 {
            for s in 0..4 {
                probs[[hd, s, 0]] = 1.0;
            }
            probs[[hd, 2, 0]] = 0.0;
            probs[[hd, 2, 1]] = 1.0;
        }
        let stack = stack_from(vec![(7, probs, (2, 2))]);
        let maps = select_token(&stack, 1).unwrap();
        assert_eq!(maps[0].1, array![[0.0, 0.0], [1.0, 0.0]]);
    }

    #[test]
    fn aggregate_of_constant_layers_is_constant() {
        let k = 0.2;
        let mk = |h: usize, w: usize| {
            let mut probs = Array3::zeros((2, h * w, 5));
            for hd in 0..2 {
                for s in 0..h * w {
                    probs[[hd, s, 1]] = k;
                    probs[[hd, s, 0]] = 1.0 - k;
                }
            }
            probs
        };
        let stack = stack_from(vec![(7, mk(4, 4), (4, 4)), (10, mk(8, 8), (8, 8))]);
        let agg = aggregate(&stack, 1, (16, 16), MapFrame::full("x")).unwrap();
        assert!(agg.values.iter().all(|v| (v - k).abs() < 1e-12));
    }

    #[test]
    fn aggregate_upsamples_a_hot_corner_by_bilinear_weights() {
        let mut probs = Array3::zeros((1, 4, 3));
        for s in 0..4 {
            probs[[0, s, 0]] = 1.0;
        }
        probs[[0, 3, 0]] = 0.0;
        probs[[0, 3, 1]] = 1.0; // bottom-right cell of the 2x2 grid
        let stack = stack_from(vec![(7, probs, (2, 2))]);
        let agg = aggregate(&stack, 1, (4, 4), MapFrame::full("x")).unwrap();
        let wts = [0.0, 0.25, 0.75, 1.0];
        for i in 0..4 {
            for j in 0..4 {
                assert!((agg.values[[i, j]] - wts[i] * wts[j]).abs() < 1e-12);
            }
        }
        assert_eq!(agg.values[[3, 3]], 1.0);
    }

    #[test]
    fn aggregate_is_linear_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..25 {
            let a = random_stack(&mut rng, 4);
            let b = random_stack(&mut rng, 4);
            let (alpha, beta) = (0.3, 0.7);
            // alpha + beta = 1 keeps the blend row-stochastic.
            let mut blend = a.clone();
            for (bl, (la, lb)) in blend.layers.iter_mut().zip(a.layers.iter().zip(&b.layers)) {
                bl.probs = alpha * &la.probs + beta * &lb.probs;
            }
            let res = (8, 8);
            let frame = MapFrame::full("x");
            let agg_blend = aggregate(&blend, 1, res, frame.clone()).unwrap();
            let agg_a = aggregate(&a, 1, res, frame.clone()).unwrap();
            let agg_b = aggregate(&b, 1, res, frame.clone()).unwrap();
            let lin = alpha * &agg_a.values + beta * &agg_b.values;
            let max_err = (&agg_blend.values - &lin)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_err < 1e-12, "linearity violated by {max_err}");

            // Convex-combination bounds against the token-1 inputs.
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for la in &a.layers {
                let (heads, cells, _) = la.probs.dim();
                for hd in 0..heads {
                    for s in 0..cells {
                        lo = lo.min(la.probs[[hd, s, 1]]);
                        hi = hi.max(la.probs[[hd, s, 1]]);
                    }
                }
            }
            for &v in agg_a.values.iter() {
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_pullback_satisfies_the_dot_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let stack = random_stack(&mut rng, 4);
            let g = Array2::from_shape_fn((6, 6), |_| standard_normal(&mut rng));
            let fwd = aggregate(&stack, 2, (6, 6), MapFrame::full("x")).unwrap();
            let back = aggregate_pullback(&stack, 2, &g).unwrap();
            let lhs = (&fwd.values * &g).sum();
            let mut rhs = 0.0;
            for (la, lb) in stack.layers.iter().zip(&back.layers) {
                rhs += (&la.probs * &lb.probs).sum();
            }
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn gaussian_hits_its_analytic_values() {
        // Center aligned with a cell center on a 64-grid.
        let center = Point { x: (31.0 + 0.5) / 64.0, y: (31.0 + 0.5) / 64.0 };
        let t = gaussian_target(center, 27.98, (64, 64)).unwrap();
        assert_eq!(t.values[[31, 31]], 1.0);
        // One 512-frame pixel is 1/8 of a 64-grid cell; a cell 3.4975
        // cells away sits at exactly sigma = 27.98 px.
        let d_cells = 27.98 / 8.0;
        let v = gaussian_value(
            center,
            27.98,
            Point { x: center.x + d_cells / 64.0, y: center.y },
        );
        assert!((v - (-0.5f64).exp()).abs() < 1e-12, "{v}");
        // A grid cell 4 cells off (32 px) reads its own analytic value.
        let grid_v = t.values[[31, 35]];
        let d_px = 4.0 * 8.0;
        let want = (-(d_px * d_px) / (2.0 * 27.98f64 * 27.98)).exp();
        assert!((grid_v - want).abs() < 1e-12);
    }

    #[test]
    fn gaussian_is_radially_monotone() {
        let center = Point { x: 0.37, y: 0.61 };
        let t = gaussian_target(center, 16.0, (32, 32)).unwrap();
        let d = |r: usize, c: usize| {
            let p = Point { x: (c as f64 + 0.5) / 32.0, y: (r as f64 + 0.5) / 32.0 };
            let dx = p.x - center.x;
            let dy = p.y - center.y;
            (dx * dx + dy * dy).sqrt()
        };
        // Exhaustive pairwise check on a coarse sub-lattice.
        let mut cells: Vec<(f64, f64)> = Vec::new();
        for r in (0..32).step_by(3) {
            for c in (0..32).step_by(3) {
                cells.push((d(r, c), t.values[[r, c]]));
            }
        }
        for i in 0..cells.len() {
            for j in 0..cells.len() {
                if cells[i].0 < cells[j].0 - 1e-12 {
                    assert!(cells[i].1 > cells[j].1);
                }
            }
        }
    }

    #[test]
    fn crop_frame_gaussian_equals_cropped_full_frame_gaussian() {
        let center = Point { x: 0.55, y: 0.42 };
        let sigma = 27.98;
        let crop = CropParams::new(0.9317, (0.05, 0.02)).unwrap();
        // Render the full-frame target finely, crop+resample it, and
        // compare against the directly rendered crop-frame target.
        let full = gaussian_target(center, sigma, (512, 512)).unwrap();
        let out = 64;
        let direct = gaussian_target_in_crop(center, sigma, crop, (out, out)).unwrap();
        for r in 0..out {
            for c in 0..out {
                let crop_pt = Point {
                    x: (c as f64 + 0.5) / out as f64,
                    y: (r as f64 + 0.5) / out as f64,
                };
                let full_pt = crop.to_full(crop_pt);
                let (px, py) = full_pt.to_pixel(512, 512);
                let resampled = crate::util::bilinear_sample(&full.values, py, px);
                assert!(
                    (resampled - direct.values[[r, c]]).abs() < 1e-3,
                    "cell ({r},{c}): {resampled} vs {}",
                    direct.values[[r, c]]
                );
            }
        }
    }

    #[test]
    fn sample_map_reads_cell_centers_exactly_and_averages_midpoints() {
        let values = array![[1.0, 2.0], [3.0, 4.0]];
        let map = AggregatedMap { values, frame: MapFrame::full("x") };
        // Cell centers.
        assert_eq!(sample_map(&map, Point { x: 0.25, y: 0.25 }), 1.0);
        assert_eq!(sample_map(&map, Point { x: 0.75, y: 0.75 }), 4.0);
        // Midpoint of the four cells.
        assert!((sample_map(&map, Point { x: 0.5, y: 0.5 }) - 2.5).abs() < 1e-12);
        // Corners clamp to the nearest cell.
        assert_eq!(sample_map(&map, Point { x: 0.0, y: 0.0 }), 1.0);
        assert_eq!(sample_map(&map, Point { x: 1.0, y: 1.0 }), 4.0);
    }

    #[test]
    fn map_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.amap");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Array2::from_shape_fn((13, 7), |_| {
            // Values representable in f32 so the round trip is exact.
            (standard_normal(&mut rng) as f32) as f64
        });
        write_map(&path, &m).unwrap();
        let back = read_map(&path).unwrap();
        assert_eq!(back, m);

        std::fs::write(&path, b"AMAPxxxx").unwrap();
        assert!(read_map(&path).is_err());
        std::fs::write(&path, b"NOPE\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        let err = read_map(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }
}
