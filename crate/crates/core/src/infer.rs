//! Inference: crop/ensemble-averaged target attention and argmax
//! localization.
//!
//! An optimized embedding is applied to a target image by noising the
//! target's latent, reading the supervised token's attention map, and taking
//! its argmax. Two averages stabilize that readout: [`target_attention`]
//! recomputes the map on random crops and pastes each back into the full
//! frame (a coverage-weighted mean, so partially covering crops only vote
//! where they looked), and [`ensemble_attention`] means the maps of
//! independently optimized embeddings. [`localize`] then upsamples to
//! 512x512 before the argmax so the bilinear structure between grid cells
//! contributes sub-cell precision.
//!
//! [`match_keypoints`] strings the stages together for a list of query
//! points, reusing per-(source, query) ensembles through the embedding
//! cache so one optimization serves every target image.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attnmap::{aggregate, sample_map, AggregatedMap, MapFrame};
use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::optim::{optimize_ensemble, sample_crop, crop_image, EmbeddingCache, EmbeddingEnsemble};
use crate::types::{CropParams, HyperParams, ImageRecord, Point, PromptEmbedding};
use crate::util::{bilinear_resize, derive_seed, write_atomic};

/// Side length of the grid the attention map is upsampled to before the
/// argmax. Matches the working image resolution, so localization resolves
/// finer than the coarse attention cells.
const LOCALIZE_SIZE: usize = 512;

/// One localized correspondence: where the query's attention peaks on the
/// target, along with the full-frame heatmap it was read from.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub source_id: String,
    pub target_id: String,
    pub query: Point,
    pub predicted: Point,
    pub peak_value: f64,
    /// Set when the heatmap was constant, so `predicted` is only the
    /// tie-break convention rather than an actual peak.
    pub degenerate: bool,
    pub heatmap: AggregatedMap,
}

/// Argmax readout of a map: the peak position, its value, and whether the
/// map was too flat for the position to mean anything.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Localization {
    pub point: Point,
    pub peak_value: f64,
    pub degenerate: bool,
}

/// Attention map of `embedding`'s token on the full target frame, averaged
/// over `crops`: each crop is resampled to the backend input size, its map
/// is computed in crop coordinates, and every full-frame cell whose center
/// the crop covers receives a bilinear sample of that map. Cells are then
/// divided by the number of crops that covered them; cells no crop covered
/// stay 0. Passing the identity crop (alone or among others) therefore
/// guarantees full coverage.
///
/// The same `noise_seed` is used for every crop, mirroring the fixed
/// per-round noise of the optimization loop: the average isolates the
/// effect of translation rather than resampling the noise.
pub fn target_attention<B: Backend + ?Sized>(
    backend: &B,
    embedding: &PromptEmbedding,
    target: &ImageRecord,
    crops: &[CropParams],
    hp: &HyperParams,
    noise_seed: u64,
) -> Result<AggregatedMap> {
    if crops.is_empty() {
        return Err(Error::InvalidInput("target_attention needs at least one crop".into()));
    }
    hp.validate()?;
    let desc = backend.descriptor();
    let (out_h, out_w) = hp.loss_resolution;

    let mut acc = Array2::<f64>::zeros((out_h, out_w));
    let mut coverage = Array2::<f64>::zeros((out_h, out_w));
    for &crop in crops {
        let cropped = crop_image(target, crop, desc.input_size);
        let z = backend.prepare_latent(&cropped, hp.timestep, noise_seed)?;
        let stack = backend.attention_forward(&z, embedding, &hp.layers)?;
        let map = aggregate(
            &stack,
            embedding.token_index,
            hp.loss_resolution,
            MapFrame::crop(target.id.clone(), crop),
        )?;
        for r in 0..out_h {
            for c in 0..out_w {
                let u = Point {
                    x: (c as f64 + 0.5) / out_w as f64,
                    y: (r as f64 + 0.5) / out_h as f64,
                };
                if crop.contains(u, 0.0) {
                    acc[[r, c]] += sample_map(&map, crop.to_crop(u));
                    coverage[[r, c]] += 1.0;
                }
            }
        }
    }

    let mut values = Array2::<f64>::zeros((out_h, out_w));
    for r in 0..out_h {
        for c in 0..out_w {
            if coverage[[r, c]] > 0.0 {
                // The mean of probabilities is a probability; the clamp only
                // absorbs last-bit float drift from the accumulation.
                values[[r, c]] = (acc[[r, c]] / coverage[[r, c]]).clamp(0.0, 1.0);
            }
        }
    }
    AggregatedMap::new(values, MapFrame::full(target.id.clone()))
}

/// Unweighted mean of [`target_attention`] over the ensemble members, all
/// evaluated on the same crops and noise. Averaging maps (not embeddings)
/// keeps each member's peak where its own optimization put it.
pub fn ensemble_attention<B: Backend + ?Sized>(
    backend: &B,
    ensemble: &EmbeddingEnsemble,
    target: &ImageRecord,
    crops: &[CropParams],
    hp: &HyperParams,
    noise_seed: u64,
) -> Result<AggregatedMap> {
    if ensemble.is_empty() {
        return Err(Error::InvalidInput("ensemble_attention needs at least one member".into()));
    }
    let mut acc: Option<Array2<f64>> = None;
    for member in &ensemble.members {
        let map = target_attention(backend, member, target, crops, hp, noise_seed)?;
        acc = Some(match acc {
            None => map.values,
            Some(sum) => {
                if sum.dim() != map.values.dim() {
                    return Err(Error::InvalidInput(
                        "ensemble members produced maps of different shapes".into(),
                    ));
                }
                sum + &map.values
            }
        });
    }
    let mut values = acc.expect("ensemble checked non-empty");
    values /= ensemble.len() as f64;
    values.mapv_inplace(|v| v.clamp(0.0, 1.0));
    AggregatedMap::new(values, MapFrame::full(target.id.clone()))
}

/// Argmax localization. The map is bilinearly upsampled to
/// 512x512 and the maximal cell's center is returned in normalized
/// coordinates; ties break to the smallest row-major index. A constant map
/// has no peak to find: it returns (0, 0) with the degenerate flag set.
pub fn localize(map: &AggregatedMap) -> Localization {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in map.values.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        return Localization { point: Point { x: 0.0, y: 0.0 }, peak_value: lo, degenerate: true };
    }

    let fine = bilinear_resize(&map.values, LOCALIZE_SIZE, LOCALIZE_SIZE);
    let mut best = (0usize, 0usize);
    let mut best_v = f64::NEG_INFINITY;
    for r in 0..LOCALIZE_SIZE {
        for c in 0..LOCALIZE_SIZE {
            if fine[[r, c]] > best_v {
                best_v = fine[[r, c]];
                best = (r, c);
            }
        }
    }
    Localization {
        point: Point {
            x: (best.1 as f64 + 0.5) / LOCALIZE_SIZE as f64,
            y: (best.0 as f64 + 0.5) / LOCALIZE_SIZE as f64,
        },
        peak_value: best_v,
        degenerate: false,
    }
}

/// Base seed of the embedding ensemble for query `index` in a matching run
/// seeded with `seed`. Exposed so callers can pre-populate a cache with
/// entries that `match_keypoints` will afterwards find.
pub fn query_ensemble_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, "match-query", index as u64)
}

/// End-to-end matching: for each query on the source image, obtain its
/// embedding ensemble (from `cache` when given, optimizing on a miss),
/// average attention over `hp.n_inference_crops` target crops — the
/// identity crop first, so every target cell is covered, the rest sampled
/// at `hp.crop_fraction` — and localize the peak.
///
/// Per-query RNG streams are derived from `seed` and the query index, so
/// results are reproducible and independent of how queries are batched.
/// Failures carry the query index.
pub fn match_keypoints<B: Backend + ?Sized>(
    backend: &B,
    source: &ImageRecord,
    queries: &[Point],
    target: &ImageRecord,
    hp: &HyperParams,
    seed: u64,
    cache: Option<&EmbeddingCache>,
) -> Result<Vec<MatchResult>> {
    if queries.is_empty() {
        return Err(Error::InvalidInput("match_keypoints needs at least one query".into()));
    }
    hp.validate()?;

    let mut results = Vec::with_capacity(queries.len());
    for (i, &query) in queries.iter().enumerate() {
        let run = |i: usize, query: Point| -> Result<MatchResult> {
            let ens_seed = query_ensemble_seed(seed, i);
            let ensemble = match cache {
                Some(cache) => cache.load_or_optimize(backend, source, query, hp, ens_seed)?,
                None => optimize_ensemble(backend, source, query, hp, ens_seed)?,
            };

            let mut crops = Vec::with_capacity(hp.n_inference_crops);
            crops.push(CropParams::identity());
            let mut crop_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, "inference-crops", i as u64));
            for _ in 1..hp.n_inference_crops {
                crops.push(sample_crop(&mut crop_rng, hp.crop_fraction, None)?);
            }

            let noise_seed = derive_seed(seed, "inference-noise", i as u64);
            let heatmap =
                ensemble_attention(backend, &ensemble, target, &crops, hp, noise_seed)?;
            let loc = localize(&heatmap);
            Ok(MatchResult {
                source_id: source.id.clone(),
                target_id: target.id.clone(),
                query,
                predicted: loc.point,
                peak_value: loc.peak_value,
                degenerate: loc.degenerate,
                heatmap,
            })
        };
        results.push(
            run(i, query).map_err(|e| Error::Query { query: i, cause: Box::new(e) })?,
        );
    }
    Ok(results)
}

/// One match as a text record: `source_id, target_id, qx, qy, px, py, peak,
/// flags` with six decimal places. The flags field is `degenerate` for a
/// flat heatmap and `-` otherwise.
pub fn match_line(result: &MatchResult) -> String {
    format!(
        "{}, {}, {:.6}, {:.6}, {:.6}, {:.6}, {:.6}, {}",
        result.source_id,
        result.target_id,
        result.query.x,
        result.query.y,
        result.predicted.x,
        result.predicted.y,
        result.peak_value,
        if result.degenerate { "degenerate" } else { "-" },
    )
}

/// Write match records line-delimited to `path` (atomically, so a crashed
/// run never leaves a half-written report).
pub fn write_match_results(path: &Path, results: &[MatchResult]) -> Result<()> {
    let mut text = String::new();
    for r in results {
        text.push_str(&match_line(r));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}
