//! PCK metrics, report rendering, and random hyperparameter search.
//!
//! A prediction is correct when its distance to the annotated target point,
//! measured in the target image's original pixels, is at most
//! `alpha * max(reference height, reference width)` — inclusive, so
//! boundary ties are deterministic. The reference is the target bounding
//! box or the full image depending on the benchmark. Reports aggregate per
//! class and overall, and histogram each pair's correct fraction at
//! alpha 0.1 into ten bins.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::Backend;
use crate::data::{CorrespondencePair, DatasetKind, PckReference};
use crate::error::{Error, Result};
use crate::infer::{match_keypoints, MatchResult};
use crate::types::HyperParams;
use crate::util::{derive_seed, uniform};

pub const HISTOGRAM_BINS: usize = 10;
/// Per-pair correct fractions are histogrammed at this alpha regardless of
/// which alphas the report tabulates.
pub const HISTOGRAM_ALPHA: f64 = 0.1;

/// Published results the reports embed for diffing: per benchmark,
/// (PCK@0.05, PCK@0.1) as percentages.
pub const REFERENCE_TABLE: [(DatasetKind, f64, f64); 3] = [
    (DatasetKind::Cub, 61.6, 77.5),
    (DatasetKind::PfWillow, 53.0, 84.3),
    (DatasetKind::Spair, 28.9, 45.4),
];

/// Published per-class SPair-71k PCK@0.1 percentages (the average is the
/// SPair entry of [`REFERENCE_TABLE`]).
pub const REFERENCE_SPAIR_CLASS_PCK01: [(&str, f64); 18] = [
    ("aeroplane", 54.2),
    ("bicycle", 45.1),
    ("bird", 72.9),
    ("boat", 33.6),
    ("bottle", 34.4),
    ("bus", 34.9),
    ("car", 42.9),
    ("cat", 66.8),
    ("chair", 25.9),
    ("cow", 56.5),
    ("dog", 49.8),
    ("horse", 48.8),
    ("motorbike", 46.6),
    ("person", 48.8),
    ("pottedplant", 30.1),
    ("sheep", 33.0),
    ("train", 49.1),
    ("tvmonitor", 43.9),
];

/// Correct/total counter for one (class, alpha) cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PckCell {
    pub correct: usize,
    pub total: usize,
}

impl PckCell {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRow {
    pub class_name: String,
    /// One cell per report alpha, in report order.
    pub cells: Vec<PckCell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PckReport {
    pub alphas: Vec<f64>,
    pub reference: PckReference,
    /// Sorted by class name.
    pub per_class: Vec<ClassRow>,
    pub overall: Vec<PckCell>,
    /// Pair counts by correct fraction at [`HISTOGRAM_ALPHA`]: ten
    /// right-open bins over [0, 1], the last closed.
    pub histogram: [usize; HISTOGRAM_BINS],
    pub n_pairs: usize,
}

/// `max(reference height, reference width)` in target pixels.
fn reference_pixels(pair: &CorrespondencePair, reference: PckReference) -> Result<f64> {
    let (h, w) = pair.target.size;
    match reference {
        PckReference::Image => Ok(h.max(w) as f64),
        PckReference::BBox => {
            let bbox = pair.bbox_target.ok_or_else(|| {
                Error::InvalidInput(format!(
                    "pair {} -> {} has no target bounding box, required by the bbox threshold reference",
                    pair.source.id, pair.target.id
                ))
            })?;
            Ok(((bbox.x1 - bbox.x0) * w as f64).max((bbox.y1 - bbox.y0) * h as f64))
        }
    }
}

fn check_aligned(index: usize, pred: &MatchResult, pair: &CorrespondencePair, kp_idx: usize) -> Result<()> {
    let kp = &pair.keypoints[kp_idx];
    let aligned = pred.source_id == pair.source.id
        && pred.target_id == pair.target.id
        && (pred.query.x - kp.source.x).abs() < 1e-9
        && (pred.query.y - kp.source.y).abs() < 1e-9;
    if !aligned {
        return Err(Error::InvalidInput(format!(
            "prediction {index} does not align with keypoint {} of pair {} -> {}",
            kp.id, pair.source.id, pair.target.id
        )));
    }
    Ok(())
}

/// Score predictions against their pairs at each alpha.
///
/// `predictions` must hold exactly one result per annotated keypoint, in
/// pair order and keypoint order within each pair.
pub fn pck(
    predictions: &[MatchResult],
    pairs: &[CorrespondencePair],
    alphas: &[f64],
    reference: PckReference,
) -> Result<PckReport> {
    if alphas.is_empty() {
        return Err(Error::InvalidInput("no alphas requested".into()));
    }
    for &alpha in alphas {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::InvalidInput(format!("alpha {alpha} is not positive")));
        }
    }

    let mut per_class: BTreeMap<String, Vec<PckCell>> = BTreeMap::new();
    let mut overall = vec![PckCell::default(); alphas.len()];
    let mut histogram = [0usize; HISTOGRAM_BINS];
    let mut offset = 0;

    for pair in pairs {
        let n = pair.keypoints.len();
        if offset + n > predictions.len() {
            return Err(Error::InvalidInput(format!(
                "ran out of predictions at pair {} -> {}: need {} more, have {}",
                pair.source.id,
                pair.target.id,
                n,
                predictions.len() - offset
            )));
        }
        let preds = &predictions[offset..offset + n];
        let ref_px = reference_pixels(pair, reference)?;
        let (h, w) = pair.target.size;
        let cells = per_class
            .entry(pair.class_name.clone())
            .or_insert_with(|| vec![PckCell::default(); alphas.len()]);

        let mut correct_hist = 0usize;
        for (k, pred) in preds.iter().enumerate() {
            check_aligned(offset + k, pred, pair, k)?;
            let dist = pred.predicted.pixel_distance(&pair.keypoints[k].target, h, w);
            for (a, &alpha) in alphas.iter().enumerate() {
                let correct = dist <= alpha * ref_px;
                cells[a].total += 1;
                overall[a].total += 1;
                if correct {
                    cells[a].correct += 1;
                    overall[a].correct += 1;
                }
            }
            if dist <= HISTOGRAM_ALPHA * ref_px {
                correct_hist += 1;
            }
        }

        let fraction = if n == 0 { 0.0 } else { correct_hist as f64 / n as f64 };
        let bin = ((fraction * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
        offset += n;
    }

    if offset != predictions.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions left over after {} annotated keypoints",
            predictions.len() - offset,
            offset
        )));
    }

    Ok(PckReport {
        alphas: alphas.to_vec(),
        reference,
        per_class: per_class
            .into_iter()
            .map(|(class_name, cells)| ClassRow { class_name, cells })
            .collect(),
        overall,
        histogram,
        n_pairs: pairs.len(),
    })
}

/// One benchmark's scored report, for rendering.
#[derive(Debug, Clone)]
pub struct DatasetReport {
    pub dataset: DatasetKind,
    pub report: PckReport,
}

/// Machine-readable rendering: one `dataset,class,alpha,correct,total,pck`
/// row per class and alpha, with `all` rows for the overall aggregates.
pub fn report_csv(reports: &[DatasetReport]) -> String {
    let mut out = String::from("dataset,class,alpha,correct,total,pck\n");
    for dr in reports {
        let rows = dr
            .report
            .per_class
            .iter()
            .map(|row| (row.class_name.as_str(), &row.cells))
            .chain(std::iter::once(("all", &dr.report.overall)));
        for (class, cells) in rows {
            for (alpha, cell) in dr.report.alphas.iter().zip(cells) {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{:.6}",
                    dr.dataset.as_str(),
                    class,
                    alpha,
                    cell.correct,
                    cell.total,
                    cell.value()
                );
            }
        }
    }
    out
}

fn published_for(dataset: DatasetKind, alpha: f64) -> Option<f64> {
    REFERENCE_TABLE.iter().find_map(|&(kind, at05, at01)| {
        if kind != dataset {
            return None;
        }
        if (alpha - 0.05).abs() < 1e-9 {
            Some(at05)
        } else if (alpha - 0.1).abs() < 1e-9 {
            Some(at01)
        } else {
            None
        }
    })
}

fn published_for_class(dataset: DatasetKind, class: &str) -> Option<f64> {
    if dataset != DatasetKind::Spair {
        return None;
    }
    REFERENCE_SPAIR_CLASS_PCK01
        .iter()
        .find_map(|&(name, v)| (name == class).then_some(v))
}

/// Human-readable rendering: per-dataset blocks with percentage columns,
/// the published row for diffing, and the correctness histogram.
pub fn report_text(reports: &[DatasetReport]) -> String {
    let mut out = String::new();
    for dr in reports {
        let report = &dr.report;
        let reference = match report.reference {
            PckReference::BBox => "bbox",
            PckReference::Image => "image",
        };
        let _ = writeln!(
            out,
            "== {} ({} pairs, threshold reference: {reference}) ==",
            dr.dataset.as_str(),
            report.n_pairs
        );

        let width = report
            .per_class
            .iter()
            .map(|r| r.class_name.len())
            .chain(["published@0.1".len()].into_iter())
            .max()
            .unwrap_or(10)
            .max(10);
        let _ = write!(out, "{:<width$}", "class");
        for alpha in &report.alphas {
            let _ = write!(out, "  {:>9}", format!("PCK@{alpha}"));
        }
        let has_class_reference = report
            .per_class
            .iter()
            .any(|r| published_for_class(dr.dataset, &r.class_name).is_some());
        if has_class_reference {
            let _ = write!(out, "  {:>13}", "published@0.1");
        }
        out.push('\n');

        for row in &report.per_class {
            let _ = write!(out, "{:<width$}", row.class_name);
            for cell in &row.cells {
                let _ = write!(out, "  {:>9.2}", 100.0 * cell.value());
            }
            if has_class_reference {
                match published_for_class(dr.dataset, &row.class_name) {
                    Some(v) => {
                        let _ = write!(out, "  {:>13.1}", v);
                    }
                    None => {
                        let _ = write!(out, "  {:>13}", "-");
                    }
                }
            }
            out.push('\n');
        }

        let _ = write!(out, "{:<width$}", "average");
        for cell in &report.overall {
            let _ = write!(out, "  {:>9.2}", 100.0 * cell.value());
        }
        out.push('\n');
        let _ = write!(out, "{:<width$}", "published");
        for &alpha in &report.alphas {
            match published_for(dr.dataset, alpha) {
                Some(v) => {
                    let _ = write!(out, "  {:>9.1}", v);
                }
                None => {
                    let _ = write!(out, "  {:>9}", "-");
                }
            }
        }
        out.push('\n');

        let _ = writeln!(out, "pairs by correct fraction at PCK@{HISTOGRAM_ALPHA}:");
        for (i, count) in report.histogram.iter().enumerate() {
            let hi = (i + 1) * 10;
            let close = if i + 1 == HISTOGRAM_BINS { ']' } else { ')' };
            let _ = write!(out, "  [{:>3}%,{hi:>4}%{close} {count}", i * 10);
            if i % 5 == 4 {
                out.push('\n');
            }
        }
        out.push('\n');
    }
    out
}

/// Hyperparameter ranges for [`random_search`]; unsampled fields come from
/// `base`.
#[derive(Debug, Clone)]
pub struct SearchSpace {
    pub base: HyperParams,
    /// Layers are a random non-empty subset of this pool.
    pub layer_pool: Vec<usize>,
    /// Sampled log-uniformly (the range spans over an order of magnitude).
    pub learning_rate: (f64, f64),
    pub sigma: (f64, f64),
    /// Inclusive integer range.
    pub timestep: (u32, u32),
    /// Inclusive integer range.
    pub opt_steps: (usize, usize),
    pub crop_fraction: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            base: HyperParams::default(),
            layer_pool: (7..=15).collect(),
            learning_rate: (5e-4, 1e-2),
            sigma: (8.0, 32.0),
            timestep: (1, 10),
            opt_steps: (100, 300),
            crop_fraction: (0.5, 1.0),
        }
    }
}

fn below<R: RngCore>(rng: &mut R, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

fn sample_hp(space: &SearchSpace, rng: &mut ChaCha8Rng) -> Result<HyperParams> {
    if space.layer_pool.is_empty() {
        return Err(Error::InvalidInput("empty layer pool".into()));
    }
    let mut hp = space.base.clone();

    // Non-empty subset: uniform size, then a partial shuffle of the pool.
    let k = 1 + below(rng, space.layer_pool.len());
    let mut pool = space.layer_pool.clone();
    for i in 0..k {
        let j = i + below(rng, pool.len() - i);
        pool.swap(i, j);
    }
    let mut layers = pool[..k].to_vec();
    layers.sort_unstable();
    hp.layers = layers;

    let (lr_lo, lr_hi) = space.learning_rate;
    hp.learning_rate = (lr_lo.ln() + uniform(rng) * (lr_hi.ln() - lr_lo.ln())).exp();
    hp.sigma = space.sigma.0 + uniform(rng) * (space.sigma.1 - space.sigma.0);
    hp.timestep = space.timestep.0 + below(rng, (space.timestep.1 - space.timestep.0 + 1) as usize) as u32;
    hp.opt_steps = space.opt_steps.0 + below(rng, space.opt_steps.1 - space.opt_steps.0 + 1);
    hp.crop_fraction =
        space.crop_fraction.0 + uniform(rng) * (space.crop_fraction.1 - space.crop_fraction.0);
    hp.validate()?;
    Ok(hp)
}

#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub index: usize,
    pub hp: HyperParams,
    /// PCK@0.1 on the fixed validation subset.
    pub pck: f64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: TrialRecord,
    pub trials: Vec<TrialRecord>,
}

/// One trial per log line: index, layers, sampled values, score.
pub fn trial_line(t: &TrialRecord) -> String {
    let layers: Vec<String> = t.hp.layers.iter().map(ToString::to_string).collect();
    format!(
        "{}, {}, {:.6e}, {:.4}, {}, {}, {:.4}, {:.4}",
        t.index,
        layers.join(";"),
        t.hp.learning_rate,
        t.hp.sigma,
        t.hp.timestep,
        t.hp.opt_steps,
        t.hp.crop_fraction,
        t.pck
    )
}

/// The fixed correspondence subset every trial scores: `n_corr` of the
/// `(pair, keypoint)` slots, drawn once from the search seed and returned
/// sorted. Also the protocol behind seeded evaluation subsets, so a
/// sweep and a later scored run can agree on what "50 correspondences"
/// means.
pub fn pick_subset(pairs: &[CorrespondencePair], n_corr: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut slots: Vec<(usize, usize)> = pairs
        .iter()
        .enumerate()
        .flat_map(|(p, pair)| (0..pair.keypoints.len()).map(move |k| (p, k)))
        .collect();
    let n = n_corr.min(slots.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "search-subset", 0));
    for i in 0..n {
        let j = i + below(&mut rng, slots.len() - i);
        slots.swap(i, j);
    }
    let mut subset = slots[..n].to_vec();
    subset.sort_unstable();
    subset
}

fn evaluate_trial<B: Backend + ?Sized>(
    backend: &B,
    pairs: &[CorrespondencePair],
    subset: &[(usize, usize)],
    hp: &HyperParams,
    trial_seed: u64,
    reference: PckReference,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for group in subset.chunk_by(|a, b| a.0 == b.0) {
        let pair = &pairs[group[0].0];
        let source = pair.source.load()?;
        let target = pair.target.load()?;
        let queries: Vec<_> = group.iter().map(|&(_, k)| pair.keypoints[k].source).collect();
        let results = match_keypoints(
            backend,
            &source,
            &queries,
            &target,
            hp,
            derive_seed(trial_seed, "search-eval", group[0].0 as u64),
            None,
        )?;
        let threshold = HISTOGRAM_ALPHA * reference_pixels(pair, reference)?;
        let (h, w) = pair.target.size;
        for (result, &(_, k)) in results.iter().zip(group) {
            if result.predicted.pixel_distance(&pair.keypoints[k].target, h, w) <= threshold {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Random search: `n_runs` trials, each sampled from `space` with seed
/// `seed + index` and scored by PCK@0.1 on a fixed `n_corr`-correspondence
/// subset of `pairs`. Returns the first best trial and the full log.
pub fn random_search<B: Backend + ?Sized>(
    backend: &B,
    pairs: &[CorrespondencePair],
    reference: PckReference,
    space: &SearchSpace,
    n_runs: usize,
    n_corr: usize,
    seed: u64,
) -> Result<SearchOutcome> {
    if n_runs == 0 || n_corr == 0 {
        return Err(Error::InvalidInput("n_runs and n_corr must be positive".into()));
    }
    let subset = pick_subset(pairs, n_corr, seed);
    if subset.is_empty() {
        return Err(Error::InvalidInput(
            "validation set has no keypoints to search over".into(),
        ));
    }

    let mut trials = Vec::with_capacity(n_runs);
    for index in 0..n_runs {
        let trial_seed = seed.wrapping_add(index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
        let hp = sample_hp(space, &mut rng)?;
        let pck = evaluate_trial(backend, pairs, &subset, &hp, trial_seed, reference)?;
        trials.push(TrialRecord { index, hp, pck });
    }

    let mut best = 0;
    for (i, trial) in trials.iter().enumerate() {
        if trial.pck > trials[best].pck {
            best = i;
        }
    }
    Ok(SearchOutcome { best: trials[best].clone(), trials })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attnmap::{AggregatedMap, MapFrame};
    use crate::backend::toy::make_toy_backend;
    use crate::data::{synthetic_dataset, ImageHandle, Keypoint, Split};
    use crate::types::{Point, Rect};
    use ndarray::Array2;
    use std::path::PathBuf;

    fn handle(id: &str, h: usize, w: usize) -> ImageHandle {
        ImageHandle::from_file(id, PathBuf::from("/unused"), (h, w))
    }

    /// A pair whose keypoints are given in target pixels of an
    /// `size x size` target; sources sit at mirrored positions (their exact
    /// location is irrelevant to scoring).
    fn pair_px(
        class: &str,
        idx: usize,
        size: usize,
        kps: &[(f64, f64)],
        bbox: Option<Rect>,
    ) -> CorrespondencePair {
        let keypoints = kps
            .iter()
            .enumerate()
            .map(|(i, &(px, py))| Keypoint {
                source: Point::from_pixel(px, py, 2 * size, 2 * size),
                target: Point::from_pixel(px, py, size, size),
                id: i.to_string(),
            })
            .collect();
        CorrespondencePair {
            source: handle(&format!("src-{idx}"), 2 * size, 2 * size),
            target: handle(&format!("tgt-{idx}"), size, size),
            keypoints,
            class_name: class.to_string(),
            bbox_source: bbox,
            bbox_target: bbox,
            split: Split::Test,
        }
    }

    /// Predictions offset from each ground-truth point by per-keypoint
    /// pixel displacements along x.
    fn offset_preds(pair: &CorrespondencePair, dx_px: &[f64]) -> Vec<MatchResult> {
        let (_, w) = pair.target.size;
        pair.keypoints
            .iter()
            .zip(dx_px)
            .map(|(kp, &dx)| MatchResult {
                source_id: pair.source.id.clone(),
                target_id: pair.target.id.clone(),
                query: kp.source,
                predicted: Point { x: kp.target.x + dx / w as f64, y: kp.target.y },
                peak_value: 0.5,
                degenerate: false,
                heatmap: AggregatedMap::new(
                    Array2::zeros((1, 1)),
                    MapFrame::full(pair.target.id.clone()),
                )
                .unwrap(),
            })
            .collect()
    }

    #[test]
    fn perfect_predictions_score_one_and_fill_the_top_bin() {
        let pairs = vec![
            pair_px("cat", 0, 128, &[(10.0, 12.0), (40.0, 50.0)], None),
            pair_px("dog", 1, 64, &[(5.0, 5.0)], None),
        ];
        let preds: Vec<MatchResult> = pairs.iter().flat_map(|p| offset_preds(p, &[0.0; 2])).collect();
        let report = pck(&preds, &pairs, &[0.05, 0.1], PckReference::Image).unwrap();
        assert_eq!(report.per_class.len(), 2);
        assert_eq!(report.per_class[0].class_name, "cat");
        for row in &report.per_class {
            assert!(row.cells.iter().all(|c| c.value() == 1.0));
        }
        assert_eq!(report.overall[0].correct, 3);
        assert_eq!(report.overall[0].total, 3);
        assert_eq!(report.histogram[HISTOGRAM_BINS - 1], 2);
        assert_eq!(report.histogram.iter().sum::<usize>(), report.n_pairs);
    }

    #[test]
    fn seven_keypoints_match_a_hand_count() {
        // Target images 128x128; image reference makes the threshold
        // alpha * 128 pixels: 6.4 at alpha 0.05, 12.8 at alpha 0.1.
        let pairs = vec![
            pair_px("a", 0, 128, &[(30.0, 30.0), (40.0, 40.0), (50.0, 50.0), (60.0, 60.0)], None),
            pair_px("b", 1, 128, &[(20.0, 64.0), (64.0, 20.0), (90.0, 90.0)], None),
        ];
        let preds: Vec<MatchResult> = [
            offset_preds(&pairs[0], &[0.0, 6.0, 7.0, 13.0]),
            offset_preds(&pairs[1], &[1.0, 12.0, 20.0]),
        ]
        .into_iter()
        .flatten()
        .collect();

        // Hand count at 0.05 (<= 6.4): offsets 0, 6, 1 pass -> 3/7.
        // Hand count at 0.1 (<= 12.8): offsets 0, 6, 7, 1, 12 pass -> 5/7.
        let report = pck(&preds, &pairs, &[0.05, 0.1], PckReference::Image).unwrap();
        assert_eq!((report.overall[0].correct, report.overall[0].total), (3, 7));
        assert_eq!((report.overall[1].correct, report.overall[1].total), (5, 7));
        assert!((report.overall[1].value() - 5.0 / 7.0).abs() < 1e-12);

        // Per-pair fractions at 0.1: 3/4 -> bin 7, 2/3 -> bin 6.
        assert_eq!(report.histogram[7], 1);
        assert_eq!(report.histogram[6], 1);
    }

    #[test]
    fn boundary_distance_counts_as_correct() {
        // Exact arithmetic: 128-pixel target, bbox 60 px wide and 40 px
        // tall, alpha 0.25 -> threshold exactly 15 px.
        let bbox = Rect::new(0.0, 0.0, 60.0 / 128.0, 40.0 / 128.0).unwrap();
        let pair = pair_px("a", 0, 128, &[(30.0, 60.0), (30.0, 80.0)], Some(bbox));
        let preds = offset_preds(&pair, &[15.0, 16.0]);
        let pairs = vec![pair];
        let report = pck(&preds, &pairs, &[0.25], PckReference::BBox).unwrap();
        assert_eq!(report.overall[0].correct, 1);
        assert_eq!(report.overall[0].total, 2);
    }

    #[test]
    fn bbox_and_image_references_differ() {
        let bbox = Rect::new(0.25, 0.25, 0.5, 0.75).unwrap();
        // Box is 32 x 64 pixels of a 128 target: reference 64 vs image 128.
        let pair = pair_px("a", 0, 128, &[(64.0, 64.0)], Some(bbox));
        let preds = offset_preds(&pair, &[10.0]);
        let pairs = vec![pair];
        // alpha 0.1: bbox threshold 6.4 (miss), image threshold 12.8 (hit).
        let miss = pck(&preds, &pairs, &[0.1], PckReference::BBox).unwrap();
        let hit = pck(&preds, &pairs, &[0.1], PckReference::Image).unwrap();
        assert_eq!(miss.overall[0].correct, 0);
        assert_eq!(hit.overall[0].correct, 1);
    }

    #[test]
    fn missing_bbox_under_bbox_reference_is_an_error() {
        let pair = pair_px("a", 0, 64, &[(10.0, 10.0)], None);
        let preds = offset_preds(&pair, &[0.0]);
        let err = pck(&preds, &[pair], &[0.1], PckReference::BBox).unwrap_err();
        assert!(err.to_string().contains("no target bounding box"));
    }

    #[test]
    fn misaligned_or_miscounted_predictions_are_rejected() {
        let pair_a = pair_px("a", 0, 64, &[(10.0, 10.0), (20.0, 20.0)], None);
        let preds = offset_preds(&pair_a, &[0.0, 0.0]);

        let short = pck(&preds[..1], &[pair_a.clone()], &[0.1], PckReference::Image);
        assert!(short.unwrap_err().to_string().contains("ran out of predictions"));

        let extra = pck(&preds, &[], &[0.1], PckReference::Image);
        assert!(extra.unwrap_err().to_string().contains("left over"));

        let mut swapped = preds.clone();
        swapped.swap(0, 1);
        let err = pck(&swapped, &[pair_a.clone()], &[0.1], PckReference::Image).unwrap_err();
        assert!(err.to_string().contains("does not align"));

        assert!(pck(&preds, &[pair_a.clone()], &[], PckReference::Image).is_err());
        assert!(pck(&preds, &[pair_a], &[-0.1], PckReference::Image).is_err());
    }

    #[test]
    fn histogram_bins_are_right_open_with_a_closed_top() {
        // Fractions 0, 1/4, 1/2, 9/10, 1 land in bins 0, 2, 5, 9, 9.
        let sizes = [4usize, 4, 4, 10, 2];
        let correct = [0usize, 1, 2, 9, 2];
        let pairs: Vec<CorrespondencePair> = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let kps: Vec<(f64, f64)> = (0..n).map(|k| (20.0 + k as f64, 40.0)).collect();
                pair_px("c", i, 128, &kps, None)
            })
            .collect();
        let preds: Vec<MatchResult> = pairs
            .iter()
            .zip(correct)
            .flat_map(|(pair, ok)| {
                // Threshold at alpha 0.1 is 12.8 px: hits at 0, misses at 30.
                let dx: Vec<f64> =
                    (0..pair.keypoints.len()).map(|k| if k < ok { 0.0 } else { 30.0 }).collect();
                offset_preds(pair, &dx)
            })
            .collect();
        let report = pck(&preds, &pairs, &[0.1], PckReference::Image).unwrap();
        let mut expected = [0usize; HISTOGRAM_BINS];
        expected[0] = 1;
        expected[2] = 1;
        expected[5] = 1;
        expected[9] = 2;
        assert_eq!(report.histogram, expected);
        assert_eq!(report.histogram.iter().sum::<usize>(), 5);
    }

    #[test]
    fn pck_is_monotone_in_alpha_and_permutation_invariant() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..50 {
            let n_pairs = 1 + below(&mut rng, 4);
            let pairs: Vec<CorrespondencePair> = (0..n_pairs)
                .map(|i| {
                    let n = 1 + below(&mut rng, 5);
                    let kps: Vec<(f64, f64)> = (0..n)
                        .map(|_| (20.0 + 80.0 * uniform(&mut rng), 20.0 + 80.0 * uniform(&mut rng)))
                        .collect();
                    pair_px(["a", "b"][i % 2], i, 128, &kps, None)
                })
                .collect();
            let preds: Vec<MatchResult> = pairs
                .iter()
                .flat_map(|p| {
                    let dx: Vec<f64> =
                        (0..p.keypoints.len()).map(|_| 25.0 * uniform(&mut rng)).collect();
                    offset_preds(p, &dx)
                })
                .collect();

            let alphas = [0.02, 0.05, 0.1, 0.2];
            let report = pck(&preds, &pairs, &alphas, PckReference::Image).unwrap();
            for pair in report.overall.windows(2) {
                assert!(pair[1].value() >= pair[0].value());
            }

            // Permuting whole pairs (with their prediction blocks) changes
            // nothing: classes are re-sorted and the histogram is a bag.
            if pairs.len() > 1 {
                let mut order: Vec<usize> = (0..pairs.len()).collect();
                order.swap(0, pairs.len() - 1);
                let permuted_pairs: Vec<_> = order.iter().map(|&i| pairs[i].clone()).collect();
                let permuted_preds: Vec<_> = order
                    .iter()
                    .flat_map(|&i| offset_preds(&pairs[i], &dx_of(&preds, &pairs, i)))
                    .collect();
                let permuted =
                    pck(&permuted_preds, &permuted_pairs, &alphas, PckReference::Image).unwrap();
                assert_eq!(permuted.per_class, report.per_class);
                assert_eq!(permuted.overall, report.overall);
                assert_eq!(permuted.histogram, report.histogram);
            }
        }
    }

    /// Recover the x displacements used for pair `i`'s predictions.
    fn dx_of(preds: &[MatchResult], pairs: &[CorrespondencePair], i: usize) -> Vec<f64> {
        let offset: usize = pairs[..i].iter().map(|p| p.keypoints.len()).sum();
        let (_, w) = pairs[i].target.size;
        pairs[i]
            .keypoints
            .iter()
            .enumerate()
            .map(|(k, kp)| (preds[offset + k].predicted.x - kp.target.x) * w as f64)
            .collect()
    }

    #[test]
    fn uniform_rescaling_leaves_pck_unchanged() {
        let kps = [(10.0, 12.0), (40.0, 30.0), (55.0, 60.0)];
        let small = pair_px("a", 0, 64, &kps, Some(Rect::new(0.1, 0.1, 0.9, 0.7).unwrap()));
        let doubled: Vec<(f64, f64)> = kps.iter().map(|&(x, y)| (2.0 * x + 0.5, 2.0 * y + 0.5)).collect();
        let big = pair_px("a", 0, 128, &doubled, Some(Rect::new(0.1, 0.1, 0.9, 0.7).unwrap()));

        for dx in [2.0, 5.0, 9.0] {
            let small_report = pck(
                &offset_preds(&small, &[dx, 0.0, 2.0 * dx]),
                std::slice::from_ref(&small),
                &[0.05, 0.1],
                PckReference::BBox,
            )
            .unwrap();
            let big_report = pck(
                &offset_preds(&big, &[2.0 * dx, 0.0, 4.0 * dx]),
                std::slice::from_ref(&big),
                &[0.05, 0.1],
                PckReference::BBox,
            )
            .unwrap();
            assert_eq!(small_report.overall, big_report.overall);
        }
    }

    #[test]
    fn csv_is_long_format_with_an_all_row() {
        let pair = pair_px("cat", 0, 128, &[(30.0, 30.0), (60.0, 60.0)], None);
        let preds = offset_preds(&pair, &[0.0, 30.0]);
        let report = pck(&preds, &[pair], &[0.1], PckReference::Image).unwrap();
        let csv = report_csv(&[DatasetReport { dataset: DatasetKind::Spair, report }]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "dataset,class,alpha,correct,total,pck");
        assert_eq!(lines[1], "spair,cat,0.1,1,2,0.500000");
        assert_eq!(lines[2], "spair,all,0.1,1,2,0.500000");
        assert_eq!(lines.len(), 3);

        assert_eq!(report_csv(&[]), "dataset,class,alpha,correct,total,pck\n");
    }

    #[test]
    fn text_report_embeds_the_published_rows() {
        let pair = pair_px("cat", 0, 128, &[(30.0, 30.0)], None);
        let preds = offset_preds(&pair, &[0.0]);
        let report = pck(&preds, &[pair], &[0.05, 0.1], PckReference::Image).unwrap();
        let text = report_text(&[DatasetReport { dataset: DatasetKind::Spair, report }]);
        assert!(text.contains("published"), "{text}");
        assert!(text.contains("28.9"), "{text}");
        assert!(text.contains("45.4"), "{text}");
        // The per-class published column carries the cat reference value.
        assert!(text.contains("66.8"), "{text}");
        assert!(text.contains("pairs by correct fraction"), "{text}");
    }

    #[test]
    fn reference_diff_data_matches_the_published_numbers() {
        let cat = REFERENCE_SPAIR_CLASS_PCK01
            .iter()
            .find(|(name, _)| *name == "cat")
            .unwrap();
        assert_eq!(cat.1, 66.8);
        assert_eq!(REFERENCE_SPAIR_CLASS_PCK01.len(), 18);
        let spair = REFERENCE_TABLE.iter().find(|(k, _, _)| *k == DatasetKind::Spair).unwrap();
        assert_eq!((spair.1, spair.2), (28.9, 45.4));
        let pf = REFERENCE_TABLE.iter().find(|(k, _, _)| *k == DatasetKind::PfWillow).unwrap();
        assert_eq!((pf.1, pf.2), (53.0, 84.3));
        let cub = REFERENCE_TABLE.iter().find(|(k, _, _)| *k == DatasetKind::Cub).unwrap();
        assert_eq!((cub.1, cub.2), (61.6, 77.5));
    }

    fn tiny_space() -> SearchSpace {
        let mut base = HyperParams::default();
        base.n_embeddings = 1;
        base.n_inference_crops = 2;
        base.loss_resolution = (16, 16);
        SearchSpace {
            base,
            layer_pool: vec![7, 8, 9, 10],
            learning_rate: (1e-3, 1e-2),
            sigma: (8.0, 32.0),
            timestep: (1, 10),
            opt_steps: (2, 5),
            crop_fraction: (0.8, 1.0),
        }
    }

    #[test]
    fn sampled_trials_stay_inside_the_space() {
        let space = tiny_space();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let hp = sample_hp(&space, &mut rng).unwrap();
            assert!(!hp.layers.is_empty());
            assert!(hp.layers.windows(2).all(|w| w[0] < w[1]));
            assert!(hp.layers.iter().all(|l| space.layer_pool.contains(l)));
            assert!((1e-3..=1e-2).contains(&hp.learning_rate));
            assert!((8.0..=32.0).contains(&hp.sigma));
            assert!((1..=10).contains(&hp.timestep));
            assert!((2..=5).contains(&hp.opt_steps));
            assert!((0.8..=1.0).contains(&hp.crop_fraction));
            assert_eq!(hp.n_embeddings, 1);
        }
    }

    #[test]
    fn search_is_deterministic_and_returns_the_argmax() {
        let (backend, _) =
            make_toy_backend((4, 4), 6, 24, Point { x: 0.7, y: 0.3 }, 5).unwrap();
        let pairs = synthetic_dataset(9, 3, 2, 32).unwrap();
        let space = tiny_space();

        let a = random_search(&backend, &pairs, PckReference::Image, &space, 3, 4, 77).unwrap();
        let b = random_search(&backend, &pairs, PckReference::Image, &space, 3, 4, 77).unwrap();
        assert_eq!(a.trials.len(), 3);
        for (ta, tb) in a.trials.iter().zip(&b.trials) {
            assert_eq!(ta.hp.layers, tb.hp.layers);
            assert_eq!(ta.hp.learning_rate, tb.hp.learning_rate);
            assert_eq!(ta.pck, tb.pck);
        }
        assert_eq!(a.best.index, b.best.index);
        let max = a.trials.iter().map(|t| t.pck).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.best.pck, max);
        // First-wins tie breaking: no earlier trial strictly beats it.
        assert!(a.trials[..a.best.index].iter().all(|t| t.pck < max));

        let single = random_search(&backend, &pairs, PckReference::Image, &space, 1, 4, 5).unwrap();
        assert_eq!(single.best.index, 0);
        assert_eq!(single.trials.len(), 1);

        let err = random_search(&backend, &[], PckReference::Image, &space, 2, 4, 5).unwrap_err();
        assert!(err.to_string().contains("no keypoints"));
    }

    #[test]
    fn trial_lines_are_comma_separated() {
        let mut hp = HyperParams::default();
        hp.layers = vec![7, 9];
        let line = trial_line(&TrialRecord { index: 3, hp, pck: 0.25 });
        assert!(line.starts_with("3, 7;9, "), "{line}");
        assert!(line.ends_with("0.2500"), "{line}");
        assert_eq!(line.split(", ").count(), 8);
    }
}
