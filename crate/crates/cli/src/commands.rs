//! The subcommand implementations. Each `cmd_*` wrapper builds a
//! [`Session`] from the common flags and hands off to a `run_*` function
//! that takes its collaborators as arguments, so tests can substitute an
//! instrumented backend or a prepared configuration.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use image::RgbImage;
use ndarray::Array2;

use diffmatch::attnmap::{aggregate, MapFrame};
use diffmatch::backend::AttentionStack;
use diffmatch::backend::Backend;
use diffmatch::data::{load_dataset, CorrespondencePair};
use diffmatch::eval::{
    pck, pick_subset, random_search, report_csv, report_text, trial_line, DatasetReport,
    SearchSpace,
};
use diffmatch::infer::{
    match_keypoints, match_line, query_ensemble_seed, write_match_results, MatchResult,
};
use diffmatch::optim::{crop_image, optimize_ensemble, EmbeddingCache};
use diffmatch::types::{CropParams, HyperParams, ImageRecord, Point};
use diffmatch::util::{derive_seed, run_indexed, write_atomic};

use crate::args::{
    EvaluateArgs, HeatmapArgs, LinesArgs, ManifestArgs, MatchArgs, OptimizeArgs, PanelsArgs,
    SweepArgs,
};
use crate::render;
use crate::session::{
    collect_queries, dataset_root_for, load_image, parse_alphas, parse_dataset, parse_point,
    parse_split, DynBackend, Session,
};

pub fn cmd_optimize(args: &OptimizeArgs) -> anyhow::Result<()> {
    let session = Session::new(&args.common)?;
    let backend = session.backend()?;
    run_optimize(args, &session, backend.as_ref())
}

pub fn run_optimize(
    args: &OptimizeArgs,
    session: &Session,
    backend: &dyn Backend,
) -> anyhow::Result<()> {
    let image = load_image(&args.image)?;
    let queries = collect_queries(&args.queries, args.keypoint_file.as_deref())?;
    let config = &session.config;
    println!(
        "cache: {}",
        session.cache_dir.join(config.embedding_digest()).display()
    );
    for (i, &query) in queries.iter().enumerate() {
        // Same per-query seeds as a matching run over this list, so the
        // entries written here are the ones `diffmatch match` will find.
        let seed = query_ensemble_seed(config.seed, i);
        if session.cache.load(&image.id, query)?.is_some() {
            println!("query ({:.6}, {:.6}): cache hit", query.x, query.y);
            continue;
        }
        let ensemble =
            session.cache.load_or_optimize(backend, &image, query, &config.hp, seed)?;
        let losses: Vec<String> = ensemble
            .members
            .iter()
            .map(|m| match &m.loss_trace {
                Some(trace) => format!("{:.6}", trace.last().copied().unwrap_or(f64::NAN)),
                None => "-".into(),
            })
            .collect();
        println!(
            "query ({:.6}, {:.6}): optimized {} rounds; final losses: {}",
            query.x,
            query.y,
            ensemble.len(),
            losses.join(" ")
        );
    }
    Ok(())
}

pub fn cmd_match(args: &MatchArgs) -> anyhow::Result<()> {
    let session = Session::new(&args.common)?;
    let backend = session.backend()?;
    run_match(args, &session, backend.as_ref())
}

pub fn run_match(
    args: &MatchArgs,
    session: &Session,
    backend: &dyn Backend,
) -> anyhow::Result<()> {
    if args.targets.is_empty() {
        bail!("at least one --target is required");
    }
    let source = load_image(&args.source)?;
    let queries = collect_queries(&args.queries, args.keypoint_file.as_deref())?;
    let config = &session.config;

    let mut all = Vec::new();
    for target_path in &args.targets {
        let target = load_image(target_path)?;
        // The same run seed for every target keys each query to one cache
        // entry, so later targets reuse the first target's ensembles.
        let results = match_keypoints(
            backend,
            &source,
            &queries,
            &target,
            &config.hp,
            config.seed,
            Some(&session.cache),
        )?;
        if args.overlay {
            for (qi, result) in results.iter().enumerate() {
                let path = overlay_path(&args.out, &target.id, qi);
                save_overlay(&target, result, &path)?;
            }
        }
        all.extend(results);
    }

    write_match_results(&args.out, &all)?;
    for result in &all {
        println!("{}", match_line(result));
    }
    println!("wrote {} matches to {}", all.len(), args.out.display());
    Ok(())
}

/// Overlay file next to the result file: `<stem>-<target>-q<i>.png`, with
/// path-hostile id characters flattened.
fn overlay_path(out: &Path, target_id: &str, query_index: usize) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("matches");
    let safe: String = target_id
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '-' })
        .collect();
    out.with_file_name(format!("{stem}-{safe}-q{query_index}.png"))
}

fn save_overlay(target: &ImageRecord, result: &MatchResult, path: &Path) -> anyhow::Result<()> {
    let mut img = render::blend_heatmap(target, &result.heatmap.values);
    let (h, w) = (target.pixels.shape()[0], target.pixels.shape()[1]);
    let (px, py) = result.predicted.to_pixel(h, w);
    render::draw_marker(
        &mut img,
        (px.round() as i64, py.round() as i64),
        2,
        image::Rgb([255, 255, 255]),
    );
    render::save_png(&img, path)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let session = Session::new(&args.common)?;
    run_evaluate(args, &session)
}

pub fn run_evaluate(args: &EvaluateArgs, session: &Session) -> anyhow::Result<()> {
    let kind = parse_dataset(&args.dataset)?;
    let split = parse_split(&args.split)?;
    let alphas = parse_alphas(&args.alphas)?;
    let config = &session.config;

    let root = dataset_root_for(config, kind)?;
    let pairs = load_dataset(kind, &root, split)?;
    let selected = apply_limit(pairs, args.limit, args.subset_seed);
    if selected.is_empty() {
        bail!("no correspondences selected from {} {}", kind.as_str(), split.as_str());
    }

    let workers = args.common.workers.max(1).min(selected.len());
    let mut pool: VecDeque<DynBackend> =
        (0..workers).map(|_| session.backend()).collect::<anyhow::Result<_>>()?;

    let hp = &config.hp;
    let cache = &session.cache;
    let per_pair = run_indexed(
        selected.len(),
        workers,
        || pool.pop_front().expect("one backend was built per worker"),
        |backend, i| {
            let (orig_idx, pair) = &selected[i];
            let source = pair.source.load()?;
            let target = pair.target.load()?;
            let queries: Vec<Point> = pair.keypoints.iter().map(|kp| kp.source).collect();
            // Seeded by position in the full dataset, not the subset, so a
            // limited run scores its pairs exactly as the full run would.
            let pair_seed = derive_seed(config.seed, "evaluate-pair", *orig_idx as u64);
            for (qi, query) in queries.iter().enumerate() {
                ensure_fresh(
                    cache,
                    backend.as_ref(),
                    &source,
                    *query,
                    hp,
                    query_ensemble_seed(pair_seed, qi),
                )?;
            }
            match_keypoints(
                backend.as_ref(),
                &source,
                &queries,
                &target,
                hp,
                pair_seed,
                Some(cache),
            )
        },
    )?;

    let predictions: Vec<MatchResult> = per_pair.into_iter().flatten().collect();
    let eval_pairs: Vec<CorrespondencePair> =
        selected.into_iter().map(|(_, pair)| pair).collect();
    let report = pck(&predictions, &eval_pairs, &alphas, kind.pck_reference())?;
    let reports = [DatasetReport { dataset: kind, report }];

    let text = report_text(&reports);
    write_atomic(&args.out.join("report.csv"), report_csv(&reports).as_bytes())?;
    write_atomic(&args.out.join("report.txt"), text.as_bytes())?;
    write_match_results(&args.out.join("matches.txt"), &predictions)?;

    print!("{text}");
    println!("wrote report.csv, report.txt, matches.txt to {}", args.out.display());
    Ok(())
}

/// Reduce a dataset to a correspondence budget. `None` keeps everything;
/// with a subset seed the slots are the same seeded draw the sweep
/// protocol uses, otherwise the first `limit` in dataset order. Pairs keep
/// their original index (for seeding) and lose unselected keypoints;
/// pairs with no selected keypoint drop out.
fn apply_limit(
    pairs: Vec<CorrespondencePair>,
    limit: Option<usize>,
    subset_seed: Option<u64>,
) -> Vec<(usize, CorrespondencePair)> {
    let Some(limit) = limit else {
        return pairs.into_iter().enumerate().collect();
    };
    let slots: Vec<(usize, usize)> = match subset_seed {
        Some(seed) => pick_subset(&pairs, limit, seed),
        None => pairs
            .iter()
            .enumerate()
            .flat_map(|(p, pair)| (0..pair.keypoints.len()).map(move |k| (p, k)))
            .take(limit)
            .collect(),
    };
    let mut out: Vec<(usize, CorrespondencePair)> = Vec::new();
    for (p, k) in slots {
        match out.last_mut() {
            Some((last, trimmed)) if *last == p => trimmed.keypoints.push(pairs[p].keypoints[k].clone()),
            _ => out.push((p, CorrespondencePair {
                keypoints: vec![pairs[p].keypoints[k].clone()],
                ..pairs[p].clone()
            })),
        }
    }
    out
}

/// Make sure the cache holds an ensemble with exactly this provenance,
/// recomputing entries written under another seed (say, by an `optimize`
/// run with a different query order). Evaluation results therefore never
/// depend on what the cache happened to contain.
fn ensure_fresh(
    cache: &EmbeddingCache,
    backend: &dyn Backend,
    image: &ImageRecord,
    query: Point,
    hp: &HyperParams,
    seed: u64,
) -> diffmatch::Result<()> {
    if let Some(hit) = cache.load(&image.id, query)? {
        if hit.len() == hp.n_embeddings && hit.base_seed() == seed {
            return Ok(());
        }
    }
    let fresh = optimize_ensemble(backend, image, query, hp, seed)?;
    cache.store(&fresh)?;
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let session = Session::new(&args.common)?;
    let backend = session.backend()?;
    run_sweep(args, &session, backend.as_ref())
}

pub fn run_sweep(
    args: &SweepArgs,
    session: &Session,
    backend: &dyn Backend,
) -> anyhow::Result<()> {
    let kind = parse_dataset(&args.dataset)?;
    let split = parse_split(&args.split)?;
    let config = &session.config;
    let root = dataset_root_for(config, kind)?;
    let pairs = load_dataset(kind, &root, split)?;

    let mut space = SearchSpace { base: config.hp.clone(), ..SearchSpace::default() };
    if let Some(path) = &args.space_file {
        apply_space_file(&mut space, path)?;
    }

    let outcome = random_search(
        backend,
        &pairs,
        kind.pck_reference(),
        &space,
        args.trials,
        args.n_corr,
        config.seed,
    )?;

    let mut log = String::from(
        "# index, layers, learning_rate, sigma, timestep, opt_steps, crop_fraction, pck\n",
    );
    for trial in &outcome.trials {
        log.push_str(&trial_line(trial));
        log.push('\n');
    }
    write_atomic(&args.out.join("trials.txt"), log.as_bytes())?;

    let mut best_config = config.clone();
    best_config.hp = outcome.best.hp.clone();
    write_atomic(&args.out.join("best-config.txt"), best_config.to_config_text().as_bytes())?;

    println!(
        "{} trials on {} correspondences; best trial {}: pck@0.1 = {:.4}",
        outcome.trials.len(),
        args.n_corr,
        outcome.best.index,
        outcome.best.pck
    );
    println!("wrote trials.txt, best-config.txt to {}", args.out.display());
    Ok(())
}

/// `key = value` overrides for the search space. Ranges are `lo,hi`; the
/// layer pool is a comma-separated index list.
fn apply_space_file(space: &mut SearchSpace, path: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = || format!("{}:{}", path.display(), lineno + 1);
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("{}: expected `key = value`, got `{line}`", at()))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "layer_pool" => {
                space.layer_pool = value
                    .split(',')
                    .map(|v| v.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .with_context(at)?;
            }
            "learning_rate" => space.learning_rate = parse_range(value).with_context(at)?,
            "sigma" => space.sigma = parse_range(value).with_context(at)?,
            "timestep" => space.timestep = parse_range(value).with_context(at)?,
            "opt_steps" => space.opt_steps = parse_range(value).with_context(at)?,
            "crop_fraction" => space.crop_fraction = parse_range(value).with_context(at)?,
            _ => bail!(
                "{}: unknown search-space key `{key}` (expected layer_pool, learning_rate, \
                 sigma, timestep, opt_steps, or crop_fraction)",
                at()
            ),
        }
    }
    Ok(())
}

fn parse_range<T: std::str::FromStr + Copy>(value: &str) -> anyhow::Result<(T, T)>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        bail!("expected `lo,hi`, got `{value}`");
    }
    Ok((parts[0].parse::<T>()?, parts[1].parse::<T>()?))
}

pub fn cmd_visualize_heatmap(args: &HeatmapArgs) -> anyhow::Result<()> {
    let session = Session::new(&args.common)?;
    let backend = session.backend()?;
    run_visualize_heatmap(args, &session, backend.as_ref())
}

pub fn run_visualize_heatmap(
    args: &HeatmapArgs,
    session: &Session,
    backend: &dyn Backend,
) -> anyhow::Result<()> {
    let source = load_image(&args.source)?;
    let target = load_image(&args.target)?;
    let query = parse_point(&args.query)?;
    let config = &session.config;
    let results = match_keypoints(
        backend,
        &source,
        &[query],
        &target,
        &config.hp,
        config.seed,
        Some(&session.cache),
    )?;
    save_overlay(&target, &results[0], &args.out)?;
    println!("{}", match_line(&results[0]));
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn cmd_visualize_panels(args: &PanelsArgs) -> anyhow::Result<()> {
    let session = Session::new(&args.common)?;
    let backend = session.backend()?;
    run_visualize_panels(args, &session, backend.as_ref())
}

/// One full-frame attention panel per configured layer, then their
/// average, every panel meaned over the ensemble. Mirrors the inference
/// path with the identity crop only, so the panels show what localization
/// actually aggregates.
pub fn run_visualize_panels(
    args: &PanelsArgs,
    session: &Session,
    backend: &dyn Backend,
) -> anyhow::Result<()> {
    let source = load_image(&args.source)?;
    let target = load_image(&args.target)?;
    let query = parse_point(&args.query)?;
    let config = &session.config;
    let hp = &config.hp;

    let ensemble = session.cache.load_or_optimize(
        backend,
        &source,
        query,
        hp,
        query_ensemble_seed(config.seed, 0),
    )?;

    let input_size = backend.descriptor().input_size;
    let cropped = crop_image(&target, CropParams::identity(), input_size);
    let z = backend.prepare_latent(
        &cropped,
        hp.timestep,
        derive_seed(config.seed, "inference-noise", 0),
    )?;

    let n_layers = hp.layers.len();
    let mut sums: Vec<Array2<f64>> = vec![Array2::zeros(hp.loss_resolution); n_layers + 1];
    for member in &ensemble.members {
        let stack = backend.attention_forward(&z, member, &hp.layers)?;
        for (j, layer) in stack.layers.iter().enumerate() {
            let single = AttentionStack { layers: vec![layer.clone()] };
            let map = aggregate(
                &single,
                member.token_index,
                hp.loss_resolution,
                MapFrame::full(target.id.clone()),
            )?;
            sums[j] += &map.values;
        }
        let mean = aggregate(
            &stack,
            member.token_index,
            hp.loss_resolution,
            MapFrame::full(target.id.clone()),
        )?;
        sums[n_layers] += &mean.values;
    }

    let panels: Vec<RgbImage> = sums
        .iter()
        .map(|sum| render::blend_heatmap(&target, &(sum / ensemble.len() as f64)))
        .collect();
    let strip = render::panel_strip(&panels);
    render::save_png(&strip, &args.out)?;
    println!(
        "wrote {} panels ({} layers + average) to {}",
        panels.len(),
        n_layers,
        args.out.display()
    );
    Ok(())
}

pub fn cmd_visualize_lines(args: &LinesArgs) -> anyhow::Result<()> {
    run_visualize_lines(args)
}

/// Source and target side by side, one line per match from the query to
/// the prediction, blue within `alpha` times the larger target side of the
/// ground truth and orange outside. Needs no backend: it renders files
/// that a match run already produced.
pub fn run_visualize_lines(args: &LinesArgs) -> anyhow::Result<()> {
    if !(args.alpha.is_finite() && args.alpha > 0.0) {
        bail!("--alpha must be positive, got {}", args.alpha);
    }
    let source = load_image(&args.source)?;
    let target = load_image(&args.target)?;
    let matches = read_match_file(&args.matches)?;
    let truths = crate::session::read_point_file(&args.truth)?;
    if matches.len() != truths.len() {
        bail!(
            "{} matches in {} but {} ground-truth points in {}",
            matches.len(),
            args.matches.display(),
            truths.len(),
            args.truth.display()
        );
    }
    if matches.is_empty() {
        bail!("{} holds no matches", args.matches.display());
    }

    let (sh, sw) = (source.pixels.shape()[0], source.pixels.shape()[1]);
    let (th, tw) = (target.pixels.shape()[0], target.pixels.shape()[1]);
    let threshold = args.alpha * th.max(tw) as f64;
    let offset = sw as i64 + render::GUTTER as i64;

    let mut canvas = render::side_by_side(&render::to_rgb(&source), &render::to_rgb(&target));
    let mut correct_count = 0;
    for (m, truth) in matches.iter().zip(&truths) {
        let correct = m.predicted.pixel_distance(truth, th, tw) <= threshold;
        correct_count += usize::from(correct);
        let color = if correct { render::CORRECT_COLOR } else { render::WRONG_COLOR };
        let (qx, qy) = m.query.to_pixel(sh, sw);
        let (px, py) = m.predicted.to_pixel(th, tw);
        let from = (qx.round() as i64, qy.round() as i64);
        let to = (px.round() as i64 + offset, py.round() as i64);
        render::draw_line(&mut canvas, from, to, color);
        render::draw_marker(&mut canvas, from, 2, color);
        render::draw_marker(&mut canvas, to, 2, color);
    }
    render::save_png(&canvas, &args.out)?;
    println!(
        "{} of {} matches within alpha = {}; wrote {}",
        correct_count,
        matches.len(),
        args.alpha,
        args.out.display()
    );
    Ok(())
}

#[derive(Debug)]
struct ParsedMatch {
    query: Point,
    predicted: Point,
}

/// Read the `diffmatch match` output format back: ids, query, prediction,
/// peak, flags.
fn read_match_file(path: &Path) -> anyhow::Result<Vec<ParsedMatch>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = || format!("{}:{}", path.display(), lineno + 1);
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 8 {
            bail!("{}: expected 8 comma-separated fields, found {}", at(), fields.len());
        }
        let num = |i: usize| -> anyhow::Result<f64> {
            fields[i].parse().with_context(|| format!("{}: bad number `{}`", at(), fields[i]))
        };
        out.push(ParsedMatch {
            query: Point::new(num(2)?, num(3)?)?,
            predicted: Point::new(num(4)?, num(5)?)?,
        });
    }
    Ok(out)
}

pub fn cmd_manifest(args: &ManifestArgs) -> anyhow::Result<()> {
    let session = Session::new(&args.common)?;
    run_manifest(args, &session)
}

pub fn run_manifest(args: &ManifestArgs, session: &Session) -> anyhow::Result<()> {
    let kind = parse_dataset(&args.dataset)?;
    let split = parse_split(&args.split)?;
    let root = dataset_root_for(&session.config, kind)?;
    let pairs = load_dataset(kind, &root, split)?;
    let text = diffmatch::data::manifest_lines(&pairs);
    match &args.out {
        Some(path) => {
            write_atomic(path, text.as_bytes())?;
            println!("wrote {} pairs to {}", pairs.len(), path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}
