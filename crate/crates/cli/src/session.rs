//! Shared run setup: config resolution, the embedding cache, and backend
//! construction.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use diffmatch::backend::toy::make_toy_backend;
use diffmatch::backend::Backend;
use diffmatch::config::{load_config, BackendKind, RunConfig};
use diffmatch::data::{DatasetKind, ImageHandle, Split};
use diffmatch::optim::EmbeddingCache;
use diffmatch::types::{ImageRecord, Point};

use crate::args::CommonArgs;

/// Backends move into worker threads (one instance each), so the boxed
/// object carries `Send` on top of the trait.
pub type DynBackend = Box<dyn Backend + Send>;

/// Toy backend shape: latent grid, prompt length, and embedding width.
/// The 10x10 grid at D = 512 matches the scale the recovery suites run at.
pub const TOY_GRID: (usize, usize) = (10, 10);
pub const TOY_TOKENS: usize = 8;
pub const TOY_EMBED_DIM: usize = 512;

/// The toy backend's random weights are its identity, the way checkpoint
/// weights are, so they come from a fixed seed rather than the run seed.
/// Otherwise two runs with different `--seed` would cache embeddings for
/// different models under the same digest.
pub const TOY_WEIGHT_SEED: u64 = 0x0d1f_f0a2;

/// Resolved run state shared by the commands: the effective configuration
/// and the cache it addresses. Backends are built per use (and per worker)
/// via [`Session::backend`].
pub struct Session {
    pub config: RunConfig,
    pub cache: EmbeddingCache,
    pub cache_dir: PathBuf,
}

impl Session {
    pub fn new(common: &CommonArgs) -> anyhow::Result<Session> {
        let config = resolve_config(common)?;
        let cache_dir = resolve_cache_dir(common);
        let cache = EmbeddingCache::new(&cache_dir, config.embedding_digest());
        Ok(Session { config, cache_dir, cache })
    }

    /// A fresh backend for this configuration. Backend instances need not
    /// be thread-safe, so parallel commands call this once per worker.
    pub fn backend(&self) -> anyhow::Result<DynBackend> {
        build_backend(&self.config)
    }
}

/// Defaults, then the config file, then the preset, then individual flag
/// overrides; validated at the end so every command starts from a coherent
/// configuration.
pub fn resolve_config(common: &CommonArgs) -> anyhow::Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(name) = &common.preset {
        apply_preset(&mut config, name)?;
    }
    if let Some(kind) = &common.backend {
        config.backend = kind.parse::<BackendKind>().map_err(anyhow::Error::msg)?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

/// The per-benchmark ensemble and crop counts; everything else stays as
/// configured.
pub fn apply_preset(config: &mut RunConfig, name: &str) -> anyhow::Result<()> {
    match name {
        "spair" => {
            config.hp.n_embeddings = 5;
            config.hp.n_inference_crops = 20;
        }
        "pfwillow" | "cub" => {
            config.hp.n_embeddings = 10;
            config.hp.n_inference_crops = 30;
        }
        _ => bail!("unknown preset `{name}` (expected `spair`, `pfwillow`, or `cub`)"),
    }
    Ok(())
}

/// Flag, then `DIFFMATCH_CACHE`, then `diffmatch-cache` in the working
/// directory.
pub fn resolve_cache_dir(common: &CommonArgs) -> PathBuf {
    if let Some(dir) = &common.cache_dir {
        return dir.clone();
    }
    match std::env::var_os("DIFFMATCH_CACHE") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from("diffmatch-cache"),
    }
}

pub fn build_backend(config: &RunConfig) -> anyhow::Result<DynBackend> {
    match config.backend {
        BackendKind::Toy => {
            let (backend, _) = make_toy_backend(
                TOY_GRID,
                TOY_TOKENS,
                TOY_EMBED_DIM,
                Point { x: 0.5, y: 0.5 },
                TOY_WEIGHT_SEED,
            )?;
            Ok(Box::new(backend))
        }
        BackendKind::Checkpoint => build_checkpoint(config),
    }
}

#[cfg(feature = "checkpoint")]
fn build_checkpoint(config: &RunConfig) -> anyhow::Result<DynBackend> {
    let path = config
        .checkpoint_path
        .as_ref()
        .ok_or_else(|| anyhow!("checkpoint backend needs checkpoint_path in the config"))?;
    let backend = diffmatch::backend::checkpoint::CheckpointBackend::load(path)?;
    Ok(Box::new(backend))
}

#[cfg(not(feature = "checkpoint"))]
fn build_checkpoint(_config: &RunConfig) -> anyhow::Result<DynBackend> {
    bail!("this build does not include the checkpoint backend; rebuild with `--features checkpoint`")
}

/// `x,y` in normalized coordinates.
pub fn parse_point(text: &str) -> anyhow::Result<Point> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        bail!("expected a point as `x,y`, got `{text}`");
    }
    let x: f64 = parts[0].parse().with_context(|| format!("bad x coordinate `{}`", parts[0]))?;
    let y: f64 = parts[1].parse().with_context(|| format!("bad y coordinate `{}`", parts[1]))?;
    Ok(Point::new(x, y)?)
}

/// Points from a file, one `x, y` per line; empty lines and `#` comments
/// are skipped.
pub fn read_point_file(path: &Path) -> anyhow::Result<Vec<Point>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let point = parse_point(line)
            .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        points.push(point);
    }
    Ok(points)
}

/// Queries from `--query` flags followed by the keypoint file, in that
/// order. At least one must come from somewhere.
pub fn collect_queries(
    flags: &[String],
    keypoint_file: Option<&Path>,
) -> anyhow::Result<Vec<Point>> {
    let mut queries = Vec::with_capacity(flags.len());
    for text in flags {
        queries.push(parse_point(text)?);
    }
    if let Some(path) = keypoint_file {
        queries.extend(read_point_file(path)?);
    }
    if queries.is_empty() {
        bail!("no queries given (use --query or --keypoint-file)");
    }
    Ok(queries)
}

/// Decode an image file into a record whose id is the file name.
pub fn load_image(path: &Path) -> anyhow::Result<ImageRecord> {
    let id = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| anyhow!("image path `{}` has no usable file name", path.display()))?;
    let (w, h) = image::image_dimensions(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let record =
        ImageHandle::from_file(id, path.to_path_buf(), (h as usize, w as usize)).load()?;
    Ok(record)
}

/// Benchmark name to [`DatasetKind`], with the name echoed on failure.
pub fn parse_dataset(text: &str) -> anyhow::Result<DatasetKind> {
    text.parse::<DatasetKind>().map_err(anyhow::Error::msg)
}

/// Split name to [`Split`].
pub fn parse_split(text: &str) -> anyhow::Result<Split> {
    text.parse::<Split>().map_err(anyhow::Error::msg)
}

/// Comma-separated threshold list.
pub fn parse_alphas(text: &str) -> anyhow::Result<Vec<f64>> {
    let mut alphas = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        alphas.push(part.parse::<f64>().with_context(|| format!("bad alpha `{part}`"))?);
    }
    if alphas.is_empty() {
        bail!("no PCK thresholds in `{text}`");
    }
    Ok(alphas)
}

/// Where a benchmark's files live. The synthetic set is generated, so any
/// path works and nothing has to be configured for it.
pub fn dataset_root_for(config: &RunConfig, kind: DatasetKind) -> anyhow::Result<PathBuf> {
    if kind == DatasetKind::Synthetic {
        return Ok(PathBuf::from("."));
    }
    Ok(config.dataset_root(kind.as_str())?.to_path_buf())
}
