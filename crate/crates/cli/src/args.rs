//! Argument definitions for the `diffmatch` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "diffmatch",
    about = "Semantic correspondence by optimizing prompt embeddings against a frozen denoiser",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize embedding ensembles for queries on one image, filling the cache.
    Optimize(OptimizeArgs),
    /// Match query points from a source image into one or more targets.
    Match(MatchArgs),
    /// Score a dataset split with PCK and write report files.
    Evaluate(EvaluateArgs),
    /// Random hyperparameter search over a correspondence subset.
    Sweep(SweepArgs),
    /// Render attention heatmaps, per-layer panels, or correspondence lines.
    #[command(subcommand)]
    Visualize(VisualizeCommand),
    /// Print the pair manifest of a dataset split.
    Manifest(ManifestArgs),
}

/// Flags every subcommand accepts.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Backend override: `toy` or `checkpoint`.
    #[arg(long)]
    pub backend: Option<String>,
    /// Base seed override; fixes every stochastic choice end to end.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Embedding cache directory. Defaults to `diffmatch-cache`, or the
    /// `DIFFMATCH_CACHE` environment variable when set; this flag beats both.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Hyperparameter preset bundling a benchmark's ensemble and crop
    /// counts: `spair` (R = 5, 20 crops), `pfwillow` or `cub` (R = 10,
    /// 30 crops). Applied after the config file, before flag overrides.
    #[arg(long)]
    pub preset: Option<String>,
    /// Worker threads for per-pair parallelism.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Image to optimize embeddings on.
    #[arg(long)]
    pub image: PathBuf,
    /// Query point as `x,y` in normalized [0,1] coordinates; repeatable.
    #[arg(long = "query")]
    pub queries: Vec<String>,
    /// File of query points, one `x, y` line each (`#` comments allowed).
    #[arg(long)]
    pub keypoint_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Source image the queries live on.
    #[arg(long)]
    pub source: PathBuf,
    /// Target image to localize into; repeatable, all targets share the
    /// source's cached ensembles.
    #[arg(long = "target", required = true)]
    pub targets: Vec<PathBuf>,
    /// Query point as `x,y` in normalized [0,1] coordinates; repeatable.
    #[arg(long = "query")]
    pub queries: Vec<String>,
    /// File of query points, one `x, y` line each.
    #[arg(long)]
    pub keypoint_file: Option<PathBuf>,
    /// Result file to write, one line per (target, query).
    #[arg(long, default_value = "matches.txt")]
    pub out: PathBuf,
    /// Also write a heatmap overlay PNG next to the result file for every
    /// match.
    #[arg(long)]
    pub overlay: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Benchmark to score: `spair`, `pfwillow`, `cub`, or `synthetic`.
    #[arg(long)]
    pub dataset: String,
    /// Dataset split.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Evaluate only this many correspondences: a seeded draw with
    /// `--subset-seed`, otherwise the first N in dataset order.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Seed for the `--limit` subset draw.
    #[arg(long)]
    pub subset_seed: Option<u64>,
    /// Comma-separated PCK thresholds.
    #[arg(long, default_value = "0.05,0.1")]
    pub alphas: String,
    /// Directory receiving report.txt, report.csv, and matches.txt.
    #[arg(long, default_value = "eval-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Benchmark providing the validation pairs.
    #[arg(long, default_value = "synthetic")]
    pub dataset: String,
    /// Dataset split to search on.
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Number of sampled configurations.
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    /// Correspondences in the fixed scoring subset.
    #[arg(long, default_value_t = 50)]
    pub n_corr: usize,
    /// Range overrides for the search space (`key = lo,hi` lines).
    #[arg(long)]
    pub space_file: Option<PathBuf>,
    /// Directory receiving trials.txt and best-config.txt.
    #[arg(long, default_value = "sweep-out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum VisualizeCommand {
    /// Ensemble attention heatmap blended over the target image.
    Heatmap(HeatmapArgs),
    /// One panel per configured layer plus their average, on the full
    /// target frame.
    Panels(PanelsArgs),
    /// Side-by-side correspondence lines colored by PCK correctness.
    Lines(LinesArgs),
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Source image the query lives on.
    #[arg(long)]
    pub source: PathBuf,
    /// Query point as `x,y` in normalized [0,1] coordinates.
    #[arg(long)]
    pub query: String,
    /// Target image to read attention on.
    #[arg(long)]
    pub target: PathBuf,
    /// Output PNG.
    #[arg(long, default_value = "heatmap.png")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PanelsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Source image the query lives on.
    #[arg(long)]
    pub source: PathBuf,
    /// Query point as `x,y` in normalized [0,1] coordinates.
    #[arg(long)]
    pub query: String,
    /// Target image to read attention on.
    #[arg(long)]
    pub target: PathBuf,
    /// Output PNG holding the horizontal panel strip.
    #[arg(long, default_value = "panels.png")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LinesArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Source image (left side of the figure).
    #[arg(long)]
    pub source: PathBuf,
    /// Target image (right side of the figure).
    #[arg(long)]
    pub target: PathBuf,
    /// Match result file, as written by `diffmatch match`.
    #[arg(long)]
    pub matches: PathBuf,
    /// Ground-truth target points, one `x, y` line per match.
    #[arg(long)]
    pub truth: PathBuf,
    /// PCK threshold (fraction of the larger target side) separating
    /// correct matches from wrong ones.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Output PNG.
    #[arg(long, default_value = "lines.png")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ManifestArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Benchmark to list.
    #[arg(long)]
    pub dataset: String,
    /// Dataset split.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Write the manifest here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
