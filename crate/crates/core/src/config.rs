//! Run configuration: a flat `key = value` text format covering
//! hyperparameters, backend selection, and dataset roots.
//!
//! Unspecified keys fall back to the defaults in [`HyperParams`]. Parsing
//! is strict: unknown keys and out-of-range values are errors that name
//! the offending key.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::types::HyperParams;
use crate::util::sha256_hex;
use crate::{Error, Result};

/// Which denoiser implementation to drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    /// Closed-form analytic backend used by the test suite.
    Toy,
    /// Real latent-diffusion checkpoint adapter.
    Checkpoint,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Toy => "toy",
            BackendKind::Checkpoint => "checkpoint",
        })
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "toy" => Ok(BackendKind::Toy),
            "checkpoint" => Ok(BackendKind::Checkpoint),
            other => Err(format!("unknown backend '{other}' (expected toy|checkpoint)")),
        }
    }
}

/// A fully validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub hp: HyperParams,
    pub backend: BackendKind,
    /// Pretrained weights location; required when `backend = checkpoint`.
    pub checkpoint_path: Option<PathBuf>,
    pub seed: u64,
    /// `dataset.<name>.root` entries, keyed by dataset name.
    pub dataset_roots: BTreeMap<String, PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hp: HyperParams::default(),
            backend: BackendKind::Toy,
            checkpoint_path: None,
            seed: 0,
            dataset_roots: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    /// Canonical serialization: fixed key order, one `key = value` per
    /// line. `parse_config(serialize(c)) == c` for every valid config.
    pub fn to_config_text(&self) -> String {
        let hp = &self.hp;
        let mut out = String::new();
        out.push_str("# diffmatch run configuration\n");
        out.push_str(&format!("backend = {}\n", self.backend));
        if let Some(p) = &self.checkpoint_path {
            out.push_str(&format!("checkpoint_path = {}\n", p.display()));
        }
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("layers = {}\n", join_layers(&hp.layers)));
        out.push_str(&format!("learning_rate = {}\n", hp.learning_rate));
        out.push_str(&format!("sigma = {}\n", hp.sigma));
        out.push_str(&format!("timestep = {}\n", hp.timestep));
        out.push_str(&format!("total_steps = {}\n", hp.total_steps));
        out.push_str(&format!("opt_steps = {}\n", hp.opt_steps));
        out.push_str(&format!("crop_fraction = {}\n", hp.crop_fraction));
        out.push_str(&format!("n_embeddings = {}\n", hp.n_embeddings));
        out.push_str(&format!("n_inference_crops = {}\n", hp.n_inference_crops));
        out.push_str(&format!(
            "loss_resolution = {}x{}\n",
            hp.loss_resolution.0, hp.loss_resolution.1
        ));
        for (name, root) in &self.dataset_roots {
            out.push_str(&format!("dataset.{name}.root = {}\n", root.display()));
        }
        out
    }

    /// Digest over every setting that influences embedding optimization.
    /// Embedding caches are keyed by this, so any change to the optimizer
    /// inputs lands in a fresh cache directory. Inference-only knobs
    /// (`n_inference_crops`) are deliberately excluded.
    pub fn embedding_digest(&self) -> String {
        let hp = &self.hp;
        let ckpt = self
            .checkpoint_path
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let text = format!(
            "backend={}\nckpt={}\nseed={}\nlayers={}\nlr={}\nsigma={}\nt={}/{}\nsteps={}\ncrop={}\nR={}\nres={}x{}\n",
            self.backend,
            ckpt,
            self.seed,
            join_layers(&hp.layers),
            hp.learning_rate,
            hp.sigma,
            hp.timestep,
            hp.total_steps,
            hp.opt_steps,
            hp.crop_fraction,
            hp.n_embeddings,
            hp.loss_resolution.0,
            hp.loss_resolution.1,
        );
        sha256_hex(text.as_bytes())[..16].to_string()
    }

    pub fn dataset_root(&self, name: &str) -> Result<&Path> {
        self.dataset_roots
            .get(name)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::Config(format!("no dataset.{name}.root configured")))
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.backend == BackendKind::Checkpoint && self.checkpoint_path.is_none() {
            return Err(Error::config_key(
                "checkpoint_path",
                "required when backend = checkpoint",
            ));
        }
        Ok(())
    }
}

/// Read and parse a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Parse configuration text. Empty input yields the default config.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        apply_key(&mut cfg, key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "backend" => {
            cfg.backend = value.parse().map_err(|m: String| Error::config_key(key, m))?;
        }
        "checkpoint_path" => cfg.checkpoint_path = Some(PathBuf::from(value)),
        "seed" => cfg.seed = parse_int(key, value)?,
        "layers" => cfg.hp.layers = parse_layers(key, value)?,
        "learning_rate" => cfg.hp.learning_rate = parse_float(key, value)?,
        "sigma" => cfg.hp.sigma = parse_float(key, value)?,
        "timestep" => cfg.hp.timestep = parse_int(key, value)?,
        "total_steps" => cfg.hp.total_steps = parse_int(key, value)?,
        "opt_steps" => cfg.hp.opt_steps = parse_int(key, value)?,
        "crop_fraction" => cfg.hp.crop_fraction = parse_float(key, value)?,
        "n_embeddings" => cfg.hp.n_embeddings = parse_int(key, value)?,
        "n_inference_crops" => cfg.hp.n_inference_crops = parse_int(key, value)?,
        "loss_resolution" => cfg.hp.loss_resolution = parse_resolution(key, value)?,
        _ => {
            if let Some(name) = key
                .strip_prefix("dataset.")
                .and_then(|rest| rest.strip_suffix(".root"))
            {
                if name.is_empty() || name.contains('.') {
                    return Err(Error::config_key(key, "malformed dataset name"));
                }
                cfg.dataset_roots.insert(name.to_string(), PathBuf::from(value));
            } else {
                return Err(Error::config_key(key, "unknown key"));
            }
        }
    }
    Ok(())
}

fn parse_float(key: &str, value: &str) -> Result<f64> {
    let v: f64 = value
        .parse()
        .map_err(|_| Error::config_key(key, format!("'{value}' is not a number")))?;
    if !v.is_finite() {
        return Err(Error::config_key(key, "value must be finite"));
    }
    Ok(v)
}

fn parse_int<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config_key(key, format!("'{value}' is not a valid integer")))
}

fn parse_layers(key: &str, value: &str) -> Result<Vec<usize>> {
    let mut layers = Vec::new();
    for tok in value.split(',') {
        let tok = tok.trim();
        if tok.is_empty() {
            continue;
        }
        let l: usize = tok
            .parse()
            .map_err(|_| Error::config_key(key, format!("'{tok}' is not a layer index")))?;
        if layers.contains(&l) {
            return Err(Error::config_key(key, format!("duplicate layer index {l}")));
        }
        layers.push(l);
    }
    if layers.is_empty() {
        return Err(Error::config_key(key, "must name at least one layer"));
    }
    Ok(layers)
}

fn parse_resolution(key: &str, value: &str) -> Result<(usize, usize)> {
    let (h, w) = value
        .split_once('x')
        .ok_or_else(|| Error::config_key(key, format!("'{value}' is not of the form HxW")))?;
    let h: usize = parse_int(key, h.trim())?;
    let w: usize = parse_int(key, w.trim())?;
    Ok((h, w))
}

fn join_layers(layers: &[usize]) -> String {
    layers
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(",")
}
