//! Prompt-embedding optimization: find `e` such that the aggregated
//! attention map on the source image reproduces a Gaussian bump at the
//! query point, under random crop augmentation. Includes multi-round
//! ensembles and the on-disk embedding cache.

use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attnmap::{aggregate, aggregate_pullback, gaussian_target_in_crop, MapFrame};
use crate::backend::Backend;
use crate::types::{CropParams, HyperParams, ImageRecord, Point, PromptEmbedding, Provenance};
use crate::util::{bilinear_sample, derive_seed, run_indexed, standard_normal, uniform, write_atomic};
use crate::{Error, Result};

/// Token whose attention map carries the query (0 and P-1 are special
/// termination tokens and never selected).
pub const TOKEN_INDEX: usize = 1;

/// Minimum distance of a supervised query from the crop borders, as a
/// fraction of the crop side.
const CONTAIN_MARGIN: f64 = 0.01;

/// Draw a crop window: side `scale`, offset uniform over the feasible
/// box. With `must_contain`, the offset is drawn uniformly from the
/// sub-box of offsets whose window keeps the point at least 1% of the
/// crop side away from every border (per axis the constraint is an
/// interval, so this is exactly the rejection-sampling distribution,
/// minus the rejections); an empty sub-box is an error.
pub fn sample_crop<R: rand::RngCore>(
    rng: &mut R,
    scale: f64,
    must_contain: Option<Point>,
) -> Result<CropParams> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::InvalidInput(format!("crop scale {scale} outside (0, 1]")));
    }
    let span = 1.0 - scale;
    let axis_range = |p: f64| -> Result<(f64, f64)> {
        let (mut lo, mut hi) = (0.0f64, span);
        if let Some(_) = must_contain {
            let m = CONTAIN_MARGIN * scale;
            lo = lo.max(p - scale + m);
            hi = hi.min(p - m);
            if lo > hi {
                return Err(Error::InvalidInput(format!(
                    "no crop of scale {scale} can contain {p} with a {CONTAIN_MARGIN} margin"
                )));
            }
        }
        Ok((lo, hi))
    };
    let (lx, hx) = axis_range(must_contain.map_or(0.5, |p| p.x))?;
    let (ly, hy) = axis_range(must_contain.map_or(0.5, |p| p.y))?;
    // Always burn two draws so the stream does not depend on the scale.
    let (ux, uy) = (uniform(rng), uniform(rng));
    let dx = lx + ux * (hx - lx);
    let dy = ly + uy * (hy - ly);
    CropParams::new(scale, (dx.min(span), dy.min(span)))
}

/// Extract the crop window and bilinearly resample it to
/// `out_size x out_size`. The coordinate maps between full-image and
/// crop-normalized frames are [`CropParams::to_crop`] / `to_full`. An
/// identity crop at matching size returns the image unchanged.
pub fn crop_image(image: &ImageRecord, crop: CropParams, out_size: usize) -> ImageRecord {
    if crop.is_identity() && image.height() == out_size && image.width() == out_size {
        return image.clone();
    }
    let (h, w) = (image.height(), image.width());
    let channels: Vec<Array2<f64>> = (0..3).map(|c| image.channel(c)).collect();
    let mut pixels = ndarray::Array3::zeros((out_size, out_size, 3));
    for r in 0..out_size {
        for c in 0..out_size {
            let in_crop = Point {
                x: (c as f64 + 0.5) / out_size as f64,
                y: (r as f64 + 0.5) / out_size as f64,
            };
            let full = crop.to_full(in_crop);
            let (px, py) = full.to_pixel(h, w);
            for ch in 0..3 {
                pixels[[r, c, ch]] = bilinear_sample(&channels[ch], py, px);
            }
        }
    }
    ImageRecord {
        id: image.id.clone(),
        pixels,
        original_size: image.original_size,
    }
}

/// Adam first-order optimizer over a matrix parameter.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Array2<f64>,
    v: Array2<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, shape: (usize, usize)) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            t: 0,
        }
    }

    pub fn step(&mut self, param: &mut Array2<f64>, grad: &Array2<f64>) {
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t);
        let b2c = 1.0 - self.beta2.powi(self.t);
        azip_update(self, param, grad, b1c, b2c);
    }
}

fn azip_update(opt: &mut Adam, param: &mut Array2<f64>, grad: &Array2<f64>, b1c: f64, b2c: f64) {
    let (b1, b2, lr, eps) = (opt.beta1, opt.beta2, opt.lr, opt.eps);
    ndarray::Zip::from(param)
        .and(&mut opt.m)
        .and(&mut opt.v)
        .and(grad)
        .for_each(|p, m, v, &g| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / b1c;
            let vhat = *v / b2c;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        });
}

/// One optimization round: unit-Gaussian init, `hp.opt_steps` Adam steps
/// on the squared distance between the aggregated attention map and the
/// Gaussian target, with one fresh query-containing crop per step
/// (stochastic estimate of the crop expectation). Diffusion noise is
/// drawn once per round and held fixed. Fails fast if the loss goes
/// non-finite or exceeds 10x its initial value.
pub fn optimize_embedding<B: Backend + ?Sized>(
    backend: &B,
    image: &ImageRecord,
    query: Point,
    hp: &HyperParams,
    seed: u64,
) -> Result<PromptEmbedding> {
    optimize_embedding_for_token(backend, image, query, hp, seed, TOKEN_INDEX)
}

/// Same loop with the supervised token row as a parameter. Only token 1 is
/// part of the public contract; the other interior rows exist so tests can
/// confirm the choice of token does not move the learned attention peak.
pub(crate) fn optimize_embedding_for_token<B: Backend + ?Sized>(
    backend: &B,
    image: &ImageRecord,
    query: Point,
    hp: &HyperParams,
    seed: u64,
    token_index: usize,
) -> Result<PromptEmbedding> {
    hp.validate()?;
    let desc = backend.descriptor();
    if !desc.supports_gradients {
        return Err(Error::GradientsUnavailable(desc.name.clone()));
    }
    for &l in &hp.layers {
        desc.geometry(l)?;
    }
    if hp.timestep > hp.total_steps {
        return Err(Error::config_key("timestep", "timestep out of range"));
    }

    let (p, d) = (desc.token_count, desc.embed_dim);
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "embedding-init", 0));
    let mut e = Array2::from_shape_fn((p, d), |_| standard_normal(&mut init_rng));
    let noise_seed = derive_seed(seed, "round-noise", 0);
    let mut crop_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "opt-crops", 0));

    let provenance = Provenance {
        source_image_id: image.id.clone(),
        query,
        seed,
        hp_digest: hp.digest(),
    };

    let mut adam = Adam::new(hp.learning_rate, (p, d));
    let mut trace = Vec::with_capacity(hp.opt_steps);
    let mut initial_loss = f64::INFINITY;

    for step in 0..hp.opt_steps {
        let crop = sample_crop(&mut crop_rng, hp.crop_fraction, Some(query))?;
        let cropped = crop_image(image, crop, desc.input_size);
        let z = backend.prepare_latent(&cropped, hp.timestep, noise_seed)?;
        let embedding = PromptEmbedding::new(e.clone(), token_index, provenance.clone())?;
        let (stack, vjp) = backend.attention_forward_vjp(&z, &embedding, &hp.layers)?;
        let map = aggregate(
            &stack,
            token_index,
            hp.loss_resolution,
            MapFrame::crop(image.id.clone(), crop),
        )?;
        let target = gaussian_target_in_crop(query, hp.sigma, crop, hp.loss_resolution)?;

        let residual = &map.values - &target.values;
        let loss = residual.iter().map(|r| r * r).sum::<f64>();
        if !loss.is_finite() {
            return Err(Error::Diverged { step, message: format!("loss became {loss}") });
        }
        if step == 0 {
            initial_loss = loss;
        } else if loss > 10.0 * initial_loss + 1e-12 {
            return Err(Error::Diverged {
                step,
                message: format!("loss {loss:.6} exceeded 10x the initial {initial_loss:.6}"),
            });
        }
        trace.push(loss);

        let map_cotangent = 2.0 * &residual;
        let stack_cotangent = aggregate_pullback(&stack, token_index, &map_cotangent)?;
        let grad = vjp(&stack_cotangent)?;
        adam.step(&mut e, &grad);
    }

    let mut out = PromptEmbedding::new(e, token_index, provenance)?;
    out.loss_trace = Some(trace);
    Ok(out)
}

/// R independently optimized embeddings for one (image, query).
#[derive(Debug, Clone)]
pub struct EmbeddingEnsemble {
    pub members: Vec<PromptEmbedding>,
}

impl EmbeddingEnsemble {
    pub fn new(members: Vec<PromptEmbedding>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidInput("ensemble needs at least one member".into()))?;
        let shape = first.matrix.dim();
        for (i, m) in members.iter().enumerate() {
            if m.matrix.dim() != shape || m.token_index != first.token_index {
                return Err(Error::InvalidInput(format!(
                    "ensemble member {i} disagrees on shape or token index"
                )));
            }
            if m.provenance.source_image_id != first.provenance.source_image_id
                || m.provenance.query != first.provenance.query
            {
                return Err(Error::InvalidInput(format!(
                    "ensemble member {i} has mismatched provenance"
                )));
            }
        }
        Ok(EmbeddingEnsemble { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Seed of the first round; member r used `base_seed() + r`.
    pub fn base_seed(&self) -> u64 {
        self.members[0].provenance.seed
    }
}

/// Run `hp.n_embeddings` rounds with seeds `base_seed .. base_seed + R`.
pub fn optimize_ensemble<B: Backend + ?Sized>(
    backend: &B,
    image: &ImageRecord,
    query: Point,
    hp: &HyperParams,
    base_seed: u64,
) -> Result<EmbeddingEnsemble> {
    let mut members = Vec::with_capacity(hp.n_embeddings);
    for r in 0..hp.n_embeddings {
        let member = optimize_embedding(backend, image, query, hp, base_seed + r as u64)
            .map_err(|e| Error::EnsembleMember { member: r, cause: Box::new(e) })?;
        members.push(member);
    }
    EmbeddingEnsemble::new(members)
}

/// Parallel ensemble: rounds are distributed over `workers` threads, one
/// backend instance per worker (instances need not be thread-safe).
/// Results are ordered by round index regardless of scheduling, so the
/// outcome is identical to the serial run.
pub fn optimize_ensemble_with<B, F>(
    factory: F,
    workers: usize,
    image: &ImageRecord,
    query: Point,
    hp: &HyperParams,
    base_seed: u64,
) -> Result<EmbeddingEnsemble>
where
    B: Backend + Send,
    F: FnMut() -> B,
{
    let members = run_indexed(hp.n_embeddings, workers, factory, |backend, r| {
        optimize_embedding(backend, image, query, hp, base_seed + r as u64)
            .map_err(|e| Error::EnsembleMember { member: r, cause: Box::new(e) })
    })?;
    EmbeddingEnsemble::new(members)
}

const PEMB_MAGIC: &[u8; 4] = b"PEMB";

/// Serialize an ensemble: 32-byte header (magic `PEMB`, u32 P, u32 D,
/// u32 token_index, u32 R, u64 base seed, u32 reserved), R contiguous
/// P x D row-major little-endian f32 matrices, then a UTF-8 provenance
/// trailer (config digest, image id, query coordinates).
pub fn write_ensemble(
    path: &Path,
    ensemble: &EmbeddingEnsemble,
    config_digest: &str,
) -> Result<()> {
    let first = &ensemble.members[0];
    let (p, d) = first.matrix.dim();
    let r = ensemble.len();
    let mut bytes = Vec::with_capacity(32 + r * p * d * 4 + 128);
    bytes.extend_from_slice(PEMB_MAGIC);
    bytes.extend_from_slice(&(p as u32).to_le_bytes());
    bytes.extend_from_slice(&(d as u32).to_le_bytes());
    bytes.extend_from_slice(&(first.token_index as u32).to_le_bytes());
    bytes.extend_from_slice(&(r as u32).to_le_bytes());
    bytes.extend_from_slice(&ensemble.base_seed().to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    debug_assert_eq!(bytes.len(), 32);
    for member in &ensemble.members {
        for v in member.matrix.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let q = first.provenance.query;
    let trailer = serde_json::json!({
        "digest": config_digest,
        "image_id": first.provenance.source_image_id,
        "qx": q.x,
        "qy": q.y,
    });
    bytes.extend_from_slice(trailer.to_string().as_bytes());
    write_atomic(path, &bytes)
}

/// Provenance recovered from an ensemble file's trailer.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleFileInfo {
    pub config_digest: String,
    pub image_id: String,
    pub query: Point,
}

/// Read an ensemble file written by [`write_ensemble`].
pub fn read_ensemble(path: &Path) -> Result<(EmbeddingEnsemble, EnsembleFileInfo)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 32 || &bytes[..4] != PEMB_MAGIC {
        return Err(Error::file(path, "not an embedding file (bad magic)"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let p = u32_at(4);
    let d = u32_at(8);
    let token_index = u32_at(12);
    let r = u32_at(16);
    let base_seed = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let float_bytes = r
        .checked_mul(p)
        .and_then(|n| n.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::file(path, "header dimensions overflow"))?;
    if bytes.len() < 32 + float_bytes {
        return Err(Error::file(
            path,
            format!("truncated: need {} matrix bytes, found {}", float_bytes, bytes.len() - 32),
        ));
    }
    let trailer: serde_json::Value = serde_json::from_slice(&bytes[32 + float_bytes..])
        .map_err(|e| Error::file(path, format!("bad provenance trailer: {e}")))?;
    let str_field = |k: &str| -> Result<String> {
        trailer[k]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| Error::file(path, format!("trailer missing `{k}`")))
    };
    let num_field = |k: &str| -> Result<f64> {
        trailer[k]
            .as_f64()
            .ok_or_else(|| Error::file(path, format!("trailer missing `{k}`")))
    };
    let info = EnsembleFileInfo {
        config_digest: str_field("digest")?,
        image_id: str_field("image_id")?,
        query: Point::new(num_field("qx")?, num_field("qy")?)?,
    };

    let mut members = Vec::with_capacity(r);
    for round in 0..r {
        let mut matrix = Array2::zeros((p, d));
        for (i, v) in matrix.iter_mut().enumerate() {
            let o = 32 + (round * p * d + i) * 4;
            *v = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
        }
        let member = PromptEmbedding::new(
            matrix,
            token_index,
            Provenance {
                source_image_id: info.image_id.clone(),
                query: info.query,
                seed: base_seed + round as u64,
                hp_digest: info.config_digest.clone(),
            },
        )
        .map_err(|e| Error::file(path, format!("member {round}: {e}")))?;
        members.push(member);
    }
    Ok((EmbeddingEnsemble::new(members)?, info))
}

/// On-disk embedding cache, keyed by config digest, image id, and query:
/// `<root>/<digest>/<image-id>/<qx>_<qy>.pemb`.
pub struct EmbeddingCache {
    root: PathBuf,
    digest: String,
}

impl EmbeddingCache {
    pub fn new(root: impl Into<PathBuf>, digest: impl Into<String>) -> Self {
        EmbeddingCache { root: root.into(), digest: digest.into() }
    }

    pub fn entry_path(&self, image_id: &str, query: Point) -> Result<PathBuf> {
        if image_id.split('/').any(|seg| seg == ".." || seg.is_empty()) {
            return Err(Error::InvalidInput(format!(
                "image id `{image_id}` cannot be used as a cache path"
            )));
        }
        Ok(self
            .root
            .join(&self.digest)
            .join(image_id)
            .join(format!("{:.6}_{:.6}.pemb", query.x, query.y)))
    }

    /// Load a cached ensemble, verifying the trailer matches the key.
    /// Missing entries are `None`; present-but-inconsistent entries are
    /// errors (the digest-keyed layout makes them corruption, not
    /// staleness).
    pub fn load(&self, image_id: &str, query: Point) -> Result<Option<EmbeddingEnsemble>> {
        let path = self.entry_path(image_id, query)?;
        if !path.exists() {
            return Ok(None);
        }
        let (ensemble, info) = read_ensemble(&path)?;
        if info.config_digest != self.digest {
            return Err(Error::file(&path, format!(
                "trailer digest {} does not match cache digest {}",
                info.config_digest, self.digest
            )));
        }
        if info.image_id != image_id {
            return Err(Error::file(&path, format!(
                "trailer image id `{}` does not match `{image_id}`",
                info.image_id
            )));
        }
        Ok(Some(ensemble))
    }

    /// Persist an ensemble and return it with its matrices rounded
    /// through the file's f32 precision, so cache hits and fresh
    /// computations feed identical numbers downstream.
    pub fn store(&self, ensemble: &EmbeddingEnsemble) -> Result<EmbeddingEnsemble> {
        let first = &ensemble.members[0];
        let path = self.entry_path(&first.provenance.source_image_id, first.provenance.query)?;
        write_ensemble(&path, ensemble, &self.digest)?;
        let mut rounded = ensemble.clone();
        for m in &mut rounded.members {
            m.matrix.mapv_inplace(|v| (v as f32) as f64);
            m.provenance.hp_digest = self.digest.clone();
        }
        Ok(rounded)
    }

    /// Cache-or-compute: returns the stored ensemble when present,
    /// otherwise optimizes, stores, and returns the stored (f32-rounded)
    /// version. Either path yields bitwise-identical ensembles.
    pub fn load_or_optimize<B: Backend + ?Sized>(
        &self,
        backend: &B,
        image: &ImageRecord,
        query: Point,
        hp: &HyperParams,
        base_seed: u64,
    ) -> Result<EmbeddingEnsemble> {
        if let Some(hit) = self.load(&image.id, query)? {
            if hit.len() == hp.n_embeddings {
                return Ok(hit);
            }
            return Err(Error::file(
                self.entry_path(&image.id, query)?,
                format!("cached R = {} but config wants {}", hit.len(), hp.n_embeddings),
            ));
        }
        let fresh = optimize_ensemble(backend, image, query, hp, base_seed)?;
        self.store(&fresh)
    }
}
