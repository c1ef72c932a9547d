//! Adapter over a frozen latent-diffusion denoiser: encode an image to a
//! latent, add scheduled noise, and run one denoising forward pass that
//! exposes per-layer cross-attention probabilities (and their gradients
//! with respect to the prompt embedding).
//!
//! Two implementations ship: [`toy::ToyBackend`], a closed-form analytic
//! stand-in used by the test suite, and (behind the `checkpoint` feature)
//! [`checkpoint::CheckpointBackend`] driving pretrained latent-diffusion
//! v1.4 weights.

pub mod schedule;
pub mod toy;

#[cfg(feature = "checkpoint")]
pub mod checkpoint;

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};

use crate::types::{ImageRecord, PromptEmbedding};
use crate::{Error, Result};

/// Shape record for one cross-attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGeometry {
    /// Spatial grid height.
    pub h: usize,
    /// Spatial grid width.
    pub w: usize,
    /// Per-head key/query dimensionality (the softmax temperature is
    /// 1/sqrt(d)).
    pub d: usize,
    /// Head count C.
    pub heads: usize,
}

/// Static facts about a backend implementation.
#[derive(Debug, Clone)]
pub struct BackendDescriptor {
    pub name: String,
    /// Latent shape (channels, height, width).
    pub latent_geometry: (usize, usize, usize),
    /// Geometry per attention layer, keyed by 0-based layer index.
    pub layer_geometry: BTreeMap<usize, LayerGeometry>,
    /// Token count P of the conditioning matrix.
    pub token_count: usize,
    /// Embedding dimensionality D.
    pub embed_dim: usize,
    /// Expected square input side (512 for the reference checkpoint).
    pub input_size: usize,
    pub supports_gradients: bool,
}

impl BackendDescriptor {
    pub fn geometry(&self, layer: usize) -> Result<LayerGeometry> {
        self.layer_geometry
            .get(&layer)
            .copied()
            .ok_or(Error::UnsupportedLayer { layer })
    }
}

/// The 16 cross-attention layers of the reference U-Net, 0-based in
/// contracting -> bottleneck -> expansive order. Head dim d doubles as
/// resolution halves; every layer runs 8 heads.
pub fn reference_layer_table() -> BTreeMap<usize, LayerGeometry> {
    let g = |h: usize, d: usize| LayerGeometry { h, w: h, d, heads: 8 };
    let mut table = BTreeMap::new();
    // Contracting path.
    table.insert(0, g(64, 40));
    table.insert(1, g(64, 40));
    table.insert(2, g(32, 80));
    table.insert(3, g(32, 80));
    table.insert(4, g(16, 160));
    table.insert(5, g(16, 160));
    // Bottleneck.
    table.insert(6, g(8, 160));
    // Expansive path.
    table.insert(7, g(16, 160));
    table.insert(8, g(16, 160));
    table.insert(9, g(16, 160));
    table.insert(10, g(32, 80));
    table.insert(11, g(32, 80));
    table.insert(12, g(32, 80));
    table.insert(13, g(64, 40));
    table.insert(14, g(64, 40));
    table.insert(15, g(64, 40));
    table
}

/// A noised latent, tagged with how it was produced.
#[derive(Debug, Clone)]
pub struct LatentCode {
    /// (channels, height, width).
    pub z: Array3<f64>,
    pub timestep: u32,
    pub noise_seed: u64,
}

/// Cross-attention probabilities for one layer: `(heads, h*w, tokens)`,
/// softmax-normalized along the token axis.
#[derive(Debug, Clone)]
pub struct LayerAttention {
    pub layer: usize,
    pub geometry: LayerGeometry,
    pub probs: Array3<f64>,
}

/// Per-layer attention stacks in the caller's requested layer order.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    pub layers: Vec<LayerAttention>,
}

impl AttentionStack {
    /// Check shapes against geometry and row-stochasticity along tokens
    /// (sum = 1 within `tol`, entries nonnegative).
    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidInput("attention stack has no layers".into()));
        }
        for la in &self.layers {
            let (heads, cells, tokens) = la.probs.dim();
            let g = la.geometry;
            if heads != g.heads || cells != g.h * g.w {
                return Err(Error::InvalidInput(format!(
                    "layer {} stack shape ({heads}, {cells}, {tokens}) does not match geometry {g:?}",
                    la.layer
                )));
            }
            for c in 0..heads {
                for s in 0..cells {
                    let mut sum = 0.0;
                    for p in 0..tokens {
                        let v = la.probs[[c, s, p]];
                        if !v.is_finite() || v < 0.0 {
                            return Err(Error::InvalidInput(format!(
                                "layer {} head {c} cell {s} token {p}: weight {v}",
                                la.layer
                            )));
                        }
                        sum += v;
                    }
                    if (sum - 1.0).abs() > tol {
                        return Err(Error::InvalidInput(format!(
                            "layer {} head {c} cell {s}: token weights sum to {sum}",
                            la.layer
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Token count shared by all layers.
    pub fn token_count(&self) -> usize {
        self.layers.first().map(|l| l.probs.dim().2).unwrap_or(0)
    }

    /// Zero-filled stack with identical shapes — scaffolding for adjoints.
    pub fn zeros_like(&self) -> AttentionStack {
        AttentionStack {
            layers: self
                .layers
                .iter()
                .map(|la| LayerAttention {
                    layer: la.layer,
                    geometry: la.geometry,
                    probs: Array3::zeros(la.probs.dim()),
                })
                .collect(),
        }
    }
}

/// Pullback returned by [`Backend::attention_forward_vjp`]: maps a
/// cotangent on the attention stack to the loss gradient with respect to
/// the embedding matrix (P x D).
pub type AttentionVjp = Box<dyn FnOnce(&AttentionStack) -> Result<Array2<f64>>>;

/// A frozen denoiser viewed as a (differentiable) map from
/// (image, timestep, embedding) to cross-attention probabilities.
///
/// Instances need not be thread-safe for concurrent calls; workers create
/// one instance each (see [`crate::util::run_indexed`]).
pub trait Backend {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Image -> clean latent z_0. Deterministic; the image must already be
    /// at the backend's input size.
    fn encode(&self, image: &ImageRecord) -> Result<Array3<f64>>;

    /// Forward-noise z_0 to z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps
    /// with eps ~ N(0, I) drawn deterministically from `seed`.
    fn add_noise(&self, z0: &Array3<f64>, timestep: u32, seed: u64) -> Result<LatentCode>;

    /// One denoising pass capturing softmax(Q K^T / sqrt(d)) per requested
    /// layer. The predicted noise itself is discarded.
    fn attention_forward(
        &self,
        z: &LatentCode,
        e: &PromptEmbedding,
        layers: &[usize],
    ) -> Result<AttentionStack>;

    /// Like [`Backend::attention_forward`], additionally returning a
    /// pullback closure for gradients with respect to `e`.
    fn attention_forward_vjp(
        &self,
        z: &LatentCode,
        e: &PromptEmbedding,
        layers: &[usize],
    ) -> Result<(AttentionStack, AttentionVjp)>;

    /// Convenience: encode + add_noise in the declared order.
    fn prepare_latent(&self, image: &ImageRecord, timestep: u32, seed: u64) -> Result<LatentCode> {
        let z0 = self.encode(image)?;
        self.add_noise(&z0, timestep, seed)
    }
}

/// Shape/validity checks shared by backend implementations.
pub(crate) fn check_embedding(desc: &BackendDescriptor, e: &PromptEmbedding) -> Result<()> {
    let (p, d) = e.matrix.dim();
    if p != desc.token_count || d != desc.embed_dim {
        return Err(Error::backend(
            desc.name.clone(),
            format!(
                "embedding is {p}x{d}, backend expects {}x{}",
                desc.token_count, desc.embed_dim
            ),
        ));
    }
    Ok(())
}

pub(crate) fn check_layers(desc: &BackendDescriptor, layers: &[usize]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::backend(desc.name.clone(), "no layers requested"));
    }
    for &l in layers {
        desc.geometry(l)?;
    }
    Ok(())
}
