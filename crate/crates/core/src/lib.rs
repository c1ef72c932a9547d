//! Semantic correspondence between image pairs via the cross-attention maps
//! of a frozen latent-diffusion denoiser.
//!
//! Given a source image and a query point, [`optim::optimize_embedding`]
//! finds a prompt embedding whose attention peaks at the query. Applying
//! that embedding to a target image ([`infer::match_keypoints`]) and taking
//! the attention argmax yields the corresponding point. No network is ever
//! trained or fine-tuned; the denoiser only runs forward (plus gradients
//! with respect to the embedding).
//!
//! The crate is organized around the pipeline stages:
//!
//! * [`types`] / [`config`] — domain types, coordinate conventions, run
//!   configuration.
//! * [`backend`] — the denoiser adapter trait, a deterministic analytic toy
//!   backend for tests, and (behind the `checkpoint` feature) an adapter
//!   for pretrained latent-diffusion v1.4 weights.
//! * [`attnmap`] — attention-map selection, head/layer aggregation with
//!   bilinear resampling, Gaussian targets, map file IO.
//! * [`optim`] — crop-augmented embedding optimization and ensembles.
//! * [`infer`] — crop/ensemble-averaged target attention and argmax
//!   localization.
//! * [`data`] — SPair-71k / PF-Willow / CUB-200 loaders plus a synthetic
//!   fixture dataset.
//! * [`eval`] — PCK metrics, report tables, random hyperparameter search.

pub mod attnmap;
pub mod backend;
pub mod config;
pub mod data;
pub mod eval;
pub mod infer;
pub mod optim;
pub mod types;
pub mod util;

mod error;

pub use error::{Error, Result};
pub use types::{HyperParams, ImageRecord, Point, PromptEmbedding};
