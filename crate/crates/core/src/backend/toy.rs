//! Analytic toy backend for tests: a tiny differentiable "denoiser" whose
//! cross-attention has a known closed form.
//!
//! The latent is an area-downsampled copy of the image, so on a
//! [`coordinate_ramp`] picture (R = scene x, G = scene y) every latent
//! cell carries the scene coordinates of the patch it came from — which
//! makes features *content-based* and therefore consistent under crops,
//! exactly like a real encoder. Per-cell query features are a bank of
//! Gaussian radial basis functions of the estimated scene position, one
//! centered on every base-grid cell: local, discriminative features in
//! the same way a real denoiser's spatial features are. Keys are a fixed
//! linear projection of the embedding, so a token's score field is any
//! RBF-bank expansion — in particular the returned oracle embedding `e*`
//! scores token 1 by the kernel bump `k(z, u)`, a unimodal peak at the
//! planted query u.
//!
//! Head h uses queries `Q_h = tau_h * phi` with `tau_h = gain_h * sqrt(d)`,
//! so `softmax(Q K^T / sqrt(d))` reduces to `softmax(gain_h * phi K^T)`:
//! two heads sharing one key space at different sharpness.
//!
//! The projection W is an identity block (scale 0.2) plus a dense
//! Rademacher tail. The tail is what makes the bank *learnable* at paper
//! hyperparameters: an Adam run moves each embedding coordinate by about
//! lr x steps, and the tail sums those motions coherently, scaling the
//! reachable key change by sqrt(tail) — the same reason wide real
//! embedding spaces optimize well at tiny learning rates.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::{Array2, Array3, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::schedule::NoiseSchedule;
use crate::backend::{
    check_embedding, check_layers, AttentionStack, AttentionVjp, Backend, BackendDescriptor,
    LatentCode, LayerAttention, LayerGeometry,
};
use crate::types::{ImageRecord, Point, PromptEmbedding, Provenance};
use crate::util::{area_downsample, derive_seed, standard_normal};
use crate::{Error, Result};

/// RBF bandwidth, in units of one base-grid cell. Chosen so the
/// expressible bump width matches the default Gaussian target sigma
/// (27.98 px of a 512 frame is ~5.5% of the side).
const RBF_BANDWIDTH_CELLS: f64 = 0.9;
/// Identity-block scale in the key projection (small so gradient flow
/// prefers the wide tail; the oracle rows route through it exactly).
const W_IDENT: f64 = 0.2;
/// Oracle key amplitude: token-1 score at the planted query is about
/// PLANT_GAIN x the bank's self-kernel, far above the zero scores of the
/// other tokens.
const PLANT_GAIN: f64 = 8.0;
/// Per-head query gains (tau_h / sqrt(d)).
const HEAD_GAINS: [f64; 2] = [1.0, 0.6];

/// Test image whose channels encode scene coordinates: R = x, G = y,
/// B = 0.5. The toy backend's features recover positions from this
/// content, so crops of the same scene stay mutually consistent.
pub fn coordinate_ramp(size: usize, id: &str) -> ImageRecord {
    let pixels = Array3::from_shape_fn((size, size, 3), |(r, c, ch)| match ch {
        0 => (c as f64 + 0.5) / size as f64,
        1 => (r as f64 + 0.5) / size as f64,
        _ => 0.5,
    });
    ImageRecord::new(id, pixels, (size, size)).expect("ramp shape is valid")
}

/// Deterministic analytic backend. Layers 7-9 attend on the base grid,
/// layer 10 on the doubled grid, mirroring the reference U-Net's mixed
/// resolutions around the default layer set.
pub struct ToyBackend {
    desc: BackendDescriptor,
    schedule: NoiseSchedule,
    /// Per-layer key projection, (D, d) with d = base-grid cell count.
    w_proj: BTreeMap<usize, Arc<Array2<f64>>>,
    /// RBF center coordinates: one per base-grid cell, row-major.
    centers_x: Vec<f64>,
    centers_y: Vec<f64>,
    /// Normalized RBF bandwidth.
    bandwidth: f64,
}

/// Build a toy backend and the closed-form embedding `e*` whose token-1
/// attention peaks at `planted_query`. `grid` is the base attention grid
/// (layers 7-9); layer 10 runs at twice that resolution, the latent at
/// four times, and the input side is 8x the base grid. `embed_dim` must
/// exceed the feature count h*w so the projection has both its identity
/// block and a non-empty tail.
pub fn make_toy_backend(
    grid: (usize, usize),
    token_count: usize,
    embed_dim: usize,
    planted_query: Point,
    seed: u64,
) -> Result<(ToyBackend, PromptEmbedding)> {
    let (h, w) = grid;
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput("toy grid must be at least 1x1".into()));
    }
    if token_count < 3 {
        return Err(Error::InvalidInput("toy backend needs at least 3 tokens".into()));
    }
    let features = h * w;
    if embed_dim <= features {
        return Err(Error::InvalidInput(format!(
            "toy embedding dim must exceed the h*w = {features} feature bank"
        )));
    }

    let mut layer_geometry = BTreeMap::new();
    for l in 7..=9 {
        layer_geometry.insert(l, LayerGeometry { h, w, d: features, heads: 2 });
    }
    layer_geometry.insert(10, LayerGeometry { h: 2 * h, w: 2 * w, d: features, heads: 2 });

    let mut w_proj = BTreeMap::new();
    let tail = embed_dim - features;
    for &l in layer_geometry.keys() {
        let mut m = Array2::zeros((embed_dim, features));
        for f in 0..features {
            m[[f, f]] = W_IDENT;
        }
        // Dense +-1/sqrt(tail) block: many embedding dims feed each
        // feature, so gradient steps accumulate coherently the way they
        // do in a wide real embedding space.
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "toy-wproj", l as u64));
        let amp = 1.0 / (tail as f64).sqrt();
        for r in features..embed_dim {
            for f in 0..features {
                let sign = if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
                m[[r, f]] = sign * amp;
            }
        }
        w_proj.insert(l, Arc::new(m));
    }

    let desc = BackendDescriptor {
        name: "toy".into(),
        latent_geometry: (3, 4 * h, 4 * w),
        layer_geometry,
        token_count,
        embed_dim,
        input_size: 8 * h.max(w),
        supports_gradients: true,
    };

    let centers_x: Vec<f64> = (0..w).map(|c| (c as f64 + 0.5) / w as f64).collect();
    let centers_y: Vec<f64> = (0..h).map(|r| (r as f64 + 0.5) / h as f64).collect();
    let bandwidth = RBF_BANDWIDTH_CELLS / h.max(w) as f64;

    let backend = ToyBackend {
        desc,
        schedule: NoiseSchedule::toy(50),
        w_proj,
        centers_x,
        centers_y,
        bandwidth,
    };

    // The oracle key is the bank evaluated at the (noise-free) query:
    // token 1 then scores k(z, u) = phi(z) . phi(u), a kernel bump peaked
    // at u. Lift through the identity block; every other token stays at
    // score zero.
    let phi_u = backend.bank_row(planted_query.x, planted_query.y);
    let mut matrix = Array2::zeros((token_count, embed_dim));
    for f in 0..features {
        matrix[[1, f]] = PLANT_GAIN * phi_u[f] / W_IDENT;
    }
    let oracle = PromptEmbedding::new(
        matrix,
        1,
        Provenance {
            source_image_id: "toy-oracle".into(),
            query: planted_query,
            seed,
            hp_digest: String::new(),
        },
    )?;

    Ok((backend, oracle))
}

impl ToyBackend {
    /// Replace the noise schedule (tests exercise schedule edge cases).
    pub fn with_schedule(mut self, schedule: NoiseSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// One bank row: RBF activations of position (x, y) against every
    /// center. Separable, so it costs h + w exponentials.
    fn bank_row(&self, x: f64, y: f64) -> Vec<f64> {
        let inv = 1.0 / (2.0 * self.bandwidth * self.bandwidth);
        let ex: Vec<f64> = self.centers_x.iter().map(|cx| (-(x - cx) * (x - cx) * inv).exp()).collect();
        let ey: Vec<f64> = self.centers_y.iter().map(|cy| (-(y - cy) * (y - cy) * inv).exp()).collect();
        let mut row = Vec::with_capacity(ex.len() * ey.len());
        for fy in &ey {
            for fx in &ex {
                row.push(fy * fx);
            }
        }
        row
    }

    /// Per-cell feature rows for one layer grid: the latent's first two
    /// channels (denoised estimate) resampled to the grid give each cell
    /// an estimated scene position, expanded through the RBF bank.
    fn layer_features(&self, z: &LatentCode, geom: LayerGeometry) -> Result<Array2<f64>> {
        let (_c, lh, lw) = self.desc.latent_geometry;
        // Undo the signal attenuation so features estimate z_0.
        let abar = self.schedule.alpha_bar(z.timestep)?;
        let scale = 1.0 / abar.sqrt();
        let grab = |ch: usize| -> Array2<f64> {
            let plane = z.z.index_axis(ndarray::Axis(0), ch).to_owned() * scale;
            if (geom.h, geom.w) == (lh, lw) {
                plane
            } else {
                area_downsample(&plane, geom.h, geom.w)
            }
        };
        let zr = grab(0);
        let zg = grab(1);
        let cells = geom.h * geom.w;
        let mut phi = Array2::zeros((cells, geom.d));
        for r in 0..geom.h {
            for c in 0..geom.w {
                let row = self.bank_row(zr[[r, c]], zg[[r, c]]);
                let s = r * geom.w + c;
                for (f, v) in row.into_iter().enumerate() {
                    phi[[s, f]] = v;
                }
            }
        }
        Ok(phi)
    }

    fn check_latent(&self, z: &LatentCode) -> Result<()> {
        if z.z.dim() != self.desc.latent_geometry {
            return Err(Error::backend(
                "toy",
                format!(
                    "latent shape {:?} does not match declared {:?}",
                    z.z.dim(),
                    self.desc.latent_geometry
                ),
            ));
        }
        Ok(())
    }

    fn forward_parts(
        &self,
        z: &LatentCode,
        e: &PromptEmbedding,
        layers: &[usize],
    ) -> Result<(AttentionStack, Vec<LayerParts>)> {
        check_embedding(&self.desc, e)?;
        check_layers(&self.desc, layers)?;
        self.check_latent(z)?;

        let p = self.desc.token_count;
        let mut stack_layers = Vec::with_capacity(layers.len());
        let mut parts = Vec::with_capacity(layers.len());
        for &l in layers {
            let geom = self.desc.geometry(l)?;
            let phi = self.layer_features(z, geom)?;
            let w = &self.w_proj[&l];
            let keys = e.matrix.dot(w.as_ref()); // (P, d)
            let cells = geom.h * geom.w;
            let mut probs = Array3::zeros((HEAD_GAINS.len(), cells, p));
            let raw = phi.dot(&keys.t()); // (cells, P) pre-gain scores
            for (hd, &gain) in HEAD_GAINS.iter().enumerate() {
                for s in 0..cells {
                    let mut row: Vec<f64> = (0..p).map(|t| gain * raw[[s, t]]).collect();
                    softmax_inplace(&mut row);
                    for t in 0..p {
                        probs[[hd, s, t]] = row[t];
                    }
                }
            }
            stack_layers.push(LayerAttention { layer: l, geometry: geom, probs });
            parts.push(LayerParts { layer: l, phi, w: Arc::clone(w) });
        }
        Ok((AttentionStack { layers: stack_layers }, parts))
    }
}

/// Forward intermediates retained for the pullback.
struct LayerParts {
    layer: usize,
    phi: Array2<f64>,
    w: Arc<Array2<f64>>,
}

fn softmax_inplace(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Backend for ToyBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.desc
    }

    fn encode(&self, image: &ImageRecord) -> Result<Array3<f64>> {
        let n = self.desc.input_size;
        if image.height() != n || image.width() != n {
            return Err(Error::backend(
                "toy",
                format!("input is {}x{}, expected {n}x{n}", image.height(), image.width()),
            ));
        }
        let (c_lat, lh, lw) = self.desc.latent_geometry;
        let mut z = Array3::zeros((c_lat, lh, lw));
        for ch in 0..c_lat {
            let plane = area_downsample(&image.channel(ch), lh, lw);
            z.index_axis_mut(ndarray::Axis(0), ch).assign(&plane);
        }
        Ok(z)
    }

    fn add_noise(&self, z0: &Array3<f64>, timestep: u32, seed: u64) -> Result<LatentCode> {
        if z0.dim() != self.desc.latent_geometry {
            return Err(Error::backend(
                "toy",
                format!("latent shape {:?} does not match declared geometry", z0.dim()),
            ));
        }
        let (sig, noise) = self.schedule.noise_coefficients(timestep)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = z0.clone();
        // Fixed (channel, row, col) order keeps draws reproducible.
        for v in z.iter_mut() {
            *v = sig * *v + noise * standard_normal(&mut rng);
        }
        Ok(LatentCode { z, timestep, noise_seed: seed })
    }

    fn attention_forward(
        &self,
        z: &LatentCode,
        e: &PromptEmbedding,
        layers: &[usize],
    ) -> Result<AttentionStack> {
        let (stack, _) = self.forward_parts(z, e, layers)?;
        Ok(stack)
    }

    fn attention_forward_vjp(
        &self,
        z: &LatentCode,
        e: &PromptEmbedding,
        layers: &[usize],
    ) -> Result<(AttentionStack, AttentionVjp)> {
        let (stack, parts) = self.forward_parts(z, e, layers)?;
        let probs: Vec<Array3<f64>> = stack.layers.iter().map(|l| l.probs.clone()).collect();
        let (p, d) = e.matrix.dim();

        let pullback = move |cotangent: &AttentionStack| -> Result<Array2<f64>> {
            if cotangent.layers.len() != probs.len() {
                return Err(Error::InvalidInput(
                    "cotangent stack does not match forward stack".into(),
                ));
            }
            let mut grad = Array2::zeros((p, d));
            for (li, part) in parts.iter().enumerate() {
                let co = &cotangent.layers[li];
                if co.layer != part.layer || co.probs.dim() != probs[li].dim() {
                    return Err(Error::InvalidInput(format!(
                        "cotangent layer {} does not match forward layer {}",
                        co.layer, part.layer
                    )));
                }
                let a = &probs[li];
                let (heads, _cells, tokens) = a.dim();
                let feats = part.phi.ncols();
                let mut k_bar = Array2::zeros((tokens, feats));
                for hd in 0..heads {
                    // Softmax pullback on every token row at once:
                    // sbar = A .* (Abar - rowsum(Abar .* A)), rows = cells.
                    let a_h = a.index_axis(Axis(0), hd);
                    let co_h = co.probs.index_axis(Axis(0), hd);
                    let dot = (&a_h * &co_h).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let mut g = &a_h * &(&co_h - &dot);
                    g *= HEAD_GAINS[hd];
                    // Scores were gain * phi K^T, so dL/dK = gain * sbar^T phi.
                    k_bar += &g.t().dot(&part.phi);
                }
                // keys = E W  =>  dL/dE += k_bar W^T.
                grad = grad + k_bar.dot(&part.w.t());
            }
            Ok(grad)
        };

        Ok((stack, Box::new(pullback)))
    }
}

/// Wrapper counting backend invocations; lets tests assert cache reuse
/// and worker distribution without poking at internals.
pub struct CountingBackend<B> {
    inner: B,
    encodes: Arc<AtomicUsize>,
    forwards: Arc<AtomicUsize>,
}

impl<B: Backend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        CountingBackend {
            inner,
            encodes: Arc::new(AtomicUsize::new(0)),
            forwards: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Shared handles that keep counting after the backend is moved.
    pub fn counters(&self) -> (Arc<AtomicUsize>, Arc<AtomicUsize>) {
        (self.encodes.clone(), self.forwards.clone())
    }

    pub fn encode_count(&self) -> usize {
        self.encodes.load(Ordering::Relaxed)
    }

    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn encode(&self, image: &ImageRecord) -> Result<Array3<f64>> {
        self.encodes.fetch_add(1, Ordering::Relaxed);
        self.inner.encode(image)
    }

    fn add_noise(&self, z0: &Array3<f64>, timestep: u32, seed: u64) -> Result<LatentCode> {
        self.inner.add_noise(z0, timestep, seed)
    }

    fn attention_forward(
        &self,
        z: &LatentCode,
        e: &PromptEmbedding,
        layers: &[usize],
    ) -> Result<AttentionStack> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        self.inner.attention_forward(z, e, layers)
    }

    fn attention_forward_vjp(
        &self,
        z: &LatentCode,
        e: &PromptEmbedding,
        layers: &[usize],
    ) -> Result<(AttentionStack, AttentionVjp)> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        self.inner.attention_forward_vjp(z, e, layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Result;

    fn planted(seed: u64) -> (ToyBackend, PromptEmbedding, ImageRecord) {
        let q = Point { x: 0.7, y: 0.3 };
        let (backend, star) = make_toy_backend((16, 16), 8, 320, q, seed).unwrap();
        let img = coordinate_ramp(backend.descriptor().input_size, "ramp");
        (backend, star, img)
    }

    #[test]
    fn softmax_of_one_zero_is_the_textbook_pair() {
        let mut row = vec![1.0, 0.0];
        softmax_inplace(&mut row);
        assert!((row[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((row[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn undersized_embedding_dim_is_rejected() {
        match make_toy_backend((8, 8), 6, 64, Point { x: 0.5, y: 0.5 }, 0) {
            Err(err) => assert!(err.to_string().contains("exceed"), "{err}"),
            Ok(_) => panic!("64 dims must not satisfy an 8x8 bank"),
        }
    }

    #[test]
    fn encode_is_the_block_mean_of_the_input() {
        let (backend, _, img) = planted(0);
        let z = backend.encode(&img).unwrap();
        // 128 -> 64 is an exact factor-2 block mean; compute one cell by
        // hand from the raw pixels.
        let mut acc = 0.0;
        for r in 4..6 {
            for c in 10..12 {
                acc += img.pixels[[r, c, 0]];
            }
        }
        assert!((z[[0, 2, 5]] - acc / 4.0).abs() < 1e-12);
        // Ramp content: latent cell centers carry scene coordinates.
        assert!((z[[0, 2, 5]] - (5.0 + 0.5) / 64.0).abs() < 1e-12);
        let z2 = backend.encode(&img).unwrap();
        assert_eq!(z, z2);
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let (backend, _, _) = planted(0);
        let small = coordinate_ramp(64, "small");
        assert!(backend.encode(&small).is_err());
    }

    #[test]
    fn add_noise_is_seeded_and_honors_the_schedule() {
        let (backend, _, img) = planted(1);
        let z0 = backend.encode(&img).unwrap();
        let a = backend.add_noise(&z0, 8, 99).unwrap();
        let b = backend.add_noise(&z0, 8, 99).unwrap();
        assert_eq!(a.z, b.z);
        let c = backend.add_noise(&z0, 8, 100).unwrap();
        assert_ne!(a.z, c.z);

        // A schedule step with alpha_bar = 1 reproduces z_0 exactly.
        let (backend2, _) = make_toy_backend((4, 4), 4, 24, Point { x: 0.5, y: 0.5 }, 0).unwrap();
        let backend2 = backend2
            .with_schedule(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5]).unwrap());
        let img2 = coordinate_ramp(backend2.descriptor().input_size, "r");
        let z0 = backend2.encode(&img2).unwrap();
        let zt = backend2.add_noise(&z0, 1, 7).unwrap();
        assert_eq!(zt.z, z0);
        assert!(backend2.add_noise(&z0, 3, 7).is_err(), "t beyond schedule");
    }

    #[test]
    fn noised_latent_variance_matches_the_mixing_formula() {
        let (backend, _) = make_toy_backend((4, 4), 4, 24, Point { x: 0.5, y: 0.5 }, 3).unwrap();
        let img = coordinate_ramp(backend.descriptor().input_size, "r");
        let z0 = backend.encode(&img).unwrap();
        let t = 40;
        let abar = backend.schedule().alpha_bar(t).unwrap();

        let n0 = z0.len() as f64;
        let mean0 = z0.sum() / n0;
        let var0 = z0.iter().map(|v| (v - mean0) * (v - mean0)).sum::<f64>() / n0;

        let mut count = 0.0;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for seed in 0..10_000u64 {
            let zt = backend.add_noise(&z0, t, seed).unwrap();
            for v in zt.z.iter() {
                count += 1.0;
                sum += v;
                sumsq += v * v;
            }
        }
        let mean = sum / count;
        let var = sumsq / count - mean * mean;
        let want = abar * var0 + (1.0 - abar);
        assert!(
            (var - want).abs() / want < 0.05,
            "pooled variance {var} vs predicted {want}"
        );
    }

    #[test]
    fn oracle_embedding_peaks_at_the_planted_query() {
        let (backend, star, img) = planted(5);
        let z0 = backend.encode(&img).unwrap();
        // t = 1 on the toy schedule is nearly noise-free.
        let zt = backend.add_noise(&z0, 1, 0).unwrap();
        let stack = backend.attention_forward(&zt, &star, &[7, 8, 9, 10]).unwrap();
        stack.validate(1e-5).unwrap();
        for la in &stack.layers {
            let g = la.geometry;
            let (mut best, mut best_v) = ((0usize, 0usize), f64::NEG_INFINITY);
            for r in 0..g.h {
                for c in 0..g.w {
                    let s = r * g.w + c;
                    let v = (0..2).map(|hd| la.probs[[hd, s, 1]]).sum::<f64>();
                    if v > best_v {
                        best_v = v;
                        best = (r, c);
                    }
                }
            }
            let cx = (best.1 as f64 + 0.5) / g.w as f64;
            let cy = (best.0 as f64 + 0.5) / g.h as f64;
            assert!(
                (cx - 0.7).abs() <= 1.0 / g.w as f64 && (cy - 0.3).abs() <= 1.0 / g.h as f64,
                "layer {}: argmax at ({cx}, {cy})",
                la.layer
            );
        }
    }

    #[test]
    fn oracle_bump_is_decisive_and_unimodal_along_rows() {
        let (backend, star, img) = planted(12);
        let z = backend.prepare_latent(&img, 1, 0).unwrap();
        let stack = backend.attention_forward(&z, &star, &[7]).unwrap();
        let la = &stack.layers[0];
        let g = la.geometry;
        // Peak probability near 1; background near the uniform 1/P floor.
        let s_peak = (0.3 * g.h as f64 - 0.5).round() as usize * g.w
            + (0.7 * g.w as f64 - 0.5).round() as usize;
        assert!(la.probs[[0, s_peak, 1]] > 0.95, "peak {}", la.probs[[0, s_peak, 1]]);
        let far = 2 * g.w + 2;
        assert!(la.probs[[0, far, 1]] < 0.2, "background {}", la.probs[[0, far, 1]]);
        // Along the peak row, values rise to the peak column then fall.
        let row = (0.3 * g.h as f64 - 0.5).round() as usize;
        let vals: Vec<f64> = (0..g.w).map(|c| la.probs[[0, row * g.w + c, 1]]).collect();
        let peak_col = (0.7 * g.w as f64 - 0.5).round() as usize;
        for c in 1..=peak_col {
            assert!(vals[c] >= vals[c - 1] - 1e-9, "column {c}: {vals:?}");
        }
        for c in peak_col..g.w - 1 {
            assert!(vals[c + 1] <= vals[c] + 1e-9, "column {c}: {vals:?}");
        }
    }

    #[test]
    fn random_embeddings_yield_row_stochastic_stacks() {
        let (backend, _, img) = planted(6);
        let z = backend.prepare_latent(&img, 8, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..5 {
            let m = Array2::from_shape_fn((8, 320), |_| standard_normal(&mut rng));
            let e = PromptEmbedding::new(
                m,
                1,
                Provenance {
                    source_image_id: format!("t{trial}"),
                    query: Point { x: 0.5, y: 0.5 },
                    seed: trial,
                    hp_digest: String::new(),
                },
            )
            .unwrap();
            let stack = backend.attention_forward(&z, &e, &[7, 10]).unwrap();
            stack.validate(1e-5).unwrap();
        }
    }

    #[test]
    fn same_seed_backends_are_identical() {
        let (b1, s1, img) = planted(42);
        let (b2, s2, _) = planted(42);
        assert_eq!(s1.matrix, s2.matrix);
        let z1 = b1.prepare_latent(&img, 8, 11).unwrap();
        let z2 = b2.prepare_latent(&img, 8, 11).unwrap();
        assert_eq!(z1.z, z2.z);
        let a1 = b1.attention_forward(&z1, &s1, &[7, 8, 9, 10]).unwrap();
        let a2 = b2.attention_forward(&z2, &s2, &[7, 8, 9, 10]).unwrap();
        for (l1, l2) in a1.layers.iter().zip(&a2.layers) {
            assert_eq!(l1.probs, l2.probs);
        }
    }

    #[test]
    fn unsupported_layer_is_reported() {
        let (backend, star, img) = planted(1);
        let z = backend.prepare_latent(&img, 1, 0).unwrap();
        let err = backend.attention_forward(&z, &star, &[7, 13]).unwrap_err();
        assert!(matches!(err, Error::UnsupportedLayer { layer: 13 }));
    }

    #[test]
    fn vjp_matches_finite_differences_on_a_small_instance() -> Result<()> {
        let (backend, _) = make_toy_backend((4, 4), 8, 32, Point { x: 0.6, y: 0.4 }, 9)?;
        let img = coordinate_ramp(backend.descriptor().input_size, "fd");
        let z = backend.prepare_latent(&img, 2, 5)?;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let e_mat = Array2::from_shape_fn((8, 32), |_| standard_normal(&mut rng));
        let prov = Provenance {
            source_image_id: "fd".into(),
            query: Point { x: 0.5, y: 0.5 },
            seed: 0,
            hp_digest: String::new(),
        };
        let e = PromptEmbedding::new(e_mat.clone(), 1, prov.clone())?;
        let layers = [7usize, 10];

        // Random linear functional of the stack: L(e) = sum(A(e) .* G).
        let (stack, vjp) = backend.attention_forward_vjp(&z, &e, &layers)?;
        let mut cot = stack.zeros_like();
        for la in &mut cot.layers {
            la.probs.mapv_inplace(|_| standard_normal(&mut rng));
        }
        let grad = vjp(&cot)?;

        let loss = |m: &Array2<f64>| -> Result<f64> {
            let e = PromptEmbedding::new(m.clone(), 1, prov.clone())?;
            let s = backend.attention_forward(&z, &e, &layers)?;
            let mut acc = 0.0;
            for (la, lc) in s.layers.iter().zip(&cot.layers) {
                acc += (&la.probs * &lc.probs).sum();
            }
            Ok(acc)
        };

        let eps = 1e-3;
        let mut checked = 0;
        for &(p, d) in &[(0usize, 0usize), (1, 3), (1, 30), (4, 17), (7, 31)] {
            let mut plus = e_mat.clone();
            plus[[p, d]] += eps;
            let mut minus = e_mat.clone();
            minus[[p, d]] -= eps;
            let fd = (loss(&plus)? - loss(&minus)?) / (2.0 * eps);
            let an = grad[[p, d]];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < 1e-4,
                "entry ({p},{d}): fd {fd} vs analytic {an}"
            );
            checked += 1;
        }
        assert_eq!(checked, 5);
        Ok(())
    }

    #[test]
    fn counting_backend_tracks_calls() {
        let (backend, star, img) = planted(2);
        let counting = CountingBackend::new(backend);
        let z = counting.prepare_latent(&img, 1, 0).unwrap();
        let _ = counting.attention_forward(&z, &star, &[7]).unwrap();
        let _ = counting.attention_forward(&z, &star, &[7]).unwrap();
        assert_eq!(counting.encode_count(), 1);
        assert_eq!(counting.forward_count(), 2);
    }
}
