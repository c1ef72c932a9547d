//! Numeric and plumbing helpers shared across the pipeline: bilinear
//! resampling, deterministic seeding, Gaussian sampling, a small indexed
//! worker pool, and atomic file writes.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array2;
use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Sample `map` at continuous pixel coordinates `(py, px)` (cell-center
/// convention) with bilinear weights; coordinates outside the raster clamp
/// to the border.
pub fn bilinear_sample(map: &Array2<f64>, py: f64, px: f64) -> f64 {
    let (h, w) = map.dim();
    let yc = py.clamp(0.0, (h - 1) as f64);
    let xc = px.clamp(0.0, (w - 1) as f64);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ty = yc - y0 as f64;
    let tx = xc - x0 as f64;
    (1.0 - ty) * (1.0 - tx) * map[[y0, x0]]
        + (1.0 - ty) * tx * map[[y0, x1]]
        + ty * (1.0 - tx) * map[[y1, x0]]
        + ty * tx * map[[y1, x1]]
}

/// Bilinear resize with half-pixel-aligned sampling: output cell centers
/// map to `(i + 0.5) * in / out - 0.5` in input pixel coordinates.
pub fn bilinear_resize(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    if h == out_h && w == out_w {
        return map.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let py = (i as f64 + 0.5) * sy - 0.5;
        let px = (j as f64 + 0.5) * sx - 0.5;
        bilinear_sample(map, py, px)
    })
}

/// Adjoint of [`bilinear_resize`]: scatters a cotangent on the output grid
/// back onto the input grid, so that for any input `m` and cotangent `g`,
/// `sum(resize(m) * g) == sum(m * resize_adjoint(g))`.
pub fn bilinear_resize_adjoint(
    cotangent: &Array2<f64>,
    in_h: usize,
    in_w: usize,
) -> Array2<f64> {
    let (out_h, out_w) = cotangent.dim();
    if in_h == out_h && in_w == out_w {
        return cotangent.clone();
    }
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    let mut grad = Array2::zeros((in_h, in_w));
    for i in 0..out_h {
        let py = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (in_h - 1) as f64);
        let y0 = py.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let ty = py - y0 as f64;
        for j in 0..out_w {
            let px = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (in_w - 1) as f64);
            let x0 = px.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let tx = px - x0 as f64;
            let g = cotangent[[i, j]];
            grad[[y0, x0]] += (1.0 - ty) * (1.0 - tx) * g;
            grad[[y0, x1]] += (1.0 - ty) * tx * g;
            grad[[y1, x0]] += ty * (1.0 - tx) * g;
            grad[[y1, x1]] += ty * tx * g;
        }
    }
    grad
}

/// Downsample by averaging the exact (possibly fractional) footprint each
/// output cell covers in the input. Preserves the mean exactly.
pub fn area_downsample(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    assert!(out_h <= h && out_w <= w, "area_downsample only shrinks");
    if h == out_h && w == out_w {
        return map.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let y_lo = i as f64 * sy;
        let y_hi = (i + 1) as f64 * sy;
        let x_lo = j as f64 * sx;
        let x_hi = (j + 1) as f64 * sx;
        let mut acc = 0.0;
        let mut area = 0.0;
        let r0 = y_lo.floor() as usize;
        let r1 = (y_hi.ceil() as usize).min(h);
        let c0 = x_lo.floor() as usize;
        let c1 = (x_hi.ceil() as usize).min(w);
        for r in r0..r1 {
            let wy = (y_hi.min((r + 1) as f64) - y_lo.max(r as f64)).max(0.0);
            for c in c0..c1 {
                let wx = (x_hi.min((c + 1) as f64) - x_lo.max(c as f64)).max(0.0);
                acc += wy * wx * map[[r, c]];
                area += wy * wx;
            }
        }
        acc / area
    })
}

/// Mix a base seed with a purpose tag and an index into a fresh stream
/// seed, so sub-streams never collide across stages.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8-byte slice"))
}

/// One standard-normal draw via the Box-Muller transform. Kept local so
/// sampled values are stable regardless of RNG-crate distribution changes.
pub fn standard_normal<R: RngCore>(rng: &mut R) -> f64 {
    // u1 in (0, 1] so the log stays finite; u2 in [0, 1).
    let u1 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let u1 = (1.0 - u1).max(f64::MIN_POSITIVE);
    let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform draw in `[0, 1)`.
pub fn uniform<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Run `job(0..n)` across a pool of `workers` threads. Each worker gets its
/// own state from `make_state` (backends are not shared across threads).
/// Results come back ordered by index; if any job fails, the error for the
/// smallest failing index is returned. All jobs run to completion either
/// way, so the outcome does not depend on scheduling.
pub fn run_indexed<T, S, F, G>(n: usize, workers: usize, make_state: G, job: F) -> Result<Vec<T>>
where
    T: Send,
    S: Send,
    F: Fn(&mut S, usize) -> Result<T> + Sync,
    G: FnMut() -> S,
{
    let workers = workers.max(1).min(n.max(1));
    let mut make_state = make_state;
    if workers == 1 {
        let mut state = make_state();
        return (0..n).map(|i| job(&mut state, i)).collect();
    }
    let states: Vec<S> = (0..workers).map(|_| make_state()).collect();
    let next = AtomicUsize::new(0);
    let job = &job;
    let next = &next;
    let outcomes = std::thread::scope(|scope| {
        let handles: Vec<_> = states
            .into_iter()
            .map(|mut state| {
                scope.spawn(move || {
                    let mut local: Vec<(usize, Result<T>)> = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= n {
                            break;
                        }
                        local.push((i, job(&mut state, i)));
                    }
                    local
                })
            })
            .collect();
        let mut all: Vec<(usize, Result<T>)> = Vec::with_capacity(n);
        for h in handles {
            all.extend(h.join().expect("worker thread panicked"));
        }
        all
    });
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    for (i, r) in outcomes {
        slots[i] = Some(r);
    }
    let mut out = Vec::with_capacity(n);
    for slot in slots {
        out.push(slot.expect("every index visited exactly once")?);
    }
    Ok(out)
}

/// Write `bytes` to `path` atomically: the data lands in a sibling
/// temporary file first and is renamed into place, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(path, e))?;
    }
    let stem = path
        .file_name()
        .ok_or_else(|| Error::file(path, "path has no file name"))?
        .to_string_lossy()
        .into_owned();
    let nonce = std::process::id() as u64 ^ derive_seed(bytes.len() as u64, &stem, 0);
    let tmp = path.with_file_name(format!(".{stem}.{nonce:016x}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Hex digest of arbitrary bytes (config fingerprints, cache keys).
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
