//! In-memory fixture dataset with exact ground truth.
//!
//! Each pair is a coordinate ramp and a zoomed-in view of it: source pixel
//! values encode position directly, and the target shows the scene window
//! `a * p + b`, so the true correspondence of a source point `u` is
//! `(u - b) / a`. Because the toy backend derives its features from those
//! same channel values, the full optimize-then-localize pipeline has a known
//! answer on these pairs, which makes them suitable for end-to-end tests
//! that need real hits and misses without any dataset download.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::types::{ImageRecord, Point};
use crate::util::{derive_seed, uniform};

use super::{keypoint_extent, CorrespondencePair, ImageHandle, Keypoint, Split};

const CLASS_CYCLE: [&str; 3] = ["zoom-a", "zoom-b", "zoom-c"];

/// Render the window `a * p + b` of the coordinate-ramp scene at
/// `size x size`: channels are (scene x, scene y, 0.5) at cell centers.
fn render_view(id: String, a: f64, b: (f64, f64), size: usize) -> Result<ImageRecord> {
    let mut pixels = Array3::zeros((size, size, 3));
    for row in 0..size {
        for col in 0..size {
            let x = (col as f64 + 0.5) / size as f64;
            let y = (row as f64 + 0.5) / size as f64;
            pixels[[row, col, 0]] = a * x + b.0;
            pixels[[row, col, 1]] = a * y + b.1;
            pixels[[row, col, 2]] = 0.5;
        }
    }
    ImageRecord::new(id, pixels, (size, size))
}

/// Build `n_pairs` synthetic correspondence pairs, each with
/// `kps_per_pair` keypoints on a `size x size` raster. Fully determined by
/// `seed`.
pub fn synthetic_dataset(
    seed: u64,
    n_pairs: usize,
    kps_per_pair: usize,
    size: usize,
) -> Result<Vec<CorrespondencePair>> {
    let mut pairs = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synthetic-pair", k as u64));
        let a = 0.8 + 0.15 * uniform(&mut rng);
        let b = ((1.0 - a) * uniform(&mut rng), (1.0 - a) * uniform(&mut rng));

        let source = render_view(format!("syn-{k:03}-src"), 1.0, (0.0, 0.0), size)?;
        let target = render_view(format!("syn-{k:03}-tgt"), a, b, size)?;

        let mut keypoints = Vec::with_capacity(kps_per_pair);
        for i in 0..kps_per_pair {
            // Choose the target point first and map it back through the
            // zoom, so both sides are guaranteed to stay inside the frame.
            let tx = 0.05 + 0.9 * uniform(&mut rng);
            let ty = 0.05 + 0.9 * uniform(&mut rng);
            keypoints.push(Keypoint {
                source: Point::new(a * tx + b.0, a * ty + b.1)?,
                target: Point::new(tx, ty)?,
                id: format!("kp{i}"),
            });
        }

        let pair = CorrespondencePair {
            bbox_source: keypoint_extent(keypoints.iter().map(|kp| kp.source)),
            bbox_target: keypoint_extent(keypoints.iter().map(|kp| kp.target)),
            source: ImageHandle::from_record(source),
            target: ImageHandle::from_record(target),
            keypoints,
            class_name: CLASS_CYCLE[k % CLASS_CYCLE.len()].to_string(),
            split: Split::Test,
        };
        pair.validate()?;
        pairs.push(pair);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_validates() {
        let a = synthetic_dataset(7, 5, 3, 32).unwrap();
        let b = synthetic_dataset(7, 5, 3, 32).unwrap();
        assert_eq!(a.len(), 5);
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.source.id, pb.source.id);
            assert_eq!(pa.keypoints.len(), 3);
            for (ka, kb) in pa.keypoints.iter().zip(&pb.keypoints) {
                assert_eq!(ka.source, kb.source);
                assert_eq!(ka.target, kb.target);
            }
            assert_eq!(
                pa.source.load().unwrap().pixels,
                pb.source.load().unwrap().pixels
            );
        }
        let c = synthetic_dataset(8, 5, 3, 32).unwrap();
        assert_ne!(a[0].keypoints[0].source, c[0].keypoints[0].source);
    }

    #[test]
    fn target_pixels_encode_the_warped_scene_coordinates() {
        let pairs = synthetic_dataset(3, 1, 2, 48).unwrap();
        let pair = &pairs[0];
        let src = pair.source.load().unwrap();
        let tgt = pair.target.load().unwrap();

        // The source is the identity ramp.
        assert!((src.pixels[[10, 30, 0]] - 30.5 / 48.0).abs() < 1e-12);
        assert!((src.pixels[[10, 30, 1]] - 10.5 / 48.0).abs() < 1e-12);

        // Recover (a, b) from two target cells and check the keypoints obey
        // source = a * target + b on both axes.
        let x0 = tgt.pixels[[0, 0, 0]];
        let x1 = tgt.pixels[[0, 47, 0]];
        let a = (x1 - x0) / (47.0 / 48.0);
        let bx = x0 - a * (0.5 / 48.0);
        let by = tgt.pixels[[0, 0, 1]] - a * (0.5 / 48.0);
        assert!((0.8..=0.95).contains(&a));
        for kp in &pair.keypoints {
            assert!((kp.source.x - (a * kp.target.x + bx)).abs() < 1e-9);
            assert!((kp.source.y - (a * kp.target.y + by)).abs() < 1e-9);
        }
    }

    #[test]
    fn classes_cycle_across_pairs() {
        let pairs = synthetic_dataset(0, 7, 1, 16).unwrap();
        let classes: Vec<&str> = pairs.iter().map(|p| p.class_name.as_str()).collect();
        assert_eq!(
            classes,
            ["zoom-a", "zoom-b", "zoom-c", "zoom-a", "zoom-b", "zoom-c", "zoom-a"]
        );
    }

    #[test]
    fn keypoints_and_boxes_stay_inside_the_frame() {
        for seed in 0..5 {
            for pair in synthetic_dataset(seed, 4, 6, 24).unwrap() {
                pair.validate().unwrap();
                let bbox = pair.bbox_target.unwrap();
                assert!(bbox.x0 >= 0.0 && bbox.x1 <= 1.0 && bbox.y0 >= 0.0 && bbox.y1 <= 1.0);
            }
        }
    }
}
