//! CUB-200-2011 loader.
//!
//! The distribution is a set of whitespace-delimited index files
//! (`images.txt`, `classes.txt`, `image_class_labels.txt`,
//! `train_test_split.txt`, `parts/part_locs.txt`, `bounding_boxes.txt`)
//! over rasters in `images/`. Evaluation pairs every test image of a class
//! with every other (unordered, ordered by image id), keeping the parts
//! marked visible in both images of a pair.

use std::collections::HashMap;
use std::path::Path;

use super::{
    cached_image_size, keypoint_from_pixels, rect_from_pixels, CorrespondencePair, ImageHandle,
    Keypoint, Split,
};
use crate::error::{Error, Result};

/// Parse one index file, handing each non-empty line's whitespace-split
/// fields to `parse` along with a `file:line` record name.
fn read_index<T>(
    path: &Path,
    n_fields: usize,
    mut parse: impl FnMut(&str, &[&str]) -> Result<T>,
) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = format!("{}:{}", path.display(), lineno + 1);
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != n_fields {
            return Err(Error::DatasetRecord {
                record,
                message: format!("expected {n_fields} fields, found {}", fields.len()),
            });
        }
        out.push(parse(&record, &fields)?);
    }
    Ok(out)
}

fn parse_u64(record: &str, raw: &str, what: &str) -> Result<u64> {
    raw.parse().map_err(|_| Error::DatasetRecord {
        record: record.to_string(),
        message: format!("{what} '{raw}' is not an integer"),
    })
}

fn parse_f64(record: &str, raw: &str, what: &str) -> Result<f64> {
    raw.parse().map_err(|_| Error::DatasetRecord {
        record: record.to_string(),
        message: format!("{what} '{raw}' is not a number"),
    })
}

/// Load pairs for the first `n_classes` classes (canonical id order) of a
/// CUB-200-2011 root.
pub fn load_cub(root: &Path, n_classes: usize) -> Result<Vec<CorrespondencePair>> {
    let mut classes = read_index(&root.join("classes.txt"), 2, |rec, f| {
        Ok((parse_u64(rec, f[0], "class id")?, f[1].to_string()))
    })?;
    classes.sort_by_key(|(id, _)| *id);
    if n_classes > classes.len() {
        return Err(Error::InvalidInput(format!(
            "requested {n_classes} classes but classes.txt lists {}",
            classes.len()
        )));
    }
    let selected = &classes[..n_classes];

    let images: HashMap<u64, String> = read_index(&root.join("images.txt"), 2, |rec, f| {
        Ok((parse_u64(rec, f[0], "image id")?, f[1].to_string()))
    })?
    .into_iter()
    .collect();

    let labels: HashMap<u64, u64> =
        read_index(&root.join("image_class_labels.txt"), 2, |rec, f| {
            Ok((parse_u64(rec, f[0], "image id")?, parse_u64(rec, f[1], "class id")?))
        })?
        .into_iter()
        .collect();

    let test_images: Vec<u64> = read_index(&root.join("train_test_split.txt"), 2, |rec, f| {
        Ok((parse_u64(rec, f[0], "image id")?, parse_u64(rec, f[1], "split flag")?))
    })?
    .into_iter()
    .filter_map(|(id, is_training)| (is_training == 0).then_some(id))
    .collect();

    // Visible parts only; invisible rows carry unusable coordinates.
    let mut parts: HashMap<u64, Vec<(u64, f64, f64)>> = HashMap::new();
    for (img, part, x, y, visible) in
        read_index(&root.join("parts/part_locs.txt"), 5, |rec, f| {
            Ok((
                parse_u64(rec, f[0], "image id")?,
                parse_u64(rec, f[1], "part id")?,
                parse_f64(rec, f[2], "x")?,
                parse_f64(rec, f[3], "y")?,
                parse_u64(rec, f[4], "visibility flag")?,
            ))
        })?
    {
        if visible == 1 {
            parts.entry(img).or_default().push((part, x, y));
        }
    }
    for list in parts.values_mut() {
        list.sort_by_key(|(part, _, _)| *part);
    }

    // Boxes are optional: absent file (or record) means no box.
    let mut boxes: HashMap<u64, [f64; 4]> = HashMap::new();
    let boxes_path = root.join("bounding_boxes.txt");
    if boxes_path.exists() {
        for (img, corners) in read_index(&boxes_path, 5, |rec, f| {
            let x = parse_f64(rec, f[1], "x")?;
            let y = parse_f64(rec, f[2], "y")?;
            let w = parse_f64(rec, f[3], "width")?;
            let h = parse_f64(rec, f[4], "height")?;
            Ok((parse_u64(rec, f[0], "image id")?, [x, y, x + w, y + h]))
        })? {
            boxes.insert(img, corners);
        }
    }

    let mut sizes = HashMap::new();
    let mut side = |img: u64| -> Result<(ImageHandle, (usize, usize))> {
        let rel = images.get(&img).ok_or_else(|| Error::DatasetRecord {
            record: "images.txt".to_string(),
            message: format!("image id {img} is missing"),
        })?;
        let path = root.join("images").join(rel);
        let size = cached_image_size(&mut sizes, &path)?;
        Ok((ImageHandle::from_file(rel.clone(), path, size), size))
    };

    let empty = Vec::new();
    let mut pairs = Vec::new();
    for (class_id, class_name) in selected {
        let mut members: Vec<u64> = test_images
            .iter()
            .copied()
            .filter(|img| labels.get(img) == Some(class_id))
            .collect();
        members.sort_unstable();

        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                let (source, src_size) = side(a)?;
                let (target, trg_size) = side(b)?;
                let parts_a = parts.get(&a).unwrap_or(&empty);
                let parts_b: HashMap<u64, (f64, f64)> = parts
                    .get(&b)
                    .unwrap_or(&empty)
                    .iter()
                    .map(|&(part, x, y)| (part, (x, y)))
                    .collect();

                let mut keypoints = Vec::new();
                for &(part, ax, ay) in parts_a {
                    let Some(&(bx, by)) = parts_b.get(&part) else { continue };
                    let record = format!("part_locs.txt (images {a} and {b})");
                    let id = part.to_string();
                    keypoints.push(Keypoint {
                        source: keypoint_from_pixels(&record, &id, ax, ay, src_size)?,
                        target: keypoint_from_pixels(&record, &id, bx, by, trg_size)?,
                        id,
                    });
                }

                let bbox_of = |img: u64, size: (usize, usize)| -> Result<Option<_>> {
                    boxes
                        .get(&img)
                        .map(|&c| rect_from_pixels(&format!("bounding_boxes.txt image {img}"), c, size))
                        .transpose()
                };
                let pair = CorrespondencePair {
                    bbox_source: bbox_of(a, src_size)?,
                    bbox_target: bbox_of(b, trg_size)?,
                    source,
                    target,
                    keypoints,
                    class_name: class_name.clone(),
                    split: Split::Test,
                };
                pair.validate()?;
                pairs.push(pair);
            }
        }
    }
    Ok(pairs)
}
