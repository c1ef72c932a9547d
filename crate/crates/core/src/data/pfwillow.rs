//! PF-Willow loader.
//!
//! The distribution ships a single `test_pairs_pf.csv`: two image paths per
//! row followed by forty numbers (source X1..X10, source Y1..Y10, target
//! X1..X10, target Y1..Y10). Sub-class directories like `car(G)` collapse to
//! their base name, giving the four classes. The annotations carry no
//! bounding boxes, so each side gets the tight box around its keypoints.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::{
    cached_image_size, keypoint_extent, keypoint_from_pixels, CorrespondencePair, ImageHandle,
    Keypoint, Split,
};
use crate::error::{Error, Result};

const KPS_PER_IMAGE: usize = 10;
const COLUMNS: usize = 2 + 4 * KPS_PER_IMAGE;

/// Join a csv-relative path onto the root, tolerating roots that either
/// contain or already are the distribution's `PF-dataset` directory.
fn resolve_image(root: &Path, rel: &str) -> Result<PathBuf> {
    let direct = root.join(rel);
    if direct.exists() {
        return Ok(direct);
    }
    if let Some((_, rest)) = rel.split_once('/') {
        let stripped = root.join(rest);
        if stripped.exists() {
            return Ok(stripped);
        }
    }
    Err(Error::file(
        &direct,
        "image not found (also tried without the leading directory)".to_string(),
    ))
}

/// `car(G)/image001.png` from a csv path, however deep it nests.
fn image_id(rel: &str) -> String {
    let parts: Vec<&str> = rel.split('/').filter(|s| !s.is_empty()).collect();
    match parts.as_slice() {
        [.., dir, file] => format!("{dir}/{file}"),
        [file] => (*file).to_string(),
        [] => rel.to_string(),
    }
}

/// The class is the sub-class directory name up to its qualifier: the
/// directory `car(G)` annotates class `car`.
fn class_of(record: &str, rel: &str) -> Result<String> {
    let parts: Vec<&str> = rel.split('/').filter(|s| !s.is_empty()).collect();
    let dir = match parts.as_slice() {
        [.., dir, _file] => *dir,
        _ => {
            return Err(Error::DatasetRecord {
                record: record.to_string(),
                message: format!("image path '{rel}' has no class directory"),
            })
        }
    };
    let base = dir.split('(').next().unwrap_or(dir);
    if base.is_empty() {
        return Err(Error::DatasetRecord {
            record: record.to_string(),
            message: format!("image path '{rel}' has an empty class name"),
        });
    }
    Ok(base.to_string())
}

fn parse_row(
    root: &Path,
    record: &str,
    fields: &[&str],
    sizes: &mut HashMap<PathBuf, (usize, usize)>,
) -> Result<CorrespondencePair> {
    let mut nums = [0.0; COLUMNS - 2];
    for (slot, raw) in nums.iter_mut().zip(&fields[2..]) {
        *slot = raw.trim().parse::<f64>().map_err(|_| Error::DatasetRecord {
            record: record.to_string(),
            message: format!("non-numeric keypoint field '{}'", raw.trim()),
        })?;
    }

    let src_rel = fields[0].trim();
    let trg_rel = fields[1].trim();
    let src_path = resolve_image(root, src_rel)?;
    let trg_path = resolve_image(root, trg_rel)?;
    let src_size = cached_image_size(sizes, &src_path)?;
    let trg_size = cached_image_size(sizes, &trg_path)?;

    let mut keypoints = Vec::with_capacity(KPS_PER_IMAGE);
    for i in 0..KPS_PER_IMAGE {
        let id = i.to_string();
        keypoints.push(Keypoint {
            source: keypoint_from_pixels(record, &id, nums[i], nums[KPS_PER_IMAGE + i], src_size)?,
            target: keypoint_from_pixels(
                record,
                &id,
                nums[2 * KPS_PER_IMAGE + i],
                nums[3 * KPS_PER_IMAGE + i],
                trg_size,
            )?,
            id,
        });
    }

    let pair = CorrespondencePair {
        bbox_source: keypoint_extent(keypoints.iter().map(|kp| kp.source)),
        bbox_target: keypoint_extent(keypoints.iter().map(|kp| kp.target)),
        source: ImageHandle::from_file(image_id(src_rel), src_path, src_size),
        target: ImageHandle::from_file(image_id(trg_rel), trg_path, trg_size),
        class_name: class_of(record, src_rel)?,
        keypoints,
        split: Split::Test,
    };
    pair.validate()?;
    Ok(pair)
}

/// Load the PF-Willow test set, sorted by class and then csv row order.
pub fn load_pfwillow(root: &Path) -> Result<Vec<CorrespondencePair>> {
    let csv = root.join("test_pairs_pf.csv");
    let text = std::fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?;

    let mut sizes = HashMap::new();
    let mut rows: Vec<(usize, CorrespondencePair)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        // The first line is a header when its keypoint columns are not
        // numeric.
        if lineno == 0 && fields.get(2).is_some_and(|f| f.trim().parse::<f64>().is_err()) {
            continue;
        }
        let record = format!("{}:{}", csv.display(), lineno + 1);
        if fields.len() != COLUMNS {
            return Err(Error::DatasetRecord {
                record,
                message: format!("expected {COLUMNS} columns, found {}", fields.len()),
            });
        }
        rows.push((lineno, parse_row(root, &record, &fields, &mut sizes)?));
    }
    rows.sort_by(|(la, pa), (lb, pb)| pa.class_name.cmp(&pb.class_name).then(la.cmp(lb)));
    Ok(rows.into_iter().map(|(_, pair)| pair).collect())
}
