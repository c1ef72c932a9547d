//! SPair-71k loader.
//!
//! Consumes the published layout: `PairAnnotation/<trn|val|test>/<pair>.json`
//! records carrying image names, index-aligned keypoint arrays, and
//! bounding boxes, with rasters under `JPEGImages/<category>/`. Image sizes
//! are read from the JPEG headers, so loading annotations never decodes
//! pixel data.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::{
    cached_image_size, keypoint_from_pixels, rect_from_pixels, CorrespondencePair, ImageHandle,
    Keypoint, Split,
};
use crate::error::{Error, Result};

fn split_dir(split: Split) -> &'static str {
    match split {
        Split::Train => "trn",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn record_error(record: &str, message: String) -> Error {
    Error::DatasetRecord { record: record.to_string(), message }
}

fn field<'a>(record: &str, value: &'a Value, key: &str) -> Result<&'a Value> {
    value
        .get(key)
        .ok_or_else(|| record_error(record, format!("missing key '{key}'")))
}

fn str_field(record: &str, value: &Value, key: &str) -> Result<String> {
    field(record, value, key)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| record_error(record, format!("key '{key}' is not a string")))
}

/// A keypoint array: `[[x, y], ...]` with numeric entries.
fn kps_field(record: &str, value: &Value, key: &str) -> Result<Vec<(f64, f64)>> {
    let rows = field(record, value, key)?
        .as_array()
        .ok_or_else(|| record_error(record, format!("key '{key}' is not an array")))?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let pair = row.as_array().and_then(|xy| {
            let x = xy.first()?.as_f64()?;
            let y = xy.get(1)?.as_f64()?;
            Some((x, y))
        });
        match pair {
            Some(p) => out.push(p),
            None => {
                return Err(record_error(
                    record,
                    format!("entry {i} of '{key}' is not an [x, y] pair"),
                ))
            }
        }
    }
    Ok(out)
}

fn bbox_field(record: &str, value: &Value, key: &str) -> Result<[f64; 4]> {
    let arr = field(record, value, key)?
        .as_array()
        .filter(|a| a.len() == 4)
        .ok_or_else(|| record_error(record, format!("key '{key}' is not a 4-element box")))?;
    let mut out = [0.0; 4];
    for (slot, v) in out.iter_mut().zip(arr) {
        *slot = v
            .as_f64()
            .ok_or_else(|| record_error(record, format!("key '{key}' holds a non-number")))?;
    }
    Ok(out)
}

/// Keypoint labels from `kps_ids` when present and aligned; indices
/// otherwise.
fn keypoint_ids(value: &Value, n: usize) -> Vec<String> {
    let from_record = value.get("kps_ids").and_then(Value::as_array).and_then(|ids| {
        if ids.len() != n {
            return None;
        }
        ids.iter()
            .map(|v| match v {
                Value::Number(num) => Some(num.to_string()),
                Value::String(s) => Some(s.clone()),
                _ => None,
            })
            .collect::<Option<Vec<String>>>()
    });
    from_record.unwrap_or_else(|| (0..n).map(|i| i.to_string()).collect())
}

fn parse_pair(
    root: &Path,
    path: &Path,
    split: Split,
    sizes: &mut HashMap<PathBuf, (usize, usize)>,
) -> Result<CorrespondencePair> {
    let record = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::file(path, format!("invalid JSON: {e}")))?;

    let category = str_field(&record, &value, "category")?;
    let src_name = str_field(&record, &value, "src_imname")?;
    let trg_name = str_field(&record, &value, "trg_imname")?;
    let src_path = root.join("JPEGImages").join(&category).join(&src_name);
    let trg_path = root.join("JPEGImages").join(&category).join(&trg_name);
    let src_size = cached_image_size(sizes, &src_path)?;
    let trg_size = cached_image_size(sizes, &trg_path)?;

    let src_kps = kps_field(&record, &value, "src_kps")?;
    let trg_kps = kps_field(&record, &value, "trg_kps")?;
    if src_kps.len() != trg_kps.len() {
        return Err(record_error(
            &record,
            format!(
                "src_kps has {} entries but trg_kps has {}",
                src_kps.len(),
                trg_kps.len()
            ),
        ));
    }
    if src_kps.is_empty() {
        return Err(record_error(&record, "pair has no keypoints".into()));
    }

    let ids = keypoint_ids(&value, src_kps.len());
    let mut keypoints = Vec::with_capacity(src_kps.len());
    for ((id, s), t) in ids.into_iter().zip(src_kps).zip(trg_kps) {
        keypoints.push(Keypoint {
            source: keypoint_from_pixels(&record, &id, s.0, s.1, src_size)?,
            target: keypoint_from_pixels(&record, &id, t.0, t.1, trg_size)?,
            id,
        });
    }

    let bbox_source = rect_from_pixels(&record, bbox_field(&record, &value, "src_bndbox")?, src_size)?;
    let bbox_target = rect_from_pixels(&record, bbox_field(&record, &value, "trg_bndbox")?, trg_size)?;

    let pair = CorrespondencePair {
        source: ImageHandle::from_file(format!("{category}/{src_name}"), src_path, src_size),
        target: ImageHandle::from_file(format!("{category}/{trg_name}"), trg_path, trg_size),
        keypoints,
        class_name: category,
        bbox_source: Some(bbox_source),
        bbox_target: Some(bbox_target),
        split,
    };
    pair.validate()?;
    Ok(pair)
}

/// Load one SPair-71k split, sorted by class and then pair id.
pub fn load_spair(root: &Path, split: Split) -> Result<Vec<CorrespondencePair>> {
    let dir = root.join("PairAnnotation").join(split_dir(split));
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    files.sort();

    let mut sizes = HashMap::new();
    let mut pairs = Vec::with_capacity(files.len());
    for path in &files {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        pairs.push((stem, parse_pair(root, path, split, &mut sizes)?));
    }
    pairs.sort_by(|(sa, pa), (sb, pb)| pa.class_name.cmp(&pb.class_name).then(sa.cmp(sb)));
    Ok(pairs.into_iter().map(|(_, pair)| pair).collect())
}
