//! On-disk layout for an image series: a directory of tensor files plus a
//! `manifest.json` naming them, the inversion times, the reference frame,
//! and (optionally) the ground truth that accompanies a synthetic series.
//!
//! All content files are written with the deterministic tensor container,
//! and the manifest field order is fixed, so regenerating identical data
//! produces byte-identical directories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::IoError;
use crate::image::T1Series;
use crate::io::{load_field, load_image, load_mask, save_field, save_image, save_mask};
use crate::phantom::PhantomTruth;

pub const MANIFEST_NAME: &str = "manifest.json";

/// Relative paths of one series' ground-truth files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TruthPaths {
    pub t1_map: String,
    pub fields: Vec<String>,
    pub masks: Vec<String>,
}

/// `manifest.json`: everything needed to reload the directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SeriesManifest {
    pub inversion_times_ms: Vec<f64>,
    pub reference_index: usize,
    /// Relative paths of the frame tensors, one per inversion time.
    pub frames: Vec<String>,
    /// Seed the series was generated from, when synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<TruthPaths>,
}

fn manifest_err(e: impl std::fmt::Display) -> IoError {
    IoError::Manifest(e.to_string())
}

/// Writes the series (and optional ground truth) into `dir`, creating it.
pub fn save_series(
    dir: impl AsRef<Path>,
    series: &T1Series,
    truth: Option<&PhantomTruth>,
    seed: Option<u64>,
) -> Result<SeriesManifest, IoError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut frames = Vec::with_capacity(series.num_frames());
    for (i, frame) in series.frames().iter().enumerate() {
        let name = format!("frame_{i:02}.t1m");
        save_image(dir.join(&name), frame)?;
        frames.push(name);
    }
    let ground_truth = match truth {
        Some(t) => {
            let gt_dir = dir.join("gt");
            fs::create_dir_all(&gt_dir)?;
            save_image(gt_dir.join("t1_map.t1m"), &t.t1_map)?;
            let mut fields = Vec::with_capacity(t.fields.len());
            let mut masks = Vec::with_capacity(t.masks.len());
            for (i, field) in t.fields.iter().enumerate() {
                let name = format!("gt/field_{i:02}.t1m");
                save_field(dir.join(&name), field)?;
                fields.push(name);
            }
            for (i, mask) in t.masks.iter().enumerate() {
                let name = format!("gt/mask_{i:02}.t1m");
                save_mask(dir.join(&name), mask)?;
                masks.push(name);
            }
            Some(TruthPaths {
                t1_map: "gt/t1_map.t1m".to_string(),
                fields,
                masks,
            })
        }
        None => None,
    };
    let manifest = SeriesManifest {
        inversion_times_ms: series.inversion_times_ms().to_vec(),
        reference_index: series.reference_index(),
        frames,
        seed,
        ground_truth,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(manifest_err)?;
    fs::write(dir.join(MANIFEST_NAME), json + "\n")?;
    Ok(manifest)
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<SeriesManifest, IoError> {
    let text = fs::read_to_string(dir.as_ref().join(MANIFEST_NAME))?;
    serde_json::from_str(&text).map_err(manifest_err)
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}

/// Reloads the series named by the directory's manifest.
pub fn load_series(dir: impl AsRef<Path>) -> Result<T1Series, IoError> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    if manifest.frames.len() != manifest.inversion_times_ms.len() {
        return Err(IoError::Manifest(format!(
            "{} frame files but {} inversion times",
            manifest.frames.len(),
            manifest.inversion_times_ms.len()
        )));
    }
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for rel in &manifest.frames {
        frames.push(load_image(resolve(dir, rel))?);
    }
    T1Series::new(
        frames,
        manifest.inversion_times_ms.clone(),
        manifest.reference_index,
    )
    .map_err(manifest_err)
}

/// Reloads the ground truth, when the manifest declares one.
pub fn load_truth(dir: impl AsRef<Path>) -> Result<Option<PhantomTruth>, IoError> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    let Some(paths) = manifest.ground_truth else {
        return Ok(None);
    };
    if paths.fields.len() != manifest.frames.len() || paths.masks.len() != manifest.frames.len() {
        return Err(IoError::Manifest(format!(
            "ground truth lists {} fields and {} masks for {} frames",
            paths.fields.len(),
            paths.masks.len(),
            manifest.frames.len()
        )));
    }
    let t1_map = load_image(resolve(dir, &paths.t1_map))?;
    let mut fields = Vec::with_capacity(paths.fields.len());
    for rel in &paths.fields {
        fields.push(load_field(resolve(dir, rel))?);
    }
    let mut masks = Vec::with_capacity(paths.masks.len());
    for rel in &paths.masks {
        masks.push(load_mask(resolve(dir, rel))?);
    }
    Ok(Some(PhantomTruth {
        t1_map,
        fields,
        masks,
    }))
}
