//! `t1moco eval`: scores a correction against ground truth. The baseline
//! report evaluates the ground-truth masks as they are (they move with the
//! uncorrected frames); the corrected report moves each frame's mask by the
//! correction field saved next to the corrected series, recomputing folding
//! counts from those fields at container precision. Solve times are taken
//! from the corrected directory's `timing.json` when present.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;
use serde_json::json;
use t1moco_core::eval::{eval_frames, evaluate_baseline, EvalReport};
use t1moco_core::image::LabelMask;
use t1moco_core::io::load_field;
use t1moco_core::phantom::LABEL_MYOCARDIUM;
use t1moco_core::series::{load_manifest, load_truth};
use t1moco_core::warp::{folding_count, warp_labels};

use crate::commands::frame_tag;
use crate::error::CliError;
use crate::jsonio::{write_json, write_text};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Uncorrected series directory (supplies the reference index).
    #[arg(long)]
    pub before: PathBuf,
    /// Corrected series directory (output of `correct`).
    #[arg(long)]
    pub after: PathBuf,
    /// Ground-truth directory (a series directory with ground truth).
    #[arg(long)]
    pub gt: PathBuf,
    /// Output CSV report path; a JSON mirror and a config echo are written
    /// next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Deserialize)]
struct Timing {
    #[serde(default)]
    per_frame_seconds: Vec<f64>,
}

fn load_seconds(after: &Path, frames: usize) -> Vec<f64> {
    let path = after.join("timing.json");
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(t) = serde_json::from_str::<Timing>(&text) {
            if t.per_frame_seconds.len() == frames {
                return t.per_frame_seconds;
            }
        }
    }
    vec![0.0; frames]
}

/// Scores the corrected directory's fields against ground-truth masks.
pub fn corrected_report(
    after: &Path,
    gt_masks: &[LabelMask],
    reference_index: usize,
) -> Result<EvalReport, CliError> {
    let mut masks = Vec::with_capacity(gt_masks.len());
    let mut foldings = Vec::with_capacity(gt_masks.len());
    for (i, mask) in gt_masks.iter().enumerate() {
        let field = load_field(after.join(format!("field_{}.t1m", frame_tag(i))))?;
        foldings.push(folding_count(&field)?);
        masks.push(warp_labels(mask, &field));
    }
    let seconds = load_seconds(after, gt_masks.len());
    Ok(eval_frames(
        "corrected",
        &masks,
        reference_index,
        LABEL_MYOCARDIUM,
        &foldings,
        &seconds,
    )?)
}

/// Sibling path with the extension replaced (e.g. report.csv -> report.json).
fn sibling(out: &Path, extension: &str) -> PathBuf {
    out.with_extension(extension)
}

pub fn run(args: &EvalArgs) -> Result<(), CliError> {
    let before_manifest = load_manifest(&args.before)?;
    let truth = load_truth(&args.gt)?.ok_or_else(|| {
        CliError::Config(format!(
            "{} holds no ground truth; point --gt at a directory whose manifest lists ground_truth",
            args.gt.display()
        ))
    })?;
    let after_manifest = load_manifest(&args.after)?;
    let reference_index = before_manifest.reference_index;
    if after_manifest.frames.len() != truth.masks.len() {
        return Err(CliError::Config(format!(
            "frame count mismatch: {} corrected frames vs {} ground-truth masks",
            after_manifest.frames.len(),
            truth.masks.len()
        )));
    }

    let before = evaluate_baseline(
        "uncorrected",
        &truth.masks,
        reference_index,
        LABEL_MYOCARDIUM,
    )?;
    let after = corrected_report(&args.after, &truth.masks, reference_index)?;

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Io(format!("creating {}: {e}", parent.display())))?;
        }
    }
    let mut csv = String::from(EvalReport::CSV_HEADER);
    csv.push('\n');
    csv.push_str(&before.csv_rows());
    csv.push_str(&after.csv_rows());
    write_text(&args.out, &csv)?;
    write_json(&sibling(&args.out, "json"), &json!({ "before": before, "after": after }))?;
    write_json(
        &sibling(&args.out, "config.json"),
        &json!({
            "io": { "before": args.before, "after": args.after, "gt": args.gt, "out": args.out }
        }),
    )?;
    crate::outln!(
        "uncorrected: dsc={:.4} hd_endo={:.3} hd_epi={:.3}",
        before.dsc, before.hd_endo, before.hd_epi
    );
    crate::outln!(
        "corrected:   dsc={:.4} hd_endo={:.3} hd_epi={:.3} folding_mean={:.2}",
        after.dsc, after.hd_endo, after.hd_epi, after.folding_mean
    );
    Ok(())
}
