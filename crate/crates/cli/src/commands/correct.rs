//! `t1moco correct`: registers every frame of a series to its reference
//! frame and writes the corrected series, the per-frame correction fields,
//! loss traces, and a summary. All artifacts except `timing.json` are
//! bit-reproducible for a fixed config and seed.

use std::path::PathBuf;

use clap::Args;
use serde_json::json;
use t1moco_core::eval::full_correction_field;
use t1moco_core::field::DisplacementField;
use t1moco_core::io::{export_csv, save_field};
use t1moco_core::optimizer::{motion_correct_series, FrameStatus};
use t1moco_core::series::{load_series, save_series};

use crate::commands::{ensure_dir, frame_tag};
use crate::commands::register::{summary_value, trace_table};
use crate::config::{self, IoSection, RunConfig, SolveOverrides};
use crate::error::CliError;
use crate::jsonio::write_json;

#[derive(Debug, Args)]
pub struct CorrectArgs {
    /// Input series directory (manifest.json + frame tensors).
    #[arg(long)]
    pub series: Option<PathBuf>,
    /// JSON config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: SolveOverrides,
}

pub fn run(args: &CorrectArgs) -> Result<(), CliError> {
    let rc = RunConfig::load(args.config.as_deref())?;
    let cfg = rc.resolve_solve(&args.overrides)?;
    let series_dir = rc.resolve_path(args.series.as_ref(), |io| io.series.as_ref(), "--series")?;
    let out = rc.resolve_path(args.out.as_ref(), |io| io.out.as_ref(), "--out")?;

    let series = load_series(&series_dir)?;
    let correction = motion_correct_series(&series, &cfg)?;

    ensure_dir(&out)?;
    save_series(&out, &correction.corrected, None, Some(cfg.seed))?;

    let mut frame_summaries = Vec::with_capacity(correction.frames.len());
    let mut per_frame_seconds = Vec::with_capacity(correction.frames.len());
    let mut failures: Vec<String> = Vec::new();
    for (i, status) in correction.frames.iter().enumerate() {
        let tag = frame_tag(i);
        let (field, summary, seconds) = match status {
            FrameStatus::Reference => (
                DisplacementField::zeros(series.width(), series.height())?,
                json!({ "frame": i, "status": "reference" }),
                0.0,
            ),
            FrameStatus::Registered(result) => {
                export_csv(out.join(format!("trace_{tag}.csv")), &trace_table(result))?;
                let mut summary = summary_value(result);
                summary["frame"] = json!(i);
                summary["status"] = json!("registered");
                (
                    full_correction_field(&result.affine, &result.field_xy)?,
                    summary,
                    result.seconds,
                )
            }
            FrameStatus::Failed(message) => {
                failures.push(format!("frame {i}: {message}"));
                (
                    DisplacementField::zeros(series.width(), series.height())?,
                    json!({ "frame": i, "status": "failed", "error": message }),
                    0.0,
                )
            }
        };
        save_field(out.join(format!("field_{tag}.t1m")), &field)?;
        frame_summaries.push(summary);
        per_frame_seconds.push(seconds);
    }

    write_json(
        &out.join("summary.json"),
        &json!({
            "reference_index": series.reference_index(),
            "num_frames": correction.frames.len(),
            "failed_frames": failures.len(),
            "frames": frame_summaries,
        }),
    )?;
    write_json(
        &out.join("timing.json"),
        &json!({
            "total_seconds": per_frame_seconds.iter().sum::<f64>(),
            "per_frame_seconds": per_frame_seconds,
        }),
    )?;
    config::write_echo(
        &out,
        &config::echo(
            &cfg,
            IoSection {
                series: Some(series_dir),
                out: Some(out.clone()),
                ..IoSection::default()
            },
        ),
    )?;

    if failures.is_empty() {
        crate::outln!(
            "corrected {} frames -> {}",
            correction.frames.len(),
            out.display()
        );
        Ok(())
    } else {
        Err(CliError::Compute(format!(
            "{} of {} frames failed to register ({}); outputs for the remaining frames were written to {}",
            failures.len(),
            correction.frames.len(),
            failures.join("; "),
            out.display()
        )))
    }
}
