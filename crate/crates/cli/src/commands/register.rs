//! `t1moco register`: registers one moving image onto one fixed image and
//! writes the displacement fields, the moved image, and the loss trace.

use std::path::PathBuf;

use clap::Args;
use serde_json::json;
use t1moco_core::io::{export_csv, export_pgm, save_field, save_image, CsvTable};
use t1moco_core::optimizer::{register_frame, RegistrationResult};

use crate::commands::ensure_dir;
use crate::config::{self, IoSection, RunConfig, SolveOverrides};
use crate::error::CliError;
use crate::jsonio::write_json;

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// Moving image (.t1m image tensor).
    #[arg(long)]
    pub moving: Option<PathBuf>,
    /// Fixed image (.t1m image tensor).
    #[arg(long)]
    pub fixed: Option<PathBuf>,
    /// JSON config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: SolveOverrides,
}

/// Loss-trace CSV of one registration: one row per accepted step of the
/// deformable stage, tagged with its pyramid stage (0 = coarsest).
pub fn trace_table(result: &RegistrationResult) -> CsvTable {
    let mut table = CsvTable::new(&[
        "step",
        "stage",
        "sim_fwd",
        "sim_bwd",
        "sim_inv_fwd",
        "sim_inv_bwd",
        "dice_weak",
        "jdet",
        "smooth",
        "total",
    ]);
    let fmt = |v: f64| format!("{v:.12e}");
    for (i, row) in result.loss_trace.iter().enumerate() {
        let stage = result
            .level_starts
            .iter()
            .filter(|&&start| start <= i)
            .count()
            .saturating_sub(1);
        table.push_row(vec![
            i.to_string(),
            stage.to_string(),
            fmt(row.sim_fwd),
            fmt(row.sim_bwd),
            fmt(row.sim_inv_fwd),
            fmt(row.sim_inv_bwd),
            fmt(row.dice_weak),
            fmt(row.jdet),
            fmt(row.smooth),
            fmt(row.total),
        ]);
    }
    table
}

/// Timing-free registration summary (material for deterministic artifacts).
pub fn summary_value(result: &RegistrationResult) -> serde_json::Value {
    json!({
        "affine_theta": result.affine.theta,
        "folding": result.folding,
        "accepted_steps": result.loss_trace.len(),
        "level_starts": result.level_starts,
        "final_total_loss": result.loss_trace.last().map(|r| r.total),
    })
}

pub fn run(args: &RegisterArgs) -> Result<(), CliError> {
    let rc = RunConfig::load(args.config.as_deref())?;
    let cfg = rc.resolve_solve(&args.overrides)?;
    let moving_path = rc.resolve_path(args.moving.as_ref(), |io| io.moving.as_ref(), "--moving")?;
    let fixed_path = rc.resolve_path(args.fixed.as_ref(), |io| io.fixed.as_ref(), "--fixed")?;
    let out = rc.resolve_path(args.out.as_ref(), |io| io.out.as_ref(), "--out")?;

    let moving = t1moco_core::io::load_image(&moving_path)?;
    let fixed = t1moco_core::io::load_image(&fixed_path)?;
    let result = register_frame(&moving, &fixed, &cfg)?;

    ensure_dir(&out)?;
    save_field(out.join("field.t1m"), &result.field_xy)?;
    save_field(out.join("field_backward.t1m"), &result.field_yx)?;
    save_image(out.join("moved.t1m"), &result.moved)?;
    export_pgm(out.join("moved.pgm"), &result.moved)?;
    export_csv(out.join("trace.csv"), &trace_table(&result))?;
    write_json(&out.join("summary.json"), &summary_value(&result))?;
    write_json(&out.join("timing.json"), &json!({ "seconds": result.seconds }))?;
    config::write_echo(
        &out,
        &config::echo(
            &cfg,
            IoSection {
                moving: Some(moving_path),
                fixed: Some(fixed_path),
                out: Some(out.clone()),
                ..IoSection::default()
            },
        ),
    )?;
    crate::outln!(
        "registered: folding={} steps={} -> {}",
        result.folding,
        result.loss_trace.len(),
        out.display()
    );
    Ok(())
}
