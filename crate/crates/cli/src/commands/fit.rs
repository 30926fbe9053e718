//! `t1moco fit`: per-pixel three-parameter T1 fitting of a series, writing
//! the recovered parameter maps plus a failure mask.

use std::path::PathBuf;

use clap::Args;
use serde_json::json;
use t1moco_core::io::{export_pgm, save_image, save_mask};
use t1moco_core::series::load_series;
use t1moco_core::t1fit::fit_t1;

use crate::commands::ensure_dir;
use crate::error::CliError;
use crate::jsonio::write_json;

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Input series directory (manifest.json + frame tensors).
    #[arg(long)]
    pub series: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &FitArgs) -> Result<(), CliError> {
    let series = load_series(&args.series)?;
    let fit = fit_t1(&series)?;

    ensure_dir(&args.out)?;
    save_image(args.out.join("t1_map.t1m"), &fit.t1_map)?;
    save_image(args.out.join("a_map.t1m"), &fit.a_map)?;
    save_image(args.out.join("b_map.t1m"), &fit.b_map)?;
    save_image(args.out.join("residual_map.t1m"), &fit.residual_map)?;
    save_mask(args.out.join("fail_mask.t1m"), &fit.fail_mask)?;
    export_pgm(args.out.join("t1_map.pgm"), &fit.t1_map)?;

    let failed = fit.fail_mask.count(1);
    write_json(
        &args.out.join("summary.json"),
        &json!({
            "frames": series.num_frames(),
            "pixels": fit.t1_map.width() * fit.t1_map.height(),
            "failed_pixels": failed,
        }),
    )?;
    write_json(
        &args.out.join("config.json"),
        &json!({ "io": { "series": args.series, "out": args.out } }),
    )?;
    crate::outln!(
        "fitted {} pixels ({} failed) -> {}",
        fit.t1_map.width() * fit.t1_map.height(),
        failed,
        args.out.display()
    );
    Ok(())
}
