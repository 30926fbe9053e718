//! `t1moco phantom`: renders a synthetic inversion-recovery series with
//! known motion and full ground truth into a series directory.

use std::path::PathBuf;

use clap::Args;
use serde_json::json;
use t1moco_core::phantom::{generate, PhantomSpec};
use t1moco_core::series::save_series;

use crate::commands::ensure_dir;
use crate::error::CliError;
use crate::jsonio::write_json;

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Output series directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Grid size as HEIGHTxWIDTH, e.g. 144x160.
    #[arg(long, default_value = "144x160")]
    pub size: String,
    /// Number of frames (inversion times span 100-3000 ms linearly).
    #[arg(long, default_value_t = 11)]
    pub frames: usize,
    /// Motion amplitude cap in pixels (0 = motionless).
    #[arg(long, default_value_t = 3.0)]
    pub motion: f64,
    /// Gaussian noise standard deviation as a fraction of the signal range.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Seed for motion and noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses "HxW" into (height, width).
fn parse_size(s: &str) -> Result<(usize, usize), CliError> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let bad = || CliError::Config(format!("--size must be HEIGHTxWIDTH, e.g. 144x160; got '{s}'"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let h: usize = parts[0].trim().parse().map_err(|_| bad())?;
    let w: usize = parts[1].trim().parse().map_err(|_| bad())?;
    Ok((h, w))
}

pub fn spec_from_args(args: &PhantomArgs) -> Result<PhantomSpec, CliError> {
    let (height, width) = parse_size(&args.size)?;
    if args.frames < 2 {
        return Err(CliError::Config(format!(
            "--frames must be at least 2, got {}",
            args.frames
        )));
    }
    let span = 2900.0 / (args.frames - 1) as f64;
    let spec = PhantomSpec {
        width,
        height,
        inversion_times_ms: (0..args.frames).map(|i| 100.0 + i as f64 * span).collect(),
        reference_index: args.frames - 1,
        ring_center: [width as f64 / 2.0, height as f64 / 2.0],
        motion_amplitude_px: args.motion,
        noise_sigma: args.noise,
        seed: args.seed,
        ..PhantomSpec::default()
    };
    spec.validate()?;
    Ok(spec)
}

pub fn run(args: &PhantomArgs) -> Result<(), CliError> {
    let spec = spec_from_args(args)?;
    let (series, truth) = generate(&spec)?;
    ensure_dir(&args.out)?;
    save_series(&args.out, &series, Some(&truth), Some(spec.seed))?;
    write_json(
        &args.out.join("config.json"),
        &json!({ "phantom": spec, "io": { "out": args.out } }),
    )?;
    crate::outln!(
        "wrote {} frames ({}x{}) with ground truth to {}",
        series.num_frames(),
        spec.height,
        spec.width,
        args.out.display()
    );
    Ok(())
}
