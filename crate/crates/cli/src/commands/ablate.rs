//! `t1moco ablate`: sweeps similarity metrics against anti-folding weights
//! on one ground-truthed series and emits a comparison table. The default
//! grid crosses every registered metric (the four single metrics plus their
//! weighted combination) with the anti-folding weight on and off.

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;
use t1moco_core::eval::{evaluate_baseline, evaluate_correction, EvalReport};
use t1moco_core::io::{csv_float, export_csv, CsvTable};
use t1moco_core::metrics::MetricRegistry;
use t1moco_core::optimizer::{motion_correct_series, FrameStatus};
use t1moco_core::phantom::LABEL_MYOCARDIUM;
use t1moco_core::series::{load_series, load_truth};

use crate::commands::ensure_dir;
use crate::config::{self, IoSection, RunConfig, SolveOverrides};
use crate::error::CliError;
use crate::jsonio::{read_json, write_json};

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Ground-truthed series directory to sweep on.
    #[arg(long)]
    pub series: Option<PathBuf>,
    /// Sweep grid JSON ({"metrics": [...], "lambda1": [...]}); defaults to
    /// all metrics crossed with lambda1 in {0, 1000}.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// JSON config file for the base solver settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: SolveOverrides,
}

/// The sweep: every metric crossed with every anti-folding weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub metrics: Vec<String>,
    pub lambda1: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            metrics: vec![
                "ncc".into(),
                "mi".into(),
                "ngf".into(),
                "mind".into(),
                "weighted".into(),
            ],
            lambda1: vec![0.0, 1000.0],
        }
    }
}

impl GridSpec {
    fn validate(&self) -> Result<(), CliError> {
        if self.metrics.is_empty() || self.lambda1.is_empty() {
            return Err(CliError::Config(
                "grid needs at least one metric and one lambda1 value".into(),
            ));
        }
        let known = MetricRegistry::with_builtins().names();
        for name in &self.metrics {
            if !known.contains(&name.as_str()) {
                return Err(CliError::Config(format!(
                    "unknown metric '{name}' in grid; known: {}",
                    known.join(", ")
                )));
            }
        }
        if self.lambda1.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CliError::Config(
                "grid lambda1 values must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct AblateRun {
    metric: String,
    lambda1: f64,
    failed_frames: usize,
    report: EvalReport,
}

pub fn run(args: &AblateArgs) -> Result<(), CliError> {
    let rc = RunConfig::load(args.config.as_deref())?;
    let base = rc.resolve_solve(&args.overrides)?;
    let series_dir = rc.resolve_path(args.series.as_ref(), |io| io.series.as_ref(), "--series")?;
    let out = rc.resolve_path(args.out.as_ref(), |io| io.out.as_ref(), "--out")?;
    let grid = match &args.grid {
        Some(path) => read_json::<GridSpec>(path)?,
        None => GridSpec::default(),
    };
    grid.validate()?;

    let series = load_series(&series_dir)?;
    let truth = load_truth(&series_dir)?.ok_or_else(|| {
        CliError::Config(format!(
            "{} holds no ground truth; the sweep needs per-frame masks to score against",
            series_dir.display()
        ))
    })?;
    let reference_index = series.reference_index();
    let baseline = evaluate_baseline(
        "uncorrected",
        &truth.masks,
        reference_index,
        LABEL_MYOCARDIUM,
    )?;

    let mut runs: Vec<AblateRun> = Vec::new();
    for metric in &grid.metrics {
        for &lambda1 in &grid.lambda1 {
            let mut cfg = base.clone();
            cfg.metric = metric.clone();
            cfg.loss_weights.lambda1 = lambda1;
            cfg.validate()?;
            let correction = motion_correct_series(&series, &cfg)?;
            let failed_frames = correction
                .frames
                .iter()
                .filter(|s| matches!(s, FrameStatus::Failed(_)))
                .count();
            let method = format!("{metric}/lambda1={}", csv_float(lambda1));
            let report = evaluate_correction(
                &method,
                &truth.masks,
                &correction,
                reference_index,
                LABEL_MYOCARDIUM,
            )?;
            crate::outln!(
                "{method}: dsc={:.4} hd_endo={:.3} hd_epi={:.3} folding_mean={:.2}",
                report.dsc, report.hd_endo, report.hd_epi, report.folding_mean
            );
            runs.push(AblateRun {
                metric: metric.clone(),
                lambda1,
                failed_frames,
                report,
            });
        }
    }

    ensure_dir(&out)?;
    let mut table = CsvTable::new(&[
        "metric",
        "lambda1",
        "dsc",
        "hd_endo",
        "hd_epi",
        "folding_mean",
        "failed_frames",
        "runtime_seconds",
    ]);
    table.push_row(vec![
        "uncorrected".into(),
        String::new(),
        format!("{:.6}", baseline.dsc),
        format!("{:.6}", baseline.hd_endo),
        format!("{:.6}", baseline.hd_epi),
        format!("{:.6}", baseline.folding_mean),
        "0".into(),
        format!("{:.3}", baseline.runtime_seconds),
    ]);
    for run in &runs {
        table.push_row(vec![
            run.metric.clone(),
            csv_float(run.lambda1),
            format!("{:.6}", run.report.dsc),
            format!("{:.6}", run.report.hd_endo),
            format!("{:.6}", run.report.hd_epi),
            format!("{:.6}", run.report.folding_mean),
            run.failed_frames.to_string(),
            format!("{:.3}", run.report.runtime_seconds),
        ]);
    }
    export_csv(out.join("ablate.csv"), &table)?;
    write_json(
        &out.join("ablate.json"),
        &json!({ "baseline": baseline, "runs": runs }),
    )?;
    write_json(&out.join("grid.json"), &grid)?;
    config::write_echo(
        &out,
        &config::echo(
            &base,
            IoSection {
                series: Some(series_dir),
                out: Some(out.clone()),
                ..IoSection::default()
            },
        ),
    )?;
    crate::outln!("wrote {} sweep rows -> {}", runs.len(), out.display());
    Ok(())
}
