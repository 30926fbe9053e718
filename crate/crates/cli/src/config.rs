//! Layered run configuration. A JSON config file holds optional sections
//! that overlay the built-in defaults; command-line flags overlay the file.
//! Resolution order (later wins): defaults → `solve` section → `metric` and
//! `loss` sections → flags. Unknown keys are rejected everywhere, and every
//! command echoes its fully resolved configuration (defaults included) into
//! its output directory as `config.json`, in a form that can be fed back via
//! `--config` to reproduce the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use t1moco_core::losses::LossWeights;
use t1moco_core::metrics::WlsWeights;
use t1moco_core::optimizer::SolveConfig;

use crate::error::CliError;
use crate::jsonio;

/// Top-level config document.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub io: Option<IoSection>,
}

/// Similarity-metric selection and parameters. Absent fields keep the value
/// from the `solve` section (or its default).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSection {
    /// Registry name: "ncc", "mi", "ngf", "mind", or "weighted".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Histogram bins for MI.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    /// Gradient-magnitude regularizer for NGF.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    /// Patch radius for MIND (1 = 3x3 patches).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch_radius: Option<usize>,
    /// Gaussian patch-weight sigma for MIND, in pixels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Component weights of the weighted metric.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<WlsWeights>,
}

/// Penalty weights of the registration objective. Absent fields keep the
/// value from the `solve` section (or its default).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    /// Anti-folding weight.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<f64>,
    /// Smoothness weight.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda2: Option<f64>,
    /// Registration-consistency branch weight of the segmentation loss.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_r: Option<f64>,
    /// Supervised branch weight of the segmentation loss.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_s: Option<f64>,
}

/// Input/output paths. Flags win over these; a path needed by the command
/// must be present in at least one of the two places.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub moving: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub series: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Flags shared by the solver-backed commands; each overrides the matching
/// config field when given.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct SolveOverrides {
    /// Similarity metric registry name (ncc, mi, ngf, mind, weighted).
    #[arg(long)]
    pub metric: Option<String>,
    /// Anti-folding penalty weight.
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Smoothness penalty weight.
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Seed recorded in outputs; the solver itself is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Loads a config file, or defaults when no path was given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => jsonio::read_json(p),
            None => Ok(Self::default()),
        }
    }

    /// Defaults overlaid by the `solve` section, then the `metric` and
    /// `loss` sections, then the given flags. Validates the result.
    pub fn resolve_solve(&self, flags: &SolveOverrides) -> Result<SolveConfig, CliError> {
        let mut cfg = self.solve.clone().unwrap_or_default();
        if let Some(m) = &self.metric {
            if let Some(name) = &m.name {
                cfg.metric = name.clone();
            }
            if let Some(v) = m.bins {
                cfg.metric_params.bins = v;
            }
            if let Some(v) = m.eps {
                cfg.metric_params.eps = v;
            }
            if let Some(v) = m.patch_radius {
                cfg.metric_params.patch_radius = v;
            }
            if let Some(v) = m.sigma {
                cfg.metric_params.sigma = v;
            }
            if let Some(w) = &m.weights {
                cfg.metric_params.weights = w.clone();
            }
        }
        if let Some(l) = &self.loss {
            if let Some(v) = l.lambda1 {
                cfg.loss_weights.lambda1 = v;
            }
            if let Some(v) = l.lambda2 {
                cfg.loss_weights.lambda2 = v;
            }
            if let Some(v) = l.lambda_r {
                cfg.loss_weights.lambda_r = v;
            }
            if let Some(v) = l.lambda_s {
                cfg.loss_weights.lambda_s = v;
            }
        }
        if let Some(m) = &flags.metric {
            cfg.metric = m.clone();
        }
        if let Some(v) = flags.lambda1 {
            cfg.loss_weights.lambda1 = v;
        }
        if let Some(v) = flags.lambda2 {
            cfg.loss_weights.lambda2 = v;
        }
        if let Some(s) = flags.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// A path from a flag or the `io` section (flag wins).
    pub fn resolve_path(
        &self,
        flag: Option<&PathBuf>,
        pick: impl Fn(&IoSection) -> Option<&PathBuf>,
        what: &str,
    ) -> Result<PathBuf, CliError> {
        flag.cloned()
            .or_else(|| self.io.as_ref().and_then(|io| pick(io).cloned()))
            .ok_or_else(|| {
                CliError::Config(format!(
                    "missing {what}: pass the flag or set it in the config's io section"
                ))
            })
    }
}

/// The fully resolved configuration written into every output directory:
/// every section present, every default spelled out. Feeding it back via
/// `--config` reproduces the run.
pub fn echo(solve: &SolveConfig, io: IoSection) -> RunConfig {
    RunConfig {
        metric: Some(MetricSection {
            name: Some(solve.metric.clone()),
            bins: Some(solve.metric_params.bins),
            eps: Some(solve.metric_params.eps),
            patch_radius: Some(solve.metric_params.patch_radius),
            sigma: Some(solve.metric_params.sigma),
            weights: Some(solve.metric_params.weights.clone()),
        }),
        loss: Some(LossSection::from_weights(&solve.loss_weights)),
        solve: Some(solve.clone()),
        io: Some(io),
    }
}

/// Writes the echo into `dir/config.json`.
pub fn write_echo(dir: &Path, config: &RunConfig) -> Result<(), CliError> {
    jsonio::write_json(&dir.join("config.json"), config)
}

impl LossSection {
    pub fn from_weights(w: &LossWeights) -> Self {
        Self {
            lambda1: Some(w.lambda1),
            lambda2: Some(w.lambda2),
            lambda_r: Some(w.lambda_r),
            lambda_s: Some(w.lambda_s),
        }
    }
}
