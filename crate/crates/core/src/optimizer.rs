//! Two-stage registration solver: an affine stage minimizing the negated
//! similarity over six parameters, then a deformable stage jointly
//! optimizing both displacement fields under the full objective. Both run
//! coarse-to-fine on an image pyramid using first-order descent with
//! adaptive per-parameter moment scaling and a backtracking line search, so
//! every accepted step lowers the loss.
//!
//! Series-level motion correction registers every non-reference frame to
//! the reference frame independently (frames may run concurrently) and
//! passes the reference frame through untouched.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LossError, SolveError};
use crate::field::{AffineParams, DisplacementField};
use crate::image::{Image2D, LabelMask, T1Series};
use crate::losses::{total_reg_loss, LossBreakdown, LossWeights, TotalLossOptions};
use crate::metrics::{MetricParams, MetricRegistry, MetricValue, SimilarityMetric};
use crate::pyramid::{image_pyramid, mask_pyramid, upsample_field};
use crate::warp::{folding_count, warp_image, warp_image_vjp};

/// Everything a solve needs beyond the images: pyramid shape, step sizes,
/// metric selection, loss weights, and stopping rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    /// Pyramid depth.
    pub levels: usize,
    /// Iterations per level, coarse to fine; must have `levels` entries.
    pub iters_per_level: Vec<usize>,
    /// Base step of the affine stage.
    pub step_size_affine: f64,
    /// Base step of the deformable stage, in pixels of displacement.
    pub step_size_field: f64,
    /// Registry name of the similarity metric ("weighted", "ncc", ...).
    pub metric: String,
    /// Parameters handed to the metric constructor (bins, eps, patch
    /// weights, and the component weights of the weighted metric).
    pub metric_params: MetricParams,
    /// Penalty weights of the total objective.
    pub loss_weights: LossWeights,
    /// Keep the factor 2 in dice numerators; false reproduces the published
    /// formula verbatim for audits.
    pub dice_paper_literal: bool,
    /// Seed recorded for provenance; the solver itself is deterministic.
    pub seed: u64,
    /// Relative loss-change threshold that ends a level early.
    pub convergence_tol: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            iters_per_level: vec![100, 100, 50],
            step_size_affine: 0.1,
            step_size_field: 0.5,
            metric: "weighted".to_string(),
            metric_params: MetricParams::default(),
            loss_weights: LossWeights::default(),
            dice_paper_literal: false,
            seed: 0,
            convergence_tol: 1e-5,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        if self.levels == 0 {
            return Err(SolveError::BadConfig("levels must be >= 1".into()));
        }
        if self.iters_per_level.len() != self.levels {
            return Err(SolveError::BadConfig(format!(
                "iters_per_level has {} entries for {} levels",
                self.iters_per_level.len(),
                self.levels
            )));
        }
        if self.iters_per_level.iter().any(|&n| n == 0) {
            return Err(SolveError::BadConfig(
                "every level needs at least 1 iteration".into(),
            ));
        }
        for (name, v) in [
            ("step_size_affine", self.step_size_affine),
            ("step_size_field", self.step_size_field),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SolveError::BadConfig(format!("{name} must be positive")));
            }
        }
        if !self.convergence_tol.is_finite() || self.convergence_tol < 0.0 {
            return Err(SolveError::BadConfig(
                "convergence_tol must be finite and >= 0".into(),
            ));
        }
        self.metric_params
            .validate()
            .map_err(|e| SolveError::BadConfig(e.to_string()))?;
        self.loss_weights
            .validate()
            .map_err(|e| SolveError::BadConfig(e.to_string()))?;
        if !MetricRegistry::with_builtins().names().contains(&self.metric.as_str()) {
            return Err(SolveError::BadConfig(format!(
                "unknown metric '{}'",
                self.metric
            )));
        }
        Ok(())
    }

    /// Instantiates the configured similarity metric from the registry.
    pub fn build_metric(&self) -> Result<Box<dyn SimilarityMetric>, SolveError> {
        MetricRegistry::with_builtins()
            .build(&self.metric, &self.metric_params)
            .ok_or_else(|| SolveError::BadConfig(format!("unknown metric '{}'", self.metric)))
    }

    fn dice_options(&self) -> TotalLossOptions {
        TotalLossOptions {
            dice_factor2: !self.dice_paper_literal,
        }
    }

    /// Iterations of pyramid level `level` (0 = finest).
    fn iters_at(&self, level: usize) -> usize {
        self.iters_per_level[self.levels - 1 - level]
    }
}

/// Output of one pairwise registration.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Affine stage parameters (identity when only the deformable stage ran).
    pub affine: AffineParams,
    /// Forward displacement field (moving toward fixed).
    pub field_xy: DisplacementField,
    /// Backward displacement field (fixed toward moving).
    pub field_yx: DisplacementField,
    /// The moving image after affine + deformable warping.
    pub moved: Image2D,
    /// Loss terms of every accepted step of the deformable stage, including
    /// each level's starting point.
    pub loss_trace: Vec<LossBreakdown>,
    /// Indices into `loss_trace` where each pyramid level begins (coarse
    /// first), so monotonicity holds between consecutive boundaries.
    pub level_starts: Vec<usize>,
    /// Pixels of the final forward field with non-positive Jacobian
    /// determinant.
    pub folding: usize,
    /// Wall-clock duration of the solve. Reporting only — never part of
    /// deterministic artifacts.
    pub seconds: f64,
}

fn from_loss_error(e: LossError) -> SolveError {
    match e {
        LossError::Grid(g) => SolveError::Grid(g),
        other => SolveError::BadConfig(other.to_string()),
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const MOMENT_EPS: f64 = 1e-8;
const MAX_HALVINGS: usize = 5;

/// Backtracking descent with adaptive per-parameter moment scaling.
/// `eval_grad` returns (loss, gradient, payload); `eval_score` is the cheap
/// value-only form used while line-searching. Every accepted step (and the
/// starting point) reports its payload through `accepted`. A step that stays
/// non-finite after halving [`MAX_HALVINGS`] times is an error; a step that
/// merely cannot improve the loss ends the level.
fn descend<B>(
    params: &mut [f64],
    step: f64,
    iters: usize,
    tol: f64,
    eval_grad: &mut dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>, B), SolveError>,
    eval_score: &mut dyn FnMut(&[f64]) -> Result<f64, SolveError>,
    accepted: &mut dyn FnMut(B),
) -> Result<(), SolveError> {
    let n = params.len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let (mut current, mut grad, payload) = eval_grad(params)?;
    if !current.is_finite() {
        return Err(SolveError::NonFiniteLoss { retries: 0 });
    }
    accepted(payload);

    let mut candidate = vec![0.0; n];
    for t in 1..=iters {
        let bias1 = 1.0 - BETA1.powi(t as i32);
        let bias2 = 1.0 - BETA2.powi(t as i32);
        for i in 0..n {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad[i] * grad[i];
        }
        let direction = |i: usize| (m[i] / bias1) / ((v[i] / bias2).sqrt() + MOMENT_EPS);

        let mut lr = step;
        let mut halvings = 0;
        let score = loop {
            for i in 0..n {
                candidate[i] = params[i] - lr * direction(i);
            }
            let score = eval_score(&candidate)?;
            if score.is_finite() && score <= current {
                break score;
            }
            if halvings == MAX_HALVINGS {
                if !score.is_finite() {
                    return Err(SolveError::NonFiniteLoss { retries: halvings });
                }
                // Finite but no descent within the line search: stalled.
                return Ok(());
            }
            halvings += 1;
            lr /= 2.0;
        };

        params.copy_from_slice(&candidate);
        let (loss, g, payload) = eval_grad(params)?;
        debug_assert!((loss - score).abs() <= 1e-9 * (1.0 + score.abs()));
        accepted(payload);
        let relative_drop = (current - loss).abs() / current.abs().max(1.0);
        current = loss;
        grad = g;
        if relative_drop < tol {
            return Ok(());
        }
    }
    Ok(())
}

/// Negated similarity of the affine-warped moving image, with the gradient
/// with respect to the six transform parameters when requested. The chain
/// runs through the warp's field gradient: each displacement component is
/// linear in theta with coefficients given by the normalized coordinates
/// and the normalized-to-pixel scale of its axis.
pub fn affine_objective(
    moving: &Image2D,
    fixed: &Image2D,
    theta: &AffineParams,
    metric: &dyn SimilarityMetric,
    want_grad: bool,
) -> Result<(f64, Option<[f64; 6]>), SolveError> {
    let w = moving.width();
    let h = moving.height();
    let field = theta.to_field(w, h).map_err(SolveError::Grid)?;
    let moved = warp_image(moving, &field).map_err(SolveError::Grid)?;
    if !want_grad {
        let score = metric.score(&moved, fixed).map_err(SolveError::Grid)?;
        return Ok((-score, None));
    }
    let MetricValue { score, grad } = metric.evaluate(&moved, fixed).map_err(SolveError::Grid)?;
    let g_img = grad.expect("metric gradient requested");
    let cot = Image2D::from_fn(w, h, |x, y| -g_img.at(x, y)).expect("cotangent grid is valid");
    let (_, d_field) = warp_image_vjp(moving, &field, &cot).map_err(SolveError::Grid)?;
    let sx = (w as f64 - 1.0) / 2.0;
    let sy = (h as f64 - 1.0) / 2.0;
    let mut g = [0.0; 6];
    for y in 0..h {
        let yn = y as f64 / sy - 1.0;
        for x in 0..w {
            let xn = x as f64 / sx - 1.0;
            let d = d_field.at(x, y);
            g[0] += d[0] * xn * sx;
            g[1] += d[0] * yn * sx;
            g[2] += d[0] * sx;
            g[3] += d[1] * xn * sy;
            g[4] += d[1] * yn * sy;
            g[5] += d[1] * sy;
        }
    }
    Ok((-score, Some(g)))
}

/// Estimates the affine transform aligning `moving` to `fixed` by
/// coarse-to-fine descent from the identity. The normalized-coordinate
/// parameterization makes the same parameters valid at every pyramid level.
pub fn solve_affine(
    moving: &Image2D,
    fixed: &Image2D,
    cfg: &SolveConfig,
) -> Result<AffineParams, SolveError> {
    cfg.validate()?;
    moving.check_same_grid(fixed).map_err(SolveError::Grid)?;
    let metric = cfg.build_metric()?;
    let pyr_moving = image_pyramid(moving, cfg.levels).map_err(SolveError::Grid)?;
    let pyr_fixed = image_pyramid(fixed, cfg.levels).map_err(SolveError::Grid)?;

    let mut theta = AffineParams::identity();
    for level in (0..cfg.levels).rev() {
        let mv = &pyr_moving[level];
        let fx = &pyr_fixed[level];
        let mut params = theta.as_vec().to_vec();
        descend(
            &mut params,
            cfg.step_size_affine,
            cfg.iters_at(level),
            cfg.convergence_tol,
            &mut |p| {
                let t = AffineParams::from_vec(p.try_into().expect("6 parameters"));
                let (loss, g) = affine_objective(mv, fx, &t, metric.as_ref(), true)?;
                Ok((loss, g.expect("gradient requested").to_vec(), ()))
            },
            &mut |p| {
                if !p.iter().all(|v| v.is_finite()) {
                    // Overflowed candidate: report +inf so the line search
                    // backtracks rather than failing on grid validation.
                    return Ok(f64::INFINITY);
                }
                let t = AffineParams::from_vec(p.try_into().expect("6 parameters"));
                Ok(affine_objective(mv, fx, &t, metric.as_ref(), false)?.0)
            },
            &mut |()| {},
        )?;
        theta = AffineParams::from_vec(params.as_slice().try_into().expect("6 parameters"));
    }
    Ok(theta)
}

fn fields_from_flat(flat: &[f64], w: usize, h: usize) -> (DisplacementField, DisplacementField) {
    let n = w * h;
    let unpack = |chunk: &[f64]| {
        let data = chunk.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        DisplacementField::new(w, h, data).expect("field grid is valid")
    };
    (unpack(&flat[..2 * n]), unpack(&flat[2 * n..]))
}

fn flat_from_fields(xy: &DisplacementField, yx: &DisplacementField) -> Vec<f64> {
    xy.data()
        .iter()
        .chain(yx.data())
        .flat_map(|v| [v[0], v[1]])
        .collect()
}

/// Jointly estimates the forward and backward displacement fields between
/// an (already affine-aligned) moving image and the fixed image, coarse to
/// fine; fields are upsampled bilinearly with doubled displacements between
/// levels. Optional label masks add the weak-supervision dice term.
pub fn solve_deformable(
    ax: &Image2D,
    fixed: &Image2D,
    masks: Option<(&LabelMask, &LabelMask)>,
    cfg: &SolveConfig,
) -> Result<RegistrationResult, SolveError> {
    let started = std::time::Instant::now();
    cfg.validate()?;
    ax.check_same_grid(fixed).map_err(SolveError::Grid)?;
    let metric = cfg.build_metric()?;
    let opts = cfg.dice_options();

    let pyr_ax = image_pyramid(ax, cfg.levels).map_err(SolveError::Grid)?;
    let pyr_fixed = image_pyramid(fixed, cfg.levels).map_err(SolveError::Grid)?;
    let coarsest = &pyr_ax[cfg.levels - 1];
    if coarsest.width() < 3 || coarsest.height() < 3 {
        return Err(SolveError::BadConfig(format!(
            "{} levels shrink a {}x{} image below the 3x3 minimum",
            cfg.levels,
            ax.width(),
            ax.height()
        )));
    }
    let pyr_masks = match masks {
        Some((mx, my)) => {
            if mx.num_classes() != my.num_classes() {
                return Err(SolveError::BadConfig(
                    "mask pair disagrees on class count".into(),
                ));
            }
            Some((
                mask_pyramid(mx, cfg.levels).map_err(SolveError::Grid)?,
                mask_pyramid(my, cfg.levels).map_err(SolveError::Grid)?,
            ))
        }
        None => None,
    };

    let mut trace: Vec<LossBreakdown> = Vec::new();
    let mut level_starts = Vec::with_capacity(cfg.levels);
    let mut field_xy = DisplacementField::zeros(coarsest.width(), coarsest.height())
        .expect("coarsest grid is valid");
    let mut field_yx = field_xy.clone();

    for level in (0..cfg.levels).rev() {
        let img_m = &pyr_ax[level];
        let img_f = &pyr_fixed[level];
        let level_masks = pyr_masks
            .as_ref()
            .map(|(mx, my)| (&mx[level], &my[level]));
        let w = img_m.width();
        let h = img_m.height();

        level_starts.push(trace.len());
        let mut flat = flat_from_fields(&field_xy, &field_yx);
        descend(
            &mut flat,
            cfg.step_size_field,
            cfg.iters_at(level),
            cfg.convergence_tol,
            &mut |p| {
                let (fxy, fyx) = fields_from_flat(p, w, h);
                let (breakdown, grad) = total_reg_loss(
                    img_m,
                    img_f,
                    &fxy,
                    &fyx,
                    level_masks,
                    metric.as_ref(),
                    &cfg.loss_weights,
                    &opts,
                    true,
                )
                .map_err(from_loss_error)?;
                let g = grad.expect("gradient requested");
                Ok((breakdown.total, flat_from_fields(&g.xy, &g.yx), breakdown))
            },
            &mut |p| {
                if !p.iter().all(|v| v.is_finite()) {
                    // Overflowed candidate: report +inf so the line search
                    // backtracks rather than failing on grid validation.
                    return Ok(f64::INFINITY);
                }
                let (fxy, fyx) = fields_from_flat(p, w, h);
                let (breakdown, _) = total_reg_loss(
                    img_m,
                    img_f,
                    &fxy,
                    &fyx,
                    level_masks,
                    metric.as_ref(),
                    &cfg.loss_weights,
                    &opts,
                    false,
                )
                .map_err(from_loss_error)?;
                Ok(breakdown.total)
            },
            &mut |b: LossBreakdown| trace.push(b),
        )?;
        let (fxy, fyx) = fields_from_flat(&flat, w, h);
        if level > 0 {
            let up = &pyr_ax[level - 1];
            field_xy = upsample_field(&fxy, up.width(), up.height()).map_err(SolveError::Grid)?;
            field_yx = upsample_field(&fyx, up.width(), up.height()).map_err(SolveError::Grid)?;
        } else {
            field_xy = fxy;
            field_yx = fyx;
        }
    }

    let moved = warp_image(ax, &field_xy).map_err(SolveError::Grid)?;
    let folding = folding_count(&field_xy).map_err(SolveError::Grid)?;
    Ok(RegistrationResult {
        affine: AffineParams::identity(),
        field_xy,
        field_yx,
        moved,
        loss_trace: trace,
        level_starts,
        folding,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Full two-stage registration of one moving frame onto a fixed frame. The
/// result's `moved` image equals `warp(warp(moving, affine field), field_xy)`
/// by construction.
pub fn register_frame(
    moving: &Image2D,
    fixed: &Image2D,
    cfg: &SolveConfig,
) -> Result<RegistrationResult, SolveError> {
    let started = std::time::Instant::now();
    let affine = solve_affine(moving, fixed, cfg)?;
    let afield = affine
        .to_field(moving.width(), moving.height())
        .map_err(SolveError::Grid)?;
    let ax = warp_image(moving, &afield).map_err(SolveError::Grid)?;
    let mut result = solve_deformable(&ax, fixed, None, cfg)?;
    result.affine = affine;
    result.seconds = started.elapsed().as_secs_f64();
    Ok(result)
}

/// Per-frame outcome of a series correction.
#[derive(Debug, Clone)]
pub enum FrameStatus {
    /// The fixed frame, passed through bit-identically.
    Reference,
    /// Successfully registered.
    Registered(Box<RegistrationResult>),
    /// Registration failed; the original frame is kept in the output.
    Failed(String),
}

/// A corrected series plus what happened to each frame.
#[derive(Debug, Clone)]
pub struct SeriesCorrection {
    pub corrected: T1Series,
    pub frames: Vec<FrameStatus>,
}

/// Registers every non-reference frame of the series to the reference frame
/// (frames run concurrently; outcomes keep frame order) and assembles the
/// corrected series. A frame whose solve fails keeps its original pixels and
/// records the failure without affecting the others.
pub fn motion_correct_series(
    series: &T1Series,
    cfg: &SolveConfig,
) -> Result<SeriesCorrection, SolveError> {
    cfg.validate()?;
    let reference_index = series.reference_index();
    let fixed = series.reference();

    let frames: Vec<FrameStatus> = (0..series.num_frames())
        .into_par_iter()
        .map(|i| {
            if i == reference_index {
                return FrameStatus::Reference;
            }
            match register_frame(series.frame(i), fixed, cfg) {
                Ok(res) => FrameStatus::Registered(Box::new(res)),
                Err(e) => FrameStatus::Failed(e.to_string()),
            }
        })
        .collect();

    let corrected_frames: Vec<Image2D> = frames
        .iter()
        .enumerate()
        .map(|(i, status)| match status {
            FrameStatus::Registered(res) => res.moved.clone(),
            FrameStatus::Reference | FrameStatus::Failed(_) => series.frame(i).clone(),
        })
        .collect();
    let corrected = T1Series::new(
        corrected_frames,
        series.inversion_times_ms().to_vec(),
        reference_index,
    )
    .map_err(SolveError::Grid)?;
    Ok(SeriesCorrection { corrected, frames })
}
