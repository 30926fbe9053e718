//! Registration objectives: affine similarity loss, bidirectional similarity
//! loss with approximate-inverse consistency, soft dice, weak label
//! supervision, anti-folding and smoothness penalties, their weighted total,
//! and a semi-supervised segmentation loss over provided mask arrays.
//!
//! Every term that the solver optimizes comes in a value+gradient form; the
//! gradients are assembled analytically from the metric gradients and the
//! warp vector-Jacobian products, and are validated against finite
//! differences in the tests.

use serde::{Deserialize, Serialize};

use crate::error::{GridError, LossError};
use crate::field::DisplacementField;
use crate::image::{Image2D, LabelMask, MaskStack};
use crate::metrics::SimilarityMetric;
use crate::warp::{
    approx_inverse, field_partials, jacobian_det, warp_field_vjp, warp_image, warp_image_vjp,
};
use crate::diff::gradient_adjoint;

/// Weights of the penalty terms in the total registration loss and of the
/// two branches of the semi-supervised segmentation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Anti-folding weight.
    pub lambda1: f64,
    /// Smoothness weight.
    pub lambda2: f64,
    /// Registration-consistency branch weight of the segmentation loss.
    pub lambda_r: f64,
    /// Supervised branch weight of the segmentation loss.
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1000.0,
            lambda2: 8.0,
            lambda_r: 1.0,
            lambda_s: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), GridError> {
        let all = [self.lambda1, self.lambda2, self.lambda_r, self.lambda_s];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(GridError::Invalid(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// The named terms of one total-loss evaluation. `total` is the weighted sum
/// `sim_* + dice_weak + lambda1 * jdet + lambda2 * smooth`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim_fwd: f64,
    pub sim_bwd: f64,
    pub sim_inv_fwd: f64,
    pub sim_inv_bwd: f64,
    pub dice_weak: f64,
    pub jdet: f64,
    pub smooth: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the weighted sum from the stored terms.
    pub fn weighted_sum(&self, lw: &LossWeights) -> f64 {
        self.sim_fwd
            + self.sim_bwd
            + self.sim_inv_fwd
            + self.sim_inv_bwd
            + self.dice_weak
            + lw.lambda1 * self.jdet
            + lw.lambda2 * self.smooth
    }
}

/// Gradient of a scalar loss with respect to both displacement fields.
#[derive(Debug, Clone)]
pub struct FieldPairGrad {
    pub xy: DisplacementField,
    pub yx: DisplacementField,
}

impl FieldPairGrad {
    fn zeros(w: usize, h: usize) -> Self {
        Self {
            xy: DisplacementField::zeros(w, h).expect("grad grid is valid"),
            yx: DisplacementField::zeros(w, h).expect("grad grid is valid"),
        }
    }
}

fn axpy_field(dst: &mut DisplacementField, k: f64, src: &DisplacementField) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        d[0] += k * s[0];
        d[1] += k * s[1];
    }
}

fn scale_image(img: &Image2D, k: f64) -> Image2D {
    Image2D::from_fn(img.width(), img.height(), |x, y| k * img.at(x, y))
        .expect("scaled grid is valid")
}

/// Similarity loss of the affine stage: the negated metric between the
/// affine-moved image and the fixed image.
pub fn affine_loss(
    moved: &Image2D,
    fixed: &Image2D,
    metric: &dyn SimilarityMetric,
) -> Result<f64, LossError> {
    Ok(-metric.score(moved, fixed).map_err(LossError::Grid)?)
}

/// The four negated similarity terms of the bidirectional consistency loss.
#[derive(Debug, Clone, Copy)]
pub struct SimTerms {
    /// -metric(moved forward, fixed).
    pub fwd: f64,
    /// -metric(fixed moved backward, moving).
    pub bwd: f64,
    /// -metric(forward image pulled back through the inverse, moving).
    pub inv_fwd: f64,
    /// -metric(backward image pulled back through the inverse, fixed).
    pub inv_bwd: f64,
}

impl SimTerms {
    pub fn sum(&self) -> f64 {
        self.fwd + self.bwd + self.inv_fwd + self.inv_bwd
    }
}

/// Bidirectional similarity loss: warps `ax` forward by `phi_xy` and `y`
/// backward by `phi_yx`, pulls each warped image back through the
/// approximate inverse of its field, and sums the four negated similarity
/// scores (forward, backward, and the two round trips).
pub fn bidirectional_sim_loss(
    ax: &Image2D,
    y: &Image2D,
    phi_xy: &DisplacementField,
    phi_yx: &DisplacementField,
    metric: &dyn SimilarityMetric,
    want_grad: bool,
) -> Result<(SimTerms, Option<FieldPairGrad>), LossError> {
    ax.check_same_grid(y).map_err(LossError::Grid)?;
    phi_xy.check_same_grid(phi_yx).map_err(LossError::Grid)?;
    let w = ax.width();
    let h = ax.height();

    // One direction at a time: moving image m, field phi; fixed image f.
    // Terms: -metric(warp(m, phi), f) and -metric(warp(warp(m, phi), inv(phi)), m).
    let one_direction = |m: &Image2D,
                             f: &Image2D,
                             phi: &DisplacementField|
     -> Result<(f64, f64, Option<DisplacementField>), LossError> {
        let moved = warp_image(m, phi).map_err(LossError::Grid)?;
        let inv = approx_inverse(phi);
        let round_trip = warp_image(&moved, &inv).map_err(LossError::Grid)?;
        if !want_grad {
            let direct = -metric.score(&moved, f).map_err(LossError::Grid)?;
            let cycle = -metric.score(&round_trip, m).map_err(LossError::Grid)?;
            return Ok((direct, cycle, None));
        }
        let mv_direct = metric.evaluate(&moved, f).map_err(LossError::Grid)?;
        let mv_cycle = metric.evaluate(&round_trip, m).map_err(LossError::Grid)?;
        let direct = -mv_direct.score;
        let cycle = -mv_cycle.score;

        let mut d_phi = DisplacementField::zeros(w, h).expect("grad grid is valid");
        // Direct term: loss = -metric(moved, f).
        let cot_moved_direct = scale_image(&mv_direct.grad.expect("grad requested"), -1.0);
        let (_, g) = warp_image_vjp(m, phi, &cot_moved_direct).map_err(LossError::Grid)?;
        axpy_field(&mut d_phi, 1.0, &g);
        // Cycle term: loss = -metric(warp(moved, inv), m); the gradient flows
        // into phi both through `moved` and through the inverse field, which
        // is itself the negated self-warp of phi.
        let cot_round = scale_image(&mv_cycle.grad.expect("grad requested"), -1.0);
        let (d_moved, d_inv) = warp_image_vjp(&moved, &inv, &cot_round).map_err(LossError::Grid)?;
        let (_, g) = warp_image_vjp(m, phi, &d_moved).map_err(LossError::Grid)?;
        axpy_field(&mut d_phi, 1.0, &g);
        let mut cot_selfwarp = d_inv;
        for v in cot_selfwarp.data_mut() {
            v[0] = -v[0];
            v[1] = -v[1];
        }
        let (d_inner, d_by) =
            warp_field_vjp(phi, phi, &cot_selfwarp).map_err(LossError::Grid)?;
        axpy_field(&mut d_phi, 1.0, &d_inner);
        axpy_field(&mut d_phi, 1.0, &d_by);
        Ok((direct, cycle, Some(d_phi)))
    };

    let (fwd, inv_fwd, d_xy) = one_direction(ax, y, phi_xy)?;
    let (bwd, inv_bwd, d_yx) = one_direction(y, ax, phi_yx)?;
    let terms = SimTerms {
        fwd,
        bwd,
        inv_fwd,
        inv_bwd,
    };
    let grad = match (d_xy, d_yx) {
        (Some(xy), Some(yx)) => Some(FieldPairGrad { xy, yx }),
        _ => None,
    };
    Ok((terms, grad))
}

/// Soft multi-class dice loss over per-class score maps:
/// `1 - (1/K) sum_k 2 <a_k, b_k> / (sum a_k + sum b_k)`.
/// A class absent from both stacks counts as perfectly matched (ratio 1).
/// With `factor2` false the numerator keeps no factor 2, so even identical
/// masks keep a residual of 1/2 per class — an audit mode, not a default.
pub fn soft_dice(sa: &MaskStack, sb: &MaskStack, factor2: bool) -> Result<f64, LossError> {
    Ok(soft_dice_with_grad(sa, sb, factor2, false)?.0)
}

/// As [`soft_dice`], optionally with the gradient w.r.t. `sa`'s channels.
pub fn soft_dice_with_grad(
    sa: &MaskStack,
    sb: &MaskStack,
    factor2: bool,
    want_grad: bool,
) -> Result<(f64, Option<Vec<Image2D>>), LossError> {
    if sa.num_classes() != sb.num_classes() {
        return Err(LossError::Grid(GridError::Invalid(format!(
            "mask stacks disagree on classes: {} vs {}",
            sa.num_classes(),
            sb.num_classes()
        ))));
    }
    sa.channel(0)
        .check_same_grid(sb.channel(0))
        .map_err(LossError::Grid)?;
    let k = sa.num_classes();
    let numerator_factor = if factor2 { 2.0 } else { 1.0 };
    let mut loss = 1.0;
    let mut grads = want_grad.then(|| Vec::with_capacity(k));
    for c in 0..k {
        let a = sa.channel(c);
        let b = sb.channel(c);
        let inter: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        let sum_a: f64 = a.data().iter().sum();
        let sum_b: f64 = b.data().iter().sum();
        let denom = sum_a + sum_b;
        if denom == 0.0 {
            // Both empty: defined as a perfect match, no gradient.
            loss -= 1.0 / k as f64;
            if let Some(gs) = grads.as_mut() {
                gs.push(Image2D::zeros(a.width(), a.height()).unwrap());
            }
            continue;
        }
        let ratio = numerator_factor * inter / denom;
        loss -= ratio / k as f64;
        if let Some(gs) = grads.as_mut() {
            // d ratio / d a_p = f * (b_p * denom - inter) / denom^2.
            let g = Image2D::from_fn(a.width(), a.height(), |x, y| {
                -numerator_factor * (b.at(x, y) * denom - inter) / (denom * denom * k as f64)
            })
            .expect("grad grid is valid");
            gs.push(g);
        }
    }
    Ok((loss, grads))
}

/// Foreground one-hot channels (class ids >= 1) of a label mask.
fn foreground_stack(mask: &LabelMask) -> Result<MaskStack, LossError> {
    if mask.num_classes() < 2 {
        return Err(LossError::Grid(GridError::Invalid(
            "weak supervision needs at least one foreground class".into(),
        )));
    }
    let channels = (1..mask.num_classes())
        .map(|c| mask.indicator(c as u8))
        .collect();
    MaskStack::new(channels).map_err(LossError::Grid)
}

fn warp_stack(stack: &MaskStack, phi: &DisplacementField) -> Result<MaskStack, LossError> {
    let channels = stack
        .channels()
        .iter()
        .map(|c| warp_image(c, phi))
        .collect::<Result<Vec<_>, _>>()
        .map_err(LossError::Grid)?;
    MaskStack::new(channels).map_err(LossError::Grid)
}

/// Label-overlap loss of the registration: one-hot-encodes the foreground
/// classes of both masks, warps each encoding bilinearly by its direction's
/// field, and sums the two soft-dice terms (warped-x vs y, warped-y vs x).
pub fn weak_supervision_loss(
    sx: &LabelMask,
    sy: &LabelMask,
    phi_xy: &DisplacementField,
    phi_yx: &DisplacementField,
    factor2: bool,
    want_grad: bool,
) -> Result<(f64, Option<FieldPairGrad>), LossError> {
    let stack_x = foreground_stack(sx)?;
    let stack_y = foreground_stack(sy)?;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| FieldPairGrad::zeros(phi_xy.width(), phi_xy.height()));

    let mut one_term = |stack_m: &MaskStack,
                        stack_f: &MaskStack,
                        phi: &DisplacementField,
                        out: Option<&mut DisplacementField>|
     -> Result<(), LossError> {
        let warped = warp_stack(stack_m, phi)?;
        let (value, channel_grads) =
            soft_dice_with_grad(&warped, stack_f, factor2, out.is_some())?;
        total += value;
        if let (Some(out), Some(gs)) = (out, channel_grads) {
            for (channel, g) in stack_m.channels().iter().zip(&gs) {
                let (_, d_phi) = warp_image_vjp(channel, phi, g).map_err(LossError::Grid)?;
                axpy_field(out, 1.0, &d_phi);
            }
        }
        Ok(())
    };

    match grad.as_mut() {
        Some(g) => {
            one_term(&stack_x, &stack_y, phi_xy, Some(&mut g.xy))?;
            one_term(&stack_y, &stack_x, phi_yx, Some(&mut g.yx))?;
        }
        None => {
            one_term(&stack_x, &stack_y, phi_xy, None)?;
            one_term(&stack_y, &stack_x, phi_yx, None)?;
        }
    }
    Ok((total, grad))
}

fn anti_folding_one(
    phi: &DisplacementField,
    want_grad: bool,
) -> Result<(f64, Option<DisplacementField>), LossError> {
    let det = jacobian_det(phi).map_err(LossError::Grid)?;
    let n = det.data().len() as f64;
    let value = det.data().iter().map(|&d| (-d).max(0.0)).sum::<f64>() / n;
    if !want_grad {
        return Ok((value, None));
    }
    // d loss / d det = -1/N where det < 0, else 0; chained through
    // det = (1 + dux/dx)(1 + duy/dy) - (dux/dy)(duy/dx) and the adjoint of
    // the difference operator.
    let [uxx, uxy, uyx, uyy] = field_partials(phi);
    let w = phi.width();
    let h = phi.height();
    let gate = |x: usize, y: usize| if det.at(x, y) < 0.0 { -1.0 / n } else { 0.0 };
    let wa = Image2D::from_fn(w, h, |x, y| gate(x, y) * (1.0 + uyy.at(x, y))).unwrap();
    let wb = Image2D::from_fn(w, h, |x, y| gate(x, y) * -uyx.at(x, y)).unwrap();
    let wc = Image2D::from_fn(w, h, |x, y| gate(x, y) * -uxy.at(x, y)).unwrap();
    let wd = Image2D::from_fn(w, h, |x, y| gate(x, y) * (1.0 + uxx.at(x, y))).unwrap();
    let gx = gradient_adjoint(&wa, &wb);
    let gy = gradient_adjoint(&wc, &wd);
    let grad = DisplacementField::from_fn(w, h, |x, y| [gx.at(x, y), gy.at(x, y)])
        .expect("grad grid is valid");
    Ok((value, Some(grad)))
}

/// Anti-folding penalty: mean over pixels of `max(0, -det J)` for each
/// field, summed over both directions. Zero exactly when neither field has
/// a non-positive Jacobian determinant... strictly: when none is negative;
/// a determinant of exactly zero sits on the penalty's boundary and also
/// contributes zero, matching the ramp.
pub fn anti_folding_loss(
    phi_xy: &DisplacementField,
    phi_yx: &DisplacementField,
    want_grad: bool,
) -> Result<(f64, Option<FieldPairGrad>), LossError> {
    let (vx, gx) = anti_folding_one(phi_xy, want_grad)?;
    let (vy, gy) = anti_folding_one(phi_yx, want_grad)?;
    let grad = match (gx, gy) {
        (Some(xy), Some(yx)) => Some(FieldPairGrad { xy, yx }),
        _ => None,
    };
    Ok((vx + vy, grad))
}

/// Smoothness penalty of one field: mean squared magnitude of the spatial
/// gradient of the displacement (all four partials).
pub fn smoothness_loss(
    phi: &DisplacementField,
    want_grad: bool,
) -> Result<(f64, Option<DisplacementField>), LossError> {
    if phi.width() < 3 || phi.height() < 3 {
        return Err(LossError::Grid(GridError::GridTooSmall {
            w: phi.width(),
            h: phi.height(),
            min: 3,
        }));
    }
    let [uxx, uxy, uyx, uyy] = field_partials(phi);
    let n = (phi.width() * phi.height()) as f64;
    let sq = |img: &Image2D| img.data().iter().map(|v| v * v).sum::<f64>();
    let value = (sq(&uxx) + sq(&uxy) + sq(&uyx) + sq(&uyy)) / n;
    if !want_grad {
        return Ok((value, None));
    }
    let gx = gradient_adjoint(&scale_image(&uxx, 2.0 / n), &scale_image(&uxy, 2.0 / n));
    let gy = gradient_adjoint(&scale_image(&uyx, 2.0 / n), &scale_image(&uyy, 2.0 / n));
    let grad = DisplacementField::from_fn(phi.width(), phi.height(), |x, y| {
        [gx.at(x, y), gy.at(x, y)]
    })
    .expect("grad grid is valid");
    Ok((value, Some(grad)))
}

/// Options of the total registration loss that are not plain weights.
#[derive(Debug, Clone, Copy)]
pub struct TotalLossOptions {
    /// Keep the factor 2 in dice numerators (the corrected form).
    pub dice_factor2: bool,
}

impl Default for TotalLossOptions {
    fn default() -> Self {
        Self { dice_factor2: true }
    }
}

/// The full deformable-stage objective:
/// bidirectional similarity + optional weak label supervision
/// + lambda1 * anti-folding + lambda2 * smoothness (both fields).
#[allow(clippy::too_many_arguments)]
pub fn total_reg_loss(
    ax: &Image2D,
    y: &Image2D,
    phi_xy: &DisplacementField,
    phi_yx: &DisplacementField,
    masks: Option<(&LabelMask, &LabelMask)>,
    metric: &dyn SimilarityMetric,
    lw: &LossWeights,
    opts: &TotalLossOptions,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<FieldPairGrad>), LossError> {
    lw.validate().map_err(LossError::Grid)?;
    let (sim, sim_grad) = bidirectional_sim_loss(ax, y, phi_xy, phi_yx, metric, want_grad)?;
    let (dice_weak, dice_grad) = match masks {
        Some((sx, sy)) => {
            let (v, g) =
                weak_supervision_loss(sx, sy, phi_xy, phi_yx, opts.dice_factor2, want_grad)?;
            (v, g)
        }
        None => (0.0, want_grad.then(|| FieldPairGrad::zeros(phi_xy.width(), phi_xy.height()))),
    };
    let (jdet, jdet_grad) = anti_folding_loss(phi_xy, phi_yx, want_grad)?;
    let (smooth_xy, sg_xy) = smoothness_loss(phi_xy, want_grad)?;
    let (smooth_yx, sg_yx) = smoothness_loss(phi_yx, want_grad)?;
    let smooth = smooth_xy + smooth_yx;

    let breakdown = LossBreakdown {
        sim_fwd: sim.fwd,
        sim_bwd: sim.bwd,
        sim_inv_fwd: sim.inv_fwd,
        sim_inv_bwd: sim.inv_bwd,
        dice_weak,
        jdet,
        smooth,
        total: 0.0,
    };
    let breakdown = LossBreakdown {
        total: breakdown.weighted_sum(lw),
        ..breakdown
    };

    let grad = if want_grad {
        let mut g = sim_grad.expect("grad requested");
        let dg = dice_grad.expect("grad requested");
        axpy_field(&mut g.xy, 1.0, &dg.xy);
        axpy_field(&mut g.yx, 1.0, &dg.yx);
        let jg = jdet_grad.expect("grad requested");
        axpy_field(&mut g.xy, lw.lambda1, &jg.xy);
        axpy_field(&mut g.yx, lw.lambda1, &jg.yx);
        axpy_field(&mut g.xy, lw.lambda2, &sg_xy.expect("grad requested"));
        axpy_field(&mut g.yx, lw.lambda2, &sg_yx.expect("grad requested"));
        Some(g)
    } else {
        None
    };
    Ok((breakdown, grad))
}

/// Segmentation loss when only some images carry labels: combines a
/// registration-consistency dice (labels warped onto the other image's
/// predicted mask) with a supervised dice (prediction against its own
/// label). When both sides are labeled, the second-label form applies.
#[allow(clippy::too_many_arguments)]
pub fn semi_supervised_seg_loss(
    pred_x: &MaskStack,
    pred_y: &MaskStack,
    xl: Option<&LabelMask>,
    yl: Option<&LabelMask>,
    phi_xy: &DisplacementField,
    phi_yx: &DisplacementField,
    lw: &LossWeights,
    factor2: bool,
) -> Result<f64, LossError> {
    lw.validate().map_err(LossError::Grid)?;
    let consistency = |label: &LabelMask,
                       pred_other: &MaskStack,
                       phi: &DisplacementField|
     -> Result<f64, LossError> {
        let warped = warp_stack(&foreground_stack(label)?, phi)?;
        soft_dice(&warped, pred_other, factor2)
    };
    let supervised = |pred: &MaskStack, label: &LabelMask| -> Result<f64, LossError> {
        soft_dice(pred, &foreground_stack(label)?, factor2)
    };
    match (xl, yl) {
        (Some(xl), None) => {
            Ok(lw.lambda_r * consistency(xl, pred_y, phi_xy)? + lw.lambda_s * supervised(pred_x, xl)?)
        }
        // The both-labeled case takes the same form as the y-labeled case.
        (None, Some(yl)) | (Some(_), Some(yl)) => {
            Ok(lw.lambda_r * consistency(yl, pred_x, phi_yx)? + lw.lambda_s * supervised(pred_y, yl)?)
        }
        (None, None) => Err(LossError::NoLabels),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, CheckOpts};
    use crate::metrics::{MetricParams, Ncc, WeightedMetric, WlsWeights};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pinned_random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image2D {
        let mut img = Image2D::from_fn(w, h, |_, _| rng.gen_range(0.1..0.9)).unwrap();
        img.set(0, 0, 0.0);
        img.set(w - 1, h - 1, 1.0);
        img
    }

    fn fractional_field(rng: &mut ChaCha8Rng, w: usize, h: usize, amp: f64) -> DisplacementField {
        DisplacementField::from_fn(w, h, |_, _| {
            [rng.gen_range(-amp..amp), rng.gen_range(-amp..amp)]
        })
        .unwrap()
    }

    /// Zeroes the displacement at the two corner pixels that carry the image
    /// extremes, so warped images keep an exact [0,1] intensity window (the
    /// metric gradients treat window bounds as constants). Returns the flat
    /// parameter indices of those pixels so gradient checks skip them.
    fn pin_field_corners(f: &mut DisplacementField) -> Vec<usize> {
        let w = f.width();
        let h = f.height();
        f.set(0, 0, [0.0, 0.0]);
        f.set(w - 1, h - 1, [0.0, 0.0]);
        let last = ((h - 1) * w + (w - 1)) * 2;
        vec![0, 1, last, last + 1]
    }

    /// Flattens a field into a parameter vector and back, for gradient checks.
    fn field_to_vec(f: &DisplacementField) -> Vec<f64> {
        f.data().iter().flat_map(|v| [v[0], v[1]]).collect()
    }

    fn vec_to_field(v: &[f64], w: usize, h: usize) -> DisplacementField {
        let data = v.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        DisplacementField::new(w, h, data).unwrap()
    }

    #[test]
    fn affine_loss_of_identical_images_under_ncc_is_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        let img = pinned_random_image(&mut rng, 6, 6);
        let v = affine_loss(&img, &img, &Ncc).unwrap();
        assert!((v + 1.0).abs() < 1e-12);
    }

    #[test]
    fn affine_loss_decreases_toward_alignment() {
        // Fixed image: a bright blob; moving: the same blob. Translating the
        // moving image toward the fixed one in 1-px steps must lower the loss
        // monotonically along the sweep.
        let blob = |cx: f64, cy: f64| {
            Image2D::from_fn(32, 32, |x, y| {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                (-(dx * dx + dy * dy) / 18.0).exp()
            })
            .unwrap()
        };
        let fixed = blob(16.0, 16.0);
        let mut last = f64::INFINITY;
        for step in 0..5 {
            let moved = blob(11.0 + step as f64, 16.0);
            let v = affine_loss(&moved, &fixed, &Ncc).unwrap();
            assert!(v < last, "loss must strictly decrease along the sweep");
            last = v;
        }
    }

    #[test]
    fn bidirectional_loss_floor_at_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let img = pinned_random_image(&mut rng, 8, 8);
        let zero = DisplacementField::zeros(8, 8).unwrap();
        let (terms, _) = bidirectional_sim_loss(&img, &img, &zero, &zero, &Ncc, false).unwrap();
        assert!((terms.fwd + 1.0).abs() < 1e-12);
        assert!((terms.bwd + 1.0).abs() < 1e-12);
        assert!((terms.inv_fwd + 1.0).abs() < 1e-12);
        assert!((terms.inv_bwd + 1.0).abs() < 1e-12);
        assert!((terms.sum() + 4.0).abs() < 1e-12);
    }

    #[test]
    fn constant_opposed_fields_invert_exactly_in_the_cycle_terms() {
        // phi_xy = (k, 0), phi_yx = (-k, 0) on a pair of images that are
        // translates of each other: constants invert exactly, so both cycle
        // terms compare an image against itself far from borders.
        let w = 24;
        let h = 16;
        let pattern = |x: f64, y: f64| ((x * 0.55).sin() + (y * 0.4).cos()) * 0.5;
        let moving = Image2D::from_fn(w, h, |x, y| pattern(x as f64, y as f64)).unwrap();
        let fixed = Image2D::from_fn(w, h, |x, y| pattern(x as f64 + 3.0, y as f64)).unwrap();
        let phi_xy = DisplacementField::from_fn(w, h, |_, _| [3.0, 0.0]).unwrap();
        let phi_yx = DisplacementField::from_fn(w, h, |_, _| [-3.0, 0.0]).unwrap();
        let (terms, _) =
            bidirectional_sim_loss(&moving, &fixed, &phi_xy, &phi_yx, &Ncc, false).unwrap();
        // The cycle terms compare round-trip-warped images with the originals;
        // constant fields invert exactly, so only border clamping keeps the
        // correlation marginally below 1.
        assert!(terms.inv_fwd < -0.95, "inv_fwd {}", terms.inv_fwd);
        assert!(terms.inv_bwd < -0.95, "inv_bwd {}", terms.inv_bwd);
    }

    #[test]
    fn bidirectional_loss_is_symmetric_under_argument_exchange() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let a = pinned_random_image(&mut rng, 8, 7);
        let b = pinned_random_image(&mut rng, 8, 7);
        let f1 = fractional_field(&mut rng, 8, 7, 0.4);
        let f2 = fractional_field(&mut rng, 8, 7, 0.4);
        let (t1, _) = bidirectional_sim_loss(&a, &b, &f1, &f2, &Ncc, false).unwrap();
        let (t2, _) = bidirectional_sim_loss(&b, &a, &f2, &f1, &Ncc, false).unwrap();
        assert!((t1.sum() - t2.sum()).abs() < 1e-12);
    }

    #[test]
    fn bidirectional_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let w = 8;
        let h = 7;
        let ax = pinned_random_image(&mut rng, w, h);
        let y = pinned_random_image(&mut rng, w, h);
        let mut phi_xy = fractional_field(&mut rng, w, h, 0.35);
        let mut phi_yx = fractional_field(&mut rng, w, h, 0.35);
        let excluded = pin_field_corners(&mut phi_xy);
        pin_field_corners(&mut phi_yx);
        let metric = WeightedMetric::new(MetricParams {
            bins: 8,
            weights: WlsWeights::default(),
            ..MetricParams::default()
        });
        let (_, grad) =
            bidirectional_sim_loss(&ax, &y, &phi_xy, &phi_yx, &metric, true).unwrap();
        let grad = grad.unwrap();

        for (vary_xy, analytic) in [(true, &grad.xy), (false, &grad.yx)] {
            let base = if vary_xy { &phi_xy } else { &phi_yx };
            let x0 = field_to_vec(base);
            let flat_grad: Vec<f64> = analytic.data().iter().flat_map(|v| [v[0], v[1]]).collect();
            let mut coords: Vec<usize> =
                (0..x0.len()).filter(|c| !excluded.contains(c)).collect();
            for k in (1..coords.len()).rev() {
                coords.swap(k, rng.gen_range(0..=k));
            }
            let opts = CheckOpts::default();
            let outcome = check_gradient(
                |v| {
                    let f = vec_to_field(v, w, h);
                    let (terms, _) = if vary_xy {
                        bidirectional_sim_loss(&ax, &y, &f, &phi_yx, &metric, false).unwrap()
                    } else {
                        bidirectional_sim_loss(&ax, &y, &phi_xy, &f, &metric, false).unwrap()
                    };
                    terms.sum()
                },
                &x0,
                &flat_grad,
                &coords,
                &opts,
            );
            assert!(outcome.passes(&opts), "vary_xy={vary_xy}: {outcome:?}");
        }
    }

    fn binary_mask(w: usize, h: usize, f: impl Fn(usize, usize) -> bool) -> LabelMask {
        let mut m = LabelMask::zeros(w, h, 2).unwrap();
        for y in 0..h {
            for x in 0..w {
                if f(x, y) {
                    m.set(x, y, 1);
                }
            }
        }
        m
    }

    #[test]
    fn dice_identities() {
        let a = binary_mask(8, 8, |x, _| x < 4);
        let b = binary_mask(8, 8, |x, _| x >= 4);
        let sa = MaskStack::new(vec![a.indicator(1)]).unwrap();
        let sb = MaskStack::new(vec![b.indicator(1)]).unwrap();
        assert_eq!(soft_dice(&sa, &sa, true).unwrap(), 0.0);
        assert_eq!(soft_dice(&sa, &sb, true).unwrap(), 1.0);
    }

    #[test]
    fn dice_half_overlap_hand_count() {
        // 4x4 grid: a = left 2 columns (8 px), b = left 3 columns (12 px),
        // overlap 8 -> 1 - 2*8/(8+12) = 0.2.
        let a = binary_mask(4, 4, |x, _| x < 2);
        let b = binary_mask(4, 4, |x, _| x < 3);
        let sa = MaskStack::new(vec![a.indicator(1)]).unwrap();
        let sb = MaskStack::new(vec![b.indicator(1)]).unwrap();
        let v = soft_dice(&sa, &sb, true).unwrap();
        assert!((v - 0.2).abs() < 1e-15);
    }

    #[test]
    fn dice_without_factor_two_leaves_residual_on_identical_masks() {
        let a = binary_mask(4, 4, |x, _| x < 2);
        let sa = MaskStack::new(vec![a.indicator(1)]).unwrap();
        let v = soft_dice(&sa, &sa, false).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dice_empty_class_contributes_no_loss() {
        let empty = MaskStack::new(vec![Image2D::zeros(4, 4).unwrap()]).unwrap();
        assert_eq!(soft_dice(&empty, &empty, true).unwrap(), 0.0);
    }

    #[test]
    fn weak_supervision_identities() {
        let m = binary_mask(16, 16, |x, y| (4..12).contains(&x) && (4..12).contains(&y));
        let zero = DisplacementField::zeros(16, 16).unwrap();
        let (v, _) = weak_supervision_loss(&m, &m, &zero, &zero, true, false).unwrap();
        assert_eq!(v, 0.0);

        let disjoint = binary_mask(16, 16, |x, y| x < 2 && y < 8);
        let other = binary_mask(16, 16, |x, y| x >= 14 && y < 8);
        let (v, _) = weak_supervision_loss(&disjoint, &other, &zero, &zero, true, false).unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn weak_supervision_shift_compensation() {
        // sy is sx shifted by (3, 0); phi_xy = (3, 0) realigns the forward
        // term to (nearly) zero away from borders.
        let sx = binary_mask(16, 16, |x, y| (4..9).contains(&x) && (5..11).contains(&y));
        let sy = binary_mask(16, 16, |x, y| (7..12).contains(&x) && (5..11).contains(&y));
        // out(p) = in(p + u(p)), so pulling sy's region back onto sx's
        // support means sampling 3 px to the left.
        let phi_xy = DisplacementField::from_fn(16, 16, |_, _| [-3.0, 0.0]).unwrap();
        let phi_yx = DisplacementField::from_fn(16, 16, |_, _| [3.0, 0.0]).unwrap();
        let (aligned, _) =
            weak_supervision_loss(&sx, &sy, &phi_xy, &phi_yx, true, false).unwrap();
        let zero = DisplacementField::zeros(16, 16).unwrap();
        let (unaligned, _) = weak_supervision_loss(&sx, &sy, &zero, &zero, true, false).unwrap();
        assert!(aligned < 1e-10, "aligned loss {aligned}");
        assert!(unaligned > 0.3, "unaligned loss {unaligned}");
    }

    #[test]
    fn weak_supervision_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let w = 12;
        let h = 10;
        let sx = binary_mask(w, h, |x, y| (3..8).contains(&x) && (2..7).contains(&y));
        let sy = binary_mask(w, h, |x, y| (4..9).contains(&x) && (3..8).contains(&y));
        let phi_xy = fractional_field(&mut rng, w, h, 0.3);
        let phi_yx = fractional_field(&mut rng, w, h, 0.3);
        let (_, grad) = weak_supervision_loss(&sx, &sy, &phi_xy, &phi_yx, true, true).unwrap();
        let grad = grad.unwrap();
        let x0 = field_to_vec(&phi_xy);
        let flat: Vec<f64> = grad.xy.data().iter().flat_map(|v| [v[0], v[1]]).collect();
        let mut coords: Vec<usize> = (0..x0.len()).collect();
        for k in (1..coords.len()).rev() {
            coords.swap(k, rng.gen_range(0..=k));
        }
        let opts = CheckOpts::default();
        let outcome = check_gradient(
            |v| {
                let f = vec_to_field(v, w, h);
                weak_supervision_loss(&sx, &sy, &f, &phi_yx, true, false)
                    .unwrap()
                    .0
            },
            &x0,
            &flat,
            &coords,
            &opts,
        );
        assert!(outcome.passes(&opts), "{outcome:?}");
    }

    #[test]
    fn anti_folding_identities() {
        let zero = DisplacementField::zeros(8, 8).unwrap();
        let (v, _) = anti_folding_loss(&zero, &zero, false).unwrap();
        assert_eq!(v, 0.0);

        // u = (-2x, 0) gives det = -1 everywhere: mean(max(0, 1)) = 1.
        let fold = DisplacementField::from_fn(8, 8, |x, _| [-2.0 * x as f64, 0.0]).unwrap();
        let (v, _) = anti_folding_loss(&fold, &zero, false).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn anti_folding_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        let w = 9;
        let h = 8;
        // A compressive field with dets straddling zero exercises the gate.
        let base = DisplacementField::from_fn(w, h, |x, y| {
            [
                -1.2 * x as f64 + 0.08 * (y as f64).sin(),
                0.1 * (x as f64 * 0.7).cos() * y as f64,
            ]
        })
        .unwrap();
        let noisy = DisplacementField::from_fn(w, h, |x, y| {
            let u = base.at(x, y);
            [u[0] + rng.gen_range(-0.05..0.05), u[1] + rng.gen_range(-0.05..0.05)]
        })
        .unwrap();
        let zero = DisplacementField::zeros(w, h).unwrap();
        let (_, grad) = anti_folding_loss(&noisy, &zero, true).unwrap();
        let grad = grad.unwrap();
        let x0 = field_to_vec(&noisy);
        let flat: Vec<f64> = grad.xy.data().iter().flat_map(|v| [v[0], v[1]]).collect();
        let mut coords: Vec<usize> = (0..x0.len()).collect();
        for k in (1..coords.len()).rev() {
            coords.swap(k, rng.gen_range(0..=k));
        }
        let opts = CheckOpts::default();
        let outcome = check_gradient(
            |v| {
                let f = vec_to_field(v, w, h);
                anti_folding_loss(&f, &zero, false).unwrap().0
            },
            &x0,
            &flat,
            &coords,
            &opts,
        );
        assert!(outcome.passes(&opts), "{outcome:?}");
    }

    #[test]
    fn smoothness_identities() {
        let c = DisplacementField::from_fn(8, 8, |_, _| [2.0, -3.0]).unwrap();
        assert_eq!(smoothness_loss(&c, false).unwrap().0, 0.0);

        // u = (0.3 x, 0): the only nonzero partial is dux/dx = 0.3 at every
        // pixel, so the mean squared gradient magnitude is 0.09 exactly.
        let linear = DisplacementField::from_fn(8, 8, |x, _| [0.3 * x as f64, 0.0]).unwrap();
        let (v, _) = smoothness_loss(&linear, false).unwrap();
        assert!((v - 0.09).abs() < 1e-12);

        // Degree-2 homogeneity: doubling the field quadruples the loss.
        let doubled = DisplacementField::from_fn(8, 8, |x, _| [0.6 * x as f64, 0.0]).unwrap();
        let (v2, _) = smoothness_loss(&doubled, false).unwrap();
        assert!((v2 - 4.0 * v).abs() < 1e-12);
    }

    #[test]
    fn smoothness_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(113);
        let w = 9;
        let h = 8;
        let field = fractional_field(&mut rng, w, h, 0.8);
        let (_, grad) = smoothness_loss(&field, true).unwrap();
        let grad = grad.unwrap();
        let x0 = field_to_vec(&field);
        let flat: Vec<f64> = grad.data().iter().flat_map(|v| [v[0], v[1]]).collect();
        let coords: Vec<usize> = (0..x0.len()).collect();
        let opts = CheckOpts::default();
        let outcome = check_gradient(
            |v| smoothness_loss(&vec_to_field(v, w, h), false).unwrap().0,
            &x0,
            &flat,
            &coords,
            &opts,
        );
        assert!(outcome.passes(&opts), "{outcome:?}");
    }

    #[test]
    fn total_loss_identity_floor_and_self_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(127);
        let img = pinned_random_image(&mut rng, 8, 8);
        let zero = DisplacementField::zeros(8, 8).unwrap();
        let lw = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            ..LossWeights::default()
        };
        let (b, _) = total_reg_loss(
            &img,
            &img,
            &zero,
            &zero,
            None,
            &Ncc,
            &lw,
            &TotalLossOptions::default(),
            false,
        )
        .unwrap();
        assert!((b.total + 4.0).abs() < 1e-12);
        assert!((b.total - b.weighted_sum(&lw)).abs() < 1e-10);
    }

    #[test]
    fn total_loss_is_monotone_in_the_penalty_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(131);
        let ax = pinned_random_image(&mut rng, 10, 9);
        let y = pinned_random_image(&mut rng, 10, 9);
        // A deliberately folding, rough field pair so both penalties are active.
        let f1 = DisplacementField::from_fn(10, 9, |x, y| {
            [-1.5 * x as f64 + (y as f64).sin(), 0.3 * (x as f64).cos()]
        })
        .unwrap();
        let f2 = fractional_field(&mut rng, 10, 9, 1.5);
        let opts = TotalLossOptions::default();
        let eval = |l1: f64, l2: f64| {
            let lw = LossWeights {
                lambda1: l1,
                lambda2: l2,
                ..LossWeights::default()
            };
            total_reg_loss(&ax, &y, &f1, &f2, None, &Ncc, &lw, &opts, false)
                .unwrap()
                .0
                .total
        };
        assert!(eval(10.0, 1.0) < eval(100.0, 1.0));
        assert!(eval(100.0, 1.0) < eval(1000.0, 1.0));
        assert!(eval(10.0, 1.0) < eval(10.0, 8.0));
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(137);
        let w = 8;
        let h = 7;
        let ax = pinned_random_image(&mut rng, w, h);
        let y = pinned_random_image(&mut rng, w, h);
        let sx = binary_mask(w, h, |x, y| (2..5).contains(&x) && (2..5).contains(&y));
        let sy = binary_mask(w, h, |x, y| (3..6).contains(&x) && (2..5).contains(&y));
        let mut phi_xy = fractional_field(&mut rng, w, h, 0.35);
        let mut phi_yx = fractional_field(&mut rng, w, h, 0.35);
        let excluded = pin_field_corners(&mut phi_xy);
        pin_field_corners(&mut phi_yx);
        let metric = WeightedMetric::new(MetricParams {
            bins: 8,
            ..MetricParams::default()
        });
        let lw = LossWeights {
            lambda1: 5.0,
            lambda2: 2.0,
            ..LossWeights::default()
        };
        let opts = TotalLossOptions::default();
        let (_, grad) = total_reg_loss(
            &ax,
            &y,
            &phi_xy,
            &phi_yx,
            Some((&sx, &sy)),
            &metric,
            &lw,
            &opts,
            true,
        )
        .unwrap();
        let grad = grad.unwrap();

        for (vary_xy, analytic) in [(true, &grad.xy), (false, &grad.yx)] {
            let base = if vary_xy { &phi_xy } else { &phi_yx };
            let x0 = field_to_vec(base);
            let flat: Vec<f64> = analytic.data().iter().flat_map(|v| [v[0], v[1]]).collect();
            let mut coords: Vec<usize> =
                (0..x0.len()).filter(|c| !excluded.contains(c)).collect();
            for k in (1..coords.len()).rev() {
                coords.swap(k, rng.gen_range(0..=k));
            }
            let opts_check = CheckOpts::default();
            let outcome = check_gradient(
                |v| {
                    let f = vec_to_field(v, w, h);
                    let (xy, yx) = if vary_xy { (&f, &phi_yx) } else { (&phi_xy, &f) };
                    total_reg_loss(&ax, &y, xy, yx, Some((&sx, &sy)), &metric, &lw, &opts, false)
                        .unwrap()
                        .0
                        .total
                },
                &x0,
                &flat,
                &coords,
                &opts_check,
            );
            assert!(outcome.passes(&opts_check), "vary_xy={vary_xy}: {outcome:?}");
        }
    }

    #[test]
    fn seg_loss_branches() {
        let w = 12;
        let h = 12;
        let xl = binary_mask(w, h, |x, y| (3..7).contains(&x) && (3..7).contains(&y));
        let pred_x = MaskStack::new(vec![xl.indicator(1)]).unwrap();
        let pred_y = MaskStack::new(vec![xl.indicator(1)]).unwrap();
        let zero = DisplacementField::zeros(w, h).unwrap();
        let lw = LossWeights::default();

        // Labels matching predictions with identity fields: both branches 0.
        let v =
            semi_supervised_seg_loss(&pred_x, &pred_y, Some(&xl), None, &zero, &zero, &lw, true)
                .unwrap();
        assert_eq!(v, 0.0);

        // lambda_r = 0 reduces the loss to the supervised dice alone.
        let off = binary_mask(w, h, |x, y| (5..9).contains(&x) && (3..7).contains(&y));
        let pred_off = MaskStack::new(vec![off.indicator(1)]).unwrap();
        let lw_sup = LossWeights {
            lambda_r: 0.0,
            ..LossWeights::default()
        };
        let v = semi_supervised_seg_loss(
            &pred_off, &pred_y, Some(&xl), None, &zero, &zero, &lw_sup, true,
        )
        .unwrap();
        let direct = soft_dice(
            &pred_off,
            &MaskStack::new(vec![xl.indicator(1)]).unwrap(),
            true,
        )
        .unwrap();
        assert!((v - direct).abs() < 1e-15);

        // Both labeled evaluates the same combination as the y-labeled case.
        let both = semi_supervised_seg_loss(
            &pred_x, &pred_y, Some(&xl), Some(&off), &zero, &zero, &lw, true,
        )
        .unwrap();
        let y_only = semi_supervised_seg_loss(
            &pred_x, &pred_y, None, Some(&off), &zero, &zero, &lw, true,
        )
        .unwrap();
        assert_eq!(both, y_only);

        // No labels at all is an error.
        assert!(matches!(
            semi_supervised_seg_loss(&pred_x, &pred_y, None, None, &zero, &zero, &lw, true),
            Err(LossError::NoLabels)
        ));
    }
}
