//! Quantitative evaluation of a series correction: Dice overlap, exact
//! Hausdorff distances on the inner (endocardial) and outer (epicardial)
//! contours of the annular myocardium class, folding statistics, and report
//! assembly (CSV rows plus a JSON-serializable structure).

use serde::Serialize;

use crate::error::{EvalError, GridError};
use crate::field::{AffineParams, DisplacementField};
use crate::image::LabelMask;
use crate::optimizer::{FrameStatus, SeriesCorrection};
use crate::warp::{compose, warp_labels};

/// Dice similarity of one class: `2|A∩B| / (|A| + |B|)`, 1.0 when both
/// masks are empty for the class.
pub fn dsc(a: &LabelMask, b: &LabelMask, class_id: u8) -> Result<f64, GridError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(GridError::GridMismatch {
            left_w: a.width(),
            left_h: a.height(),
            right_w: b.width(),
            right_h: b.height(),
        });
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&la, &lb) in a.data().iter().zip(b.data()) {
        let ia = la == class_id;
        let ib = lb == class_id;
        inter += usize::from(ia && ib);
        total += usize::from(ia) + usize::from(ib);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Pixels of `class_id` with at least one 4-neighbour that is not
/// `class_id`; neighbours outside the grid count as non-mask, so a region
/// touching the border contributes its border pixels.
pub fn boundary_pixels(mask: &LabelMask, class_id: u8) -> Vec<[usize; 2]> {
    let w = mask.width();
    let h = mask.height();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.at(x, y) != class_id {
                continue;
            }
            let exposed = (x == 0 || mask.at(x - 1, y) != class_id)
                || (x + 1 == w || mask.at(x + 1, y) != class_id)
                || (y == 0 || mask.at(x, y - 1) != class_id)
                || (y + 1 == h || mask.at(x, y + 1) != class_id);
            if exposed {
                out.push([x, y]);
            }
        }
    }
    out
}

fn directed_max_min(from: &[[usize; 2]], to: &[[usize; 2]]) -> f64 {
    let mut worst = 0.0f64;
    for p in from {
        let mut best = f64::INFINITY;
        for q in to {
            let dx = p[0] as f64 - q[0] as f64;
            let dy = p[1] as f64 - q[1] as f64;
            best = best.min(dx * dx + dy * dy);
        }
        worst = worst.max(best);
    }
    worst.sqrt()
}

/// Exact symmetric Hausdorff distance between two point sets, px.
pub fn point_set_hausdorff(a: &[[usize; 2]], b: &[[usize; 2]]) -> f64 {
    directed_max_min(a, b).max(directed_max_min(b, a))
}

/// Exact Hausdorff distance between the boundaries of one class in two
/// masks. Both masks must contain the class.
pub fn hausdorff(a: &LabelMask, b: &LabelMask, class_id: u8) -> Result<f64, EvalError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(EvalError::Grid(GridError::GridMismatch {
            left_w: a.width(),
            left_h: a.height(),
            right_w: b.width(),
            right_h: b.height(),
        }));
    }
    let ba = boundary_pixels(a, class_id);
    let bb = boundary_pixels(b, class_id);
    if ba.is_empty() || bb.is_empty() {
        return Err(EvalError::EmptyMask { class_id });
    }
    Ok(point_set_hausdorff(&ba, &bb))
}

/// Splits the class boundary into its inner and outer contour by
/// 8-connected component analysis: of the two largest components, the one
/// with the smaller mean distance to the class centroid is the inner
/// (endocardial) contour.
pub fn endo_epi_boundaries(
    mask: &LabelMask,
    class_id: u8,
) -> Result<(Vec<[usize; 2]>, Vec<[usize; 2]>), EvalError> {
    let boundary = boundary_pixels(mask, class_id);
    if boundary.is_empty() {
        return Err(EvalError::EmptyMask { class_id });
    }
    let w = mask.width();
    let mut index_of = vec![usize::MAX; w * mask.height()];
    for (i, p) in boundary.iter().enumerate() {
        index_of[p[1] * w + p[0]] = i;
    }
    let mut component = vec![usize::MAX; boundary.len()];
    let mut num_components = 0;
    for start in 0..boundary.len() {
        if component[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        component[start] = num_components;
        while let Some(i) = stack.pop() {
            let [x, y] = boundary[i];
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= mask.height() as i64 {
                        continue;
                    }
                    let j = index_of[ny as usize * w + nx as usize];
                    if j != usize::MAX && component[j] == usize::MAX {
                        component[j] = num_components;
                        stack.push(j);
                    }
                }
            }
        }
        num_components += 1;
    }
    if num_components < 2 {
        return Err(EvalError::BadTopology {
            class_id,
            found: num_components,
        });
    }
    // Two largest components are the candidate contours.
    let mut sizes = vec![0usize; num_components];
    for &c in &component {
        sizes[c] += 1;
    }
    let mut order: Vec<usize> = (0..num_components).collect();
    order.sort_by_key(|&c| std::cmp::Reverse(sizes[c]));
    let (ca, cb) = (order[0], order[1]);

    let (mut cx, mut cy, mut n) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..mask.height() {
        for x in 0..w {
            if mask.at(x, y) == class_id {
                cx += x as f64;
                cy += y as f64;
                n += 1.0;
            }
        }
    }
    cx /= n;
    cy /= n;
    let mean_radius = |c: usize| {
        let mut total = 0.0;
        let mut count = 0.0;
        for (i, p) in boundary.iter().enumerate() {
            if component[i] == c {
                total += ((p[0] as f64 - cx).powi(2) + (p[1] as f64 - cy).powi(2)).sqrt();
                count += 1.0;
            }
        }
        total / count
    };
    let (endo_c, epi_c) = if mean_radius(ca) < mean_radius(cb) {
        (ca, cb)
    } else {
        (cb, ca)
    };
    let pick = |c: usize| {
        boundary
            .iter()
            .enumerate()
            .filter(|(i, _)| component[*i] == c)
            .map(|(_, p)| *p)
            .collect()
    };
    Ok((pick(endo_c), pick(epi_c)))
}

/// Hausdorff distances of the inner and outer contours of `class_id`
/// between two masks: `(hd_endo, hd_epi)`.
pub fn hd_endo_epi(a: &LabelMask, b: &LabelMask, class_id: u8) -> Result<(f64, f64), EvalError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(EvalError::Grid(GridError::GridMismatch {
            left_w: a.width(),
            left_h: a.height(),
            right_w: b.width(),
            right_h: b.height(),
        }));
    }
    let (endo_a, epi_a) = endo_epi_boundaries(a, class_id)?;
    let (endo_b, epi_b) = endo_epi_boundaries(b, class_id)?;
    Ok((
        point_set_hausdorff(&endo_a, &endo_b),
        point_set_hausdorff(&epi_a, &epi_b),
    ))
}

/// One frame's row of the report.
#[derive(Debug, Clone, Serialize)]
pub struct FrameEval {
    pub frame: usize,
    pub dsc: f64,
    pub hd_endo: f64,
    pub hd_epi: f64,
    pub folding: usize,
    pub seconds: f64,
}

/// Aggregated evaluation of one method over a series. Aggregates are means
/// over non-reference frames.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub reference_index: usize,
    pub dsc: f64,
    pub hd_endo: f64,
    pub hd_epi: f64,
    pub folding_mean: f64,
    pub per_frame: Vec<FrameEval>,
    pub runtime_seconds: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "method,frame,dsc,hd_endo,hd_epi,folding,seconds";

    /// Per-frame rows plus one `mean` row carrying the aggregates and the
    /// total runtime.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for row in &self.per_frame {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{},{:.3}\n",
                self.method, row.frame, row.dsc, row.hd_endo, row.hd_epi, row.folding, row.seconds
            ));
        }
        out.push_str(&format!(
            "{},mean,{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            self.method, self.dsc, self.hd_endo, self.hd_epi, self.folding_mean, self.runtime_seconds
        ));
        out
    }
}

/// Endo/epi distances with a defined value for degenerate masks: a mask
/// whose class boundary no longer splits into two contours (the annulus was
/// crushed) falls back to the whole-boundary Hausdorff on both rows, and a
/// mask that lost the class entirely scores the grid diagonal — the largest
/// distance the grid supports. Catastrophic misregistration therefore shows
/// up as a large finite contour distance instead of aborting the report.
fn hd_endo_epi_or_degenerate(
    a: &LabelMask,
    b: &LabelMask,
    class_id: u8,
) -> Result<(f64, f64), EvalError> {
    let diagonal = ((a.width() as f64).powi(2) + (a.height() as f64).powi(2)).sqrt();
    match hd_endo_epi(a, b, class_id) {
        Ok(pair) => Ok(pair),
        Err(EvalError::BadTopology { .. }) => match hausdorff(a, b, class_id) {
            Ok(h) => Ok((h, h)),
            Err(EvalError::EmptyMask { .. }) => Ok((diagonal, diagonal)),
            Err(e) => Err(e),
        },
        Err(EvalError::EmptyMask { .. }) => Ok((diagonal, diagonal)),
        Err(e) => Err(e),
    }
}

/// Evaluates per-frame masks against the reference frame's mask. `foldings`
/// and `seconds` run parallel to `masks`; the reference frame scores
/// dsc = 1, hd = 0 by construction and is excluded from the aggregates.
/// Frames whose warped mask lost the two-contour annulus topology score the
/// fallback distances of [`hd_endo_epi_or_degenerate`] rather than failing.
pub fn eval_frames(
    method: &str,
    masks: &[LabelMask],
    reference_index: usize,
    myocardium_class: u8,
    foldings: &[usize],
    seconds: &[f64],
) -> Result<EvalReport, EvalError> {
    assert_eq!(masks.len(), foldings.len());
    assert_eq!(masks.len(), seconds.len());
    assert!(reference_index < masks.len(), "reference index out of range");
    let reference = &masks[reference_index];
    let mut per_frame = Vec::with_capacity(masks.len());
    let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (i, mask) in masks.iter().enumerate() {
        let (d, (he, hp)) = if i == reference_index {
            (1.0, (0.0, 0.0))
        } else {
            (
                dsc(mask, reference, myocardium_class)?,
                hd_endo_epi_or_degenerate(mask, reference, myocardium_class)?,
            )
        };
        if i != reference_index {
            sums.0 += d;
            sums.1 += he;
            sums.2 += hp;
            sums.3 += foldings[i] as f64;
        }
        per_frame.push(FrameEval {
            frame: i,
            dsc: d,
            hd_endo: he,
            hd_epi: hp,
            folding: foldings[i],
            seconds: seconds[i],
        });
    }
    let n = (masks.len() - 1).max(1) as f64;
    Ok(EvalReport {
        method: method.to_string(),
        reference_index,
        dsc: sums.0 / n,
        hd_endo: sums.1 / n,
        hd_epi: sums.2 / n,
        folding_mean: sums.3 / n,
        per_frame,
        runtime_seconds: seconds.iter().sum(),
    })
}

/// Ground-truth masks moved by the correction each frame received: the
/// registered frames' masks are pulled back through the estimated forward
/// field; reference and failed frames keep their original masks.
pub fn corrected_masks(gt_masks: &[LabelMask], correction: &SeriesCorrection) -> Vec<LabelMask> {
    gt_masks
        .iter()
        .zip(&correction.frames)
        .map(|(mask, status)| match status {
            FrameStatus::Registered(r) => {
                let full = full_correction_field(&r.affine, &r.field_xy)
                    .expect("matching grids by construction");
                warp_labels(mask, &full)
            }
            _ => mask.clone(),
        })
        .collect()
}

/// The single field equivalent to the two-stage correction: deformable
/// warp composed with the affine stage's field, on the deformable field's
/// grid. Applying it reproduces the two-stage geometric mapping:
/// out(p) = img(p + u_f(p) + u_a(p + u_f(p))).
pub fn full_correction_field(
    affine: &AffineParams,
    field_xy: &DisplacementField,
) -> Result<DisplacementField, GridError> {
    let afield = affine.to_field(field_xy.width(), field_xy.height())?;
    compose(&afield, field_xy)
}

/// Evaluates the uncorrected series: each frame's ground-truth mask against
/// the reference mask, zero folding.
pub fn evaluate_baseline(
    method: &str,
    gt_masks: &[LabelMask],
    reference_index: usize,
    myocardium_class: u8,
) -> Result<EvalReport, EvalError> {
    let zeros = vec![0usize; gt_masks.len()];
    let secs = vec![0.0f64; gt_masks.len()];
    eval_frames(method, gt_masks, reference_index, myocardium_class, &zeros, &secs)
}

/// Evaluates a correction: ground-truth masks moved by each frame's
/// estimated correction, scored against the reference mask, with per-frame
/// folding counts and solve times from the correction results.
pub fn evaluate_correction(
    method: &str,
    gt_masks: &[LabelMask],
    correction: &SeriesCorrection,
    reference_index: usize,
    myocardium_class: u8,
) -> Result<EvalReport, EvalError> {
    assert_eq!(gt_masks.len(), correction.frames.len());
    let masks = corrected_masks(gt_masks, correction);
    let foldings: Vec<usize> = correction
        .frames
        .iter()
        .map(|s| match s {
            FrameStatus::Registered(r) => r.folding,
            _ => 0,
        })
        .collect();
    let seconds: Vec<f64> = correction
        .frames
        .iter()
        .map(|s| match s {
            FrameStatus::Registered(r) => r.seconds,
            _ => 0.0,
        })
        .collect();
    eval_frames(
        method,
        &masks,
        reference_index,
        myocardium_class,
        &foldings,
        &seconds,
    )
}
