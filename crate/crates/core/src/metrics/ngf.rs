//! Normalized gradient fields (squared-inner-product form).
//!
//! Score = mean over pixels of
//! `<grad I, grad J>^2 / ((|grad I|^2 + eps^2) (|grad J|^2 + eps^2))`,
//! in [0, 1]; it rewards aligned (or anti-aligned) edges regardless of
//! intensity scale, with `eps` damping the contribution of flat regions.

use crate::diff::{gradient, gradient_adjoint};
use crate::error::GridError;
use crate::image::Image2D;

use super::{chain_window, window_unit, MetricValue, SimilarityMetric};

pub(super) fn evaluate_inner(
    i: &Image2D,
    j: &Image2D,
    eps: f64,
    want_grad: bool,
) -> Result<MetricValue, GridError> {
    i.check_same_grid(j)?;
    assert!(eps > 0.0, "ngf eps must be positive");
    let (wi, scale_i) = window_unit(i);
    let (wj, _) = window_unit(j);
    let (gix, giy) = gradient(&wi);
    let (gjx, gjy) = gradient(&wj);
    let w = i.width();
    let h = i.height();
    let n = (w * h) as f64;
    let e2 = eps * eps;

    let mut score = 0.0;
    // Per-pixel weights for the adjoint pass: d score / d (grad I components).
    let mut wx = want_grad.then(|| vec![0.0f64; w * h]);
    let mut wy = want_grad.then(|| vec![0.0f64; w * h]);
    for y in 0..h {
        for x in 0..w {
            let (ix, iy) = (gix.at(x, y), giy.at(x, y));
            let (jx, jy) = (gjx.at(x, y), gjy.at(x, y));
            let dot = ix * jx + iy * jy;
            let qi = ix * ix + iy * iy + e2;
            let qj = jx * jx + jy * jy + e2;
            score += dot * dot / (qi * qj);
            if let (Some(wx), Some(wy)) = (wx.as_mut(), wy.as_mut()) {
                // d/d(ix) [dot^2/(qi qj)] = 2 dot (jx qi - dot ix) / (qi^2 qj)
                let common = 2.0 * dot / (qi * qi * qj * n);
                wx[y * w + x] = common * (jx * qi - dot * ix);
                wy[y * w + x] = common * (jy * qi - dot * iy);
            }
        }
    }
    score /= n;

    let grad = match (wx, wy) {
        (Some(wx), Some(wy)) => {
            let wx = Image2D::new(w, h, wx).expect("weight grid is valid");
            let wy = Image2D::new(w, h, wy).expect("weight grid is valid");
            Some(chain_window(gradient_adjoint(&wx, &wy), scale_i))
        }
        _ => None,
    };
    Ok(MetricValue { score, grad })
}

/// Normalized-gradient-field alignment score and gradient w.r.t. `i`.
pub fn ngf(i: &Image2D, j: &Image2D, eps: f64) -> Result<MetricValue, GridError> {
    evaluate_inner(i, j, eps, true)
}

/// Strategy wrapper for the registry.
pub struct NormalizedGradientFields {
    pub eps: f64,
}

impl SimilarityMetric for NormalizedGradientFields {
    fn name(&self) -> &'static str {
        "ngf"
    }

    fn evaluate(&self, i: &Image2D, j: &Image2D) -> Result<MetricValue, GridError> {
        evaluate_inner(i, j, self.eps, true)
    }

    fn score(&self, i: &Image2D, j: &Image2D) -> Result<f64, GridError> {
        Ok(evaluate_inner(i, j, self.eps, false)?.score)
    }
}
