//! Global zero-normalized cross-correlation.

use crate::error::GridError;
use crate::image::Image2D;

use super::{chain_window, window_unit, MetricValue, SimilarityMetric};

pub(super) fn evaluate_inner(i: &Image2D, j: &Image2D, want_grad: bool) -> Result<MetricValue, GridError> {
    i.check_same_grid(j)?;
    let (wi, scale_i) = window_unit(i);
    let (wj, _) = window_unit(j);
    let mean_i = wi.mean();
    let mean_j = wj.mean();
    // a = I - mean(I), b = J - mean(J); score = <a,b> / sqrt(<a,a><b,b>).
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (vi, vj) in wi.data().iter().zip(wj.data()) {
        let a = vi - mean_i;
        let b = vj - mean_j;
        ab += a * b;
        aa += a * a;
        bb += b * b;
    }
    if aa == 0.0 || bb == 0.0 {
        // A constant argument has zero variance; the correlation is undefined
        // and the score is fixed at 0 with no usable gradient direction.
        let grad = want_grad.then(|| Image2D::zeros(i.width(), i.height()).unwrap());
        return Ok(MetricValue { score: 0.0, grad });
    }
    let denom = (aa * bb).sqrt();
    let score = ab / denom;
    let grad = want_grad.then(|| {
        // d score / d I_p = (1/sqrt(aa*bb)) * (b_p - (ab/aa) * a_p); the
        // centering terms cancel because sum(a) = sum(b) = 0.
        let g = Image2D::from_fn(i.width(), i.height(), |x, y| {
            let a = wi.at(x, y) - mean_i;
            let b = wj.at(x, y) - mean_j;
            (b - (ab / aa) * a) / denom
        })
        .expect("gradient grid is valid");
        chain_window(g, scale_i)
    });
    Ok(MetricValue { score, grad })
}

/// Zero-normalized cross-correlation score and gradient w.r.t. `i`.
pub fn ncc(i: &Image2D, j: &Image2D) -> Result<MetricValue, GridError> {
    evaluate_inner(i, j, true)
}

/// Strategy wrapper for the registry.
pub struct Ncc;

impl SimilarityMetric for Ncc {
    fn name(&self) -> &'static str {
        "ncc"
    }

    fn evaluate(&self, i: &Image2D, j: &Image2D) -> Result<MetricValue, GridError> {
        evaluate_inner(i, j, true)
    }

    fn score(&self, i: &Image2D, j: &Image2D) -> Result<f64, GridError> {
        Ok(evaluate_inner(i, j, false)?.score)
    }
}
