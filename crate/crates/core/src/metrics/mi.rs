//! Mutual information over a soft-binned (partial-volume) joint histogram.
//!
//! Each [0,1]-windowed intensity lands at the continuous bin coordinate
//! `t = v * (bins - 1)` and spreads its unit mass over the two neighboring
//! bins with linear hat weights. MI is computed in nats from the resulting
//! joint distribution. The hat kernels make the score piecewise-smooth in
//! the intensities, which is what the analytic gradient differentiates; in
//! the hard-binning limit (every `t` integral) the construction reduces to
//! an ordinary histogram.

use crate::error::GridError;
use crate::image::Image2D;

use super::{chain_window, window_unit, MetricValue, SimilarityMetric};

/// Guards `ln` against empty histogram cells; gradients at such cells are
/// one-sided and excluded from finite-difference comparisons anyway.
const LOG_FLOOR: f64 = 1e-300;

/// Hat-weight assignment of a windowed intensity onto two adjacent bins.
#[derive(Clone, Copy)]
struct BinPair {
    lo: usize,
    w_lo: f64,
}

fn soft_bin(v: f64, bins: usize) -> BinPair {
    let t = (v.clamp(0.0, 1.0)) * (bins - 1) as f64;
    let lo = (t.floor() as usize).min(bins - 2);
    BinPair {
        lo,
        w_lo: 1.0 - (t - lo as f64),
    }
}

pub(super) fn evaluate_inner(
    i: &Image2D,
    j: &Image2D,
    bins: usize,
    want_grad: bool,
) -> Result<MetricValue, GridError> {
    i.check_same_grid(j)?;
    assert!(bins >= 2, "mi needs at least 2 bins");
    let (wi, scale_i) = window_unit(i);
    let (wj, scale_j) = window_unit(j);
    if scale_i == 0.0 || scale_j == 0.0 {
        // A constant image has a degenerate marginal: MI is 0 by definition
        // of independence from a point mass.
        let grad = want_grad.then(|| Image2D::zeros(i.width(), i.height()).unwrap());
        return Ok(MetricValue { score: 0.0, grad });
    }
    let n = wi.data().len();
    let inv_n = 1.0 / n as f64;

    let pairs_i: Vec<BinPair> = wi.data().iter().map(|&v| soft_bin(v, bins)).collect();
    let pairs_j: Vec<BinPair> = wj.data().iter().map(|&v| soft_bin(v, bins)).collect();

    // Joint and marginal distributions, accumulated sequentially for
    // bit-reproducible results.
    let mut joint = vec![0.0f64; bins * bins];
    let mut marg_i = vec![0.0f64; bins];
    let mut marg_j = vec![0.0f64; bins];
    for (a, b) in pairs_i.iter().zip(&pairs_j) {
        let (ai, aw) = (a.lo, a.w_lo);
        let (bi, bw) = (b.lo, b.w_lo);
        joint[ai * bins + bi] += aw * bw * inv_n;
        joint[ai * bins + bi + 1] += aw * (1.0 - bw) * inv_n;
        joint[(ai + 1) * bins + bi] += (1.0 - aw) * bw * inv_n;
        joint[(ai + 1) * bins + bi + 1] += (1.0 - aw) * (1.0 - bw) * inv_n;
        marg_i[ai] += aw * inv_n;
        marg_i[ai + 1] += (1.0 - aw) * inv_n;
        marg_j[bi] += bw * inv_n;
        marg_j[bi + 1] += (1.0 - bw) * inv_n;
    }

    let mut score = 0.0;
    for a in 0..bins {
        for b in 0..bins {
            let p = joint[a * bins + b];
            if p > 0.0 {
                score += p * (p / (marg_i[a] * marg_j[b])).ln();
            }
        }
    }

    let grad = if want_grad {
        // d MI / d weight_i(a at pixel p) = (1/N) [ sum_b w_j(b,p) ln p_ab - ln pI_a ]
        // (the +1 terms cancel since the pixel's J-weights sum to 1), then
        // chained through the hat kernel: d w_lo / d t = -1, d w_hi / d t = +1,
        // d t / d raw = (bins-1) * window scale.
        let ln_joint: Vec<f64> = joint.iter().map(|&p| p.max(LOG_FLOOR).ln()).collect();
        let ln_marg_i: Vec<f64> = marg_i.iter().map(|&p| p.max(LOG_FLOOR).ln()).collect();
        let mut g = vec![0.0f64; n];
        for (p, (a, b)) in pairs_i.iter().zip(&pairs_j).enumerate() {
            let d_bin = |ai: usize| -> f64 {
                let row = &ln_joint[ai * bins..(ai + 1) * bins];
                let mix = b.w_lo * row[b.lo] + (1.0 - b.w_lo) * row[b.lo + 1];
                inv_n * (mix - ln_marg_i[ai])
            };
            let dt = d_bin(a.lo + 1) - d_bin(a.lo);
            g[p] = dt * (bins - 1) as f64;
        }
        Some(chain_window(
            Image2D::new(i.width(), i.height(), g).expect("gradient grid is valid"),
            scale_i,
        ))
    } else {
        None
    };
    Ok(MetricValue { score, grad })
}

/// Mutual information (nats) and its gradient w.r.t. `i`.
pub fn mi(i: &Image2D, j: &Image2D, bins: usize) -> Result<MetricValue, GridError> {
    evaluate_inner(i, j, bins, true)
}

/// Strategy wrapper for the registry.
pub struct MutualInformation {
    pub bins: usize,
}

impl SimilarityMetric for MutualInformation {
    fn name(&self) -> &'static str {
        "mi"
    }

    fn evaluate(&self, i: &Image2D, j: &Image2D) -> Result<MetricValue, GridError> {
        evaluate_inner(i, j, self.bins, true)
    }

    fn score(&self, i: &Image2D, j: &Image2D) -> Result<f64, GridError> {
        Ok(evaluate_inner(i, j, self.bins, false)?.score)
    }
}
