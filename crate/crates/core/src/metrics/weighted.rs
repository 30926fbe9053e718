//! Weighted sum of the four similarity components.

use crate::error::GridError;
use crate::image::Image2D;

use super::{MetricParams, MetricValue, SimilarityMetric, WlsWeights};

fn evaluate_inner(
    i: &Image2D,
    j: &Image2D,
    weights: &WlsWeights,
    params: &MetricParams,
    want_grad: bool,
) -> Result<MetricValue, GridError> {
    i.check_same_grid(j)?;
    weights.validate()?;
    let mut score = 0.0;
    let mut grad = want_grad.then(|| Image2D::zeros(i.width(), i.height()).unwrap());
    // Zero-weight components are skipped outright, so a single-component
    // weighting reproduces that component bit-for-bit.
    let mut accumulate = |weight: f64,
                          eval: &dyn Fn(bool) -> Result<MetricValue, GridError>|
     -> Result<(), GridError> {
        if weight == 0.0 {
            return Ok(());
        }
        let v = eval(want_grad)?;
        score += weight * v.score;
        if let (Some(total), Some(g)) = (grad.as_mut(), v.grad) {
            for (t, s) in total.data_mut().iter_mut().zip(g.data()) {
                *t += weight * s;
            }
        }
        Ok(())
    };
    accumulate(weights.a, &|wg| super::ncc::evaluate_inner(i, j, wg))?;
    accumulate(weights.b, &|wg| {
        super::mi::evaluate_inner(i, j, params.bins, wg)
    })?;
    accumulate(weights.c, &|wg| {
        super::ngf::evaluate_inner(i, j, params.eps, wg)
    })?;
    accumulate(weights.d, &|wg| {
        super::mind::evaluate_inner(i, j, params.patch_radius, params.sigma, wg)
    })?;
    Ok(MetricValue { score, grad })
}

/// Weighted multimodal similarity: `a*ncc + b*mi + c*ngf + d*mind`.
pub fn wls(
    i: &Image2D,
    j: &Image2D,
    weights: &WlsWeights,
    params: &MetricParams,
) -> Result<MetricValue, GridError> {
    evaluate_inner(i, j, weights, params, true)
}

/// Strategy wrapper for the registry; carries its component parameters.
pub struct WeightedMetric {
    params: MetricParams,
}

impl WeightedMetric {
    pub fn new(params: MetricParams) -> Self {
        Self { params }
    }
}

impl SimilarityMetric for WeightedMetric {
    fn name(&self) -> &'static str {
        "weighted"
    }

    fn evaluate(&self, i: &Image2D, j: &Image2D) -> Result<MetricValue, GridError> {
        evaluate_inner(i, j, &self.params.weights, &self.params, true)
    }

    fn score(&self, i: &Image2D, j: &Image2D) -> Result<f64, GridError> {
        Ok(evaluate_inner(i, j, &self.params.weights, &self.params, false)?.score)
    }
}
