//! Image-similarity metrics and their weighted combination.
//!
//! Four components — NCC, MI, NGF, MIND — each produce a scalar score
//! (higher = more similar) and an analytic gradient with respect to the
//! first image. The weighted sum combines them with per-component weights.
//!
//! Every metric first windows both inputs to [0, 1] by min–max normalization
//! so that configured weights, bin counts, and epsilons keep one meaning
//! across datasets. The window bounds are treated as constants by the
//! gradients (a constant image windows to all-zeros and contributes no
//! gradient).
//!
//! Each variant implements [`SimilarityMetric`] and registers itself by name
//! in [`MetricRegistry`], so the active metric is a runtime choice.

mod mi;
mod mind;
mod ncc;
mod ngf;
mod weighted;

pub use mi::{mi, MutualInformation};
pub use mind::{mind, Mind};
pub use ncc::{ncc, Ncc};
pub use ngf::{ngf, NormalizedGradientFields};
pub use weighted::{wls, WeightedMetric};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::GridError;
use crate::image::Image2D;

/// A similarity score together with its gradient w.r.t. the first image
/// (present only when the evaluation was asked for derivatives).
#[derive(Debug, Clone)]
pub struct MetricValue {
    pub score: f64,
    pub grad: Option<Image2D>,
}

/// Weights of the four components in the weighted similarity sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WlsWeights {
    /// NCC weight.
    pub a: f64,
    /// MI weight.
    pub b: f64,
    /// NGF weight.
    pub c: f64,
    /// MIND weight.
    pub d: f64,
}

impl WlsWeights {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Result<Self, GridError> {
        let w = Self { a, b, c, d };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let all = [self.a, self.b, self.c, self.d];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(GridError::Invalid(
                "metric weights must be finite and non-negative".into(),
            ));
        }
        if all.iter().all(|v| *v == 0.0) {
            return Err(GridError::Invalid(
                "at least one metric weight must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Weight on a single component, the rest zero.
    pub fn single(component: usize) -> Self {
        let mut w = Self {
            a: 0.0,
            b: 0.0,
            c: 0.0,
            d: 0.0,
        };
        match component {
            0 => w.a = 1.0,
            1 => w.b = 1.0,
            2 => w.c = 1.0,
            _ => w.d = 1.0,
        }
        w
    }
}

impl Default for WlsWeights {
    /// Published defaults for the weighted similarity loss.
    fn default() -> Self {
        Self {
            a: 1.1,
            b: 4.0,
            c: 3.3,
            d: 8.3,
        }
    }
}

/// Tunables shared by the metric constructors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricParams {
    /// Histogram bins for MI.
    pub bins: usize,
    /// Gradient-magnitude regularizer for NGF (on [0,1]-windowed images).
    pub eps: f64,
    /// Patch radius for MIND (1 = 3x3 patches).
    pub patch_radius: usize,
    /// Gaussian patch-weight sigma for MIND, in pixels.
    pub sigma: f64,
    /// Component weights for the weighted metric.
    pub weights: WlsWeights,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            bins: 32,
            eps: 1e-2,
            patch_radius: 1,
            sigma: 0.5,
            weights: WlsWeights::default(),
        }
    }
}

impl MetricParams {
    pub fn validate(&self) -> Result<(), GridError> {
        if self.bins < 2 {
            return Err(GridError::Invalid(format!(
                "mi needs at least 2 bins, got {}",
                self.bins
            )));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(GridError::Invalid("ngf eps must be positive".into()));
        }
        if self.patch_radius == 0 {
            return Err(GridError::Invalid("mind patch radius must be >= 1".into()));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(GridError::Invalid("mind sigma must be positive".into()));
        }
        self.weights.validate()
    }
}

/// A similarity metric: scalar score, higher = more similar, plus an
/// analytic gradient with respect to the first image.
pub trait SimilarityMetric: Send + Sync {
    /// Registry name of this metric.
    fn name(&self) -> &'static str;

    /// Score plus gradient w.r.t. the first image.
    fn evaluate(&self, i: &Image2D, j: &Image2D) -> Result<MetricValue, GridError>;

    /// Score only; cheaper when no derivatives are needed (line searches).
    fn score(&self, i: &Image2D, j: &Image2D) -> Result<f64, GridError> {
        Ok(self.evaluate(i, j)?.score)
    }
}

type MetricBuilder = fn(&MetricParams) -> Box<dyn SimilarityMetric>;

/// By-name registry of metric constructors. The CLI and the solver configs
/// pick the active metric via its registered name.
pub struct MetricRegistry {
    builders: BTreeMap<&'static str, MetricBuilder>,
}

impl MetricRegistry {
    /// An empty registry.
    pub fn new() -> Self {
        Self {
            builders: BTreeMap::new(),
        }
    }

    /// A registry with all built-in metrics registered.
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register("ncc", |_| Box::new(Ncc));
        r.register("mi", |p| Box::new(MutualInformation { bins: p.bins }));
        r.register("ngf", |p| Box::new(NormalizedGradientFields { eps: p.eps }));
        r.register("mind", |p| {
            Box::new(Mind {
                patch_radius: p.patch_radius,
                sigma: p.sigma,
            })
        });
        r.register("weighted", |p| Box::new(WeightedMetric::new(*p)));
        r
    }

    /// Registers (or replaces) a named constructor.
    pub fn register(&mut self, name: &'static str, builder: MetricBuilder) {
        self.builders.insert(name, builder);
    }

    /// Instantiates a metric by name, if registered.
    pub fn build(
        &self,
        name: &str,
        params: &MetricParams,
    ) -> Option<Box<dyn SimilarityMetric>> {
        self.builders.get(name).map(|b| b(params))
    }

    /// Registered names, sorted.
    pub fn names(&self) -> Vec<&'static str> {
        self.builders.keys().copied().collect()
    }
}

impl Default for MetricRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

/// Windows an image to [0, 1]; returns the chain factor `d windowed / d raw`
/// (zero for a constant image, which windows to all-zeros).
pub(crate) fn window_unit(img: &Image2D) -> (Image2D, f64) {
    let (lo, hi) = img.min_max();
    if hi > lo {
        let scale = 1.0 / (hi - lo);
        let out = Image2D::from_fn(img.width(), img.height(), |x, y| (img.at(x, y) - lo) * scale)
            .expect("windowed grid is valid");
        (out, scale)
    } else {
        (
            Image2D::zeros(img.width(), img.height()).expect("windowed grid is valid"),
            0.0,
        )
    }
}

/// Scales a gradient computed on the windowed image back to the raw image.
pub(crate) fn chain_window(grad: Image2D, scale: f64) -> Image2D {
    if scale == 1.0 {
        return grad;
    }
    let mut g = grad;
    for v in g.data_mut() {
        *v *= scale;
    }
    g
}
