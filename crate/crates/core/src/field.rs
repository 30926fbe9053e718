//! Dense displacement fields and affine transform parameters.

use crate::error::GridError;
use crate::image::MIN_EDGE;

/// A dense 2-vector field on the image grid. `at(x, y) = [ux, uy]` is the
/// displacement in pixels that the warp adds to the sampling location, i.e.
/// a warped image reads `img(p + u(p))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    width: usize,
    height: usize,
    data: Vec<[f64; 2]>,
}

impl DisplacementField {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 2]>) -> Result<Self, GridError> {
        if width < MIN_EDGE || height < MIN_EDGE {
            return Err(GridError::GridTooSmall {
                w: width,
                h: height,
                min: MIN_EDGE,
            });
        }
        if data.len() != width * height {
            return Err(GridError::LengthMismatch {
                len: data.len(),
                w: width,
                h: height,
            });
        }
        if let Some(index) = data
            .iter()
            .position(|v| !v[0].is_finite() || !v[1].is_finite())
        {
            return Err(GridError::NonFinite { index });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// The identity (all-zero) field.
    pub fn zeros(width: usize, height: usize) -> Result<Self, GridError> {
        Self::new(width, height, vec![[0.0; 2]; width * height])
    }

    /// Builds a field by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 2],
    ) -> Result<Self, GridError> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[[f64; 2]] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [[f64; 2]] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [f64; 2] {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f64; 2]) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = v;
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_same_grid(&self, other: &Self) -> Result<(), GridError> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(GridError::GridMismatch {
                left_w: self.width,
                left_h: self.height,
                right_w: other.width,
                right_h: other.height,
            })
        }
    }

    /// Largest displacement magnitude over the grid.
    pub fn max_magnitude(&self) -> f64 {
        self.data
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt())
            .fold(0.0, f64::max)
    }
}

/// Parameters of a 2D affine transform acting on coordinates normalized to
/// `[-1, 1]` along each axis (the usual sampling-grid convention): with
/// `q = [xn, yn, 1]`, the transform maps `qn' = theta * q` and the sampled
/// position is `qn'` mapped back to pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    /// Row-major 2x3 matrix; row 0 produces `xn'`, row 1 produces `yn'`.
    pub theta: [[f64; 3]; 2],
}

impl AffineParams {
    /// The identity transform.
    pub fn identity() -> Self {
        Self {
            theta: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    /// A pure translation by `(tx, ty)` pixels on a `width x height` grid.
    pub fn translation(tx_px: f64, ty_px: f64, width: usize, height: usize) -> Self {
        // One unit of normalized coordinate spans (W-1)/2 pixels.
        let tx = 2.0 * tx_px / (width as f64 - 1.0);
        let ty = 2.0 * ty_px / (height as f64 - 1.0);
        Self {
            theta: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    /// Flattened view in row-major order, for optimizers working on `[f64; 6]`.
    pub fn as_vec(&self) -> [f64; 6] {
        [
            self.theta[0][0],
            self.theta[0][1],
            self.theta[0][2],
            self.theta[1][0],
            self.theta[1][1],
            self.theta[1][2],
        ]
    }

    pub fn from_vec(v: [f64; 6]) -> Self {
        Self {
            theta: [[v[0], v[1], v[2]], [v[3], v[4], v[5]]],
        }
    }

    /// Expands the affine transform into the dense displacement field it
    /// induces on a `width x height` grid, in pixel units.
    ///
    /// For a pixel `(x, y)` with normalized coordinates `(xn, yn)`, the
    /// displacement is the pixel-space difference between `theta * [xn,yn,1]`
    /// and `(x, y)`.
    pub fn to_field(&self, width: usize, height: usize) -> Result<DisplacementField, GridError> {
        let wm1 = width as f64 - 1.0;
        let hm1 = height as f64 - 1.0;
        let t = &self.theta;
        DisplacementField::from_fn(width, height, |x, y| {
            let xn = 2.0 * x as f64 / wm1 - 1.0;
            let yn = 2.0 * y as f64 / hm1 - 1.0;
            let xn2 = t[0][0] * xn + t[0][1] * yn + t[0][2];
            let yn2 = t[1][0] * xn + t[1][1] * yn + t[1][2];
            let x2 = (xn2 + 1.0) * wm1 / 2.0;
            let y2 = (yn2 + 1.0) * hm1 / 2.0;
            [x2 - x as f64, y2 - y as f64]
        })
    }
}
