//! Scalar images, label masks and inversion-time series.
//!
//! All grids are row-major with the origin at the top-left pixel; `x` indexes
//! columns and `y` indexes rows. Pixel values live in `f64` in memory and are
//! narrowed to `f32` only at the container boundary.

use crate::error::GridError;

/// Minimum edge length accepted by the numeric kernels. Differences, warps
/// and pyramids all need at least a 2x2 neighbourhood.
pub const MIN_EDGE: usize = 2;

/// A single-channel floating-point image on a row-major grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image2D {
    /// Builds an image from row-major samples, validating shape and finiteness.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, GridError> {
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
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { index });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// An all-zero image.
    pub fn zeros(width: usize, height: usize) -> Result<Self, GridError> {
        Self::new(width, height, vec![0.0; width * height])
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
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

    /// Row-major samples.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable row-major samples. Finiteness is re-checked on container export,
    /// not per write.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = v;
    }

    /// True when both images share a grid.
    pub fn same_grid(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Errors unless both images share a grid.
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

    /// Minimum and maximum sample values.
    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Mean sample value.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// An integer label image; `0` is background by convention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    num_classes: usize,
    data: Vec<u8>,
}

impl LabelMask {
    /// Builds a mask, validating that every label is below `num_classes`.
    pub fn new(
        width: usize,
        height: usize,
        num_classes: usize,
        data: Vec<u8>,
    ) -> Result<Self, GridError> {
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
        if num_classes == 0 || num_classes > 256 {
            return Err(GridError::Invalid(format!(
                "num_classes {num_classes} out of range 1..=256"
            )));
        }
        for (index, &label) in data.iter().enumerate() {
            if label as usize >= num_classes {
                return Err(GridError::LabelOutOfRange {
                    label,
                    index,
                    num_classes,
                });
            }
        }
        Ok(Self {
            width,
            height,
            num_classes,
            data,
        })
    }

    /// An all-background mask.
    pub fn zeros(width: usize, height: usize, num_classes: usize) -> Result<Self, GridError> {
        Self::new(width, height, num_classes, vec![0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        debug_assert!((label as usize) < self.num_classes);
        self.data[y * self.width + x] = label;
    }

    /// Number of pixels carrying `class_id`.
    pub fn count(&self, class_id: u8) -> usize {
        self.data.iter().filter(|&&l| l == class_id).count()
    }

    /// One-hot expansion: one scalar image per class, 1.0 inside, 0.0 outside.
    pub fn to_one_hot(&self) -> MaskStack {
        let n = self.width * self.height;
        let mut channels = vec![vec![0.0f64; n]; self.num_classes];
        for (i, &label) in self.data.iter().enumerate() {
            channels[label as usize][i] = 1.0;
        }
        let channels = channels
            .into_iter()
            .map(|data| Image2D::new(self.width, self.height, data).expect("one-hot grid is valid"))
            .collect();
        MaskStack { channels }
    }

    /// Binary indicator image for `class_id`.
    pub fn indicator(&self, class_id: u8) -> Image2D {
        Image2D::from_fn(self.width, self.height, |x, y| {
            if self.at(x, y) == class_id {
                1.0
            } else {
                0.0
            }
        })
        .expect("indicator grid is valid")
    }
}

/// Per-class soft membership maps, e.g. a warped one-hot mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    channels: Vec<Image2D>,
}

impl MaskStack {
    pub fn new(channels: Vec<Image2D>) -> Result<Self, GridError> {
        if channels.is_empty() {
            return Err(GridError::Invalid("mask stack needs at least one class".into()));
        }
        for c in &channels[1..] {
            channels[0].check_same_grid(c)?;
        }
        Ok(Self { channels })
    }

    pub fn num_classes(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, class_id: usize) -> &Image2D {
        &self.channels[class_id]
    }

    pub fn channels(&self) -> &[Image2D] {
        &self.channels
    }

    pub fn width(&self) -> usize {
        self.channels[0].width()
    }

    pub fn height(&self) -> usize {
        self.channels[0].height()
    }

    /// Collapses soft memberships back to hard labels by per-pixel argmax.
    /// Ties go to the lowest class id.
    pub fn argmax_labels(&self) -> LabelMask {
        let w = self.width();
        let h = self.height();
        let mut data = vec![0u8; w * h];
        for i in 0..w * h {
            let mut best = 0usize;
            let mut best_v = self.channels[0].data()[i];
            for (c, ch) in self.channels.iter().enumerate().skip(1) {
                let v = ch.data()[i];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            data[i] = best as u8;
        }
        LabelMask::new(w, h, self.channels.len(), data).expect("argmax grid is valid")
    }
}

/// An ordered stack of frames sharing a grid, each tagged with its
/// inversion time in milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct T1Series {
    frames: Vec<Image2D>,
    inversion_times_ms: Vec<f64>,
    reference_index: usize,
}

impl T1Series {
    pub fn new(
        frames: Vec<Image2D>,
        inversion_times_ms: Vec<f64>,
        reference_index: usize,
    ) -> Result<Self, GridError> {
        if frames.len() < 2 {
            return Err(GridError::Invalid(format!(
                "series needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        if frames.len() != inversion_times_ms.len() {
            return Err(GridError::Invalid(format!(
                "{} frames but {} inversion times",
                frames.len(),
                inversion_times_ms.len()
            )));
        }
        for f in &frames[1..] {
            frames[0].check_same_grid(f)?;
        }
        if inversion_times_ms
            .iter()
            .any(|t| !t.is_finite() || *t <= 0.0)
        {
            return Err(GridError::Invalid(
                "inversion times must be finite and positive".into(),
            ));
        }
        if inversion_times_ms.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GridError::Invalid(
                "inversion times must be strictly increasing".into(),
            ));
        }
        if reference_index >= frames.len() {
            return Err(GridError::Invalid(format!(
                "reference index {reference_index} out of range for {} frames",
                frames.len()
            )));
        }
        Ok(Self {
            frames,
            inversion_times_ms,
            reference_index,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn frame(&self, index: usize) -> &Image2D {
        &self.frames[index]
    }

    pub fn frames(&self) -> &[Image2D] {
        &self.frames
    }

    pub fn inversion_times_ms(&self) -> &[f64] {
        &self.inversion_times_ms
    }

    pub fn reference_index(&self) -> usize {
        self.reference_index
    }

    pub fn reference(&self) -> &Image2D {
        &self.frames[self.reference_index]
    }

    /// Replaces one frame, keeping the grid invariant.
    pub fn with_frame(&self, index: usize, frame: Image2D) -> Result<Self, GridError> {
        self.frames[0].check_same_grid(&frame)?;
        let mut out = self.clone();
        out.frames[index] = frame;
        Ok(out)
    }
}
