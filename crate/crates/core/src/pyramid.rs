//! Multi-resolution pyramid: images are downsampled by 2 after a 3x3 box
//! prefilter (border-clamped), masks by nearest neighbor, and displacement
//! fields are upsampled bilinearly by 2 with their displacement values
//! doubled to stay in pixel units of the finer grid.

use crate::error::GridError;
use crate::field::DisplacementField;
use crate::image::{Image2D, LabelMask};

/// Length of an axis after one downsampling step (ceiling halving, so odd
/// axes keep their last sample).
pub fn half_len(n: usize) -> usize {
    n.div_ceil(2)
}

/// One downsampling step: 3x3 box prefilter with clamped borders, then
/// decimation by 2 starting at the origin.
pub fn downsample_image(img: &Image2D) -> Result<Image2D, GridError> {
    let w = img.width() as isize;
    let h = img.height() as isize;
    Image2D::from_fn(half_len(img.width()), half_len(img.height()), |ox, oy| {
        let cx = 2 * ox as isize;
        let cy = 2 * oy as isize;
        let mut sum = 0.0;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let x = (cx + dx).clamp(0, w - 1) as usize;
                let y = (cy + dy).clamp(0, h - 1) as usize;
                sum += img.at(x, y);
            }
        }
        sum / 9.0
    })
}

/// One downsampling step for a label mask: nearest neighbor (the even
/// samples), preserving the class count.
pub fn downsample_mask(mask: &LabelMask) -> Result<LabelMask, GridError> {
    let ow = half_len(mask.width());
    let oh = half_len(mask.height());
    let mut data = Vec::with_capacity(ow * oh);
    for oy in 0..oh {
        for ox in 0..ow {
            data.push(mask.at(2 * ox, 2 * oy));
        }
    }
    LabelMask::new(ow, oh, mask.num_classes(), data)
}

/// One upsampling step for a displacement field: bilinear interpolation onto
/// the finer grid (fine pixel p samples the coarse field at p/2, clamped)
/// and doubling of the displacement values. The target dimensions must be
/// the ones this field was downsampled from, i.e. halve back to its own.
pub fn upsample_field(
    field: &DisplacementField,
    target_w: usize,
    target_h: usize,
) -> Result<DisplacementField, GridError> {
    if half_len(target_w) != field.width() || half_len(target_h) != field.height() {
        return Err(GridError::GridMismatch {
            left_w: half_len(target_w),
            left_h: half_len(target_h),
            right_w: field.width(),
            right_h: field.height(),
        });
    }
    let cw = field.width();
    let ch = field.height();
    DisplacementField::from_fn(target_w, target_h, |x, y| {
        let sx = (x as f64 / 2.0).clamp(0.0, (cw - 1) as f64);
        let sy = (y as f64 / 2.0).clamp(0.0, (ch - 1) as f64);
        let x0 = sx.floor() as usize;
        let y0 = sy.floor() as usize;
        let x1 = (x0 + 1).min(cw - 1);
        let y1 = (y0 + 1).min(ch - 1);
        let fx = sx - x0 as f64;
        let fy = sy - y0 as f64;
        let mut out = [0.0; 2];
        for (c, o) in out.iter_mut().enumerate() {
            let top = field.at(x0, y0)[c] * (1.0 - fx) + field.at(x1, y0)[c] * fx;
            let bot = field.at(x0, y1)[c] * (1.0 - fx) + field.at(x1, y1)[c] * fx;
            *o = 2.0 * (top * (1.0 - fy) + bot * fy);
        }
        out
    })
}

/// Image pyramid, finest first: element 0 is the input, element `l` has been
/// downsampled `l` times. Fails if a level would shrink below the minimum
/// grid (keep `levels` consistent with the image size).
pub fn image_pyramid(img: &Image2D, levels: usize) -> Result<Vec<Image2D>, GridError> {
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        out.push(downsample_image(out.last().expect("non-empty pyramid"))?);
    }
    Ok(out)
}

/// Mask pyramid, finest first, matching [`image_pyramid`] geometry.
pub fn mask_pyramid(mask: &LabelMask, levels: usize) -> Result<Vec<LabelMask>, GridError> {
    let mut out = vec![mask.clone()];
    for _ in 1..levels {
        out.push(downsample_mask(out.last().expect("non-empty pyramid"))?);
    }
    Ok(out)
}
