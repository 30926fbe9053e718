//! Modality-independent neighborhood descriptor similarity.
//!
//! Per pixel, a 4-channel descriptor is built from the 4-neighborhood
//! shifts: Gaussian-weighted patch SSDs, normalized by the local mean patch
//! distance (a variance estimate, floored), exponentiated, and max-normalized
//! across the four channels. Similarity of two images is the negated mean
//! absolute descriptor difference, smoothed as `sqrt(x^2 + delta^2) - delta`
//! so the score stays differentiable; the score's maximum is 0 at identical
//! descriptors.

use crate::error::GridError;
use crate::image::Image2D;

use super::{chain_window, window_unit, MetricValue, SimilarityMetric};

/// The 4-neighborhood shift set.
const SHIFTS: [[isize; 2]; 4] = [[1, 0], [-1, 0], [0, 1], [0, -1]];

/// Variance floor, in units of the squared windowed-intensity range (= 1).
const VAR_FLOOR: f64 = 1e-6;

/// Smoothing half-width of the absolute value in the descriptor difference.
const ABS_DELTA: f64 = 1e-6;

fn smooth_abs(x: f64) -> f64 {
    (x * x + ABS_DELTA * ABS_DELTA).sqrt() - ABS_DELTA
}

fn smooth_abs_prime(x: f64) -> f64 {
    x / (x * x + ABS_DELTA * ABS_DELTA).sqrt()
}

/// Gaussian patch weights over square offsets of the given radius,
/// normalized to sum 1.
fn patch_weights(radius: usize, sigma: f64) -> Vec<(isize, isize, f64)> {
    let r = radius as isize;
    let mut total = 0.0;
    let mut out = Vec::with_capacity((2 * radius + 1).pow(2));
    for dy in -r..=r {
        for dx in -r..=r {
            let w = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            total += w;
            out.push((dx, dy, w));
        }
    }
    for (_, _, w) in &mut out {
        *w /= total;
    }
    out
}

#[inline]
fn clamped(img: &Image2D, x: isize, y: isize) -> f64 {
    let cx = x.clamp(0, img.width() as isize - 1) as usize;
    let cy = y.clamp(0, img.height() as isize - 1) as usize;
    img.at(cx, cy)
}

/// Everything the backward pass needs about one image's descriptors.
struct Descriptors {
    /// Patch distances D_r, per pixel and shift.
    d: Vec<[f64; 4]>,
    /// exp(-D_r / Vf), per pixel and shift.
    e: Vec<[f64; 4]>,
    /// Channel attaining the per-pixel max of `e`.
    argmax: Vec<u8>,
    /// Floored variance estimate Vf.
    vf: Vec<f64>,
    /// Whether the floor was inactive (variance gradient flows).
    above_floor: Vec<bool>,
}

impl Descriptors {
    /// Max-normalized channel value.
    #[inline]
    fn m(&self, p: usize, r: usize) -> f64 {
        self.e[p][r] / self.e[p][self.argmax[p] as usize]
    }
}

fn build_descriptors(img: &Image2D, patch: &[(isize, isize, f64)]) -> Descriptors {
    let w = img.width();
    let h = img.height();
    let n = w * h;
    let mut d = vec![[0.0f64; 4]; n];
    let mut e = vec![[0.0f64; 4]; n];
    let mut argmax = vec![0u8; n];
    let mut vf = vec![0.0f64; n];
    let mut above_floor = vec![false; n];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut dr = [0.0f64; 4];
            for (r, s) in SHIFTS.iter().enumerate() {
                let mut acc = 0.0;
                for &(ox, oy, g) in patch {
                    let a = clamped(img, x as isize + ox, y as isize + oy);
                    let b = clamped(img, x as isize + s[0] + ox, y as isize + s[1] + oy);
                    let diff = a - b;
                    acc += g * diff * diff;
                }
                dr[r] = acc;
            }
            let v = dr.iter().sum::<f64>() / 4.0;
            let v_floored = v.max(VAR_FLOOR);
            let mut best = 0usize;
            let mut er = [0.0f64; 4];
            for r in 0..4 {
                er[r] = (-dr[r] / v_floored).exp();
                if er[r] > er[best] {
                    best = r;
                }
            }
            d[p] = dr;
            e[p] = er;
            argmax[p] = best as u8;
            vf[p] = v_floored;
            above_floor[p] = v > VAR_FLOOR;
        }
    }
    Descriptors {
        d,
        e,
        argmax,
        vf,
        above_floor,
    }
}

pub(super) fn evaluate_inner(
    i: &Image2D,
    j: &Image2D,
    patch_radius: usize,
    sigma: f64,
    want_grad: bool,
) -> Result<MetricValue, GridError> {
    i.check_same_grid(j)?;
    assert!(patch_radius >= 1, "mind patch radius must be >= 1");
    assert!(sigma > 0.0, "mind sigma must be positive");
    let patch = patch_weights(patch_radius, sigma);
    let (wi, scale_i) = window_unit(i);
    let (wj, _) = window_unit(j);
    let di = build_descriptors(&wi, &patch);
    let dj = build_descriptors(&wj, &patch);
    let w = i.width();
    let h = i.height();
    let n = w * h;

    let mut score = 0.0;
    for p in 0..n {
        for r in 0..4 {
            score += smooth_abs(di.m(p, r) - dj.m(p, r));
        }
    }
    score = -score / (4.0 * n as f64);

    let grad = if want_grad {
        let mut dn = vec![0.0f64; n]; // gradient w.r.t. the windowed image
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let star = di.argmax[p] as usize;
                let m_star = di.e[p][star];
                // Cotangents on the max-normalized channels.
                let mut cot_m = [0.0f64; 4];
                for (r, c) in cot_m.iter_mut().enumerate() {
                    *c = -smooth_abs_prime(di.m(p, r) - dj.m(p, r)) / (4.0 * n as f64);
                }
                // Through the max normalization (argmax held fixed).
                let weighted: f64 = (0..4).map(|r| cot_m[r] * di.m(p, r)).sum();
                let mut g_e = [0.0f64; 4];
                for r in 0..4 {
                    g_e[r] = cot_m[r] / m_star;
                    if r == star {
                        g_e[r] -= weighted / m_star;
                    }
                }
                // Through the exponential and the (gated) variance estimate.
                let vf = di.vf[p];
                let var_term = if di.above_floor[p] {
                    (0..4).map(|r| g_e[r] * di.e[p][r] * di.d[p][r]).sum::<f64>() / (4.0 * vf * vf)
                } else {
                    0.0
                };
                let mut g_d = [0.0f64; 4];
                for r in 0..4 {
                    g_d[r] = -g_e[r] * di.e[p][r] / vf + var_term;
                }
                // Through the patch SSDs, scattered onto the source pixels.
                for (r, s) in SHIFTS.iter().enumerate() {
                    if g_d[r] == 0.0 {
                        continue;
                    }
                    for &(ox, oy, g) in &patch {
                        let ax = (x as isize + ox).clamp(0, w as isize - 1) as usize;
                        let ay = (y as isize + oy).clamp(0, h as isize - 1) as usize;
                        let bx = (x as isize + s[0] + ox).clamp(0, w as isize - 1) as usize;
                        let by = (y as isize + s[1] + oy).clamp(0, h as isize - 1) as usize;
                        let c = 2.0 * g * (wi.at(ax, ay) - wi.at(bx, by)) * g_d[r];
                        dn[ay * w + ax] += c;
                        dn[by * w + bx] -= c;
                    }
                }
            }
        }
        Some(chain_window(
            Image2D::new(w, h, dn).expect("gradient grid is valid"),
            scale_i,
        ))
    } else {
        None
    };
    Ok(MetricValue { score, grad })
}

/// MIND descriptor similarity (0 is the maximum) and gradient w.r.t. `i`.
pub fn mind(
    i: &Image2D,
    j: &Image2D,
    patch_radius: usize,
    sigma: f64,
) -> Result<MetricValue, GridError> {
    evaluate_inner(i, j, patch_radius, sigma, true)
}

/// Strategy wrapper for the registry.
pub struct Mind {
    pub patch_radius: usize,
    pub sigma: f64,
}

impl SimilarityMetric for Mind {
    fn name(&self) -> &'static str {
        "mind"
    }

    fn evaluate(&self, i: &Image2D, j: &Image2D) -> Result<MetricValue, GridError> {
        evaluate_inner(i, j, self.patch_radius, self.sigma, true)
    }

    fn score(&self, i: &Image2D, j: &Image2D) -> Result<f64, GridError> {
        Ok(evaluate_inner(i, j, self.patch_radius, self.sigma, false)?.score)
    }
}
