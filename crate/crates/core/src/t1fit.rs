//! Per-pixel three-parameter inversion-recovery fitting:
//! `S(TI) = A − B·exp(−TI/T1*)`, reported as `T1 = T1*·(B/A − 1)`.
//!
//! Each pixel is fit by a coarse grid search over `T1*` (with `A`, `B`
//! solved in closed form by linear least squares at every candidate),
//! followed by a fixed number of damped Gauss–Newton refinement steps on
//! all three parameters.

use rayon::prelude::*;

use crate::error::FitError;
use crate::image::{Image2D, LabelMask, T1Series};

/// Grid-search range for `T1*`, ms.
pub const T1_STAR_MIN_MS: f64 = 50.0;
pub const T1_STAR_MAX_MS: f64 = 5000.0;
/// Number of log-spaced grid candidates.
pub const T1_STAR_GRID_POINTS: usize = 50;
/// Gauss–Newton refinement steps after the grid stage.
pub const REFINE_STEPS: usize = 20;
/// A pixel fails when `B/A ≤ 1 + MIN_RECOVERY_RATIO` (no usable inversion
/// recovery: `T1 = T1*·(B/A − 1)` would be non-positive or indeterminate).
pub const MIN_RECOVERY_RATIO: f64 = 1e-3;

/// Per-pixel fit output. Failed pixels carry zeros in the value maps and a
/// 1 in `fail_mask`.
#[derive(Debug, Clone)]
pub struct T1FitResult {
    /// Recovered T1, ms; 0 where the fit failed.
    pub t1_map: Image2D,
    pub a_map: Image2D,
    pub b_map: Image2D,
    /// Per-pixel RMS residual of the fitted model.
    pub residual_map: Image2D,
    /// 1 where the fit failed, 0 elsewhere.
    pub fail_mask: LabelMask,
}

struct PixelFit {
    a: f64,
    b: f64,
    tau: f64,
    rms: f64,
    failed: bool,
}

/// Closed-form least-squares `(A, B)` for fixed decay curve `e_f`, plus the
/// sum of squared residuals. Returns `None` when the 2×2 system is singular
/// (all `e_f` equal, which strictly increasing TIs prevent).
fn solve_ab(signals: &[f64], decays: &[f64]) -> Option<(f64, f64, f64)> {
    let n = signals.len() as f64;
    let mut se = 0.0;
    let mut see = 0.0;
    let mut ss = 0.0;
    let mut sse = 0.0;
    for (&s, &e) in signals.iter().zip(decays) {
        se += e;
        see += e * e;
        ss += s;
        sse += s * e;
    }
    let det = n * see - se * se;
    if det.abs() < 1e-300 {
        return None;
    }
    let a = (ss * see - se * sse) / det;
    let b = (se * ss - n * sse) / det;
    let mut rss = 0.0;
    for (&s, &e) in signals.iter().zip(decays) {
        let r = a - b * e - s;
        rss += r * r;
    }
    Some((a, b, rss))
}

fn rss_at(signals: &[f64], tis: &[f64], a: f64, b: f64, tau: f64) -> f64 {
    signals
        .iter()
        .zip(tis)
        .map(|(&s, &t)| {
            let r = a - b * (-t / tau).exp() - s;
            r * r
        })
        .sum()
}

/// Solves the 3×3 system `m·x = rhs` by Gaussian elimination with partial
/// pivoting; `None` when near-singular.
fn solve3(mut m: [[f64; 3]; 3], mut rhs: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| {
            m[i][col]
                .abs()
                .partial_cmp(&m[j][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = [0.0; 3];
    for col in (0..3).rev() {
        let mut v = rhs[col];
        for k in col + 1..3 {
            v -= m[col][k] * x[k];
        }
        x[col] = v / m[col][col];
        if !x[col].is_finite() {
            return None;
        }
    }
    Some(x)
}

/// One damped Gauss–Newton pass: returns updated `(a, b, tau, rss)` or the
/// inputs unchanged when no tried step reduces the residual.
fn gauss_newton_step(
    signals: &[f64],
    tis: &[f64],
    a: f64,
    b: f64,
    tau: f64,
    rss: f64,
) -> (f64, f64, f64, f64) {
    // Normal equations for residuals r_f = A − B e_f − s_f with
    // J = [1, −e_f, −B·e_f·t_f/τ²].
    let mut jtj = [[0.0f64; 3]; 3];
    let mut jtr = [0.0f64; 3];
    for (&s, &t) in signals.iter().zip(tis) {
        let e = (-t / tau).exp();
        let j = [1.0, -e, -b * e * t / (tau * tau)];
        let r = a - b * e - s;
        for p in 0..3 {
            for q in 0..3 {
                jtj[p][q] += j[p] * j[q];
            }
            jtr[p] += j[p] * r;
        }
    }
    let Some(delta) = solve3(jtj, [-jtr[0], -jtr[1], -jtr[2]]) else {
        return (a, b, tau, rss);
    };
    // Backtracking keeps the step useful even far from the optimum.
    let mut scale = 1.0;
    for _ in 0..6 {
        let (na, nb) = (a + scale * delta[0], b + scale * delta[1]);
        let nt = (tau + scale * delta[2]).clamp(1.0, 1e7);
        let nr = rss_at(signals, tis, na, nb, nt);
        if nr.is_finite() && nr < rss {
            return (na, nb, nt, nr);
        }
        scale *= 0.5;
    }
    (a, b, tau, rss)
}

fn fit_pixel(signals: &[f64], tis: &[f64], grid_decays: &[Vec<f64>], grid_taus: &[f64]) -> PixelFit {
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for (decays, &tau) in grid_decays.iter().zip(grid_taus) {
        if let Some((a, b, rss)) = solve_ab(signals, decays) {
            if rss.is_finite() && best.map_or(true, |(.., brss)| rss < brss) {
                best = Some((a, b, tau, rss));
            }
        }
    }
    let Some((mut a, mut b, mut tau, mut rss)) = best else {
        return PixelFit {
            a: 0.0,
            b: 0.0,
            tau: 0.0,
            rms: 0.0,
            failed: true,
        };
    };
    for _ in 0..REFINE_STEPS {
        let (na, nb, nt, nr) = gauss_newton_step(signals, tis, a, b, tau, rss);
        let stalled = nr >= rss * (1.0 - 1e-15);
        (a, b, tau, rss) = (na, nb, nt, nr);
        if stalled {
            break;
        }
    }
    let rms = (rss / signals.len() as f64).sqrt();
    let ratio = b / a;
    let failed =
        !(a.is_finite() && b.is_finite() && tau.is_finite() && rms.is_finite())
            || !ratio.is_finite()
            || ratio <= 1.0 + MIN_RECOVERY_RATIO;
    if failed {
        PixelFit {
            a: if a.is_finite() { a } else { 0.0 },
            b: if b.is_finite() { b } else { 0.0 },
            tau: 0.0,
            rms: if rms.is_finite() { rms } else { 0.0 },
            failed: true,
        }
    } else {
        PixelFit {
            a,
            b,
            tau,
            rms,
            failed: false,
        }
    }
}

/// Fits every pixel of the series. Needs at least 3 frames.
pub fn fit_t1(series: &T1Series) -> Result<T1FitResult, FitError> {
    if series.num_frames() < 3 {
        return Err(FitError::BadSeries(format!(
            "three-parameter fit needs at least 3 frames, got {}",
            series.num_frames()
        )));
    }
    let w = series.width();
    let h = series.height();
    let tis = series.inversion_times_ms().to_vec();
    let log_min = T1_STAR_MIN_MS.ln();
    let log_max = T1_STAR_MAX_MS.ln();
    let grid_taus: Vec<f64> = (0..T1_STAR_GRID_POINTS)
        .map(|k| {
            (log_min + (log_max - log_min) * k as f64 / (T1_STAR_GRID_POINTS - 1) as f64).exp()
        })
        .collect();
    let grid_decays: Vec<Vec<f64>> = grid_taus
        .iter()
        .map(|&tau| tis.iter().map(|&t| (-t / tau).exp()).collect())
        .collect();

    let fits: Vec<PixelFit> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let signals: Vec<f64> = series.frames().iter().map(|f| f.data()[i]).collect();
            fit_pixel(&signals, &tis, &grid_decays, &grid_taus)
        })
        .collect();

    let map_of = |f: &dyn Fn(&PixelFit) -> f64| {
        Image2D::new(w, h, fits.iter().map(f).collect())
            .expect("fit maps are finite by construction")
    };
    let t1_map = map_of(&|p: &PixelFit| {
        if p.failed {
            0.0
        } else {
            p.tau * (p.b / p.a - 1.0)
        }
    });
    let a_map = map_of(&|p: &PixelFit| p.a);
    let b_map = map_of(&|p: &PixelFit| p.b);
    let residual_map = map_of(&|p: &PixelFit| p.rms);
    let fail_mask = LabelMask::new(
        w,
        h,
        2,
        fits.iter().map(|p| u8::from(p.failed)).collect(),
    )
    .expect("fail mask grid is valid");
    Ok(T1FitResult {
        t1_map,
        a_map,
        b_map,
        residual_map,
        fail_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, PhantomSpec, SIGNAL_A, SIGNAL_B};

    fn still_phantom() -> (T1Series, crate::phantom::PhantomTruth) {
        let spec = PhantomSpec {
            motion_amplitude_px: 0.0,
            noise_sigma: 0.0,
            width: 64,
            height: 64,
            ring_center: [32.0, 32.0],
            ring_radii: [10.0, 17.0],
            ..PhantomSpec::default()
        };
        generate(&spec).unwrap()
    }

    #[test]
    fn noiseless_phantom_recovers_t1_within_a_tenth_of_a_percent() {
        let (series, truth) = still_phantom();
        let fit = fit_t1(&series).unwrap();
        let mut worst = 0.0f64;
        for (i, (&fitted, &nominal)) in fit
            .t1_map
            .data()
            .iter()
            .zip(truth.t1_map.data())
            .enumerate()
        {
            assert_eq!(fit.fail_mask.data()[i], 0, "pixel {i} failed unexpectedly");
            worst = worst.max((fitted - nominal).abs() / nominal);
        }
        assert!(worst < 1e-3, "worst relative T1 error {worst}");
    }

    #[test]
    fn noiseless_fit_recovers_the_model_amplitudes() {
        let (series, _) = still_phantom();
        let fit = fit_t1(&series).unwrap();
        for (&a, &b) in fit.a_map.data().iter().zip(fit.b_map.data()) {
            assert!((a - SIGNAL_A).abs() < 1e-6, "A {a}");
            assert!((b - SIGNAL_B).abs() < 1e-6, "B {b}");
        }
    }

    #[test]
    fn noiseless_residual_is_far_below_signal_range() {
        let (series, _) = still_phantom();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for f in series.frames() {
            for v in f.data() {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        let fit = fit_t1(&series).unwrap();
        for (i, &r) in fit.residual_map.data().iter().enumerate() {
            if fit.fail_mask.data()[i] == 0 {
                assert!(r < 1e-6 * (hi - lo), "pixel {i} residual {r}");
            }
        }
    }

    #[test]
    fn fitted_t1_is_positive_wherever_the_fit_succeeded() {
        let (series, _) = still_phantom();
        let fit = fit_t1(&series).unwrap();
        for (i, &t1) in fit.t1_map.data().iter().enumerate() {
            if fit.fail_mask.data()[i] == 0 {
                assert!(t1 > 0.0, "pixel {i} t1 {t1}");
            }
        }
    }

    #[test]
    fn constant_signal_pixel_is_marked_failed() {
        let w = 8;
        let h = 8;
        let tis = vec![100.0, 500.0, 1000.0, 2000.0];
        let frames: Vec<Image2D> = tis
            .iter()
            .map(|_| Image2D::from_fn(w, h, |_, _| 0.25).unwrap())
            .collect();
        let series = T1Series::new(frames, tis, 0).unwrap();
        let fit = fit_t1(&series).unwrap();
        assert!(fit.fail_mask.data().iter().all(|&f| f == 1));
        assert!(fit.t1_map.data().iter().all(|&t| t == 0.0));
    }

    #[test]
    fn two_frame_series_is_rejected() {
        let frames = vec![
            Image2D::from_fn(8, 8, |x, _| x as f64).unwrap(),
            Image2D::from_fn(8, 8, |x, _| x as f64 + 1.0).unwrap(),
        ];
        let series = T1Series::new(frames, vec![100.0, 200.0], 0).unwrap();
        assert!(matches!(fit_t1(&series), Err(FitError::BadSeries(_))));
    }

    #[test]
    fn known_curve_with_off_grid_t1_is_refined_to_high_accuracy() {
        // T1* chosen between grid points; Gauss–Newton must close the gap.
        let (a, b, tau) = (1.3, 2.4, 987.654);
        let tis: Vec<f64> = (0..9).map(|i| 80.0 + 340.0 * i as f64).collect();
        let frames: Vec<Image2D> = tis
            .iter()
            .map(|&t| Image2D::from_fn(8, 8, |_, _| a - b * (-t / tau).exp()).unwrap())
            .collect();
        let series = T1Series::new(frames, tis, 0).unwrap();
        let fit = fit_t1(&series).unwrap();
        let expect_t1 = tau * (b / a - 1.0);
        for (i, &t1) in fit.t1_map.data().iter().enumerate() {
            assert_eq!(fit.fail_mask.data()[i], 0);
            assert!(
                (t1 - expect_t1).abs() / expect_t1 < 1e-6,
                "t1 {t1} vs {expect_t1}"
            );
        }
    }

    #[test]
    fn decaying_signal_without_recovery_fails_the_ratio_gate() {
        // Signals *decrease* with TI: the best-fit B is negative, so B/A
        // cannot clear the 1 + 1e-3 gate.
        let tis: Vec<f64> = vec![100.0, 600.0, 1200.0, 2400.0];
        let frames: Vec<Image2D> = tis
            .iter()
            .map(|&t| Image2D::from_fn(8, 8, |_, _| (-t / 800.0).exp()).unwrap())
            .collect();
        let series = T1Series::new(frames, tis, 0).unwrap();
        let fit = fit_t1(&series).unwrap();
        assert!(fit.fail_mask.data().iter().all(|&f| f == 1));
    }
}
