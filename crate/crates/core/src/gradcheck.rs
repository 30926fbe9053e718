//! Finite-difference gradient checking.
//!
//! Central differences around a point, with a Richardson consistency filter:
//! each coordinate is probed at step `h` and `h/2`, and coordinates where the
//! two estimates disagree are skipped rather than compared. This screens out
//! the measure-zero kinks of the objective landscape (bilinear cell
//! boundaries, histogram hat-kernel edges, per-pixel max normalization) where
//! a finite difference straddles a non-smooth point and no comparison against
//! an analytic (sub)gradient is meaningful. The filter uses only function
//! evaluations, so it stays independent of the gradient code under test.
//!
//! Callers should also avoid perturbing pixels that attain an image's minimum
//! or maximum: metrics window intensities to [0, 1] treating the window
//! bounds as constants, so the analytic gradient deliberately omits the
//! window's dependence on those extreme pixels.

/// Tolerances and step sizes for one check run.
#[derive(Debug, Clone, Copy)]
pub struct CheckOpts {
    /// Base finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error between analytic and FD values.
    pub rel_tol: f64,
    /// Stop after this many coordinates have been successfully compared.
    pub min_checked: usize,
    /// Below this magnitude both values count as zero and trivially agree.
    pub abs_floor: f64,
    /// Maximum relative disagreement between the `h` and `h/2` estimates
    /// before a coordinate is deemed non-smooth and skipped.
    pub consistency_tol: f64,
}

impl Default for CheckOpts {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rel_tol: 1e-3,
            min_checked: 20,
            abs_floor: 1e-7,
            consistency_tol: 1e-3,
        }
    }
}

/// Result of one check run.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    /// Coordinates compared against the analytic gradient.
    pub checked: usize,
    /// Coordinates skipped by the consistency filter.
    pub skipped: usize,
    /// Largest relative error among the checked coordinates.
    pub max_rel_err: f64,
    /// Coordinate index attaining `max_rel_err`.
    pub worst_coord: Option<usize>,
}

impl CheckOutcome {
    /// True when enough coordinates were checked and all are inside tolerance.
    pub fn passes(&self, opts: &CheckOpts) -> bool {
        self.checked >= opts.min_checked && self.max_rel_err < opts.rel_tol
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m < floor {
        0.0
    } else {
        (a - b).abs() / m
    }
}

/// Compares an analytic gradient against central finite differences of `f`
/// at the listed coordinates, walking the candidate list until
/// `opts.min_checked` smooth coordinates have been compared.
pub fn check_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    analytic: &[f64],
    coords: &[usize],
    opts: &CheckOpts,
) -> CheckOutcome {
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.to_vec();
    let mut outcome = CheckOutcome {
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        worst_coord: None,
    };
    for &c in coords {
        if outcome.checked >= opts.min_checked {
            break;
        }
        let mut fd_at = |h: f64| {
            x[c] = x0[c] + h;
            let fp = f(&x);
            x[c] = x0[c] - h;
            let fm = f(&x);
            x[c] = x0[c];
            (fp - fm) / (2.0 * h)
        };
        let d1 = fd_at(opts.step);
        let d2 = fd_at(opts.step / 2.0);
        if rel_err(d1, d2, opts.abs_floor) > opts.consistency_tol {
            outcome.skipped += 1;
            continue;
        }
        // Richardson extrapolation of the two consistent estimates.
        let fd = (4.0 * d2 - d1) / 3.0;
        let e = rel_err(analytic[c], fd, opts.abs_floor);
        outcome.checked += 1;
        if e > outcome.max_rel_err {
            outcome.max_rel_err = e;
            outcome.worst_coord = Some(c);
        }
    }
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_passes() {
        // f(x) = sum x_i^2, grad = 2x.
        let x0: Vec<f64> = (0..30).map(|i| 0.1 * i as f64 - 1.0).collect();
        let analytic: Vec<f64> = x0.iter().map(|v| 2.0 * v).collect();
        let coords: Vec<usize> = (0..30).collect();
        let opts = CheckOpts::default();
        let outcome = check_gradient(
            |x| x.iter().map(|v| v * v).sum(),
            &x0,
            &analytic,
            &coords,
            &opts,
        );
        assert!(outcome.passes(&opts), "{outcome:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x0 = vec![0.3; 25];
        let analytic = vec![0.9; 25]; // true gradient is 0.6
        let coords: Vec<usize> = (0..25).collect();
        let opts = CheckOpts::default();
        let outcome = check_gradient(
            |x| x.iter().map(|v| v * v).sum(),
            &x0,
            &analytic,
            &coords,
            &opts,
        );
        assert!(!outcome.passes(&opts));
    }

    #[test]
    fn kinks_are_skipped_not_compared() {
        // f(x) = sum |x_i| has a kink at 0; coordinates whose difference
        // stencil straddles it must be filtered out, smooth ones checked.
        let mut x0: Vec<f64> = vec![0.5; 25];
        x0[3] = 2.5e-4;
        x0[7] = -2.5e-4;
        let analytic: Vec<f64> = x0.iter().map(|v| v.signum()).collect();
        let coords: Vec<usize> = (0..25).collect();
        let opts = CheckOpts {
            min_checked: 23,
            ..CheckOpts::default()
        };
        let outcome = check_gradient(
            |x| x.iter().map(|v| v.abs()).sum(),
            &x0,
            &analytic,
            &coords,
            &opts,
        );
        assert_eq!(outcome.skipped, 2);
        assert!(outcome.passes(&opts), "{outcome:?}");
    }
}
