//! Spatial difference operators and their adjoints.
//!
//! One scheme is used everywhere: central differences in the interior,
//! one-sided differences at the borders. This is exact for linear fields,
//! which is what makes the analytic Jacobian oracles in the tests possible.

use crate::image::Image2D;

/// Forward operator: partial derivatives (d/dx, d/dy) of a scalar grid.
pub fn gradient(img: &Image2D) -> (Image2D, Image2D) {
    let w = img.width();
    let h = img.height();
    let gx = Image2D::from_fn(w, h, |x, y| {
        if x == 0 {
            img.at(1, y) - img.at(0, y)
        } else if x == w - 1 {
            img.at(w - 1, y) - img.at(w - 2, y)
        } else {
            (img.at(x + 1, y) - img.at(x - 1, y)) / 2.0
        }
    })
    .expect("gradient grid is valid");
    let gy = Image2D::from_fn(w, h, |x, y| {
        if y == 0 {
            img.at(x, 1) - img.at(x, 0)
        } else if y == h - 1 {
            img.at(x, h - 1) - img.at(x, h - 2)
        } else {
            (img.at(x, y + 1) - img.at(x, y - 1)) / 2.0
        }
    })
    .expect("gradient grid is valid");
    (gx, gy)
}

/// Adjoint of [`gradient`]: for any image `I` and weight images `(wx, wy)`,
/// `<gradient(I).0, wx> + <gradient(I).1, wy> == <I, gradient_adjoint(wx, wy)>`.
/// This is the scatter form used to backpropagate through the derivatives.
pub fn gradient_adjoint(wx: &Image2D, wy: &Image2D) -> Image2D {
    let w = wx.width();
    let h = wx.height();
    debug_assert!(wx.same_grid(wy));
    let mut out = vec![0.0f64; w * h];
    let mut add = |x: usize, y: usize, v: f64| out[y * w + x] += v;
    for y in 0..h {
        for x in 0..w {
            let v = wx.at(x, y);
            if x == 0 {
                add(1, y, v);
                add(0, y, -v);
            } else if x == w - 1 {
                add(w - 1, y, v);
                add(w - 2, y, -v);
            } else {
                add(x + 1, y, v / 2.0);
                add(x - 1, y, -v / 2.0);
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let v = wy.at(x, y);
            if y == 0 {
                add(x, 1, v);
                add(x, 0, -v);
            } else if y == h - 1 {
                add(x, h - 1, v);
                add(x, h - 2, -v);
            } else {
                add(x, y + 1, v / 2.0);
                add(x, y - 1, -v / 2.0);
            }
        }
    }
    Image2D::new(w, h, out).expect("adjoint grid is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradient_of_linear_ramp_is_exact_everywhere() {
        // I = 0.7x - 1.3y: one-sided borders and central interior all
        // reproduce the slopes exactly.
        let img = Image2D::from_fn(7, 5, |x, y| 0.7 * x as f64 - 1.3 * y as f64).unwrap();
        let (gx, gy) = gradient(&img);
        for &v in gx.data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
        for &v in gy.data() {
            assert!((v + 1.3).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let img = Image2D::new(4, 4, vec![3.5; 16]).unwrap();
        let (gx, gy) = gradient(&img);
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gy.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_satisfies_the_dot_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let img = Image2D::from_fn(9, 6, |_, _| rng.gen_range(-1.0..1.0)).unwrap();
            let wx = Image2D::from_fn(9, 6, |_, _| rng.gen_range(-1.0..1.0)).unwrap();
            let wy = Image2D::from_fn(9, 6, |_, _| rng.gen_range(-1.0..1.0)).unwrap();
            let (gx, gy) = gradient(&img);
            let lhs: f64 = gx
                .data()
                .iter()
                .zip(wx.data())
                .chain(gy.data().iter().zip(wy.data()))
                .map(|(a, b)| a * b)
                .sum();
            let adj = gradient_adjoint(&wx, &wy);
            let rhs: f64 = img
                .data()
                .iter()
                .zip(adj.data())
                .map(|(a, b)| a * b)
                .sum();
            assert!(
                (lhs - rhs).abs() < 1e-10,
                "adjoint identity violated: {lhs} vs {rhs}"
            );
        }
    }
}
