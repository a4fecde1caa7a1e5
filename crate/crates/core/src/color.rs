//! RGB <-> HSV conversion with piecewise gradients.
//!
//! Hue is stored in [0, 1) (angle / 360) so that all affine color
//! parameters act on comparable scales. At piecewise boundaries (two
//! channels exactly equal) the backward pass uses the branch selected by
//! the forward pass.

use crate::real::Real;

#[inline]
fn argmax3<F: Real>(c: [F; 3]) -> usize {
    if c[0] >= c[1] && c[0] >= c[2] {
        0
    } else if c[1] >= c[2] {
        1
    } else {
        2
    }
}

#[inline]
fn argmin3<F: Real>(c: [F; 3]) -> usize {
    if c[0] <= c[1] && c[0] <= c[2] {
        0
    } else if c[1] <= c[2] {
        1
    } else {
        2
    }
}

/// Hexcone conversion; channels in [0, 1]. Gray pixels map to s = 0, h = 0.
pub fn rgb_to_hsv<F: Real>(rgb: [F; 3]) -> [F; 3] {
    let mx = argmax3(rgb);
    let mn = argmin3(rgb);
    let vmax = rgb[mx];
    let delta = vmax - rgb[mn];
    let v = vmax;
    let s = if vmax > F::zero() {
        delta / vmax
    } else {
        F::zero()
    };
    let h = if delta > F::zero() {
        let six = F::c(6.0);
        let h6 = match mx {
            0 => {
                let t = (rgb[1] - rgb[2]) / delta;
                if t < F::zero() {
                    t + six
                } else {
                    t
                }
            }
            1 => (rgb[2] - rgb[0]) / delta + F::c(2.0),
            _ => (rgb[0] - rgb[1]) / delta + F::c(4.0),
        };
        h6 / six
    } else {
        F::zero()
    };
    [h, s, v]
}

/// Backward rule for [`rgb_to_hsv`]: maps an upstream HSV gradient to an
/// RGB gradient at the given input point.
pub fn rgb_to_hsv_backward<F: Real>(rgb: [F; 3], grad_hsv: [F; 3]) -> [F; 3] {
    let mx = argmax3(rgb);
    let mn = argmin3(rgb);
    let vmax = rgb[mx];
    let delta = vmax - rgb[mn];
    let [gh, gs, gv] = grad_hsv;
    let mut grad = [F::zero(); 3];

    // v = c[mx]
    grad[mx] += gv;

    // s = (c[mx] - c[mn]) / c[mx]
    if vmax > F::zero() {
        grad[mx] += gs * rgb[mn] / (vmax * vmax);
        grad[mn] -= gs / vmax;
    }

    // h: piecewise in the max branch; numerator channels depend on branch.
    if delta > F::zero() {
        let inv6d = F::c(1.0) / (F::c(6.0) * delta);
        let (a, b) = match mx {
            0 => (1, 2), // (g - b)
            1 => (2, 0), // (b - r)
            _ => (0, 1), // (r - g)
        };
        let num = rgb[a] - rgb[b];
        grad[a] += gh * inv6d;
        grad[b] -= gh * inv6d;
        let ddelta = -gh * num / (F::c(6.0) * delta * delta);
        grad[mx] += ddelta;
        grad[mn] -= ddelta;
    }
    grad
}

#[inline]
fn hsv_parts<F: Real>(hsv: [F; 3]) -> (usize, F, F, F) {
    let [h, s, v] = hsv;
    let h6 = h * F::c(6.0);
    let sector = h6.floor().as_f64() as i64;
    let sector = sector.clamp(0, 5) as usize;
    let f = h6 - F::c(sector as f64);
    (sector, f, s, v)
}

/// Inverse hexcone conversion; `h` must already be wrapped into [0, 1).
pub fn hsv_to_rgb<F: Real>(hsv: [F; 3]) -> [F; 3] {
    let (sector, f, s, v) = hsv_parts(hsv);
    let one = F::one();
    let p = v * (one - s);
    let q = v * (one - s * f);
    let t = v * (one - s * (one - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Backward rule for [`hsv_to_rgb`].
pub fn hsv_to_rgb_backward<F: Real>(hsv: [F; 3], grad_rgb: [F; 3]) -> [F; 3] {
    let (sector, f, s, v) = hsv_parts(hsv);
    let one = F::one();
    // Output channel roles per sector: which of {v, t, p, q} lands where.
    // Encoded as (r, g, b) role ids: 0 = v, 1 = p, 2 = q, 3 = t.
    let roles: [usize; 3] = match sector {
        0 => [0, 3, 1],
        1 => [2, 0, 1],
        2 => [1, 0, 3],
        3 => [1, 2, 0],
        4 => [3, 1, 0],
        _ => [0, 1, 2],
    };
    let mut gh = F::zero();
    let mut gs = F::zero();
    let mut gv = F::zero();
    for (role, g) in roles.into_iter().zip(grad_rgb) {
        match role {
            0 => {
                gv += g;
            }
            1 => {
                // p = v (1 - s)
                gv += g * (one - s);
                gs -= g * v;
            }
            2 => {
                // q = v (1 - s f)
                gv += g * (one - s * f);
                gs -= g * v * f;
                gh -= g * v * s * F::c(6.0);
            }
            _ => {
                // t = v (1 - s (1 - f))
                gv += g * (one - s * (one - f));
                gs += g * v * (f - one);
                gh += g * v * s * F::c(6.0);
            }
        }
    }
    [gh, gs, gv]
}
