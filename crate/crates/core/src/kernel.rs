//! 25x25 Gaussian blur kernels and their sigma derivative.
//!
//! The kernel is evaluated on the integer grid x, y in [-12, 12] and
//! renormalized to sum 1: the discrete samples of the continuous density
//! do not sum to 1, and an unnormalized kernel would darken the image at
//! small sigma. Normalization also makes the sigma = sigma_min kernel an
//! effective delta, which realizes the identity translation.

use crate::error::{Error, Result};
use crate::params::SigmaBounds;

pub const KERNEL_SIZE: usize = 25;
pub const KERNEL_RADIUS: usize = 12;
pub const KERNEL_LEN: usize = KERNEL_SIZE * KERNEL_SIZE;

/// The continuous 2D Gaussian evaluated at an integer offset, including
/// the 1/(2 pi sigma^2) prefactor (pre-normalization value).
pub fn gaussian_point(sigma: f64, x: i64, y: i64) -> f64 {
    let s2 = sigma * sigma;
    let pref = 1.0 / (2.0 * std::f64::consts::PI * s2);
    pref * (-((x * x + y * y) as f64) / (2.0 * s2)).exp()
}

/// One-dimensional factor e^{-i^2 / (2 sigma^2)} for i in [-12, 12],
/// mirrored from the non-negative half so symmetry is bitwise exact.
pub(crate) fn gauss_1d(sigma: f64) -> [f64; KERNEL_SIZE] {
    let s2 = 2.0 * sigma * sigma;
    let mut g = [0.0; KERNEL_SIZE];
    for i in 0..=KERNEL_RADIUS {
        let v = (-((i * i) as f64) / s2).exp();
        g[KERNEL_RADIUS + i] = v;
        g[KERNEL_RADIUS - i] = v;
    }
    g
}

/// d/d sigma of the 1D factor: g(i) * i^2 / sigma^3.
pub(crate) fn gauss_1d_sigma_grad(sigma: f64) -> [f64; KERNEL_SIZE] {
    let g = gauss_1d(sigma);
    let s3 = sigma * sigma * sigma;
    let mut d = [0.0; KERNEL_SIZE];
    for i in 0..=KERNEL_RADIUS {
        let v = g[KERNEL_RADIUS + i] * ((i * i) as f64) / s3;
        d[KERNEL_RADIUS + i] = v;
        d[KERNEL_RADIUS - i] = v;
    }
    d
}

#[derive(Clone, Debug)]
pub struct BlurKernel {
    pub sigma: f64,
    /// Row-major 25x25 weights, normalized to sum 1.
    pub weights: Vec<f64>,
}

/// Normalized 25x25 Gaussian kernel.
pub fn gaussian_kernel(sigma: f64) -> Result<BlurKernel> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("blur sigma must be > 0, got {sigma}")));
    }
    let g = gauss_1d(sigma);
    let mut weights = vec![0.0; KERNEL_LEN];
    let mut sum = 0.0;
    for y in 0..KERNEL_SIZE {
        for x in 0..KERNEL_SIZE {
            // g[y] * g[x] is bitwise symmetric under x <-> y and sign flips.
            let v = g[y] * g[x];
            weights[y * KERNEL_SIZE + x] = v;
            sum += v;
        }
    }
    let inv = 1.0 / sum;
    for v in &mut weights {
        *v *= inv;
    }
    Ok(BlurKernel { sigma, weights })
}

/// Analytic d(normalized kernel)/d sigma, valid at any sigma > 0.
/// Saturation of a clamped sigma parameterization is the caller's concern.
pub fn kernel_sigma_grad_raw(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("blur sigma must be > 0, got {sigma}")));
    }
    let g = gauss_1d(sigma);
    let dg = gauss_1d_sigma_grad(sigma);
    // Unnormalized u(x,y) = g(y) g(x); normalized k = u / S with S = sum(u).
    // dk = (u' S - u S') / S^2, and the 1/(2 pi sigma^2) prefactor cancels.
    let mut u = vec![0.0; KERNEL_LEN];
    let mut du = vec![0.0; KERNEL_LEN];
    let mut s = 0.0;
    let mut ds = 0.0;
    for y in 0..KERNEL_SIZE {
        for x in 0..KERNEL_SIZE {
            let uv = g[y] * g[x];
            let duv = dg[y] * g[x] + g[y] * dg[x];
            u[y * KERNEL_SIZE + x] = uv;
            du[y * KERNEL_SIZE + x] = duv;
            s += uv;
            ds += duv;
        }
    }
    let inv_s2 = 1.0 / (s * s);
    let grad = u
        .iter()
        .zip(&du)
        .map(|(&uv, &duv)| (duv * s - uv * ds) * inv_s2)
        .collect();
    Ok(grad)
}

/// d(normalized kernel)/d sigma under the clamped sigma parameterization:
/// at or beyond the clamp boundary the gradient is saturated to zero.
pub fn gaussian_kernel_sigma_grad(sigma: f64, bounds: SigmaBounds) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("blur sigma must be > 0, got {sigma}")));
    }
    if sigma <= bounds.min || sigma >= bounds.max {
        return Ok(vec![0.0; KERNEL_LEN]);
    }
    kernel_sigma_grad_raw(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unnormalized_center_at_sigma_one() {
        let v = gaussian_point(1.0, 0, 0);
        assert!((v - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-12);
        assert!((v - 0.159155).abs() < 1e-6);
    }

    #[test]
    fn small_sigma_is_an_effective_delta() {
        let k = gaussian_kernel(0.05).unwrap();
        let center = k.weights[KERNEL_RADIUS * KERNEL_SIZE + KERNEL_RADIUS];
        assert!(center >= 1.0 - 1e-15, "center {center}");
    }

    #[test]
    fn kernel_sums_to_one_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let sigma = rng.gen_range(0.05..=8.0);
            let k = gaussian_kernel(sigma).unwrap();
            let sum: f64 = k.weights.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9, "sigma {sigma} sum {sum}");
            for y in 0..KERNEL_SIZE {
                for x in 0..KERNEL_SIZE {
                    let v = k.weights[y * KERNEL_SIZE + x];
                    assert_eq!(v, k.weights[x * KERNEL_SIZE + y]);
                    assert_eq!(v, k.weights[y * KERNEL_SIZE + (KERNEL_SIZE - 1 - x)]);
                    assert_eq!(v, k.weights[(KERNEL_SIZE - 1 - y) * KERNEL_SIZE + x]);
                }
            }
        }
    }

    #[test]
    fn sigma_grad_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let sigma = rng.gen_range(0.05..=8.0);
            let grad = kernel_sigma_grad_raw(sigma).unwrap();
            let sum: f64 = grad.iter().sum();
            assert!(sum.abs() <= 1e-9, "sigma {sigma} grad sum {sum}");
        }
    }

    #[test]
    fn sigma_grad_matches_finite_differences() {
        let bounds = SigmaBounds::default();
        for &sigma in &[0.3, 0.8, 1.5, 3.0, 6.5] {
            let grad = gaussian_kernel_sigma_grad(sigma, bounds).unwrap();
            let h = 1e-6;
            let kp = gaussian_kernel(sigma + h).unwrap();
            let km = gaussian_kernel(sigma - h).unwrap();
            for i in 0..KERNEL_LEN {
                let numeric = (kp.weights[i] - km.weights[i]) / (2.0 * h);
                let denom = grad[i].abs() + numeric.abs();
                if denom > 1e-10 {
                    let rel = (grad[i] - numeric).abs() / denom;
                    assert!(rel <= 1e-6, "sigma {sigma} entry {i}: {} vs {numeric}", grad[i]);
                }
            }
        }
    }

    #[test]
    fn sigma_grad_saturates_at_clamp_boundary() {
        let bounds = SigmaBounds::default();
        let at_max = gaussian_kernel_sigma_grad(bounds.max, bounds).unwrap();
        assert!(at_max.iter().all(|&v| v == 0.0));
        let at_min = gaussian_kernel_sigma_grad(bounds.min, bounds).unwrap();
        assert!(at_min.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_positive_sigma_rejected() {
        assert!(matches!(gaussian_kernel(0.0), Err(crate::Error::Domain(_))));
        assert!(matches!(gaussian_kernel(-1.0), Err(crate::Error::Domain(_))));
    }
}
