//! The fixed noise raster added by the translation function.
//!
//! One field is generated per run: i.i.d. standard normal samples from a
//! counter-based generator keyed on (seed, flat index), clamped to [0, 1].
//! Regeneration from the same seed is bit-identical regardless of thread
//! count or platform.

use crate::error::{Error, Result};
use crate::real::Real;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn to_unit(bits: u64) -> f64 {
    // 53 mantissa bits -> [0, 1).
    (bits >> 11) as f64 * (1.0 / 9007199254740992.0)
}

/// Pre-clamp standard normal sample for (seed, index), Box-Muller form.
pub fn raw_normal(seed: u64, index: u64) -> f64 {
    let a = splitmix64(seed ^ splitmix64(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    let b = splitmix64(a);
    let u1 = 1.0 - to_unit(a); // (0, 1]
    let u2 = to_unit(b); // [0, 1)
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Clone, Debug)]
pub struct NoiseField<F: Real> {
    pub h: usize,
    pub w: usize,
    pub seed: u64,
    data: Vec<F>,
}

impl<F: Real> NoiseField<F> {
    /// Generate the 3 x h x w clamped field for a run.
    pub fn generate(seed: u64, h: usize, w: usize) -> Self {
        let n = 3 * h * w;
        let data = (0..n)
            .map(|i| F::c(raw_normal(seed, i as u64).clamp(0.0, 1.0)))
            .collect();
        NoiseField { h, w, seed, data }
    }

    /// Wrap an explicit raster (tests, flipped variants). The seed is kept
    /// only as provenance and is not re-derivable from the data.
    pub fn from_data(seed: u64, h: usize, w: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != 3 * h * w {
            return Err(Error::Dimension(format!(
                "noise buffer has {} values, expected 3*{h}*{w}",
                data.len()
            )));
        }
        if data
            .iter()
            .any(|v| !(F::zero()..=F::one()).contains(v) || !v.is_finite())
        {
            return Err(Error::Validation("noise values must lie in [0, 1]".into()));
        }
        Ok(NoiseField { h, w, seed, data })
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[F] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn extract_patch(&self, y0: usize, x0: usize, ph: usize, pw: usize) -> Vec<F> {
        let mut out = Vec::with_capacity(3 * ph * pw);
        for c in 0..3 {
            let plane = self.plane(c);
            for y in 0..ph {
                out.extend_from_slice(
                    &plane[(y0 + y) * self.w + x0..(y0 + y) * self.w + x0 + pw],
                );
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> NoiseField<F> {
        let mut out = self.clone();
        for c in 0..3 {
            let n = out.h * out.w;
            let plane = &mut out.data[c * n..(c + 1) * n];
            for y in 0..self.h {
                plane[y * self.w..(y + 1) * self.w].reverse();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_bit_identical() {
        let a = NoiseField::<f64>::generate(42, 17, 23);
        let b = NoiseField::<f64>::generate(42, 17, 23);
        assert_eq!(a.data(), b.data());
        let c = NoiseField::<f64>::generate(43, 17, 23);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn clamping_maps_negative_samples_to_zero() {
        let mut saw_negative = false;
        let mut saw_interior = false;
        let field = NoiseField::<f64>::generate(7, 20, 20);
        for i in 0..field.data().len() {
            let raw = raw_normal(7, i as u64);
            let stored = field.data()[i];
            if raw < 0.0 {
                assert_eq!(stored, 0.0);
                saw_negative = true;
            } else if raw > 0.0 && raw < 1.0 {
                assert_eq!(stored, raw);
                saw_interior = true;
            } else if raw >= 1.0 {
                assert_eq!(stored, 1.0);
            }
        }
        assert!(saw_negative && saw_interior);
    }

    #[test]
    fn about_half_of_all_samples_clamp_to_zero() {
        let n = 1_000_000u64;
        let zeros = (0..n).filter(|&i| raw_normal(99, i) < 0.0).count();
        let frac = zeros as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.002, "zero fraction {frac}");
    }

    #[test]
    fn all_values_in_unit_interval() {
        let field = NoiseField::<f64>::generate(3, 31, 9);
        assert!(field.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
