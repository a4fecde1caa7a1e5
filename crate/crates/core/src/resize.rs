//! Bilinear resampling with half-pixel centers, shared by the tape op,
//! the parameter-patch upsampler and the multi-scale loss path.
//!
//! Source coordinate convention, frozen for reproducibility:
//! `src = (dst + 0.5) * (in / out) - 0.5`, clamped to the border.

use crate::real::Real;

/// Per-axis sample: left index, right index, right-side weight.
#[derive(Clone, Copy, Debug)]
struct AxisTap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(in_len: usize, out_len: usize) -> Vec<AxisTap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = (d as f64 + 0.5) * scale - 0.5;
            let src = src.clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            AxisTap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Resize one `[h, w]` plane into `out` (`out_h * out_w`, preallocated).
pub fn bilinear_plane<F: Real>(
    input: &[F],
    h: usize,
    w: usize,
    out: &mut [F],
    out_h: usize,
    out_w: usize,
) {
    debug_assert_eq!(input.len(), h * w);
    debug_assert_eq!(out.len(), out_h * out_w);
    let ys = axis_taps(h, out_h);
    let xs = axis_taps(w, out_w);
    for (oy, ty) in ys.iter().enumerate() {
        let row_lo = &input[ty.lo * w..ty.lo * w + w];
        let row_hi = &input[ty.hi * w..ty.hi * w + w];
        let fy = F::c(ty.frac);
        let gy = F::c(1.0 - ty.frac);
        let out_row = &mut out[oy * out_w..oy * out_w + out_w];
        for (ox, tx) in xs.iter().enumerate() {
            let fx = F::c(tx.frac);
            let gx = F::c(1.0 - tx.frac);
            let top = gx * row_lo[tx.lo] + fx * row_lo[tx.hi];
            let bot = gx * row_hi[tx.lo] + fx * row_hi[tx.hi];
            out_row[ox] = gy * top + fy * bot;
        }
    }
}

/// Transpose of [`bilinear_plane`]: scatter `grad_out` back onto the input
/// grid, accumulating into `grad_in`.
pub fn bilinear_plane_backward<F: Real>(
    grad_out: &[F],
    out_h: usize,
    out_w: usize,
    grad_in: &mut [F],
    h: usize,
    w: usize,
) {
    debug_assert_eq!(grad_out.len(), out_h * out_w);
    debug_assert_eq!(grad_in.len(), h * w);
    let ys = axis_taps(h, out_h);
    let xs = axis_taps(w, out_w);
    for (oy, ty) in ys.iter().enumerate() {
        let fy = F::c(ty.frac);
        let gy = F::c(1.0 - ty.frac);
        for (ox, tx) in xs.iter().enumerate() {
            let g = grad_out[oy * out_w + ox];
            let fx = F::c(tx.frac);
            let gx = F::c(1.0 - tx.frac);
            grad_in[ty.lo * w + tx.lo] += gy * gx * g;
            grad_in[ty.lo * w + tx.hi] += gy * fx * g;
            grad_in[ty.hi * w + tx.lo] += fy * gx * g;
            grad_in[ty.hi * w + tx.hi] += fy * fx * g;
        }
    }
}

/// Nearest-neighbor index map for label downsampling: each output cell
/// takes the source cell containing its center.
pub fn nearest_indices(in_len: usize, out_len: usize) -> Vec<usize> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| (((d as f64 + 0.5) * scale).floor() as usize).min(in_len - 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_pixel_centers_match_hand_evaluation() {
        // 1x2 plane [0, 1] upsampled to 1x4.
        let input = [0.0f64, 1.0];
        let mut out = [0.0f64; 4];
        bilinear_plane(&input, 1, 2, &mut out, 1, 4);
        let expected = [0.0, 0.25, 0.75, 1.0];
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-15, "{o} vs {e}");
        }
    }

    #[test]
    fn same_size_is_identity() {
        let input: Vec<f64> = (0..35).map(|i| i as f64 * 0.17).collect();
        let mut out = vec![0.0f64; 35];
        bilinear_plane(&input, 5, 7, &mut out, 5, 7);
        for (a, b) in input.iter().zip(&out) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn constant_stays_constant() {
        let input = vec![0.37f64; 12 * 20];
        let mut out = vec![0.0f64; 90 * 160];
        bilinear_plane(&input, 12, 20, &mut out, 90, 160);
        for v in &out {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_shape_12x20_to_90x160() {
        let input = vec![0.5f64; 12 * 20];
        let mut out = vec![0.0f64; 90 * 160];
        bilinear_plane(&input, 12, 20, &mut out, 90, 160);
        assert_eq!(out.len(), 90 * 160);
    }

    #[test]
    fn backward_is_transpose_of_forward() {
        // <A x, y> == <x, A^T y> for random x, y.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (h, w, oh, ow) = (4, 7, 9, 5);
        let x: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..oh * ow).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut ax = vec![0.0; oh * ow];
        bilinear_plane(&x, h, w, &mut ax, oh, ow);
        let mut aty = vec![0.0; h * w];
        bilinear_plane_backward(&y, oh, ow, &mut aty, h, w);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
