//! The per-pixel translation engine.
//!
//! Pipeline order, frozen: (1) RGB -> HSV, (2) per-pixel affine
//! c <- w c + b per HSV channel with hue wrapped mod 1 and S, V clamped
//! to [0, 1], (3) HSV -> RGB, (4) per-RGB-channel spatially-varying
//! Gaussian blur (each output pixel applies its own normalized kernel,
//! zero padding at patch borders), (5) additive scaled noise, (6) final
//! clamp to [0, 1]. Disabled components are the identity.
//!
//! Images are processed as an 8x8 grid of patches: the matching low-res
//! parameter patch is bilinearly upsampled to patch size and applied.
//! Forward is parallel over patches; results are bit-identical for any
//! thread count because every output cell is a pure gather. Backward
//! accumulates per-patch buffers merged in patch-index order.

use rayon::prelude::*;

use crate::color;
use crate::error::{Error, Result};
use crate::image::{ColorSpace, Image};
use crate::noise::NoiseField;
use crate::params::{
    tile_and_upsample, upsample_backward_into, Geometry, ParamMap, SigmaBounds, CH_BIAS, CH_NOISE,
    CH_SIGMA, CH_WEIGHT, PARAM_CHANNELS,
};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    /// Taps outside the patch contribute zero (training mode).
    Zero,
    /// Taps mirror at the border, edge included (test mode; conserves the
    /// channel sum for symmetric kernels).
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelMode {
    /// Per-pixel kernels evaluated exactly at each sigma.
    Exact,
    /// Kernels memoized over sigma buckets of the given step and truncated
    /// at `radius_sigmas` standard deviations. Changes results by at most
    /// about the bucket step per pixel; used for throughput.
    Quantized { step: f64, radius_sigmas: f64 },
}

#[derive(Clone, Copy, Debug)]
pub struct TransformConfig {
    pub enable_affine: bool,
    pub enable_blur: bool,
    pub enable_noise: bool,
    /// Odd kernel side length.
    pub kernel_size: usize,
    pub sigma_bounds: SigmaBounds,
    pub pad_mode: PadMode,
    pub kernel_mode: KernelMode,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            enable_affine: true,
            enable_blur: true,
            enable_noise: true,
            kernel_size: 25,
            sigma_bounds: SigmaBounds::default(),
            pad_mode: PadMode::Zero,
            kernel_mode: KernelMode::Exact,
        }
    }
}

impl TransformConfig {
    pub fn quantized() -> Self {
        TransformConfig {
            kernel_mode: KernelMode::Quantized {
                step: 2.5e-4,
                radius_sigmas: 5.0,
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        self.sigma_bounds.validate()?;
        if let KernelMode::Quantized { step, radius_sigmas } = self.kernel_mode {
            if !(step > 0.0) || !(radius_sigmas > 0.0) {
                return Err(Error::Config(
                    "quantized kernel step and radius must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        self.kernel_size / 2
    }
}

#[inline]
fn wrap01<F: Real>(x: F) -> F {
    x - x.floor()
}

// ---- separable kernel pieces -------------------------------------------

/// Half-open normalized 1D profile: g[i] for offsets -r..=r plus its sum.
/// The 2D kernel is g(dy) g(dx) / s1^2 with s1 = sum(g); the density
/// prefactor cancels under normalization.
fn gauss_profile<F: Real>(sigma: F, r: usize, g: &mut [F]) -> F {
    // One exp then the square recurrence e^{-(i+1)^2 a} = e^{-i^2 a} q^{2i+1}
    // with q = e^{-a}; mirrored halves keep the profile exactly symmetric.
    let q = (-(F::one() / (F::c(2.0) * sigma * sigma))).exp();
    let q2 = q * q;
    g[r] = F::one();
    let mut val = F::one();
    let mut p = q;
    let mut s1 = F::one();
    // Flush far-tail weights to zero: they are invisible after
    // normalization and would otherwise stall in denormal arithmetic.
    let floor = F::c(1e-25);
    for i in 0..r {
        val = val * p;
        p = p * q2;
        if val < floor {
            for j in i..r {
                g[r + 1 + j] = F::zero();
                g[r - 1 - j] = F::zero();
            }
            break;
        }
        g[r + 1 + i] = val;
        g[r - 1 - i] = val;
        s1 += val + val;
    }
    s1
}

/// d g / d sigma = g * d^2 / sigma^3 and its sum.
fn gauss_profile_grad<F: Real>(sigma: F, r: usize, g: &[F], gp: &mut [F]) -> F {
    let inv_s3 = F::one() / (sigma * sigma * sigma);
    let mut s1p = F::zero();
    for i in 0..2 * r + 1 {
        let d = i as f64 - r as f64;
        gp[i] = g[i] * F::c(d * d) * inv_s3;
    }
    for &v in gp.iter().take(2 * r + 1) {
        s1p += v;
    }
    s1p
}

/// Memoized per-bucket kernel profile for one channel of one patch.
/// The sigma-derivative pieces are only populated for backward tables.
#[derive(Debug)]
struct KernelEntry<F: Real> {
    r: usize,
    g: Vec<F>,
    gp: Vec<F>,
    s1: F,
    s1p: F,
    /// Every off-center weight flushed to zero: blur is the identity and
    /// the sigma gradient vanishes.
    delta: bool,
}

#[derive(Debug)]
struct ChannelKernels<F: Real> {
    /// Per-pixel compact bucket index.
    ids: Vec<u32>,
    entries: Vec<KernelEntry<F>>,
}

fn build_channel_kernels<F: Real>(
    sigma_plane: &[F],
    step: f64,
    radius_sigmas: f64,
    max_radius: usize,
    bounds: SigmaBounds,
    with_grads: bool,
) -> ChannelKernels<F> {
    let bucket_of = |s: F| -> u32 { ((s.as_f64() - bounds.min) / step).round() as u32 };
    let mut unique: std::collections::BTreeMap<u32, u32> = std::collections::BTreeMap::new();
    let ids: Vec<u32> = sigma_plane
        .iter()
        .map(|&s| {
            let b = bucket_of(s);
            let next = unique.len() as u32;
            *unique.entry(b).or_insert(next)
        })
        .collect();
    let mut entries: Vec<Option<KernelEntry<F>>> = (0..unique.len()).map(|_| None).collect();
    for (bucket, compact) in unique {
        let sigma = bounds.min + bucket as f64 * step;
        let r = ((radius_sigmas * sigma).ceil() as usize).clamp(1, max_radius);
        let mut g = vec![F::zero(); 2 * r + 1];
        let s1 = gauss_profile(F::c(sigma), r, &mut g);
        let (gp, s1p) = if with_grads {
            let mut gp = vec![F::zero(); 2 * r + 1];
            let s1p = gauss_profile_grad(F::c(sigma), r, &g, &mut gp);
            (gp, s1p)
        } else {
            (Vec::new(), F::zero())
        };
        let delta = s1 == F::one();
        entries[compact as usize] = Some(KernelEntry {
            r,
            g,
            gp,
            s1,
            s1p,
            delta,
        });
    }
    ChannelKernels {
        ids,
        entries: entries.into_iter().map(|e| e.unwrap()).collect(),
    }
}

#[inline]
fn reflect_index(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i - 1) as usize
    } else if i >= n as isize {
        2 * n - 1 - i as usize
    } else {
        i as usize
    }
}

#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let mut acc0 = F::zero();
    let mut acc1 = F::zero();
    let mut acc2 = F::zero();
    let mut acc3 = F::zero();
    let chunks = n / 4;
    for i in 0..chunks {
        let k = 4 * i;
        acc0 += a[k] * b[k];
        acc1 += a[k + 1] * b[k + 1];
        acc2 += a[k + 2] * b[k + 2];
        acc3 += a[k + 3] * b[k + 3];
    }
    for k in 4 * chunks..n {
        acc0 += a[k] * b[k];
    }
    (acc0 + acc1) + (acc2 + acc3)
}

/// Forward spatially-varying blur of one plane. `scratch` must hold at
/// least `kernel_size` elements.
#[allow(clippy::too_many_arguments)]
fn blur_plane<F: Real>(
    input: &[F],
    h: usize,
    w: usize,
    sigma_plane: &[F],
    cfg: &TransformConfig,
    tables: Option<&ChannelKernels<F>>,
    out: &mut [F],
) {
    let max_r = cfg.radius();
    let mut g_local = vec![F::zero(); 2 * max_r + 1];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (g, s1, r): (&[F], F, usize) = match tables {
                Some(t) => {
                    let e = &t.entries[t.ids[p] as usize];
                    if e.delta {
                        out[p] = input[p];
                        continue;
                    }
                    (&e.g, e.s1, e.r)
                }
                None => {
                    let s1 = gauss_profile(sigma_plane[p], max_r, &mut g_local);
                    if s1 == F::one() {
                        out[p] = input[p];
                        continue;
                    }
                    (&g_local[..], s1, max_r)
                }
            };
            let norm = F::one() / (s1 * s1);
            let mut acc = F::zero();
            match cfg.pad_mode {
                PadMode::Zero => {
                    let dy0 = -(y.min(r) as isize);
                    let dy1 = (h - 1 - y).min(r) as isize;
                    let dx0 = -(x.min(r) as isize);
                    let dx1 = (w - 1 - x).min(r) as isize;
                    let gx = &g[(r as isize + dx0) as usize..(r as isize + dx1) as usize + 1];
                    for dy in dy0..=dy1 {
                        let row = (y as isize + dy) as usize;
                        let seg = &input
                            [row * w + (x as isize + dx0) as usize..=row * w + (x as isize + dx1) as usize];
                        acc += g[(r as isize + dy) as usize] * dot(seg, gx);
                    }
                }
                PadMode::Reflect => {
                    for dy in -(r as isize)..=r as isize {
                        let row = reflect_index(y as isize + dy, h);
                        let mut rowacc = F::zero();
                        for dx in -(r as isize)..=r as isize {
                            let col = reflect_index(x as isize + dx, w);
                            rowacc += g[(r as isize + dx) as usize] * input[row * w + col];
                        }
                        acc += g[(r as isize + dy) as usize] * rowacc;
                    }
                }
            }
            out[p] = acc * norm;
        }
    }
}

/// Backward of [`blur_plane`] (zero padding only): accumulates the sigma
/// gradient and the gradient w.r.t. the blur input. Serial within a patch.
#[allow(clippy::too_many_arguments)]
fn blur_plane_backward<F: Real>(
    upstream: &[F],
    input: &[F],
    h: usize,
    w: usize,
    sigma_plane: &[F],
    cfg: &TransformConfig,
    tables: Option<&ChannelKernels<F>>,
    dsigma: &mut [F],
    dinput: &mut [F],
) {
    let max_r = cfg.radius();
    let mut g_local = vec![F::zero(); 2 * max_r + 1];
    let mut gp_local = vec![F::zero(); 2 * max_r + 1];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let up = upstream[p];
            let (g, gp, s1, s1p, r): (&[F], &[F], F, F, usize) = match tables {
                Some(t) => {
                    let e = &t.entries[t.ids[p] as usize];
                    if e.delta {
                        dinput[p] += up;
                        continue;
                    }
                    (&e.g, &e.gp, e.s1, e.s1p, e.r)
                }
                None => {
                    let sigma = sigma_plane[p];
                    let s1 = gauss_profile(sigma, max_r, &mut g_local);
                    if s1 == F::one() {
                        dinput[p] += up;
                        continue;
                    }
                    let s1p = gauss_profile_grad(sigma, max_r, &g_local, &mut gp_local);
                    (&g_local[..], &gp_local[..], s1, s1p, max_r)
                }
            };
            let inv_s2 = F::one() / (s1 * s1);

            let dy0 = -(y.min(r) as isize);
            let dy1 = (h - 1 - y).min(r) as isize;
            let dx0 = -(x.min(r) as isize);
            let dx1 = (w - 1 - x).min(r) as isize;
            let gx = &g[(r as isize + dx0) as usize..(r as isize + dx1) as usize + 1];
            let gpx = &gp[(r as isize + dx0) as usize..(r as isize + dx1) as usize + 1];

            // out = C / s1^2 with C = sum g(dy) g(dx) in; the sigma
            // derivative is (A + B)/s1^2 - 2 C s1'/s1^3 where A, B swap one
            // g factor for g'.
            let mut a = F::zero();
            let mut b = F::zero();
            let mut c_acc = F::zero();
            for dy in dy0..=dy1 {
                let row = (y as isize + dy) as usize;
                let seg =
                    &input[row * w + (x as isize + dx0) as usize..=row * w + (x as isize + dx1) as usize];
                let d_g = dot(seg, gx);
                let d_gp = dot(seg, gpx);
                let wy = g[(r as isize + dy) as usize];
                let wyp = gp[(r as isize + dy) as usize];
                a += wyp * d_g;
                b += wy * d_gp;
                c_acc += wy * d_g;
            }
            dsigma[p] += up * ((a + b) * inv_s2 - F::c(2.0) * c_acc * s1p / (s1 * s1 * s1));

            // Input gradient: scatter up * k back over the window.
            let coeff = up * inv_s2;
            for dy in dy0..=dy1 {
                let row = (y as isize + dy) as usize;
                let wy = g[(r as isize + dy) as usize] * coeff;
                let drow = &mut dinput
                    [row * w + (x as isize + dx0) as usize..=row * w + (x as isize + dx1) as usize];
                for (d, &gv) in drow.iter_mut().zip(gx) {
                    *d += wy * gv;
                }
            }
        }
    }
}

// ---- patch-level transform ----------------------------------------------

/// Intermediate state saved by the forward pass for the backward pass.
#[derive(Debug)]
pub struct PatchTrace<F: Real> {
    ph: usize,
    pw: usize,
    /// Input HSV per pixel (affine stage enabled only).
    hsv: Option<Vec<F>>,
    /// Affine output before hue wrap / S,V clamp (affine enabled only).
    affine_pre: Option<Vec<F>>,
    /// RGB entering the blur stage (equals input when affine is off).
    blur_in: Vec<F>,
    /// Output before the final clamp.
    preclamp: Vec<F>,
}

/// Gradients of one patch w.r.t. its 12 upsampled parameter channels.
pub struct PatchGrads<F: Real> {
    /// Planar 12 x ph x pw buffer.
    pub params: Vec<F>,
    /// Gradient w.r.t. the input patch when requested.
    pub input: Option<Vec<F>>,
}

fn validate_patch_params<F: Real>(params: &[F], n: usize, bounds: SigmaBounds) -> Result<()> {
    let lo = F::c(bounds.min * (1.0 - 1e-6));
    let hi = F::c(bounds.max * (1.0 + 1e-6));
    for c in 0..3 {
        let plane = &params[(CH_SIGMA + c) * n..(CH_SIGMA + c + 1) * n];
        if plane.iter().any(|&s| !(s >= lo && s <= hi)) {
            return Err(Error::Contract(format!(
                "sigma channel {c} outside [{}, {}]: params are not constrained",
                bounds.min, bounds.max
            )));
        }
    }
    Ok(())
}

/// Apply the translation to one patch. `input` and `noise` are planar
/// 3 x ph x pw; `params` is planar 12 x ph x pw in constrained space.
pub fn translate_patch<F: Real>(
    input: &[F],
    ph: usize,
    pw: usize,
    params: &[F],
    noise: &[F],
    cfg: &TransformConfig,
) -> Result<(Vec<F>, PatchTrace<F>)> {
    cfg.validate()?;
    let n = ph * pw;
    if input.len() != 3 * n || noise.len() != 3 * n || params.len() != PARAM_CHANNELS * n {
        return Err(Error::Dimension(format!(
            "patch buffers disagree: input {}, noise {}, params {} for {ph}x{pw}",
            input.len(),
            noise.len(),
            params.len()
        )));
    }
    validate_patch_params(params, n, cfg.sigma_bounds)?;

    // (1)-(3): color stage.
    let (blur_in, hsv, affine_pre) = if cfg.enable_affine {
        let mut blur_in = vec![F::zero(); 3 * n];
        let mut hsv_buf = vec![F::zero(); 3 * n];
        let mut pre_buf = vec![F::zero(); 3 * n];
        for p in 0..n {
            let rgb = [input[p], input[n + p], input[2 * n + p]];
            let hsv = color::rgb_to_hsv(rgb);
            let mut pre = [F::zero(); 3];
            for c in 0..3 {
                pre[c] = params[(CH_WEIGHT + c) * n + p] * hsv[c] + params[(CH_BIAS + c) * n + p];
            }
            let wrapped = [
                wrap01(pre[0]),
                pre[1].max(F::zero()).min(F::one()),
                pre[2].max(F::zero()).min(F::one()),
            ];
            let rgb_out = color::hsv_to_rgb(wrapped);
            for c in 0..3 {
                hsv_buf[c * n + p] = hsv[c];
                pre_buf[c * n + p] = pre[c];
                blur_in[c * n + p] = rgb_out[c];
            }
        }
        (blur_in, Some(hsv_buf), Some(pre_buf))
    } else {
        (input.to_vec(), None, None)
    };

    // (4): spatially-varying blur.
    let tables = match (cfg.enable_blur, cfg.kernel_mode) {
        (true, KernelMode::Quantized { step, radius_sigmas }) => Some([0, 1, 2].map(|c| {
            build_channel_kernels(
                &params[(CH_SIGMA + c) * n..(CH_SIGMA + c + 1) * n],
                step,
                radius_sigmas,
                cfg.radius(),
                cfg.sigma_bounds,
                false,
            )
        })),
        _ => None,
    };
    let mut out = vec![F::zero(); 3 * n];
    if cfg.enable_blur {
        for c in 0..3 {
            let table = tables.as_ref().map(|t| &t[c]);
            let mut plane = vec![F::zero(); n];
            blur_plane(
                &blur_in[c * n..(c + 1) * n],
                ph,
                pw,
                &params[(CH_SIGMA + c) * n..(CH_SIGMA + c + 1) * n],
                cfg,
                table,
                &mut plane,
            );
            out[c * n..(c + 1) * n].copy_from_slice(&plane);
        }
    } else {
        out.copy_from_slice(&blur_in);
    }

    // (5): scaled noise.
    if cfg.enable_noise {
        for c in 0..3 {
            for p in 0..n {
                out[c * n + p] += params[(CH_NOISE + c) * n + p] * noise[c * n + p];
            }
        }
    }

    // (6): final clamp.
    let preclamp = out.clone();
    for v in &mut out {
        *v = v.max(F::zero()).min(F::one());
    }

    Ok((
        out,
        PatchTrace {
            ph,
            pw,
            hsv,
            affine_pre,
            blur_in,
            preclamp,
        },
    ))
}

/// Analytic gradients of [`translate_patch`] w.r.t. the 12 parameter
/// channels (and optionally the input patch). Zero padding only.
pub fn translate_patch_backward<F: Real>(
    trace: &PatchTrace<F>,
    input: &[F],
    params: &[F],
    noise: &[F],
    upstream: &[F],
    cfg: &TransformConfig,
    want_input_grad: bool,
) -> Result<PatchGrads<F>> {
    if cfg.enable_blur && cfg.pad_mode == PadMode::Reflect {
        return Err(Error::Contract(
            "backward is defined for zero padding; reflect padding is a forward test mode".into(),
        ));
    }
    let (ph, pw) = (trace.ph, trace.pw);
    let n = ph * pw;
    if upstream.len() != 3 * n {
        return Err(Error::Dimension(format!(
            "upstream gradient has {} values, expected {}",
            upstream.len(),
            3 * n
        )));
    }
    let mut dparams = vec![F::zero(); PARAM_CHANNELS * n];

    // (6) clamp: subgradient passes inside the closed interval.
    let mut g: Vec<F> = upstream
        .iter()
        .zip(&trace.preclamp)
        .map(|(&u, &v)| {
            if v >= F::zero() && v <= F::one() {
                u
            } else {
                F::zero()
            }
        })
        .collect();

    // (5) noise: linear in n, passes through to the blur output.
    if cfg.enable_noise {
        for c in 0..3 {
            for p in 0..n {
                dparams[(CH_NOISE + c) * n + p] = g[c * n + p] * noise[c * n + p];
            }
        }
    }

    // (4) blur.
    let g3 = if cfg.enable_blur {
        let mut g3 = vec![F::zero(); 3 * n];
        for c in 0..3 {
            let table = match cfg.kernel_mode {
                KernelMode::Quantized { step, radius_sigmas } => Some(build_channel_kernels(
                    &params[(CH_SIGMA + c) * n..(CH_SIGMA + c + 1) * n],
                    step,
                    radius_sigmas,
                    cfg.radius(),
                    cfg.sigma_bounds,
                    true,
                )),
                KernelMode::Exact => None,
            };
            let table = table.as_ref();
            let mut dsig = vec![F::zero(); n];
            blur_plane_backward(
                &g[c * n..(c + 1) * n],
                &trace.blur_in[c * n..(c + 1) * n],
                ph,
                pw,
                &params[(CH_SIGMA + c) * n..(CH_SIGMA + c + 1) * n],
                cfg,
                table,
                &mut dsig,
                &mut g3[c * n..(c + 1) * n],
            );
            dparams[(CH_SIGMA + c) * n..(CH_SIGMA + c + 1) * n].copy_from_slice(&dsig);
        }
        g3
    } else {
        std::mem::take(&mut g)
    };

    // (1)-(3) color stage.
    let mut dinput = want_input_grad.then(|| vec![F::zero(); 3 * n]);
    if cfg.enable_affine {
        let hsv = trace.hsv.as_ref().expect("affine trace");
        let pre = trace.affine_pre.as_ref().expect("affine trace");
        for p in 0..n {
            let pre_p = [pre[p], pre[n + p], pre[2 * n + p]];
            let wrapped = [
                wrap01(pre_p[0]),
                pre_p[1].max(F::zero()).min(F::one()),
                pre_p[2].max(F::zero()).min(F::one()),
            ];
            let grad_rgb = [g3[p], g3[n + p], g3[2 * n + p]];
            let grad_wrapped = color::hsv_to_rgb_backward(wrapped, grad_rgb);
            // Hue wrap is a unit-slope shift; S, V clamps pass inside.
            let mut grad_pre = [grad_wrapped[0], F::zero(), F::zero()];
            for c in 1..3 {
                if pre_p[c] >= F::zero() && pre_p[c] <= F::one() {
                    grad_pre[c] = grad_wrapped[c];
                }
            }
            let mut grad_hsv = [F::zero(); 3];
            for c in 0..3 {
                let h_c = hsv[c * n + p];
                dparams[(CH_WEIGHT + c) * n + p] = grad_pre[c] * h_c;
                dparams[(CH_BIAS + c) * n + p] = grad_pre[c];
                grad_hsv[c] = grad_pre[c] * params[(CH_WEIGHT + c) * n + p];
            }
            if let Some(di) = dinput.as_mut() {
                let rgb_in = [input[p], input[n + p], input[2 * n + p]];
                let grad_in = color::rgb_to_hsv_backward(rgb_in, grad_hsv);
                for c in 0..3 {
                    di[c * n + p] = grad_in[c];
                }
            }
        }
    } else if let Some(di) = dinput.as_mut() {
        di.copy_from_slice(&g3);
    }

    Ok(PatchGrads {
        params: dparams,
        input: dinput,
    })
}

// ---- image-level transform ------------------------------------------------

pub struct ImageTrace<F: Real> {
    pub geom: Geometry,
    cfg: TransformConfig,
    patch_traces: Vec<PatchTrace<F>>,
    patch_inputs: Vec<Vec<F>>,
    patch_noise: Vec<Vec<F>>,
    upsampled_params: Vec<Vec<F>>,
}

fn check_image_geometry<F: Real>(
    img: &Image<F>,
    params: &ParamMap<F>,
    noise: &NoiseField<F>,
    geom: Geometry,
) -> Result<()> {
    geom.validate()?;
    if img.space != ColorSpace::Rgb {
        return Err(Error::Contract("translate expects an RGB image".into()));
    }
    if img.h != geom.high_h || img.w != geom.high_w {
        return Err(Error::Geometry(format!(
            "image is {}x{}, geometry expects {}x{}",
            img.h, img.w, geom.high_h, geom.high_w
        )));
    }
    if params.h != geom.low_h || params.w != geom.low_w {
        return Err(Error::Geometry(format!(
            "parameter map is {}x{}, geometry expects {}x{}",
            params.h, params.w, geom.low_h, geom.low_w
        )));
    }
    if noise.h != geom.high_h || noise.w != geom.high_w {
        return Err(Error::Geometry(format!(
            "noise field is {}x{}, geometry expects {}x{}",
            noise.h, noise.w, geom.high_h, geom.high_w
        )));
    }
    Ok(())
}

fn translate_image_inner<F: Real>(
    img: &Image<F>,
    params: &ParamMap<F>,
    noise: &NoiseField<F>,
    cfg: &TransformConfig,
    geom: Geometry,
    save_trace: bool,
) -> Result<(Image<F>, Option<ImageTrace<F>>)> {
    check_image_geometry(img, params, noise, geom)?;
    cfg.validate()?;
    let grid = tile_and_upsample(params, geom)?;
    let (phh, phw) = geom.patch_high();
    let gridn = crate::params::GRID;

    struct PatchOut<F: Real> {
        out: Vec<F>,
        trace: PatchTrace<F>,
        input: Vec<F>,
        noise: Vec<F>,
    }

    let results: Result<Vec<PatchOut<F>>> = (0..geom.patch_count())
        .into_par_iter()
        .map(|idx| {
            let py = idx / gridn;
            let px = idx % gridn;
            let input = img.extract_patch(py * phh, px * phw, phh, phw);
            let npatch = noise.extract_patch(py * phh, px * phw, phh, phw);
            let (out, trace) =
                translate_patch(&input, phh, phw, &grid.upsampled[idx], &npatch, cfg)?;
            Ok(PatchOut {
                out,
                trace,
                input,
                noise: npatch,
            })
        })
        .collect();
    let results = results?;

    let mut out_img = Image::zeros(geom.high_h, geom.high_w, ColorSpace::Rgb);
    for (idx, r) in results.iter().enumerate() {
        let py = idx / gridn;
        let px = idx % gridn;
        out_img.write_patch(py * phh, px * phw, phh, phw, &r.out);
    }

    let trace = save_trace.then(|| {
        let mut patch_traces = Vec::with_capacity(results.len());
        let mut patch_inputs = Vec::with_capacity(results.len());
        let mut patch_noise = Vec::with_capacity(results.len());
        for r in results {
            patch_traces.push(r.trace);
            patch_inputs.push(r.input);
            patch_noise.push(r.noise);
        }
        ImageTrace {
            geom,
            cfg: *cfg,
            patch_traces,
            patch_inputs,
            patch_noise,
            upsampled_params: grid.upsampled,
        }
    });
    Ok((out_img, trace))
}

/// Translate a full image, keeping the state needed for backward.
pub fn translate_image<F: Real>(
    img: &Image<F>,
    params: &ParamMap<F>,
    noise: &NoiseField<F>,
    cfg: &TransformConfig,
    geom: Geometry,
) -> Result<(Image<F>, ImageTrace<F>)> {
    let (out, trace) = translate_image_inner(img, params, noise, cfg, geom, true)?;
    Ok((out, trace.expect("trace requested")))
}

/// Inference-only translation (no saved state).
pub fn translate_image_infer<F: Real>(
    img: &Image<F>,
    params: &ParamMap<F>,
    noise: &NoiseField<F>,
    cfg: &TransformConfig,
    geom: Geometry,
) -> Result<Image<F>> {
    Ok(translate_image_inner(img, params, noise, cfg, geom, false)?.0)
}

/// Chain an upstream image gradient back to the low-res constrained
/// parameter map (and optionally to the input image).
pub fn translate_image_backward<F: Real>(
    trace: &ImageTrace<F>,
    upstream: &[F],
    want_input_grad: bool,
) -> Result<(Vec<F>, Option<Vec<F>>)> {
    let geom = trace.geom;
    let (phh, phw) = geom.patch_high();
    let gridn = crate::params::GRID;
    if upstream.len() != 3 * geom.high_h * geom.high_w {
        return Err(Error::Dimension(format!(
            "upstream image gradient has {} values, expected {}",
            upstream.len(),
            3 * geom.high_h * geom.high_w
        )));
    }

    let patch_grads: Result<Vec<PatchGrads<F>>> = (0..geom.patch_count())
        .into_par_iter()
        .map(|idx| {
            let py = idx / gridn;
            let px = idx % gridn;
            // Slice the upstream gradient for this patch.
            let mut up = Vec::with_capacity(3 * phh * phw);
            for c in 0..3 {
                for y in 0..phh {
                    let row0 = (c * geom.high_h + py * phh + y) * geom.high_w + px * phw;
                    up.extend_from_slice(&upstream[row0..row0 + phw]);
                }
            }
            translate_patch_backward(
                &trace.patch_traces[idx],
                &trace.patch_inputs[idx],
                &trace.upsampled_params[idx],
                &trace.patch_noise[idx],
                &up,
                &trace.cfg,
                want_input_grad,
            )
        })
        .collect();
    let patch_grads = patch_grads?;

    let mut low_grad = vec![F::zero(); PARAM_CHANNELS * geom.low_h * geom.low_w];
    let mut input_grad = want_input_grad.then(|| vec![F::zero(); 3 * geom.high_h * geom.high_w]);
    for (idx, pg) in patch_grads.iter().enumerate() {
        upsample_backward_into(&pg.params, geom, idx, &mut low_grad);
        if let (Some(gi), Some(pgi)) = (input_grad.as_mut(), pg.input.as_ref()) {
            let py = idx / gridn;
            let px = idx % gridn;
            for c in 0..3 {
                for y in 0..phh {
                    let row0 = (c * geom.high_h + py * phh + y) * geom.high_w + px * phw;
                    gi[row0..row0 + phw]
                        .iter_mut()
                        .zip(&pgi[(c * phh + y) * phw..(c * phh + y) * phw + phw])
                        .for_each(|(a, &b)| *a += b);
                }
            }
        }
    }
    Ok((low_grad, input_grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::params::{constrain, identity_raw, RawParamMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bounds() -> SigmaBounds {
        SigmaBounds::default()
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Image::from_planar(h, w, ColorSpace::Rgb, data).unwrap()
    }

    fn random_param_map(seed: u64, h: usize, w: usize) -> ParamMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raw = identity_raw::<f64>(h, w, bounds());
        for v in raw.data_mut().iter_mut() {
            *v = rng.gen_range(-1.5..1.5);
        }
        constrain(&raw, bounds()).unwrap()
    }

    #[test]
    fn identity_params_reproduce_the_patch() {
        let img = random_image(1, 20, 24);
        let pm = ParamMap::<f64>::identity(20, 24, bounds());
        let noise = NoiseField::<f64>::generate(7, 20, 24);
        let cfg = TransformConfig::default();
        let patch = img.extract_patch(0, 0, 20, 24);
        let npatch = noise.extract_patch(0, 0, 20, 24);
        let (out, _) = translate_patch(&patch, 20, 24, pm.data(), &npatch, &cfg).unwrap();
        for (a, b) in out.iter().zip(&patch) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_patch_with_uniform_blur_is_unchanged() {
        // Reflect padding: every output is a weighted average of the same
        // constant. Zero padding only preserves the interior.
        let (h, w) = (30, 30);
        let data = vec![0.4; 3 * h * w];
        let mut pm_raw = identity_raw::<f64>(h, w, bounds());
        let plane = h * w;
        for c in 0..3 {
            pm_raw.data_mut()[(CH_SIGMA + c) * plane..(CH_SIGMA + c + 1) * plane]
                .fill(2.0f64.ln());
        }
        let pm = constrain(&pm_raw, bounds()).unwrap();
        let noise = vec![0.0; 3 * h * w];

        let mut cfg = TransformConfig::default();
        cfg.pad_mode = PadMode::Reflect;
        let (out, _) = translate_patch(&data, h, w, pm.data(), &noise, &cfg).unwrap();
        for v in &out {
            assert!((v - 0.4).abs() <= 1e-12);
        }

        cfg.pad_mode = PadMode::Zero;
        let (out, _) = translate_patch(&data, h, w, pm.data(), &noise, &cfg).unwrap();
        let r = cfg.radius();
        for c in 0..3 {
            for y in r..h - r {
                for x in r..w - r {
                    let v = out[(c * h + y) * w + x];
                    assert!((v - 0.4).abs() <= 1e-9, "interior ({y},{x}) = {v}");
                }
            }
        }
    }

    #[test]
    fn pure_noise_configuration_outputs_the_noise_field() {
        let (h, w) = (16, 16);
        let input = vec![0.0; 3 * h * w];
        let mut raw = identity_raw::<f64>(h, w, bounds());
        let plane = h * w;
        for c in 0..3 {
            raw.data_mut()[(CH_NOISE + c) * plane..(CH_NOISE + c + 1) * plane].fill(1.0);
        }
        let pm = constrain(&raw, bounds()).unwrap();
        let noise = NoiseField::<f64>::generate(3, h, w);
        let npatch = noise.extract_patch(0, 0, h, w);
        let cfg = TransformConfig::default();
        let (out, _) = translate_patch(&input, h, w, pm.data(), &npatch, &cfg).unwrap();
        for (a, b) in out.iter().zip(&npatch) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn all_components_disabled_is_identity_for_any_params() {
        let img = random_image(5, 16, 16);
        let pm = random_param_map(6, 16, 16);
        let noise = NoiseField::<f64>::generate(8, 16, 16);
        let cfg = TransformConfig {
            enable_affine: false,
            enable_blur: false,
            enable_noise: false,
            ..Default::default()
        };
        let patch = img.extract_patch(0, 0, 16, 16);
        let npatch = noise.extract_patch(0, 0, 16, 16);
        let (out, _) = translate_patch(&patch, 16, 16, pm.data(), &npatch, &cfg).unwrap();
        assert_eq!(out, patch);
    }

    #[test]
    fn unconstrained_params_are_a_contract_error() {
        let img = random_image(9, 16, 16);
        let patch = img.extract_patch(0, 0, 16, 16);
        let mut params = ParamMap::<f64>::identity(16, 16, bounds()).data().to_vec();
        params[CH_SIGMA * 256] = 55.0; // impossible sigma
        let noise = vec![0.5; 3 * 256];
        let cfg = TransformConfig::default();
        let err = translate_patch(&patch, 16, 16, &params, &noise, &cfg).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn patch_backward_matches_finite_differences() {
        let report = gradcheck::check_translate_params(41, 3, 12, 12).unwrap();
        assert!(
            report.passed(),
            "max rel err {} over {} entries",
            report.max_rel_err,
            report.entries_checked
        );
        assert!(report.entries_checked > 0);
    }

    #[test]
    fn patch_input_gradient_matches_finite_differences() {
        let report = gradcheck::check_translate_input(43, 2, 10, 10).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn quantized_kernels_stay_within_tolerance_of_exact() {
        let img = random_image(11, 30, 30);
        let pm = random_param_map(12, 30, 30);
        let noise = NoiseField::<f64>::generate(13, 30, 30);
        let patch = img.extract_patch(0, 0, 30, 30);
        let npatch = noise.extract_patch(0, 0, 30, 30);
        let exact_cfg = TransformConfig::default();
        let quant_cfg = TransformConfig::quantized();
        let (a, _) = translate_patch(&patch, 30, 30, pm.data(), &npatch, &exact_cfg).unwrap();
        let (b, _) = translate_patch(&patch, 30, 30, pm.data(), &npatch, &quant_cfg).unwrap();
        let max = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max <= 1e-3, "max deviation {max}");
    }

    #[test]
    fn reflect_mode_preserves_channel_sums() {
        let (h, w) = (40, 40);
        let img = random_image(21, h, w);
        // Uniform sigma per channel: a single symmetric kernel with
        // edge-mirrored padding redistributes but conserves total mass.
        let mut raw = identity_raw::<f64>(h, w, bounds());
        let plane = h * w;
        for (c, sigma) in [0.7f64, 1.7, 3.2].into_iter().enumerate() {
            raw.data_mut()[(CH_SIGMA + c) * plane..(CH_SIGMA + c + 1) * plane]
                .fill(sigma.ln());
        }
        let pm = constrain(&raw, bounds()).unwrap();
        let noise = vec![0.0; 3 * plane];
        let cfg = TransformConfig {
            enable_affine: false,
            enable_noise: false,
            pad_mode: PadMode::Reflect,
            ..Default::default()
        };
        let patch = img.extract_patch(0, 0, h, w);
        let (out, _) = translate_patch(&patch, h, w, pm.data(), &noise, &cfg).unwrap();
        for c in 0..3 {
            let before: f64 = patch[c * plane..(c + 1) * plane].iter().sum();
            let after: f64 = out[c * plane..(c + 1) * plane].iter().sum();
            let mean_diff = (before - after).abs() / plane as f64;
            assert!(mean_diff <= 1e-6, "channel {c}: mean shift {mean_diff}");
        }
    }

    #[test]
    fn image_identity_and_geometry_errors() {
        let geom = Geometry::new(48, 64, 16, 16).unwrap();
        let img = random_image(31, 48, 64);
        let pm = ParamMap::<f64>::identity(16, 16, bounds());
        let noise = NoiseField::<f64>::generate(32, 48, 64);
        let cfg = TransformConfig::default();
        let out = translate_image_infer(&img, &pm, &noise, &cfg, geom).unwrap();
        let max = img
            .data()
            .iter()
            .zip(out.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max <= 1e-6, "identity deviation {max}");

        let wrong = random_image(33, 40, 64);
        let err = translate_image_infer(&wrong, &pm, &noise, &cfg, geom).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
        assert!(err.to_string().contains("48x64"), "{err}");
    }

    #[test]
    fn flip_equivariance_on_a_small_image() {
        let geom = Geometry::new(48, 64, 16, 16).unwrap();
        let img = random_image(35, 48, 64);
        let pm = random_param_map(36, 16, 16);
        let noise = NoiseField::<f64>::generate(37, 48, 64);
        let cfg = TransformConfig::default();
        let out = translate_image_infer(&img, &pm, &noise, &cfg, geom).unwrap();
        let out_flipped = translate_image_infer(
            &img.flip_horizontal(),
            &pm.flip_horizontal(),
            &noise.flip_horizontal(),
            &cfg,
            geom,
        )
        .unwrap();
        let max = out
            .flip_horizontal()
            .data()
            .iter()
            .zip(out_flipped.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max <= 1e-6, "flip deviation {max}");
    }

    #[test]
    fn single_pixel_perturbation_stays_in_kernel_window() {
        let geom = Geometry::new(48, 64, 16, 16).unwrap();
        let img = random_image(51, 48, 64);
        let pm = random_param_map(52, 16, 16);
        let noise = NoiseField::<f64>::generate(53, 48, 64);
        let cfg = TransformConfig::default();
        let base = translate_image_infer(&img, &pm, &noise, &cfg, geom).unwrap();
        let (py, px) = (23, 37);
        let mut poked = img.clone();
        for c in 0..3 {
            let v = poked.at(c, py, px);
            poked.set(c, py, px, (v + 0.31).min(1.0));
        }
        let out = translate_image_infer(&poked, &pm, &noise, &cfg, geom).unwrap();
        let r = cfg.radius() as isize;
        for c in 0..3 {
            for y in 0..48isize {
                for x in 0..64isize {
                    let d = (base.at(c, y as usize, x as usize)
                        - out.at(c, y as usize, x as usize))
                    .abs();
                    if d > 1e-12 {
                        assert!(
                            (y - py as isize).abs() <= r && (x - px as isize).abs() <= r,
                            "support leak at ({y},{x}), delta {d}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn image_backward_matches_patch_composition() {
        // The low-res gradient must match a finite difference through the
        // full image pipeline on a few random parameter entries.
        let geom = Geometry::new(32, 32, 16, 16).unwrap();
        let img = random_image(61, 32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let mut raw = identity_raw::<f64>(16, 16, bounds());
        for v in raw.data_mut().iter_mut() {
            *v = rng.gen_range(-0.4..0.4);
        }
        let noise = NoiseField::<f64>::generate(63, 32, 32);
        let cfg = TransformConfig::default();
        let proj: Vec<f64> = (0..3 * 32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let eval = |raw_data: &[f64]| -> f64 {
            let r = RawParamMap::from_planar(16, 16, raw_data.to_vec()).unwrap();
            let pm = constrain(&r, bounds()).unwrap();
            let out = translate_image_infer(&img, &pm, &noise, &cfg, geom).unwrap();
            out.data().iter().zip(&proj).map(|(a, b)| a * b).sum()
        };

        let pm = constrain(&raw, bounds()).unwrap();
        let (_, trace) = translate_image(&img, &pm, &noise, &cfg, geom).unwrap();
        let (low_grad, _) = translate_image_backward(&trace, &proj, false).unwrap();
        let raw_grad =
            crate::params::constrain_backward(&raw, bounds(), &low_grad).unwrap();

        let mut data = raw.data().to_vec();
        let mut checked = 0;
        for _ in 0..60 {
            let i = rng.gen_range(0..data.len());
            let orig = data[i];
            data[i] = orig + 1e-5;
            let fp = eval(&data);
            data[i] = orig - 1e-5;
            let fm = eval(&data);
            data[i] = orig;
            let numeric = (fp - fm) / 2e-5;
            let denom = raw_grad[i].abs() + numeric.abs();
            if denom > 1e-7 {
                checked += 1;
                let rel = (raw_grad[i] - numeric).abs() / denom;
                assert!(rel <= 2e-4, "entry {i}: {} vs {numeric}", raw_grad[i]);
            }
        }
        assert!(checked > 10);
    }
}
