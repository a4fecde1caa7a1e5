//! Per-pixel transformation parameter maps.
//!
//! Twelve channels per pixel, planar layout, frozen channel order:
//! 0-2 affine weights (H, S, V), 3-5 affine biases (H, S, V),
//! 6-8 blur sigmas (R, G, B), 9-11 noise scales (R, G, B).
//!
//! Raw maps live in the unconstrained network-output space. Constraining
//! passes weights, biases and noise scales through unchanged and maps raw
//! sigma through clamp(exp(raw), sigma_min, sigma_max); exp gives the
//! closed-form identity initialization raw = ln(sigma_min).

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::resize;

pub const PARAM_CHANNELS: usize = 12;
pub const CH_WEIGHT: usize = 0; // +0 H, +1 S, +2 V
pub const CH_BIAS: usize = 3;
pub const CH_SIGMA: usize = 6; // +0 R, +1 G, +2 B
pub const CH_NOISE: usize = 9;

/// Grid factor of the patch tiling: each image dimension is divided by 8.
pub const GRID: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for SigmaBounds {
    fn default() -> Self {
        SigmaBounds { min: 0.05, max: 8.0 }
    }
}

impl SigmaBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.max > self.min) {
            return Err(Error::Config(format!(
                "sigma bounds must satisfy 0 < min < max, got [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

/// High-/low-resolution tiling geometry. Both rasters are split into the
/// same 8x8 grid; one low-res parameter patch is upsampled to drive one
/// high-res image patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub high_h: usize,
    pub high_w: usize,
    pub low_h: usize,
    pub low_w: usize,
}

impl Geometry {
    pub fn new(high_h: usize, high_w: usize, low_h: usize, low_w: usize) -> Result<Self> {
        let g = Geometry {
            high_h,
            high_w,
            low_h,
            low_w,
        };
        g.validate()?;
        Ok(g)
    }

    /// Full-scale geometry: 720x1280 images, 96x160 parameter maps.
    pub fn full() -> Self {
        Geometry {
            high_h: 720,
            high_w: 1280,
            low_h: 96,
            low_w: 160,
        }
    }

    /// Desk-scale geometry used by the toy experiments.
    pub fn desk() -> Self {
        Geometry {
            high_h: 240,
            high_w: 416,
            low_h: 32,
            low_w: 56,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("high_h", self.high_h),
            ("high_w", self.high_w),
            ("low_h", self.low_h),
            ("low_w", self.low_w),
        ] {
            if v == 0 || v % GRID != 0 {
                return Err(Error::Config(format!(
                    "{name} = {v} must be a positive multiple of {GRID}"
                )));
            }
        }
        Ok(())
    }

    pub fn patch_high(&self) -> (usize, usize) {
        (self.high_h / GRID, self.high_w / GRID)
    }

    pub fn patch_low(&self) -> (usize, usize) {
        (self.low_h / GRID, self.low_w / GRID)
    }

    pub fn patch_count(&self) -> usize {
        GRID * GRID
    }
}

fn check_finite<F: Real>(data: &[F], what: &str) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "{what} contains a non-finite value at flat index {pos}"
        )));
    }
    Ok(())
}

/// Unconstrained 12-channel map in network-output space.
#[derive(Clone, Debug)]
pub struct RawParamMap<F: Real> {
    pub h: usize,
    pub w: usize,
    data: Vec<F>,
}

impl<F: Real> RawParamMap<F> {
    pub fn from_planar(h: usize, w: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != PARAM_CHANNELS * h * w {
            return Err(Error::Dimension(format!(
                "raw parameter buffer has {} values, expected {PARAM_CHANNELS}*{h}*{w}",
                data.len()
            )));
        }
        Ok(RawParamMap { h, w, data })
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[F] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }
}

/// The raw-space map whose constrained form is the identity translation:
/// weights 1, biases 0, noise 0, raw sigma = ln(sigma_min).
pub fn identity_raw<F: Real>(h: usize, w: usize, bounds: SigmaBounds) -> RawParamMap<F> {
    let mut data = vec![F::zero(); PARAM_CHANNELS * h * w];
    let plane = h * w;
    for c in 0..3 {
        data[(CH_WEIGHT + c) * plane..(CH_WEIGHT + c + 1) * plane].fill(F::one());
        data[(CH_SIGMA + c) * plane..(CH_SIGMA + c + 1) * plane].fill(F::c(bounds.min.ln()));
    }
    RawParamMap { h, w, data }
}

/// The per-channel raw identity vector (what a zero-weight prediction head
/// must produce as bias to start at the identity translation).
pub fn identity_raw_vector(bounds: SigmaBounds) -> [f64; PARAM_CHANNELS] {
    let mut v = [0.0; PARAM_CHANNELS];
    for c in 0..3 {
        v[CH_WEIGHT + c] = 1.0;
        v[CH_SIGMA + c] = bounds.min.ln();
    }
    v
}

/// Constrained 12-channel map: sigma channels lie in the bounds.
#[derive(Clone, Debug)]
pub struct ParamMap<F: Real> {
    pub h: usize,
    pub w: usize,
    pub bounds: SigmaBounds,
    data: Vec<F>,
}

impl<F: Real> ParamMap<F> {
    /// Wrap an already-constrained buffer, validating the invariants.
    pub fn from_planar(h: usize, w: usize, bounds: SigmaBounds, data: Vec<F>) -> Result<Self> {
        bounds.validate()?;
        if data.len() != PARAM_CHANNELS * h * w {
            return Err(Error::Dimension(format!(
                "parameter buffer has {} values, expected {PARAM_CHANNELS}*{h}*{w}",
                data.len()
            )));
        }
        check_finite(&data, "parameter map")?;
        let plane = h * w;
        let lo = F::c(bounds.min * (1.0 - 1e-9));
        let hi = F::c(bounds.max * (1.0 + 1e-9));
        for c in 0..3 {
            let sig = &data[(CH_SIGMA + c) * plane..(CH_SIGMA + c + 1) * plane];
            if sig.iter().any(|&s| s < lo || s > hi) {
                return Err(Error::Contract(format!(
                    "sigma channel {c} leaves the range [{}, {}]; constrain the map first",
                    bounds.min, bounds.max
                )));
            }
        }
        Ok(ParamMap { h, w, bounds, data })
    }

    pub fn identity(h: usize, w: usize, bounds: SigmaBounds) -> Self {
        constrain(&identity_raw(h, w, bounds), bounds).expect("identity map is finite")
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[F] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Copy the 12-channel patch with top-left (y0, x0).
    pub fn extract_patch(&self, y0: usize, x0: usize, ph: usize, pw: usize) -> Vec<F> {
        let mut out = Vec::with_capacity(PARAM_CHANNELS * ph * pw);
        for c in 0..PARAM_CHANNELS {
            let plane = self.plane(c);
            for y in 0..ph {
                out.extend_from_slice(
                    &plane[(y0 + y) * self.w + x0..(y0 + y) * self.w + x0 + pw],
                );
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> ParamMap<F> {
        let mut out = self.clone();
        let n = out.h * out.w;
        for c in 0..PARAM_CHANNELS {
            let plane = &mut out.data[c * n..(c + 1) * n];
            for y in 0..self.h {
                plane[y * self.w..(y + 1) * self.w].reverse();
            }
        }
        out
    }
}

/// Map a raw (unconstrained) parameter map into constrained space.
pub fn constrain<F: Real>(raw: &RawParamMap<F>, bounds: SigmaBounds) -> Result<ParamMap<F>> {
    bounds.validate()?;
    check_finite(raw.data(), "raw parameter map")?;
    let plane = raw.h * raw.w;
    let mut data = raw.data().to_vec();
    let lo = F::c(bounds.min);
    let hi = F::c(bounds.max);
    // Snap window: exp(ln(x)) can land a few ulps off the boundary; values
    // that close to a bound are pinned onto it so the identity raw map
    // constrains to exactly sigma_min.
    let snap = F::c(16.0) * F::epsilon();
    let lo_snap = lo * (F::one() + snap);
    let hi_snap = hi * (F::one() - snap);
    for c in 0..3 {
        for v in &mut data[(CH_SIGMA + c) * plane..(CH_SIGMA + c + 1) * plane] {
            let s = v.exp();
            *v = if s <= lo_snap {
                lo
            } else if s >= hi_snap {
                hi
            } else {
                s
            };
        }
    }
    Ok(ParamMap {
        h: raw.h,
        w: raw.w,
        bounds,
        data,
    })
}

/// Chain an upstream gradient in constrained space back to raw space.
///
/// Weight/bias/noise channels pass through. Sigma channels multiply by
/// d exp / d raw and saturate to zero where the clamp was active; the
/// boundary itself passes (relative slack 1e-5 absorbs the exp/ln float
/// round trip in both precisions) so identity-initialized sigmas can move.
pub fn constrain_backward<F: Real>(
    raw: &RawParamMap<F>,
    bounds: SigmaBounds,
    grad_constrained: &[F],
) -> Result<Vec<F>> {
    let plane = raw.h * raw.w;
    if grad_constrained.len() != PARAM_CHANNELS * plane {
        return Err(Error::Dimension(format!(
            "constrained gradient has {} values, expected {}",
            grad_constrained.len(),
            PARAM_CHANNELS * plane
        )));
    }
    let mut grad = grad_constrained.to_vec();
    let lo = F::c(bounds.min * (1.0 - 1e-5));
    let hi = F::c(bounds.max * (1.0 + 1e-5));
    for c in 0..3 {
        let raw_plane = raw.plane(CH_SIGMA + c);
        let g = &mut grad[(CH_SIGMA + c) * plane..(CH_SIGMA + c + 1) * plane];
        for (gv, &rv) in g.iter_mut().zip(raw_plane) {
            let s = rv.exp();
            *gv = if s >= lo && s <= hi {
                *gv * s
            } else {
                F::zero()
            };
        }
    }
    Ok(grad)
}

/// The 8x8 patch decomposition of a low-res map together with its
/// per-patch bilinear upsampling to high-res patch size.
#[derive(Clone, Debug)]
pub struct ParamPatchGrid<F: Real> {
    pub geom: Geometry,
    /// Row-major grid of 12-channel low-res patches.
    pub low: Vec<Vec<F>>,
    /// Matching upsampled 12-channel patches.
    pub upsampled: Vec<Vec<F>>,
}

/// Split a low-res map into the 8x8 grid and upsample each patch per
/// channel to the high-res patch size.
pub fn tile_and_upsample<F: Real>(map: &ParamMap<F>, geom: Geometry) -> Result<ParamPatchGrid<F>> {
    geom.validate()?;
    if map.h != geom.low_h || map.w != geom.low_w {
        return Err(Error::Config(format!(
            "parameter map is {}x{}, geometry expects {}x{}",
            map.h, map.w, geom.low_h, geom.low_w
        )));
    }
    let (plh, plw) = geom.patch_low();
    let (phh, phw) = geom.patch_high();
    let mut low = Vec::with_capacity(geom.patch_count());
    let mut upsampled = Vec::with_capacity(geom.patch_count());
    for py in 0..GRID {
        for px in 0..GRID {
            let patch = map.extract_patch(py * plh, px * plw, plh, plw);
            let mut up = vec![F::zero(); PARAM_CHANNELS * phh * phw];
            for c in 0..PARAM_CHANNELS {
                resize::bilinear_plane(
                    &patch[c * plh * plw..(c + 1) * plh * plw],
                    plh,
                    plw,
                    &mut up[c * phh * phw..(c + 1) * phh * phw],
                    phh,
                    phw,
                );
            }
            low.push(patch);
            upsampled.push(up);
        }
    }
    Ok(ParamPatchGrid {
        geom,
        low,
        upsampled,
    })
}

/// Transpose of the per-patch upsampling: scatter a gradient on one
/// upsampled patch back onto the low-res map gradient buffer.
pub fn upsample_backward_into<F: Real>(
    grad_up: &[F],
    geom: Geometry,
    patch_index: usize,
    grad_low_map: &mut [F],
) {
    let (plh, plw) = geom.patch_low();
    let (phh, phw) = geom.patch_high();
    debug_assert_eq!(grad_up.len(), PARAM_CHANNELS * phh * phw);
    debug_assert_eq!(grad_low_map.len(), PARAM_CHANNELS * geom.low_h * geom.low_w);
    let py = patch_index / GRID;
    let px = patch_index % GRID;
    let mut patch_grad = vec![F::zero(); plh * plw];
    for c in 0..PARAM_CHANNELS {
        patch_grad.fill(F::zero());
        resize::bilinear_plane_backward(
            &grad_up[c * phh * phw..(c + 1) * phh * phw],
            phh,
            phw,
            &mut patch_grad,
            plh,
            plw,
        );
        let base = c * geom.low_h * geom.low_w;
        for y in 0..plh {
            let row = base + (py * plh + y) * geom.low_w + px * plw;
            for x in 0..plw {
                grad_low_map[row + x] += patch_grad[y * plw + x];
            }
        }
    }
}

// ---- persistence ------------------------------------------------------

const PARAM_MAGIC: &[u8; 4] = b"KPNP";
const PARAM_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSpace {
    Raw,
    Constrained,
}

fn write_params_file<F: Real>(
    path: &Path,
    h: usize,
    w: usize,
    space: ParamSpace,
    planar: &[F],
) -> Result<()> {
    let mut buf = Vec::with_capacity(4 + 4 * 4 + 1 + planar.len() * 4);
    buf.extend_from_slice(PARAM_MAGIC);
    buf.extend_from_slice(&PARAM_VERSION.to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(PARAM_CHANNELS as u32).to_le_bytes());
    buf.push(match space {
        ParamSpace::Raw => 0,
        ParamSpace::Constrained => 1,
    });
    // Values are stored row-major, channel-minor (interleaved).
    let plane = h * w;
    for p in 0..plane {
        for c in 0..PARAM_CHANNELS {
            buf.extend_from_slice(&planar[c * plane + p].to_f32_lossy().to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn save_params<F: Real>(map: &ParamMap<F>, path: &Path) -> Result<()> {
    write_params_file(path, map.h, map.w, ParamSpace::Constrained, map.data())
}

pub fn save_raw_params<F: Real>(map: &RawParamMap<F>, path: &Path) -> Result<()> {
    write_params_file(path, map.h, map.w, ParamSpace::Raw, map.data())
}

#[derive(Debug)]
pub struct LoadedParams<F: Real> {
    pub h: usize,
    pub w: usize,
    pub space: ParamSpace,
    /// Planar 12-channel buffer (converted from the interleaved file form).
    pub data: Vec<F>,
}

impl<F: Real> LoadedParams<F> {
    pub fn into_constrained(self, bounds: SigmaBounds) -> Result<ParamMap<F>> {
        match self.space {
            ParamSpace::Constrained => ParamMap::from_planar(self.h, self.w, bounds, self.data),
            ParamSpace::Raw => {
                constrain(&RawParamMap::from_planar(self.h, self.w, self.data)?, bounds)
            }
        }
    }
}

pub fn load_params<F: Real>(path: &Path) -> Result<LoadedParams<F>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 21 {
        return Err(Error::Format("truncated header".into()));
    }
    if &bytes[0..4] != PARAM_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[0..4],
            PARAM_MAGIC
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != PARAM_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {PARAM_VERSION}"
        )));
    }
    let h = u32_at(8) as usize;
    let w = u32_at(12) as usize;
    let c = u32_at(16) as usize;
    if c != PARAM_CHANNELS {
        return Err(Error::Format(format!(
            "channel count {c} in header, expected {PARAM_CHANNELS}"
        )));
    }
    let space = match bytes[20] {
        0 => ParamSpace::Raw,
        1 => ParamSpace::Constrained,
        other => return Err(Error::Format(format!("unknown space flag {other}"))),
    };
    let plane = h * w;
    let expected = 21 + plane * PARAM_CHANNELS * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "file has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let mut data = vec![F::zero(); PARAM_CHANNELS * plane];
    for p in 0..plane {
        for ch in 0..PARAM_CHANNELS {
            let o = 21 + (p * PARAM_CHANNELS + ch) * 4;
            let v = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
            data[ch * plane + p] = F::from_f32_exact(v);
        }
    }
    Ok(LoadedParams { h, w, space, data })
}
