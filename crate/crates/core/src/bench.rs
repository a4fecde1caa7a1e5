//! Throughput measurement helpers for full-geometry translation.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::{ColorSpace, Image};
use crate::noise::NoiseField;
use crate::params::{constrain, identity_raw, Geometry, ParamMap, SigmaBounds};
use crate::real::Real;
use crate::translate::{translate_image_infer, TransformConfig};

/// A representative random image and constrained parameter map.
pub fn random_bench_inputs<F: Real>(
    geom: Geometry,
    seed: u64,
) -> Result<(Image<F>, ParamMap<F>, NoiseField<F>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = SigmaBounds::default();
    let data = (0..3 * geom.high_h * geom.high_w)
        .map(|_| F::c(rng.gen_range(0.0..1.0)))
        .collect();
    let img = Image::from_planar(geom.high_h, geom.high_w, ColorSpace::Rgb, data)?;
    let mut raw = identity_raw::<F>(geom.low_h, geom.low_w, bounds);
    let plane = geom.low_h * geom.low_w;
    for c in 0..3 {
        for p in 0..plane {
            raw.data_mut()[(crate::params::CH_WEIGHT + c) * plane + p] =
                F::c(rng.gen_range(0.7..1.1));
            raw.data_mut()[(crate::params::CH_BIAS + c) * plane + p] =
                F::c(rng.gen_range(-0.08..0.08));
            raw.data_mut()[(crate::params::CH_SIGMA + c) * plane + p] =
                F::c(rng.gen_range(0.1f64.ln()..4.0f64.ln()));
            raw.data_mut()[(crate::params::CH_NOISE + c) * plane + p] =
                F::c(rng.gen_range(0.0..0.3));
        }
    }
    let pm = constrain(&raw, bounds)?;
    let noise = NoiseField::generate(seed ^ 0xBE, geom.high_h, geom.high_w);
    Ok((img, pm, noise))
}

/// Wall time of one full-image translation.
pub fn time_translate<F: Real>(
    img: &Image<F>,
    pm: &ParamMap<F>,
    noise: &NoiseField<F>,
    cfg: &TransformConfig,
    geom: Geometry,
) -> Result<Duration> {
    let start = Instant::now();
    let out = translate_image_infer(img, pm, noise, cfg, geom)?;
    let elapsed = start.elapsed();
    // Keep the output alive past the clock read.
    std::hint::black_box(out.data().len());
    Ok(elapsed)
}
