//! Inference on a trained checkpoint: predict the parameter map for one
//! image and apply the translation.

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::networks::{Encoder, ModelBundle};
use crate::noise::NoiseField;
use crate::params::{constrain, ParamMap};
use crate::real::Real;
use crate::translate::{translate_image_infer, KernelMode, PadMode, TransformConfig};

#[derive(Clone, Copy, Debug, Default)]
pub struct InferOptions {
    pub disable_affine: bool,
    pub disable_blur: bool,
    pub disable_noise: bool,
    /// None keeps exact kernels; Some(step) memoizes sigma buckets.
    pub quantized_step: Option<f64>,
}

pub fn transform_config_for<F: Real>(
    bundle: &ModelBundle<F>,
    opts: &InferOptions,
) -> TransformConfig {
    TransformConfig {
        enable_affine: bundle.meta.enable_affine && !opts.disable_affine,
        enable_blur: bundle.meta.enable_blur && !opts.disable_blur,
        enable_noise: bundle.meta.enable_noise && !opts.disable_noise,
        kernel_size: 25,
        sigma_bounds: bundle.meta.sigma_bounds,
        pad_mode: PadMode::Zero,
        kernel_mode: match opts.quantized_step {
            Some(step) => KernelMode::Quantized {
                step,
                radius_sigmas: 5.0,
            },
            None => KernelMode::Exact,
        },
    }
}

/// Predict the constrained low-res parameter map for one image.
pub fn predict_param_map<F: Real>(
    bundle: &ModelBundle<F>,
    img: &Image<F>,
    labels: Option<&LabelMap>,
) -> Result<ParamMap<F>> {
    let geom = bundle.meta.geom;
    if img.h != geom.high_h || img.w != geom.high_w {
        return Err(Error::Geometry(format!(
            "image is {}x{}, checkpoint geometry expects {}x{}",
            img.h, img.w, geom.high_h, geom.high_w
        )));
    }
    if matches!(bundle.encoder, Encoder::Oracle { .. }) && labels.is_none() {
        return Err(Error::Usage(
            "this checkpoint uses the oracle encoder; label maps are required".into(),
        ));
    }
    let low_img = img.resize_bilinear(geom.low_h, geom.low_w);
    let feats = bundle
        .encoder
        .features(Some(&low_img), labels, geom.low_h, geom.low_w)?;
    let raw = bundle.kpn.forward_plain(&feats)?;
    constrain(&raw, bundle.meta.sigma_bounds)
}

/// Full-image translation with a checkpoint.
pub fn translate_with_bundle<F: Real>(
    bundle: &ModelBundle<F>,
    img: &Image<F>,
    labels: Option<&LabelMap>,
    opts: &InferOptions,
) -> Result<Image<F>> {
    let geom = bundle.meta.geom;
    let pm = predict_param_map(bundle, img, labels)?;
    let noise = NoiseField::<F>::generate(bundle.meta.noise_seed, geom.high_h, geom.high_w);
    let cfg = transform_config_for(bundle, opts);
    translate_image_infer(img, &pm, &noise, &cfg, geom)
}
