//! Losses, the Adam optimizer, batch sampling and the alternating
//! adversarial training loop.
//!
//! Per iteration: the batch is translated once with the current head;
//! the discriminator updates on real-vs-translated at both scales; then
//! the head updates on the non-saturating adversarial objective plus the
//! identity loss, back through the translation function. The encoder is
//! never updated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::networks::{
    save_checkpoint, CheckpointMeta, Discriminator, Encoder, FeatureMode, Kpn, ModelBundle,
    TapeBinding,
};
use crate::noise::NoiseField;
use crate::params::{constrain, constrain_backward, Geometry, SigmaBounds, GRID};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, ValueId};
use crate::translate::{
    translate_image, translate_image_backward, KernelMode, PadMode, TransformConfig,
};

/// Epsilon clamp applied inside every log to avoid -log 0.
pub const LOG_EPS: f64 = 1e-7;

// ---- losses -----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscReading {
    /// D(x) is the sigmoid of the mean logit (scalar reading).
    SigmoidMean,
    /// Mean of per-location binary cross entropies over the logit map.
    PerLocation,
}

/// D(x) as a scalar in (0, 1): sigmoid of the mean logit.
pub fn d_sigmoid_mean<F: Real>(tape: &mut Tape<F>, logits: ValueId) -> ValueId {
    let m = tape.mean(logits);
    tape.sigmoid(m)
}

fn checked_unit<F: Real>(tape: &Tape<F>, d: ValueId, what: &str) -> Result<()> {
    let v = tape.scalar_value(d).as_f64();
    if !v.is_finite() || !(0.0..=1.0).contains(&v) {
        return Err(Error::Numeric(format!(
            "{what} = {v} is outside the unit interval"
        )));
    }
    Ok(())
}

/// -log(d), eps-clamped.
fn neg_log<F: Real>(tape: &mut Tape<F>, d: ValueId) -> Result<ValueId> {
    let c = tape.clamp(d, F::c(LOG_EPS), F::one());
    let l = tape.log(c)?;
    Ok(tape.neg(l))
}

/// -log(1 - d), eps-clamped.
fn neg_log_one_minus<F: Real>(tape: &mut Tape<F>, d: ValueId) -> Result<ValueId> {
    let om = tape.rsub_scalar(d, F::one());
    neg_log(tape, om)
}

/// "Looks real" term for a logit map: -log D(x).
pub fn real_term<F: Real>(
    tape: &mut Tape<F>,
    logits: ValueId,
    reading: DiscReading,
) -> Result<ValueId> {
    match reading {
        DiscReading::SigmoidMean => {
            let d = d_sigmoid_mean(tape, logits);
            checked_unit(tape, d, "D(x)")?;
            neg_log(tape, d)
        }
        DiscReading::PerLocation => {
            let s = tape.sigmoid(logits);
            let c = tape.clamp(s, F::c(LOG_EPS), F::one());
            let l = tape.log(c)?;
            let m = tape.mean(l);
            Ok(tape.neg(m))
        }
    }
}

/// "Looks fake" term for a logit map: -log(1 - D(x)).
pub fn fake_term<F: Real>(
    tape: &mut Tape<F>,
    logits: ValueId,
    reading: DiscReading,
) -> Result<ValueId> {
    match reading {
        DiscReading::SigmoidMean => {
            let d = d_sigmoid_mean(tape, logits);
            checked_unit(tape, d, "D(x)")?;
            neg_log_one_minus(tape, d)
        }
        DiscReading::PerLocation => {
            let s = tape.sigmoid(logits);
            let om = tape.rsub_scalar(s, F::one());
            let c = tape.clamp(om, F::c(LOG_EPS), F::one());
            let l = tape.log(c)?;
            let m = tape.mean(l);
            Ok(tape.neg(m))
        }
    }
}

/// Discriminator objective from the four sigmoid-mean outputs:
/// -log(1-D(P_t)) - log(D(P_r)) - log(1-D(I_t^l)) - log(D(I_r^l)).
pub fn disc_loss<F: Real>(
    tape: &mut Tape<F>,
    d_pt: ValueId,
    d_pr: ValueId,
    d_tl: ValueId,
    d_rl: ValueId,
) -> Result<ValueId> {
    for (d, what) in [
        (d_pt, "D(P_t)"),
        (d_pr, "D(P_r)"),
        (d_tl, "D(I_t^l)"),
        (d_rl, "D(I_r^l)"),
    ] {
        checked_unit(tape, d, what)?;
    }
    let t1 = neg_log_one_minus(tape, d_pt)?;
    let t2 = neg_log(tape, d_pr)?;
    let t3 = neg_log_one_minus(tape, d_tl)?;
    let t4 = neg_log(tape, d_rl)?;
    let s12 = tape.add(t1, t2)?;
    let s34 = tape.add(t3, t4)?;
    tape.add(s12, s34)
}

/// Non-saturating generator objective plus identity loss:
/// -log(D(P_t)) - log(D(I_t^l)) + lambda_id * MSE(P_t, P_s).
pub fn gen_loss<F: Real>(
    tape: &mut Tape<F>,
    d_pt: ValueId,
    d_tl: ValueId,
    p_t: ValueId,
    p_s: ValueId,
    lambda_id: f64,
) -> Result<ValueId> {
    checked_unit(tape, d_pt, "D(P_t)")?;
    checked_unit(tape, d_tl, "D(I_t^l)")?;
    let t1 = neg_log(tape, d_pt)?;
    let t2 = neg_log(tape, d_tl)?;
    let mse = tape.mse_mean(p_t, p_s)?;
    let id = tape.mul_scalar(mse, F::c(lambda_id));
    let adv = tape.add(t1, t2)?;
    tape.add(adv, id)
}

// ---- optimizer ----------------------------------------------------------------

/// Bias-corrected Adam over named tensors.
pub struct Adam<F: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<F>>,
    v: BTreeMap<String, Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. `updates` pairs each named tensor with its
    /// gradient buffer (same length).
    pub fn step(&mut self, updates: Vec<(String, &mut Tensor<F>, &[F])>) -> Result<()> {
        for (name, param, grad) in &updates {
            if grad.len() != param.data.len() {
                return Err(Error::Dimension(format!(
                    "gradient for {name} has {} values, tensor has {}",
                    grad.len(),
                    param.data.len()
                )));
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for tensor {name}; aborting the update"
                )));
            }
        }
        self.step += 1;
        let b1 = F::c(self.beta1);
        let b2 = F::c(self.beta2);
        let one = F::one();
        let bc1 = F::c(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = F::c(1.0 - self.beta2.powi(self.step as i32));
        let lr = F::c(self.lr);
        let eps = F::c(self.eps);
        for (name, param, grad) in updates {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![F::zero(); grad.len()]);
            let v = self
                .v
                .entry(name)
                .or_insert_with(|| vec![F::zero(); grad.len()]);
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                param.data[i] = param.data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Serialize moments and step count as raw named tensors.
    pub fn snapshot(&self, prefix: &str) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        out.push((
            format!("{prefix}.step"),
            vec![1],
            vec![self.step as f32],
        ));
        for (name, m) in &self.m {
            out.push((
                format!("{name}.m"),
                vec![m.len()],
                m.iter().map(|v| v.to_f32_lossy()).collect(),
            ));
        }
        for (name, v) in &self.v {
            out.push((
                format!("{name}.v"),
                vec![v.len()],
                v.iter().map(|v| v.to_f32_lossy()).collect(),
            ));
        }
        out
    }
}

// ---- configuration --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Oracle,
    TinyConv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub iterations: u64,
    pub seed: u64,
    pub noise_seed: Option<u64>,
    pub weight_h: f64,
    pub weight_r: f64,
    pub weight_id: f64,
    pub high_h: usize,
    pub high_w: usize,
    pub low_h: usize,
    pub low_w: usize,
    pub n_classes: usize,
    pub enable_affine: bool,
    pub enable_blur: bool,
    pub enable_noise: bool,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub checkpoint_every: u64,
    pub encoder: EncoderKind,
    pub encoder_ckpt: Option<PathBuf>,
    pub feature_mode: FeatureMode,
    pub two_discriminators: bool,
    pub per_location_loss: bool,
    /// Sigma bucket width for memoized kernels; 0 means exact kernels.
    pub kernel_quantization: f64,
    pub kernel_radius_sigmas: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let g = Geometry::full();
        TrainConfig {
            lr: 1e-4,
            batch: 8,
            iterations: 100_000,
            seed: 0,
            noise_seed: None,
            weight_h: 1.0,
            weight_r: 1.0,
            weight_id: 1.0,
            high_h: g.high_h,
            high_w: g.high_w,
            low_h: g.low_h,
            low_w: g.low_w,
            n_classes: 19,
            enable_affine: true,
            enable_blur: true,
            enable_noise: true,
            sigma_min: 0.05,
            sigma_max: 8.0,
            checkpoint_every: 500,
            encoder: EncoderKind::Oracle,
            encoder_ckpt: None,
            feature_mode: FeatureMode::OneHot,
            two_discriminators: false,
            per_location_loss: false,
            kernel_quantization: 2.5e-4,
            kernel_radius_sigmas: 5.0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults for the toy experiments.
    pub fn desk() -> Self {
        let g = Geometry::desk();
        TrainConfig {
            iterations: 2000,
            high_h: g.high_h,
            high_w: g.high_w,
            low_h: g.low_h,
            low_w: g.low_w,
            n_classes: 4,
            ..Default::default()
        }
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.high_h, self.high_w, self.low_h, self.low_w)
    }

    pub fn sigma_bounds(&self) -> SigmaBounds {
        SigmaBounds {
            min: self.sigma_min,
            max: self.sigma_max,
        }
    }

    pub fn noise_seed(&self) -> u64 {
        self.noise_seed.unwrap_or(self.seed)
    }

    pub fn transform_config(&self) -> TransformConfig {
        TransformConfig {
            enable_affine: self.enable_affine,
            enable_blur: self.enable_blur,
            enable_noise: self.enable_noise,
            kernel_size: 25,
            sigma_bounds: self.sigma_bounds(),
            pad_mode: PadMode::Zero,
            kernel_mode: if self.kernel_quantization > 0.0 {
                KernelMode::Quantized {
                    step: self.kernel_quantization,
                    radius_sigmas: self.kernel_radius_sigmas,
                }
            } else {
                KernelMode::Exact
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        self.geometry()?;
        self.sigma_bounds().validate()?;
        if self.n_classes == 0 || self.n_classes > 255 {
            return Err(Error::Config(format!(
                "n_classes must be in 1..=255, got {}",
                self.n_classes
            )));
        }
        Ok(())
    }

    /// Parse the line-oriented `key = value` config format. Unknown keys
    /// are rejected; '#' starts a comment.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::Config(format!("line {}: bad {what} value `{value}` for key {key}", lineno + 1))
            };
            match key {
                "lr" => cfg.lr = value.parse().map_err(|_| bad("float"))?,
                "batch" => cfg.batch = value.parse().map_err(|_| bad("integer"))?,
                "iterations" => cfg.iterations = value.parse().map_err(|_| bad("integer"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
                "noise_seed" => cfg.noise_seed = Some(value.parse().map_err(|_| bad("integer"))?),
                "weight_h" => cfg.weight_h = value.parse().map_err(|_| bad("float"))?,
                "weight_r" => cfg.weight_r = value.parse().map_err(|_| bad("float"))?,
                "weight_id" => cfg.weight_id = value.parse().map_err(|_| bad("float"))?,
                "high_h" => cfg.high_h = value.parse().map_err(|_| bad("integer"))?,
                "high_w" => cfg.high_w = value.parse().map_err(|_| bad("integer"))?,
                "low_h" => cfg.low_h = value.parse().map_err(|_| bad("integer"))?,
                "low_w" => cfg.low_w = value.parse().map_err(|_| bad("integer"))?,
                "n_classes" => cfg.n_classes = value.parse().map_err(|_| bad("integer"))?,
                "enable_affine" => cfg.enable_affine = parse_bool(value).ok_or_else(|| bad("bool"))?,
                "enable_blur" => cfg.enable_blur = parse_bool(value).ok_or_else(|| bad("bool"))?,
                "enable_noise" => cfg.enable_noise = parse_bool(value).ok_or_else(|| bad("bool"))?,
                "sigma_min" => cfg.sigma_min = value.parse().map_err(|_| bad("float"))?,
                "sigma_max" => cfg.sigma_max = value.parse().map_err(|_| bad("float"))?,
                "checkpoint_every" => {
                    cfg.checkpoint_every = value.parse().map_err(|_| bad("integer"))?
                }
                "encoder" => {
                    cfg.encoder = match value {
                        "oracle" => EncoderKind::Oracle,
                        "tinyconv" => EncoderKind::TinyConv,
                        _ => return Err(bad("encoder kind (oracle|tinyconv)")),
                    }
                }
                "encoder_ckpt" => cfg.encoder_ckpt = Some(PathBuf::from(value)),
                "feature_mode" => {
                    cfg.feature_mode = match value {
                        "onehot" => FeatureMode::OneHot,
                        "softmax" => FeatureMode::Softmax,
                        "logits" => FeatureMode::Logits,
                        _ => return Err(bad("feature mode (onehot|softmax|logits)")),
                    }
                }
                "two_discriminators" => {
                    cfg.two_discriminators = parse_bool(value).ok_or_else(|| bad("bool"))?
                }
                "per_location_loss" => {
                    cfg.per_location_loss = parse_bool(value).ok_or_else(|| bad("bool"))?
                }
                "kernel_quantization" => {
                    cfg.kernel_quantization = value.parse().map_err(|_| bad("float"))?
                }
                "kernel_radius_sigmas" => {
                    cfg.kernel_radius_sigmas = value.parse().map_err(|_| bad("float"))?
                }
                "precision" => {
                    cfg.precision = match value {
                        "f64" => Precision::F64,
                        "f32" => Precision::F32,
                        _ => return Err(bad("precision (f64|f32)")),
                    }
                }
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key `{other}`",
                        lineno + 1
                    )));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "seed = {}", self.seed);
        if let Some(ns) = self.noise_seed {
            let _ = writeln!(s, "noise_seed = {ns}");
        }
        let _ = writeln!(s, "weight_h = {}", self.weight_h);
        let _ = writeln!(s, "weight_r = {}", self.weight_r);
        let _ = writeln!(s, "weight_id = {}", self.weight_id);
        let _ = writeln!(s, "high_h = {}", self.high_h);
        let _ = writeln!(s, "high_w = {}", self.high_w);
        let _ = writeln!(s, "low_h = {}", self.low_h);
        let _ = writeln!(s, "low_w = {}", self.low_w);
        let _ = writeln!(s, "n_classes = {}", self.n_classes);
        let _ = writeln!(s, "enable_affine = {}", self.enable_affine);
        let _ = writeln!(s, "enable_blur = {}", self.enable_blur);
        let _ = writeln!(s, "enable_noise = {}", self.enable_noise);
        let _ = writeln!(s, "sigma_min = {}", self.sigma_min);
        let _ = writeln!(s, "sigma_max = {}", self.sigma_max);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(
            s,
            "encoder = {}",
            match self.encoder {
                EncoderKind::Oracle => "oracle",
                EncoderKind::TinyConv => "tinyconv",
            }
        );
        let _ = writeln!(
            s,
            "feature_mode = {}",
            match self.feature_mode {
                FeatureMode::OneHot => "onehot",
                FeatureMode::Softmax => "softmax",
                FeatureMode::Logits => "logits",
            }
        );
        let _ = writeln!(s, "two_discriminators = {}", self.two_discriminators);
        let _ = writeln!(s, "per_location_loss = {}", self.per_location_loss);
        let _ = writeln!(s, "kernel_quantization = {}", self.kernel_quantization);
        let _ = writeln!(s, "kernel_radius_sigmas = {}", self.kernel_radius_sigmas);
        let _ = writeln!(
            s,
            "precision = {}",
            match self.precision {
                Precision::F64 => "f64",
                Precision::F32 => "f32",
            }
        );
        s
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" => Some(true),
        "false" | "0" => Some(false),
        _ => None,
    }
}

// ---- datasets -------------------------------------------------------------------

/// Decoded image collection, cached in f32 and cast per run precision.
pub struct Dataset {
    pub images: Vec<Image<f32>>,
    pub labels: Vec<Option<LabelMap>>,
    pub names: Vec<String>,
}

impl Dataset {
    /// Scan `img_*.png` (sorted) in a directory; when `with_labels`, the
    /// matching `lbl_*.png` must exist. Images whose dimensions do not
    /// match the geometry are skipped with a warning.
    pub fn load_dir(dir: &Path, with_labels: bool, high_h: usize, high_w: usize) -> Result<Dataset> {
        if !dir.is_dir() {
            return Err(Error::Data(format!(
                "dataset directory {} does not exist",
                dir.display()
            )));
        }
        let mut img_paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("img_") && n.ends_with(".png"))
                    .unwrap_or(false)
            })
            .collect();
        img_paths.sort();
        let mut ds = Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            names: Vec::new(),
        };
        for path in img_paths {
            let img = Image::<f32>::load_png(&path)?;
            if img.h != high_h || img.w != high_w {
                eprintln!(
                    "warning: skipping {} ({}x{}, expected {high_h}x{high_w})",
                    path.display(),
                    img.h,
                    img.w
                );
                continue;
            }
            let name = path.file_name().unwrap().to_string_lossy().to_string();
            let label = if with_labels {
                let lbl_path = dir.join(name.replace("img_", "lbl_"));
                if !lbl_path.exists() {
                    return Err(Error::Data(format!(
                        "missing label file {} for {}",
                        lbl_path.display(),
                        path.display()
                    )));
                }
                let lbl = LabelMap::load_png(&lbl_path)?;
                if lbl.h != high_h || lbl.w != high_w {
                    return Err(Error::Data(format!(
                        "label {} is {}x{}, expected {high_h}x{high_w}",
                        lbl_path.display(),
                        lbl.h,
                        lbl.w
                    )));
                }
                Some(lbl)
            } else {
                None
            };
            ds.images.push(img);
            ds.labels.push(label);
            ds.names.push(name);
        }
        if ds.images.is_empty() {
            return Err(Error::Data(format!(
                "no usable img_*.png files in {}",
                dir.display()
            )));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// One iteration's sampled indices and patch slots. Patch locations are
/// aligned to the 8x8 grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleBatch {
    pub src_indices: Vec<usize>,
    pub tgt_indices: Vec<usize>,
    pub translated_patch_slots: Vec<usize>,
    pub real_patch_slots: Vec<usize>,
}

pub fn sample_batch(
    source_len: usize,
    target_len: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> SampleBatch {
    let slots = GRID * GRID;
    let src_indices = (0..batch).map(|_| rng.gen_range(0..source_len)).collect();
    let tgt_indices = (0..batch).map(|_| rng.gen_range(0..target_len)).collect();
    let translated_patch_slots = (0..batch).map(|_| rng.gen_range(0..slots)).collect();
    let real_patch_slots = (0..batch).map(|_| rng.gen_range(0..slots)).collect();
    SampleBatch {
        src_indices,
        tgt_indices,
        translated_patch_slots,
        real_patch_slots,
    }
}

// ---- loss reporting ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Disc,
    Gen,
}

impl Side {
    fn as_str(&self) -> &'static str {
        match self {
            Side::Disc => "disc",
            Side::Gen => "gen",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossReport {
    pub iteration: u64,
    pub side: Side,
    pub l_h: f64,
    pub l_r: f64,
    pub l_id: f64,
    pub total: f64,
}

impl LossReport {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iteration,
            self.side.as_str(),
            self.l_h,
            self.l_r,
            self.l_id,
            self.total
        )
    }
}

// ---- the training loop ----------------------------------------------------------------

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub iterations_run: u64,
    pub last_gen_total: f64,
}

struct BatchItemState<F: Real> {
    raw: crate::params::RawParamMap<F>,
    trace: crate::translate::ImageTrace<F>,
    t_img: Image<F>,
}

fn image_tensor<F: Real>(img: &Image<F>) -> Tensor<F> {
    Tensor::from_vec(&[3, img.h, img.w], img.data().to_vec()).expect("image tensor")
}

fn patch_tensor<F: Real>(img: &Image<F>, slot: usize, ph: usize, pw: usize) -> Tensor<F> {
    let py = slot / GRID;
    let px = slot % GRID;
    let data = img.extract_patch(py * ph, px * pw, ph, pw);
    Tensor::from_vec(&[3, ph, pw], data).expect("patch tensor")
}

fn collect_binding_grads<'a, F: Real>(
    tape: &'a Tape<F>,
    binding: &TapeBinding,
    names: &[String],
) -> Result<Vec<(String, Vec<F>)>> {
    // names come in (weight, bias) pairs matching binding.layers order.
    let mut out = Vec::new();
    for (i, &(w, b)) in binding.layers.iter().enumerate() {
        let wg = tape
            .grad(w)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![F::zero(); tape.value(w).numel()]);
        let bg = tape
            .grad(b)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![F::zero(); tape.value(b).numel()]);
        out.push((names[2 * i].clone(), wg));
        out.push((names[2 * i + 1].clone(), bg));
    }
    Ok(out)
}

/// Run the alternating training loop. Writes checkpoints, the loss CSV
/// and periodic sample translations under `out_dir`.
pub fn train<F: Real>(
    cfg: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    out_dir: &Path,
    quiet: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let geom = cfg.geometry()?;
    let bounds = cfg.sigma_bounds();
    let tcfg = cfg.transform_config();
    let reading = if cfg.per_location_loss {
        DiscReading::PerLocation
    } else {
        DiscReading::SigmoidMean
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let samples_dir = out_dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;

    // Networks. The encoder is frozen for the whole run.
    let encoder: Encoder<F> = match cfg.encoder {
        EncoderKind::Oracle => Encoder::oracle(cfg.n_classes),
        EncoderKind::TinyConv => match &cfg.encoder_ckpt {
            Some(path) => {
                let bundle = crate::networks::load_checkpoint::<F>(path)?;
                match bundle.encoder {
                    e @ Encoder::TinyConv { .. } => e,
                    Encoder::Oracle { .. } => {
                        return Err(Error::Config(format!(
                            "checkpoint {} holds no conv encoder weights",
                            path.display()
                        )));
                    }
                }
            }
            None => Encoder::tiny_conv(cfg.n_classes, cfg.feature_mode, cfg.seed ^ 0x0E0C),
        },
    };
    let encoder_fingerprint = fingerprint_params(&encoder.named_params());
    let mut kpn: Kpn<F> = Kpn::identity_init(cfg.n_classes, bounds);
    let mut disc: Discriminator<F> = Discriminator::init(cfg.seed ^ 0xD15C);
    let mut disc_low: Option<Discriminator<F>> = cfg
        .two_discriminators
        .then(|| Discriminator::init(cfg.seed ^ 0xD15C_10));

    let mut adam_kpn: Adam<F> = Adam::new(cfg.lr);
    let mut adam_disc: Adam<F> = Adam::new(cfg.lr);
    let mut adam_disc_low: Adam<F> = Adam::new(cfg.lr);

    // Caches: per-image features, per-target low-res tensors, casts.
    let noise = NoiseField::<F>::generate(cfg.noise_seed(), geom.high_h, geom.high_w);
    let src_images: Vec<Image<F>> = source.images.iter().map(|i| i.cast()).collect();
    let tgt_images: Vec<Image<F>> = target.images.iter().map(|i| i.cast()).collect();
    let mut features: Vec<Tensor<F>> = Vec::with_capacity(source.len());
    for (i, img) in src_images.iter().enumerate() {
        let low_img = img.resize_bilinear(geom.low_h, geom.low_w);
        features.push(encoder.features(
            Some(&low_img),
            source.labels[i].as_ref(),
            geom.low_h,
            geom.low_w,
        )?);
    }
    let tgt_low: Vec<Tensor<F>> = tgt_images
        .iter()
        .map(|img| image_tensor(&img.resize_bilinear(geom.low_h, geom.low_w)))
        .collect();

    let kpn_names: Vec<String> = kpn.named_params().iter().map(|(n, _)| n.clone()).collect();
    let disc_names: Vec<String> = disc.named_params().iter().map(|(n, _)| n.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let csv_path = out_dir.join("loss_log.csv");
    let mut csv = std::io::BufWriter::new(
        fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?,
    );
    writeln!(csv, "iteration,side,l_h,l_r,l_id,total").map_err(|e| Error::io(&csv_path, e))?;

    let (phh, phw) = geom.patch_high();
    let mut last_gen_total = f64::NAN;

    let save_bundle = |kpn: &Kpn<F>,
                       disc: &Discriminator<F>,
                       disc_low: &Option<Discriminator<F>>,
                       adams: (&Adam<F>, &Adam<F>, &Adam<F>),
                       iteration: u64,
                       path: &Path|
     -> Result<()> {
        let mut adam_tensors = adams.0.snapshot("adam.kpn");
        adam_tensors.extend(adams.1.snapshot("adam.disc"));
        if disc_low.is_some() {
            adam_tensors.extend(adams.2.snapshot("adam.disc_low"));
        }
        let bundle = ModelBundle {
            meta: CheckpointMeta {
                geom,
                n_classes: cfg.n_classes,
                sigma_bounds: bounds,
                enable_affine: cfg.enable_affine,
                enable_blur: cfg.enable_blur,
                enable_noise: cfg.enable_noise,
                noise_seed: cfg.noise_seed(),
                feature_mode: cfg.feature_mode,
                iteration,
            },
            encoder: encoder.clone(),
            kpn: kpn.clone(),
            disc: disc.clone(),
            disc_low: disc_low.clone(),
            adam: Some(crate::networks::AdamSnapshot {
                tensors: adam_tensors,
            }),
        };
        save_checkpoint(&bundle, path)
    };

    for iter in 0..cfg.iterations {
        let batch = sample_batch(source.len(), target.len(), cfg.batch, &mut rng);

        // Forward translate the batch once; both update steps reuse it.
        let mut items: Vec<BatchItemState<F>> = Vec::with_capacity(cfg.batch);
        for b in 0..cfg.batch {
            let si = batch.src_indices[b];
            let raw = kpn.forward_plain(&features[si])?;
            let pm = constrain(&raw, bounds)?;
            let (t_img, trace) = translate_image(&src_images[si], &pm, &noise, &tcfg, geom)?;
            items.push(BatchItemState { raw, trace, t_img });
        }

        // --- discriminator step -------------------------------------------------
        let disc_report = {
            let mut tape: Tape<F> = Tape::new();
            let bind_patch = disc.bind(&mut tape, true);
            let bind_low = match &disc_low {
                Some(d) => Some(d.bind(&mut tape, true)),
                None => None,
            };
            let mut lh_terms = Vec::with_capacity(cfg.batch);
            let mut lr_terms = Vec::with_capacity(cfg.batch);
            for b in 0..cfg.batch {
                let p_t = tape.leaf(patch_tensor(&items[b].t_img, batch.translated_patch_slots[b], phh, phw));
                let p_r = tape.leaf(patch_tensor(
                    &tgt_images[batch.tgt_indices[b]],
                    batch.real_patch_slots[b],
                    phh,
                    phw,
                ));
                let t_low = tape.leaf(image_tensor(
                    &items[b].t_img.resize_bilinear(geom.low_h, geom.low_w),
                ));
                let r_low = tape.leaf(tgt_low[batch.tgt_indices[b]].clone());

                let l_pt = disc.forward_with(&mut tape, &bind_patch, p_t)?;
                let l_pr = disc.forward_with(&mut tape, &bind_patch, p_r)?;
                let (low_net, low_bind) = match (&disc_low, &bind_low) {
                    (Some(d), Some(bl)) => (d, bl),
                    _ => (&disc, &bind_patch),
                };
                let l_tl = low_net.forward_with(&mut tape, low_bind, t_low)?;
                let l_rl = low_net.forward_with(&mut tape, low_bind, r_low)?;

                let fh = fake_term(&mut tape, l_pt, reading)?;
                let rh = real_term(&mut tape, l_pr, reading)?;
                lh_terms.push(tape.add(fh, rh)?);
                let fl = fake_term(&mut tape, l_tl, reading)?;
                let rl = real_term(&mut tape, l_rl, reading)?;
                lr_terms.push(tape.add(fl, rl)?);
            }
            let lh_sum = sum_ids(&mut tape, &lh_terms)?;
            let lr_sum = sum_ids(&mut tape, &lr_terms)?;
            let l_h = tape.mul_scalar(lh_sum, F::c(cfg.weight_h / cfg.batch as f64));
            let l_r = tape.mul_scalar(lr_sum, F::c(cfg.weight_r / cfg.batch as f64));
            let total = tape.add(l_h, l_r)?;
            tape.backward(total)?;

            let report = LossReport {
                iteration: iter,
                side: Side::Disc,
                l_h: tape.scalar_value(l_h).as_f64(),
                l_r: tape.scalar_value(l_r).as_f64(),
                l_id: 0.0,
                total: tape.scalar_value(total).as_f64(),
            };

            let grads = collect_binding_grads(&tape, &bind_patch, &disc_names)?;
            apply_network_step(&mut adam_disc, &mut disc, grads)?;
            if let (Some(d), Some(bl)) = (&mut disc_low, &bind_low) {
                let names: Vec<String> = d.named_params().iter().map(|(n, _)| n.clone()).collect();
                let grads = collect_binding_grads(&tape, bl, &names)?;
                apply_network_step(&mut adam_disc_low, d, grads)?;
            }
            report
        };
        writeln!(csv, "{}", disc_report.csv_line()).map_err(|e| Error::io(&csv_path, e))?;

        // --- generator step ----------------------------------------------------
        let gen_report = {
            let mut tape: Tape<F> = Tape::new();
            let bind_patch = disc.bind(&mut tape, false);
            let bind_low = match &disc_low {
                Some(d) => Some(d.bind(&mut tape, false)),
                None => None,
            };
            let mut lh_terms = Vec::with_capacity(cfg.batch);
            let mut lr_terms = Vec::with_capacity(cfg.batch);
            let mut id_terms = Vec::with_capacity(cfg.batch);
            let mut img_leaves = Vec::with_capacity(cfg.batch);
            let mut patch_leaves = Vec::with_capacity(cfg.batch);
            for (b, item) in items.iter().enumerate() {
                let slot = batch.translated_patch_slots[b];
                let t_img = tape.leaf(image_tensor(&item.t_img).with_grad());
                let t_patch =
                    tape.leaf(patch_tensor(&item.t_img, slot, phh, phw).with_grad());
                let p_s = tape.leaf(patch_tensor(
                    &src_images[batch.src_indices[b]],
                    slot,
                    phh,
                    phw,
                ));
                img_leaves.push(t_img);
                patch_leaves.push(t_patch);

                let t_low = tape.bilinear_resize(t_img, geom.low_h, geom.low_w)?;
                let l_pt = disc.forward_with(&mut tape, &bind_patch, t_patch)?;
                let (low_net, low_bind) = match (&disc_low, &bind_low) {
                    (Some(d), Some(bl)) => (d, bl),
                    _ => (&disc, &bind_patch),
                };
                let l_tl = low_net.forward_with(&mut tape, low_bind, t_low)?;

                lh_terms.push(real_term(&mut tape, l_pt, reading)?);
                lr_terms.push(real_term(&mut tape, l_tl, reading)?);
                id_terms.push(tape.mse_mean(t_patch, p_s)?);
            }
            let lh_sum = sum_ids(&mut tape, &lh_terms)?;
            let lr_sum = sum_ids(&mut tape, &lr_terms)?;
            let id_sum = sum_ids(&mut tape, &id_terms)?;
            let l_h = tape.mul_scalar(lh_sum, F::c(cfg.weight_h / cfg.batch as f64));
            let l_r = tape.mul_scalar(lr_sum, F::c(cfg.weight_r / cfg.batch as f64));
            let l_id = tape.mul_scalar(id_sum, F::c(cfg.weight_id / cfg.batch as f64));
            let part = tape.add(l_h, l_r)?;
            let total = tape.add(part, l_id)?;
            tape.backward(total)?;

            let report = LossReport {
                iteration: iter,
                side: Side::Gen,
                l_h: tape.scalar_value(l_h).as_f64(),
                l_r: tape.scalar_value(l_r).as_f64(),
                l_id: tape.scalar_value(l_id).as_f64(),
                total: tape.scalar_value(total).as_f64(),
            };
            if !report.total.is_finite() {
                let rescue = out_dir.join("last_before_divergence.kpnc");
                save_bundle(
                    &kpn,
                    &disc,
                    &disc_low,
                    (&adam_kpn, &adam_disc, &adam_disc_low),
                    iter,
                    &rescue,
                )?;
                return Err(Error::Numeric(format!(
                    "training diverged at iteration {iter} (total = {}); checkpoint saved to {}",
                    report.total,
                    rescue.display()
                )));
            }

            // Chain image gradients back through the translation.
            let mut kpn_tape: Tape<F> = Tape::new();
            let kpn_bind = kpn.bind(&mut kpn_tape, true);
            let mut seeds = Vec::with_capacity(cfg.batch);
            for (b, item) in items.iter().enumerate() {
                let mut upstream = tape
                    .grad(img_leaves[b])
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![F::zero(); 3 * geom.high_h * geom.high_w]);
                if let Some(pg) = tape.grad(patch_leaves[b]) {
                    let slot = batch.translated_patch_slots[b];
                    let py = slot / GRID;
                    let px = slot % GRID;
                    for c in 0..3 {
                        for y in 0..phh {
                            let row0 = (c * geom.high_h + py * phh + y) * geom.high_w + px * phw;
                            for x in 0..phw {
                                upstream[row0 + x] += pg[(c * phh + y) * phw + x];
                            }
                        }
                    }
                }
                let (low_grad, _) = translate_image_backward(&item.trace, &upstream, false)?;
                let raw_grad = constrain_backward(&item.raw, bounds, &low_grad)?;
                let f_leaf = kpn_tape.leaf(features[batch.src_indices[b]].clone());
                let raw_id = kpn.forward_with(&mut kpn_tape, &kpn_bind, f_leaf)?;
                seeds.push((raw_id, raw_grad));
            }
            kpn_tape.backward_seeded(&seeds)?;
            let grads = collect_binding_grads(&kpn_tape, &kpn_bind, &kpn_names)?;
            apply_network_step_kpn(&mut adam_kpn, &mut kpn, grads)?;
            report
        };
        writeln!(csv, "{}", gen_report.csv_line()).map_err(|e| Error::io(&csv_path, e))?;
        last_gen_total = gen_report.total;

        if !quiet && (iter % 50 == 0 || iter + 1 == cfg.iterations) {
            eprintln!(
                "iter {:>6}: disc total {:.4}  gen total {:.4} (l_id {:.6})",
                iter, disc_report.total, gen_report.total, gen_report.l_id
            );
        }

        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
            let path = out_dir.join(format!("ckpt_{:06}.kpnc", iter + 1));
            save_bundle(
                &kpn,
                &disc,
                &disc_low,
                (&adam_kpn, &adam_disc, &adam_disc_low),
                iter + 1,
                &path,
            )?;
            items[0]
                .t_img
                .save_png(&samples_dir.join(format!("iter_{:06}.png", iter + 1)))?;
        }
    }

    // The encoder must be byte-identical to its initial state.
    let after = fingerprint_params(&encoder.named_params());
    if after != encoder_fingerprint {
        return Err(Error::Contract(
            "encoder parameters changed during training".into(),
        ));
    }

    let final_path = out_dir.join("final.kpnc");
    save_bundle(
        &kpn,
        &disc,
        &disc_low,
        (&adam_kpn, &adam_disc, &adam_disc_low),
        cfg.iterations,
        &final_path,
    )?;
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        loss_csv: csv_path,
        iterations_run: cfg.iterations,
        last_gen_total,
    })
}

fn sum_ids<F: Real>(tape: &mut Tape<F>, ids: &[ValueId]) -> Result<ValueId> {
    let mut acc = ids[0];
    for &id in &ids[1..] {
        acc = tape.add(acc, id)?;
    }
    Ok(acc)
}

fn apply_network_step<F: Real>(
    adam: &mut Adam<F>,
    disc: &mut Discriminator<F>,
    grads: Vec<(String, Vec<F>)>,
) -> Result<()> {
    let params = disc.named_params_mut();
    step_named(adam, params, grads)
}

fn apply_network_step_kpn<F: Real>(
    adam: &mut Adam<F>,
    kpn: &mut Kpn<F>,
    grads: Vec<(String, Vec<F>)>,
) -> Result<()> {
    let params = kpn.named_params_mut();
    step_named(adam, params, grads)
}

fn step_named<F: Real>(
    adam: &mut Adam<F>,
    params: Vec<(String, &mut Tensor<F>)>,
    grads: Vec<(String, Vec<F>)>,
) -> Result<()> {
    let gmap: BTreeMap<String, Vec<F>> = grads.into_iter().collect();
    let mut updates = Vec::new();
    for (name, tensor) in params {
        let grad = gmap
            .get(&name)
            .ok_or_else(|| Error::Contract(format!("missing gradient for {name}")))?;
        updates.push((name, tensor, grad.as_slice()));
    }
    adam.step(updates)
}

fn fingerprint_params<F: Real>(params: &[(String, &Tensor<F>)]) -> Vec<u8> {
    let mut bytes = Vec::new();
    for (name, t) in params {
        bytes.extend_from_slice(name.as_bytes());
        for v in &t.data {
            bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    bytes
}

/// Pretrain the conv encoder for per-pixel classification on low-res
/// label maps. Returns the mean cross entropy of the final iteration.
pub fn pretrain_tiny_encoder<F: Real>(
    encoder: &mut Encoder<F>,
    source: &Dataset,
    geom: Geometry,
    iterations: u64,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let names: Vec<String> = encoder
        .named_params()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    if names.is_empty() {
        return Err(Error::Usage("the oracle encoder cannot be pretrained".into()));
    }
    let mut adam: Adam<F> = Adam::new(lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = f64::NAN;
    for _ in 0..iterations {
        let idx = rng.gen_range(0..source.len());
        let img: Image<F> = source.images[idx].cast();
        let low = img.resize_bilinear(geom.low_h, geom.low_w);
        let labels = source.labels[idx]
            .as_ref()
            .ok_or_else(|| Error::Usage("pretraining requires labels".into()))?
            .downsample_nearest(geom.low_h, geom.low_w);
        let mut tape: Tape<F> = Tape::new();
        let binding = encoder.bind(&mut tape, true)?;
        let x = tape.leaf(image_tensor(&low));
        let logits = encoder.forward_with(&mut tape, &binding, x)?;
        let loss = tape.softmax_cross_entropy(logits, &labels.data)?;
        last = tape.scalar_value(loss).as_f64();
        tape.backward(loss)?;
        let grads = collect_binding_grads(&tape, &binding, &names)?;
        step_named(&mut adam, encoder.named_params_mut(), grads)?;
    }
    Ok(last)
}
