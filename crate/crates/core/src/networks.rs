//! The learnable components: a pluggable semantic encoder, the 12-channel
//! parameter prediction head, and the fully-convolutional patch
//! discriminator, plus the checkpoint container.
//!
//! The prediction head starts at the identity translation: zero weights
//! with the raw identity vector as bias. The discriminator is the
//! conventional patch classifier reading of "3 layers, 64 hidden
//! features": three stride-2 4x4 convolutions with channel doubling and
//! leaky ReLU 0.2, then a 3x3 stride-1 projection to a logit map. It is
//! fully convolutional, so one set of weights serves both the high-res
//! patches and the low-res images.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::params::{identity_raw_vector, Geometry, RawParamMap, SigmaBounds, PARAM_CHANNELS};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, ValueId};

pub const DISC_SLOPE: f64 = 0.2;
/// Smallest spatial input the discriminator accepts.
pub const DISC_MIN_DIM: usize = 16;

#[derive(Clone, Debug)]
pub struct ConvLayer<F: Real> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Real> ConvLayer<F> {
    pub fn zeros(co: usize, ci: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvLayer {
            weight: Tensor::zeros(&[co, ci, k, k]),
            bias: Tensor::zeros(&[co]),
            stride,
            pad,
        }
    }

    /// Fan-in-scaled uniform init: bound = gain * sqrt(3 / fan_in).
    pub fn scaled_uniform(
        co: usize,
        ci: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (ci * k * k) as f64;
        let bound = gain * (3.0 / fan_in).sqrt();
        let data = (0..co * ci * k * k)
            .map(|_| F::c(rng.gen_range(-bound..=bound)))
            .collect();
        ConvLayer {
            weight: Tensor::from_vec(&[co, ci, k, k], data).expect("init shape"),
            bias: Tensor::zeros(&[co]),
            stride,
            pad,
        }
    }

    /// Push this layer's parameters onto translate tape as leaves.
    pub fn bind(&self, tape: &mut Tape<F>, train: bool) -> (ValueId, ValueId) {
        let mut w = self.weight.clone();
        let mut b = self.bias.clone();
        w.requires_grad = train;
        b.requires_grad = train;
        (tape.leaf(w), tape.leaf(b))
    }
}

/// Ids of one network's parameters on a particular tape.
pub struct TapeBinding {
    pub layers: Vec<(ValueId, ValueId)>,
}

// ---- encoder --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    OneHot,
    Softmax,
    Logits,
}

/// Semantic feature extractor. The oracle variant emits one-hot maps of
/// the (downsampled) ground-truth labels; the trainable stand-in is a
/// three-layer conv net. Both keep the input spatial resolution.
#[derive(Clone, Debug)]
pub enum Encoder<F: Real> {
    Oracle {
        n_classes: usize,
    },
    TinyConv {
        n_classes: usize,
        convs: Vec<ConvLayer<F>>,
        mode: FeatureMode,
    },
}

impl<F: Real> Encoder<F> {
    pub fn oracle(n_classes: usize) -> Self {
        Encoder::Oracle { n_classes }
    }

    pub fn tiny_conv(n_classes: usize, mode: FeatureMode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = vec![
            ConvLayer::scaled_uniform(32, 3, 3, 1, 1, 1.0, &mut rng),
            ConvLayer::scaled_uniform(32, 32, 3, 1, 1, 1.0, &mut rng),
            ConvLayer::scaled_uniform(n_classes, 32, 3, 1, 1, 1.0, &mut rng),
        ];
        Encoder::TinyConv {
            n_classes,
            convs,
            mode,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Encoder::Oracle { n_classes } | Encoder::TinyConv { n_classes, .. } => *n_classes,
        }
    }

    /// Extract features at (out_h, out_w). The oracle requires labels; the
    /// conv encoder requires a low-res image of exactly that size.
    pub fn features(
        &self,
        img_lowres: Option<&Image<F>>,
        labels: Option<&LabelMap>,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor<F>> {
        match self {
            Encoder::Oracle { n_classes } => {
                let labels = labels.ok_or_else(|| {
                    Error::Usage("oracle encoder requires a label map".into())
                })?;
                let low = if labels.h == out_h && labels.w == out_w {
                    labels.clone()
                } else {
                    labels.downsample_nearest(out_h, out_w)
                };
                let mut data = vec![F::zero(); n_classes * out_h * out_w];
                for (p, &cls) in low.data.iter().enumerate() {
                    if cls as usize >= *n_classes {
                        return Err(Error::Data(format!(
                            "label {cls} at pixel {p} out of range for {n_classes} classes"
                        )));
                    }
                    data[cls as usize * out_h * out_w + p] = F::one();
                }
                Tensor::from_vec(&[*n_classes, out_h, out_w], data)
            }
            Encoder::TinyConv { convs, mode, .. } => {
                let img = img_lowres.ok_or_else(|| {
                    Error::Usage("conv encoder requires a low-res image".into())
                })?;
                if img.h != out_h || img.w != out_w {
                    return Err(Error::Dimension(format!(
                        "encoder input is {}x{}, expected {out_h}x{out_w}",
                        img.h, img.w
                    )));
                }
                let mut tape = Tape::new();
                let x = tape.leaf(Tensor::from_vec(
                    &[3, img.h, img.w],
                    img.data().to_vec(),
                )?);
                let logits = forward_conv_stack(&mut tape, x, convs, DISC_SLOPE, true)?;
                let logits = tape.value(logits).clone();
                Ok(apply_feature_mode(logits, *mode))
            }
        }
    }

    /// Put the conv encoder's parameters on a tape (oracle has none).
    pub fn bind(&self, tape: &mut Tape<F>, train: bool) -> Result<TapeBinding> {
        match self {
            Encoder::Oracle { .. } => Err(Error::Usage(
                "the oracle encoder has no trainable parameters".into(),
            )),
            Encoder::TinyConv { convs, .. } => Ok(TapeBinding {
                layers: convs.iter().map(|l| l.bind(tape, train)).collect(),
            }),
        }
    }

    /// Tape forward for pretraining the conv encoder, reusing a binding.
    pub fn forward_with(
        &self,
        tape: &mut Tape<F>,
        binding: &TapeBinding,
        input: ValueId,
    ) -> Result<ValueId> {
        let Encoder::TinyConv { convs, .. } = self else {
            return Err(Error::Usage(
                "the oracle encoder has no trainable forward pass".into(),
            ));
        };
        let mut x = input;
        for (i, (layer, &(w, b))) in convs.iter().zip(&binding.layers).enumerate() {
            x = tape.conv2d(x, w, b, layer.stride, layer.pad)?;
            if i + 1 < convs.len() {
                x = tape.leaky_relu(x, F::c(DISC_SLOPE));
            }
        }
        Ok(x)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        match self {
            Encoder::Oracle { .. } => Vec::new(),
            Encoder::TinyConv { convs, .. } => named_conv_params("encoder", convs),
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        match self {
            Encoder::Oracle { .. } => Vec::new(),
            Encoder::TinyConv { convs, .. } => named_conv_params_mut("encoder", convs),
        }
    }
}

fn apply_feature_mode<F: Real>(logits: Tensor<F>, mode: FeatureMode) -> Tensor<F> {
    match mode {
        FeatureMode::Logits => logits,
        FeatureMode::Softmax => {
            let (c, h, w) = (logits.shape[0], logits.shape[1], logits.shape[2]);
            let plane = h * w;
            let mut data = logits.data;
            for p in 0..plane {
                let mut mx = data[p];
                for ch in 1..c {
                    mx = mx.max(data[ch * plane + p]);
                }
                let mut denom = F::zero();
                for ch in 0..c {
                    denom += (data[ch * plane + p] - mx).exp();
                }
                for ch in 0..c {
                    data[ch * plane + p] = (data[ch * plane + p] - mx).exp() / denom;
                }
            }
            Tensor::from_vec(&[c, h, w], data).expect("softmax shape")
        }
        FeatureMode::OneHot => {
            let (c, h, w) = (logits.shape[0], logits.shape[1], logits.shape[2]);
            let plane = h * w;
            let mut data = vec![F::zero(); c * plane];
            for p in 0..plane {
                let mut best = 0;
                let mut bestv = logits.data[p];
                for ch in 1..c {
                    if logits.data[ch * plane + p] > bestv {
                        bestv = logits.data[ch * plane + p];
                        best = ch;
                    }
                }
                data[best * plane + p] = F::one();
            }
            Tensor::from_vec(&[c, h, w], data).expect("one-hot shape")
        }
    }
}

fn forward_conv_stack<F: Real>(
    tape: &mut Tape<F>,
    input: ValueId,
    convs: &[ConvLayer<F>],
    slope: f64,
    skip_last_activation: bool,
) -> Result<ValueId> {
    let mut x = input;
    for (i, layer) in convs.iter().enumerate() {
        let (w, b) = layer.bind(tape, false);
        x = tape.conv2d(x, w, b, layer.stride, layer.pad)?;
        if !(skip_last_activation && i + 1 == convs.len()) {
            x = tape.leaky_relu(x, F::c(slope));
        }
    }
    Ok(x)
}

fn named_conv_params<'a, F: Real>(
    prefix: &str,
    convs: &'a [ConvLayer<F>],
) -> Vec<(String, &'a Tensor<F>)> {
    let mut out = Vec::new();
    for (i, layer) in convs.iter().enumerate() {
        out.push((format!("{prefix}.conv{i}.weight"), &layer.weight));
        out.push((format!("{prefix}.conv{i}.bias"), &layer.bias));
    }
    out
}

fn named_conv_params_mut<'a, F: Real>(
    prefix: &str,
    convs: &'a mut [ConvLayer<F>],
) -> Vec<(String, &'a mut Tensor<F>)> {
    let mut out = Vec::new();
    for (i, layer) in convs.iter_mut().enumerate() {
        out.push((format!("{prefix}.conv{i}.weight"), &mut layer.weight));
        out.push((format!("{prefix}.conv{i}.bias"), &mut layer.bias));
    }
    out
}

// ---- parameter prediction head ---------------------------------------------

/// One 3x3 convolution from semantic features to the 12 raw parameter
/// channels.
#[derive(Clone, Debug)]
pub struct Kpn<F: Real> {
    pub conv: ConvLayer<F>,
}

impl<F: Real> Kpn<F> {
    /// Zero weights and the raw identity vector as bias: the initial
    /// prediction is the identity translation everywhere.
    pub fn identity_init(n_classes: usize, bounds: SigmaBounds) -> Self {
        let mut conv = ConvLayer::zeros(PARAM_CHANNELS, n_classes, 3, 1, 1);
        let idv = identity_raw_vector(bounds);
        for (slot, &v) in conv.bias.data.iter_mut().zip(idv.iter()) {
            *slot = F::c(v);
        }
        Kpn { conv }
    }

    pub fn bind(&self, tape: &mut Tape<F>, train: bool) -> TapeBinding {
        TapeBinding {
            layers: vec![self.conv.bind(tape, train)],
        }
    }

    pub fn forward_with(
        &self,
        tape: &mut Tape<F>,
        binding: &TapeBinding,
        features: ValueId,
    ) -> Result<ValueId> {
        let expected = self.conv.weight.shape[1];
        let got = tape.value(features).shape[0];
        if got != expected {
            return Err(Error::Dimension(format!(
                "features have {got} channels, prediction head expects {expected}"
            )));
        }
        let (w, b) = binding.layers[0];
        tape.conv2d(features, w, b, self.conv.stride, self.conv.pad)
    }

    /// Plain forward producing a raw parameter map.
    pub fn forward_plain(&self, features: &Tensor<F>) -> Result<RawParamMap<F>> {
        let mut tape = Tape::new();
        let f = tape.leaf(features.clone());
        let binding = self.bind(&mut tape, false);
        let raw = self.forward_with(&mut tape, &binding, f)?;
        let t = tape.value(raw);
        RawParamMap::from_planar(t.shape[1], t.shape[2], t.data.clone())
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        vec![
            ("kpn.conv0.weight".to_string(), &self.conv.weight),
            ("kpn.conv0.bias".to_string(), &self.conv.bias),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            ("kpn.conv0.weight".to_string(), &mut self.conv.weight),
            ("kpn.conv0.bias".to_string(), &mut self.conv.bias),
        ]
    }
}

// ---- discriminator ---------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Discriminator<F: Real> {
    pub convs: Vec<ConvLayer<F>>,
}

impl<F: Real> Discriminator<F> {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = vec![
            ConvLayer::scaled_uniform(64, 3, 4, 2, 1, 0.02, &mut rng),
            ConvLayer::scaled_uniform(128, 64, 4, 2, 1, 0.02, &mut rng),
            ConvLayer::scaled_uniform(256, 128, 4, 2, 1, 0.02, &mut rng),
            ConvLayer::scaled_uniform(1, 256, 3, 1, 1, 0.02, &mut rng),
        ];
        Discriminator { convs }
    }

    pub fn bind(&self, tape: &mut Tape<F>, train: bool) -> TapeBinding {
        TapeBinding {
            layers: self.convs.iter().map(|l| l.bind(tape, train)).collect(),
        }
    }

    /// Forward to the logit map, reusing bound parameters. Accepts any
    /// input with both spatial dims at least [`DISC_MIN_DIM`].
    pub fn forward_with(
        &self,
        tape: &mut Tape<F>,
        binding: &TapeBinding,
        input: ValueId,
    ) -> Result<ValueId> {
        let shape = tape.value(input).shape.clone();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Dimension(format!(
                "discriminator expects a 3-channel raster, got {shape:?}"
            )));
        }
        if shape[1] < DISC_MIN_DIM || shape[2] < DISC_MIN_DIM {
            return Err(Error::Dimension(format!(
                "discriminator input {}x{} below minimum {DISC_MIN_DIM}",
                shape[1], shape[2]
            )));
        }
        let mut x = input;
        for (i, (layer, &(w, b))) in self.convs.iter().zip(&binding.layers).enumerate() {
            x = tape.conv2d(x, w, b, layer.stride, layer.pad)?;
            if i + 1 < self.convs.len() {
                x = tape.leaky_relu(x, F::c(DISC_SLOPE));
            }
        }
        Ok(x)
    }

    /// One-shot forward on a fresh binding.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<F>,
        input: ValueId,
        train: bool,
    ) -> Result<(ValueId, TapeBinding)> {
        let binding = self.bind(tape, train);
        let logits = self.forward_with(tape, &binding, input)?;
        Ok((logits, binding))
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        named_conv_params("disc", &self.convs)
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        named_conv_params_mut("disc", &mut self.convs)
    }
}

// ---- checkpointing ----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub geom: Geometry,
    pub n_classes: usize,
    pub sigma_bounds: SigmaBounds,
    pub enable_affine: bool,
    pub enable_blur: bool,
    pub enable_noise: bool,
    pub noise_seed: u64,
    pub feature_mode: FeatureMode,
    pub iteration: u64,
}

/// Raw (name, dims, values) tensors of the optimizer state.
#[derive(Clone, Debug, Default)]
pub struct AdamSnapshot {
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

#[derive(Debug)]
pub struct ModelBundle<F: Real> {
    pub meta: CheckpointMeta,
    pub encoder: Encoder<F>,
    pub kpn: Kpn<F>,
    pub disc: Discriminator<F>,
    /// Present in the two-discriminator configuration.
    pub disc_low: Option<Discriminator<F>>,
    pub adam: Option<AdamSnapshot>,
}

const CKPT_MAGIC: &[u8; 4] = b"KPNC";
const CKPT_VERSION: u32 = 1;

type RawSection = (String, Vec<(String, Vec<usize>, Vec<f32>)>);

fn tensor_to_raw<F: Real>(name: &str, t: &Tensor<F>) -> (String, Vec<usize>, Vec<f32>) {
    (
        name.to_string(),
        t.shape.clone(),
        t.data.iter().map(|v| v.to_f32_lossy()).collect(),
    )
}

/// Store an f64 bit-exactly as two f32 bit patterns (the payload is raw
/// bits, not numeric values).
fn f64_bits_pair(v: f64) -> [f32; 2] {
    let bits = v.to_bits();
    [
        f32::from_bits((bits & 0xFFFF_FFFF) as u32),
        f32::from_bits((bits >> 32) as u32),
    ]
}

fn pair_to_f64(lo: f32, hi: f32) -> f64 {
    f64::from_bits((lo.to_bits() as u64) | ((hi.to_bits() as u64) << 32))
}

fn meta_section(meta: &CheckpointMeta, encoder_kind: u32, has_disc_low: bool) -> RawSection {
    let g = meta.geom;
    let seed_lo = (meta.noise_seed & 0xFFFF_FFFF) as u32;
    let seed_hi = (meta.noise_seed >> 32) as u32;
    let sb_min = f64_bits_pair(meta.sigma_bounds.min);
    let sb_max = f64_bits_pair(meta.sigma_bounds.max);
    let tensors = vec![
        (
            "geometry".to_string(),
            vec![4],
            vec![
                g.high_h as f32,
                g.high_w as f32,
                g.low_h as f32,
                g.low_w as f32,
            ],
        ),
        ("n_classes".to_string(), vec![1], vec![meta.n_classes as f32]),
        (
            "sigma_bounds_bits".to_string(),
            vec![4],
            vec![sb_min[0], sb_min[1], sb_max[0], sb_max[1]],
        ),
        (
            "components".to_string(),
            vec![3],
            vec![
                meta.enable_affine as u32 as f32,
                meta.enable_blur as u32 as f32,
                meta.enable_noise as u32 as f32,
            ],
        ),
        (
            "noise_seed_bits".to_string(),
            vec![2],
            vec![f32::from_bits(seed_lo), f32::from_bits(seed_hi)],
        ),
        (
            "feature_mode".to_string(),
            vec![1],
            vec![match meta.feature_mode {
                FeatureMode::OneHot => 0.0,
                FeatureMode::Softmax => 1.0,
                FeatureMode::Logits => 2.0,
            }],
        ),
        ("encoder_kind".to_string(), vec![1], vec![encoder_kind as f32]),
        ("iteration".to_string(), vec![1], vec![meta.iteration as f32]),
        (
            "two_disc".to_string(),
            vec![1],
            vec![has_disc_low as u32 as f32],
        ),
    ];
    ("meta".to_string(), tensors)
}

fn write_sections(path: &Path, sections: &[RawSection]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, tensors) in sections {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (tname, dims, data) in tensors {
            buf.extend_from_slice(&(tname.len() as u32).to_le_bytes());
            buf.extend_from_slice(tname.as_bytes());
            buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for &d in dims {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("non-utf8 name in checkpoint".into()))
    }
}

fn read_sections(path: &Path) -> Result<Vec<RawSection>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader { bytes: &bytes, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} does not match supported {CKPT_VERSION}"
        )));
    }
    let n_sections = r.u32()? as usize;
    let mut sections = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let name = r.string()?;
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let tname = r.string()?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let numel: usize = dims.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((tname, dims, data));
        }
        sections.push((name, tensors));
    }
    Ok(sections)
}

fn network_section<F: Real>(name: &str, params: Vec<(String, &Tensor<F>)>) -> RawSection {
    (
        name.to_string(),
        params
            .into_iter()
            .map(|(n, t)| tensor_to_raw(&n, t))
            .collect(),
    )
}

pub fn save_checkpoint<F: Real>(bundle: &ModelBundle<F>, path: &Path) -> Result<()> {
    let encoder_kind = match bundle.encoder {
        Encoder::Oracle { .. } => 0,
        Encoder::TinyConv { .. } => 1,
    };
    let mut sections = vec![
        meta_section(&bundle.meta, encoder_kind, bundle.disc_low.is_some()),
        network_section("encoder", bundle.encoder.named_params()),
        network_section("kpn", bundle.kpn.named_params()),
        network_section("discriminator", bundle.disc.named_params()),
    ];
    if let Some(dl) = &bundle.disc_low {
        sections.push(network_section("discriminator-low", dl.named_params()));
    }
    if let Some(adam) = &bundle.adam {
        sections.push(("adam-state".to_string(), adam.tensors.clone()));
    }
    write_sections(path, &sections)
}

fn load_into_params<F: Real>(
    section: &RawSection,
    mut params: Vec<(String, &mut Tensor<F>)>,
) -> Result<()> {
    for (tname, dims, data) in &section.1 {
        let slot = params
            .iter_mut()
            .find(|(n, _)| n == tname)
            .ok_or_else(|| Error::Format(format!("unexpected tensor {tname} in checkpoint")))?;
        if slot.1.shape != *dims {
            return Err(Error::Format(format!(
                "tensor {tname} has dims {dims:?}, model expects {:?}",
                slot.1.shape
            )));
        }
        slot.1.data = data.iter().map(|&v| F::from_f32_exact(v)).collect();
    }
    Ok(())
}

fn meta_value<'a>(
    section: &'a RawSection,
    name: &str,
) -> Result<&'a (String, Vec<usize>, Vec<f32>)> {
    section
        .1
        .iter()
        .find(|(n, _, _)| n == name)
        .ok_or_else(|| Error::Format(format!("checkpoint meta is missing field {name}")))
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<ModelBundle<F>> {
    let sections = read_sections(path)?;
    let find = |name: &str| -> Result<&RawSection> {
        sections
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing section {name}")))
    };

    let meta_s = find("meta")?;
    let geometry = &meta_value(meta_s, "geometry")?.2;
    let geom = Geometry::new(
        geometry[0] as usize,
        geometry[1] as usize,
        geometry[2] as usize,
        geometry[3] as usize,
    )?;
    let n_classes = meta_value(meta_s, "n_classes")?.2[0] as usize;
    let sb = &meta_value(meta_s, "sigma_bounds_bits")?.2;
    let sigma_bounds = SigmaBounds {
        min: pair_to_f64(sb[0], sb[1]),
        max: pair_to_f64(sb[2], sb[3]),
    };
    let comps = &meta_value(meta_s, "components")?.2;
    let seed_bits = &meta_value(meta_s, "noise_seed_bits")?.2;
    let noise_seed =
        (seed_bits[0].to_bits() as u64) | ((seed_bits[1].to_bits() as u64) << 32);
    let feature_mode = match meta_value(meta_s, "feature_mode")?.2[0] as u32 {
        0 => FeatureMode::OneHot,
        1 => FeatureMode::Softmax,
        2 => FeatureMode::Logits,
        other => {
            return Err(Error::Format(format!("unknown feature mode {other}")));
        }
    };
    let encoder_kind = meta_value(meta_s, "encoder_kind")?.2[0] as u32;
    let iteration = meta_value(meta_s, "iteration")?.2[0] as u64;
    let two_disc = meta_value(meta_s, "two_disc")?.2[0] != 0.0;

    let meta = CheckpointMeta {
        geom,
        n_classes,
        sigma_bounds,
        enable_affine: comps[0] != 0.0,
        enable_blur: comps[1] != 0.0,
        enable_noise: comps[2] != 0.0,
        noise_seed,
        feature_mode,
        iteration,
    };

    let mut encoder = match encoder_kind {
        0 => Encoder::oracle(n_classes),
        1 => Encoder::tiny_conv(n_classes, feature_mode, 0),
        other => return Err(Error::Format(format!("unknown encoder kind {other}"))),
    };
    load_into_params(find("encoder")?, encoder.named_params_mut())?;

    let mut kpn = Kpn::identity_init(n_classes, sigma_bounds);
    load_into_params(find("kpn")?, kpn.named_params_mut())?;

    let mut disc = Discriminator::init(0);
    load_into_params(find("discriminator")?, disc.named_params_mut())?;

    let disc_low = if two_disc {
        let mut d = Discriminator::init(0);
        load_into_params(find("discriminator-low")?, d.named_params_mut())?;
        Some(d)
    } else {
        None
    };

    let adam = sections
        .iter()
        .find(|(n, _)| n == "adam-state")
        .map(|(_, tensors)| AdamSnapshot {
            tensors: tensors.clone(),
        });

    Ok(ModelBundle {
        meta,
        encoder,
        kpn,
        disc,
        disc_low,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::constrain;

    fn default_meta() -> CheckpointMeta {
        CheckpointMeta {
            geom: Geometry::desk(),
            n_classes: 4,
            sigma_bounds: SigmaBounds::default(),
            enable_affine: true,
            enable_blur: true,
            enable_noise: true,
            noise_seed: 0xDEAD_BEEF_CAFE_F00D,
            feature_mode: FeatureMode::OneHot,
            iteration: 17,
        }
    }

    #[test]
    fn oracle_features_are_one_hot() {
        let enc = Encoder::<f64>::oracle(4);
        let labels = LabelMap::new(8, 8); // all background
        let f = enc.features(None, Some(&labels), 8, 8).unwrap();
        assert_eq!(f.shape, vec![4, 8, 8]);
        assert!(f.data[..64].iter().all(|&v| v == 1.0));
        assert!(f.data[64..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oracle_without_labels_is_usage_error() {
        let enc = Encoder::<f64>::oracle(4);
        assert!(matches!(
            enc.features(None, None, 8, 8),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn oracle_rejects_out_of_range_label() {
        let enc = Encoder::<f64>::oracle(2);
        let mut labels = LabelMap::new(4, 4);
        labels.set(1, 2, 7);
        let err = enc.features(None, Some(&labels), 4, 4).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn tiny_conv_softmax_sums_to_one() {
        let enc = Encoder::<f64>::tiny_conv(4, FeatureMode::Softmax, 9);
        let img = Image::zeros(16, 16, crate::image::ColorSpace::Rgb);
        let f = enc.features(Some(&img), None, 16, 16).unwrap();
        assert_eq!(f.shape, vec![4, 16, 16]);
        for p in 0..256 {
            let s: f64 = (0..4).map(|c| f.data[c * 256 + p]).sum();
            assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn fresh_head_outputs_identity_raw() {
        let bounds = SigmaBounds::default();
        let kpn = Kpn::<f64>::identity_init(4, bounds);
        let enc = Encoder::<f64>::oracle(4);
        let mut labels = LabelMap::new(12, 16);
        for (i, v) in labels.data.iter_mut().enumerate() {
            *v = (i % 4) as u8;
        }
        let feats = enc.features(None, Some(&labels), 12, 16).unwrap();
        let raw = kpn.forward_plain(&feats).unwrap();
        let expected = crate::params::identity_raw::<f64>(12, 16, bounds);
        assert_eq!(raw.data(), expected.data());
        // And constrained, it is the identity parameter map.
        let map = constrain(&raw, bounds).unwrap();
        assert!(map
            .plane(crate::params::CH_SIGMA)
            .iter()
            .all(|&s| s == bounds.min));
    }

    #[test]
    fn head_rejects_wrong_channel_count() {
        let kpn = Kpn::<f64>::identity_init(4, SigmaBounds::default());
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::zeros(&[7, 8, 8]));
        let binding = kpn.bind(&mut tape, false);
        assert!(matches!(
            kpn.forward_with(&mut tape, &binding, f),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn identical_feature_neighborhoods_give_identical_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut kpn = Kpn::<f64>::identity_init(2, SigmaBounds::default());
        for v in kpn.conv.weight.data.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        // Two label maps that agree on the left half.
        let enc = Encoder::<f64>::oracle(2);
        let mut la = LabelMap::new(8, 8);
        let mut lb = LabelMap::new(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                la.set(y, x, ((y + x) % 2) as u8);
                lb.set(y, x, if x < 6 { ((y + x) % 2) as u8 } else { 1 });
            }
        }
        let fa = enc.features(None, Some(&la), 8, 8).unwrap();
        let fb = enc.features(None, Some(&lb), 8, 8).unwrap();
        let ra = kpn.forward_plain(&fa).unwrap();
        let rb = kpn.forward_plain(&fb).unwrap();
        // Columns 0..4 have identical 3x3 neighborhoods in both maps.
        for c in 0..PARAM_CHANNELS {
            for y in 0..8 {
                for x in 0..4 {
                    assert_eq!(
                        ra.plane(c)[y * 8 + x],
                        rb.plane(c)[y * 8 + x],
                        "ch {c} ({y},{x})"
                    );
                }
            }
        }
    }

    #[test]
    fn discriminator_shapes_both_scales() {
        let disc = Discriminator::<f64>::init(5);
        let mut tape = Tape::new();
        let patch = tape.leaf(Tensor::zeros(&[3, 90, 160]));
        let (logits, _) = disc.forward_tape(&mut tape, patch, false).unwrap();
        assert_eq!(tape.value(logits).shape, vec![1, 11, 20]);

        let lowres = tape.leaf(Tensor::zeros(&[3, 96, 160]));
        let (logits2, _) = disc.forward_tape(&mut tape, lowres, false).unwrap();
        assert_eq!(tape.value(logits2).shape, vec![1, 12, 20]);
    }

    #[test]
    fn discriminator_rejects_small_input() {
        let disc = Discriminator::<f64>::init(5);
        let mut tape = Tape::new();
        let tiny = tape.leaf(Tensor::zeros(&[3, 8, 8]));
        assert!(matches!(
            disc.forward_tape(&mut tape, tiny, false),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn discriminator_is_deterministic_and_finite() {
        let disc = Discriminator::<f64>::init(7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..3 * 32 * 32).map(|_| rng.gen::<f64>()).collect();
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_vec(&[3, 32, 32], data.clone()).unwrap());
            let (l, _) = disc.forward_tape(&mut tape, x, false).unwrap();
            tape.value(l).data.clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Discriminator::<f64>::init(11);
        let b = Discriminator::<f64>::init(11);
        for ((_, ta), (_, tb)) in a.named_params().iter().zip(b.named_params()) {
            assert_eq!(ta.data, tb.data);
        }
        let c = Discriminator::<f64>::init(12);
        assert_ne!(a.named_params()[0].1.data, c.named_params()[0].1.data);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.kpnc");
        let bundle = ModelBundle {
            meta: default_meta(),
            encoder: Encoder::<f64>::oracle(4),
            kpn: Kpn::identity_init(4, SigmaBounds::default()),
            disc: Discriminator::init(3),
            disc_low: None,
            adam: Some(AdamSnapshot {
                tensors: vec![("kpn.conv0.bias.m".into(), vec![12], vec![0.5; 12])],
            }),
        };
        save_checkpoint(&bundle, &path).unwrap();
        let loaded = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(loaded.meta, bundle.meta);
        // The file stores f32: values agree up to that quantization, and
        // the quantized forms agree exactly.
        for ((na, ta), (nb, tb)) in bundle
            .disc
            .named_params()
            .iter()
            .zip(loaded.disc.named_params())
        {
            assert_eq!(*na, nb);
            for (a, b) in ta.data.iter().zip(&tb.data) {
                assert_eq!(a.to_f32_lossy(), b.to_f32_lossy());
            }
        }
        assert_eq!(loaded.adam.as_ref().unwrap().tensors[0].2, vec![0.5; 12]);
        // Save-load-save must be byte identical.
        let path2 = dir.path().join("m2.kpnc");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.kpnc");
        let bundle = ModelBundle {
            meta: default_meta(),
            encoder: Encoder::<f64>::oracle(4),
            kpn: Kpn::identity_init(4, SigmaBounds::default()),
            disc: Discriminator::init(3),
            disc_low: None,
            adam: None,
        };
        save_checkpoint(&bundle, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn loaded_checkpoint_forward_matches_across_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.kpnc");
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut bundle = ModelBundle {
            meta: default_meta(),
            encoder: Encoder::<f64>::oracle(4),
            kpn: Kpn::identity_init(4, SigmaBounds::default()),
            disc: Discriminator::init(3),
            disc_low: None,
            adam: None,
        };
        for v in bundle.kpn.conv.weight.data.iter_mut() {
            *v = rng.gen_range(-0.25f32..0.25f32) as f64;
        }
        save_checkpoint(&bundle, &path).unwrap();
        let l1 = load_checkpoint::<f64>(&path).unwrap();
        let l2 = load_checkpoint::<f64>(&path).unwrap();
        let labels = {
            let mut l = LabelMap::new(8, 8);
            for (i, v) in l.data.iter_mut().enumerate() {
                *v = (i % 4) as u8;
            }
            l
        };
        let f = bundle.encoder.features(None, Some(&labels), 8, 8).unwrap();
        let r1 = l1.kpn.forward_plain(&f).unwrap();
        let r2 = l2.kpn.forward_plain(&f).unwrap();
        assert_eq!(r1.data(), r2.data());
        // f32-representable weights survive the round trip exactly.
        // The identity bias holds ln(sigma_min), which is not
        // f32-representable; the round trip quantizes it.
        let r0 = bundle.kpn.forward_plain(&f).unwrap();
        for (a, b) in r0.data().iter().zip(r1.data()) {
            assert!((a - b).abs() <= 1e-7);
        }
    }
}
