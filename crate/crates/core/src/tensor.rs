//! Minimal n-dimensional tensors with tape-based reverse-mode gradients.
//!
//! The op set is closed: exactly the operations the networks and losses
//! need, each with a hand-written backward rule. Tensors are immutable
//! once placed on a tape; one tape is single-threaded, distinct tapes may
//! run on distinct threads.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::resize;

#[derive(Clone, Debug)]
pub struct Tensor<F: Real> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub requires_grad: bool,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} values, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    fn dims3(&self, what: &str) -> Result<(usize, usize, usize)> {
        if self.shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "{what} must be rank 3, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

enum Op<F: Real> {
    Leaf,
    Conv2d {
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        stride: usize,
        pad: usize,
    },
    LeakyRelu {
        input: ValueId,
        slope: F,
    },
    BilinearResize {
        input: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Sub {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Exp {
        input: ValueId,
    },
    Log {
        input: ValueId,
    },
    Clamp {
        input: ValueId,
        lo: F,
        hi: F,
    },
    Sigmoid {
        input: ValueId,
    },
    Softplus {
        input: ValueId,
    },
    MseMean {
        a: ValueId,
        b: ValueId,
    },
    Mean {
        input: ValueId,
    },
    Neg {
        input: ValueId,
    },
    AddScalar {
        input: ValueId,
    },
    MulScalar {
        input: ValueId,
        c: F,
    },
    /// y = c - x
    RsubScalar {
        input: ValueId,
    },
    SoftmaxCrossEntropy {
        logits: ValueId,
        targets: Vec<u8>,
    },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
    grad: Option<Vec<F>>,
}

/// Recorded-operation graph. Node ids are topologically ordered by
/// construction; the backward pass visits each node exactly once in
/// reverse order.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>) -> ValueId {
        let needs = value.requires_grad;
        self.push(value, Op::Leaf, needs)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: ValueId) -> F {
        self.nodes[id.0].value.data[0]
    }

    /// Accumulated gradient of a node, if the last backward reached it.
    pub fn grad(&self, id: ValueId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> ValueId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ---- forward ops ------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (ci, h, wd) = x.dims3("conv2d input")?;
        if w.shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d weight must be rank 4, got {:?}",
                w.shape
            )));
        }
        let (co, wci, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
        if wci != ci {
            return Err(Error::Dimension(format!(
                "conv2d input has {ci} channels but weight expects {wci}"
            )));
        }
        if b.shape != [co] {
            return Err(Error::Dimension(format!(
                "conv2d bias shape {:?} does not match {co} output channels",
                b.shape
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let col = im2col(&x.data, ci, h, wd, kh, kw, stride, pad, oh, ow);
        let mut out = vec![F::zero(); co * oh * ow];
        let k = ci * kh * kw;
        let n = oh * ow;
        F::gemm(
            co,
            k,
            n,
            F::one(),
            &w.data,
            k as isize,
            1,
            &col,
            n as isize,
            1,
            F::zero(),
            &mut out,
            n as isize,
            1,
        );
        for c in 0..co {
            let bv = b.data[c];
            for v in &mut out[c * n..(c + 1) * n] {
                *v += bv;
            }
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        let t = Tensor::from_vec(&[co, oh, ow], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            needs,
        ))
    }

    pub fn leaky_relu(&mut self, input: ValueId, slope: F) -> ValueId {
        let x = self.value(input);
        let data = x
            .data
            .iter()
            .map(|&v| if v >= F::zero() { v } else { slope * v })
            .collect();
        let t = Tensor {
            shape: x.shape.clone(),
            data,
            requires_grad: false,
        };
        let needs = self.needs(input);
        self.push(t, Op::LeakyRelu { input, slope }, needs)
    }

    pub fn bilinear_resize(&mut self, input: ValueId, out_h: usize, out_w: usize) -> Result<ValueId> {
        let x = self.value(input);
        let (c, h, w) = x.dims3("bilinear_resize input")?;
        let mut data = vec![F::zero(); c * out_h * out_w];
        for ch in 0..c {
            resize::bilinear_plane(
                &x.data[ch * h * w..(ch + 1) * h * w],
                h,
                w,
                &mut data[ch * out_h * out_w..(ch + 1) * out_h * out_w],
                out_h,
                out_w,
            );
        }
        let needs = self.needs(input);
        let t = Tensor::from_vec(&[c, out_h, out_w], data)?;
        Ok(self.push(t, Op::BilinearResize { input }, needs))
    }

    fn binary_elementwise(
        &mut self,
        a: ValueId,
        b: ValueId,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<ValueId> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape != tb.shape {
            return Err(Error::Dimension(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
            requires_grad: false,
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, op, needs))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn unary(&mut self, input: ValueId, f: impl Fn(F) -> F, op: Op<F>) -> ValueId {
        let x = self.value(input);
        let t = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        };
        let needs = self.needs(input);
        self.push(t, op, needs)
    }

    pub fn exp(&mut self, input: ValueId) -> ValueId {
        self.unary(input, |v| v.exp(), Op::Exp { input })
    }

    pub fn log(&mut self, input: ValueId) -> Result<ValueId> {
        if let Some(&bad) = self.value(input).data.iter().find(|v| **v <= F::zero()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(input, |v| v.ln(), Op::Log { input }))
    }

    pub fn clamp(&mut self, input: ValueId, lo: F, hi: F) -> ValueId {
        self.unary(
            input,
            |v| {
                if v < lo {
                    lo
                } else if v > hi {
                    hi
                } else {
                    v
                }
            },
            Op::Clamp { input, lo, hi },
        )
    }

    pub fn sigmoid(&mut self, input: ValueId) -> ValueId {
        self.unary(input, sigmoid_scalar, Op::Sigmoid { input })
    }

    pub fn softplus(&mut self, input: ValueId) -> ValueId {
        self.unary(
            input,
            |v| v.max(F::zero()) + F::ln_1p((-v.abs()).exp()),
            Op::Softplus { input },
        )
    }

    pub fn neg(&mut self, input: ValueId) -> ValueId {
        self.unary(input, |v| -v, Op::Neg { input })
    }

    pub fn add_scalar(&mut self, input: ValueId, c: F) -> ValueId {
        self.unary(input, |v| v + c, Op::AddScalar { input })
    }

    pub fn mul_scalar(&mut self, input: ValueId, c: F) -> ValueId {
        self.unary(input, |v| v * c, Op::MulScalar { input, c })
    }

    pub fn rsub_scalar(&mut self, input: ValueId, c: F) -> ValueId {
        self.unary(input, |v| c - v, Op::RsubScalar { input })
    }

    /// Mean of squared differences, reduced to a scalar.
    pub fn mse_mean(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape != tb.shape {
            return Err(Error::Dimension(format!(
                "mse_mean on mismatched shapes {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let n = F::c(ta.numel() as f64);
        let sum: F = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(sum / n), Op::MseMean { a, b }, needs))
    }

    pub fn mean(&mut self, input: ValueId) -> ValueId {
        let x = self.value(input);
        let n = F::c(x.numel() as f64);
        let sum: F = x.data.iter().copied().sum();
        let needs = self.needs(input);
        self.push(Tensor::scalar(sum / n), Op::Mean { input }, needs)
    }

    /// Mean over pixels of -log softmax(logits over channel 0)[target].
    /// `logits` is [C, H, W]; `targets` is a row-major H*W class map.
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, targets: &[u8]) -> Result<ValueId> {
        let x = self.value(logits);
        let (c, h, w) = x.dims3("softmax_cross_entropy logits")?;
        if targets.len() != h * w {
            return Err(Error::Dimension(format!(
                "target map has {} entries, logits spatial size is {}",
                targets.len(),
                h * w
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
            return Err(Error::Validation(format!(
                "target class {bad} out of range for {c} channels"
            )));
        }
        let plane = h * w;
        let mut total = F::zero();
        for p in 0..plane {
            let mut mx = x.data[p];
            for ch in 1..c {
                mx = mx.max(x.data[ch * plane + p]);
            }
            let mut denom = F::zero();
            for ch in 0..c {
                denom += (x.data[ch * plane + p] - mx).exp();
            }
            let t = targets[p] as usize;
            let logit = x.data[t * plane + p];
            total += denom.ln() + mx - logit;
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / F::c(plane as f64)),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Standard scalar-loss backward: seeds the loss gradient with 1.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let seed = vec![F::one()];
        self.backward_seeded(&[(loss, seed)])
    }

    /// Backward from explicit upstream gradients. Used to continue a chain
    /// whose downstream part lives outside this tape.
    pub fn backward_seeded(&mut self, seeds: &[(ValueId, Vec<F>)]) -> Result<()> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        for (id, seed) in seeds {
            let numel = self.nodes[id.0].value.numel();
            if seed.len() != numel {
                return Err(Error::Dimension(format!(
                    "seed gradient has {} values, node has {numel}",
                    seed.len()
                )));
            }
            accumulate(&mut grads[id.0], seed);
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        // Helper: accumulate `delta` into the gradient slot of `id` if that
        // node participates in the gradient flow.
        macro_rules! send {
            ($id:expr, $delta:expr) => {
                if self.needs($id) {
                    accumulate(&mut grads[$id.0], &$delta);
                }
            };
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let (ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
                let (co, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
                let (oh, ow) = (self.nodes[i].value.shape[1], self.nodes[i].value.shape[2]);
                let (gi, gw, gb) = conv2d_backward(
                    g,
                    &x.data,
                    &w.data,
                    ci,
                    h,
                    wd,
                    co,
                    kh,
                    kw,
                    *stride,
                    *pad,
                    oh,
                    ow,
                    self.needs(*input),
                    self.needs(*weight),
                );
                if let Some(gi) = gi {
                    send!(*input, gi);
                }
                if let Some(gw) = gw {
                    send!(*weight, gw);
                }
                send!(*bias, gb);
            }
            Op::LeakyRelu { input, slope } => {
                let x = &self.nodes[input.0].value;
                let delta: Vec<F> = x
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&v, &gg)| if v >= F::zero() { gg } else { *slope * gg })
                    .collect();
                send!(*input, delta);
            }
            Op::BilinearResize { input } => {
                let x = &self.nodes[input.0].value;
                let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
                let (oh, ow) = (self.nodes[i].value.shape[1], self.nodes[i].value.shape[2]);
                let mut delta = vec![F::zero(); c * h * w];
                for ch in 0..c {
                    resize::bilinear_plane_backward(
                        &g[ch * oh * ow..(ch + 1) * oh * ow],
                        oh,
                        ow,
                        &mut delta[ch * h * w..(ch + 1) * h * w],
                        h,
                        w,
                    );
                }
                send!(*input, delta);
            }
            Op::Add { a, b } => {
                send!(*a, g.to_vec());
                send!(*b, g.to_vec());
            }
            Op::Sub { a, b } => {
                send!(*a, g.to_vec());
                let delta: Vec<F> = g.iter().map(|&v| -v).collect();
                send!(*b, delta);
            }
            Op::Mul { a, b } => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                if self.needs(*a) {
                    let delta: Vec<F> = g.iter().zip(&tb.data).map(|(&gg, &y)| gg * y).collect();
                    accumulate(&mut grads[a.0], &delta);
                }
                if self.needs(*b) {
                    let delta: Vec<F> = g.iter().zip(&ta.data).map(|(&gg, &x)| gg * x).collect();
                    accumulate(&mut grads[b.0], &delta);
                }
            }
            Op::Exp { input } => {
                let y = &self.nodes[i].value;
                let delta: Vec<F> = g.iter().zip(&y.data).map(|(&gg, &e)| gg * e).collect();
                send!(*input, delta);
            }
            Op::Log { input } => {
                let x = &self.nodes[input.0].value;
                let delta: Vec<F> = g.iter().zip(&x.data).map(|(&gg, &v)| gg / v).collect();
                send!(*input, delta);
            }
            Op::Clamp { input, lo, hi } => {
                let x = &self.nodes[input.0].value;
                let delta: Vec<F> = g
                    .iter()
                    .zip(&x.data)
                    .map(|(&gg, &v)| if v >= *lo && v <= *hi { gg } else { F::zero() })
                    .collect();
                send!(*input, delta);
            }
            Op::Sigmoid { input } => {
                let y = &self.nodes[i].value;
                let delta: Vec<F> = g
                    .iter()
                    .zip(&y.data)
                    .map(|(&gg, &s)| gg * s * (F::one() - s))
                    .collect();
                send!(*input, delta);
            }
            Op::Softplus { input } => {
                let x = &self.nodes[input.0].value;
                let delta: Vec<F> = g
                    .iter()
                    .zip(&x.data)
                    .map(|(&gg, &v)| gg * sigmoid_scalar(v))
                    .collect();
                send!(*input, delta);
            }
            Op::MseMean { a, b } => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let scale = F::c(2.0) / F::c(ta.numel() as f64) * g[0];
                if self.needs(*a) {
                    let delta: Vec<F> = ta
                        .data
                        .iter()
                        .zip(&tb.data)
                        .map(|(&x, &y)| scale * (x - y))
                        .collect();
                    accumulate(&mut grads[a.0], &delta);
                }
                if self.needs(*b) {
                    let delta: Vec<F> = ta
                        .data
                        .iter()
                        .zip(&tb.data)
                        .map(|(&x, &y)| -scale * (x - y))
                        .collect();
                    accumulate(&mut grads[b.0], &delta);
                }
            }
            Op::Mean { input } => {
                let numel = self.nodes[input.0].value.numel();
                let gv = g[0] / F::c(numel as f64);
                send!(*input, vec![gv; numel]);
            }
            Op::Neg { input } => {
                let delta: Vec<F> = g.iter().map(|&v| -v).collect();
                send!(*input, delta);
            }
            Op::AddScalar { input } => {
                send!(*input, g.to_vec());
            }
            Op::MulScalar { input, c } => {
                let delta: Vec<F> = g.iter().map(|&v| v * *c).collect();
                send!(*input, delta);
            }
            Op::RsubScalar { input } => {
                let delta: Vec<F> = g.iter().map(|&v| -v).collect();
                send!(*input, delta);
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let x = &self.nodes[logits.0].value;
                let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
                let plane = h * w;
                let scale = g[0] / F::c(plane as f64);
                let mut delta = vec![F::zero(); c * plane];
                for p in 0..plane {
                    let mut mx = x.data[p];
                    for ch in 1..c {
                        mx = mx.max(x.data[ch * plane + p]);
                    }
                    let mut denom = F::zero();
                    for ch in 0..c {
                        denom += (x.data[ch * plane + p] - mx).exp();
                    }
                    for ch in 0..c {
                        let soft = (x.data[ch * plane + p] - mx).exp() / denom;
                        let y = if targets[p] as usize == ch {
                            F::one()
                        } else {
                            F::zero()
                        };
                        delta[ch * plane + p] = scale * (soft - y);
                    }
                }
                send!(*logits, delta);
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid_scalar<F: Real>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

fn accumulate<F: Real>(slot: &mut Option<Vec<F>>, delta: &[F]) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += *b;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Real>(
    input: &[F],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let n = oh * ow;
    let mut col = vec![F::zero(); ci * kh * kw * n];
    for c in 0..ci {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[((c * kh + ky) * kw + kx) * n..((c * kh + ky) * kw + kx + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        // Contiguous copy of the in-bounds span.
                        let ix0 = kx as isize - pad as isize;
                        let start = (-ix0).max(0) as usize;
                        let end = ((w as isize - ix0).min(ow as isize)).max(0) as usize;
                        if start < end {
                            dst[start..end].copy_from_slice(
                                &src_row[(ix0 + start as isize) as usize
                                    ..(ix0 + start as isize) as usize + (end - start)],
                            );
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<F: Real>(
    grad_out: &[F],
    input: &[F],
    weight: &[F],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>, Vec<F>) {
    let k = ci * kh * kw;
    let n = oh * ow;

    let mut grad_bias = vec![F::zero(); co];
    for c in 0..co {
        grad_bias[c] = grad_out[c * n..(c + 1) * n].iter().copied().sum();
    }

    let grad_weight = if want_weight {
        let col = im2col(input, ci, h, w, kh, kw, stride, pad, oh, ow);
        let mut gw = vec![F::zero(); co * k];
        // gw[co x k] = grad_out[co x n] * col^T[n x k]
        F::gemm(
            co,
            n,
            k,
            F::one(),
            grad_out,
            n as isize,
            1,
            &col,
            1,
            n as isize,
            F::zero(),
            &mut gw,
            k as isize,
            1,
        );
        Some(gw)
    } else {
        None
    };

    let grad_input = if want_input {
        // dcol[k x n] = W^T[k x co] * grad_out[co x n]
        let mut dcol = vec![F::zero(); k * n];
        F::gemm(
            k,
            co,
            n,
            F::one(),
            weight,
            1,
            k as isize,
            grad_out,
            n as isize,
            1,
            F::zero(),
            &mut dcol,
            n as isize,
            1,
        );
        // col2im scatter-add, serial for determinism.
        let mut gi = vec![F::zero(); ci * h * w];
        for c in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &dcol[((c * kh + ky) * kw + kx) * n..((c * kh + ky) * kw + kx + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                gi[(c * h + iy as usize) * w + ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        Some(gi)
    } else {
        None
    };

    (grad_input, grad_weight, grad_bias)
}
