//! Differentiable layers with explicit forward and backward rules.
//!
//! Every layer caches what its backward rule needs during `forward`; calling
//! `backward` without a preceding `forward` is a state error. Parameter
//! gradients accumulate into [`ParamSlot::grad`] until the owner zeroes them.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Element, Tensor};

/// A parameter tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct ParamSlot<T = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    populated: bool,
}

impl<T: Element> ParamSlot<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            populated: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(Tensor::zeros(shape))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
        self.populated = false;
    }

    /// Whether a backward pass has written into `grad` since the last reset.
    pub fn is_populated(&self) -> bool {
        self.populated
    }

    /// Add `delta` into the gradient and mark it populated.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        assert_eq!(delta.len(), self.grad.len(), "gradient length mismatch");
        for (g, &d) in self.grad.data_mut().iter_mut().zip(delta) {
            *g = *g + d;
        }
        self.populated = true;
    }
}

/// Forward-pass mode. Dropout masks in training mode are drawn from a stream
/// keyed on `(seed, layer stream id, step)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64, step: u64 },
    Eval,
}

/// Declarative description of a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d,
    Relu,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Dropout {
        p: f64,
    },
    Flatten,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d => "maxpool2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Per-sample output shape for a per-sample input shape (batch axis
    /// excluded).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = *input else {
                    return Err(bad_rank("conv2d", 3, input));
                };
                if c != in_channels {
                    return Err(Error::Shape {
                        op: "conv2d",
                        lhs: input.to_vec(),
                        rhs: vec![in_channels, kernel, kernel],
                    });
                }
                let oh = conv_extent(h, kernel, stride, padding)?;
                let ow = conv_extent(w, kernel, stride, padding)?;
                Ok(vec![out_channels, oh, ow])
            }
            LayerSpec::MaxPool2d => {
                let [c, h, w] = *input else {
                    return Err(bad_rank("maxpool2d", 3, input));
                };
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::BadShape {
                        op: "maxpool2d",
                        reason: format!("spatial extents must be even, got {h}x{w}"),
                    });
                }
                Ok(vec![c, h / 2, w / 2])
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if input != [in_features] {
                    return Err(Error::Shape {
                        op: "linear",
                        lhs: input.to_vec(),
                        rhs: vec![in_features],
                    });
                }
                Ok(vec![out_features])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn bad_rank(op: &'static str, rank: usize, got: &[usize]) -> Error {
    Error::BadShape {
        op,
        reason: format!("expected rank-{rank} sample shape, got {got:?}"),
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::BadShape {
            op: "conv2d",
            reason: format!(
                "extent {size} with kernel {kernel}, stride {stride}, padding {padding} \
                 does not give an integer output size"
            ),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

fn not_forwarded(kind: &str) -> Error {
    Error::State(format!("{kind} backward called before forward"))
}

fn expect_rank4(op: &'static str, t: &Tensor<impl Element>) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::BadShape {
            op,
            reason: format!("expected B×C×H×W input, got {:?}", t.shape()),
        }),
    }
}

// ---------------------------------------------------------------------------
// Conv2d

#[derive(Debug, Clone)]
pub struct Conv2d<T = f32> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `C_out × C_in × k × k`
    pub weight: ParamSlot<T>,
    /// `C_out`
    pub bias: ParamSlot<T>,
    pub trainable: bool,
    input: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source pixel for (row, output position), `None` when in the padding.
    #[inline]
    fn source(&self, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// Unroll one sample's `C×H×W` image into a `(C·k·k) × (H'·W')` matrix.
fn im2col<T: Element>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.cols();
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..][..n];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        dst[oy * g.ow + ox] = match g.source(ky, kx, oy, ox) {
                            Some((y, x)) => img[(ci * g.h + y) * g.w + x],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the inverse of [`im2col`].
fn col2im<T: Element>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let n = g.cols();
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * n..][..n];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some((y, x)) = g.source(ky, kx, oy, ox) {
                            let v = &mut img[(ci * g.h + y) * g.w + x];
                            *v = *v + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: ParamSlot::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: ParamSlot::zeros(&[out_channels]),
            trainable: true,
            input: None,
        }
    }

    fn geometry(&self, input: &Tensor<T>) -> Result<(usize, ConvGeom)> {
        let (b, c, h, w) = expect_rank4("conv2d", input)?;
        if c != self.in_channels {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: input.shape().to_vec(),
                rhs: self.weight.value.shape().to_vec(),
            });
        }
        let oh = conv_extent(h, self.kernel, self.stride, self.padding)?;
        let ow = conv_extent(w, self.kernel, self.stride, self.padding)?;
        Ok((
            b,
            ConvGeom {
                c_in: c,
                h,
                w,
                k: self.kernel,
                stride: self.stride,
                pad: self.padding,
                oh,
                ow,
            },
        ))
    }

    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, g) = self.geometry(input)?;
        let c_out = self.out_channels;
        let (rows, n) = (g.rows(), g.cols());
        let in_len = g.c_in * g.h * g.w;
        let weight = self.weight.value.data();
        let bias = self.bias.value.data();
        let mut out = vec![T::zero(); b * c_out * n];
        out.par_chunks_mut(c_out * n)
            .zip(input.data().par_chunks(in_len))
            .for_each(|(dst, img)| {
                let mut cols = vec![T::zero(); rows * n];
                im2col(img, &g, &mut cols);
                gemm_nn(weight, &cols, dst, c_out, rows, n);
                for (o, plane) in dst.chunks_mut(n).enumerate() {
                    plane.iter_mut().for_each(|v| *v = *v + bias[o]);
                }
            });
        self.input = Some(input.clone());
        Tensor::from_vec(vec![b, c_out, g.oh, g.ow], out)
    }

    fn backward_inner(&mut self, grad_out: &Tensor<T>, want_input: bool) -> Result<Option<Tensor<T>>> {
        let input = self.input.as_ref().ok_or_else(|| not_forwarded("conv2d"))?;
        let (b, g) = self.geometry(input)?;
        let c_out = self.out_channels;
        let (rows, n) = (g.rows(), g.cols());
        if grad_out.shape() != [b, c_out, g.oh, g.ow] {
            return Err(Error::Shape {
                op: "conv2d backward",
                lhs: grad_out.shape().to_vec(),
                rhs: vec![b, c_out, g.oh, g.ow],
            });
        }
        let in_len = g.c_in * g.h * g.w;
        let weight = self.weight.value.data();
        let want_params = self.trainable;

        let mut grad_in = if want_input {
            vec![T::zero(); input.len()]
        } else {
            Vec::new()
        };
        let per_sample: Vec<(Vec<T>, Vec<T>)> = {
            let work = |(s, gi): (usize, &mut [T])| {
                let go = &grad_out.data()[s * c_out * n..][..c_out * n];
                let mut cols = vec![T::zero(); rows * n];
                let mut gw = Vec::new();
                let mut gb = Vec::new();
                if want_params {
                    im2col(&input.data()[s * in_len..][..in_len], &g, &mut cols);
                    gw = vec![T::zero(); c_out * rows];
                    gemm_nt(go, &cols, &mut gw, c_out, n, rows);
                    gb = go.chunks(n).map(|plane| plane.iter().copied().sum()).collect();
                }
                if want_input {
                    gemm_tn(weight, go, &mut cols, c_out, rows, n);
                    col2im(&cols, &g, gi);
                }
                (gw, gb)
            };
            if want_input {
                grad_in.par_chunks_mut(in_len).enumerate().map(work).collect()
            } else {
                (0..b)
                    .into_par_iter()
                    .map(|s| work((s, &mut [][..])))
                    .collect()
            }
        };
        if want_params {
            for (gw, gb) in &per_sample {
                self.weight.accumulate_grad(gw);
                self.bias.accumulate_grad(gb);
            }
        }
        if want_input {
            Ok(Some(Tensor::from_vec(input.shape().to_vec(), grad_in)?))
        } else {
            Ok(None)
        }
    }
}

/// Reference nested-loop cross-correlation.
pub fn conv2d_naive<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (b, c_in, h, w) = expect_rank4("conv2d_naive", input)?;
    let (c_out, wc, kh, kw) = expect_rank4("conv2d_naive", weight)?;
    if wc != c_in || bias.shape() != [c_out] {
        return Err(Error::Shape {
            op: "conv2d_naive",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let oh = conv_extent(h, kh, stride, padding)?;
    let ow = conv_extent(w, kw, stride, padding)?;
    let x = input.data();
    let k = weight.data();
    let mut out = vec![T::zero(); b * c_out * oh * ow];
    for s in 0..b {
        for o in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - padding as isize;
                                let xx = (ox * stride + kx) as isize - padding as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let (y, xx) = (y as usize, xx as usize);
                                acc = acc
                                    + k[((o * c_in + ci) * kh + ky) * kw + kx]
                                        * x[((s * c_in + ci) * h + y) * w + xx];
                            }
                        }
                    }
                    out[((s * c_out + o) * oh + oy) * ow + ox] = acc + bias.data()[o];
                }
            }
        }
    }
    Tensor::from_vec(vec![b, c_out, oh, ow], out)
}

// ---------------------------------------------------------------------------
// MaxPool2d

/// 2×2 max pooling with stride 2.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2d {
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Element>(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, h, w) = expect_rank4("maxpool2d", input)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::BadShape {
                op: "maxpool2d",
                reason: format!("spatial extents must be even, got {h}x{w}"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = input.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let top = base + 2 * oy * w + 2 * ox;
                    // row-major window order; strict > keeps the first maximum
                    let mut best = top;
                    for idx in [top + 1, top + w, top + w + 1] {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        self.cache = Some((input.shape().to_vec(), argmax));
        Tensor::from_vec(vec![b, c, oh, ow], out)
    }

    pub fn backward<T: Element>(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, argmax) = self.cache.as_ref().ok_or_else(|| not_forwarded("maxpool2d"))?;
        if grad_out.len() != argmax.len() {
            return Err(Error::Shape {
                op: "maxpool2d backward",
                lhs: grad_out.shape().to_vec(),
                rhs: shape.clone(),
            });
        }
        let mut grad_in = vec![T::zero(); shape.iter().product()];
        for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
            grad_in[idx] = grad_in[idx] + g;
        }
        Tensor::from_vec(shape.clone(), grad_in)
    }

    /// Flat input index selected for each output element by the last forward.
    pub fn argmax_indices(&self) -> Option<&[usize]> {
        self.cache.as_ref().map(|(_, a)| a.as_slice())
    }
}

// ---------------------------------------------------------------------------
// ReLU

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<(Vec<usize>, Vec<bool>)>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Element>(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mask: Vec<bool> = input.data().iter().map(|&v| v > T::zero()).collect();
        self.mask = Some((input.shape().to_vec(), mask));
        Ok(input.max_with_zero())
    }

    /// Passes gradient where the input was strictly positive; the
    /// subgradient at exactly zero is zero.
    pub fn backward<T: Element>(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, mask) = self.mask.as_ref().ok_or_else(|| not_forwarded("relu"))?;
        if grad_out.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "relu backward",
                lhs: grad_out.shape().to_vec(),
                rhs: shape.clone(),
            });
        }
        let data = grad_out
            .data()
            .iter()
            .zip(mask)
            .map(|(&g, &keep)| if keep { g } else { T::zero() })
            .collect();
        Tensor::from_vec(shape.clone(), data)
    }
}

// ---------------------------------------------------------------------------
// Linear

#[derive(Debug, Clone)]
pub struct Linear<T = f32> {
    pub in_features: usize,
    pub out_features: usize,
    /// `F_out × F_in`
    pub weight: ParamSlot<T>,
    /// `F_out`
    pub bias: ParamSlot<T>,
    pub trainable: bool,
    input: Option<Tensor<T>>,
}

impl<T: Element> Linear<T> {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: ParamSlot::zeros(&[out_features, in_features]),
            bias: ParamSlot::zeros(&[out_features]),
            trainable: true,
            input: None,
        }
    }

    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, f) = input.as_matrix("linear")?;
        if f != self.in_features {
            return Err(Error::Shape {
                op: "linear",
                lhs: input.shape().to_vec(),
                rhs: self.weight.value.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); b * self.out_features];
        gemm_nt(input.data(), self.weight.value.data(), &mut out, b, f, self.out_features);
        for row in out.chunks_mut(self.out_features) {
            for (v, &bias) in row.iter_mut().zip(self.bias.value.data()) {
                *v = *v + bias;
            }
        }
        self.input = Some(input.clone());
        Tensor::from_vec(vec![b, self.out_features], out)
    }

    fn backward_inner(&mut self, grad_out: &Tensor<T>, want_input: bool) -> Result<Option<Tensor<T>>> {
        let input = self.input.as_ref().ok_or_else(|| not_forwarded("linear"))?;
        let (b, f_in) = input.as_matrix("linear backward")?;
        let f_out = self.out_features;
        if grad_out.shape() != [b, f_out] {
            return Err(Error::Shape {
                op: "linear backward",
                lhs: grad_out.shape().to_vec(),
                rhs: vec![b, f_out],
            });
        }
        if self.trainable {
            let mut gw = vec![T::zero(); f_out * f_in];
            gemm_tn(grad_out.data(), input.data(), &mut gw, b, f_out, f_in);
            let gb = grad_out.sum_axis(0)?;
            self.weight.accumulate_grad(&gw);
            self.bias.accumulate_grad(gb.data());
        }
        if !want_input {
            return Ok(None);
        }
        let mut gi = vec![T::zero(); b * f_in];
        gemm_nn(grad_out.data(), self.weight.value.data(), &mut gi, b, f_out, f_in);
        Ok(Some(Tensor::from_vec(vec![b, f_in], gi)?))
    }
}

// ---------------------------------------------------------------------------
// Dropout

/// Inverted dropout: survivors are scaled by `1/(1-p)` in training mode and
/// evaluation mode is the identity.
#[derive(Debug, Clone)]
pub struct Dropout<T = f32> {
    pub p: f64,
    /// Key distinguishing this layer's mask stream from other dropout layers.
    pub stream_id: u64,
    state: DropoutState<T>,
}

#[derive(Debug, Clone)]
enum DropoutState<T> {
    Empty,
    Identity(Vec<usize>),
    Masked(Vec<usize>, Vec<T>),
}

impl<T: Element> Dropout<T> {
    pub fn new(p: f64, stream_id: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must be in [0, 1), got {p}")));
        }
        Ok(Self {
            p,
            stream_id,
            state: DropoutState::Empty,
        })
    }

    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => {
                self.state = DropoutState::Identity(input.shape().to_vec());
                Ok(input.clone())
            }
            Mode::Train { seed, step } => {
                let mut rng = rng::stream(seed, Purpose::Dropout, &[self.stream_id, step]);
                let keep_scale = T::from_f64(1.0 / (1.0 - self.p));
                let mask: Vec<T> = (0..input.len())
                    .map(|_| {
                        if self.p > 0.0 && rng.random::<f64>() < self.p {
                            T::zero()
                        } else {
                            keep_scale
                        }
                    })
                    .collect();
                let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
                self.state = DropoutState::Masked(input.shape().to_vec(), mask);
                Tensor::from_vec(input.shape().to_vec(), data)
            }
        }
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = match &self.state {
            DropoutState::Empty => return Err(not_forwarded("dropout")),
            DropoutState::Identity(s) | DropoutState::Masked(s, _) => s,
        };
        if grad_out.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "dropout backward",
                lhs: grad_out.shape().to_vec(),
                rhs: shape.clone(),
            });
        }
        match &self.state {
            DropoutState::Masked(_, mask) => grad_out.mul(&Tensor::from_vec(shape.clone(), mask.clone())?),
            _ => Ok(grad_out.clone()),
        }
    }
}

// ---------------------------------------------------------------------------
// Flatten

#[derive(Debug, Clone, Default)]
pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Element>(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let b = input.shape()[0];
        let features = input.len() / b;
        self.input_shape = Some(input.shape().to_vec());
        input.clone().reshape(&[b, features])
    }

    pub fn backward<T: Element>(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape.as_ref().ok_or_else(|| not_forwarded("flatten"))?;
        grad_out.clone().reshape(shape)
    }
}

// ---------------------------------------------------------------------------
// Layer

/// One node of a sequential network.
#[derive(Debug, Clone)]
pub enum Layer<T = f32> {
    Conv2d(Conv2d<T>),
    MaxPool2d(MaxPool2d),
    Relu(Relu),
    Linear(Linear<T>),
    Dropout(Dropout<T>),
    Flatten(Flatten),
}

impl<T: Element> Layer<T> {
    /// Build a layer with zero-valued parameters. `stream_id` keys the
    /// dropout mask stream and is ignored by other kinds.
    pub fn from_spec(spec: &LayerSpec, stream_id: u64) -> Result<Self> {
        Ok(match *spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => Layer::Conv2d(Conv2d::new(in_channels, out_channels, kernel, stride, padding)),
            LayerSpec::MaxPool2d => Layer::MaxPool2d(MaxPool2d::new()),
            LayerSpec::Relu => Layer::Relu(Relu::new()),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => Layer::Linear(Linear::new(in_features, out_features)),
            LayerSpec::Dropout { p } => Layer::Dropout(Dropout::new(p, stream_id)?),
            LayerSpec::Flatten => Layer::Flatten(Flatten::new()),
        })
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv2d(c) => LayerSpec::Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
            },
            Layer::MaxPool2d(_) => LayerSpec::MaxPool2d,
            Layer::Relu(_) => LayerSpec::Relu,
            Layer::Linear(l) => LayerSpec::Linear {
                in_features: l.in_features,
                out_features: l.out_features,
            },
            Layer::Dropout(d) => LayerSpec::Dropout { p: d.p },
            Layer::Flatten(_) => LayerSpec::Flatten,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        self.spec().kind_name()
    }

    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => l.forward(input),
            Layer::MaxPool2d(l) => l.forward(input),
            Layer::Relu(l) => l.forward(input),
            Layer::Linear(l) => l.forward(input),
            Layer::Dropout(l) => l.forward(input, mode),
            Layer::Flatten(l) => l.forward(input),
        }
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        self.backward_inner(grad_out, true)
            .map(|g| g.expect("input gradient requested"))
    }

    /// Like [`Layer::backward`], but may skip the input gradient when the
    /// caller does not need it.
    pub(crate) fn backward_inner(&mut self, grad_out: &Tensor<T>, want_input: bool) -> Result<Option<Tensor<T>>> {
        match self {
            Layer::Conv2d(l) => l.backward_inner(grad_out, want_input),
            Layer::Linear(l) => l.backward_inner(grad_out, want_input),
            Layer::MaxPool2d(l) => l.backward(grad_out).map(Some),
            Layer::Relu(l) => l.backward(grad_out).map(Some),
            Layer::Dropout(l) => l.backward(grad_out).map(Some),
            Layer::Flatten(l) => l.backward(grad_out).map(Some),
        }
    }

    pub fn params(&self) -> Vec<&ParamSlot<T>> {
        match self {
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamSlot<T>> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv2d(_) | Layer::Linear(_))
    }

    /// Parameter-free layers report `true`.
    pub fn trainable(&self) -> bool {
        match self {
            Layer::Conv2d(c) => c.trainable,
            Layer::Linear(l) => l.trainable,
            _ => true,
        }
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        match self {
            Layer::Conv2d(c) => c.trainable = trainable,
            Layer::Linear(l) => l.trainable = trainable,
            _ => {}
        }
    }

    /// Fan-in used for weight initialization.
    pub fn fan_in(&self) -> Option<usize> {
        match self {
            Layer::Conv2d(c) => Some(c.in_channels * c.kernel * c.kernel),
            Layer::Linear(l) => Some(l.in_features),
            _ => None,
        }
    }
}
