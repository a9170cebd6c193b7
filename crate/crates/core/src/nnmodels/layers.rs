//! Layer graph with hand-written forward and backward kernels.
//!
//! A network is a list of [`Layer`]s whose parameters live in an external
//! `&[Vec<T>]` indexed by the layer. Forward records a [`Tape`] of layer
//! inputs; backward consumes it, accumulating parameter gradients and
//! returning the gradient with respect to the network input. Every kernel is
//! generic over [`Scalar`] so the same code runs on `f64` and on [`Dual`].
//!
//! [`Dual`]: crate::scalar::Dual

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

const LEAKY_SLOPE: f64 = 0.2;
const PIXEL_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x.re() > 0.0 {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if x.re() > 0.0 {
                    x
                } else {
                    x.scale(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// `d act / dx` evaluated at the pre-activation `x`.
    fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x.re() > 0.0 {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if x.re() > 0.0 {
                    T::one()
                } else {
                    T::from_f64(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => {
                let s = self.apply(x);
                s * (T::one() - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
        }
    }
}

/// Convolution geometry plus the parameter slots it reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub weight: usize,
    pub bias: Option<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn conv_out(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn transpose_out(&self, size: usize) -> usize {
        (size - 1) * self.stride + self.kernel - 2 * self.padding
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Weight layout `[out, in, k, k]`.
    Conv2d(ConvSpec),
    /// Weight layout `[in, out, k, k]`.
    ConvTranspose2d(ConvSpec),
    /// Weight layout `[out, in]`; flattens any trailing input dims.
    Linear {
        weight: usize,
        bias: Option<usize>,
        in_features: usize,
        out_features: usize,
    },
    Act(Activation),
    GlobalAvgPool,
    Reshape {
        channels: usize,
        height: usize,
        width: usize,
    },
    /// Per-sample rescaling to unit root-mean-square.
    PixelNorm,
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        body: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
}

/// Batch-first dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![T::zero(); n],
        }
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    /// Elements per batch entry.
    pub fn row_len(&self) -> usize {
        self.dims[1..].iter().product()
    }

    fn nchw(&self) -> (usize, usize, usize, usize) {
        debug_assert_eq!(self.dims.len(), 4, "expected a B×C×H×W tensor");
        (self.dims[0], self.dims[1], self.dims[2], self.dims[3])
    }
}

pub enum Tape<T> {
    Input(Tensor<T>),
    Residual {
        body: Vec<Tape<T>>,
        shortcut: Vec<Tape<T>>,
    },
}

pub fn forward<T: Scalar>(
    layers: &[Layer],
    params: &[Vec<T>],
    mut x: Tensor<T>,
    mut tape: Option<&mut Vec<Tape<T>>>,
) -> Tensor<T> {
    for layer in layers {
        x = match layer {
            Layer::Residual { body, shortcut } => {
                let (mut tb, mut ts) = (Vec::new(), Vec::new());
                let record = tape.is_some();
                let a = forward(body, params, x.clone(), record.then_some(&mut tb));
                let b = forward(shortcut, params, x, record.then_some(&mut ts));
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Tape::Residual {
                        body: tb,
                        shortcut: ts,
                    });
                }
                add(a, b)
            }
            _ => {
                let y = forward_leaf(layer, params, &x);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Tape::Input(x));
                }
                y
            }
        };
    }
    x
}

/// Reverse pass over `tape`. Parameter gradients are *added* into `grads`.
/// Returns the gradient with respect to the network input.
pub fn backward<T: Scalar>(
    layers: &[Layer],
    params: &[Vec<T>],
    tape: Vec<Tape<T>>,
    mut grad: Tensor<T>,
    grads: &mut [Vec<T>],
) -> Tensor<T> {
    debug_assert_eq!(layers.len(), tape.len());
    for (layer, entry) in layers.iter().zip(tape).rev() {
        grad = match (layer, entry) {
            (Layer::Residual { body, shortcut }, Tape::Residual { body: tb, shortcut: ts }) => {
                let gb = backward(body, params, tb, grad.clone(), grads);
                let gs = backward(shortcut, params, ts, grad, grads);
                add(gb, gs)
            }
            (_, Tape::Input(input)) => backward_leaf(layer, params, &input, grad, grads),
            _ => unreachable!("tape does not match layer structure"),
        };
    }
    grad
}

fn add<T: Scalar>(mut a: Tensor<T>, b: Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(a.dims, b.dims, "residual branch shapes differ");
    for (x, y) in a.data.iter_mut().zip(b.data) {
        *x += y;
    }
    a
}

fn forward_leaf<T: Scalar>(layer: &Layer, params: &[Vec<T>], x: &Tensor<T>) -> Tensor<T> {
    match layer {
        Layer::Conv2d(spec) => conv2d(spec, params, x),
        Layer::ConvTranspose2d(spec) => conv_transpose2d(spec, params, x),
        Layer::Linear {
            weight,
            bias,
            in_features,
            out_features,
        } => {
            let (b, nin, nout) = (x.batch(), *in_features, *out_features);
            debug_assert_eq!(x.row_len(), nin);
            let w = &params[*weight];
            let mut y = Vec::with_capacity(b * nout);
            for s in 0..b {
                let xs = &x.data[s * nin..(s + 1) * nin];
                for o in 0..nout {
                    let mut acc = bias.map_or(T::zero(), |bi| params[bi][o]);
                    for (wv, xv) in w[o * nin..(o + 1) * nin].iter().zip(xs) {
                        acc += *wv * *xv;
                    }
                    y.push(acc);
                }
            }
            Tensor::new(vec![b, nout], y)
        }
        Layer::Act(act) => Tensor::new(
            x.dims.clone(),
            x.data.iter().map(|&v| act.apply(v)).collect(),
        ),
        Layer::GlobalAvgPool => {
            let (b, c, h, w) = x.nchw();
            let inv = 1.0 / (h * w) as f64;
            let data = x
                .data
                .chunks_exact(h * w)
                .map(|plane| plane.iter().copied().sum::<T>().scale(inv))
                .collect();
            Tensor::new(vec![b, c], data)
        }
        Layer::Reshape {
            channels,
            height,
            width,
        } => {
            debug_assert_eq!(x.row_len(), channels * height * width);
            Tensor::new(
                vec![x.batch(), *channels, *height, *width],
                x.data.clone(),
            )
        }
        Layer::PixelNorm => {
            let n = x.row_len();
            let mut data = Vec::with_capacity(x.data.len());
            for row in x.data.chunks_exact(n) {
                let ms = row.iter().map(|&v| v * v).sum::<T>().scale(1.0 / n as f64);
                let inv = T::one() / (ms + T::from_f64(PIXEL_NORM_EPS)).sqrt();
                data.extend(row.iter().map(|&v| v * inv));
            }
            Tensor::new(x.dims.clone(), data)
        }
        Layer::Residual { .. } => unreachable!("handled by forward"),
    }
}

fn backward_leaf<T: Scalar>(
    layer: &Layer,
    params: &[Vec<T>],
    input: &Tensor<T>,
    grad: Tensor<T>,
    grads: &mut [Vec<T>],
) -> Tensor<T> {
    match layer {
        Layer::Conv2d(spec) => conv2d_backward(spec, params, input, &grad, grads),
        Layer::ConvTranspose2d(spec) => conv_transpose2d_backward(spec, params, input, &grad, grads),
        Layer::Linear {
            weight,
            bias,
            in_features,
            out_features,
        } => {
            let (b, nin, nout) = (input.batch(), *in_features, *out_features);
            let w = &params[*weight];
            let mut gx = vec![T::zero(); b * nin];
            for s in 0..b {
                let xs = &input.data[s * nin..(s + 1) * nin];
                let gxs = &mut gx[s * nin..(s + 1) * nin];
                for o in 0..nout {
                    let go = grad.data[s * nout + o];
                    if let Some(bi) = bias {
                        grads[*bi][o] += go;
                    }
                    let wrow = &w[o * nin..(o + 1) * nin];
                    let gwrow = &mut grads[*weight][o * nin..(o + 1) * nin];
                    for i in 0..nin {
                        gwrow[i] += go * xs[i];
                        gxs[i] += go * wrow[i];
                    }
                }
            }
            Tensor::new(input.dims.clone(), gx)
        }
        Layer::Act(act) => Tensor::new(
            input.dims.clone(),
            input
                .data
                .iter()
                .zip(&grad.data)
                .map(|(&x, &g)| g * act.derivative(x))
                .collect(),
        ),
        Layer::GlobalAvgPool => {
            let (_, _, h, w) = input.nchw();
            let inv = 1.0 / (h * w) as f64;
            let mut gx = Vec::with_capacity(input.data.len());
            for &g in &grad.data {
                let v = g.scale(inv);
                gx.extend(std::iter::repeat_n(v, h * w));
            }
            Tensor::new(input.dims.clone(), gx)
        }
        Layer::Reshape { .. } => Tensor::new(input.dims.clone(), grad.data),
        Layer::PixelNorm => {
            let n = input.row_len();
            let mut gx = Vec::with_capacity(input.data.len());
            for (row, grow) in input.data.chunks_exact(n).zip(grad.data.chunks_exact(n)) {
                let ms = row.iter().map(|&v| v * v).sum::<T>().scale(1.0 / n as f64);
                let r = (ms + T::from_f64(PIXEL_NORM_EPS)).sqrt();
                let inv = T::one() / r;
                let dot: T = row.iter().zip(grow).map(|(&x, &g)| x * g).sum();
                let coef = dot * inv * inv * inv * T::from_f64(1.0 / n as f64);
                gx.extend(row.iter().zip(grow).map(|(&x, &g)| g * inv - x * coef));
            }
            Tensor::new(input.dims.clone(), gx)
        }
        Layer::Residual { .. } => unreachable!("handled by backward"),
    }
}

fn conv2d<T: Scalar>(spec: &ConvSpec, params: &[Vec<T>], x: &Tensor<T>) -> Tensor<T> {
    let (b, ci, h, w) = x.nchw();
    debug_assert_eq!(ci, spec.in_channels);
    let (co, k, s, p) = (spec.out_channels, spec.kernel, spec.stride, spec.padding);
    let (oh, ow) = (spec.conv_out(h), spec.conv_out(w));
    let wt = &params[spec.weight];
    let mut y = vec![T::zero(); b * co * oh * ow];
    for n in 0..b {
        for o in 0..co {
            let b0 = spec.bias.map_or(T::zero(), |bi| params[bi][o]);
            let out = &mut y[(n * co + o) * oh * ow..(n * co + o + 1) * oh * ow];
            out.fill(b0);
            for c in 0..ci {
                let plane = &x.data[(n * ci + c) * h * w..(n * ci + c + 1) * h * w];
                let kern = &wt[(o * ci + c) * k * k..(o * ci + c + 1) * k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = kern[ky * k + kx];
                        for yy in 0..oh {
                            let iy = (yy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                            for xx in 0..ow {
                                let ix = (xx * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    out[yy * ow + xx] += wv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, co, oh, ow], y)
}

fn conv2d_backward<T: Scalar>(
    spec: &ConvSpec,
    params: &[Vec<T>],
    x: &Tensor<T>,
    grad: &Tensor<T>,
    grads: &mut [Vec<T>],
) -> Tensor<T> {
    let (b, ci, h, w) = x.nchw();
    let (co, k, s, p) = (spec.out_channels, spec.kernel, spec.stride, spec.padding);
    let (oh, ow) = (grad.dims[2], grad.dims[3]);
    let wt = &params[spec.weight];
    let mut gx = vec![T::zero(); x.data.len()];
    let mut gw = vec![T::zero(); wt.len()];
    for n in 0..b {
        for o in 0..co {
            let gout = &grad.data[(n * co + o) * oh * ow..(n * co + o + 1) * oh * ow];
            if let Some(bi) = spec.bias {
                grads[bi][o] += gout.iter().copied().sum::<T>();
            }
            for c in 0..ci {
                let base = (n * ci + c) * h * w;
                let plane = &x.data[base..base + h * w];
                let kidx = (o * ci + c) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wt[kidx + ky * k + kx];
                        let mut acc = T::zero();
                        for yy in 0..oh {
                            let iy = (yy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            for xx in 0..ow {
                                let ix = (xx * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    let g = gout[yy * ow + xx];
                                    acc += g * plane[iy * w + ix as usize];
                                    gx[base + iy * w + ix as usize] += g * wv;
                                }
                            }
                        }
                        gw[kidx + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    for (a, g) in grads[spec.weight].iter_mut().zip(gw) {
        *a += g;
    }
    Tensor::new(x.dims.clone(), gx)
}

fn conv_transpose2d<T: Scalar>(spec: &ConvSpec, params: &[Vec<T>], x: &Tensor<T>) -> Tensor<T> {
    let (b, ci, h, w) = x.nchw();
    debug_assert_eq!(ci, spec.in_channels);
    let (co, k, s, p) = (spec.out_channels, spec.kernel, spec.stride, spec.padding);
    let (oh, ow) = (spec.transpose_out(h), spec.transpose_out(w));
    let wt = &params[spec.weight];
    let mut y = vec![T::zero(); b * co * oh * ow];
    for n in 0..b {
        if let Some(bi) = spec.bias {
            for o in 0..co {
                y[(n * co + o) * oh * ow..(n * co + o + 1) * oh * ow].fill(params[bi][o]);
            }
        }
        for c in 0..ci {
            let plane = &x.data[(n * ci + c) * h * w..(n * ci + c + 1) * h * w];
            for o in 0..co {
                let kern = &wt[(c * co + o) * k * k..(c * co + o + 1) * k * k];
                let out = &mut y[(n * co + o) * oh * ow..(n * co + o + 1) * oh * ow];
                for iy in 0..h {
                    for ix in 0..w {
                        let xv = plane[iy * w + ix];
                        for ky in 0..k {
                            let yy = (iy * s + ky) as isize - p as isize;
                            if yy < 0 || yy >= oh as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let xx = (ix * s + kx) as isize - p as isize;
                                if xx >= 0 && xx < ow as isize {
                                    out[yy as usize * ow + xx as usize] += xv * kern[ky * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, co, oh, ow], y)
}

fn conv_transpose2d_backward<T: Scalar>(
    spec: &ConvSpec,
    params: &[Vec<T>],
    x: &Tensor<T>,
    grad: &Tensor<T>,
    grads: &mut [Vec<T>],
) -> Tensor<T> {
    let (b, ci, h, w) = x.nchw();
    let (co, k, s, p) = (spec.out_channels, spec.kernel, spec.stride, spec.padding);
    let (oh, ow) = (grad.dims[2], grad.dims[3]);
    let wt = &params[spec.weight];
    let mut gx = vec![T::zero(); x.data.len()];
    let mut gw = vec![T::zero(); wt.len()];
    for n in 0..b {
        if let Some(bi) = spec.bias {
            for o in 0..co {
                grads[bi][o] += grad.data[(n * co + o) * oh * ow..(n * co + o + 1) * oh * ow]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
        for c in 0..ci {
            let base = (n * ci + c) * h * w;
            for o in 0..co {
                let kidx = (c * co + o) * k * k;
                let gout = &grad.data[(n * co + o) * oh * ow..(n * co + o + 1) * oh * ow];
                for iy in 0..h {
                    for ix in 0..w {
                        let xv = x.data[base + iy * w + ix];
                        let mut acc = T::zero();
                        for ky in 0..k {
                            let yy = (iy * s + ky) as isize - p as isize;
                            if yy < 0 || yy >= oh as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let xx = (ix * s + kx) as isize - p as isize;
                                if xx >= 0 && xx < ow as isize {
                                    let g = gout[yy as usize * ow + xx as usize];
                                    acc += g * wt[kidx + ky * k + kx];
                                    gw[kidx + ky * k + kx] += g * xv;
                                }
                            }
                        }
                        gx[base + iy * w + ix] += acc;
                    }
                }
            }
        }
    }
    for (a, g) in grads[spec.weight].iter_mut().zip(gw) {
        *a += g;
    }
    Tensor::new(x.dims.clone(), gx)
}

/// Number of scalar parameters a layer list touches, by slot.
pub fn collect_param_slots(layers: &[Layer], out: &mut Vec<usize>) {
    for layer in layers {
        match layer {
            Layer::Conv2d(s) | Layer::ConvTranspose2d(s) => {
                out.push(s.weight);
                out.extend(s.bias);
            }
            Layer::Linear { weight, bias, .. } => {
                out.push(*weight);
                out.extend(*bias);
            }
            Layer::Residual { body, shortcut } => {
                collect_param_slots(body, out);
                collect_param_slots(shortcut, out);
            }
            _ => {}
        }
    }
}
