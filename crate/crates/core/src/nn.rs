//! Minimal differentiable building blocks: dense and 2-D convolution layers
//! with explicit backward passes, generic over the float width so the same
//! code trains in `f32` and is gradient-checked in `f64`.
//!
//! Activations use `[batch, channels, height, width]` layout. Convolutions use
//! "same" padding (`out = ceil(in / stride)`, extra padding on the bottom and
//! right when the total is odd) and are lowered to a single matrix product
//! over an im2col buffer.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + LinalgScalar
        + ScalarOperand
        + AddAssign
        + SubAssign
        + MulAssign
        + Sum
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}

#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

/// Borrowed view of one named parameter array.
pub struct ParamRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct ParamMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

/// Anything that owns named parameter arrays in a fixed order.
pub trait Parameterized<T> {
    fn params(&self) -> Vec<ParamRef<'_, T>>;
    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }
}

pub(crate) fn prefix_refs<'a, T>(prefix: &str, refs: Vec<ParamRef<'a, T>>) -> Vec<ParamRef<'a, T>> {
    refs.into_iter()
        .map(|mut p| {
            p.name = format!("{prefix}.{}", p.name);
            p
        })
        .collect()
}

pub(crate) fn prefix_muts<'a, T>(prefix: &str, refs: Vec<ParamMut<'a, T>>) -> Vec<ParamMut<'a, T>> {
    refs.into_iter()
        .map(|mut p| {
            p.name = format!("{prefix}.{}", p.name);
            p
        })
        .collect()
}

/// Weight initialisation scale, by what follows the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform with bound `sqrt(6 / fan_in)`, for layers followed by ReLU.
    Relu,
    /// Uniform with bound `sqrt(3 / fan_in)`, for linear outputs.
    Linear,
}

fn init_weights<T: Real, R: Rng + ?Sized>(len: usize, fan_in: usize, init: Init, rng: &mut R) -> Vec<T> {
    let gain = match init {
        Init::Relu => 6.0,
        Init::Linear => 3.0,
    };
    let bound = (gain / fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..len).map(|_| real(dist.sample(rng))).collect()
}

// ---------------------------------------------------------------------------
// Dense

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `[out, in]`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Dense<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, init: Init, rng: &mut R) -> Self {
        let w = init_weights(inputs * outputs, inputs, init, rng);
        Dense {
            weight: Array2::from_shape_vec((outputs, inputs), w).expect("shape"),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Dense<U> {
        Dense {
            weight: self.weight.mapv(&f),
            bias: self.bias.mapv(&f),
        }
    }

    /// `x: [n, in]` -> `[n, out]`
    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Dense<T>) -> Array2<T> {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

impl<T: Real> Parameterized<T> for Dense<T> {
    fn params(&self) -> Vec<ParamRef<'_, T>> {
        vec![
            ParamRef {
                name: "weight".into(),
                shape: self.weight.shape().to_vec(),
                data: self.weight.as_slice().expect("standard layout"),
            },
            ParamRef {
                name: "bias".into(),
                shape: self.bias.shape().to_vec(),
                data: self.bias.as_slice().expect("standard layout"),
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let ws = self.weight.shape().to_vec();
        let bs = self.bias.shape().to_vec();
        vec![
            ParamMut {
                name: "weight".into(),
                shape: ws,
                data: self.weight.as_slice_mut().expect("standard layout"),
            },
            ParamMut {
                name: "bias".into(),
                shape: bs,
                data: self.bias.as_slice_mut().expect("standard layout"),
            },
        ]
    }
}

// ---------------------------------------------------------------------------
// Conv2d

/// Output size and leading padding of a "same" convolution along one axis.
pub fn same_padding(size: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = size.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(size);
    (out, total / 2)
}

/// Output positions `o` in `lo..hi` whose input `o * stride + tap - pad`
/// lies inside `0..size`.
fn valid_range(tap: usize, pad: usize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    let hi = if size + pad <= tap { 0 } else { ((size + pad - tap - 1) / stride + 1).min(out) };
    (lo.min(hi), hi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `[out_channels, in_channels * kernel * kernel]`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// What a convolution keeps from its forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    input: Array4<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = init_weights(out_channels * fan_in, fan_in, init, rng);
        Conv2d {
            weight: Array2::from_shape_vec((out_channels, fan_in), w).expect("shape"),
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Conv2d<U> {
        Conv2d {
            weight: self.weight.mapv(&f),
            bias: self.bias.mapv(&f),
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            same_padding(h, self.kernel, self.stride).0,
            same_padding(w, self.kernel, self.stride).0,
        )
    }

    /// Unfolds one `[c, h, w]` image into `cols` (`[c * k * k, ho * wo]`).
    /// Padding entries of `cols` are never written, so a buffer reused for
    /// the same geometry keeps them at zero.
    fn im2col_one(&self, xs: &[T], h: usize, w: usize, cs: &mut [T]) {
        let k = self.kernel;
        let s = self.stride;
        let (ho, pad_h) = same_padding(h, k, s);
        let (wo, pad_w) = same_padding(w, k, s);
        let plane = ho * wo;
        for ci in 0..self.in_channels {
            let img = ci * h * w;
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(ky, pad_h, s, h, ho);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = valid_range(kx, pad_w, s, w, wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let base = ((ci * k + ky) * k + kx) * plane;
                    let ix_lo = ox_lo * s + kx - pad_w;
                    let len = ox_hi - ox_lo;
                    for oy in oy_lo..oy_hi {
                        let src = img + (oy * s + ky - pad_h) * w + ix_lo;
                        let dst = base + oy * wo + ox_lo;
                        if s == 1 {
                            cs[dst..dst + len].copy_from_slice(&xs[src..src + len]);
                        } else {
                            for j in 0..len {
                                cs[dst + j] = xs[src + j * s];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Conv2d::im2col_one`]: scatters `cs` and adds into `xs`.
    fn col2im_one(&self, cs: &[T], h: usize, w: usize, xs: &mut [T]) {
        let k = self.kernel;
        let s = self.stride;
        let (ho, pad_h) = same_padding(h, k, s);
        let (wo, pad_w) = same_padding(w, k, s);
        let plane = ho * wo;
        for ci in 0..self.in_channels {
            let img = ci * h * w;
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(ky, pad_h, s, h, ho);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = valid_range(kx, pad_w, s, w, wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let base = ((ci * k + ky) * k + kx) * plane;
                    let ix_lo = ox_lo * s + kx - pad_w;
                    let len = ox_hi - ox_lo;
                    for oy in oy_lo..oy_hi {
                        let dst = img + (oy * s + ky - pad_h) * w + ix_lo;
                        let src = base + oy * wo + ox_lo;
                        if s == 1 {
                            for (d, &v) in xs[dst..dst + len].iter_mut().zip(&cs[src..src + len]) {
                                *d += v;
                            }
                        } else {
                            for j in 0..len {
                                xs[dst + j * s] += cs[src + j];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, ConvCache<T>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let x = x.as_standard_layout().into_owned();
        let (ho, wo) = self.output_hw(h, w);
        let plane = ho * wo;
        let co = self.out_channels;
        let mut cols = Array2::<T>::zeros((self.weight.ncols(), plane));
        let mut y = Array4::<T>::zeros((n, co, ho, wo));
        let xs = x.as_slice().expect("standard layout");
        for (b, mut yb) in y.outer_iter_mut().enumerate() {
            let cs = cols.as_slice_mut().expect("standard layout");
            self.im2col_one(&xs[b * c * h * w..(b + 1) * c * h * w], h, w, cs);
            let mut yb = yb.view_mut().into_shape_with_order((co, plane)).expect("conv output shape");
            for (mut row, &bias) in yb.outer_iter_mut().zip(self.bias.iter()) {
                row.fill(bias);
            }
            general_mat_mul(T::one(), &self.weight, &cols, T::one(), &mut yb);
        }
        (y, ConvCache { input: x })
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, cache: &ConvCache<T>, dy: &Array4<T>, grad: &mut Conv2d<T>) -> Array4<T> {
        let (n, c, h, w) = cache.input.dim();
        let (_, co, ho, wo) = dy.dim();
        let plane = ho * wo;
        let dy = dy.as_standard_layout();
        let xs = cache.input.as_slice().expect("standard layout");
        let mut cols = Array2::<T>::zeros((self.weight.ncols(), plane));
        let mut dcols = Array2::<T>::zeros((self.weight.ncols(), plane));
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        let img = c * h * w;
        for b in 0..n {
            let dyb = dy.index_axis(Axis(0), b).into_shape_with_order((co, plane)).expect("conv grad shape");
            self.im2col_one(&xs[b * img..(b + 1) * img], h, w, cols.as_slice_mut().expect("standard layout"));
            general_mat_mul(T::one(), &dyb, &cols.t(), T::one(), &mut grad.weight);
            grad.bias += &dyb.sum_axis(Axis(1));
            general_mat_mul(T::one(), &self.weight.t(), &dyb, T::zero(), &mut dcols);
            let dxs = dx.as_slice_mut().expect("standard layout");
            self.col2im_one(dcols.as_slice().expect("standard layout"), h, w, &mut dxs[b * img..(b + 1) * img]);
        }
        dx
    }
}

impl<T: Real> Parameterized<T> for Conv2d<T> {
    fn params(&self) -> Vec<ParamRef<'_, T>> {
        vec![
            ParamRef {
                name: "weight".into(),
                shape: vec![self.out_channels, self.in_channels, self.kernel, self.kernel],
                data: self.weight.as_slice().expect("standard layout"),
            },
            ParamRef {
                name: "bias".into(),
                shape: vec![self.out_channels],
                data: self.bias.as_slice().expect("standard layout"),
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let shape = vec![self.out_channels, self.in_channels, self.kernel, self.kernel];
        let oc = self.out_channels;
        vec![
            ParamMut {
                name: "weight".into(),
                shape,
                data: self.weight.as_slice_mut().expect("standard layout"),
            },
            ParamMut {
                name: "bias".into(),
                shape: vec![oc],
                data: self.bias.as_slice_mut().expect("standard layout"),
            },
        ]
    }
}

// ---------------------------------------------------------------------------
// Stacks

pub fn relu_inplace<T: Real, D: ndarray::Dimension>(x: &mut ndarray::Array<T, D>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// `dy * 1[y > 0]`, where `y` is the ReLU output.
pub fn relu_backward<T: Real, D: ndarray::Dimension>(y: &ndarray::Array<T, D>, dy: &mut ndarray::Array<T, D>) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &v| {
        if v <= T::zero() {
            *d = T::zero();
        }
    });
}

/// Convolutions with ReLU after every layer, optionally except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack<T> {
    pub layers: Vec<Conv2d<T>>,
    pub relu_last: bool,
}

#[derive(Debug, Clone)]
pub struct ConvStackCache<T> {
    convs: Vec<ConvCache<T>>,
    /// Post-activation output of each ReLU layer.
    outputs: Vec<Array4<T>>,
}

impl<T: Real> ConvStack<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        channels: &[usize],
        strides: &[usize],
        kernel: usize,
        relu_last: bool,
        rng: &mut R,
    ) -> Self {
        assert_eq!(channels.len(), strides.len());
        let mut layers = Vec::with_capacity(channels.len());
        let mut cin = in_channels;
        for (i, (&cout, &stride)) in channels.iter().zip(strides).enumerate() {
            let last = i + 1 == channels.len();
            let init = if last && !relu_last { Init::Linear } else { Init::Relu };
            layers.push(Conv2d::new(cin, cout, kernel, stride, init, rng));
            cin = cout;
        }
        ConvStack { layers, relu_last }
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> ConvStack<U> {
        ConvStack {
            layers: self.layers.iter().map(|l| l.map(&f)).collect(),
            relu_last: self.relu_last,
        }
    }

    fn has_relu(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.relu_last
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, ConvStackCache<T>) {
        let mut convs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h: Option<Array4<T>> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let input = h.as_ref().unwrap_or(x);
            let (mut y, cache) = layer.forward(input);
            convs.push(cache);
            if self.has_relu(i) {
                relu_inplace(&mut y);
                outputs.push(y.clone());
            }
            h = Some(y);
        }
        (h.unwrap_or_else(|| x.clone()), ConvStackCache { convs, outputs })
    }

    pub fn backward(&self, cache: &ConvStackCache<T>, dy: Array4<T>, grad: &mut ConvStack<T>) -> Array4<T> {
        let mut d = dy;
        for i in (0..self.layers.len()).rev() {
            if self.has_relu(i) {
                relu_backward(&cache.outputs[i], &mut d);
            }
            d = self.layers[i].backward(&cache.convs[i], &d, &mut grad.layers[i]);
        }
        d
    }
}

impl<T: Real> Parameterized<T> for ConvStack<T> {
    fn params(&self) -> Vec<ParamRef<'_, T>> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefix_refs(&format!("conv{i}"), l.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| prefix_muts(&format!("conv{i}"), l.params_mut()))
            .collect()
    }
}

/// Dense layers with ReLU after every layer, optionally except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
    pub relu_last: bool,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    /// Input to every layer; the entry after the last is the output.
    activations: Vec<Array2<T>>,
}

impl<T: Real> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, widths: &[usize], relu_last: bool, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut cin = inputs;
        for (i, &w) in widths.iter().enumerate() {
            let last = i + 1 == widths.len();
            let init = if last && !relu_last { Init::Linear } else { Init::Relu };
            layers.push(Dense::new(cin, w, init, rng));
            cin = w;
        }
        Mlp { layers, relu_last }
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Mlp<U> {
        Mlp {
            layers: self.layers.iter().map(|l| l.map(&f)).collect(),
            relu_last: self.relu_last,
        }
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map(Dense::outputs).unwrap_or(0)
    }

    fn has_relu(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.relu_last
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, MlpCache<T>) {
        let mut activations = vec![x.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(activations.last().expect("input"));
            if self.has_relu(i) {
                relu_inplace(&mut y);
            }
            activations.push(y);
        }
        let out = activations.last().expect("output").clone();
        (out, MlpCache { activations })
    }

    pub fn backward(&self, cache: &MlpCache<T>, dy: Array2<T>, grad: &mut Mlp<T>) -> Array2<T> {
        let mut d = dy;
        for i in (0..self.layers.len()).rev() {
            if self.has_relu(i) {
                relu_backward(&cache.activations[i + 1], &mut d);
            }
            d = self.layers[i].backward(&cache.activations[i], &d, &mut grad.layers[i]);
        }
        d
    }
}

impl<T: Real> Parameterized<T> for Mlp<T> {
    fn params(&self) -> Vec<ParamRef<'_, T>> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefix_refs(&format!("dense{i}"), l.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| prefix_muts(&format!("dense{i}"), l.params_mut()))
            .collect()
    }
}

/// Copies every parameter of `src` into `dst` (matching order and sizes).
pub fn copy_params<A: Real, B: Real>(src: &impl Parameterized<A>, dst: &mut impl Parameterized<B>) {
    let src = src.params();
    let dst = dst.params_mut();
    assert_eq!(src.len(), dst.len(), "parameter count");
    for (s, d) in src.iter().zip(dst) {
        assert_eq!(s.data.len(), d.data.len(), "parameter {}", s.name);
        for (x, y) in s.data.iter().zip(d.data.iter_mut()) {
            *y = B::from(*x).expect("cast");
        }
    }
}

/// Outcome of comparing an analytic derivative with finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdCheck {
    pub analytic: f64,
    pub central: f64,
    pub forward: f64,
    pub backward: f64,
    /// `|central - analytic| / max(|central|, |analytic|)`, 0 when both vanish.
    pub rel_err: f64,
    /// The one-sided differences disagree, so the stencil straddles a kink.
    pub kink: bool,
    pub pass: bool,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Checks `analytic` against differences of `f` around 0 with step `h`.
/// Where a ReLU changes state inside `[-h, h]` the central difference is not
/// a derivative estimate; there the analytic value must instead match one of
/// the one-sided differences.
pub fn fd_check(f: impl Fn(f64) -> f64, analytic: f64, h: f64, tol: f64) -> FdCheck {
    let (plus, zero, minus) = (f(h), f(0.0), f(-h));
    let central = (plus - minus) / (2.0 * h);
    let forward = (plus - zero) / h;
    let backward = (zero - minus) / h;
    let rel = rel_err(central, analytic);
    let kink = rel_err(forward, backward) > tol;
    let pass = rel <= tol || (kink && rel_err(forward, analytic).min(rel_err(backward, analytic)) <= tol);
    FdCheck {
        analytic,
        central,
        forward,
        backward,
        rel_err: rel,
        kink,
        pass,
    }
}
