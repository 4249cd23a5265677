//! Minimal convolutional building blocks with hand-written backprop.
//!
//! Activations inside the network are stored channel-major, `[C, B, H, W]`,
//! so a convolution over a whole batch is a single GEMM between the weight
//! matrix and an im2col buffer of shape `[C*k*k, B*Ho*Wo]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense 4-D tensor with explicit dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(format!(
                "tensor dims {dims:?} do not match {} elements",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Swaps the first two axes: `[A, B, H, W] -> [B, A, H, W]`.
    pub fn swap_leading(&self) -> Self {
        let [a, b, h, w] = self.dims;
        let plane = h * w;
        let mut out = vec![T::zero(); self.data.len()];
        for i in 0..a {
            for j in 0..b {
                let src = (i * b + j) * plane;
                let dst = (j * a + i) * plane;
                out[dst..dst + plane].copy_from_slice(&self.data[src..src + plane]);
            }
        }
        Self {
            dims: [b, a, h, w],
            data: out,
        }
    }

    /// Concatenates along axis 0.
    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let [_, c, h, w] = first.dims;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.dims[1..] != [c, h, w] {
                return Err(Error::invalid("concat: mismatched trailing dims"));
            }
            n += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            dims: [n, c, h, w],
            data,
        })
    }
}

/// Output extent of a strided convolution.
pub fn conv_out(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Pointwise nonlinearity applied after a convolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    /// Leaky ReLU with the given negative slope.
    Leaky(f64),
}

impl Activation {
    fn apply<T: Scalar>(self, v: &mut [T]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(T::zero())),
            Activation::Leaky(a) => {
                let a = T::of(a);
                v.iter_mut().for_each(|x| {
                    if *x < T::zero() {
                        *x = *x * a
                    }
                })
            }
        }
    }

    /// Multiplies `grad` by the derivative, using the activation output.
    fn backprop<T: Scalar>(self, out: &[T], grad: &mut [T]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => grad.iter_mut().zip(out).for_each(|(g, y)| {
                if *y <= T::zero() {
                    *g = T::zero()
                }
            }),
            Activation::Leaky(a) => {
                let a = T::of(a);
                grad.iter_mut().zip(out).for_each(|(g, y)| {
                    if *y < T::zero() {
                        *g = *g * a
                    }
                })
            }
        }
    }
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct LayerCache<T> {
    pub input_dims: [usize; 4],
    /// im2col buffer (or a copy of the input for pointwise layers).
    pub cols: Vec<T>,
    /// Post-activation output.
    pub output: Vec<T>,
}

/// A differentiable layer on channel-major activations.
///
/// Parameters are exposed as flat slices in a fixed order; gradients are
/// accumulated into buffers of the same shapes.
pub trait Layer<T: Scalar>: Send + Sync {
    /// `[C, H, W]` of the output for a `[C, H, W]` input.
    fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]>;

    fn forward(&self, x: &Tensor4<T>, cache: Option<&mut LayerCache<T>>) -> Tensor4<T>;

    /// Accumulates parameter gradients and returns the input gradient when asked.
    fn backward(
        &self,
        cache: &LayerCache<T>,
        dy: Tensor4<T>,
        grads: &mut [Vec<T>],
        need_dx: bool,
    ) -> Option<Tensor4<T>>;

    fn params(&self) -> Vec<&[T]>;

    fn params_mut(&mut self) -> Vec<&mut [T]>;
}

/// Square-kernel 2-D convolution followed by a pointwise activation.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub activation: Activation,
    /// `[out, in * k * k]` row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        activation: Activation,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            activation,
            weight: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Draws weights from `N(0, std^2)`; biases are zeroed.
    pub fn init_normal<R: Rng>(&mut self, std: f64, rng: &mut R) {
        let normal = Normal::new(0.0, std).expect("finite std");
        for w in self.weight.iter_mut() {
            *w = T::of(normal.sample(rng));
        }
        self.bias.iter_mut().for_each(|b| *b = T::zero());
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &Tensor4<T>, ho: usize, wo: usize) -> Vec<T> {
        let [c, b, h, w] = x.dims();
        let k = self.kernel;
        let l = b * ho * wo;
        let mut cols = vec![T::zero(); c * k * k * l];
        let src = x.data();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for bi in 0..b {
                        let plane = &src[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                            let out = &mut dst[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                            for (ox, o) in out.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *o = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], dims: [usize; 4], ho: usize, wo: usize) -> Tensor4<T> {
        let [c, b, h, w] = dims;
        let k = self.kernel;
        let l = b * ho * wo;
        let mut out = Tensor4::zeros(dims);
        let dst = out.data_mut();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * l..(row + 1) * l];
                    for bi in 0..b {
                        let plane = &mut dst[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                            let g = &src[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                            for (ox, gv) in g.iter().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    in_row[ix as usize] = in_row[ix as usize] + *gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = input;
        if c != self.in_channels {
            return Err(Error::invalid(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        if h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
            return Err(Error::invalid("conv input smaller than kernel"));
        }
        Ok([
            self.out_channels,
            conv_out(h, self.kernel, self.stride, self.pad),
            conv_out(w, self.kernel, self.stride, self.pad),
        ])
    }

    fn forward(&self, x: &Tensor4<T>, cache: Option<&mut LayerCache<T>>) -> Tensor4<T> {
        let [c, b, h, w] = x.dims();
        debug_assert_eq!(c, self.in_channels);
        let ho = conv_out(h, self.kernel, self.stride, self.pad);
        let wo = conv_out(w, self.kernel, self.stride, self.pad);
        let l = b * ho * wo;
        let cols = if self.is_pointwise() {
            x.data().to_vec()
        } else {
            self.im2col(x, ho, wo)
        };
        let mut out = vec![T::zero(); self.out_channels * l];
        for (o, bias) in self.bias.iter().enumerate() {
            out[o * l..(o + 1) * l].iter_mut().for_each(|v| *v = *bias);
        }
        T::gemm(
            self.out_channels,
            self.fan_in(),
            l,
            T::one(),
            &self.weight,
            false,
            &cols,
            false,
            T::one(),
            &mut out,
        );
        self.activation.apply(&mut out);
        if let Some(cache) = cache {
            cache.input_dims = x.dims();
            cache.cols = cols;
            cache.output = out.clone();
        }
        Tensor4 {
            dims: [self.out_channels, b, ho, wo],
            data: out,
        }
    }

    fn backward(
        &self,
        cache: &LayerCache<T>,
        dy: Tensor4<T>,
        grads: &mut [Vec<T>],
        need_dx: bool,
    ) -> Option<Tensor4<T>> {
        let [_, b, ho, wo] = dy.dims();
        let l = b * ho * wo;
        let mut dy = dy.into_vec();
        self.activation.backprop(&cache.output, &mut dy);
        let k = self.fan_in();
        let (gw, rest) = grads.split_at_mut(1);
        // dW += dY * cols^T
        T::gemm(
            self.out_channels,
            l,
            k,
            T::one(),
            &dy,
            false,
            &cache.cols,
            true,
            T::one(),
            &mut gw[0],
        );
        for (o, gb) in rest[0].iter_mut().enumerate() {
            *gb = *gb + dy[o * l..(o + 1) * l].iter().copied().sum::<T>();
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); k * l];
        T::gemm(
            k,
            self.out_channels,
            l,
            T::one(),
            &self.weight,
            true,
            &dy,
            false,
            T::zero(),
            &mut dcols,
        );
        if self.is_pointwise() {
            return Some(Tensor4 {
                dims: cache.input_dims,
                data: dcols,
            });
        }
        Some(self.col2im(&dcols, cache.input_dims, ho, wo))
    }

    fn params(&self) -> Vec<&[T]> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        vec![&mut self.weight, &mut self.bias]
    }
}
