//! Minimal layer library with explicit forward/backward passes.
//!
//! Layers cache what their backward pass needs during `forward` and accumulate
//! parameter gradients into [`Param::grad`] during `backward`. All layers are
//! generic over [`Real`] so the same code runs in `f32` for training and in
//! `f64` for finite-difference checks.

use ndarray::{linalg::general_mat_mul, Array1, Array2, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
    fn f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite cast")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    /// Frozen parameters are skipped by the optimizer (no update, no decay).
    pub frozen: bool,
}

impl<T: Real> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            value,
            grad,
            frozen: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

pub type ParamVisitor<'a, T> = dyn FnMut(&str, &mut Param<T>) + 'a;
pub type BufferVisitor<'a, T> = dyn FnMut(&str, &mut ArrayD<T>) + 'a;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn contiguous<T: Real>(x: &Array4<T>) -> std::borrow::Cow<'_, [T]> {
    match x.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().copied().collect()),
    }
}

/// 2-D convolution over NCHW tensors, lowered to a single GEMM per call.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<ConvCache<T>>,
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    cols: Array2<T>,
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl<T: Real> Conv2d<T> {
    /// Kaiming-normal (fan-out) initialised convolution.
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_out = (out_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_out).sqrt()).expect("valid std");
        let w = ArrayD::from_shape_fn(IxDyn(&[out_ch, in_ch, kernel, kernel]), |_| {
            T::of(normal.sample(rng))
        });
        Conv2d {
            weight: Param::new(w),
            bias: bias.then(|| Param::new(ArrayD::zeros(IxDyn(&[out_ch])))),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_side(&self, side: usize) -> usize {
        (side + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, T> {
        let kk = self.in_ch * self.kernel * self.kernel;
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_ch, kk))
            .expect("conv weight is contiguous")
    }

    fn im2col(&self, x: &Array4<T>) -> (Array2<T>, usize, usize) {
        let (n, c, h, w) = x.dim();
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let ho = self.out_side(h);
        let wo = self.out_side(w);
        let hw = ho * wo;
        let xs = contiguous(x);
        let mut cols = Array2::<T>::zeros((c * k * k, n * hw));
        let out = cols.as_slice_mut().expect("fresh array");
        let row_len = n * hw;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut out[row * row_len..(row + 1) * row_len];
                    for img in 0..n {
                        let plane = &xs[(img * c + ci) * h * w..(img * c + ci + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                            let base = img * hw + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[base + ox] = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        (cols, ho, wo)
    }

    fn col2im(&self, dcols: &Array2<T>, dim: (usize, usize, usize, usize), ho: usize, wo: usize) -> Array4<T> {
        let (n, c, h, w) = dim;
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let hw = ho * wo;
        let mut dx = Array4::<T>::zeros(dim);
        let dxs = dx.as_slice_mut().expect("fresh array");
        let src = dcols.as_slice().expect("gemm output is contiguous");
        let row_len = n * hw;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let srow = &src[row * row_len..(row + 1) * row_len];
                    for img in 0..n {
                        let plane = &mut dxs[(img * c + ci) * h * w..(img * c + ci + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = img * hw + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    plane[iy as usize * w + ix as usize] += srow[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (cols, ho, wo) = self.im2col(x);
        let hw = ho * wo;
        let mut y = Array2::<T>::zeros((self.out_ch, n * hw));
        general_mat_mul(T::one(), &self.weight_matrix(), &cols, T::zero(), &mut y);
        let mut out = Array4::<T>::zeros((n, self.out_ch, ho, wo));
        {
            let ys = y.as_slice().expect("contiguous");
            let os = out.as_slice_mut().expect("contiguous");
            for o in 0..self.out_ch {
                let b = self.bias.as_ref().map_or(T::zero(), |b| b.value[[o]]);
                for img in 0..n {
                    let dst = &mut os[(img * self.out_ch + o) * hw..(img * self.out_ch + o + 1) * hw];
                    let src = &ys[o * n * hw + img * hw..o * n * hw + (img + 1) * hw];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = *s + b;
                    }
                }
            }
        }
        self.cache = train.then_some(ConvCache {
            cols,
            in_dim: (n, c, h, w),
            out_hw: (ho, wo),
        });
        out
    }

    pub fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let cache = self.cache.take().expect("conv backward without forward");
        let (ho, wo) = cache.out_hw;
        let n = cache.in_dim.0;
        let hw = ho * wo;
        let gs = contiguous(grad);
        let mut gy = Array2::<T>::zeros((self.out_ch, n * hw));
        {
            let dst = gy.as_slice_mut().expect("contiguous");
            for o in 0..self.out_ch {
                for img in 0..n {
                    let src = &gs[(img * self.out_ch + o) * hw..(img * self.out_ch + o + 1) * hw];
                    dst[o * n * hw + img * hw..o * n * hw + (img + 1) * hw].copy_from_slice(src);
                }
            }
        }
        if let Some(b) = self.bias.as_mut() {
            let db = gy.sum_axis(Axis(1));
            for (g, d) in b.grad.iter_mut().zip(db.iter()) {
                *g += *d;
            }
        }
        let kk = self.in_ch * self.kernel * self.kernel;
        {
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((self.out_ch, kk))
                .expect("contiguous");
            general_mat_mul(T::one(), &gy, &cache.cols.t(), T::one(), &mut gw);
        }
        let mut dcols = Array2::<T>::zeros((kk, n * hw));
        general_mat_mul(T::one(), &self.weight_matrix().t(), &gy, T::zero(), &mut dcols);
        self.col2im(&dcols, cache.in_dim, ho, wo)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), b);
        }
    }

    pub fn cached_bytes(&self) -> usize {
        self.cache
            .as_ref()
            .map_or(0, |c| c.cols.len() * std::mem::size_of::<T>())
    }
}

/// Batch normalisation over the channel axis of NCHW tensors.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: ArrayD<T>,
    pub running_var: ArrayD<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
    train: bool,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(ch: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(ArrayD::ones(IxDyn(&[ch]))),
            beta: Param::new(ArrayD::zeros(IxDyn(&[ch]))),
            running_mean: ArrayD::zeros(IxDyn(&[ch])),
            running_var: ArrayD::ones(IxDyn(&[ch])),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    /// `train` selects batch statistics (and updates running statistics);
    /// `keep` retains the activations needed by `backward`.
    pub fn forward(&mut self, x: &Array4<T>, train: bool, keep: bool) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let xs = contiguous(x);
        let hw = h * w;
        let mut mean = Array1::<T>::zeros(c);
        let mut inv_std = Array1::<T>::zeros(c);
        for ch in 0..c {
            let (mu, var) = if train {
                let mut sum = 0.0f64;
                for img in 0..n {
                    for v in &xs[(img * c + ch) * hw..(img * c + ch + 1) * hw] {
                        sum += v.f64();
                    }
                }
                let mu = sum / count;
                let mut sq = 0.0f64;
                for img in 0..n {
                    for v in &xs[(img * c + ch) * hw..(img * c + ch + 1) * hw] {
                        let d = v.f64() - mu;
                        sq += d * d;
                    }
                }
                let var = sq / count;
                let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
                let mom = self.momentum;
                let rm = self.running_mean[[ch]].f64();
                let rv = self.running_var[[ch]].f64();
                self.running_mean[[ch]] = T::of((1.0 - mom) * rm + mom * mu);
                self.running_var[[ch]] = T::of((1.0 - mom) * rv + mom * unbiased);
                (mu, var)
            } else {
                (self.running_mean[[ch]].f64(), self.running_var[[ch]].f64())
            };
            mean[ch] = T::of(mu);
            inv_std[ch] = T::of(1.0 / (var + self.eps).sqrt());
        }
        let mut xhat = Array4::<T>::zeros((n, c, h, w));
        let mut y = Array4::<T>::zeros((n, c, h, w));
        {
            let xh = xhat.as_slice_mut().expect("contiguous");
            let ys = y.as_slice_mut().expect("contiguous");
            for img in 0..n {
                for ch in 0..c {
                    let g = self.gamma.value[[ch]];
                    let b = self.beta.value[[ch]];
                    let (mu, is) = (mean[ch], inv_std[ch]);
                    let r = (img * c + ch) * hw..(img * c + ch + 1) * hw;
                    for ((o, hv), v) in ys[r.clone()].iter_mut().zip(&mut xh[r.clone()]).zip(&xs[r]) {
                        *hv = (*v - mu) * is;
                        *o = g * *hv + b;
                    }
                }
            }
        }
        self.cache = keep.then_some(BnCache { xhat, inv_std, train });
        y
    }

    pub fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let cache = self.cache.take().expect("bn backward without forward");
        let (n, c, h, w) = grad.dim();
        let hw = h * w;
        let m = T::of((n * hw) as f64);
        let gs = contiguous(grad);
        let xh = cache.xhat.as_slice().expect("contiguous");
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        let dxs = dx.as_slice_mut().expect("contiguous");
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for img in 0..n {
                let r = (img * c + ch) * hw..(img * c + ch + 1) * hw;
                for (g, x) in gs[r.clone()].iter().zip(&xh[r]) {
                    sum_dy += *g;
                    sum_dy_xhat += *g * *x;
                }
            }
            self.gamma.grad[[ch]] += sum_dy_xhat;
            self.beta.grad[[ch]] += sum_dy;
            let scale = self.gamma.value[[ch]] * cache.inv_std[ch];
            for img in 0..n {
                let r = (img * c + ch) * hw..(img * c + ch + 1) * hw;
                for ((d, g), x) in dxs[r.clone()].iter_mut().zip(&gs[r.clone()]).zip(&xh[r]) {
                    *d = if cache.train {
                        scale * (*g - sum_dy / m - *x * sum_dy_xhat / m)
                    } else {
                        scale * *g
                    };
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut BufferVisitor<'_, T>) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }

    pub fn cached_bytes(&self) -> usize {
        self.cache
            .as_ref()
            .map_or(0, |c| c.xhat.len() * std::mem::size_of::<T>())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward<T: Real, D: ndarray::Dimension>(
        &mut self,
        x: &ndarray::Array<T, D>,
        keep: bool,
    ) -> ndarray::Array<T, D> {
        let y = x.mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.mask = keep.then(|| x.iter().map(|v| *v > T::zero()).collect());
        y
    }

    pub fn backward<T: Real, D: ndarray::Dimension>(
        &mut self,
        grad: &ndarray::Array<T, D>,
    ) -> ndarray::Array<T, D> {
        let mask = self.mask.take().expect("relu backward without forward");
        let mut out = grad.as_standard_layout().into_owned();
        for (g, keep) in out.iter_mut().zip(mask) {
            if !keep {
                *g = T::zero();
            }
        }
        out
    }

    pub fn cached_bytes(&self) -> usize {
        self.mask.as_ref().map_or(0, Vec::len)
    }
}

/// Fully connected layer: `y = x·Wᵀ + b`, with `W` stored as `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_dim: usize,
    pub out_dim: usize,
    input: Option<Array2<T>>,
}

impl<T: Real> Linear<T> {
    /// Uniform `±1/sqrt(in)` initialisation for weight and bias.
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        let w = ArrayD::from_shape_fn(IxDyn(&[out_dim, in_dim]), |_| T::of(dist.sample(rng)));
        let b = ArrayD::from_shape_fn(IxDyn(&[out_dim]), |_| T::of(dist.sample(rng)));
        Linear {
            weight: Param::new(w),
            bias: Param::new(b),
            in_dim,
            out_dim,
            input: None,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Param::new(ArrayD::zeros(IxDyn(&[out_dim, in_dim]))),
            bias: Param::new(ArrayD::zeros(IxDyn(&[out_dim]))),
            in_dim,
            out_dim,
            input: None,
        }
    }

    fn w(&self) -> ndarray::ArrayView2<'_, T> {
        self.weight
            .value
            .view()
            .into_dimensionality()
            .expect("linear weight is 2-D")
    }

    pub fn forward(&mut self, x: &Array2<T>, keep: bool) -> Array2<T> {
        assert_eq!(x.ncols(), self.in_dim, "linear input width");
        let mut y = Array2::<T>::zeros((x.nrows(), self.out_dim));
        general_mat_mul(T::one(), x, &self.w().t(), T::zero(), &mut y);
        let b = self
            .bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("bias is 1-D");
        y += &b;
        self.input = keep.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, grad: &Array2<T>) -> Array2<T> {
        let x = self.input.take().expect("linear backward without forward");
        {
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("2-D");
            general_mat_mul(T::one(), &grad.t(), &x, T::one(), &mut gw);
        }
        let db = grad.sum_axis(Axis(0));
        for (g, d) in self.bias.grad.iter_mut().zip(db.iter()) {
            *g += *d;
        }
        grad.dot(&self.w())
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    pub fn cached_bytes(&self) -> usize {
        self.input
            .as_ref()
            .map_or(0, |x| x.len() * std::mem::size_of::<T>())
    }
}

/// Global average pooling `(n, c, h, w) -> (n, c)`.
pub fn global_avg_pool<T: Real>(x: &Array4<T>) -> Array2<T> {
    let (_, _, h, w) = x.dim();
    let scale = T::of(1.0 / (h * w) as f64);
    x.sum_axis(Axis(3)).sum_axis(Axis(2)) * scale
}

pub fn global_avg_pool_backward<T: Real>(grad: &Array2<T>, h: usize, w: usize) -> Array4<T> {
    let (n, c) = grad.dim();
    let scale = T::of(1.0 / (h * w) as f64);
    Array4::from_shape_fn((n, c, h, w), |(i, j, _, _)| grad[[i, j]] * scale)
}

/// Row-stochastic 1-D bilinear resampling matrix `(out_len, in_len)` using
/// half-pixel centres: output sample `d` reads input coordinate
/// `(d + 0.5)·in/out − 0.5`, clamped to the valid range.
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Array2<f64> {
    let mut a = Array2::<f64>::zeros((out_len, in_len));
    let scale = in_len as f64 / out_len as f64;
    for d in 0..out_len {
        let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        let t = src - lo as f64;
        a[[d, lo]] += 1.0 - t;
        a[[d, hi]] += t;
    }
    a
}

/// 1-D average pooling matrix `(in_len / k, in_len)` with kernel = stride = `k`.
pub fn avg_pool_matrix(in_len: usize, k: usize) -> Array2<f64> {
    assert!(k > 0 && in_len.is_multiple_of(k), "pool kernel must tile the input");
    let out = in_len / k;
    let mut p = Array2::<f64>::zeros((out, in_len));
    for o in 0..out {
        for i in 0..k {
            p[[o, o * k + i]] = 1.0 / k as f64;
        }
    }
    p
}

/// Applies a separable linear map `A·X·Aᵀ` to every `(h, w)` plane.
pub fn separable_apply<T: Real>(x: &Array4<T>, rows: &Array2<T>, cols: &Array2<T>) -> Array4<T> {
    let (n, c, _, _) = x.dim();
    let (ho, wo) = (rows.nrows(), cols.nrows());
    let mut out = Array4::<T>::zeros((n, c, ho, wo));
    for i in 0..n {
        for j in 0..c {
            let plane = x.slice(ndarray::s![i, j, .., ..]);
            let r = rows.dot(&plane).dot(&cols.t());
            out.slice_mut(ndarray::s![i, j, .., ..]).assign(&r);
        }
    }
    out
}

pub fn cast_matrix<T: Real>(a: &Array2<f64>) -> Array2<T> {
    a.mapv(T::of)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn conv_naive(x: &Array4<f64>, conv: &Conv2d<f64>) -> Array4<f64> {
        let (n, _, h, w) = x.dim();
        let (ho, wo) = (conv.out_side(h), conv.out_side(w));
        let mut y = Array4::zeros((n, conv.out_ch, ho, wo));
        for img in 0..n {
            for o in 0..conv.out_ch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[[o]]);
                        for c in 0..conv.in_ch {
                            for ky in 0..conv.kernel {
                                for kx in 0..conv.kernel {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += conv.weight.value[[o, c, ky, kx]]
                                            * x[[img, c, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        y[[img, o, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut r = rng::stream(1, "t", &[]);
        let x = Array4::from_shape_fn((2, 3, 7, 6), |_| r.random_range(-1.0..1.0));
        for stride in [1, 2] {
            let mut conv = Conv2d::<f64>::new(3, 4, 3, stride, 1, true, &mut r);
            conv.bias.as_mut().unwrap().value.fill(0.25);
            let fast = conv.forward(&x, false);
            let slow = conv_naive(&x, &conv);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut r = rng::stream(2, "t", &[]);
        let x = Array4::from_shape_fn((2, 2, 5, 5), |_| r.random_range(-1.0..1.0));
        let g = Array4::from_shape_fn((2, 3, 3, 3), |_| r.random_range(-1.0..1.0));
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, true, &mut r);
        conv.forward(&x, true);
        let dx = conv.backward(&g);
        let objective = |conv: &mut Conv2d<f64>, x: &Array4<f64>| (conv.forward(x, false) * &g).sum();
        let eps = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 1, 2, 3], [0, 1, 4, 4]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (objective(&mut conv, &xp) - objective(&mut conv, &xm)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-6, "dx {idx:?}: {fd} vs {}", dx[idx]);
        }
        let analytic = conv.weight.grad.clone();
        for idx in [[0usize, 0, 0, 0], [2, 1, 1, 2]] {
            let idx = IxDyn(&idx);
            let orig = conv.weight.value[&idx];
            conv.weight.value[&idx] = orig + eps;
            let fp = objective(&mut conv, &x);
            conv.weight.value[&idx] = orig - eps;
            let fm = objective(&mut conv, &x);
            conv.weight.value[&idx] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - analytic[&idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut r = rng::stream(3, "t", &[]);
        let x = Array4::from_shape_fn((3, 2, 2, 2), |_| r.random_range(-1.0..1.0));
        let g = Array4::from_shape_fn((3, 2, 2, 2), |_| r.random_range(-1.0..1.0));
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma.value[[1]] = 1.7;
        bn.forward(&x, true, true);
        let dx = bn.backward(&g);
        let eps = 1e-6;
        let f = |x: &Array4<f64>| {
            let mut probe = bn.clone();
            (probe.forward(x, true, false) * &g).sum()
        };
        for idx in [[0, 0, 0, 0], [2, 1, 1, 0]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-6, "{fd} vs {}", dx[idx]);
        }
    }

    #[test]
    fn bilinear_rows_are_stochastic_and_identity_when_same_size() {
        let a = bilinear_matrix(7, 8);
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-15);
        }
        assert_eq!(bilinear_matrix(5, 5), Array2::<f64>::eye(5));
    }
}
