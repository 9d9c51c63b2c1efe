//! Hand-rolled CNN layers with explicit forward/backward passes.
//!
//! `forward` caches whatever the matching `backward` needs; `infer` is the
//! cache-free, `&self` path used for read-only inference.

use rand::Rng;

use super::tensor::{Shape, Tensor};

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }

    /// `U(-bound, bound)` with `bound = 1/sqrt(fan_in)`.
    pub fn uniform_fan_in(len: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        Self::new((0..len).map(|_| rng.random_range(-bound..bound)).collect())
    }

    /// He-normal style init, used where no bias follows (BN-topped convolutions).
    pub fn he_uniform(len: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in as f32).sqrt();
        Self::new((0..len).map(|_| rng.random_range(-bound..bound)).collect())
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

pub trait Layer: Send + Sync {
    /// Training-mode forward pass; caches activations for [`Layer::backward`].
    fn forward(&mut self, x: Tensor) -> Tensor;

    /// Gradient w.r.t. the input of the last `forward`, accumulating parameter gradients.
    fn backward(&mut self, grad: Tensor) -> Tensor;

    /// Forward pass without caching.
    fn infer(&self, x: Tensor) -> Tensor;

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    /// Every persisted tensor (parameters followed by buffers), in a stable order.
    fn state(&self) -> Vec<&[f32]> {
        self.params().into_iter().map(|p| p.value.as_slice()).collect()
    }

    fn state_mut(&mut self) -> Vec<&mut Vec<f32>> {
        self.params_mut().into_iter().map(|p| &mut p.value).collect()
    }

    /// Drops cached activations.
    fn clear_cache(&mut self) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Reflect,
}

/// Maps a padded coordinate back to a source coordinate (`None` = zero padding).
pub(crate) fn source_index(p: isize, len: usize, mode: Padding) -> Option<usize> {
    let n = len as isize;
    if (0..n).contains(&p) {
        return Some(p as usize);
    }
    match mode {
        Padding::Zero => None,
        Padding::Reflect => {
            if n == 1 {
                return Some(0);
            }
            let period = 2 * (n - 1);
            let mut q = p.rem_euclid(period);
            if q >= n {
                q = period - q;
            }
            Some(q as usize)
        }
    }
}

/// For each `(output position, kernel tap)` the source row/column, if any.
fn tap_map(
    in_len: usize,
    out_len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    mode: Padding,
) -> Vec<Option<usize>> {
    let mut map = Vec::with_capacity(out_len * k);
    for o in 0..out_len {
        for t in 0..k {
            let p = (o * stride + t) as isize - pad as isize;
            map.push(source_index(p, in_len, mode));
        }
    }
    map
}

fn out_len(in_len: usize, k: usize, stride: usize) -> usize {
    let pad = k / 2;
    (in_len + 2 * pad - k) / stride + 1
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c` on slices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided ranges asserted above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense 2-D convolution with "same" padding (`k / 2`), optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<ConvCache>,
}

#[derive(Clone, Debug)]
struct ConvCache {
    in_shape: Shape,
    cols: Vec<Vec<f32>>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel sizes must be odd");
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::uniform_fan_in(out_channels * fan_in, fan_in, rng);
        let bias = bias.then(|| Param::uniform_fan_in(out_channels, fan_in, rng));
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
            cache: None,
        }
    }

    /// Convolution without bias, He-initialized.
    pub fn no_bias(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut conv = Self::new(in_channels, out_channels, kernel, stride, Padding::Zero, false, rng);
        let fan_in = in_channels * kernel * kernel;
        conv.weight = Param::he_uniform(out_channels * fan_in, fan_in, rng);
        conv
    }

    fn out_shape(&self, s: Shape) -> Shape {
        Shape::new(
            s.n,
            self.out_channels,
            out_len(s.h, self.kernel, self.stride),
            out_len(s.w, self.kernel, self.stride),
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// im2col for one batch item: `[C·k·k, Hout·Wout]`.
    fn columns(&self, item: &[f32], s: Shape, o: Shape) -> Vec<f32> {
        let k = self.kernel;
        let pad = k / 2;
        let ymap = tap_map(s.h, o.h, k, self.stride, pad, self.padding);
        let xmap = tap_map(s.w, o.w, k, self.stride, pad, self.padding);
        let plane_out = o.plane();
        let mut cols = vec![0.0; s.c * k * k * plane_out];
        for ci in 0..s.c {
            let src = &item[ci * s.plane()..(ci + 1) * s.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                    for oy in 0..o.h {
                        let Some(sy) = ymap[oy * k + ky] else { continue };
                        let src_row = &src[sy * s.w..(sy + 1) * s.w];
                        let dst_row = &mut dst[oy * o.w..(oy + 1) * o.w];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            if let Some(sx) = xmap[ox * k + kx] {
                                *d = src_row[sx];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], s: Shape, o: Shape, dst: &mut [f32]) {
        let k = self.kernel;
        let pad = k / 2;
        let ymap = tap_map(s.h, o.h, k, self.stride, pad, self.padding);
        let xmap = tap_map(s.w, o.w, k, self.stride, pad, self.padding);
        let plane_out = o.plane();
        for ci in 0..s.c {
            let plane = &mut dst[ci * s.plane()..(ci + 1) * s.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * plane_out..(row + 1) * plane_out];
                    for oy in 0..o.h {
                        let Some(sy) = ymap[oy * k + ky] else { continue };
                        for ox in 0..o.w {
                            if let Some(sx) = xmap[ox * k + kx] {
                                plane[sy * s.w + sx] += src[oy * o.w + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn run(&self, x: &Tensor, mut keep: Option<&mut Vec<Vec<f32>>>) -> Tensor {
        let s = x.shape;
        assert_eq!(s.c, self.in_channels, "conv input channels");
        let o = self.out_shape(s);
        let kk = s.c * self.kernel * self.kernel;
        let per_in = s.c * s.plane();
        let per_out = o.c * o.plane();
        let mut out = Tensor::zeros(o);
        for n in 0..s.n {
            let item = &x.data[n * per_in..(n + 1) * per_in];
            let dst = &mut out.data[n * per_out..(n + 1) * per_out];
            if let Some(b) = &self.bias {
                for (c, chunk) in dst.chunks_exact_mut(o.plane()).enumerate() {
                    chunk.fill(b.value[c]);
                }
            }
            let beta = if self.bias.is_some() { 1.0 } else { 0.0 };
            if self.is_pointwise() {
                gemm(o.c, kk, o.plane(), &self.weight.value, false, item, false, dst, beta);
                if let Some(keep) = keep.as_deref_mut() {
                    keep.push(item.to_vec());
                }
            } else {
                let cols = self.columns(item, s, o);
                gemm(o.c, kk, o.plane(), &self.weight.value, false, &cols, false, dst, beta);
                if let Some(keep) = keep.as_deref_mut() {
                    keep.push(cols);
                }
            }
        }
        out
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: Tensor) -> Tensor {
        let mut cols = Vec::with_capacity(x.shape.n);
        let out = self.run(&x, Some(&mut cols));
        self.cache = Some(ConvCache {
            in_shape: x.shape,
            cols,
        });
        out
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let cache = self.cache.take().expect("conv backward without forward");
        let s = cache.in_shape;
        let o = grad.shape;
        let kk = s.c * self.kernel * self.kernel;
        let per_out = o.c * o.plane();
        let per_in = s.c * s.plane();
        let mut dx = Tensor::zeros(s);
        let mut dcols = vec![0.0; kk * o.plane()];
        for n in 0..s.n {
            let g = &grad.data[n * per_out..(n + 1) * per_out];
            let cols = &cache.cols[n];
            gemm(o.c, o.plane(), kk, g, false, cols, true, &mut self.weight.grad, 1.0);
            if let Some(b) = &mut self.bias {
                for (c, chunk) in g.chunks_exact(o.plane()).enumerate() {
                    b.grad[c] += chunk.iter().sum::<f32>();
                }
            }
            let dst = &mut dx.data[n * per_in..(n + 1) * per_in];
            if self.is_pointwise() {
                gemm(kk, o.c, o.plane(), &self.weight.value, true, g, false, dst, 0.0);
            } else {
                gemm(kk, o.c, o.plane(), &self.weight.value, true, g, false, &mut dcols, 0.0);
                self.col2im(&dcols, s, o, dst);
            }
        }
        dx
    }

    fn infer(&self, x: Tensor) -> Tensor {
        self.run(&x, None)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Per-channel 3×3 (or any odd `k`) convolution, zero padding, no bias.
#[derive(Clone, Debug)]
pub struct DepthwiseConv2d {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Param,
    cache: Option<Tensor>,
}

impl DepthwiseConv2d {
    pub fn new(channels: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel sizes must be odd");
        let fan_in = kernel * kernel;
        Self {
            channels,
            kernel,
            stride,
            weight: Param::he_uniform(channels * fan_in, fan_in, rng),
            cache: None,
        }
    }

    fn run(&self, x: &Tensor) -> Tensor {
        let s = x.shape;
        assert_eq!(s.c, self.channels, "depthwise input channels");
        let k = self.kernel;
        let pad = k / 2;
        let o = Shape::new(s.n, s.c, out_len(s.h, k, self.stride), out_len(s.w, k, self.stride));
        let ymap = tap_map(s.h, o.h, k, self.stride, pad, Padding::Zero);
        let xmap = tap_map(s.w, o.w, k, self.stride, pad, Padding::Zero);
        let mut out = Tensor::zeros(o);
        for n in 0..s.n {
            for c in 0..s.c {
                let src = &x.data[(n * s.c + c) * s.plane()..][..s.plane()];
                let dst = &mut out.data[(n * o.c + c) * o.plane()..][..o.plane()];
                let w = &self.weight.value[c * k * k..(c + 1) * k * k];
                for oy in 0..o.h {
                    for ky in 0..k {
                        let Some(sy) = ymap[oy * k + ky] else { continue };
                        let row = &src[sy * s.w..(sy + 1) * s.w];
                        let drow = &mut dst[oy * o.w..(oy + 1) * o.w];
                        for kx in 0..k {
                            let wv = w[ky * k + kx];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                if let Some(sx) = xmap[ox * k + kx] {
                                    *d += wv * row[sx];
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

impl Layer for DepthwiseConv2d {
    fn forward(&mut self, x: Tensor) -> Tensor {
        let out = self.run(&x);
        self.cache = Some(x);
        out
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let x = self.cache.take().expect("depthwise backward without forward");
        let s = x.shape;
        let o = grad.shape;
        let k = self.kernel;
        let pad = k / 2;
        let ymap = tap_map(s.h, o.h, k, self.stride, pad, Padding::Zero);
        let xmap = tap_map(s.w, o.w, k, self.stride, pad, Padding::Zero);
        let mut dx = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let off_in = (n * s.c + c) * s.plane();
                let off_out = (n * o.c + c) * o.plane();
                let src = &x.data[off_in..off_in + s.plane()];
                let g = &grad.data[off_out..off_out + o.plane()];
                let dsrc = &mut dx.data[off_in..off_in + s.plane()];
                let w = &self.weight.value[c * k * k..(c + 1) * k * k];
                let dw = &mut self.weight.grad[c * k * k..(c + 1) * k * k];
                for oy in 0..o.h {
                    for ky in 0..k {
                        let Some(sy) = ymap[oy * k + ky] else { continue };
                        for kx in 0..k {
                            let mut acc = 0.0;
                            for ox in 0..o.w {
                                if let Some(sx) = xmap[ox * k + kx] {
                                    let gv = g[oy * o.w + ox];
                                    acc += gv * src[sy * s.w + sx];
                                    dsrc[sy * s.w + sx] += gv * w[ky * k + kx];
                                }
                            }
                            dw[ky * k + kx] += acc;
                        }
                    }
                }
            }
        }
        dx
    }

    fn infer(&self, x: Tensor) -> Tensor {
        self.run(&x)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current batch, in training and inference alike.
    Batch,
    /// Stored running statistics; only the affine part is learnable.
    Frozen,
}

pub const BN_EPS: f32 = 1e-5;

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub mode: NormMode,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl BatchNorm2d {
    pub fn new(channels: usize, mode: NormMode) -> Self {
        Self {
            channels,
            mode,
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            cache: None,
        }
    }

    /// Per-channel mean and biased variance over batch and space.
    pub fn batch_stats(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
        let s = x.shape;
        let count = (s.n * s.plane()) as f64;
        let mut mean = vec![0.0; s.c];
        let mut var = vec![0.0; s.c];
        for c in 0..s.c {
            let mut sum = 0.0f64;
            for n in 0..s.n {
                sum += x.data[(n * s.c + c) * s.plane()..][..s.plane()]
                    .iter()
                    .map(|v| f64::from(*v))
                    .sum::<f64>();
            }
            let m = sum / count;
            let mut sq = 0.0f64;
            for n in 0..s.n {
                sq += x.data[(n * s.c + c) * s.plane()..][..s.plane()]
                    .iter()
                    .map(|v| (f64::from(*v) - m).powi(2))
                    .sum::<f64>();
            }
            mean[c] = m as f32;
            var[c] = (sq / count) as f32;
        }
        (mean, var)
    }

    /// Normalizes `x`, returning `(y, x_hat, inv_std)`.
    fn normalize(&self, x: &Tensor) -> (Tensor, Tensor, Vec<f32>) {
        let s = x.shape;
        assert_eq!(s.c, self.channels, "batch norm channels");
        let (mean, var) = match self.mode {
            NormMode::Batch => Self::batch_stats(x),
            NormMode::Frozen => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Tensor::zeros(s);
        let mut y = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let off = (n * s.c + c) * s.plane();
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                for i in off..off + s.plane() {
                    let h = (x.data[i] - mean[c]) * inv_std[c];
                    xhat.data[i] = h;
                    y.data[i] = g * h + b;
                }
            }
        }
        (y, xhat, inv_std)
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: Tensor) -> Tensor {
        let (y, xhat, inv_std) = self.normalize(&x);
        self.cache = Some((xhat, inv_std));
        y
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.take().expect("batch norm backward without forward");
        let s = grad.shape;
        let m = (s.n * s.plane()) as f32;
        let mut dx = Tensor::zeros(s);
        for c in 0..s.c {
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for n in 0..s.n {
                let off = (n * s.c + c) * s.plane();
                for i in off..off + s.plane() {
                    sum_g += f64::from(grad.data[i]);
                    sum_gx += f64::from(grad.data[i] * xhat.data[i]);
                }
            }
            self.gamma.grad[c] += sum_gx as f32;
            self.beta.grad[c] += sum_g as f32;
            let gamma = self.gamma.value[c];
            for n in 0..s.n {
                let off = (n * s.c + c) * s.plane();
                for i in off..off + s.plane() {
                    dx.data[i] = match self.mode {
                        NormMode::Frozen => grad.data[i] * gamma * inv_std[c],
                        NormMode::Batch => {
                            gamma * inv_std[c] / m
                                * (m * grad.data[i]
                                    - sum_g as f32
                                    - xhat.data[i] * sum_gx as f32)
                        }
                    };
                }
            }
        }
        dx
    }

    fn infer(&self, x: Tensor) -> Tensor {
        self.normalize(&x).0
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn state(&self) -> Vec<&[f32]> {
        vec![
            &self.gamma.value,
            &self.beta.value,
            &self.running_mean,
            &self.running_var,
        ]
    }

    fn state_mut(&mut self) -> Vec<&mut Vec<f32>> {
        vec![
            &mut self.gamma.value,
            &mut self.beta.value,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActKind {
    LeakyRelu(f32),
    Relu6,
    Sigmoid,
}

#[derive(Clone, Debug)]
pub struct Activation {
    pub kind: ActKind,
    cache: Option<Tensor>,
}

impl Activation {
    pub fn new(kind: ActKind) -> Self {
        Self { kind, cache: None }
    }

    fn apply(&self, mut x: Tensor) -> Tensor {
        match self.kind {
            ActKind::LeakyRelu(slope) => x.data.iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v *= slope
                }
            }),
            ActKind::Relu6 => x.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 6.0)),
            ActKind::Sigmoid => x
                .data
                .iter_mut()
                .for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
        }
        x
    }
}

impl Layer for Activation {
    fn forward(&mut self, x: Tensor) -> Tensor {
        let y = self.apply(x);
        self.cache = Some(y.clone());
        y
    }

    // Every derivative here is expressible through the output.
    fn backward(&mut self, mut grad: Tensor) -> Tensor {
        let y = self.cache.take().expect("activation backward without forward");
        for (g, y) in grad.data.iter_mut().zip(&y.data) {
            *g *= match self.kind {
                ActKind::LeakyRelu(slope) => {
                    if *y < 0.0 {
                        slope
                    } else {
                        1.0
                    }
                }
                ActKind::Relu6 => {
                    if *y > 0.0 && *y < 6.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                ActKind::Sigmoid => y * (1.0 - y),
            };
        }
        grad
    }

    fn infer(&self, x: Tensor) -> Tensor {
        self.apply(x)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// ×2 bilinear upsampling with half-pixel centers (no corner alignment).
#[derive(Clone, Debug, Default)]
pub struct Upsample2x {
    in_shape: Option<Shape>,
}

/// For each output coordinate: `(i0, i1, weight of i1)`.
fn bilinear_taps(in_len: usize) -> Vec<(usize, usize, f32)> {
    (0..2 * in_len)
        .map(|o| {
            let src = ((o as f32 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f32)
        })
        .collect()
}

impl Upsample2x {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Upsample2x {
    fn forward(&mut self, x: Tensor) -> Tensor {
        self.in_shape = Some(x.shape);
        self.infer(x)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let s = self.in_shape.take().expect("upsample backward without forward");
        let ty = bilinear_taps(s.h);
        let tx = bilinear_taps(s.w);
        let (oh, ow) = (2 * s.h, 2 * s.w);
        let mut dx = Tensor::zeros(s);
        for plane in 0..s.n * s.c {
            let g = &grad.data[plane * oh * ow..][..oh * ow];
            let d = &mut dx.data[plane * s.plane()..][..s.plane()];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let gv = g[oy * ow + ox];
                    d[y0 * s.w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                    d[y0 * s.w + x1] += gv * (1.0 - wy) * wx;
                    d[y1 * s.w + x0] += gv * wy * (1.0 - wx);
                    d[y1 * s.w + x1] += gv * wy * wx;
                }
            }
        }
        dx
    }

    fn infer(&self, x: Tensor) -> Tensor {
        let s = x.shape;
        let ty = bilinear_taps(s.h);
        let tx = bilinear_taps(s.w);
        let (oh, ow) = (2 * s.h, 2 * s.w);
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
        for plane in 0..s.n * s.c {
            let src = &x.data[plane * s.plane()..][..s.plane()];
            let dst = &mut out.data[plane * oh * ow..][..oh * ow];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let top = src[y0 * s.w + x0] * (1.0 - wx) + src[y0 * s.w + x1] * wx;
                    let bottom = src[y1 * s.w + x0] * (1.0 - wx) + src[y1 * s.w + x1] * wx;
                    dst[oy * ow + ox] = top * (1.0 - wy) + bottom * wy;
                }
            }
        }
        out
    }

    fn clear_cache(&mut self) {
        self.in_shape = None;
    }
}

/// Spatial mean per channel: `N×C×H×W → N×C×1×1`.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    in_shape: Option<Shape>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: Tensor) -> Tensor {
        self.in_shape = Some(x.shape);
        self.infer(x)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let s = self.in_shape.take().expect("pool backward without forward");
        let scale = 1.0 / s.plane() as f32;
        let mut dx = Tensor::zeros(s);
        for (plane, g) in grad.data.iter().enumerate() {
            dx.data[plane * s.plane()..][..s.plane()].fill(g * scale);
        }
        dx
    }

    fn infer(&self, x: Tensor) -> Tensor {
        let s = x.shape;
        let data = x
            .data
            .chunks_exact(s.plane())
            .map(|p| p.iter().sum::<f32>() / s.plane() as f32)
            .collect();
        Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data)
    }

    fn clear_cache(&mut self) {
        self.in_shape = None;
    }
}

/// Fully-connected layer over `N×C×1×1` features.
#[derive(Clone, Debug)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::uniform_fan_in(inputs * outputs, inputs, rng),
            bias: Param::uniform_fan_in(outputs, inputs, rng),
            cache: None,
        }
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: Tensor) -> Tensor {
        let y = self.infer(x.clone());
        self.cache = Some(x);
        y
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let x = self.cache.take().expect("linear backward without forward");
        let n = x.shape.n;
        gemm(self.outputs, n, self.inputs, &grad.data, true, &x.data, false, &mut self.weight.grad, 1.0);
        for row in grad.data.chunks_exact(self.outputs) {
            for (b, g) in self.bias.grad.iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut dx = Tensor::zeros(x.shape);
        gemm(n, self.outputs, self.inputs, &grad.data, false, &self.weight.value, false, &mut dx.data, 0.0);
        dx
    }

    fn infer(&self, x: Tensor) -> Tensor {
        let n = x.shape.n;
        assert_eq!(x.shape.c * x.shape.plane(), self.inputs, "linear input width");
        let mut y = Tensor::zeros(Shape::new(n, self.outputs, 1, 1));
        for row in y.data.chunks_exact_mut(self.outputs) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(n, self.inputs, self.outputs, &x.data, false, &self.weight.value, true, &mut y.data, 1.0);
        y
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// A chain of layers.
#[derive(Default)]
pub struct Sequential {
    pub layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: impl Layer + 'static) -> &mut Self {
        self.layers.push(Box::new(layer));
        self
    }
}

impl Layer for Sequential {
    fn forward(&mut self, x: Tensor) -> Tensor {
        self.layers.iter_mut().fold(x, |x, l| l.forward(x))
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        self.layers.iter_mut().rev().fold(grad, |g, l| l.backward(g))
    }

    fn infer(&self, x: Tensor) -> Tensor {
        self.layers.iter().fold(x, |x, l| l.infer(x))
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn state(&self) -> Vec<&[f32]> {
        self.layers.iter().flat_map(|l| l.state()).collect()
    }

    fn state_mut(&mut self) -> Vec<&mut Vec<f32>> {
        self.layers.iter_mut().flat_map(|l| l.state_mut()).collect()
    }

    fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(|l| l.clear_cache());
    }
}
