//! Layer kernels with hand-written backward passes.
//!
//! Convolutions lower to im2col + GEMM and run samples in parallel. Per-sample
//! weight gradients are reduced in sample order, so results do not depend on
//! how rayon schedules the work.

use rayon::prelude::*;

use super::{Scalar, Shape, Tensor4};
use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Stride-1 cross-correlation with zero padding that preserves H×W.
/// Weights are laid out `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

fn im2col3<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::ZERO);
                        continue;
                    }
                    let s = &plane[sy as usize * w..][..w];
                    match kx {
                        0 => {
                            out[0] = T::ZERO;
                            out[1..].copy_from_slice(&s[..w - 1]);
                        }
                        1 => out.copy_from_slice(s),
                        _ => {
                            out[..w - 1].copy_from_slice(&s[1..]);
                            out[w - 1] = T::ZERO;
                        }
                    }
                }
            }
        }
    }
}

fn col2im3<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, dst: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let g = &row[y * w..(y + 1) * w];
                    let d = &mut plane[sy as usize * w..][..w];
                    match kx {
                        0 => d[..w - 1].iter_mut().zip(&g[1..]).for_each(|(a, &b)| *a += b),
                        1 => d.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                        _ => d[1..].iter_mut().zip(&g[..w - 1]).for_each(|(a, &b)| *a += b),
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(Error::InvalidArgument(format!(
                "only 1x1 and 3x3 kernels are supported, got {kernel}"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        Ok(Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight: vec![T::ZERO; out_channels * in_channels * kernel * kernel],
            bias: vec![T::ZERO; out_channels],
        })
    }

    /// He-uniform weights, zero bias.
    pub fn he_uniform(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        let mut conv = Self::zeros(in_channels, out_channels, kernel)?;
        let bound = (6.0 / conv.fan_in() as f64).sqrt();
        for v in &mut conv.weight {
            *v = T::from_f64(rng.uniform(-bound, bound));
        }
        Ok(conv)
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.c() != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.c()
            )));
        }
        Ok(())
    }

    /// Lowered input for one sample; `None` for 1×1 kernels, which use the
    /// sample directly.
    fn lower(&self, sample: &[T], h: usize, w: usize) -> Option<Vec<T>> {
        (self.kernel == 3).then(|| {
            let mut col = vec![T::ZERO; self.fan_in() * h * w];
            im2col3(sample, self.in_channels, h, w, &mut col);
            col
        })
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let (n, _, h, w) = x.shape();
        let hw = h * w;
        let mut out = Tensor4::zeros((n, self.out_channels, h, w));
        out.data_mut()
            .par_chunks_mut(self.out_channels * hw)
            .enumerate()
            .for_each(|(i, dst)| {
                let sample = x.sample(i);
                let col = self.lower(sample, h, w);
                let col = col.as_deref().unwrap_or(sample);
                T::gemm(
                    self.out_channels,
                    self.fan_in(),
                    hw,
                    &self.weight,
                    false,
                    col,
                    false,
                    dst,
                    false,
                );
                for (row, &b) in dst.chunks_exact_mut(hw).zip(&self.bias) {
                    row.iter_mut().for_each(|v| *v += b);
                }
            });
        out.check_finite("conv2d")?;
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<ConvGrads<T>> {
        self.check_input(x)?;
        let (n, c, h, w) = x.shape();
        grad_out.ensure_shape((n, self.out_channels, h, w), "conv backward")?;
        let hw = h * w;
        let ck = self.fan_in();
        let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let sample = x.sample(i);
                let g = grad_out.sample(i);
                let col = self.lower(sample, h, w);
                let col = col.as_deref().unwrap_or(sample);
                let mut gw = vec![T::ZERO; self.out_channels * ck];
                T::gemm(self.out_channels, hw, ck, g, false, col, true, &mut gw, false);
                let gb: Vec<T> = g.chunks_exact(hw).map(|row| row.iter().copied().sum()).collect();
                let mut gx = vec![T::ZERO; c * hw];
                if self.kernel == 3 {
                    let mut gcol = vec![T::ZERO; ck * hw];
                    T::gemm(ck, self.out_channels, hw, &self.weight, true, g, false, &mut gcol, false);
                    col2im3(&gcol, c, h, w, &mut gx);
                } else {
                    T::gemm(ck, self.out_channels, hw, &self.weight, true, g, false, &mut gx, false);
                }
                (gx, gw, gb)
            })
            .collect();

        let mut input = Vec::with_capacity(n * c * hw);
        let mut weight = vec![T::ZERO; self.weight.len()];
        let mut bias = vec![T::ZERO; self.out_channels];
        for (gx, gw, gb) in per_sample {
            input.extend_from_slice(&gx);
            weight.iter_mut().zip(&gw).for_each(|(a, &b)| *a += b);
            bias.iter_mut().zip(&gb).for_each(|(a, &b)| *a += b);
        }
        let input = Tensor4::new((n, c, h, w), input)?;
        input.check_finite("conv2d backward")?;
        Ok(ConvGrads {
            input,
            weight,
            bias,
        })
    }
}

/// Per-channel batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    /// Weight kept by the running statistics on each update.
    pub momentum: f64,
}

/// Batch statistics and normalized activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BnGrads<T> {
    pub input: Tensor4<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        BatchNorm {
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
            eps,
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor4<T>) -> Result<()> {
        let c = self.channels();
        if x.c() != c || self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "batch norm has {c} channels, input has {}",
                x.c()
            )));
        }
        Ok(())
    }

    /// Normalizes with the statistics of this batch. Running statistics are
    /// not touched; see [`BatchNorm::update_running`].
    pub fn forward_train(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, BnCache<T>)> {
        self.check(x)?;
        let (n, c, h, w) = x.shape();
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut mean = vec![T::ZERO; c];
        let mut var = vec![T::ZERO; c];
        let mut inv_std = vec![T::ZERO; c];
        for ch in 0..c {
            let planes = || (0..n).map(move |i| &x.sample(i)[ch * hw..(ch + 1) * hw]);
            let mu = planes().flatten().map(|v| v.to_f64()).sum::<f64>() / count;
            let var_c = planes()
                .flatten()
                .map(|v| (v.to_f64() - mu).powi(2))
                .sum::<f64>()
                / count;
            mean[ch] = T::from_f64(mu);
            var[ch] = T::from_f64(var_c);
            inv_std[ch] = T::from_f64(1.0 / (var_c + self.eps).sqrt());
        }
        let mut xhat = x.clone();
        let mut y = x.clone();
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                let (m, s, g, b) = (mean[ch], inv_std[ch], self.gamma[ch], self.beta[ch]);
                for (xh, yv) in xhat.data_mut()[off..off + hw]
                    .iter_mut()
                    .zip(&mut y.data_mut()[off..off + hw])
                {
                    *xh = (*xh - m) * s;
                    *yv = g * *xh + b;
                }
            }
        }
        y.check_finite("batch norm")?;
        Ok((
            y,
            BnCache {
                xhat,
                inv_std,
                mean,
                var,
            },
        ))
    }

    pub fn update_running(&mut self, cache: &BnCache<T>) {
        let keep = T::from_f64(self.momentum);
        let take = T::from_f64(1.0 - self.momentum);
        for ch in 0..self.channels() {
            self.running_mean[ch] = keep * self.running_mean[ch] + take * cache.mean[ch];
            self.running_var[ch] = keep * self.running_var[ch] + take * cache.var[ch];
        }
    }

    pub fn forward_eval(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(x)?;
        let (n, c, h, w) = x.shape();
        let hw = h * w;
        let mut y = x.clone();
        for ch in 0..c {
            let s = T::from_f64(1.0 / (self.running_var[ch].to_f64() + self.eps).sqrt());
            let scale = self.gamma[ch] * s;
            let shift = self.beta[ch] - self.running_mean[ch] * scale;
            for i in 0..n {
                let off = (i * c + ch) * hw;
                y.data_mut()[off..off + hw]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        y.check_finite("batch norm")?;
        Ok(y)
    }

    /// Gradient of the train-mode forward.
    pub fn backward(&self, cache: &BnCache<T>, grad_out: &Tensor4<T>) -> Result<BnGrads<T>> {
        grad_out.ensure_shape(cache.xhat.shape(), "batch norm backward")?;
        let (n, c, h, w) = grad_out.shape();
        let hw = h * w;
        let m = T::from_f64((n * hw) as f64);
        let mut gamma = vec![T::ZERO; c];
        let mut beta = vec![T::ZERO; c];
        for ch in 0..c {
            let (mut sg, mut sgx) = (0.0f64, 0.0f64);
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for (g, xh) in grad_out.data()[off..off + hw].iter().zip(&cache.xhat.data()[off..off + hw]) {
                    sg += g.to_f64();
                    sgx += (*g * *xh).to_f64();
                }
            }
            beta[ch] = T::from_f64(sg);
            gamma[ch] = T::from_f64(sgx);
        }
        let mut input = grad_out.clone();
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                let k = self.gamma[ch] * cache.inv_std[ch] / m;
                let (sg, sgx) = (beta[ch], gamma[ch]);
                for (d, xh) in input.data_mut()[off..off + hw].iter_mut().zip(&cache.xhat.data()[off..off + hw]) {
                    *d = k * (m * *d - sg - *xh * sgx);
                }
            }
        }
        input.check_finite("batch norm backward")?;
        Ok(BnGrads { input, gamma, beta })
    }
}

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| v.max(T::ZERO))
}

/// Gradient through ReLU given the forward output.
pub fn relu_backward<T: Scalar>(output: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    grad_out.ensure_shape(output.shape(), "relu backward")?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::ZERO { g } else { T::ZERO })
        .collect();
    Tensor4::new(output.shape(), data)
}

/// Logistic sigmoid, clamped so outputs stay strictly inside (0, 1).
pub fn sigmoid<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let lo = T::EPSILON;
    let hi = T::ONE - T::EPSILON;
    x.map(|v| (T::ONE / (T::ONE + (-v).exp())).max(lo).min(hi))
}

/// Gradient through the sigmoid given the forward output.
pub fn sigmoid_backward<T: Scalar>(output: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    grad_out.ensure_shape(output.shape(), "sigmoid backward")?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| g * y * (T::ONE - y))
        .collect();
    Tensor4::new(output.shape(), data)
}

/// 2×2 max pooling with stride 2. Returns the flat input index of each
/// window's maximum (first in row-major order on ties).
pub fn maxpool2<T: Scalar>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<u32>)> {
    let (n, c, h, w) = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "max pooling needs even spatial dimensions, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let src = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let first = base + 2 * oy * w + 2 * ox;
                let mut best = first;
                for idx in [first + 1, first + w, first + w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor4::new((n, c, oh, ow), out)?, arg))
}

pub fn maxpool2_backward<T: Scalar>(
    input_shape: Shape,
    argmax: &[u32],
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::ShapeMismatch("max pool routing table size".into()));
    }
    let mut grad = Tensor4::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        grad.data_mut()[i as usize] += g;
    }
    Ok(grad)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample_nearest2<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let (n, c, h, w) = x.shape();
    let mut out = Vec::with_capacity(n * c * h * w * 4);
    for row in x.data().chunks_exact(w) {
        for _ in 0..2 {
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor4::new((n, c, 2 * h, 2 * w), out).expect("upsample shape")
}

/// Sums each 2×2 fan-out back onto its source pixel.
pub fn upsample_nearest2_backward<T: Scalar>(grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (n, c, h2, w2) = grad_out.shape();
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::ShapeMismatch("upsample gradient must have even size".into()));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let g = grad_out.data();
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        let base = plane * h2 * w2;
        for y in 0..h {
            for x in 0..w {
                let i = base + 2 * y * w2 + 2 * x;
                out.push(g[i] + g[i + 1] + g[i + w2] + g[i + w2 + 1]);
            }
        }
    }
    Tensor4::new((n, c, h, w), out)
}

/// Multiplier per element: 0 for dropped units, 1/(1-p) for survivors.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask<T>(pub Vec<T>);

impl<T: Scalar> DropoutMask<T> {
    pub fn sample(len: usize, prob: f64, rng: &mut RngState) -> Result<Self> {
        if !(0.0..1.0).contains(&prob) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must lie in [0, 1), got {prob}"
            )));
        }
        let keep = T::from_f64(1.0 / (1.0 - prob));
        Ok(DropoutMask(
            (0..len)
                .map(|_| if rng.bernoulli(prob) { T::ZERO } else { keep })
                .collect(),
        ))
    }

    pub fn apply(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        if self.0.len() != x.len() {
            return Err(Error::ShapeMismatch("dropout mask size".into()));
        }
        let data = x.data().iter().zip(&self.0).map(|(&v, &m)| v * m).collect();
        Tensor4::new(x.shape(), data)
    }
}

/// Inverted dropout; identity in eval mode. The mask is returned for the
/// backward pass, which is [`DropoutMask::apply`] on the incoming gradient.
pub fn dropout<T: Scalar>(
    x: &Tensor4<T>,
    prob: f64,
    rng: &mut RngState,
    mode: Mode,
) -> Result<(Tensor4<T>, Option<DropoutMask<T>>)> {
    if !(0.0..1.0).contains(&prob) {
        return Err(Error::InvalidArgument(format!(
            "dropout probability must lie in [0, 1), got {prob}"
        )));
    }
    if mode == Mode::Eval || prob == 0.0 {
        return Ok((x.clone(), None));
    }
    let mask = DropoutMask::sample(x.len(), prob, rng)?;
    Ok((mask.apply(x)?, Some(mask)))
}

pub fn concat_channels<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (n, ca, h, w) = a.shape();
    if b.n() != n || b.h() != h || b.w() != w {
        return Err(Error::ShapeMismatch(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let cb = b.c();
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        out.extend_from_slice(a.sample(i));
        out.extend_from_slice(b.sample(i));
    }
    Tensor4::new((n, ca + cb, h, w), out)
}

pub fn split_channels<T: Scalar>(g: &Tensor4<T>, first: usize) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let (n, c, h, w) = g.shape();
    if first > c {
        return Err(Error::ShapeMismatch("split point beyond channel count".into()));
    }
    let hw = h * w;
    let mut a = Vec::with_capacity(n * first * hw);
    let mut b = Vec::with_capacity(n * (c - first) * hw);
    for i in 0..n {
        let s = g.sample(i);
        a.extend_from_slice(&s[..first * hw]);
        b.extend_from_slice(&s[first * hw..]);
    }
    Ok((
        Tensor4::new((n, first, h, w), a)?,
        Tensor4::new((n, c - first, h, w), b)?,
    ))
}

/// Extends the bottom and right edges by replication up to `h`×`w`.
pub fn pad_edge<T: Scalar>(x: &Tensor4<T>, h: usize, w: usize) -> Tensor4<T> {
    let (n, c, ih, iw) = x.shape();
    if (ih, iw) == (h, w) {
        return x.clone();
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in x.data().chunks_exact(ih * iw) {
        for y in 0..h {
            let row = &plane[y.min(ih - 1) * iw..][..iw];
            out.extend_from_slice(row);
            out.extend(std::iter::repeat_n(row[iw - 1], w - iw));
        }
    }
    Tensor4::new((n, c, h, w), out).expect("padding shape")
}

/// Keeps the top-left `h`×`w` window.
pub fn crop<T: Scalar>(x: &Tensor4<T>, h: usize, w: usize) -> Tensor4<T> {
    let (n, c, ih, iw) = x.shape();
    if (ih, iw) == (h, w) {
        return x.clone();
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in x.data().chunks_exact(ih * iw) {
        for y in 0..h {
            out.extend_from_slice(&plane[y * iw..y * iw + w]);
        }
    }
    Tensor4::new((n, c, h, w), out).expect("crop shape")
}

/// Zero-extends a cropped gradient back to the padded size.
pub fn crop_backward<T: Scalar>(grad: &Tensor4<T>, h: usize, w: usize) -> Tensor4<T> {
    let (n, c, gh, gw) = grad.shape();
    if (gh, gw) == (h, w) {
        return grad.clone();
    }
    let mut out = Tensor4::zeros((n, c, h, w));
    for (dst, src) in out
        .data_mut()
        .chunks_exact_mut(h * w)
        .zip(grad.data().chunks_exact(gh * gw))
    {
        for y in 0..gh {
            dst[y * w..y * w + gw].copy_from_slice(&src[y * gw..(y + 1) * gw]);
        }
    }
    out
}
