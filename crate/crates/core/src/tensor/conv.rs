//! Strided 2-D convolution and its transpose, lowered to matrix products
//! via im2col / col2im.


use super::gemm::{gemm, Precision};
use super::{GradFn, Shape, Tensor};
use crate::error::{Error, Result};

/// Geometry of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub precision: Precision,
}

impl ConvSpec {
    pub fn new(
        kernel: usize,
        stride: usize,
        padding: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> ConvSpec {
        ConvSpec {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
            precision: Precision::Double,
        }
    }

    /// Padding `K/2` for stride 1 and `(K-1)/2` otherwise, so that an input
    /// whose sides are multiples of the stride shrinks exactly by the stride
    /// and a transposed layer grows exactly by it.
    pub fn same(kernel: usize, stride: usize, in_channels: usize, out_channels: usize) -> ConvSpec {
        let padding = if stride == 1 { kernel / 2 } else { (kernel - 1) / 2 };
        ConvSpec::new(kernel, stride, padding, in_channels, out_channels)
    }

    /// The same geometry read in the opposite direction, as used by the
    /// adjoint of a layer.
    pub fn with_in_out_swapped(mut self) -> ConvSpec {
        std::mem::swap(&mut self.in_channels, &mut self.out_channels);
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> ConvSpec {
        self.precision = precision;
        self
    }

    /// `floor((in + 2·pad − K) / S) + 1`, or `None` when not positive.
    pub fn output_size(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// `(in − 1)·S − 2·pad + K`, or `None` when not positive.
    pub fn transposed_output_size(&self, input: usize) -> Option<usize> {
        if input == 0 || self.stride == 0 {
            return None;
        }
        let grown = (input - 1) * self.stride + self.kernel;
        grown.checked_sub(2 * self.padding).filter(|&s| s > 0)
    }

    pub fn weight_shape(&self) -> Shape {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    /// Transposed layers store weights as `(in, out, K, K)`.
    pub fn transposed_weight_shape(&self) -> Shape {
        [self.in_channels, self.out_channels, self.kernel, self.kernel]
    }

    fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::dim(format!(
                "kernel and stride must be positive, got K={} S={}",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }
}

/// Window geometry shared by im2col and col2im: a `channels × h × w` source
/// read through `kernel × kernel` windows placed on an `oh × ow` grid.
#[derive(Debug, Clone, Copy)]
struct Window {
    channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Source index for output position `o` and kernel tap `k`.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    /// Output columns `lo..hi` whose tap `kx` lands inside the row, and the
    /// source column of `lo`.
    #[inline]
    fn column_span(&self, kx: usize) -> (usize, usize, usize) {
        let (s, pad) = (self.stride, self.padding);
        let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(s) };
        let hi = if self.w + pad > kx {
            ((self.w + pad - kx - 1) / s + 1).min(self.ow)
        } else {
            0
        };
        let lo = lo.min(hi);
        (lo, hi, (lo * s + kx).saturating_sub(pad))
    }

    fn im2col(&self, src: &[f64], col: &mut [f64]) {
        let p = self.cols();
        let s = self.stride;
        for c in 0..self.channels {
            let plane = &src[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    let out = &mut col[row * p..(row + 1) * p];
                    let (lo, hi, first) = self.column_span(kx);
                    for oy in 0..self.oh {
                        let dst = &mut out[oy * self.ow..(oy + 1) * self.ow];
                        match self.source(oy, ky, self.h) {
                            None => dst.fill(0.0),
                            Some(iy) => {
                                let line = &plane[iy * self.w..(iy + 1) * self.w];
                                dst[..lo].fill(0.0);
                                dst[hi..].fill(0.0);
                                if s == 1 {
                                    dst[lo..hi].copy_from_slice(&line[first..first + hi - lo]);
                                } else {
                                    for (d, v) in dst[lo..hi].iter_mut().zip(line[first..].iter().step_by(s)) {
                                        *d = *v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dst: &mut [f64]) {
        let p = self.cols();
        let s = self.stride;
        for c in 0..self.channels {
            let plane = &mut dst[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    let src = &col[row * p..(row + 1) * p];
                    let (lo, hi, first) = self.column_span(kx);
                    for oy in 0..self.oh {
                        let Some(iy) = self.source(oy, ky, self.h) else {
                            continue;
                        };
                        let line = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let from = &src[oy * self.ow + lo..oy * self.ow + hi];
                        if s == 1 {
                            for (d, v) in line[first..first + hi - lo].iter_mut().zip(from) {
                                *d += v;
                            }
                        } else {
                            for (d, v) in line[first..].iter_mut().step_by(s).zip(from) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// The im2col matrix of `src`, built in `scratch` unless the window is
    /// pointwise.
    fn lower<'a>(&self, src: &'a [f64], scratch: &'a mut Vec<f64>) -> &'a [f64] {
        if self.is_pointwise() {
            src
        } else {
            scratch.resize(self.rows() * self.cols(), 0.0);
            self.im2col(src, scratch);
            scratch
        }
    }
}

/// Stride-1 convolutions with at most this many output channels skip the
/// im2col buffer, which would be mostly copies for a matrix-vector product.
const DIRECT_MAX_OUT: usize = 2;

fn use_direct(win: &Window, cout: usize) -> bool {
    win.stride == 1 && cout <= DIRECT_MAX_OUT && !win.is_pointwise()
}

/// Calls `f(ci, tap, iy, oy, lo, hi, first)` for every input row a
/// stride-1 window reads.
#[inline]
fn for_each_tap(win: &Window, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize)) {
    let k = win.kernel;
    for ci in 0..win.channels {
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi, first) = win.column_span(kx);
                if lo == hi {
                    continue;
                }
                for oy in 0..win.oh {
                    if let Some(iy) = win.source(oy, ky, win.h) {
                        f(ci, ky * k + kx, iy, oy, lo, hi, first);
                    }
                }
            }
        }
    }
}

fn direct_forward(win: &Window, x: &[f64], wt: &[f64], out: &mut [f64], cout: usize) {
    let (plane, p, taps) = (win.h * win.w, win.cols(), win.kernel * win.kernel);
    for co in 0..cout {
        let o = &mut out[co * p..(co + 1) * p];
        for_each_tap(win, |ci, tap, iy, oy, lo, hi, first| {
            let wv = wt[(co * win.channels + ci) * taps + tap];
            let src = &x[ci * plane + iy * win.w + first..][..hi - lo];
            for (d, v) in o[oy * win.ow + lo..oy * win.ow + hi].iter_mut().zip(src) {
                *d += wv * v;
            }
        });
    }
}

fn direct_backward(
    win: &Window,
    x: &[f64],
    wt: &[f64],
    g: &[f64],
    cout: usize,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
) {
    let (plane, p, taps) = (win.h * win.w, win.cols(), win.kernel * win.kernel);
    for co in 0..cout {
        let go = &g[co * p..(co + 1) * p];
        for_each_tap(win, |ci, tap, iy, oy, lo, hi, first| {
            let wi = (co * win.channels + ci) * taps + tap;
            let grow = &go[oy * win.ow + lo..oy * win.ow + hi];
            let at = ci * plane + iy * win.w + first;
            if let Some(gx) = gx.as_deref_mut() {
                let wv = wt[wi];
                for (d, v) in gx[at..at + hi - lo].iter_mut().zip(grow) {
                    *d += wv * v;
                }
            }
            if let Some(gw) = gw.as_deref_mut() {
                gw[wi] += x[at..at + hi - lo].iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
            }
        });
    }
}

fn check_bias(bias: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != channels {
            return Err(Error::dim(format!(
                "bias has {} entries, expected {channels}",
                b.numel()
            )));
        }
    }
    Ok(())
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(grad: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    let mut g = vec![0.0; channels];
    for (i, chunk) in grad.chunks(plane).enumerate() {
        g[i % channels] += chunk.iter().sum::<f64>();
    }
    g
}

/// 2-D convolution of an `N×Cin×H×W` input with `Cout×Cin×K×K` weights.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let [n, c, h, w] = input.shape();
    if c != spec.in_channels {
        return Err(Error::dim(format!(
            "conv2d input has {c} channels, spec expects {}",
            spec.in_channels
        )));
    }
    if weight.shape() != spec.weight_shape() {
        return Err(Error::dim(format!(
            "conv2d weight shape {:?}, spec expects {:?}",
            weight.shape(),
            spec.weight_shape()
        )));
    }
    check_bias(bias, spec.out_channels)?;
    let (Some(oh), Some(ow)) = (spec.output_size(h), spec.output_size(w)) else {
        return Err(Error::dim(format!(
            "conv2d K={} S={} pad={} cannot be applied to {h}×{w}",
            spec.kernel, spec.stride, spec.padding
        )));
    };
    let win = Window {
        channels: c,
        h,
        w,
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
        oh,
        ow,
    };
    let cout = spec.out_channels;
    let (r, p) = (win.rows(), win.cols());
    let mut out = vec![0.0; n * cout * p];
    {
        let x = input.data();
        let wt = weight.data();
        let mut scratch = Vec::new();
        for b in 0..n {
            if use_direct(&win, cout) {
                let xb = &x[b * c * h * w..(b + 1) * c * h * w];
                direct_forward(&win, xb, &wt, &mut out[b * cout * p..(b + 1) * cout * p], cout);
                continue;
            }
            let col = win.lower(&x[b * c * h * w..(b + 1) * c * h * w], &mut scratch);
            gemm(
                spec.precision,
                cout,
                r,
                p,
                &wt,
                false,
                col,
                false,
                &mut out[b * cout * p..(b + 1) * cout * p],
                false,
            );
        }
        if let Some(bias) = bias {
            add_bias(&mut out, &bias.data(), p);
        }
    }
    let mut parents = vec![input.clone(), weight.clone()];
    parents.extend(bias.cloned());
    Ok(Tensor::from_op(
        [n, cout, oh, ow],
        out,
        parents,
        ConvBackward { win, spec },
    ))
}

struct ConvBackward {
    win: Window,
    spec: ConvSpec,
}

impl GradFn for ConvBackward {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, out: &Tensor, grad: &[f64], parents: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let win = self.win;
        let n = out.batch();
        let cout = self.spec.out_channels;
        let (r, p) = (win.rows(), win.cols());
        let in_len = win.channels * win.h * win.w;
        let (input, weight) = (&parents[0], &parents[1]);
        let x = input.data();
        let wt = weight.data();
        let mut gx = input.requires_grad().then(|| vec![0.0; n * in_len]);
        let mut gw = weight.requires_grad().then(|| vec![0.0; cout * r]);
        let mut dcol = if gx.is_some() && !win.is_pointwise() && !use_direct(&win, cout) { vec![0.0; r * p] } else { Vec::new() };
        let mut scratch = Vec::new();
        for b in 0..n {
            let g = &grad[b * cout * p..(b + 1) * cout * p];
            if use_direct(&win, cout) {
                let xb = &x[b * in_len..(b + 1) * in_len];
                let gxb = gx.as_mut().map(|v| &mut v[b * in_len..(b + 1) * in_len]);
                direct_backward(&win, xb, &wt, g, cout, gxb, gw.as_deref_mut());
                continue;
            }
            if let Some(gw) = gw.as_mut() {
                let col = win.lower(&x[b * in_len..(b + 1) * in_len], &mut scratch);
                gemm(self.spec.precision, cout, p, r, g, false, col, true, gw, true);
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx[b * in_len..(b + 1) * in_len];
                if win.is_pointwise() {
                    gemm(self.spec.precision, r, cout, p, &wt, true, g, false, dst, false);
                } else {
                    gemm(self.spec.precision, r, cout, p, &wt, true, g, false, &mut dcol, false);
                    win.col2im(&dcol, dst);
                }
            }
        }
        let mut grads = vec![gx, gw];
        if let Some(bias) = parents.get(2) {
            grads.push(bias.requires_grad().then(|| bias_grad(grad, cout, p)));
        }
        grads
    }
}

/// Transposed convolution: `N×Cin×H×W` with `Cin×Cout×K×K` weights gives
/// `N×Cout×((H−1)S−2p+K)×((W−1)S−2p+K)`. It is the adjoint of [`conv2d`]
/// with the same weights.
pub fn transposed_conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: ConvSpec,
) -> Result<Tensor> {
    spec.validate()?;
    let [n, c, h, w] = input.shape();
    if c != spec.in_channels {
        return Err(Error::dim(format!(
            "transposed_conv2d input has {c} channels, spec expects {}",
            spec.in_channels
        )));
    }
    if weight.shape() != spec.transposed_weight_shape() {
        return Err(Error::dim(format!(
            "transposed_conv2d weight shape {:?}, spec expects {:?}",
            weight.shape(),
            spec.transposed_weight_shape()
        )));
    }
    check_bias(bias, spec.out_channels)?;
    let (Some(oh), Some(ow)) = (spec.transposed_output_size(h), spec.transposed_output_size(w))
    else {
        return Err(Error::dim(format!(
            "transposed_conv2d K={} S={} pad={} gives a non-positive output for {h}×{w}",
            spec.kernel, spec.stride, spec.padding
        )));
    };
    // Window over the output, read back onto the input grid.
    let win = Window {
        channels: spec.out_channels,
        h: oh,
        w: ow,
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
        oh: h,
        ow: w,
    };
    let cout = spec.out_channels;
    let (r, p) = (win.rows(), win.cols());
    let out_len = cout * oh * ow;
    let mut out = vec![0.0; n * out_len];
    {
        let x = input.data();
        let wt = weight.data();
        let mut col = vec![0.0; r * p];
        for b in 0..n {
            let xb = &x[b * c * p..(b + 1) * c * p];
            let dst = &mut out[b * out_len..(b + 1) * out_len];
            if win.is_pointwise() {
                gemm(spec.precision, r, c, p, &wt, true, xb, false, dst, false);
            } else {
                gemm(spec.precision, r, c, p, &wt, true, xb, false, &mut col, false);
                win.col2im(&col, dst);
            }
        }
        if let Some(bias) = bias {
            add_bias(&mut out, &bias.data(), oh * ow);
        }
    }
    let mut parents = vec![input.clone(), weight.clone()];
    parents.extend(bias.cloned());
    Ok(Tensor::from_op(
        [n, cout, oh, ow],
        out,
        parents,
        TransposedConvBackward { win, spec },
    ))
}

struct TransposedConvBackward {
    win: Window,
    spec: ConvSpec,
}

impl GradFn for TransposedConvBackward {
    fn name(&self) -> &'static str {
        "transposed_conv2d"
    }

    fn backward(&self, out: &Tensor, grad: &[f64], parents: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let win = self.win;
        let n = out.batch();
        let cin = self.spec.in_channels;
        let cout = self.spec.out_channels;
        let (r, p) = (win.rows(), win.cols());
        let out_len = cout * win.h * win.w;
        let (input, weight) = (&parents[0], &parents[1]);
        let x = input.data();
        let wt = weight.data();
        let mut gx = input.requires_grad().then(|| vec![0.0; n * cin * p]);
        let mut gw = weight.requires_grad().then(|| vec![0.0; cin * r]);
        let mut scratch = Vec::new();
        for b in 0..n {
            let dcol = win.lower(&grad[b * out_len..(b + 1) * out_len], &mut scratch);
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx[b * cin * p..(b + 1) * cin * p];
                gemm(self.spec.precision, cin, r, p, &wt, false, dcol, false, dst, false);
            }
            if let Some(gw) = gw.as_mut() {
                let xb = &x[b * cin * p..(b + 1) * cin * p];
                gemm(self.spec.precision, cin, p, r, xb, false, dcol, true, gw, true);
            }
        }
        let mut grads = vec![gx, gw];
        if let Some(bias) = parents.get(2) {
            grads.push(bias.requires_grad().then(|| bias_grad(grad, cout, win.h * win.w)));
        }
        grads
    }
}
