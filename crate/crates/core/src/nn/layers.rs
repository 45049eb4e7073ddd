//! Differentiable 1-D layers. Each layer caches what its backward pass needs
//! during a train-mode forward; eval-mode forwards leave no cache behind.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::kernels;
use super::tensor::{BufferId, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub trait Layer<T: Scalar> {
    fn forward(&mut self, store: &mut ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;
    /// Returns the gradient w.r.t. the layer input and accumulates parameter
    /// gradients into `store`.
    fn backward(&mut self, store: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>>;
}

fn no_forward(what: &str) -> Error {
    Error::State(format!("{what}: backward called without a train-mode forward"))
}

fn dims3(x: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, c, l] => Ok((b, c, l)),
        _ => Err(Error::Shape(format!("{what}: expected (B, C, L), got {:?}", x.shape()))),
    }
}

fn normal_tensor<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("generated length matches shape")
}

pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    if len + 2 * pad < kernel {
        0
    } else {
        (len + 2 * pad - kernel) / stride + 1
    }
}

/// How a convolution is lowered onto the hardware.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvLowering {
    /// Per-item tap loops over a zero-padded, stride-phase-split input.
    Direct,
    /// im2col over a chunk of batch items, then one GEMM.
    Gemm,
}

/// Layers with at most this many weights use the direct lowering.
const DIRECT_MAX_WEIGHTS: usize = 256;
/// Target size of the im2col buffer.
const COL_BUDGET: usize = 1 << 16;

#[derive(Debug, Clone)]
pub struct Conv1d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub lowering: ConvLowering,
    /// When false, `backward` skips the input gradient and returns zeros.
    pub input_grad: bool,
    weight: ParamId,
    bias: Option<ParamId>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv1d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(stride > 0 && kernel > 0, "conv1d stride and kernel must be positive");
        let std = (2.0 / (in_ch * kernel) as f64).sqrt();
        let weight = store.add_param(
            format!("{name}.weight"),
            normal_tensor(&[out_ch, in_ch, kernel], std, rng),
        );
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        let lowering = if out_ch * in_ch * kernel <= DIRECT_MAX_WEIGHTS {
            ConvLowering::Direct
        } else {
            ConvLowering::Gemm
        };
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            lowering,
            input_grad: true,
            weight,
            bias,
            input: None,
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        conv_out_len(len, self.kernel, self.stride, self.pad)
    }

    /// Copies one (C x len) item into `buf` zero-padded and split into
    /// `stride` phases: phase r of channel c holds padded positions r,
    /// r + stride, ... Returns the phase length.
    #[inline(always)]
    fn split_phases(&self, x: &[T], len: usize, buf: &mut Vec<T>) -> usize {
        let s = self.stride;
        let phase = (len + 2 * self.pad).div_ceil(s);
        buf.clear();
        buf.resize(self.in_ch * s * phase, T::zero());
        for (src, dst) in x.chunks_exact(len).zip(buf.chunks_exact_mut(s * phase)) {
            if s == 1 {
                dst[self.pad..self.pad + len].copy_from_slice(src);
            } else {
                let (mut r, mut j) = (self.pad % s, self.pad / s);
                for &v in src {
                    dst[r * phase + j] = v;
                    r += 1;
                    if r == s {
                        r = 0;
                        j += 1;
                    }
                }
            }
        }
        phase
    }

    /// Adds a phase-split gradient back onto one (C x len) item.
    #[inline(always)]
    fn merge_phases(&self, buf: &[T], len: usize, phase: usize, dx: &mut [T]) {
        let s = self.stride;
        for (src, dst) in buf.chunks_exact(s * phase).zip(dx.chunks_exact_mut(len)) {
            if s == 1 {
                for (d, &v) in dst.iter_mut().zip(&src[self.pad..self.pad + len]) {
                    *d += v;
                }
            } else {
                let (mut r, mut j) = (self.pad % s, self.pad / s);
                for d in dst.iter_mut() {
                    *d += src[r * phase + j];
                    r += 1;
                    if r == s {
                        r = 0;
                        j += 1;
                    }
                }
            }
        }
    }

    /// Start of the contiguous run read by tap `k` of channel `c`.
    #[inline(always)]
    fn tap_offset(&self, c: usize, k: usize, phase: usize) -> usize {
        (c * self.stride + k % self.stride) * phase + k / self.stride
    }

    fn forward_direct(&self, x: &[T], len: usize, out_len: usize, w: &[T], bias: Option<&[T]>, out: &mut [T]) {
        kernels::with_simd(
            #[inline(always)]
            || {
                let mut buf = Vec::new();
                let items = x
                    .chunks_exact(self.in_ch * len)
                    .zip(out.chunks_exact_mut(self.out_ch * out_len));
                for (xb, yb) in items {
                    let phase = self.split_phases(xb, len, &mut buf);
                    for (o, row) in yb.chunks_exact_mut(out_len).enumerate() {
                        row.fill(bias.map_or(T::zero(), |b| b[o]));
                        let wo = &w[o * self.in_ch * self.kernel..(o + 1) * self.in_ch * self.kernel];
                        for c in 0..self.in_ch {
                            for k in 0..self.kernel {
                                let off = self.tap_offset(c, k, phase);
                                kernels::axpy(row, wo[c * self.kernel + k], &buf[off..off + out_len]);
                            }
                        }
                    }
                }
            },
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_direct(
        &self,
        x: &[T],
        grad: &[T],
        len: usize,
        out_len: usize,
        w: &[T],
        dw: &mut [T],
        mut dx: Option<&mut [T]>,
    ) {
        let (item_in, item_out) = (self.in_ch * len, self.out_ch * out_len);
        let wk = self.in_ch * self.kernel;
        kernels::with_simd(
            #[inline(always)]
            || {
                let mut buf = Vec::new();
                let mut dbuf = Vec::new();
                for (b, (xb, gb)) in x.chunks_exact(item_in).zip(grad.chunks_exact(item_out)).enumerate() {
                    let phase = self.split_phases(xb, len, &mut buf);
                    for (o, g) in gb.chunks_exact(out_len).enumerate() {
                        for c in 0..self.in_ch {
                            for k in 0..self.kernel {
                                let off = self.tap_offset(c, k, phase);
                                dw[o * wk + c * self.kernel + k] += kernels::dot(g, &buf[off..off + out_len]);
                            }
                        }
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        dbuf.clear();
                        dbuf.resize(buf.len(), T::zero());
                        for (o, g) in gb.chunks_exact(out_len).enumerate() {
                            for c in 0..self.in_ch {
                                for k in 0..self.kernel {
                                    let off = self.tap_offset(c, k, phase);
                                    kernels::axpy(&mut dbuf[off..off + out_len], w[o * wk + c * self.kernel + k], g);
                                }
                            }
                        }
                        self.merge_phases(&dbuf, len, phase, &mut dx[b * item_in..(b + 1) * item_in]);
                    }
                }
            },
        )
    }

    /// Batch items per GEMM: enough rows to keep the kernel efficient on
    /// short late-stage signals, few enough for the buffer to stay in cache.
    fn chunk_items(&self, out_len: usize) -> usize {
        (COL_BUDGET / (self.in_ch * self.kernel * out_len)).max(1)
    }

    /// Fills `cols` (C*K x items*out_len) from `items` consecutive (C x len) inputs.
    fn im2col_taps(&self, x: &[T], items: usize, len: usize, out_len: usize, cols: &mut [T]) {
        let row_w = items * out_len;
        for c in 0..self.in_ch {
            for k in 0..self.kernel {
                let (lo, hi) = self.tap_range(k, len, out_len);
                let row = &mut cols[(c * self.kernel + k) * row_w..(c * self.kernel + k + 1) * row_w];
                for (i, dst) in row.chunks_mut(out_len).enumerate() {
                    let src = &x[(i * self.in_ch + c) * len..(i * self.in_ch + c + 1) * len];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if self.stride == 1 {
                        let off = lo + k - self.pad;
                        dst[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                    } else {
                        for t in lo..hi {
                            dst[t] = src[t * self.stride + k - self.pad];
                        }
                    }
                }
            }
        }
    }

    /// Valid output positions `t` for kernel tap `k`: `t*stride + k - pad` in `[0, len)`.
    fn tap_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let lo = if k >= self.pad {
            0
        } else {
            (self.pad - k).div_ceil(self.stride)
        };
        // t*stride + k - pad <= len - 1  =>  t <= (len - 1 + pad - k) / stride
        let hi = if len + self.pad < k + 1 {
            0
        } else {
            ((len - 1 + self.pad - k) / self.stride + 1).min(out_len)
        };
        (lo.min(hi), hi)
    }

    /// Fills `cols` with one row of C*K input taps per output position of
    /// `items` consecutive (C x len) inputs.
    fn im2col_rows(&self, x: &[T], items: usize, len: usize, out_len: usize, cols: &mut [T]) {
        let ck = self.in_ch * self.kernel;
        for i in 0..items {
            let block = &mut cols[i * out_len * ck..(i + 1) * out_len * ck];
            for c in 0..self.in_ch {
                let src = &x[(i * self.in_ch + c) * len..(i * self.in_ch + c + 1) * len];
                for k in 0..self.kernel {
                    let j = c * self.kernel + k;
                    let (lo, hi) = self.tap_range(k, len, out_len);
                    for t in (0..lo).chain(hi..out_len) {
                        block[t * ck + j] = T::zero();
                    }
                    for t in lo..hi {
                        block[t * ck + j] = src[t * self.stride + k - self.pad];
                    }
                }
            }
        }
    }

    /// Scatter-adds per-position tap gradients back onto the inputs.
    fn col2im(&self, dcols: &[T], items: usize, len: usize, out_len: usize, dx: &mut [T]) {
        let ck = self.in_ch * self.kernel;
        for i in 0..items {
            let block = &dcols[i * out_len * ck..(i + 1) * out_len * ck];
            for c in 0..self.in_ch {
                let dst = &mut dx[(i * self.in_ch + c) * len..(i * self.in_ch + c + 1) * len];
                for k in 0..self.kernel {
                    let j = c * self.kernel + k;
                    let (lo, hi) = self.tap_range(k, len, out_len);
                    for t in lo..hi {
                        dst[t * self.stride + k - self.pad] += block[t * ck + j];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_gemm(
        &self,
        x: &[T],
        batch: usize,
        len: usize,
        out_len: usize,
        w: &[T],
        bias: Option<&[T]>,
        out: &mut [T],
    ) {
        let (ck, oc) = (self.in_ch * self.kernel, self.out_ch);
        let chunk = self.chunk_items(out_len).min(batch);
        let mut cols = vec![T::zero(); chunk * out_len * ck];
        let mut y = vec![T::zero(); chunk * out_len * oc];
        let (item_in, item_out) = (self.in_ch * len, oc * out_len);
        for start in (0..batch).step_by(chunk) {
            let items = chunk.min(batch - start);
            let rows = items * out_len;
            self.im2col_taps(&x[start * item_in..], items, len, out_len, &mut cols);
            // Y (O x rows) = W @ cols
            T::gemm_raw(
                oc,
                ck,
                rows,
                T::one(),
                w,
                ck,
                1,
                &cols,
                rows,
                1,
                T::zero(),
                &mut y,
                rows,
                1,
            );
            let od = &mut out[start * item_out..(start + items) * item_out];
            for (i, item) in od.chunks_exact_mut(item_out).enumerate() {
                for (o, dst) in item.chunks_exact_mut(out_len).enumerate() {
                    let bo = bias.map_or(T::zero(), |b| b[o]);
                    let src = &y[o * rows + i * out_len..o * rows + (i + 1) * out_len];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = v + bo;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_gemm(
        &self,
        x: &[T],
        grad: &[T],
        batch: usize,
        len: usize,
        out_len: usize,
        w: &[T],
        dw: &mut [T],
        mut dx: Option<&mut [T]>,
    ) {
        let (ck, oc) = (self.in_ch * self.kernel, self.out_ch);
        let (item_in, item_out) = (self.in_ch * len, oc * out_len);
        let chunk = self.chunk_items(out_len).min(batch);
        let mut cols = vec![T::zero(); chunk * out_len * ck];
        let mut dcols = vec![T::zero(); chunk * out_len * ck];
        // dY in both orders: positions-major feeds the weight GEMM, channel-major the input GEMM.
        let mut dy_rows = vec![T::zero(); chunk * out_len * oc];
        let mut dy_chans = vec![T::zero(); chunk * out_len * oc];
        for start in (0..batch).step_by(chunk) {
            let items = chunk.min(batch - start);
            let rows = items * out_len;
            let gd = &grad[start * item_out..(start + items) * item_out];
            for (i, item) in gd.chunks_exact(item_out).enumerate() {
                for (o, src) in item.chunks_exact(out_len).enumerate() {
                    dy_chans[o * rows + i * out_len..o * rows + (i + 1) * out_len].copy_from_slice(src);
                    for (t, &v) in src.iter().enumerate() {
                        dy_rows[(i * out_len + t) * oc + o] = v;
                    }
                }
            }
            self.im2col_rows(&x[start * item_in..], items, len, out_len, &mut cols);
            // dW += dY @ cols
            T::gemm_raw(
                oc,
                rows,
                ck,
                T::one(),
                &dy_rows,
                1,
                oc,
                &cols,
                ck,
                1,
                T::one(),
                dw,
                ck,
                1,
            );
            if let Some(dx) = dx.as_deref_mut() {
                // dcols = dY^T @ W
                T::gemm_raw(
                    rows,
                    oc,
                    ck,
                    T::one(),
                    &dy_chans,
                    1,
                    rows,
                    w,
                    ck,
                    1,
                    T::zero(),
                    &mut dcols,
                    ck,
                    1,
                );
                self.col2im(&dcols, items, len, out_len, &mut dx[start * item_in..]);
            }
        }
    }
}

impl<T: Scalar> Layer<T> for Conv1d<T> {
    fn forward(&mut self, store: &mut ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (batch, ch, len) = dims3(x, "conv1d")?;
        if ch != self.in_ch {
            return Err(Error::Shape(format!(
                "conv1d: expected {} channels, got {ch}",
                self.in_ch
            )));
        }
        let out_len = self.out_len(len);
        if out_len == 0 {
            return Err(Error::Shape(format!(
                "conv1d: input length {len} too short for kernel {}",
                self.kernel
            )));
        }
        let w = store.value(self.weight).data();
        let bias = self.bias.map(|b| store.value(b).data());
        let mut out = Tensor::zeros(&[batch, self.out_ch, out_len]);
        match self.lowering {
            ConvLowering::Direct => self.forward_direct(x.data(), len, out_len, w, bias, out.data_mut()),
            ConvLowering::Gemm => self.forward_gemm(x.data(), batch, len, out_len, w, bias, out.data_mut()),
        }
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(out)
    }

    fn backward(&mut self, store: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| no_forward("conv1d"))?;
        let (batch, _, len) = dims3(&x, "conv1d")?;
        let out_len = self.out_len(len);
        grad.expect_shape(&[batch, self.out_ch, out_len], "conv1d grad")?;
        if let Some(bid) = self.bias {
            let g = store.param_mut(bid).grad.data_mut();
            for dy in grad.data().chunks(self.out_ch * out_len) {
                for (gb, row) in g.iter_mut().zip(dy.chunks(out_len)) {
                    *gb += kernels::sum(row);
                }
            }
        }
        let mut dw = std::mem::replace(&mut store.param_mut(self.weight).grad, Tensor::zeros(&[0]));
        let w = store.value(self.weight).data();
        let mut dx = Tensor::zeros(&[batch, self.in_ch, len]);
        let dx_out = self.input_grad.then(|| dx.data_mut());
        match self.lowering {
            ConvLowering::Direct => self.backward_direct(x.data(), grad.data(), len, out_len, w, dw.data_mut(), dx_out),
            ConvLowering::Gemm => {
                self.backward_gemm(x.data(), grad.data(), batch, len, out_len, w, dw.data_mut(), dx_out)
            }
        }
        store.param_mut(self.weight).grad = dw;
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    shape: (usize, usize, usize),
}

/// Per-channel batch normalization over (batch, length).
#[derive(Debug, Clone)]
pub struct BatchNorm1d<T> {
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm1d<T> {
    pub const MOMENTUM: f64 = 0.9;
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            channels,
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
            gamma: store.add_param(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for BatchNorm1d<T> {
    fn forward(&mut self, store: &mut ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (batch, ch, len) = dims3(x, "batchnorm")?;
        if ch != self.channels {
            return Err(Error::Shape(format!(
                "batchnorm: expected {} channels, got {ch}",
                self.channels
            )));
        }
        let xd = x.data();
        let row = |b: usize, c: usize| &xd[(b * ch + c) * len..(b * ch + c + 1) * len];
        let n = (batch * len) as f64;
        let mut mean = vec![0.0f64; ch];
        let mut var = vec![0.0f64; ch];
        match mode {
            Mode::Train => {
                // Rows reduce in T; rows combine in f64.
                for c in 0..ch {
                    mean[c] = (0..batch).map(|b| kernels::sum(row(b, c)).as_f64()).sum::<f64>() / n;
                    let m = T::lit(mean[c]);
                    var[c] = (0..batch).map(|b| kernels::sq_dev(row(b, c), m).as_f64()).sum::<f64>() / n;
                }
                let m = self.momentum;
                let rm = store.buffer_mut(self.running_mean).data_mut();
                for c in 0..ch {
                    rm[c] = T::lit(m * rm[c].as_f64() + (1.0 - m) * mean[c]);
                }
                let rv = store.buffer_mut(self.running_var).data_mut();
                for c in 0..ch {
                    rv[c] = T::lit(m * rv[c].as_f64() + (1.0 - m) * var[c]);
                }
            }
            Mode::Eval => {
                for c in 0..ch {
                    mean[c] = store.buffer(self.running_mean).data()[c].as_f64();
                    var[c] = store.buffer(self.running_var).data()[c].as_f64();
                }
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::lit(1.0 / (v + self.eps).sqrt())).collect();
        let gamma = store.value(self.gamma).data();
        let beta = store.value(self.beta).data();
        let train = mode == Mode::Train;
        let mut x_hat = if train { vec![T::zero(); xd.len()] } else { Vec::new() };
        let mut out = Tensor::zeros(x.shape());
        for (r, dst) in out.data_mut().chunks_mut(len).enumerate() {
            let c = r % ch;
            let (m, s, g, bt) = (T::lit(mean[c]), inv_std[c], gamma[c], beta[c]);
            let src = &xd[r * len..(r + 1) * len];
            if train {
                let hat = &mut x_hat[r * len..(r + 1) * len];
                for ((d, h), &v) in dst.iter_mut().zip(hat.iter_mut()).zip(src) {
                    *h = (v - m) * s;
                    *d = g * *h + bt;
                }
            } else {
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = g * ((v - m) * s) + bt;
                }
            }
        }
        self.cache = train.then_some(BnCache {
            x_hat,
            inv_std,
            shape: (batch, ch, len),
        });
        Ok(out)
    }

    fn backward(&mut self, store: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| no_forward("batchnorm"))?;
        let (batch, ch, len) = cache.shape;
        grad.expect_shape(&[batch, ch, len], "batchnorm grad")?;
        let gd = grad.data();
        let mut sum_dy = vec![0.0f64; ch];
        let mut sum_dy_xhat = vec![0.0f64; ch];
        for (r, g) in gd.chunks(len).enumerate() {
            let c = r % ch;
            sum_dy[c] += kernels::sum(g).as_f64();
            sum_dy_xhat[c] += kernels::dot(g, &cache.x_hat[r * len..(r + 1) * len]).as_f64();
        }
        {
            let g = store.param_mut(self.gamma).grad.data_mut();
            for c in 0..ch {
                g[c] += T::lit(sum_dy_xhat[c]);
            }
        }
        {
            let g = store.param_mut(self.beta).grad.data_mut();
            for c in 0..ch {
                g[c] += T::lit(sum_dy[c]);
            }
        }
        let gamma = store.value(self.gamma).data();
        let n = (batch * len) as f64;
        let mut dx = Tensor::zeros(grad.shape());
        for (r, dst) in dx.data_mut().chunks_mut(len).enumerate() {
            let c = r % ch;
            // dx = gamma * inv_std * (dy - mean(dy) - x_hat * mean(dy * x_hat))
            let scale = gamma[c] * cache.inv_std[c];
            let mean_dy = T::lit(sum_dy[c] / n);
            let mean_dyx = T::lit(sum_dy_xhat[c] / n);
            let (g, hat) = (&gd[r * len..(r + 1) * len], &cache.x_hat[r * len..(r + 1) * len]);
            for ((d, &gv), &h) in dst.iter_mut().zip(g).zip(hat) {
                *d = scale * (gv - mean_dy - h * mean_dyx);
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<(Vec<usize>, Vec<bool>)>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Layer<T> for Relu {
    fn forward(&mut self, _store: &mut ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut out = x.clone();
        let mut mask = Vec::new();
        if mode == Mode::Train {
            mask.reserve(x.len());
        }
        for v in out.data_mut() {
            let keep = *v > T::zero();
            if !keep {
                *v = T::zero();
            }
            if mode == Mode::Train {
                mask.push(keep);
            }
        }
        self.mask = (mode == Mode::Train).then(|| (x.shape().to_vec(), mask));
        Ok(out)
    }

    fn backward(&mut self, _store: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, mask) = self.mask.take().ok_or_else(|| no_forward("relu"))?;
        grad.expect_shape(&shape, "relu grad")?;
        let mut dx = grad.clone();
        for (g, keep) in dx.data_mut().iter_mut().zip(mask) {
            if !keep {
                *g = T::zero();
            }
        }
        Ok(dx)
    }
}

/// Max pooling; padded positions never win.
#[derive(Debug, Clone)]
pub struct MaxPool1d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool1d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        conv_out_len(len, self.kernel, self.stride, self.pad)
    }
}

impl<T: Scalar> Layer<T> for MaxPool1d {
    fn forward(&mut self, _store: &mut ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (batch, ch, len) = dims3(x, "maxpool")?;
        let out_len = self.out_len(len);
        if out_len == 0 {
            return Err(Error::Shape(format!("maxpool: input length {len} too short")));
        }
        let xd = x.data();
        let mut out = Tensor::zeros(&[batch, ch, out_len]);
        let mut argmax = Vec::with_capacity(batch * ch * out_len);
        let od = out.data_mut();
        for row in 0..batch * ch {
            let src = &xd[row * len..(row + 1) * len];
            let dst = &mut od[row * out_len..(row + 1) * out_len];
            for (t, d) in dst.iter_mut().enumerate() {
                let start = (t * self.stride).saturating_sub(self.pad);
                let end = (t * self.stride + self.kernel).saturating_sub(self.pad).min(len);
                let mut best = start;
                for i in start + 1..end {
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                *d = src[best];
                argmax.push(row * len + best);
            }
        }
        self.cache = (mode == Mode::Train).then(|| (vec![batch, ch, len], argmax));
        Ok(out)
    }

    fn backward(&mut self, _store: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, argmax) = self.cache.take().ok_or_else(|| no_forward("maxpool"))?;
        if grad.len() != argmax.len() {
            return Err(Error::Shape("maxpool grad does not match the forward output".into()));
        }
        let mut dx = Tensor::zeros(&shape);
        let dxd = dx.data_mut();
        for (&i, &g) in argmax.iter().zip(grad.data()) {
            dxd[i] += g;
        }
        Ok(dx)
    }
}

/// Mean over the length axis: (B, C, L) -> (B, C).
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    shape: Option<(usize, usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Layer<T> for GlobalAvgPool {
    fn forward(&mut self, _store: &mut ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (batch, ch, len) = dims3(x, "global pool")?;
        let inv = T::lit(1.0 / len as f64);
        let data = x
            .data()
            .chunks(len)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        self.shape = (mode == Mode::Train).then_some((batch, ch, len));
        Tensor::from_vec(&[batch, ch], data)
    }

    fn backward(&mut self, _store: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, ch, len) = self.shape.take().ok_or_else(|| no_forward("global pool"))?;
        grad.expect_shape(&[batch, ch], "global pool grad")?;
        let inv = T::lit(1.0 / len as f64);
        let mut dx = Tensor::zeros(&[batch, ch, len]);
        for (chunk, &g) in dx.data_mut().chunks_mut(len).zip(grad.data()) {
            chunk.fill(g * inv);
        }
        Ok(dx)
    }
}

/// `y = x W^T + b` on (B, in) inputs.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    weight: ParamId,
    bias: ParamId,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weight: store.add_param(format!("{name}.weight"), normal_tensor(&[out_dim, in_dim], std, rng)),
            bias: store.add_param(format!("{name}.bias"), Tensor::zeros(&[out_dim])),
            input: None,
        }
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn forward(&mut self, store: &mut ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let batch = match *x.shape() {
            [b, d] if d == self.in_dim => b,
            _ => {
                return Err(Error::Shape(format!(
                    "linear: expected (B, {}), got {:?}",
                    self.in_dim,
                    x.shape()
                )))
            }
        };
        let mut y = vec![T::zero(); batch * self.out_dim];
        for row in y.chunks_mut(self.out_dim) {
            row.copy_from_slice(store.value(self.bias).data());
        }
        T::gemm_raw(
            batch,
            self.in_dim,
            self.out_dim,
            T::one(),
            x.data(),
            self.in_dim,
            1,
            store.value(self.weight).data(),
            1,
            self.in_dim,
            T::one(),
            &mut y,
            self.out_dim,
            1,
        );
        self.input = (mode == Mode::Train).then(|| x.clone());
        Tensor::from_vec(&[batch, self.out_dim], y)
    }

    fn backward(&mut self, store: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| no_forward("linear"))?;
        let batch = x.shape()[0];
        grad.expect_shape(&[batch, self.out_dim], "linear grad")?;
        {
            let gb = store.param_mut(self.bias).grad.data_mut();
            for row in grad.data().chunks(self.out_dim) {
                for (g, &v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        T::gemm_raw(
            self.out_dim,
            batch,
            self.in_dim,
            T::one(),
            grad.data(),
            1,
            self.out_dim,
            x.data(),
            self.in_dim,
            1,
            T::one(),
            store.param_mut(self.weight).grad.data_mut(),
            self.in_dim,
            1,
        );
        let mut dx = vec![T::zero(); batch * self.in_dim];
        T::gemm_raw(
            batch,
            self.out_dim,
            self.in_dim,
            T::one(),
            grad.data(),
            self.out_dim,
            1,
            store.value(self.weight).data(),
            self.in_dim,
            1,
            T::zero(),
            &mut dx,
            self.in_dim,
            1,
        );
        Tensor::from_vec(&[batch, self.in_dim], dx)
    }
}

/// Nearest-neighbour upsampling to a fixed output length.
#[derive(Debug, Clone)]
pub struct Upsample1d {
    pub out_len: usize,
    shape: Option<(usize, usize, usize)>,
}

impl Upsample1d {
    pub fn new(out_len: usize) -> Self {
        Self { out_len, shape: None }
    }

    fn source(&self, i: usize, in_len: usize) -> usize {
        i * in_len / self.out_len
    }
}

impl<T: Scalar> Layer<T> for Upsample1d {
    fn forward(&mut self, _store: &mut ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (batch, ch, len) = dims3(x, "upsample")?;
        let mut out = Tensor::zeros(&[batch, ch, self.out_len]);
        for (dst, src) in out.data_mut().chunks_mut(self.out_len).zip(x.data().chunks(len)) {
            for (i, d) in dst.iter_mut().enumerate() {
                *d = src[self.source(i, len)];
            }
        }
        self.shape = (mode == Mode::Train).then_some((batch, ch, len));
        Ok(out)
    }

    fn backward(&mut self, _store: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, ch, len) = self.shape.take().ok_or_else(|| no_forward("upsample"))?;
        grad.expect_shape(&[batch, ch, self.out_len], "upsample grad")?;
        let mut dx = Tensor::zeros(&[batch, ch, len]);
        for (dst, src) in dx.data_mut().chunks_mut(len).zip(grad.data().chunks(self.out_len)) {
            for (i, &g) in src.iter().enumerate() {
                dst[self.source(i, len)] += g;
            }
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let mut conv = Conv1d::new(&mut store, "c", 2, 3, 5, 2, 2, true, &mut rng);
        store.params[1].value = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let x = normal_tensor::<f64, _>(&[2, 2, 11], 1.0, &mut rng);
        let y = conv.forward(&mut store, &x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[2, 3, 6]);
        let w = store.params[0].value.data();
        for b in 0..2 {
            for o in 0..3 {
                for t in 0..6 {
                    let mut s = store.params[1].value.data()[o];
                    for c in 0..2 {
                        for k in 0..5 {
                            let i = (t * 2 + k) as isize - 2;
                            if (0..11).contains(&i) {
                                s += w[(o * 2 + c) * 5 + k] * x.data()[(b * 2 + c) * 11 + i as usize];
                            }
                        }
                    }
                    assert!((y.data()[(b * 3 + o) * 6 + t] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn linear_weight_gradient_is_input_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let mut lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
        let x = Tensor::from_vec(&[1, 3], vec![1.5, -2.0, 0.25]).unwrap();
        let y = lin.forward(&mut store, &x, Mode::Train).unwrap();
        lin.backward(&mut store, &Tensor::full(y.shape(), 1.0)).unwrap();
        assert_eq!(store.params[0].grad.data(), &[1.5, -2.0, 0.25, 1.5, -2.0, 0.25]);
        assert_eq!(store.params[1].grad.data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut store = ParamStore::<f32>::new();
        let mut relu = Relu::new();
        let g = Tensor::<f32>::zeros(&[1, 1, 4]);
        assert!(matches!(
            Layer::<f32>::backward(&mut relu, &mut store, &g),
            Err(Error::State(_))
        ));
        let x = Tensor::<f32>::zeros(&[1, 1, 4]);
        relu.forward(&mut store, &x, Mode::Eval).unwrap();
        assert!(matches!(
            Layer::<f32>::backward(&mut relu, &mut store, &g),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn maxpool_picks_window_max() {
        let mut store = ParamStore::<f32>::new();
        let mut pool = MaxPool1d::new(3, 2, 1);
        let x = Tensor::from_vec(&[1, 1, 5], vec![1.0, 3.0, 2.0, 0.0, 5.0]).unwrap();
        let y = pool.forward(&mut store, &x, Mode::Train).unwrap();
        assert_eq!(y.data(), &[3.0, 3.0, 5.0]);
        let dx = pool.backward(&mut store, &Tensor::full(&[1, 1, 3], 1.0)).unwrap();
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn upsample_repeats_nearest() {
        let mut store = ParamStore::<f32>::new();
        let mut up = Upsample1d::new(5);
        let x = Tensor::from_vec(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
        let y = up.forward(&mut store, &x, Mode::Eval).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let mut bn = BatchNorm1d::new(&mut store, "bn", 2);
        let x = normal_tensor::<f64, _>(&[4, 2, 7], 3.0, &mut rng);
        let y = bn.forward(&mut store, &x, Mode::Train).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 2 + c) * 7..(b * 2 + c + 1) * 7].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
        // Running mean moved one tenth of the way from 0 toward the batch mean.
        assert!(store.buffers[0].value.data()[0].abs() > 0.0);
    }
}
