//! Batched, differentiable kernels on candle tensors.
//!
//! Convolution and nearest upsampling are custom ops: im2col + GEMM forward
//! with explicit backward passes, since the stock CPU kernels fall back to
//! naive loops for the transposed convolution in the backward pass.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Device, Layout, Shape, Tensor, D};

use crate::error::{Error, Result};
use crate::geometry::cell_center;

type CResult<T> = candle_core::Result<T>;

fn f32_slice<'a>(storage: &'a CpuStorage, layout: &Layout, what: &str) -> CResult<&'a [f32]> {
    let data = match storage {
        CpuStorage::F32(v) => v.as_slice(),
        _ => candle_core::bail!("{what}: only f32 tensors are supported"),
    };
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{what}: input must be contiguous"),
    }
}

/// `C (m×n) [+]= op(A) (m×k) · op(B) (k×n)`, all row-major.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    n: usize,
    k: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (a_rs, a_cs) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (b_rs, b_cs) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe in-bounds accesses for the asserted lengths,
    // and `c` does not alias `a` or `b`.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.as_ptr(),
            a_cs,
            a_rs,
            b.as_ptr(),
            b_cs,
            b_rs,
            1.0f32,
            1.0f32,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(in_c: usize, in_h: usize, in_w: usize, kh: usize, kw: usize, stride: usize, padding: usize) -> CResult<Self> {
        if in_h + 2 * padding < kh || in_w + 2 * padding < kw {
            candle_core::bail!("conv2d: kernel {kh}×{kw} larger than padded input {in_h}×{in_w}");
        }
        Ok(Self {
            in_c,
            in_h,
            in_w,
            kh,
            kw,
            stride,
            padding,
            out_h: (in_h + 2 * padding - kh) / stride + 1,
            out_w: (in_w + 2 * padding - kw) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output columns `ox` whose input column `ox·stride + kj − padding` lies
    /// inside the image, as a half-open range.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let (s, p, ow) = (self.stride, self.padding, self.out_w);
        let lo = p.saturating_sub(kj).div_ceil(s).min(ow);
        // ox·s + kj − p ≤ in_w − 1
        let hi = if self.in_w + p > kj { ((self.in_w + p - kj - 1) / s + 1).min(ow) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Writes the patches of one image into columns `off..off + out_h·out_w`
    /// of a row-major matrix with leading dimension `ld`.
    fn im2col(&self, x: &[f32], col: &mut [f32], ld: usize, off: usize) {
        let (oh, ow) = (self.out_h, self.out_w);
        let mut row = 0;
        for c in 0..self.in_c {
            let plane = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let (lo, hi) = self.valid_cols(kj);
                    let dst = &mut col[row * ld + off..row * ld + off + oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.in_h as isize || lo == hi {
                            line.fill(0.0);
                            continue;
                        }
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        let first = lo * self.stride + kj - self.padding;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (out, v) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(self.stride)) {
                                *out = *v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`].
    fn col2im(&self, col: &[f32], ld: usize, off: usize, x: &mut [f32]) {
        let (oh, ow) = (self.out_h, self.out_w);
        let mut row = 0;
        for c in 0..self.in_c {
            let plane = &mut x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let (lo, hi) = self.valid_cols(kj);
                    let src = &col[row * ld + off..row * ld + off + oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.in_h as isize || lo == hi {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        let first = lo * self.stride + kj - self.padding;
                        let from = &src[oy * ow + lo..oy * ow + hi];
                        if self.stride == 1 {
                            for (v, d) in from.iter().zip(&mut line[first..first + hi - lo]) {
                                *d += *v;
                            }
                        } else {
                            for (v, d) in from.iter().zip(line[first..].iter_mut().step_by(self.stride)) {
                                *d += *v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Upper bound on patch-matrix entries per GEMM, sized to stay cache resident.
const GROUP_ENTRIES: usize = 1 << 16;

impl ConvGeometry {
    /// Consecutive `(start, len)` image groups whose patch matrix fits
    /// [`GROUP_ENTRIES`].
    fn groups(&self, b: usize) -> impl Iterator<Item = (usize, usize)> {
        let per = (GROUP_ENTRIES / (self.col_rows() * self.col_cols()).max(1)).clamp(1, b.max(1));
        (0..b).step_by(per).map(move |s| (s, per.min(b - s)))
    }

    /// Patch matrix `(rows × b·cols)` of a batch of images.
    fn batch_im2col(&self, x: &[f32], b: usize, col: &mut [f32]) {
        let cols = self.col_cols();
        let plane = self.in_c * self.in_h * self.in_w;
        for (n, xb) in x.chunks_exact(plane).take(b).enumerate() {
            self.im2col(xb, col, b * cols, n * cols);
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<[Vec<f32>; 2]> = const { std::cell::RefCell::new([Vec::new(), Vec::new()]) };
}

/// Runs `f` with two reusable buffers of at least `n0` and `n1` entries.
/// Contents are unspecified on entry.
fn with_scratch<T>(n0: usize, n1: usize, f: impl FnOnce(&mut [f32], &mut [f32]) -> T) -> T {
    SCRATCH.with(|cell| {
        let mut bufs = cell.borrow_mut();
        let [a, b] = &mut *bufs;
        if a.len() < n0 {
            a.resize(n0, 0.0);
        }
        if b.len() < n1 {
            b.resize(n1, 0.0);
        }
        f(&mut a[..n0], &mut b[..n1])
    })
}

/// Reorders `(a, b, n)` to `(b, a, n)`.
fn swap_leading_into(x: &[f32], a: usize, b: usize, n: usize, out: &mut [f32]) {
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * n..(j * a + i + 1) * n].copy_from_slice(&x[(i * b + j) * n..(i * b + j + 1) * n]);
        }
    }
}

/// 2-D convolution, NCHW input and `(C_out, C_in, kh, kw)` kernel, no bias.
#[derive(Debug, Clone, Copy)]
struct Conv2dOp {
    stride: usize,
    padding: usize,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "wskd-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let x = f32_slice(s1, l1, "conv2d input")?;
        let w = f32_slice(s2, l2, "conv2d kernel")?;
        let (b, c, h, wd) = l1.shape().dims4()?;
        let (oc, ic, kh, kw) = l2.shape().dims4()?;
        if ic != c {
            candle_core::bail!("conv2d: input has {c} channels, kernel expects {ic}");
        }
        let g = ConvGeometry::new(c, h, wd, kh, kw, self.stride, self.padding)?;
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let mut out = vec![0.0f32; b * oc * cols];
        for (start, n) in g.groups(b) {
            // (oc × rows) · (rows × n·cols) for a group of images at once.
            with_scratch(rows * n * cols, oc * n * cols, |col, y| {
                g.batch_im2col(&x[start * c * h * wd..(start + n) * c * h * wd], n, col);
                sgemm(oc, n * cols, rows, w, false, col, false, y, false);
                swap_leading_into(y, oc, n, cols, &mut out[start * oc * cols..(start + n) * oc * cols]);
            });
        }
        Ok((CpuStorage::F32(out), Shape::from((b, oc, g.out_h, g.out_w))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, wd) = x.dims4()?;
        let (_, _, kh, kw) = w.dims4()?;
        let grad_x = if x.track_op() {
            Some(grad.apply_op2_no_bwd(
                w,
                &ConvInputGrad {
                    stride: self.stride,
                    padding: self.padding,
                    in_h: h,
                    in_w: wd,
                },
            )?)
        } else {
            None
        };
        let grad_w = if w.track_op() {
            Some(x.apply_op2_no_bwd(
                &grad,
                &ConvKernelGrad {
                    stride: self.stride,
                    padding: self.padding,
                    kh,
                    kw,
                },
            )?)
        } else {
            None
        };
        Ok((grad_x, grad_w))
    }
}

struct ConvInputGrad {
    stride: usize,
    padding: usize,
    in_h: usize,
    in_w: usize,
}

impl CustomOp2 for ConvInputGrad {
    fn name(&self) -> &'static str {
        "wskd-conv2d-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let dy = f32_slice(s1, l1, "conv2d grad")?;
        let w = f32_slice(s2, l2, "conv2d kernel")?;
        let (b, oc, _, _) = l1.shape().dims4()?;
        let (_, ic, kh, kw) = l2.shape().dims4()?;
        let g = ConvGeometry::new(ic, self.in_h, self.in_w, kh, kw, self.stride, self.padding)?;
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let plane = ic * self.in_h * self.in_w;
        let mut dx = vec![0.0f32; b * plane];
        for (start, n) in g.groups(b) {
            with_scratch(oc * n * cols, rows * n * cols, |dyg, dcol| {
                swap_leading_into(&dy[start * oc * cols..(start + n) * oc * cols], n, oc, cols, dyg);
                sgemm(rows, n * cols, oc, w, true, dyg, false, dcol, false);
                for i in 0..n {
                    g.col2im(dcol, n * cols, i * cols, &mut dx[(start + i) * plane..(start + i + 1) * plane]);
                }
            });
        }
        Ok((CpuStorage::F32(dx), Shape::from((b, ic, self.in_h, self.in_w))))
    }
}

struct ConvKernelGrad {
    stride: usize,
    padding: usize,
    kh: usize,
    kw: usize,
}

impl CustomOp2 for ConvKernelGrad {
    fn name(&self) -> &'static str {
        "wskd-conv2d-kernel-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let x = f32_slice(s1, l1, "conv2d input")?;
        let dy = f32_slice(s2, l2, "conv2d grad")?;
        let (b, c, h, wd) = l1.shape().dims4()?;
        let (_, oc, _, _) = l2.shape().dims4()?;
        let g = ConvGeometry::new(c, h, wd, self.kh, self.kw, self.stride, self.padding)?;
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let mut dw = vec![0.0f32; oc * rows];
        for (k, (start, n)) in g.groups(b).enumerate() {
            with_scratch(rows * n * cols, oc * n * cols, |col, dyg| {
                g.batch_im2col(&x[start * c * h * wd..(start + n) * c * h * wd], n, col);
                swap_leading_into(&dy[start * oc * cols..(start + n) * oc * cols], n, oc, cols, dyg);
                sgemm(oc, rows, n * cols, dyg, false, col, true, &mut dw, k > 0);
            });
        }
        Ok((CpuStorage::F32(dw), Shape::from((oc, c, self.kh, self.kw))))
    }
}

/// Differentiable 2-D convolution (no bias).
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be positive"));
    }
    let x = x.contiguous()?;
    let kernel = kernel.contiguous()?;
    Ok(x.apply_op2(&kernel, Conv2dOp { stride, padding })?)
}

/// Sum of `f` over a slice: eight f32 lanes per block of 8192 values,
/// blocks combined in f64.
fn lane_sum(x: &[f32], f: impl Fn(f32) -> f32) -> f64 {
    let mut total = 0.0f64;
    for block in x.chunks(8192) {
        let mut lanes = [0.0f32; 8];
        let chunks = block.chunks_exact(8);
        let tail = chunks.remainder();
        for c in chunks {
            for (l, &v) in lanes.iter_mut().zip(c) {
                *l += f(v);
            }
        }
        total += lanes.iter().map(|&l| l as f64).sum::<f64>();
        total += tail.iter().map(|&v| f(v) as f64).sum::<f64>();
    }
    total
}

/// Per-channel mean and biased variance of an NCHW buffer.
fn channel_moments(x: &[f32], b: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (b * hw) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let planes = || (0..b).map(move |i| &x[(i * c + ch) * hw..(i * c + ch + 1) * hw]);
        let m = planes().map(|p| lane_sum(p, |v| v)).sum::<f64>() / n;
        let mf = m as f32;
        let v = planes().map(|p| lane_sum(p, |v| (v - mf) * (v - mf))).sum::<f64>() / n;
        mean[ch] = m;
        var[ch] = v;
    }
    (mean, var)
}

/// Training-mode batch normalization over `(B, H, W)` per channel.
#[derive(Debug, Clone, Copy)]
struct BatchNormTrain {
    eps: f64,
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "wskd-batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let x = f32_slice(s1, l1, "batch norm input")?;
        let gamma = f32_slice(s2, l2, "batch norm gamma")?;
        let beta = f32_slice(s3, l3, "batch norm beta")?;
        let (b, c, h, w) = l1.shape().dims4()?;
        let hw = h * w;
        let (mean, var) = channel_moments(x, b, c, hw);
        let mut y = vec![0.0f32; x.len()];
        for ch in 0..c {
            let scale = gamma[ch] as f64 / (var[ch] + self.eps).sqrt();
            let shift = beta[ch] as f64 - mean[ch] * scale;
            let (scale, shift) = (scale as f32, shift as f32);
            for i in 0..b {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for (o, &v) in y[r.clone()].iter_mut().zip(&x[r]) {
                    *o = v * scale + shift;
                }
            }
        }
        Ok((CpuStorage::F32(y), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let sums = x.apply_op2_no_bwd(&grad, &ChannelGradSums { eps: Some(self.eps) })?;
        let dx = if x.track_op() {
            Some(x.apply_op3_no_bwd(gamma, &grad, &BatchNormInputGrad { eps: self.eps })?)
        } else {
            None
        };
        let dgamma = gamma.track_op().then(|| sums.get(0)).transpose()?;
        let dbeta = beta.track_op().then(|| sums.get(1)).transpose()?;
        Ok((dx, dgamma, dbeta))
    }
}

/// `(2, C)` rows `Σ dy·x̂` and `Σ dy`, where `x̂` is `x` itself or, with
/// `eps`, `x` normalized by its batch moments.
struct ChannelGradSums {
    eps: Option<f64>,
}

impl CustomOp2 for ChannelGradSums {
    fn name(&self) -> &'static str {
        "wskd-channel-grad-sums"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let x = f32_slice(s1, l1, "channel sums input")?;
        let dy = f32_slice(s2, l2, "channel sums grad")?;
        let (b, c, h, w) = l1.shape().dims4()?;
        let hw = h * w;
        let moments = self.eps.map(|e| {
            let (m, v) = channel_moments(x, b, c, hw);
            (m, v.into_iter().map(|v| 1.0 / (v + e).sqrt()).collect::<Vec<_>>())
        });
        let mut out = vec![0.0f32; 2 * c];
        for ch in 0..c {
            let (mut sx, mut s) = (0.0f64, 0.0f64);
            for i in 0..b {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for (&g, &v) in dy[r.clone()].iter().zip(&x[r]) {
                    sx += g as f64 * v as f64;
                    s += g as f64;
                }
            }
            if let Some((m, inv)) = &moments {
                // Σ dy·(x − μ)/σ = (Σ dy·x − μ Σ dy)/σ
                sx = (sx - m[ch] * s) * inv[ch];
            }
            out[ch] = sx as f32;
            out[c + ch] = s as f32;
        }
        Ok((CpuStorage::F32(out), Shape::from((2, c))))
    }
}

/// `dx = γ/σ · (dy − mean(dy) − x̂ · mean(dy·x̂))` per channel.
struct BatchNormInputGrad {
    eps: f64,
}

impl CustomOp3 for BatchNormInputGrad {
    fn name(&self) -> &'static str {
        "wskd-batch-norm-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let x = f32_slice(s1, l1, "batch norm input")?;
        let gamma = f32_slice(s2, l2, "batch norm gamma")?;
        let dy = f32_slice(s3, l3, "batch norm grad")?;
        let (b, c, h, w) = l1.shape().dims4()?;
        let hw = h * w;
        let n = (b * hw) as f64;
        let (mean, var) = channel_moments(x, b, c, hw);
        let mut dx = vec![0.0f32; x.len()];
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + self.eps).sqrt();
            let (mut sg, mut sgx) = (0.0f64, 0.0f64);
            for i in 0..b {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for (&g, &v) in dy[r.clone()].iter().zip(&x[r]) {
                    sg += g as f64;
                    sgx += g as f64 * (v as f64 - mean[ch]) * inv;
                }
            }
            let (mg, mgx) = (sg / n, sgx / n);
            let k = gamma[ch] as f64 * inv;
            for i in 0..b {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for ((o, &g), &v) in dx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&x[r]) {
                    let xhat = (v as f64 - mean[ch]) * inv;
                    *o = (k * (g as f64 - mg - xhat * mgx)) as f32;
                }
            }
        }
        Ok((CpuStorage::F32(dx), l1.shape().clone()))
    }
}

/// Batch-statistics normalization of `x (B, C, H, W)` followed by the
/// per-channel affine `γ, β`. Also returns the batch mean and biased variance.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let x = x.contiguous()?;
    let (b, c, h, w) = x.dims4()?;
    let data = x.flatten_all()?.to_vec1::<f32>()?;
    let (mean, var) = channel_moments(&data, b, c, h * w);
    let y = x.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, BatchNormTrain { eps })?;
    Ok((y, mean, var))
}

/// `y = x · scale[c] + shift[c]` on an NCHW tensor.
#[derive(Debug, Clone, Copy)]
struct ChannelAffine;

impl CustomOp3 for ChannelAffine {
    fn name(&self) -> &'static str {
        "wskd-channel-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let x = f32_slice(s1, l1, "channel affine input")?;
        let scale = f32_slice(s2, l2, "channel affine scale")?;
        let shift = f32_slice(s3, l3, "channel affine shift")?;
        let (b, c, h, w) = l1.shape().dims4()?;
        let hw = h * w;
        let mut y = vec![0.0f32; x.len()];
        for (p, (o, src)) in y.chunks_exact_mut(hw).zip(x.chunks_exact(hw)).enumerate() {
            let ch = p % c;
            for (o, &v) in o.iter_mut().zip(src) {
                *o = v * scale[ch] + shift[ch];
            }
        }
        debug_assert_eq!(y.len(), b * c * hw);
        Ok((CpuStorage::F32(y), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        shift: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let c = scale.dim(0)?;
        let dx = if x.track_op() {
            let zeros = Tensor::zeros(c, grad.dtype(), grad.device())?;
            Some(grad.apply_op3_no_bwd(scale, &zeros, &ChannelAffine)?)
        } else {
            None
        };
        let sums = (scale.track_op() || shift.track_op())
            .then(|| x.apply_op2_no_bwd(&grad, &ChannelGradSums { eps: None }))
            .transpose()?;
        let dscale = match &sums {
            Some(s) if scale.track_op() => Some(s.get(0)?),
            _ => None,
        };
        let dshift = match &sums {
            Some(s) if shift.track_op() => Some(s.get(1)?),
            _ => None,
        };
        Ok((dx, dscale, dshift))
    }
}

/// Per-channel affine map with `scale, shift` of shape `(C,)`.
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    if scale.dims() != [c] || shift.dims() != [c] {
        return Err(Error::shape(format!(
            "channel affine expects ({c},) scale and shift, got {:?} and {:?}",
            scale.dims(),
            shift.dims()
        )));
    }
    Ok(x.contiguous()?.apply_op3(&scale.contiguous()?, &shift.contiguous()?, ChannelAffine)?)
}

/// Adds a `(C,)` bias to every channel plane.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let ones = Tensor::ones(bias.dims(), bias.dtype(), bias.device())?;
    channel_affine(x, &ones, bias)
}

/// Nearest-neighbour upsampling by an integer factor.
#[derive(Debug, Clone, Copy)]
struct UpsampleNearest {
    factor: usize,
}

impl CustomOp1 for UpsampleNearest {
    fn name(&self) -> &'static str {
        "wskd-upsample-nearest"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let x = f32_slice(s, l, "upsample input")?;
        let (b, c, h, w) = l.shape().dims4()?;
        let f = self.factor;
        let (oh, ow) = (h * f, w * f);
        let mut out = vec![0.0f32; b * c * oh * ow];
        for (plane_in, plane_out) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
            for oy in 0..oh {
                let src = &plane_in[(oy / f) * w..(oy / f + 1) * w];
                let dst = &mut plane_out[oy * ow..(oy + 1) * ow];
                for (ox, d) in dst.iter_mut().enumerate() {
                    *d = src[ox / f];
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, c, oh, ow))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let grad = grad.contiguous()?;
        Ok(Some(grad.apply_op1_no_bwd(&SumPool { factor: self.factor })?))
    }
}

struct SumPool {
    factor: usize,
}

impl CustomOp1 for SumPool {
    fn name(&self) -> &'static str {
        "wskd-sum-pool"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let x = f32_slice(s, l, "sum-pool input")?;
        let (b, c, h, w) = l.shape().dims4()?;
        let f = self.factor;
        let (oh, ow) = (h / f, w / f);
        let mut out = vec![0.0f32; b * c * oh * ow];
        for (plane_in, plane_out) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
            for y in 0..oh * f {
                let src = &plane_in[y * w..y * w + ow * f];
                let dst = &mut plane_out[(y / f) * ow..(y / f + 1) * ow];
                for (x, v) in src.iter().enumerate() {
                    dst[x / f] += v;
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, c, oh, ow))))
    }
}

pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be positive"));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    Ok(x.contiguous()?.apply_op1(UpsampleNearest { factor })?)
}

/// Interpolation matrix `R (out × in)` for cell-center aligned linear resampling.
pub fn linear_resize_matrix(input: usize, output: usize) -> Vec<f32> {
    let mut m = vec![0.0f32; output * input];
    for i in 0..output {
        let src = ((i as f64 + 0.5) * input as f64 / output as f64 - 0.5).clamp(0.0, (input - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(input - 1);
        let frac = (src - lo as f64) as f32;
        m[i * input + lo] += 1.0 - frac;
        m[i * input + hi] += frac;
    }
    m
}

/// Bilinear resize of an NCHW tensor to `out_h × out_w`, expressed as two
/// matrix products so that it differentiates through the stock matmul.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rw_t = Tensor::from_vec(linear_resize_matrix(w, out_w), (out_w, w), dev)?.t()?.contiguous()?;
    let rh_t = Tensor::from_vec(linear_resize_matrix(h, out_h), (out_h, h), dev)?.t()?.contiguous()?;
    // Rows: (b, c, h) × w  →  (b, c, h) × out_w
    let y = x.contiguous()?.reshape((b * c * h, w))?.matmul(&rw_t)?;
    // Columns: (b, c, out_w) × h  →  (b, c, out_w) × out_h
    let y = y
        .reshape((b, c, h, out_w))?
        .transpose(2, 3)?
        .contiguous()?
        .reshape((b * c * out_w, h))?
        .matmul(&rh_t)?;
    Ok(y.reshape((b, c, out_w, out_h))?.transpose(2, 3)?.contiguous()?)
}

/// Per-channel softmax over the spatial grid of a `(B, K, H, W)` tensor.
pub fn spatial_softmax(logits: &Tensor) -> Result<Tensor> {
    let (b, k, h, w) = logits.dims4()?;
    let flat = logits.reshape((b, k, h * w))?;
    let max = flat.max_keepdim(D::Minus1)?.detach();
    let e = flat.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?.reshape((b, k, h, w))?)
}

/// `(H·W) × 2` matrix of cell-center coordinates `(u, v)`.
fn coordinate_grid(h: usize, w: usize, dev: &Device) -> Result<Tensor> {
    let mut grid = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            grid.push(cell_center(j, w) as f32);
            grid.push(cell_center(i, h) as f32);
        }
    }
    Ok(Tensor::from_vec(grid, (h * w, 2), dev)?)
}

/// Expected coordinates `(B, K, 2)` under normalized `(B, K, H, W)` maps.
pub fn soft_argmax(probs: &Tensor) -> Result<Tensor> {
    let (b, k, h, w) = probs.dims4()?;
    let grid = coordinate_grid(h, w, probs.device())?;
    Ok(probs.reshape((b * k, h * w))?.matmul(&grid)?.reshape((b, k, 2))?)
}

/// Gaussian maps `(B, K, H, W)` centered at `kps (B, K, 2)` with the
/// `(2πσ²)^(-1/2)` normalizer.
pub fn render_gaussian(kps: &Tensor, sigma: f64, h: usize, w: usize) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let (b, k, _) = kps.dims3()?;
    let dev = kps.device();
    let gu = Tensor::from_vec((0..w).map(|j| cell_center(j, w) as f32).collect::<Vec<_>>(), (1, 1, w), dev)?;
    let gv = Tensor::from_vec((0..h).map(|i| cell_center(i, h) as f32).collect::<Vec<_>>(), (1, 1, h), dev)?;
    let u = kps.narrow(2, 0, 1)?;
    let v = kps.narrow(2, 1, 1)?;
    let inv = -1.0 / (2.0 * sigma * sigma);
    let eu = gu.broadcast_sub(&u)?.sqr()?.affine(inv, 0.0)?.exp()?; // (B, K, W)
    let ev = gv.broadcast_sub(&v)?.sqr()?.affine(inv, 0.0)?.exp()?; // (B, K, H)
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma).sqrt();
    let maps = ev
        .reshape((b, k, h, 1))?
        .broadcast_mul(&eu.reshape((b, k, 1, w))?)?
        .affine(norm, 0.0)?;
    Ok(maps)
}

/// Mirror the last (width) axis.
pub fn flip_width(x: &Tensor) -> Result<Tensor> {
    let w = x.dim(D::Minus1)?;
    let idx: Vec<u32> = (0..w as u32).rev().collect();
    let idx = Tensor::from_vec(idx, w, x.device())?;
    Ok(x.index_select(&idx, x.rank() - 1)?)
}

/// `u → 1 − u` on a `(B, K, 2)` keypoint tensor.
pub fn flip_keypoints(kps: &Tensor) -> Result<Tensor> {
    let u = kps.narrow(2, 0, 1)?.affine(-1.0, 1.0)?;
    let v = kps.narrow(2, 1, 1)?;
    Ok(Tensor::cat(&[&u, &v], 2)?)
}
