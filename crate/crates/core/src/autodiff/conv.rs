//! Spatial primitives on `[batch, channels, height, width]` tensors.

use super::graph::{Graph, Op, Var};
use super::kernels::gemm;
use super::Tensor;
use crate::error::{config, Result};

/// Stride, zero padding and dilation of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl ConvOptions {
    /// Stride 1 with padding that keeps the spatial size of a `k × k` kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_output_size(input: usize, kernel: usize, opts: ConvOptions) -> Option<usize> {
    let span = opts.dilation * (kernel - 1) + 1;
    let padded = input + 2 * opts.padding;
    (opts.stride > 0 && padded >= span).then(|| (padded - span) / opts.stride + 1)
}

#[derive(Clone, Debug)]
pub(crate) struct ConvGeometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    opts: ConvOptions,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one sample into a `(cin·kh·kw) × (ho·wo)` patch matrix.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let p = self.out_plane();
        let o = &self.opts;
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * o.stride + ki * o.dilation) as isize - o.padding as isize;
                        let dst = &mut col[row + oy * self.wo..row + (oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * o.stride + kj * o.dilation) as isize - o.padding as isize;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: folds patch gradients back onto the input.
    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let p = self.out_plane();
        let o = &self.opts;
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * o.stride + ki * o.dilation) as isize - o.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &col[row + oy * self.wo..row + (oy + 1) * self.wo];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * o.stride + kj * o.dilation) as isize - o.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    geom: &ConvGeometry,
    x: &[f64],
    kernel: &[f64],
    g: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> ConvGrads {
    let (k, p) = (geom.patch_len(), geom.out_plane());
    let in_sample = geom.cin * geom.h * geom.w;
    let mut dx = want_input.then(|| vec![0.0; geom.batch * in_sample]);
    let mut dk = want_kernel.then(|| vec![0.0; geom.cout * k]);
    let mut col = vec![0.0; k * p];
    for b in 0..geom.batch {
        let gb = &g[b * geom.cout * p..(b + 1) * geom.cout * p];
        if let Some(dk) = dk.as_mut() {
            geom.im2col(&x[b * in_sample..(b + 1) * in_sample], &mut col);
            gemm(geom.cout, p, k, gb, false, &col, true, 1.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(k, geom.cout, p, kernel, true, gb, false, 0.0, &mut col);
            geom.col2im(&col, &mut dx[b * in_sample..(b + 1) * in_sample]);
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
    }
}

pub(crate) fn bias_backward(geom: &ConvGeometry, g: &[f64]) -> Vec<f64> {
    let p = geom.out_plane();
    let mut db = vec![0.0; geom.cout];
    for (i, plane) in g.chunks(p).enumerate() {
        db[i % geom.cout] += plane.iter().sum::<f64>();
    }
    db
}

/// Per output index along one axis: the two source indices and the weight of the second.
fn align_corners_taps(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let out = input * factor;
    let ratio = if out > 1 {
        (input - 1) as f64 / (out - 1) as f64
    } else {
        0.0
    };
    (0..out)
        .map(|o| {
            let src = o as f64 * ratio;
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample_backward(in_shape: &[usize], factor: usize, g: &[f64]) -> Vec<f64> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ty, tx) = (align_corners_taps(h, factor), align_corners_taps(w, factor));
    let (ho, wo) = (h * factor, w * factor);
    let planes = in_shape[0] * in_shape[1];
    let mut d = vec![0.0; planes * h * w];
    for p in 0..planes {
        let dp = &mut d[p * h * w..(p + 1) * h * w];
        let gp = &g[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let v = gp[oy * wo + ox];
                dp[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                dp[y0 * w + x1] += v * (1.0 - wy) * wx;
                dp[y1 * w + x0] += v * wy * (1.0 - wx);
                dp[y1 * w + x1] += v * wy * wx;
            }
        }
    }
    d
}

pub(crate) fn avg_pool_backward(in_shape: &[usize], size: usize, g: &[f64]) -> Vec<f64> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (h / size, w / size);
    let planes = in_shape[0] * in_shape[1];
    let scale = 1.0 / (size * size) as f64;
    let mut d = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                d[p * h * w + y * w + x] = g[p * ho * wo + (y / size) * wo + x / size] * scale;
            }
        }
    }
    d
}

impl Graph {
    /// 2-D cross-correlation with zero padding.
    ///
    /// `input` is `[B, Cin, H, W]`, `kernel` is `[Cout, Cin, kh, kw]` and the
    /// optional `bias` is `[Cout]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, opts: ConvOptions) -> Result<Var> {
        let (batch, cin, h, w) = self.value(input).dims4()?;
        let (cout, kcin, kh, kw) = self.value(kernel).dims4()?;
        if kcin != cin {
            return config(format!("conv2d: input has {cin} channels but kernel expects {kcin}"));
        }
        if opts.stride == 0 || opts.dilation == 0 {
            return config(format!(
                "conv2d: stride ({}) and dilation ({}) must be positive",
                opts.stride, opts.dilation
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return config(format!("conv2d: bias shape {:?}, expected [{cout}]", self.shape(b)));
            }
        }
        let (Some(ho), Some(wo)) = (conv_output_size(h, kh, opts), conv_output_size(w, kw, opts)) else {
            return config(format!(
                "conv2d: {h}x{w} input with padding {} is smaller than the {kh}x{kw} kernel at dilation {}",
                opts.padding, opts.dilation
            ));
        };
        let geom = ConvGeometry {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            opts,
            ho,
            wo,
        };
        let (k, p) = (geom.patch_len(), geom.out_plane());
        let x = self.value(input).data();
        let wk = self.value(kernel).data();
        let mut out = vec![0.0; batch * cout * p];
        let mut col = vec![0.0; k * p];
        for b in 0..batch {
            geom.im2col(&x[b * cin * h * w..(b + 1) * cin * h * w], &mut col);
            gemm(cout, k, p, wk, false, &col, false, 0.0, &mut out[b * cout * p..]);
        }
        if let Some(bv) = bias {
            let bias = self.value(bv).data();
            for (i, plane) in out.chunks_mut(p).enumerate() {
                let v = bias[i % cout];
                plane.iter_mut().for_each(|o| *o += v);
            }
        }
        let value = Tensor::from_parts(vec![batch, cout, ho, wo], out);
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            value,
            &inputs,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// 2×2 max pooling with stride 2. Ties route the gradient to the first
    /// element of the window in row-major order.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return config(format!("max_pool2: spatial size {h}x{w} must be even"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for p in 0..b * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![b, c, ho, wo], out);
        Ok(self.push(value, &[input], Op::MaxPool2 { input, argmax }))
    }

    /// Mean over non-overlapping `size × size` windows.
    pub fn avg_pool(&mut self, input: Var, size: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if size == 0 || h % size != 0 || w % size != 0 {
            return config(format!("avg_pool: {h}x{w} is not divisible by window {size}"));
        }
        let (ho, wo) = (h / size, w / size);
        let x = self.value(input).data();
        let scale = 1.0 / (size * size) as f64;
        let mut out = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            for y in 0..h {
                for xx in 0..w {
                    out[p * ho * wo + (y / size) * wo + xx / size] += x[p * h * w + y * w + xx];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let value = Tensor::from_parts(vec![b, c, ho, wo], out);
        Ok(self.push(value, &[input], Op::AvgPool { input, size }))
    }

    /// Bilinear upsampling by an integer factor with align-corners sampling:
    /// output index `o` reads source coordinate `o·(H−1)/(H·factor−1)`.
    pub fn bilinear_upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if factor == 0 {
            return config("bilinear_upsample: factor must be at least 1");
        }
        let (ty, tx) = (align_corners_taps(h, factor), align_corners_taps(w, factor));
        let (ho, wo) = (h * factor, w * factor);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        for p in 0..b * c {
            let xp = &x[p * h * w..(p + 1) * h * w];
            for &(y0, y1, wy) in &ty {
                for &(x0, x1, wx) in &tx {
                    let top = xp[y0 * w + x0] * (1.0 - wx) + xp[y0 * w + x1] * wx;
                    let bottom = xp[y1 * w + x0] * (1.0 - wx) + xp[y1 * w + x1] * wx;
                    out.push(top * (1.0 - wy) + bottom * wy);
                }
            }
        }
        let value = Tensor::from_parts(vec![b, c, ho, wo], out);
        Ok(self.push(value, &[input], Op::Upsample { input, factor }))
    }
}
