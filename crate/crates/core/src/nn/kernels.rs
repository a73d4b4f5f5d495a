//! Numeric kernels behind the graph ops. Everything here is graph-free and
//! operates on raw row-major buffers.

use super::Tensor;
use crate::error::{Error, Result};

/// Strides of a matrix operand as (row stride, column stride).
pub(crate) type Strides = (usize, usize);

fn max_index(rows: usize, cols: usize, (rs, cs): Strides) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs
    }
}

/// `C = A·B + beta·C` for an `m×k` A and a `k×n` B with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || max_index(m, k, sa) < a.len(), "gemm: A out of bounds");
    assert!(k == 0 || max_index(k, n, sb) < b.len(), "gemm: B out of bounds");
    assert!(max_index(m, n, sc) < c.len(), "gemm: C out of bounds");
    // SAFETY: every index the kernel touches is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, padding: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, kernel: &Tensor, bias: &Tensor, pad: usize, stride: usize) -> Result<Self> {
        let (n, c, h, w) = x.dims4()?;
        let (k, kc, kh, kw) = kernel.dims4()?;
        if kc != c {
            return Err(Error::shape(format!(
                "input {:?} has {c} channels but kernel {:?} expects {kc}",
                x.shape(),
                kernel.shape()
            )));
        }
        if bias.shape() != [k] {
            return Err(Error::shape(format!(
                "bias {:?} does not match kernel {:?}",
                bias.shape(),
                kernel.shape()
            )));
        }
        let out = |len, kl| {
            conv_out_len(len, kl, pad, stride).ok_or_else(|| {
                Error::shape(format!(
                    "input {:?} is too small for kernel {:?} (padding {pad}, stride {stride})",
                    x.shape(),
                    kernel.shape()
                ))
            })
        };
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            ho: out(h, kh)?,
            wo: out(w, kw)?,
            pad,
            stride,
        })
    }

    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn out_sample(&self) -> usize {
        self.k * self.out_plane()
    }

    /// Valid `ow` range for kernel column `kj` (input column in bounds).
    fn ow_range(&self, kj: usize) -> (usize, usize) {
        let s = self.stride;
        // iw = ow*s + kj - pad must satisfy 0 <= iw < w
        let lo = if kj >= self.pad {
            0
        } else {
            (self.pad - kj).div_ceil(s)
        };
        let hi = if self.w + self.pad > kj {
            ((self.w + self.pad - kj - 1) / s + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds one sample into a `(C·kh·kw) × (Ho·Wo)` patch matrix.
pub(crate) fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = g.ow_range(kj);
                for oh in 0..g.ho {
                    let seg = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &xc[ih as usize * g.w..(ih as usize + 1) * g.w];
                    seg[..lo].fill(0.0);
                    seg[hi..].fill(0.0);
                    if g.stride == 1 {
                        let iw0 = lo + kj - g.pad;
                        seg[lo..hi].copy_from_slice(&src[iw0..iw0 + (hi - lo)]);
                    } else {
                        for (ow, s) in seg.iter_mut().enumerate().take(hi).skip(lo) {
                            *s = src[ow * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = g.ow_range(kj);
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let seg = &src[oh * g.wo..(oh + 1) * g.wo];
                    for ow in lo..hi {
                        dst[ow * g.stride + kj - g.pad] += seg[ow];
                    }
                }
            }
        }
    }
}

/// Direct 7-loop cross-correlation with zero padding.
pub fn conv2d_direct(
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    padding: usize,
    stride: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(x, kernel, bias, padding, stride)?;
    let (xd, kd, bd) = (x.data(), kernel.data(), bias.data());
    let mut out = vec![0.0; g.n * g.out_sample()];
    for n in 0..g.n {
        for k in 0..g.k {
            for oh in 0..g.ho {
                for ow in 0..g.wo {
                    let mut acc = bd[k];
                    for c in 0..g.c {
                        for ki in 0..g.kh {
                            let ih = (oh * stride + ki) as isize - padding as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            for kj in 0..g.kw {
                                let iw = (ow * stride + kj) as isize - padding as isize;
                                if iw < 0 || iw >= g.w as isize {
                                    continue;
                                }
                                acc += xd[((n * g.c + c) * g.h + ih as usize) * g.w + iw as usize]
                                    * kd[((k * g.c + c) * g.kh + ki) * g.kw + kj];
                            }
                        }
                    }
                    out[((n * g.k + k) * g.ho + oh) * g.wo + ow] = acc;
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.k, g.ho, g.wo], out)
}

/// Cross-correlation through patch unfolding and a matrix product.
pub fn conv2d_im2col(
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    padding: usize,
    stride: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(x, kernel, bias, padding, stride)?;
    let plane = g.out_plane();
    let mut cols = vec![0.0; g.patch() * plane];
    let mut out = vec![0.0; g.n * g.out_sample()];
    for n in 0..g.n {
        im2col(&g, &x.data()[n * g.in_sample()..(n + 1) * g.in_sample()], &mut cols);
        let y = &mut out[n * g.out_sample()..(n + 1) * g.out_sample()];
        for (k, row) in y.chunks_exact_mut(plane).enumerate() {
            row.fill(bias.data()[k]);
        }
        gemm(
            g.k,
            g.patch(),
            plane,
            kernel.data(),
            (g.patch(), 1),
            &cols,
            (plane, 1),
            1.0,
            y,
            (plane, 1),
        );
    }
    Tensor::new(vec![g.n, g.k, g.ho, g.wo], out)
}

/// Gradients of a convolution given the upstream gradient `dy`.
/// Returns `(dx, dkernel, dbias)`; `dx` is skipped when not needed.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let plane = g.out_plane();
    let patch = g.patch();
    let mut cols = vec![0.0; patch * plane];
    let mut dcols = vec![0.0; patch * plane];
    let mut dk = vec![0.0; g.k * patch];
    let mut db = vec![0.0; g.k];
    let mut dx = need_dx.then(|| vec![0.0; g.n * g.in_sample()]);
    for n in 0..g.n {
        let dyn_ = &dy[n * g.out_sample()..(n + 1) * g.out_sample()];
        for (k, row) in dyn_.chunks_exact(plane).enumerate() {
            db[k] += row.iter().sum::<f64>();
        }
        im2col(g, &x[n * g.in_sample()..(n + 1) * g.in_sample()], &mut cols);
        // dK += dY · colsᵀ
        gemm(g.k, plane, patch, dyn_, (plane, 1), &cols, (1, plane), 1.0, &mut dk, (patch, 1));
        if let Some(dx) = dx.as_mut() {
            // dcols = Kᵀ · dY
            gemm(patch, g.k, plane, kernel, (1, patch), dyn_, (plane, 1), 0.0, &mut dcols, (plane, 1));
            col2im(g, &dcols, &mut dx[n * g.in_sample()..(n + 1) * g.in_sample()]);
        }
    }
    (dx, dk, db)
}

/// Non-overlapping `size×size` average pooling; trailing rows/columns that
/// do not fill a window are dropped.
pub fn avgpool2d(x: &Tensor, size: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if size == 0 || h < size || w < size {
        return Err(Error::shape(format!(
            "input {:?} is smaller than the {size}x{size} pool",
            x.shape()
        )));
    }
    let (ho, wo) = (h / size, w / size);
    let scale = 1.0 / (size * size) as f64;
    let xd = x.data();
    let mut out = vec![0.0; n * c * ho * wo];
    for nc in 0..n * c {
        let src = &xd[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
        for oh in 0..ho {
            for di in 0..size {
                let row = &src[(oh * size + di) * w..(oh * size + di + 1) * w];
                for ow in 0..wo {
                    dst[oh * wo + ow] += row[ow * size..(ow + 1) * size].iter().sum::<f64>();
                }
            }
        }
        dst.iter_mut().for_each(|v| *v *= scale);
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub(crate) fn avgpool2d_backward(shape: &[usize], size: usize, dy: &[f64]) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / size, w / size);
    let scale = 1.0 / (size * size) as f64;
    let mut dx = vec![0.0; n * c * h * w];
    for nc in 0..n * c {
        let src = &dy[nc * ho * wo..(nc + 1) * ho * wo];
        let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
        for oh in 0..ho {
            for di in 0..size {
                let row = &mut dst[(oh * size + di) * w..(oh * size + di + 1) * w];
                for ow in 0..wo {
                    let g = src[oh * wo + ow] * scale;
                    row[ow * size..(ow + 1) * size].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    dx
}

/// Spatial mean per channel, `N×C×H×W → N×C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::shape("global pooling over an empty plane"));
    }
    let plane = h * w;
    let out = x
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(vec![n, c], out)
}

/// Per-channel view of an `N×C×…` tensor: (N, C, elements per channel plane).
pub(crate) fn channel_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [n, c, rest @ ..] => Ok((*n, *c, rest.iter().product())),
        s => Err(Error::shape(format!("batch norm needs N×C×…, got {s:?}"))),
    }
}
