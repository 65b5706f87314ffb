//! Raw forward/backward kernels over row-major NCHW buffers. The autodiff
//! graph wraps these; nothing here records history.

use super::scalar::matmul_into;
use super::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: weight.to_vec(),
        };
        let (&[batch, cin, h, w], &[cout, wcin, kh, kw]) = (x, weight) else {
            return Err(mismatch());
        };
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be >= 1"));
        }
        if wcin != cin || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(mismatch());
        }
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<F: Float>(x: &[F], g: &ConvGeom, col: &mut [F]) {
    let (h, w, s, p) = (g.h as isize, g.w as isize, g.stride as isize, g.pad as isize);
    let npix = g.col_cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ky as isize - p;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= h {
                        out.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *o = if ix < 0 || ix >= w { F::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<F: Float>(col: &[F], g: &ConvGeom, dx: &mut [F]) {
    let (h, w, s, p) = (g.h as isize, g.w as isize, g.stride as isize, g.pad as isize);
    let npix = g.col_cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<F: Float>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: weight.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let (rows, npix) = (g.col_rows(), g.col_cols());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * npix;
    let mut out = vec![F::zero(); g.batch * out_per];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![F::zero(); rows * npix]
    };
    for n in 0..g.batch {
        let xs = &x.data()[n * in_per..(n + 1) * in_per];
        let ys = &mut out[n * out_per..(n + 1) * out_per];
        if let Some(b) = bias {
            for (co, chunk) in ys.chunks_mut(npix).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[co]);
            }
        }
        let cols: &[F] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut col);
            &col
        };
        matmul_into(weight.data(), false, cols, false, ys, g.cout, rows, npix, bias.is_some());
    }
    Ok(Tensor::from_parts(vec![g.batch, g.cout, g.ho, g.wo], out))
}

pub(crate) struct ConvGrads<F> {
    pub dx: Option<Vec<F>>,
    pub dw: Option<Vec<F>>,
    pub db: Option<Vec<F>>,
}

pub(crate) fn conv2d_backward<F: Float>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    gy: &[F],
    stride: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> Result<ConvGrads<F>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    let (rows, npix) = (g.col_rows(), g.col_cols());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * npix;
    let mut dx = need.0.then(|| vec![F::zero(); x.numel()]);
    let mut dw = need.1.then(|| vec![F::zero(); weight.numel()]);
    let mut db = need.2.then(|| vec![F::zero(); g.cout]);
    let mut col = vec![F::zero(); if g.is_pointwise() { 0 } else { rows * npix }];
    let mut dcol = vec![F::zero(); if dx.is_some() { rows * npix } else { 0 }];
    for n in 0..g.batch {
        let gys = &gy[n * out_per..(n + 1) * out_per];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in gys.chunks(npix).enumerate() {
                db[co] += chunk.iter().copied().sum::<F>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[n * in_per..(n + 1) * in_per];
            let cols: &[F] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut col);
                &col
            };
            matmul_into(gys, false, cols, true, dw, g.cout, npix, rows, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[n * in_per..(n + 1) * in_per];
            if g.is_pointwise() {
                matmul_into(weight.data(), true, gys, false, dxs, rows, g.cout, npix, true);
            } else {
                matmul_into(weight.data(), true, gys, false, &mut dcol, rows, g.cout, npix, false);
                col2im(&dcol, &g, dxs);
            }
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

/// Per-axis source taps for align-corners-false bilinear resampling.
fn bilinear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn bilinear_forward<F: Float>(x: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    let (b, c, h, w) = x.dims4()?;
    if factor == 0 {
        return Err(Error::invalid("bilinear upsample factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (ho, wo) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut out = vec![F::zero(); b * c * ho * wo];
    for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (F::lit(wy0), F::lit(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (F::lit(wx0), F::lit(wx1));
                dst[oy * wo + ox] = wy0 * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                    + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, ho, wo], out))
}

pub(crate) fn bilinear_backward<F: Float>(in_shape: &[usize], gy: &[F], factor: usize) -> Vec<F> {
    let (h, w) = (in_shape[2], in_shape[3]);
    if factor == 1 {
        return gy.to_vec();
    }
    let (ho, wo) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut dx = vec![F::zero(); in_shape.iter().product()];
    for (dst, g) in dx.chunks_mut(h * w).zip(gy.chunks(ho * wo)) {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (F::lit(wy0), F::lit(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (F::lit(wx0), F::lit(wx1));
                let v = g[oy * wo + ox];
                dst[y0 * w + x0] += wy0 * wx0 * v;
                dst[y0 * w + x1] += wy0 * wx1 * v;
                dst[y1 * w + x0] += wy1 * wx0 * v;
                dst[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
    dx
}

pub(crate) fn nearest_forward<F: Float>(x: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    let (b, c, h, w) = x.dims4()?;
    if factor == 0 {
        return Err(Error::invalid("nearest upsample factor must be >= 1"));
    }
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![F::zero(); b * c * ho * wo];
    for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
        for oy in 0..ho {
            for ox in 0..wo {
                dst[oy * wo + ox] = plane[(oy / factor) * w + ox / factor];
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, ho, wo], out))
}

pub(crate) fn nearest_backward<F: Float>(in_shape: &[usize], gy: &[F], factor: usize) -> Vec<F> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (h * factor, w * factor);
    let mut dx = vec![F::zero(); in_shape.iter().product()];
    for (dst, g) in dx.chunks_mut(h * w).zip(gy.chunks(ho * wo)) {
        for oy in 0..ho {
            for ox in 0..wo {
                dst[(oy / factor) * w + ox / factor] += g[oy * wo + ox];
            }
        }
    }
    dx
}

pub(crate) fn avg_pool_forward<F: Float>(x: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    let (b, c, h, w) = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!(
            "average pool factor {factor} must be >= 1 and divide {h}x{w}"
        )));
    }
    let (ho, wo) = (h / factor, w / factor);
    let norm = F::lit(1.0 / (factor * factor) as f64);
    let mut out = vec![F::zero(); b * c * ho * wo];
    for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = F::zero();
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += plane[(oy * factor + dy) * w + ox * factor + dx];
                    }
                }
                dst[oy * wo + ox] = acc * norm;
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, ho, wo], out))
}

pub(crate) fn avg_pool_backward<F: Float>(in_shape: &[usize], gy: &[F], factor: usize) -> Vec<F> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (h / factor, w / factor);
    let norm = F::lit(1.0 / (factor * factor) as f64);
    let mut dx = vec![F::zero(); in_shape.iter().product()];
    for (dst, g) in dx.chunks_mut(h * w).zip(gy.chunks(ho * wo)) {
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = g[(y / factor) * wo + x / factor] * norm;
            }
        }
    }
    dx
}

pub(crate) struct GroupNormSaved<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub(crate) fn group_norm_forward<F: Float>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    groups: usize,
    eps: f64,
) -> Result<(Tensor<F>, GroupNormSaved<F>)> {
    let (b, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(format!(
            "group norm: {c} channels not divisible into {groups} groups"
        )));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "group_norm affine",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let hw = h * w;
    let per_group = (c / groups) * hw;
    let inv_n = F::lit(1.0 / per_group as f64);
    let mut out = vec![F::zero(); x.numel()];
    let mut xhat = vec![F::zero(); x.numel()];
    let mut rstd = vec![F::zero(); b * groups];
    for (gi, chunk) in x.data().chunks(per_group).enumerate() {
        let mean = chunk.iter().copied().sum::<F>() * inv_n;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_n;
        let r = F::one() / (var + F::lit(eps)).sqrt();
        rstd[gi] = r;
        let base = gi * per_group;
        let c0 = (gi % groups) * (c / groups);
        for (i, &v) in chunk.iter().enumerate() {
            let ch = c0 + i / hw;
            let xn = (v - mean) * r;
            xhat[base + i] = xn;
            out[base + i] = xn * gamma.data()[ch] + beta.data()[ch];
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), GroupNormSaved { xhat, rstd }))
}

pub(crate) fn group_norm_backward<F: Float>(
    shape: &[usize],
    gamma: &[F],
    saved: &GroupNormSaved<F>,
    gy: &[F],
    groups: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let per_group = (c / groups) * hw;
    let inv_n = F::lit(1.0 / per_group as f64);
    let mut dx = vec![F::zero(); gy.len()];
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for gi in 0..gy.len() / per_group {
        let base = gi * per_group;
        let c0 = (gi % groups) * (c / groups);
        let mut sum_dxhat = F::zero();
        let mut sum_dxhat_xhat = F::zero();
        for i in 0..per_group {
            let ch = c0 + i / hw;
            let g = gy[base + i];
            let xh = saved.xhat[base + i];
            dgamma[ch] += g * xh;
            dbeta[ch] += g;
            let dxh = g * gamma[ch];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh;
        }
        let r = saved.rstd[gi];
        for i in 0..per_group {
            let ch = c0 + i / hw;
            let dxh = gy[base + i] * gamma[ch];
            let xh = saved.xhat[base + i];
            dx[base + i] = r * (dxh - inv_n * sum_dxhat - xh * inv_n * sum_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

#[inline]
pub(crate) fn sigmoid<F: Float>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}
