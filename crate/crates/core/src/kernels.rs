//! Raw numeric kernels over `[N, C, H, W]` planes.
//!
//! These know nothing about autograd. `ops` wires them into the graph.
//! Every kernel parallelises over independent output planes only, so
//! results do not depend on thread scheduling.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mirror index without edge repetition, extended periodically so any pad
/// width is valid (a size-1 axis maps everything to 0).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Geometry of a reflection-padded "same" convolution.
///
/// Padding is `(k-1)/2` before and the remainder after, so the output of a
/// stride-`s` convolution is `ceil(h / s)`.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub hp: usize,
    pub wp: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, w: &Tensor, stride: usize) -> Result<Self> {
        let [n, c_in, h, wd] = x.dims4()?;
        let [c_out, wc_in, kh, kw] = w.dims4()?;
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv weight expects {} input channels, input has {}",
                wc_in, c_in
            )));
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::Shape("zero stride or kernel size".into()));
        }
        if h == 0 || wd == 0 {
            return Err(Error::Dimension("empty spatial extent".into()));
        }
        let hp = h + kh - 1;
        let wp = wd + kw - 1;
        Ok(Self {
            n,
            c_in,
            c_out,
            h,
            w: wd,
            kh,
            kw,
            stride,
            hp,
            wp,
            ho: (hp - kh) / stride + 1,
            wo: (wp - kw) / stride + 1,
            pad_top: (kh - 1) / 2,
            pad_left: (kw - 1) / 2,
        })
    }

    fn row_map(&self) -> Vec<usize> {
        (0..self.hp)
            .map(|p| reflect_index(p as isize - self.pad_top as isize, self.h))
            .collect()
    }

    fn col_map(&self) -> Vec<usize> {
        (0..self.wp)
            .map(|p| reflect_index(p as isize - self.pad_left as isize, self.w))
            .collect()
    }
}

/// Reflection-pads every plane of `x` to `hp x wp`, placing the original at
/// `(top, left)`.
pub fn reflect_pad(x: &Tensor, top: usize, left: usize, hp: usize, wp: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let rows: Vec<usize> = (0..hp)
        .map(|p| reflect_index(p as isize - top as isize, h))
        .collect();
    let cols: Vec<usize> = (0..wp)
        .map(|p| reflect_index(p as isize - left as isize, w))
        .collect();
    let mut out = vec![0.0; n * c * hp * wp];
    out.par_chunks_mut(hp * wp)
        .zip(x.data().par_chunks(h * w))
        .for_each(|(dst, src)| {
            for (py, &sy) in rows.iter().enumerate() {
                let srow = &src[sy * w..(sy + 1) * w];
                for (d, &sx) in dst[py * wp..(py + 1) * wp].iter_mut().zip(&cols) {
                    *d = srow[sx];
                }
            }
        });
    Tensor::new(&[n, c, hp, wp], out)
}

fn pad_for_conv(x: &Tensor, g: &ConvGeom) -> Result<Tensor> {
    reflect_pad(x, g.pad_top, g.pad_left, g.hp, g.wp)
}

/// Returns the output and the padded input (kept for the backward pass).
pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeom::new(x, weight, stride)?;
    if let Some(b) = bias {
        if b.numel() != g.c_out {
            return Err(Error::Shape(format!(
                "bias has {} elements, conv has {} outputs",
                b.numel(),
                g.c_out
            )));
        }
    }
    let padded = pad_for_conv(x, &g)?;
    let pdata = padded.data();
    let wdata = weight.data();
    let plane_in = g.hp * g.wp;
    let plane_out = g.ho * g.wo;
    let ksize = g.kh * g.kw;
    let mut out = vec![0.0; g.n * g.c_out * plane_out];
    out.par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(idx, dst)| {
            let n = idx / g.c_out;
            let co = idx % g.c_out;
            let b0 = bias.map_or(0.0, |b| b.data()[co]);
            dst.fill(b0);
            for ci in 0..g.c_in {
                let src = &pdata[(n * g.c_in + ci) * plane_in..][..plane_in];
                let wk = &wdata[(co * g.c_in + ci) * ksize..][..ksize];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wk[ky * g.kw + kx];
                        for oy in 0..g.ho {
                            let srow = &src[(oy * g.stride + ky) * g.wp..][..g.wp];
                            let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                            if g.stride == 1 {
                                for (d, s) in drow.iter_mut().zip(&srow[kx..kx + g.wo]) {
                                    *d += wv * s;
                                }
                            } else {
                                for (ox, d) in drow.iter_mut().enumerate() {
                                    *d += wv * srow[kx + ox * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok((Tensor::new(&[g.n, g.c_out, g.ho, g.wo], out)?, padded))
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    grad_out: &Tensor,
    x_shape: &[usize],
    padded: &Tensor,
    weight: &Tensor,
    stride: usize,
) -> Result<ConvGrads> {
    let x_proto = Tensor::zeros(&[1, x_shape[1], x_shape[2], x_shape[3]]);
    let mut g = ConvGeom::new(&x_proto, weight, stride)?;
    g.n = x_shape[0];
    let gdata = grad_out.data();
    let pdata = padded.data();
    let wdata = weight.data();
    let plane_in = g.hp * g.wp;
    let plane_out = g.ho * g.wo;
    let ksize = g.kh * g.kw;

    let mut bias = vec![0.0; g.c_out];
    for n in 0..g.n {
        for (co, b) in bias.iter_mut().enumerate() {
            *b += gdata[(n * g.c_out + co) * plane_out..][..plane_out]
                .iter()
                .sum::<f64>();
        }
    }

    let mut gw = vec![0.0; g.c_out * g.c_in * ksize];
    gw.par_chunks_mut(g.c_in * ksize)
        .enumerate()
        .for_each(|(co, dst)| {
            for n in 0..g.n {
                let go = &gdata[(n * g.c_out + co) * plane_out..][..plane_out];
                for ci in 0..g.c_in {
                    let src = &pdata[(n * g.c_in + ci) * plane_in..][..plane_in];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let mut acc = 0.0;
                            for oy in 0..g.ho {
                                let srow = &src[(oy * g.stride + ky) * g.wp..][..g.wp];
                                let grow = &go[oy * g.wo..(oy + 1) * g.wo];
                                if g.stride == 1 {
                                    for (a, b) in grow.iter().zip(&srow[kx..kx + g.wo]) {
                                        acc += a * b;
                                    }
                                } else {
                                    for (ox, a) in grow.iter().enumerate() {
                                        acc += a * srow[kx + ox * g.stride];
                                    }
                                }
                            }
                            dst[ci * ksize + ky * g.kw + kx] += acc;
                        }
                    }
                }
            }
        });

    let rows = g.row_map();
    let cols = g.col_map();
    let plane_x = g.h * g.w;
    let mut gx = vec![0.0; g.n * g.c_in * plane_x];
    gx.par_chunks_mut(plane_x)
        .enumerate()
        .for_each(|(idx, dst)| {
            let n = idx / g.c_in;
            let ci = idx % g.c_in;
            let mut gp = vec![0.0; plane_in];
            for co in 0..g.c_out {
                let go = &gdata[(n * g.c_out + co) * plane_out..][..plane_out];
                let wk = &wdata[(co * g.c_in + ci) * ksize..][..ksize];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wk[ky * g.kw + kx];
                        for oy in 0..g.ho {
                            let prow = &mut gp[(oy * g.stride + ky) * g.wp..][..g.wp];
                            let grow = &go[oy * g.wo..(oy + 1) * g.wo];
                            if g.stride == 1 {
                                for (p, a) in prow[kx..kx + g.wo].iter_mut().zip(grow) {
                                    *p += wv * a;
                                }
                            } else {
                                for (ox, a) in grow.iter().enumerate() {
                                    prow[kx + ox * g.stride] += wv * a;
                                }
                            }
                        }
                    }
                }
            }
            for (py, &sy) in rows.iter().enumerate() {
                for (px, &sx) in cols.iter().enumerate() {
                    dst[sy * g.w + sx] += gp[py * g.wp + px];
                }
            }
        });

    Ok(ConvGrads {
        input: Tensor::new(x_shape, gx)?,
        weight: Tensor::new(weight.shape(), gw)?,
        bias: Tensor::new(&[g.c_out], bias)?,
    })
}

/// Normalised planes and per-plane inverse standard deviations.
pub struct NormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Instance normalisation over each `(n, c)` plane, before any affine step.
pub fn instance_norm_forward(x: &Tensor, eps: f64) -> Result<NormCache> {
    let [_, _, h, w] = x.dims4()?;
    let plane = h * w;
    let mut xhat = x.data().to_vec();
    let mut inv_std = vec![0.0; x.numel() / plane];
    xhat.par_chunks_mut(plane)
        .zip(inv_std.par_iter_mut())
        .for_each(|(p, is)| {
            let mean = p.iter().sum::<f64>() / plane as f64;
            let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let s = 1.0 / (var + eps).sqrt();
            for v in p.iter_mut() {
                *v = (*v - mean) * s;
            }
            *is = s;
        });
    Ok(NormCache {
        xhat: Tensor::new(x.shape(), xhat)?,
        inv_std,
    })
}

/// Gradient w.r.t. the input, given the gradient w.r.t. `xhat`.
pub fn instance_norm_backward(grad_xhat: &Tensor, cache: &NormCache) -> Result<Tensor> {
    let [_, _, h, w] = grad_xhat.dims4()?;
    let plane = h * w;
    let m = plane as f64;
    let mut gx = vec![0.0; grad_xhat.numel()];
    gx.par_chunks_mut(plane)
        .zip(grad_xhat.data().par_chunks(plane))
        .zip(cache.xhat.data().par_chunks(plane))
        .zip(cache.inv_std.par_iter())
        .for_each(|(((dst, g), xh), &s)| {
            let mean_g = g.iter().sum::<f64>() / m;
            let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / m;
            for ((d, gv), xv) in dst.iter_mut().zip(g).zip(xh) {
                *d = s * (gv - mean_g - xv * mean_gx);
            }
        });
    Tensor::new(grad_xhat.shape(), gx)
}

/// Per-channel `scale * x + shift` on `[N, C, H, W]`.
pub fn channel_affine(x: &Tensor, scale: &[f64], shift: &[f64]) -> Result<Tensor> {
    let [_, c, h, w] = x.dims4()?;
    let plane = h * w;
    let mut out = x.data().to_vec();
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, p)| {
        let ch = idx % c;
        for v in p.iter_mut() {
            *v = scale[ch] * *v + shift[ch];
        }
    });
    Tensor::new(x.shape(), out)
}

pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * h2 * w2];
    out.par_chunks_mut(h2 * w2)
        .zip(x.data().par_chunks(h * w))
        .for_each(|(dst, src)| {
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        });
    Tensor::new(&[n, c, h2, w2], out)
}

pub fn upsample_nearest2x_backward(grad: &Tensor) -> Result<Tensor> {
    let [n, c, h2, w2] = grad.dims4()?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0; n * c * h * w];
    out.par_chunks_mut(h * w)
        .zip(grad.data().par_chunks(h2 * w2))
        .for_each(|(dst, src)| {
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                }
            }
        });
    Tensor::new(&[n, c, h, w], out)
}

/// 2x2 max pooling with stride 2 (odd trailing rows/cols dropped). Returns
/// the output and the flat argmax index into the input for every output.
pub fn max_pool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = x.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::Dimension(format!(
            "max pool on {}x{} collapses to zero",
            h, w
        )));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[i] > xd[best] || xd[i].is_nan() {
                        best = i;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, arg))
}

/// Bilinear resize of every plane (half-pixel centres, edge clamped).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimension("resize to zero size".into()));
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut out = vec![0.0; n * c * out_h * out_w];
    out.par_chunks_mut(out_h * out_w)
        .zip(x.data().par_chunks(h * w))
        .for_each(|(dst, src)| {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        });
    Tensor::new(&[n, c, out_h, out_w], out)
}

/// Numerically stable `ln(sigmoid(x))`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
