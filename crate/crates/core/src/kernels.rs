//! Forward and backward kernels on raw NCHW buffers. The autodiff graph
//! wraps these; they carry no gradient bookkeeping of their own.

use rayon::prelude::*;

use crate::tensor::{matmul, Scalar};

/// Convolution geometry for one call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox*stride + kx - pad` lies inside
/// the row, as a half-open range.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + g.pad > kx { (g.w + g.pad - kx).div_ceil(g.stride).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (v, s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *v = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, v) in dst[first..first + hi - lo].iter_mut().zip(line) {
                            *d = *d + *v;
                        }
                    } else {
                        for (d, v) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                            *d = *d + *v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let in_sample = g.cin * g.h * g.w;
    let out_sample = g.cout * g.out_plane();
    let mut out = vec![T::zero(); g.n * out_sample];
    out.par_chunks_mut(out_sample).enumerate().for_each(|(n, y)| {
        let xs = &x[n * in_sample..(n + 1) * in_sample];
        if g.is_pointwise() {
            matmul(g.cout, g.cin, g.out_plane(), w, false, xs, false, y, false);
        } else {
            let mut col = vec![T::zero(); g.col_rows() * g.out_plane()];
            im2col(xs, g, &mut col);
            matmul(g.cout, g.col_rows(), g.out_plane(), w, false, &col, false, y, false);
        }
        if let Some(b) = b {
            for (co, plane) in y.chunks_mut(g.out_plane()).enumerate() {
                plane.iter_mut().for_each(|v| *v = *v + b[co]);
            }
        }
    });
    out
}

/// Returns `(dx, dw, db)`; each is computed only when requested.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let in_sample = g.cin * g.h * g.w;
    let out_sample = g.cout * g.out_plane();
    let wlen = g.cout * g.col_rows();

    // Per-sample partials, reduced in sample order so results do not depend
    // on the thread count.
    let partials: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let xs = &x[n * in_sample..(n + 1) * in_sample];
            let dys = &dy[n * out_sample..(n + 1) * out_sample];
            let col_owned;
            let col: &[T] = if g.is_pointwise() {
                xs
            } else if need_dw {
                let mut c = vec![T::zero(); g.col_rows() * g.out_plane()];
                im2col(xs, g, &mut c);
                col_owned = c;
                &col_owned
            } else {
                &[]
            };
            let dw = need_dw.then(|| {
                let mut dw = vec![T::zero(); wlen];
                matmul(g.cout, g.out_plane(), g.col_rows(), dys, false, col, true, &mut dw, false);
                dw
            });
            let dx = need_dx.then(|| {
                let mut dx = vec![T::zero(); in_sample];
                if g.is_pointwise() {
                    matmul(g.cin, g.cout, g.out_plane(), w, true, dys, false, &mut dx, false);
                } else {
                    let mut dcol = vec![T::zero(); g.col_rows() * g.out_plane()];
                    matmul(g.col_rows(), g.cout, g.out_plane(), w, true, dys, false, &mut dcol, false);
                    col2im(&dcol, g, &mut dx);
                }
                dx
            });
            (dx, dw)
        })
        .collect();

    let mut dx_all = need_dx.then(|| Vec::with_capacity(g.n * in_sample));
    let mut dw_all = need_dw.then(|| vec![T::zero(); wlen]);
    for (dx, dw) in partials {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
            all.iter_mut().zip(&dw).for_each(|(a, b)| *a = *a + *b);
        }
    }
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let start = n * out_sample + co * g.out_plane();
                let s: T = dy[start..start + g.out_plane()].iter().copied().sum();
                *acc = *acc + s;
            }
        }
        db
    });
    (dx_all, dw_all, db)
}

/// 2×2 stride-2 max pooling. Returns pooled values and the within-window
/// argmax (row-major, 0..4) of every output cell; the first maximum wins.
pub fn maxpool2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u8>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); planes * ho * wo];
    let mut idx = vec![0u8; planes * ho * wo];
    out.par_chunks_mut(ho * wo).zip(idx.par_chunks_mut(ho * wo)).enumerate().for_each(|(p, (o, ix))| {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let base = 2 * oy * w + 2 * ox;
                let cand = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                let mut best = 0;
                for (i, v) in cand.iter().enumerate().skip(1) {
                    if *v > cand[best] {
                        best = i;
                    }
                }
                o[oy * wo + ox] = cand[best];
                ix[oy * wo + ox] = best as u8;
            }
        }
    });
    (out, idx)
}

/// Places each pooled value at its recorded argmax; zeros elsewhere.
/// Also serves as the backward pass of max pooling.
pub fn unpool2_scatter<T: Scalar>(y: &[T], idx: &[u8], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); planes * h * w];
    out.par_chunks_mut(h * w).enumerate().for_each(|(p, dst)| {
        for oy in 0..ho {
            for ox in 0..wo {
                let cell = p * ho * wo + oy * wo + ox;
                let k = idx[cell] as usize;
                dst[(2 * oy + k / 2) * w + 2 * ox + k % 2] = y[cell];
            }
        }
    });
    out
}

/// Reads the value at each recorded argmax: the backward pass of unpooling.
pub fn unpool2_gather<T: Scalar>(dz: &[T], idx: &[u8], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let cell = p * ho * wo + oy * wo + ox;
                let k = idx[cell] as usize;
                out[cell] = dz[p * h * w + (2 * oy + k / 2) * w + 2 * ox + k % 2];
            }
        }
    }
    out
}

/// Per-channel mean and biased variance over N, H, W, accumulated in f64.
pub fn channel_moments<T: Scalar>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x[(b * c + ch) * plane..][..plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / count;
        let mut q = 0.0;
        for b in 0..n {
            q += x[(b * c + ch) * plane..][..plane].iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

/// Bilinear interpolation taps for one axis, align-corners=false.
fn bilinear_taps(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

pub fn upsample_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let (ho, wo) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut out = vec![T::zero(); planes * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(p, dst)| {
        let src = &x[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::from_f64_lossy(fy), T::from_f64_lossy(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (T::from_f64_lossy(fx), T::from_f64_lossy(1.0 - fx));
                let top = src[y0 * w + x0] * gx + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * gx + src[y1 * w + x1] * fx;
                dst[oy * wo + ox] = top * gy + bot * fy;
            }
        }
    });
    out
}

pub fn upsample_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let (ho, wo) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut dx = vec![T::zero(); planes * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(p, dst)| {
        let src = &dy[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::from_f64_lossy(fy), T::from_f64_lossy(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (T::from_f64_lossy(fx), T::from_f64_lossy(1.0 - fx));
                let g = src[oy * wo + ox];
                dst[y0 * w + x0] = dst[y0 * w + x0] + g * gy * gx;
                dst[y0 * w + x1] = dst[y0 * w + x1] + g * gy * fx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + g * fy * gx;
                dst[y1 * w + x1] = dst[y1 * w + x1] + g * fy * fx;
            }
        }
    });
    dx
}

/// Per-pixel softmax over the channel axis of an `[N, L, H, W]` buffer.
pub fn softmax_channels<T: Scalar>(x: &[T], l: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    out.par_chunks_mut(l * plane).enumerate().for_each(|(b, dst)| {
        let src = &x[b * l * plane..(b + 1) * l * plane];
        for p in 0..plane {
            let mut m = src[p];
            for c in 1..l {
                m = m.max(src[c * plane + p]);
            }
            let mut z = T::zero();
            for c in 0..l {
                let e = (src[c * plane + p] - m).exp();
                dst[c * plane + p] = e;
                z = z + e;
            }
            for c in 0..l {
                dst[c * plane + p] = dst[c * plane + p] / z;
            }
        }
    });
    out
}

/// Per-pixel log-softmax over channels.
pub fn log_softmax_channels<T: Scalar>(x: &[T], l: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    out.par_chunks_mut(l * plane).enumerate().for_each(|(b, dst)| {
        let src = &x[b * l * plane..(b + 1) * l * plane];
        for p in 0..plane {
            let mut m = src[p];
            for c in 1..l {
                m = m.max(src[c * plane + p]);
            }
            let mut z = T::zero();
            for c in 0..l {
                z = z + (src[c * plane + p] - m).exp();
            }
            let lz = m + z.ln();
            for c in 0..l {
                dst[c * plane + p] = src[c * plane + p] - lz;
            }
        }
    });
    out
}
