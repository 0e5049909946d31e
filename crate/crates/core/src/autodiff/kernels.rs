//! Dense layer kernels (forward and adjoint) on flat slices.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output columns `ox` whose input column `ox*s + k - p` is in range.
    #[inline]
    fn col_range(&self, k: usize) -> (usize, usize) {
        range_for(k, self.pad, self.stride, self.in_w, self.out_w())
    }

    #[inline]
    fn row_range(&self, k: usize) -> (usize, usize) {
        range_for(k, self.pad, self.stride, self.in_h, self.out_h())
    }
}

#[inline]
fn range_for(k: usize, pad: usize, stride: usize, len_in: usize, len_out: usize) -> (usize, usize) {
    // need 0 <= o*s + k - p <= len_in - 1
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi_num = len_in as isize - 1 + pad as isize - k as isize;
    let hi = if hi_num < 0 {
        0
    } else {
        (hi_num as usize / stride + 1).min(len_out)
    };
    (lo, hi.max(lo))
}

pub fn conv2d<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T], out: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let in_plane = g.in_h * g.in_w;
    let out_plane = oh * ow;
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            let dst = &mut out[(n * g.out_ch + o) * out_plane..][..out_plane];
            dst.fill(b[o]);
            for c in 0..g.in_ch {
                let src = &x[(n * g.in_ch + c) * in_plane..][..in_plane];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = g.row_range(ky);
                    for kx in 0..k {
                        let wv = w[((o * g.in_ch + c) * k + ky) * k + kx];
                        let (ox_lo, ox_hi) = g.col_range(kx);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let row_in = &src[iy * g.in_w..][..g.in_w];
                            let row_out = &mut dst[oy * ow..][..ow];
                            if s == 1 {
                                let off = kx as isize - p as isize;
                                for ox in ox_lo..ox_hi {
                                    row_out[ox] += wv * row_in[(ox as isize + off) as usize];
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    row_out[ox] += wv * row_in[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv2d`]; accumulates into the given gradient buffers.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let in_plane = g.in_h * g.in_w;
    let out_plane = oh * ow;
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            let go = &gout[(n * g.out_ch + o) * out_plane..][..out_plane];
            if let Some(gb) = gb.as_deref_mut() {
                gb[o] += go.iter().copied().sum::<T>();
            }
            for c in 0..g.in_ch {
                let src = &x[(n * g.in_ch + c) * in_plane..][..in_plane];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = g.row_range(ky);
                    for kx in 0..k {
                        let widx = ((o * g.in_ch + c) * k + ky) * k + kx;
                        let wv = w[widx];
                        let (ox_lo, ox_hi) = g.col_range(kx);
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let row_go = &go[oy * ow..][..ow];
                            if let Some(gx) = gx.as_deref_mut() {
                                let row_gx =
                                    &mut gx[(n * g.in_ch + c) * in_plane + iy * g.in_w..][..g.in_w];
                                for ox in ox_lo..ox_hi {
                                    row_gx[ox * s + kx - p] += wv * row_go[ox];
                                }
                            }
                            if gw.is_some() {
                                let row_in = &src[iy * g.in_w..][..g.in_w];
                                for ox in ox_lo..ox_hi {
                                    acc += row_go[ox] * row_in[ox * s + kx - p];
                                }
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// `out[n, o] = b[o] + Σ_i x[n, i] w[o, i]`.
pub fn linear<T: Scalar>(x: &[T], w: &[T], b: &[T], n: usize, inp: usize, outp: usize, out: &mut [T]) {
    for r in 0..n {
        let xr = &x[r * inp..][..inp];
        for o in 0..outp {
            let wr = &w[o * inp..][..inp];
            let mut acc = b[o];
            for i in 0..inp {
                acc += xr[i] * wr[i];
            }
            out[r * outp + o] = acc;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    n: usize,
    inp: usize,
    outp: usize,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    for r in 0..n {
        let xr = &x[r * inp..][..inp];
        for o in 0..outp {
            let go = gout[r * outp + o];
            if let Some(gb) = gb.as_deref_mut() {
                gb[o] += go;
            }
            if let Some(gx) = gx.as_deref_mut() {
                let wr = &w[o * inp..][..inp];
                let gxr = &mut gx[r * inp..][..inp];
                for i in 0..inp {
                    gxr[i] += go * wr[i];
                }
            }
            if let Some(gw) = gw.as_deref_mut() {
                let gwr = &mut gw[o * inp..][..inp];
                for i in 0..inp {
                    gwr[i] += go * xr[i];
                }
            }
        }
    }
}

/// Half-pixel-centred bilinear resampling weights along one axis.
pub fn resize_taps<T: Scalar>(len_in: usize, len_out: usize) -> Vec<(usize, usize, T)> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len_in - 1);
            (i0, i1, T::lit(src - i0 as f64))
        })
        .collect()
}

/// Bilinear resize of `planes` images from `h × w` to `oh × ow`.
pub fn resize<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize, out: &mut [T]) {
    let ty = resize_taps::<T>(h, oh);
    let tx = resize_taps::<T>(w, ow);
    let one = T::one();
    for c in 0..planes {
        let src = &x[c * h * w..][..h * w];
        let dst = &mut out[c * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..][..w];
            let r1 = &src[y1 * w..][..w];
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = r0[x0] * (one - fx) + r0[x1] * fx;
                let bot = r1[x0] * (one - fx) + r1[x1] * fx;
                dst[oy * ow + ox] = top * (one - fy) + bot * fy;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn resize_backward<T: Scalar>(
    gout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    gx: &mut [T],
) {
    let ty = resize_taps::<T>(h, oh);
    let tx = resize_taps::<T>(w, ow);
    let one = T::one();
    for c in 0..planes {
        let go = &gout[c * oh * ow..][..oh * ow];
        let dst = &mut gx[c * h * w..][..h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = go[oy * ow + ox];
                dst[y0 * w + x0] += g * (one - fy) * (one - fx);
                dst[y0 * w + x1] += g * (one - fy) * fx;
                dst[y1 * w + x0] += g * fy * (one - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
}

/// Mean over `planes × h × w` of squared forward differences along both axes.
pub fn diffusion<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> T {
    let mut acc = T::zero();
    for c in 0..planes {
        let p = &x[c * h * w..][..h * w];
        for i in 0..h {
            for j in 0..w {
                let v = p[i * w + j];
                if i + 1 < h {
                    let d = p[(i + 1) * w + j] - v;
                    acc += d * d;
                }
                if j + 1 < w {
                    let d = p[i * w + j + 1] - v;
                    acc += d * d;
                }
            }
        }
    }
    acc / T::from_usize_lossy(planes * h * w)
}

pub fn diffusion_backward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, gout: T, gx: &mut [T]) {
    let k = T::lit(2.0) * gout / T::from_usize_lossy(planes * h * w);
    for c in 0..planes {
        let off = c * h * w;
        for i in 0..h {
            for j in 0..w {
                let idx = off + i * w + j;
                if i + 1 < h {
                    let d = k * (x[idx + w] - x[idx]);
                    gx[idx + w] += d;
                    gx[idx] -= d;
                }
                if j + 1 < w {
                    let d = k * (x[idx + 1] - x[idx]);
                    gx[idx + 1] += d;
                    gx[idx] -= d;
                }
            }
        }
    }
}
