//! Images, 2-channel fields and the sampling kernels behind warping.
//!
//! Fields are stored channel-major (`2 × H × W`) with channel 0 holding the
//! row component `dy` and channel 1 the column component `dx`. A displacement
//! `u` represents the map `Φ(x) = x + u(x)`. Sampling outside the image clamps
//! coordinates to the border.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Single-channel `H × W` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("image has non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |_, _| T::zero())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.width + j]
    }

    /// Checks the size contract for model input frames: at least 8 pixels
    /// per side and even extents.
    pub fn check_frame_shape(&self) -> Result<()> {
        check_frame_dims(self.height, self.width)
    }
}

pub(crate) fn check_frame_dims(height: usize, width: usize) -> Result<()> {
    if height < 8 || width < 8 || height % 2 != 0 || width % 2 != 0 {
        return Err(Error::Shape(format!(
            "frames must be at least 8x8 with even sides, got {height}x{width}"
        )));
    }
    Ok(())
}

macro_rules! two_channel_field {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            height: usize,
            width: usize,
            data: Vec<T>,
        }

        impl<T: Scalar> $name<T> {
            /// `data` is channel-major: all `dy` values, then all `dx` values.
            pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
                if height == 0 || width == 0 {
                    return Err(Error::Shape(format!("empty field {height}x{width}")));
                }
                if data.len() != 2 * height * width {
                    return Err(Error::Shape(format!(
                        "field {height}x{width} needs {} values, got {}",
                        2 * height * width,
                        data.len()
                    )));
                }
                if !data.iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidArgument("field has non-finite values".into()));
                }
                Ok(Self { height, width, data })
            }

            pub fn zeros(height: usize, width: usize) -> Self {
                Self { height, width, data: vec![T::zero(); 2 * height * width] }
            }

            pub fn constant(height: usize, width: usize, dy: T, dx: T) -> Self {
                Self::from_fn(height, width, |_, _| (dy, dx))
            }

            pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (T, T)) -> Self {
                let n = height * width;
                let mut data = vec![T::zero(); 2 * n];
                for i in 0..height {
                    for j in 0..width {
                        let (a, b) = f(i, j);
                        data[i * width + j] = a;
                        data[n + i * width + j] = b;
                    }
                }
                Self { height, width, data }
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn data(&self) -> &[T] {
                &self.data
            }

            pub fn into_data(self) -> Vec<T> {
                self.data
            }

            /// `(dy, dx)` at pixel `(i, j)`.
            #[inline]
            pub fn get(&self, i: usize, j: usize) -> (T, T) {
                let p = i * self.width + j;
                (self.data[p], self.data[self.height * self.width + p])
            }

            pub fn max_magnitude(&self) -> T {
                let n = self.height * self.width;
                (0..n)
                    .map(|p| (self.data[p].powi(2) + self.data[n + p].powi(2)).sqrt())
                    .fold(T::zero(), T::max)
            }

            pub fn scaled(&self, s: T) -> Self {
                Self {
                    height: self.height,
                    width: self.width,
                    data: self.data.iter().map(|&v| v * s).collect(),
                }
            }

            pub fn neg(&self) -> Self {
                self.scaled(-T::one())
            }

            /// Elementwise `self - other`.
            pub fn sub(&self, other: &Self) -> Result<Self> {
                if (self.height, self.width) != (other.height, other.width) {
                    return Err(Error::Shape(format!(
                        "field {}x{} vs {}x{}",
                        self.height, self.width, other.height, other.width
                    )));
                }
                Ok(Self {
                    height: self.height,
                    width: self.width,
                    data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
                })
            }

            /// Largest per-pixel vector distance to `other` over pixels at
            /// least `margin` away from the border.
            pub fn max_distance(&self, other: &Self, margin: usize) -> T {
                let (h, w) = (self.height, self.width);
                let mut worst = T::zero();
                for i in margin..h.saturating_sub(margin) {
                    for j in margin..w.saturating_sub(margin) {
                        let (a0, a1) = self.get(i, j);
                        let (b0, b1) = other.get(i, j);
                        worst = worst.max(((a0 - b0).powi(2) + (a1 - b1).powi(2)).sqrt());
                    }
                }
                worst
            }
        }
    };
}

two_channel_field!(
    /// Per-pixel displacement `u` in pixels, `Φ(x) = x + u(x)`.
    DisplacementField
);
two_channel_field!(
    /// Stationary velocity field in pixels per unit flow time.
    VelocityField
);
two_channel_field!(
    /// Absolute sampling coordinates `(row, col)` in pixel space.
    CoordGrid
);

impl<T: Scalar> VelocityField<T> {
    pub fn as_displacement(&self) -> DisplacementField<T> {
        DisplacementField {
            height: self.height,
            width: self.width,
            data: self.data.clone(),
        }
    }
}

impl<T: Scalar> DisplacementField<T> {
    pub fn as_velocity(&self) -> VelocityField<T> {
        VelocityField {
            height: self.height,
            width: self.width,
            data: self.data.clone(),
        }
    }
}

/// Grid whose entry `(i, j)` is `(i, j)`.
pub fn identity_grid<T: Scalar>(height: usize, width: usize) -> CoordGrid<T> {
    CoordGrid::from_fn(height, width, |i, j| {
        (T::from_usize_lossy(i), T::from_usize_lossy(j))
    })
}

/// Bilinear interpolation of `img` at absolute coordinates.
pub fn bilinear_sample<T: Scalar>(img: &Image<T>, coords: &CoordGrid<T>) -> Result<Image<T>> {
    if (img.height, img.width) != (coords.height, coords.width) {
        return Err(Error::Shape(format!(
            "image {}x{} vs grid {}x{}",
            img.height, img.width, coords.height, coords.width
        )));
    }
    let (h, w) = (img.height, img.width);
    let n = h * w;
    let mut out = vec![T::zero(); n];
    kernels::sample(&img.data, 1, h, w, |p, _, _| (coords.data[p], coords.data[n + p]), &mut out);
    Ok(Image {
        height: h,
        width: w,
        data: out,
    })
}

/// `img ∘ Φ` with `Φ(x) = x + disp(x)`.
pub fn warp<T: Scalar>(img: &Image<T>, disp: &DisplacementField<T>) -> Result<Image<T>> {
    if (img.height, img.width) != (disp.height, disp.width) {
        return Err(Error::Shape(format!(
            "image {}x{} vs displacement {}x{}",
            img.height, img.width, disp.height, disp.width
        )));
    }
    let (h, w) = (img.height, img.width);
    let mut out = vec![T::zero(); h * w];
    kernels::warp(&img.data, 1, h, w, &disp.data, &mut out);
    Ok(Image {
        height: h,
        width: w,
        data: out,
    })
}

/// Displacement of `Φ_outer ∘ Φ_inner`: `inner(x) + outer(x + inner(x))`.
pub fn compose_displacements<T: Scalar>(
    outer: &DisplacementField<T>,
    inner: &DisplacementField<T>,
) -> Result<DisplacementField<T>> {
    if (outer.height, outer.width) != (inner.height, inner.width) {
        return Err(Error::Shape(format!(
            "displacements {}x{} vs {}x{}",
            outer.height, outer.width, inner.height, inner.width
        )));
    }
    let (h, w) = (inner.height, inner.width);
    let mut data = vec![T::zero(); 2 * h * w];
    kernels::compose(&outer.data, &inner.data, h, w, &mut data);
    Ok(DisplacementField {
        height: h,
        width: w,
        data,
    })
}

/// Determinant of `I + ∇u`, central differences inside and one-sided at
/// the border.
pub fn jacobian_determinant<T: Scalar>(disp: &DisplacementField<T>) -> Result<Image<T>> {
    let (h, w) = (disp.height, disp.width);
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!(
            "jacobian needs at least 3x3, got {h}x{w}"
        )));
    }
    let n = h * w;
    let half = T::lit(0.5);
    let d = &disp.data;
    let dr = |c: usize, i: usize, j: usize| -> T {
        let at = |ii: usize| d[c * n + ii * w + j];
        if i == 0 {
            at(1) - at(0)
        } else if i == h - 1 {
            at(h - 1) - at(h - 2)
        } else {
            (at(i + 1) - at(i - 1)) * half
        }
    };
    let dc = |c: usize, i: usize, j: usize| -> T {
        let at = |jj: usize| d[c * n + i * w + jj];
        if j == 0 {
            at(1) - at(0)
        } else if j == w - 1 {
            at(w - 1) - at(w - 2)
        } else {
            (at(j + 1) - at(j - 1)) * half
        }
    };
    Ok(Image::from_fn(h, w, |i, j| {
        let a = T::one() + dr(0, i, j);
        let b = dc(0, i, j);
        let c = dr(1, i, j);
        let e = T::one() + dc(1, i, j);
        a * e - b * c
    }))
}

/// Slice-level kernels shared by the pure functions and the tape.
pub(crate) mod kernels {
    use crate::scalar::Scalar;

    #[inline(always)]
    fn corner<T: Scalar>(y: T, x: T, h: usize, w: usize) -> Corner<T> {
        let ymax = T::from_usize_lossy(h - 1);
        let xmax = T::from_usize_lossy(w - 1);
        let y_in = y >= T::zero() && y <= ymax;
        let x_in = x >= T::zero() && x <= xmax;
        let yc = y.max(T::zero()).min(ymax);
        let xc = x.max(T::zero()).min(xmax);
        let y0 = yc.floor();
        let x0 = xc.floor();
        let wy = yc - y0;
        let wx = xc - x0;
        let y0 = y0.to_usize().unwrap_or(0).min(h - 1);
        let x0 = x0.to_usize().unwrap_or(0).min(w - 1);
        Corner {
            y0,
            x0,
            y1: (y0 + 1).min(h - 1),
            x1: (x0 + 1).min(w - 1),
            wy,
            wx,
            y_in,
            x_in,
        }
    }

    struct Corner<T> {
        y0: usize,
        x0: usize,
        y1: usize,
        x1: usize,
        wy: T,
        wx: T,
        y_in: bool,
        x_in: bool,
    }

    /// Samples `channels` planes of `src` (`h × w` each) at one point per
    /// grid pixel; `coord(p, i, j)` gives the source position of pixel `p`.
    pub fn sample<T: Scalar>(
        src: &[T],
        channels: usize,
        h: usize,
        w: usize,
        coord: impl Fn(usize, usize, usize) -> (T, T),
        out: &mut [T],
    ) {
        let plane = h * w;
        let one = T::one();
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let (y, x) = coord(p, i, j);
                let c = corner(y, x, h, w);
                let w00 = (one - c.wy) * (one - c.wx);
                let w01 = (one - c.wy) * c.wx;
                let w10 = c.wy * (one - c.wx);
                let w11 = c.wy * c.wx;
                let (i00, i01) = (c.y0 * w + c.x0, c.y0 * w + c.x1);
                let (i10, i11) = (c.y1 * w + c.x0, c.y1 * w + c.x1);
                for ch in 0..channels {
                    let s = &src[ch * plane..(ch + 1) * plane];
                    out[ch * plane + p] = w00 * s[i00] + w01 * s[i01] + w10 * s[i10] + w11 * s[i11];
                }
            }
        }
    }

    /// Adjoint of [`sample`]. Accumulates into `gsrc` and `gcoord`
    /// (channel-major `2 × h × w`) when given.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_backward<T: Scalar>(
        src: &[T],
        channels: usize,
        h: usize,
        w: usize,
        coord: impl Fn(usize, usize, usize) -> (T, T),
        gout: &[T],
        mut gsrc: Option<&mut [T]>,
        mut gcoord: Option<&mut [T]>,
    ) {
        let plane = h * w;
        let one = T::one();
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let (y, x) = coord(p, i, j);
                let c = corner(y, x, h, w);
                let (i00, i01) = (c.y0 * w + c.x0, c.y0 * w + c.x1);
                let (i10, i11) = (c.y1 * w + c.x0, c.y1 * w + c.x1);
                let mut gy = T::zero();
                let mut gx = T::zero();
                for ch in 0..channels {
                    let g = gout[ch * plane + p];
                    if g == T::zero() {
                        continue;
                    }
                    let s = &src[ch * plane..(ch + 1) * plane];
                    if let Some(gs) = gsrc.as_deref_mut() {
                        let gs = &mut gs[ch * plane..(ch + 1) * plane];
                        gs[i00] += g * (one - c.wy) * (one - c.wx);
                        gs[i01] += g * (one - c.wy) * c.wx;
                        gs[i10] += g * c.wy * (one - c.wx);
                        gs[i11] += g * c.wy * c.wx;
                    }
                    if gcoord.is_some() {
                        gy += g * ((one - c.wx) * (s[i10] - s[i00]) + c.wx * (s[i11] - s[i01]));
                        gx += g * ((one - c.wy) * (s[i01] - s[i00]) + c.wy * (s[i11] - s[i10]));
                    }
                }
                if let Some(gc) = gcoord.as_deref_mut() {
                    if c.y_in {
                        gc[p] += gy;
                    }
                    if c.x_in {
                        gc[plane + p] += gx;
                    }
                }
            }
        }
    }

    #[inline(always)]
    fn disp_coord<T: Scalar>(disp: &[T], n: usize, p: usize, i: usize, j: usize) -> (T, T) {
        (T::from_usize_lossy(i) + disp[p], T::from_usize_lossy(j) + disp[n + p])
    }

    /// `out = src ∘ (id + disp)` for `channels` planes on an `h × w` grid.
    pub fn warp<T: Scalar>(src: &[T], channels: usize, h: usize, w: usize, disp: &[T], out: &mut [T]) {
        let n = h * w;
        sample(src, channels, h, w, |p, i, j| disp_coord(disp, n, p, i, j), out);
    }

    #[allow(clippy::too_many_arguments)]
    pub fn warp_backward<T: Scalar>(
        src: &[T],
        channels: usize,
        h: usize,
        w: usize,
        disp: &[T],
        gout: &[T],
        gsrc: Option<&mut [T]>,
        gdisp: Option<&mut [T]>,
    ) {
        let n = h * w;
        sample_backward(src, channels, h, w, |p, i, j| disp_coord(disp, n, p, i, j), gout, gsrc, gdisp);
    }

    /// `out = inner + outer ∘ (id + inner)`.
    pub fn compose<T: Scalar>(outer: &[T], inner: &[T], h: usize, w: usize, out: &mut [T]) {
        warp(outer, 2, h, w, inner, out);
        for (o, &i) in out.iter_mut().zip(inner) {
            *o += i;
        }
    }
}
