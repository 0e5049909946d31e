//! Stationary velocity field exponentiation by scaling and squaring, and the
//! first-order BCH pairwise flow between two frames.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::field::{compose_displacements, DisplacementField, VelocityField};
use crate::scalar::Scalar;

/// Number of squarings; `2^6` keeps each substep well below one pixel for
/// the field magnitudes the decoder produces.
pub const DEFAULT_STEPS: u32 = 6;

/// `exp(v)` via `u₀ = v / 2^steps` followed by `steps` self-compositions.
pub fn exp_svf<T: Scalar>(v: &VelocityField<T>, steps: u32) -> Result<DisplacementField<T>> {
    if steps < 1 {
        return Err(Error::InvalidArgument("exp_svf needs at least one step".into()));
    }
    let mut u = v.as_displacement().scaled(T::lit(0.5f64.powi(steps as i32)));
    for _ in 0..steps {
        u = compose_displacements(&u, &u)?;
    }
    Ok(u)
}

/// `exp(-v)`, the inverse of [`exp_svf`] up to discretisation error.
pub fn inverse_flow<T: Scalar>(v: &VelocityField<T>, steps: u32) -> Result<DisplacementField<T>> {
    exp_svf(&v.neg(), steps)
}

/// `Φ_{j←i} = exp(v_j − v_i)`: warping frame `j` with it aligns it to frame `i`.
pub fn pairwise_flow<T: Scalar>(
    v_i: &VelocityField<T>,
    v_j: &VelocityField<T>,
    steps: u32,
) -> Result<DisplacementField<T>> {
    exp_svf(&v_j.sub(v_i)?, steps)
}

/// Graph form of [`exp_svf`] for a `[2, H, W]` velocity node.
pub fn exp_svf_graph<T: Scalar>(g: &mut Graph<T>, v: Var, steps: u32) -> Var {
    let mut u = g.scale(v, T::lit(0.5f64.powi(steps as i32)));
    for _ in 0..steps {
        u = g.self_compose(u).expect("velocity node must be [2, H, W]");
    }
    u
}

/// Mean squared forward difference of both channels (diffusion energy).
pub fn diffusion_energy<T: Scalar>(v: &VelocityField<T>) -> T {
    crate::autodiff::kernels::diffusion(v.data(), 2, v.height(), v.width())
}

/// White noise blurred with a Gaussian of `sigma` pixels and rescaled so
/// the largest vector has magnitude `max_magnitude`.
pub fn smooth_random_velocity<T: Scalar>(
    height: usize,
    width: usize,
    sigma: f64,
    max_magnitude: f64,
    seed: u64,
) -> VelocityField<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = height * width;
    let mut data: Vec<f64> = (0..2 * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    for ch in 0..2 {
        gaussian_blur(&mut data[ch * n..(ch + 1) * n], height, width, sigma);
    }
    let peak = (0..n)
        .map(|p| (data[p] * data[p] + data[n + p] * data[n + p]).sqrt())
        .fold(0.0f64, f64::max);
    let s = if peak > 0.0 { max_magnitude / peak } else { 0.0 };
    VelocityField::new(height, width, data.iter().map(|&x| T::lit(x * s)).collect())
        .expect("finite by construction")
}

/// In-place separable Gaussian blur with border clamping.
pub fn gaussian_blur(plane: &mut [f64], height: usize, width: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let clamp = |k: isize, len: usize| k.clamp(0, len as isize - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for i in 0..height {
        for j in 0..width {
            let mut acc = 0.0;
            for (t, &wt) in taps.iter().enumerate() {
                let jj = clamp(j as isize + t as isize - radius, width);
                acc += wt * plane[i * width + jj];
            }
            tmp[i * width + j] = acc;
        }
    }
    for i in 0..height {
        for j in 0..width {
            let mut acc = 0.0;
            for (t, &wt) in taps.iter().enumerate() {
                let ii = clamp(i as isize + t as isize - radius, height);
                acc += wt * tmp[ii * width + j];
            }
            plane[i * width + j] = acc;
        }
    }
}
