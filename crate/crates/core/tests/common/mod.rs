//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use latentphase::autodiff::gradcheck::random_tensor;
use latentphase::field::{DisplacementField, Image, VelocityField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Bilinear interpolation of both channels at `(y, x)` with border clamping.
pub fn interp(v: &VelocityField<f64>, y: f64, x: f64) -> (f64, f64) {
    let (h, w) = (v.height(), v.width());
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let lerp = |c: usize| {
        let at = |i: usize, j: usize| if c == 0 { v.get(i, j).0 } else { v.get(i, j).1 };
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    };
    (lerp(0), lerp(1))
}

/// Flow of `dx/dt = v(x)` over unit time by classical RK4 with `substeps`
/// steps, returned as a displacement per grid point.
pub fn rk4_flow(v: &VelocityField<f64>, substeps: usize) -> DisplacementField<f64> {
    let dt = 1.0 / substeps as f64;
    DisplacementField::from_fn(v.height(), v.width(), |i, j| {
        let (mut y, mut x) = (i as f64, j as f64);
        for _ in 0..substeps {
            let k1 = interp(v, y, x);
            let k2 = interp(v, y + 0.5 * dt * k1.0, x + 0.5 * dt * k1.1);
            let k3 = interp(v, y + 0.5 * dt * k2.0, x + 0.5 * dt * k2.1);
            let k4 = interp(v, y + dt * k3.0, x + dt * k3.1);
            y += dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            x += dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        (y - i as f64, x - j as f64)
    })
}

/// Largest vector difference over grid points at least `margin` from the
/// border.
pub fn max_interior_diff(a: &DisplacementField<f64>, b: &DisplacementField<f64>, margin: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in margin..a.height() - margin {
        for j in margin..a.width() - margin {
            let (p, q) = (a.get(i, j), b.get(i, j));
            worst = worst.max(((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt());
        }
    }
    worst
}

/// Per-pixel windowed NCC computed directly from the window members.
pub fn brute_ncc(a: &Image<f64>, b: &Image<f64>, window: usize, eps: f64) -> f64 {
    let (h, w) = (a.height(), a.width());
    let r = (window / 2) as isize;
    let mut total = 0.0;
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut pa = Vec::new();
            let mut pb = Vec::new();
            for y in i - r..=i + r {
                for x in j - r..=j + r {
                    if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                        pa.push(a.get(y as usize, x as usize));
                        pb.push(b.get(y as usize, x as usize));
                    }
                }
            }
            let n = pa.len() as f64;
            let ma = pa.iter().sum::<f64>() / n;
            let mb = pb.iter().sum::<f64>() / n;
            let cross: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = pa.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = pb.iter().map(|y| (y - mb).powi(2)).sum();
            total += cross * cross / (va * vb + eps);
        }
    }
    total / (h * w) as f64
}

pub fn random_image(h: usize, w: usize, seed: u64) -> Image<f64> {
    Image::new(h, w, random_tensor(&[h, w], 0.0, 1.0, seed).into_data()).unwrap()
}

/// Maxima found by checking every index and every plateau directly.
pub fn exhaustive_maxima(x: &[f64]) -> Vec<usize> {
    let n = x.len();
    let mut out = Vec::new();
    let mut start = 1;
    while start + 1 < n {
        let mut end = start;
        while end + 1 < n && x[end + 1] == x[start] {
            end += 1;
        }
        if end + 1 < n && x[start - 1] < x[start] && x[end + 1] < x[start] {
            out.push((start + end) / 2);
        }
        start = end + 1;
    }
    out
}

/// Prominence from the lowest points of the two bracketing intervals; an
/// interval that runs into the border without a higher sample is ignored,
/// and when both do the lower of the two minima is the base.
pub fn exhaustive_prominence(x: &[f64], p: usize) -> f64 {
    let left_higher = x[..p].iter().rposition(|&v| v > x[p]);
    let right_higher = x[p + 1..].iter().position(|&v| v > x[p]).map(|i| p + 1 + i);
    let lmin = x[left_higher.map_or(0, |i| i + 1)..=p].iter().copied().fold(f64::INFINITY, f64::min);
    let rmin = x[p..right_higher.unwrap_or(x.len())].iter().copied().fold(f64::INFINITY, f64::min);
    let base = match (left_higher, right_higher) {
        (Some(_), Some(_)) => lmin.max(rmin),
        (Some(_), None) => lmin,
        (None, Some(_)) => rmin,
        (None, None) => lmin.min(rmin),
    };
    x[p] - base
}

/// Peaks after the height-ordered distance filter and the prominence
/// filter, in index order.
pub fn oracle_peaks(x: &[f64], distance: usize, min_prominence: f64) -> Vec<usize> {
    let cand = exhaustive_maxima(x);
    let mut order = cand.clone();
    order.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for p in order {
        if kept.iter().all(|&k| k.abs_diff(p) >= distance) {
            kept.push(p);
        }
    }
    kept.sort_unstable();
    kept.into_iter()
        .filter(|&p| exhaustive_prominence(x, p) >= min_prominence)
        .collect()
}

pub fn oracle_valleys(x: &[f64], distance: usize, min_prominence: f64) -> Vec<usize> {
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    oracle_peaks(&neg, distance, min_prominence)
}

/// `sin(2πt / period)` plus Gaussian noise of `noise` amplitude, smoothed
/// with a centred moving average of width 3.
pub fn noisy_sinusoid(len: usize, period: f64, noise: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let normal = Normal::new(0.0, noise).unwrap();
    let raw: Vec<f64> = (0..len)
        .map(|t| (std::f64::consts::TAU * t as f64 / period + phase).sin() + normal.sample(&mut rng))
        .collect();
    latentphase::phase::moving_average(&raw, 3)
}

/// Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
