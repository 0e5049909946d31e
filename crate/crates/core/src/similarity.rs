//! Windowed normalized cross-correlation and the video registration loss.
//!
//! The per-pixel score is the squared local correlation coefficient
//! `cross² / (var_a · var_b + ε)` where the window sums are box filtered with
//! zero padding and border windows use their in-bounds pixel count.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::diffeo;
use crate::error::{Error, Result};
use crate::field::{warp, Image, VelocityField};
use crate::scalar::Scalar;
use crate::video::Video;

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub window: usize,
    pub max_offset: usize,
    pub epsilon: f64,
    /// Scaling-and-squaring steps used for every pairwise flow.
    #[serde(default = "default_steps")]
    pub steps: u32,
    /// Weight of the mean diffusion energy of the velocity fields.
    #[serde(default)]
    pub smoothness_weight: f64,
}

fn default_steps() -> u32 {
    diffeo::DEFAULT_STEPS
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            window: 9,
            max_offset: 5,
            epsilon: DEFAULT_EPSILON,
            steps: diffeo::DEFAULT_STEPS,
            smoothness_weight: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_window(self.window)?;
        if self.max_offset < 1 {
            return Err(Error::InvalidArgument("max_offset must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        if self.steps < 1 {
            return Err(Error::InvalidArgument("steps must be at least 1".into()));
        }
        if !(self.smoothness_weight >= 0.0 && self.smoothness_weight.is_finite()) {
            return Err(Error::InvalidArgument("smoothness_weight must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn check_window(window: usize) -> Result<()> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "NCC window must be odd and >= 3, got {window}"
        )));
    }
    Ok(())
}

/// Ordered frame pairs `(t, t + f)` for `f = 1..=min(max_offset, T-1)`.
pub fn registration_pairs(frames: usize, max_offset: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for f in 1..=max_offset.min(frames.saturating_sub(1)) {
        for t in 0..frames - f {
            pairs.push((t, t + f));
        }
    }
    pairs
}

/// Mean squared local correlation coefficient of `a` and `b`.
pub fn local_ncc<T: Scalar>(a: &Image<T>, b: &Image<T>, window: usize) -> Result<T> {
    local_ncc_eps(a, b, window, DEFAULT_EPSILON)
}

pub fn local_ncc_eps<T: Scalar>(a: &Image<T>, b: &Image<T>, window: usize, epsilon: f64) -> Result<T> {
    check_window(window)?;
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "NCC inputs {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let (score, _) = kernels::ncc(a.data(), b.data(), a.height(), a.width(), window, T::lit(epsilon));
    Ok(score)
}

/// Registration loss of a clip: for every ordered pair `(t, t+f)` both
/// frames are warped onto each other with the velocity-difference flow and
/// scored; the loss is the negated sum of all scores.
pub fn video_registration_loss<T: Scalar>(
    video: &Video<T>,
    velocities: &[VelocityField<T>],
    cfg: &LossConfig,
) -> Result<T> {
    cfg.validate()?;
    if velocities.len() != video.frames() {
        return Err(Error::Shape(format!(
            "{} velocity fields for {} frames",
            velocities.len(),
            video.frames()
        )));
    }
    if video.frames() < 2 {
        return Err(Error::InvalidArgument("registration loss needs at least 2 frames".into()));
    }
    let frames: Vec<Image<T>> = (0..video.frames()).map(|t| video.frame(t)).collect();
    let mut total = T::zero();
    for (t, s) in registration_pairs(video.frames(), cfg.max_offset) {
        // frame t warped toward frame s uses exp(V_t - V_s), and vice versa
        let to_s = diffeo::pairwise_flow(&velocities[s], &velocities[t], cfg.steps)?;
        let to_t = diffeo::pairwise_flow(&velocities[t], &velocities[s], cfg.steps)?;
        total += local_ncc_eps(&warp(&frames[t], &to_s)?, &frames[s], cfg.window, cfg.epsilon)?;
        total += local_ncc_eps(&warp(&frames[s], &to_t)?, &frames[t], cfg.window, cfg.epsilon)?;
    }
    let mut loss = -total;
    if cfg.smoothness_weight > 0.0 {
        let energy: T = velocities.iter().map(diffeo::diffusion_energy).sum();
        loss += T::lit(cfg.smoothness_weight) * energy / T::from_usize_lossy(velocities.len());
    }
    Ok(loss)
}

/// Graph form of [`video_registration_loss`]. `frames` are `[H, W]` nodes
/// and `velocities` a `[T, 2, H, W]` node.
pub fn video_registration_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    frames: &[Var],
    velocities: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let t_len = frames.len();
    if g.shape(velocities).first() != Some(&t_len) {
        return Err(Error::Shape(format!(
            "velocity tensor {:?} for {} frames",
            g.shape(velocities),
            t_len
        )));
    }
    if t_len < 2 {
        return Err(Error::InvalidArgument("registration loss needs at least 2 frames".into()));
    }
    let v: Vec<Var> = (0..t_len).map(|t| g.select(velocities, t)).collect();
    let mut terms = Vec::new();
    for (t, s) in registration_pairs(t_len, cfg.max_offset) {
        let d_ts = g.sub(v[t], v[s]);
        let flow_ts = diffeo::exp_svf_graph(g, d_ts, cfg.steps);
        let warped_t = g.warp(frames[t], flow_ts)?;
        terms.push(g.ncc(warped_t, frames[s], cfg.window, cfg.epsilon)?);

        let d_st = g.sub(v[s], v[t]);
        let flow_st = diffeo::exp_svf_graph(g, d_st, cfg.steps);
        let warped_s = g.warp(frames[s], flow_st)?;
        terms.push(g.ncc(warped_s, frames[t], cfg.window, cfg.epsilon)?);
    }
    let total = g.sum(&terms)?;
    let loss = g.scale(total, -T::one());
    if cfg.smoothness_weight > 0.0 {
        let energy = g.diffusion(velocities)?;
        let penalty = g.scale(energy, T::lit(cfg.smoothness_weight));
        return Ok(g.add(loss, penalty));
    }
    Ok(loss)
}

pub(crate) mod kernels {
    use crate::scalar::Scalar;

    /// Window sums cached by the forward pass.
    #[derive(Clone, Debug)]
    pub struct NccCache<T> {
        sa: Vec<T>,
        sb: Vec<T>,
        saa: Vec<T>,
        sbb: Vec<T>,
        sab: Vec<T>,
        inv_count: Vec<T>,
    }

    /// Zero-padded box sum with radius `r` along both axes.
    pub fn box_sum<T: Scalar>(x: &[T], h: usize, w: usize, r: usize) -> Vec<T> {
        let mut tmp = vec![T::zero(); h * w];
        let mut prefix = vec![T::zero(); h.max(w) + 1];
        for i in 0..h {
            let row = &x[i * w..][..w];
            for j in 0..w {
                prefix[j + 1] = prefix[j] + row[j];
            }
            for j in 0..w {
                let lo = j.saturating_sub(r);
                let hi = (j + r + 1).min(w);
                tmp[i * w + j] = prefix[hi] - prefix[lo];
            }
        }
        let mut out = vec![T::zero(); h * w];
        for j in 0..w {
            for i in 0..h {
                prefix[i + 1] = prefix[i] + tmp[i * w + j];
            }
            for i in 0..h {
                let lo = i.saturating_sub(r);
                let hi = (i + r + 1).min(h);
                out[i * w + j] = prefix[hi] - prefix[lo];
            }
        }
        out
    }

    fn inv_counts<T: Scalar>(h: usize, w: usize, r: usize) -> Vec<T> {
        let span = |k: usize, len: usize| (k + r).min(len - 1) - k.saturating_sub(r) + 1;
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                out.push(T::one() / T::from_usize_lossy(span(i, h) * span(j, w)));
            }
        }
        out
    }

    pub fn ncc<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize, window: usize, eps: T) -> (T, NccCache<T>) {
        let r = window / 2;
        let n = h * w;
        let aa: Vec<T> = a.iter().map(|&v| v * v).collect();
        let bb: Vec<T> = b.iter().map(|&v| v * v).collect();
        let ab: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
        let cache = NccCache {
            sa: box_sum(a, h, w, r),
            sb: box_sum(b, h, w, r),
            saa: box_sum(&aa, h, w, r),
            sbb: box_sum(&bb, h, w, r),
            sab: box_sum(&ab, h, w, r),
            inv_count: inv_counts(h, w, r),
        };
        let mut total = T::zero();
        for p in 0..n {
            let ic = cache.inv_count[p];
            let cross = cache.sab[p] - cache.sa[p] * cache.sb[p] * ic;
            let va = cache.saa[p] - cache.sa[p] * cache.sa[p] * ic;
            let vb = cache.sbb[p] - cache.sb[p] * cache.sb[p] * ic;
            total += cross * cross / (va * vb + eps);
        }
        (total / T::from_usize_lossy(n), cache)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn ncc_backward<T: Scalar>(
        a: &[T],
        b: &[T],
        h: usize,
        w: usize,
        window: usize,
        eps: T,
        cache: &NccCache<T>,
        gscore: T,
        ga: Option<&mut [T]>,
        gb: Option<&mut [T]>,
    ) {
        let r = window / 2;
        let n = h * w;
        let gs = gscore / T::from_usize_lossy(n);
        let two = T::lit(2.0);
        let mut g_sa = vec![T::zero(); n];
        let mut g_sb = vec![T::zero(); n];
        let mut g_saa = vec![T::zero(); n];
        let mut g_sbb = vec![T::zero(); n];
        let mut g_sab = vec![T::zero(); n];
        for p in 0..n {
            let ic = cache.inv_count[p];
            let (sa, sb) = (cache.sa[p], cache.sb[p]);
            let cross = cache.sab[p] - sa * sb * ic;
            let va = cache.saa[p] - sa * sa * ic;
            let vb = cache.sbb[p] - sb * sb * ic;
            let den = va * vb + eps;
            let gcross = gs * two * cross / den;
            let c2 = cross * cross / (den * den);
            let gva = -gs * c2 * vb;
            let gvb = -gs * c2 * va;
            g_sab[p] = gcross;
            g_saa[p] = gva;
            g_sbb[p] = gvb;
            g_sa[p] = -(gcross * sb + two * gva * sa) * ic;
            g_sb[p] = -(gcross * sa + two * gvb * sb) * ic;
        }
        // the zero-padded box filter is self-adjoint
        let b_sab = box_sum(&g_sab, h, w, r);
        if let Some(ga) = ga {
            let b_sa = box_sum(&g_sa, h, w, r);
            let b_saa = box_sum(&g_saa, h, w, r);
            for p in 0..n {
                ga[p] += b_sa[p] + two * a[p] * b_saa[p] + b[p] * b_sab[p];
            }
        }
        if let Some(gb) = gb {
            let b_sb = box_sum(&g_sb, h, w, r);
            let b_sbb = box_sum(&g_sbb, h, w, r);
            for p in 0..n {
                gb[p] += b_sb[p] + two * b[p] * b_sbb[p] + a[p] * b_sab[p];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffeo::smooth_random_velocity;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| rng.random::<f64>())
    }

    fn brute_force_ncc(a: &Image<f64>, b: &Image<f64>, window: usize, eps: f64) -> f64 {
        let (h, w) = (a.height(), a.width());
        let r = (window / 2) as isize;
        let mut total = 0.0;
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut xs = Vec::new();
                for di in -r..=r {
                    for dj in -r..=r {
                        let (y, x) = (i + di, j + dj);
                        if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                            xs.push((a.get(y as usize, x as usize), b.get(y as usize, x as usize)));
                        }
                    }
                }
                let n = xs.len() as f64;
                let ma = xs.iter().map(|p| p.0).sum::<f64>() / n;
                let mb = xs.iter().map(|p| p.1).sum::<f64>() / n;
                let cross: f64 = xs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum();
                let va: f64 = xs.iter().map(|p| (p.0 - ma).powi(2)).sum();
                let vb: f64 = xs.iter().map(|p| (p.1 - mb).powi(2)).sum();
                total += cross * cross / (va * vb + eps);
            }
        }
        total / (h * w) as f64
    }

    #[test]
    fn matches_brute_force() {
        for seed in 0..5 {
            let a = random_image(16, 16, seed);
            let b = random_image(16, 16, seed + 100);
            let fast = local_ncc(&a, &b, 5).unwrap();
            let slow = brute_force_ncc(&a, &b, 5, DEFAULT_EPSILON);
            assert!((fast - slow).abs() <= 1e-6, "{fast} vs {slow}");
        }
    }

    #[test]
    fn self_and_affine_similarity() {
        let a = random_image(32, 32, 7);
        assert!(local_ncc(&a, &a, 9).unwrap() >= 0.999);
        let b = Image::from_fn(32, 32, |i, j| 2.0 * a.get(i, j) + 0.3);
        assert!(local_ncc(&a, &b, 9).unwrap() >= 0.999);
    }

    #[test]
    fn symmetric_and_bounded() {
        let a = random_image(12, 20, 1);
        let b = random_image(12, 20, 2);
        let ab = local_ncc(&a, &b, 3).unwrap();
        let ba = local_ncc(&b, &a, 3).unwrap();
        assert!((ab - ba).abs() <= 1e-12);
        assert!((-1e-3..=1.0 + 1e-3).contains(&ab));
    }

    #[test]
    fn rejects_bad_windows_and_shapes() {
        let a = random_image(8, 8, 1);
        assert!(local_ncc(&a, &a, 4).is_err());
        assert!(local_ncc(&a, &a, 1).is_err());
        assert!(local_ncc(&a, &random_image(8, 10, 1), 3).is_err());
    }

    #[test]
    fn pair_counts() {
        assert_eq!(registration_pairs(25, 5).len(), 110);
        assert_eq!(registration_pairs(3, 5), vec![(0, 1), (1, 2), (0, 2)]);
        assert!(registration_pairs(1, 5).is_empty());
    }

    #[test]
    fn static_video_reaches_optimum() {
        let frame = random_image(16, 16, 3);
        let video = Video::from_frames(&[frame.clone(), frame.clone(), frame]).unwrap();
        let zeros = vec![VelocityField::zeros(16, 16); 3];
        let loss = video_registration_loss(&video, &zeros, &LossConfig::default()).unwrap();
        assert!((loss + 6.0).abs() <= 1e-3, "{loss}");
    }

    #[test]
    fn matches_naive_pair_loop() {
        let frames: Vec<_> = (0..4).map(|s| random_image(16, 16, 40 + s)).collect();
        let video = Video::from_frames(&frames).unwrap();
        let vels: Vec<VelocityField<f64>> =
            (0..4).map(|s| smooth_random_velocity(16, 16, 2.0, 1.5, 90 + s)).collect();
        let cfg = LossConfig {
            window: 5,
            max_offset: 2,
            ..LossConfig::default()
        };
        let fast = video_registration_loss(&video, &vels, &cfg).unwrap();
        let mut naive = 0.0;
        for t in 0..4 {
            for s in t + 1..4 {
                if s - t > cfg.max_offset {
                    continue;
                }
                let fwd = diffeo::exp_svf(&vels[t].sub(&vels[s]).unwrap(), cfg.steps).unwrap();
                let bwd = diffeo::exp_svf(&vels[s].sub(&vels[t]).unwrap(), cfg.steps).unwrap();
                naive += brute_force_ncc(&warp(&frames[t], &fwd).unwrap(), &frames[s], 5, cfg.epsilon);
                naive += brute_force_ncc(&warp(&frames[s], &bwd).unwrap(), &frames[t], 5, cfg.epsilon);
            }
        }
        assert!((fast + naive).abs() <= 1e-5, "{fast} vs {}", -naive);

        let mut g = Graph::new();
        let fv: Vec<Var> = frames
            .iter()
            .map(|f| g.constant(crate::tensor::Tensor::new(&[16, 16], f.data().to_vec()).unwrap()))
            .collect();
        let data: Vec<f64> = vels.iter().flat_map(|v| v.data().to_vec()).collect();
        let vv = g.constant(crate::tensor::Tensor::new(&[4, 2, 16, 16], data).unwrap());
        let graph_loss = video_registration_loss_graph(&mut g, &fv, vv, &cfg).unwrap();
        assert!((g.value(graph_loss).data()[0] - fast).abs() <= 1e-10);
    }

    #[test]
    fn smoothness_penalty_adds_energy() {
        let frames: Vec<_> = (0..3).map(|s| random_image(12, 12, s)).collect();
        let video = Video::from_frames(&frames).unwrap();
        let vels: Vec<VelocityField<f64>> =
            (0..3).map(|s| smooth_random_velocity(12, 12, 2.0, 1.0, s)).collect();
        let base = video_registration_loss(&video, &vels, &LossConfig::default()).unwrap();
        let cfg = LossConfig {
            smoothness_weight: 0.5,
            ..LossConfig::default()
        };
        let penalized = video_registration_loss(&video, &vels, &cfg).unwrap();
        let energy: f64 = vels.iter().map(diffeo::diffusion_energy).sum::<f64>() / 3.0;
        assert!((penalized - base - 0.5 * energy).abs() <= 1e-12);
    }
}
