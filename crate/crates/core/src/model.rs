//! Frame encoder, static/motion latent decomposition on a learned
//! orthonormal subspace, and the velocity-field decoder.
//!
//! Per clip: `h_t = enc(I_t)`, `z_s = f₁(mean_t h_t)`, `α_t = f₂(h_t)`,
//! `E = GramSchmidt(raw)`, `V_t = dec(z_s + Eᵀ α_t)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::field::{check_frame_dims, Image, VelocityField};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::video::Video;

const LEAKY_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Square frame side fed to the encoder.
    pub input_size: usize,
    /// Full latent dimension `D`.
    pub latent_dim: usize,
    /// Motion subspace dimension `M`.
    pub motion_dim: usize,
    /// Output channels of the stride-2 encoder blocks.
    pub encoder_channels: Vec<usize>,
    /// Channels of the decoder grid at its coarsest level followed by one
    /// entry per upsampling block.
    pub decoder_channels: Vec<usize>,
    /// Side of the coarsest decoder grid.
    pub decoder_base: usize,
    /// Upper bound on the velocity magnitude in pixels.
    pub velocity_cap: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// 64² input sized for CPU training.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            latent_dim: 64,
            motion_dim: 1,
            encoder_channels: vec![8, 16, 32, 64],
            decoder_channels: vec![64, 32, 16],
            decoder_base: 4,
            velocity_cap: 8.0,
            seed: 0,
        }
    }

    /// 128² input with the full-size channel widths.
    pub fn full() -> Self {
        Self {
            input_size: 128,
            latent_dim: 128,
            motion_dim: 1,
            encoder_channels: vec![16, 32, 64, 128],
            decoder_channels: vec![128, 64, 32, 16, 8],
            decoder_base: 8,
            velocity_cap: 8.0,
            seed: 0,
        }
    }

    /// Side of the grid on which the decoder's last convolution runs.
    pub fn field_grid(&self) -> usize {
        self.decoder_base << self.decoder_channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=8).contains(&self.motion_dim) {
            return bad(format!("motion_dim must be in 1..=8, got {}", self.motion_dim));
        }
        if self.latent_dim < 32 || self.motion_dim >= self.latent_dim {
            return bad(format!("latent_dim must be >= 32 and > motion_dim, got {}", self.latent_dim));
        }
        if self.encoder_channels.is_empty() || self.decoder_channels.is_empty() {
            return bad("encoder and decoder need at least one block".into());
        }
        let depth = self.encoder_channels.len() as u32;
        if self.input_size < 8 || self.input_size % (1 << depth) != 0 {
            return bad(format!(
                "input_size {} must be divisible by 2^{depth}",
                self.input_size
            ));
        }
        let grid = self.field_grid();
        if self.decoder_base == 0 || grid > self.input_size || self.input_size % grid != 0 {
            return bad(format!(
                "decoder grid {grid} must divide input_size {}",
                self.input_size
            ));
        }
        if !(self.velocity_cap > 0.0) {
            return bad("velocity_cap must be positive".into());
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct EncBlock {
    conv: Dense,
    gamma: usize,
    beta: usize,
}

/// Parameter indices by role.
#[derive(Clone, Debug)]
struct Layout {
    enc: Vec<EncBlock>,
    enc_fc: Dense,
    f1: [Dense; 2],
    f2: [Dense; 2],
    basis: usize,
    dec_fc: Dense,
    dec: Vec<Dense>,
    dec_out: Dense,
}

/// Per-clip latent quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<T> {
    /// `[T, D]` frame embeddings.
    pub h: Tensor<T>,
    /// `[D]` static component.
    pub z_static: Vec<T>,
    /// `[T, M]` motion coordinates.
    pub alpha: Tensor<T>,
    /// `[T, D]` motion components, `Eᵀ α_t`.
    pub z_motion: Tensor<T>,
    /// `[M, D]` orthonormal basis.
    pub basis: Tensor<T>,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub h: Var,
    pub z_static: Var,
    pub alpha: Var,
    pub basis: Var,
    pub z_motion: Var,
    /// `[T, 2, S, S]`.
    pub velocities: Var,
}

/// Parameters bound into a graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with fan-in scaled uniform weights and a Gaussian raw
    /// basis, all drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let uniform = |shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect()).unwrap()
        };
        let d = config.latent_dim;
        let mut in_ch = 1;
        for (k, &c) in config.encoder_channels.iter().enumerate() {
            params.push(format!("enc.{k}.conv.w"), uniform(&[c, in_ch, 3, 3], in_ch * 9, &mut rng));
            params.push(format!("enc.{k}.conv.b"), uniform(&[c], in_ch * 9, &mut rng));
            params.push(format!("enc.{k}.norm.gamma"), Tensor::full(&[c], T::one()));
            params.push(format!("enc.{k}.norm.beta"), Tensor::zeros(&[c]));
            in_ch = c;
        }
        params.push("enc.fc.w", uniform(&[d, in_ch], in_ch, &mut rng));
        params.push("enc.fc.b", uniform(&[d], in_ch, &mut rng));
        for (name, out) in [("f1", d), ("f2", config.motion_dim)] {
            params.push(format!("{name}.0.w"), uniform(&[d, d], d, &mut rng));
            params.push(format!("{name}.0.b"), uniform(&[d], d, &mut rng));
            params.push(format!("{name}.1.w"), uniform(&[out, d], d, &mut rng));
            params.push(format!("{name}.1.b"), uniform(&[out], d, &mut rng));
        }
        let m = config.motion_dim;
        let raw: Vec<T> = (0..m * d)
            .map(|_| T::lit(StandardNormal.sample(&mut rng)))
            .collect();
        params.push("basis.raw", Tensor::new(&[m, d], raw)?);
        let base = config.decoder_base;
        let c0 = config.decoder_channels[0];
        params.push("dec.fc.w", uniform(&[c0 * base * base, d], d, &mut rng));
        params.push("dec.fc.b", uniform(&[c0 * base * base], d, &mut rng));
        let mut prev = c0;
        for (k, &c) in config.decoder_channels.iter().enumerate().skip(1) {
            params.push(format!("dec.{k}.conv.w"), uniform(&[c, prev, 3, 3], prev * 9, &mut rng));
            params.push(format!("dec.{k}.conv.b"), uniform(&[c], prev * 9, &mut rng));
            prev = c;
        }
        params.push("dec.out.w", uniform(&[2, prev, 3, 3], prev * 9, &mut rng));
        params.push("dec.out.b", Tensor::zeros(&[2]));
        Self::from_params(config, params)
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let model = Self { config, params };
        let reference = model.expected_shapes();
        if reference.len() != model.params.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, got {}",
                reference.len(),
                model.params.len()
            )));
        }
        for ((name, shape), (got_name, got)) in reference
            .iter()
            .zip(model.params.names.iter().zip(&model.params.tensors))
        {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(Error::Data(format!(
                    "parameter {got_name} {:?} does not match {name} {:?}",
                    got.shape(),
                    shape
                )));
            }
        }
        Ok(model)
    }

    fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.config;
        let d = c.latent_dim;
        let mut out = Vec::new();
        let mut in_ch = 1;
        for (k, &ch) in c.encoder_channels.iter().enumerate() {
            out.push((format!("enc.{k}.conv.w"), vec![ch, in_ch, 3, 3]));
            out.push((format!("enc.{k}.conv.b"), vec![ch]));
            out.push((format!("enc.{k}.norm.gamma"), vec![ch]));
            out.push((format!("enc.{k}.norm.beta"), vec![ch]));
            in_ch = ch;
        }
        out.push(("enc.fc.w".into(), vec![d, in_ch]));
        out.push(("enc.fc.b".into(), vec![d]));
        for (name, o) in [("f1", d), ("f2", c.motion_dim)] {
            out.push((format!("{name}.0.w"), vec![d, d]));
            out.push((format!("{name}.0.b"), vec![d]));
            out.push((format!("{name}.1.w"), vec![o, d]));
            out.push((format!("{name}.1.b"), vec![o]));
        }
        out.push(("basis.raw".into(), vec![c.motion_dim, d]));
        let c0 = c.decoder_channels[0];
        out.push(("dec.fc.w".into(), vec![c0 * c.decoder_base * c.decoder_base, d]));
        out.push(("dec.fc.b".into(), vec![c0 * c.decoder_base * c.decoder_base]));
        let mut prev = c0;
        for (k, &ch) in c.decoder_channels.iter().enumerate().skip(1) {
            out.push((format!("dec.{k}.conv.w"), vec![ch, prev, 3, 3]));
            out.push((format!("dec.{k}.conv.b"), vec![ch]));
            prev = ch;
        }
        out.push(("dec.out.w".into(), vec![2, prev, 3, 3]));
        out.push(("dec.out.b".into(), vec![2]));
        out
    }

    fn layout(&self) -> Layout {
        let mut idx = 0usize;
        let mut take = || {
            idx += 1;
            idx - 1
        };
        let enc = self
            .config
            .encoder_channels
            .iter()
            .map(|_| EncBlock {
                conv: Dense { w: take(), b: take() },
                gamma: take(),
                beta: take(),
            })
            .collect();
        let enc_fc = Dense { w: take(), b: take() };
        let f1 = [Dense { w: take(), b: take() }, Dense { w: take(), b: take() }];
        let f2 = [Dense { w: take(), b: take() }, Dense { w: take(), b: take() }];
        let basis = take();
        let dec_fc = Dense { w: take(), b: take() };
        let dec = (1..self.config.decoder_channels.len())
            .map(|_| Dense { w: take(), b: take() })
            .collect();
        let dec_out = Dense { w: take(), b: take() };
        Layout {
            enc,
            enc_fc,
            f1,
            f2,
            basis,
            dec_fc,
            dec,
            dec_out,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    /// FNV-1a digest of the config and parameter values; ties calibrations
    /// to a model.
    pub fn fingerprint(&self) -> String {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |b: u8| {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for b in serde_json::to_vec(&self.config).unwrap_or_default() {
            feed(b);
        }
        for t in self.params.tensors() {
            for &x in t.data() {
                for b in x.as_f64().to_le_bytes() {
                    feed(b);
                }
            }
        }
        format!("{hash:016x}")
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Adds every parameter to `g`, differentiable when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn dense(&self, g: &mut Graph<T>, b: &Bound, d: Dense, x: Var) -> Result<Var> {
        g.linear(x, b.vars[d.w], b.vars[d.b])
    }

    fn mlp(&self, g: &mut Graph<T>, b: &Bound, layers: [Dense; 2], x: Var) -> Result<Var> {
        let hidden = self.dense(g, b, layers[0], x)?;
        let hidden = g.leaky_relu(hidden, T::lit(LEAKY_SLOPE));
        self.dense(g, b, layers[1], hidden)
    }

    /// `[N, 1, S, S]` frames → `[N, D]` embeddings.
    pub fn encode_graph(&self, g: &mut Graph<T>, b: &Bound, frames: Var) -> Result<Var> {
        let s = g.shape(frames).to_vec();
        let size = self.config.input_size;
        if s.len() != 4 || s[1] != 1 || s[2] != size || s[3] != size {
            return Err(Error::Shape(format!(
                "encoder expects [N, 1, {size}, {size}], got {s:?}"
            )));
        }
        let layout = self.layout();
        let mut x = frames;
        for blk in &layout.enc {
            x = g.conv2d(x, b.vars[blk.conv.w], b.vars[blk.conv.b], 2, 1)?;
            x = g.sample_norm(x, b.vars[blk.gamma], b.vars[blk.beta], T::lit(NORM_EPS))?;
            x = g.leaky_relu(x, T::lit(LEAKY_SLOPE));
        }
        let pooled = g.global_avg_pool(x)?;
        self.dense(g, b, layout.enc_fc, pooled)
    }

    /// `f₁(mean_t h_t)` as a `[1, D]` node.
    pub fn static_graph(&self, g: &mut Graph<T>, b: &Bound, h: Var) -> Result<Var> {
        let mean = g.mean_rows(h);
        self.mlp(g, b, self.layout().f1, mean)
    }

    /// `f₂(h_t)` for every row, `[T, M]`.
    pub fn motion_graph(&self, g: &mut Graph<T>, b: &Bound, h: Var) -> Result<Var> {
        self.mlp(g, b, self.layout().f2, h)
    }

    /// Orthonormalized basis `[M, D]`.
    pub fn basis_graph(&self, g: &mut Graph<T>, b: &Bound) -> Result<Var> {
        g.gram_schmidt(b.vars[self.layout().basis])
    }

    /// `[N, D]` latents → `[N, 2, S, S]` velocity fields.
    pub fn decode_graph(&self, g: &mut Graph<T>, b: &Bound, z: Var) -> Result<Var> {
        let layout = self.layout();
        let c = &self.config;
        let n = g.shape(z)[0];
        let base = c.decoder_base;
        let x = self.dense(g, b, layout.dec_fc, z)?;
        let mut x = g.reshape(x, &[n, c.decoder_channels[0], base, base])?;
        x = g.leaky_relu(x, T::lit(LEAKY_SLOPE));
        let mut side = base;
        for blk in &layout.dec {
            side *= 2;
            x = g.resize(x, side, side)?;
            x = g.conv2d(x, b.vars[blk.w], b.vars[blk.b], 1, 1)?;
            x = g.leaky_relu(x, T::lit(LEAKY_SLOPE));
        }
        x = g.conv2d(x, b.vars[layout.dec_out.w], b.vars[layout.dec_out.b], 1, 1)?;
        // per-component bound cap/√2 keeps the vector magnitude below cap
        x = g.scaled_tanh(x, T::lit(c.velocity_cap / 2f64.sqrt()));
        if side != c.input_size {
            x = g.resize(x, c.input_size, c.input_size)?;
        }
        Ok(x)
    }

    /// Full pass over `[T, 1, S, S]` frames.
    pub fn forward_graph(&self, g: &mut Graph<T>, b: &Bound, frames: Var) -> Result<ForwardNodes> {
        let h = self.encode_graph(g, b, frames)?;
        let z_static = self.static_graph(g, b, h)?;
        let alpha = self.motion_graph(g, b, h)?;
        let basis = self.basis_graph(g, b)?;
        let z_motion = g.matmul(alpha, basis)?;
        let latent = g.add_row(z_motion, z_static)?;
        let velocities = self.decode_graph(g, b, latent)?;
        Ok(ForwardNodes {
            h,
            z_static,
            alpha,
            basis,
            z_motion,
            velocities,
        })
    }

    fn frames_tensor(&self, video: &Video<T>) -> Result<Tensor<T>> {
        let size = self.config.input_size;
        if video.height() != size || video.width() != size {
            return Err(Error::Shape(format!(
                "model expects {size}x{size} frames, got {}x{}",
                video.height(),
                video.width()
            )));
        }
        check_frame_dims(video.height(), video.width())?;
        Tensor::new(&[video.frames(), 1, size, size], video.data().to_vec())
    }

    pub fn encode(&self, frame: &Image<T>) -> Result<Vec<T>> {
        let video = Video::from_frames(std::slice::from_ref(frame))?;
        Ok(self.encode_video(&video)?.into_data())
    }

    /// `[T, D]` embeddings of every frame.
    pub fn encode_video(&self, video: &Video<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(self.frames_tensor(video)?);
        let h = self.encode_graph(&mut g, &b, x)?;
        Ok(g.value(h).clone())
    }

    pub fn static_component(&self, h: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let hv = g.constant(h.clone());
        let z = self.static_graph(&mut g, &b, hv)?;
        Ok(g.value(z).data().to_vec())
    }

    pub fn motion_coords(&self, h_t: &[T]) -> Result<Vec<T>> {
        let rows = Tensor::new(&[1, h_t.len()], h_t.to_vec())?;
        Ok(self.motion_coords_batch(&rows)?.into_data())
    }

    /// `[T, D]` → `[T, M]`.
    pub fn motion_coords_batch(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let hv = g.constant(h.clone());
        let a = self.motion_graph(&mut g, &b, hv)?;
        Ok(g.value(a).clone())
    }

    pub fn basis(&self) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let e = self.basis_graph(&mut g, &b)?;
        Ok(g.value(e).clone())
    }

    pub fn decode(&self, z: &[T]) -> Result<VelocityField<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let zv = g.constant(Tensor::new(&[1, z.len()], z.to_vec())?);
        let v = self.decode_graph(&mut g, &b, zv)?;
        let s = self.config.input_size;
        VelocityField::new(s, s, g.value(v).data().to_vec())
    }

    pub fn forward(&self, video: &Video<T>) -> Result<(Vec<VelocityField<T>>, LatentState<T>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(self.frames_tensor(video)?);
        let nodes = self.forward_graph(&mut g, &b, x)?;
        let s = self.config.input_size;
        let v = g.value(nodes.velocities);
        let velocities = (0..video.frames())
            .map(|t| VelocityField::new(s, s, v.row(t).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let state = LatentState {
            h: g.value(nodes.h).clone(),
            z_static: g.value(nodes.z_static).data().to_vec(),
            alpha: g.value(nodes.alpha).clone(),
            z_motion: g.value(nodes.z_motion).clone(),
            basis: g.value(nodes.basis).clone(),
        };
        Ok((velocities, state))
    }
}

/// `‖E Eᵀ − I‖∞` of an `[M, D]` basis.
pub fn orthonormality_error<T: Scalar>(basis: &Tensor<T>) -> f64 {
    let (m, d) = (basis.shape()[0], basis.shape()[1]);
    let e = basis.data();
    let mut worst: f64 = 0.0;
    for i in 0..m {
        for j in 0..m {
            let dot: f64 = (0..d).map(|k| e[i * d + k].as_f64() * e[j * d + k].as_f64()).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

/// Classical Gram–Schmidt on the rows of `raw`.
pub fn orthonormalize<T: Scalar>(raw: &Tensor<T>) -> Result<Tensor<T>> {
    if raw.shape().len() != 2 {
        return Err(Error::Shape(format!("basis must be [M, D], got {:?}", raw.shape())));
    }
    let (m, d) = (raw.shape()[0], raw.shape()[1]);
    let (e, _) = crate::autodiff::gram_schmidt_rows(raw.data(), m, d)?;
    Tensor::new(&[m, d], e)
}
