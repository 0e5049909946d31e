//! Minimal tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that (transitively) depends on a node created with
//! [`Graph::param`].

pub mod gradcheck;
pub mod kernels;

use crate::error::{Error, Result};
use crate::field::kernels as fk;
use crate::scalar::Scalar;
use crate::similarity::kernels::{self as nk, NccCache};
use crate::tensor::Tensor;

use kernels::ConvGeom;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    Sum(Vec<Var>),
    Reshape(Var),
    Select(Var, usize),
    Linear { x: Var, w: Var, b: Var },
    Matmul(Var, Var),
    AddRow { x: Var, row: Var },
    MeanRows(Var),
    LeakyRelu(Var, T),
    ScaledTanh(Var, T),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    SampleNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    GlobalAvgPool(Var),
    Resize(Var),
    GramSchmidt { raw: Var, norms: Vec<T> },
    Diffusion(Var),
    Dot(Var, Var),
    SelfCompose(Var),
    Warp { img: Var, disp: Var },
    Ncc { a: Var, b: Var, window: usize, eps: T, cache: NccCache<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` received none.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.grads
            .get_mut(v.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(data, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(data, Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let data = self.value(a).map(|x| x * s);
        self.push(data, Op::Scale(a, s), &[a])
    }

    /// Elementwise sum of equally shaped nodes, accumulated in order.
    pub fn sum(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars
            .first()
            .ok_or_else(|| Error::InvalidArgument("sum of no terms".into()))?;
        let mut acc = self.value(first).clone();
        for &v in &vars[1..] {
            self.same_shape(first, v, "sum")?;
            acc.add_assign(self.value(v));
        }
        Ok(self.push(acc, Op::Sum(vars.to_vec()), vars))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let data = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(data, Op::Reshape(a), &[a]))
    }

    /// Slice `index` of the leading axis (the axis is dropped).
    pub fn select(&mut self, a: Var, index: usize) -> Var {
        let t = self.value(a);
        assert!(index < t.rows(), "select index out of range");
        let shape: Vec<usize> = t.shape()[1..].to_vec();
        let shape = if shape.is_empty() { vec![1] } else { shape };
        let data = Tensor::new(&shape, t.row(index).to_vec()).unwrap();
        self.push(data, Op::Select(a, index), &[a])
    }

    /// `x [N, I]`, `w [O, I]`, `b [O]` → `[N, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(Error::Shape(format!("linear x {xs:?} w {ws:?} b {bs:?}")));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[n, o]);
        kernels::linear(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n,
            i,
            o,
            out.data_mut(),
        );
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// `[N, K] × [K, M]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(Error::Shape(format!("matmul {as_:?} x {bs:?}")));
        }
        let (n, k, m) = (as_[0], as_[1], bs[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Tensor::zeros(&[n, m]);
        let o = out.data_mut();
        for r in 0..n {
            for kk in 0..k {
                let x = av[r * k + kk];
                for c in 0..m {
                    o[r * m + c] += x * bv[kk * m + c];
                }
            }
        }
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    /// Adds `row [1, D]` (or `[D]`) to every row of `x [N, D]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.value(row).len();
        let xs = self.shape(x);
        if xs.len() != 2 || xs[1] != d {
            return Err(Error::Shape(format!("add_row {xs:?} + {:?}", self.shape(row))));
        }
        let mut out = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for chunk in out.data_mut().chunks_mut(d) {
            for (o, &v) in chunk.iter_mut().zip(&r) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::AddRow { x, row }, &[x, row]))
    }

    /// Mean over the leading axis of `[N, D]`, giving `[1, D]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, d) = (t.rows(), t.row_len());
        let mut out = Tensor::zeros(&[1, d]);
        for r in 0..n {
            for (o, &v) in out.data_mut().iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let inv = T::one() / T::from_usize_lossy(n);
        for o in out.data_mut() {
            *o *= inv;
        }
        self.push(out, Op::MeanRows(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    /// `cap · tanh(x / cap)`: identity near zero, bounded by `cap`.
    pub fn scaled_tanh(&mut self, x: Var, cap: T) -> Var {
        let out = self.value(x).map(|v| cap * (v / cap).tanh());
        self.push(out, Op::ScaledTanh(x, cap), &[x])
    }

    /// 2-D convolution of `x [N, C, H, W]` with `w [O, C, K, K]`, `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || self.shape(b) != [ws[0]] {
            return Err(Error::Shape(format!("conv2d x {xs:?} w {ws:?}")));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ws[0],
            in_h: xs[2],
            in_w: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        let mut out = Tensor::zeros(&[geom.batch, geom.out_ch, geom.out_h(), geom.out_w()]);
        kernels::conv2d(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            out.data_mut(),
        );
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    /// Per-sample normalization over `[C, H, W]` with per-channel affine.
    pub fn sample_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::Shape(format!("sample_norm x {xs:?}")));
        }
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let per = c * plane;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = Tensor::zeros(&xs);
        let mut inv_std = Vec::with_capacity(n);
        let count = T::from_usize_lossy(per);
        for s in 0..n {
            let xs_ = &xv[s * per..][..per];
            let mean = xs_.iter().copied().sum::<T>() / count;
            let var = xs_.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for ch in 0..c {
                for p in 0..plane {
                    let idx = s * per + ch * plane + p;
                    let xh = (xv[idx] - mean) * is;
                    xhat[idx] = xh;
                    out.data_mut()[idx] = gv[ch] * xh + bv[ch];
                }
            }
        }
        Ok(self.push(
            out,
            Op::SampleNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// `[N, C, H, W]` → `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool {xs:?}")));
        }
        let plane = xs[2] * xs[3];
        let inv = T::one() / T::from_usize_lossy(plane);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(&[xs[0], xs[1]], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    /// Bilinear resize of the two trailing axes.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::Shape(format!("resize {xs:?}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes = self.value(x).len() / (h * w);
        let mut shape = xs.clone();
        let k = shape.len();
        shape[k - 2] = out_h;
        shape[k - 1] = out_w;
        let mut out = Tensor::zeros(&shape);
        kernels::resize(self.value(x).data(), planes, h, w, out_h, out_w, out.data_mut());
        Ok(self.push(out, Op::Resize(x), &[x]))
    }

    /// Classical Gram–Schmidt on the rows of `raw [M, D]`, in index order.
    pub fn gram_schmidt(&mut self, raw: Var) -> Result<Var> {
        let rs = self.shape(raw).to_vec();
        if rs.len() != 2 {
            return Err(Error::Shape(format!("gram_schmidt {rs:?}")));
        }
        let (e, norms) = gram_schmidt_rows(self.value(raw).data(), rs[0], rs[1])?;
        let out = Tensor::new(&rs, e)?;
        Ok(self.push(out, Op::GramSchmidt { raw, norms }, &[raw]))
    }

    /// `Σ a ⊙ b`, a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let v: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .sum();
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, b), &[a, b]))
    }

    /// Diffusion (first-difference) energy of the two trailing axes, a scalar.
    pub fn diffusion(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::Shape(format!("diffusion {xs:?}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes = self.value(x).len() / (h * w);
        let e = kernels::diffusion(self.value(x).data(), planes, h, w);
        Ok(self.push(Tensor::scalar(e), Op::Diffusion(x), &[x]))
    }

    /// `u + u ∘ (id + u)` for a `[2, H, W]` displacement.
    pub fn self_compose(&mut self, u: Var) -> Result<Var> {
        let us = self.shape(u).to_vec();
        if us.len() != 3 || us[0] != 2 {
            return Err(Error::Shape(format!("self_compose {us:?}")));
        }
        let mut out = Tensor::zeros(&us);
        let uv = self.value(u).data();
        fk::compose(uv, uv, us[1], us[2], out.data_mut());
        Ok(self.push(out, Op::SelfCompose(u), &[u]))
    }

    /// Warps `img` (`[H, W]` or `[C, H, W]`) by displacement `[2, H, W]`.
    pub fn warp(&mut self, img: Var, disp: Var) -> Result<Var> {
        let (is, ds) = (self.shape(img).to_vec(), self.shape(disp).to_vec());
        let k = is.len();
        if ds.len() != 3 || ds[0] != 2 || k < 2 || is[k - 2] != ds[1] || is[k - 1] != ds[2] {
            return Err(Error::Shape(format!("warp image {is:?} by {ds:?}")));
        }
        let (h, w) = (ds[1], ds[2]);
        let channels = self.value(img).len() / (h * w);
        let mut out = Tensor::zeros(&is);
        fk::warp(
            self.value(img).data(),
            channels,
            h,
            w,
            self.value(disp).data(),
            out.data_mut(),
        );
        Ok(self.push(out, Op::Warp { img, disp }, &[img, disp]))
    }

    /// Windowed squared NCC of two `[H, W]` images, a scalar node.
    pub fn ncc(&mut self, a: Var, b: Var, window: usize, eps: f64) -> Result<Var> {
        self.same_shape(a, b, "ncc")?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("ncc expects [H, W], got {s:?}")));
        }
        let eps = T::lit(eps);
        let (score, cache) = nk::ncc(self.value(a).data(), self.value(b).data(), s[0], s[1], window, eps);
        Ok(self.push(
            Tensor::scalar(score),
            Op::Ncc {
                a,
                b,
                window,
                eps,
                cache,
            },
            &[a, b],
        ))
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &gout, &mut grads);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let g = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| {
                    for (o, &v) in d.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, |d| {
                for (o, &v) in d.iter_mut().zip(g) {
                    *o += v * *s;
                }
            }),
            Op::Sum(vars) => {
                for &v in vars {
                    self.acc(grads, v, |d| add_into(d, g));
                }
            }
            Op::Reshape(a) => self.acc(grads, *a, |d| add_into(d, g)),
            Op::Select(a, index) => {
                let n = g.len();
                self.acc(grads, *a, |d| add_into(&mut d[index * n..(index + 1) * n], g));
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, i, o) = (xs[0], xs[1], ws[0]);
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.acc(grads, *x, |d| kernels::linear_backward(xv, wv, g, n, i, o, Some(d), None, None));
                self.acc(grads, *w, |d| kernels::linear_backward(xv, wv, g, n, i, o, None, Some(d), None));
                self.acc(grads, *b, |d| kernels::linear_backward(xv, wv, g, n, i, o, None, None, Some(d)));
            }
            Op::Matmul(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for r in 0..n {
                        for kk in 0..k {
                            let mut s = T::zero();
                            for c in 0..m {
                                s += g[r * m + c] * bv[kk * m + c];
                            }
                            d[r * k + kk] += s;
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for r in 0..n {
                        for kk in 0..k {
                            let x = av[r * k + kk];
                            for c in 0..m {
                                d[kk * m + c] += x * g[r * m + c];
                            }
                        }
                    }
                });
            }
            Op::AddRow { x, row } => {
                self.acc(grads, *x, |d| add_into(d, g));
                let dlen = self.value(*row).len();
                self.acc(grads, *row, |d| {
                    for chunk in g.chunks(dlen) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::MeanRows(x) => {
                let t = self.value(*x);
                let inv = T::one() / T::from_usize_lossy(t.rows());
                let dlen = t.row_len();
                self.acc(grads, *x, |d| {
                    for chunk in d.chunks_mut(dlen) {
                        for (o, &v) in chunk.iter_mut().zip(g) {
                            *o += v * inv;
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((o, &v), &xx) in d.iter_mut().zip(g).zip(xv) {
                        *o += if xx > T::zero() { v } else { v * *slope };
                    }
                });
            }
            Op::ScaledTanh(x, cap) => {
                let y = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((o, &v), &yy) in d.iter_mut().zip(g).zip(y) {
                        let t = yy / *cap;
                        *o += v * (T::one() - t * t);
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.acc(grads, *x, |d| kernels::conv2d_backward(geom, xv, wv, g, Some(d), None, None));
                self.acc(grads, *w, |d| kernels::conv2d_backward(geom, xv, wv, g, None, Some(d), None));
                self.acc(grads, *b, |d| {
                    let plane = geom.out_h() * geom.out_w();
                    for (k, chunk) in g.chunks(plane).enumerate() {
                        d[k % geom.out_ch] += chunk.iter().copied().sum::<T>();
                    }
                });
            }
            Op::SampleNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let xs = self.shape(*x);
                let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let per = c * plane;
                let gv = self.value(*gamma).data();
                self.acc(grads, *gamma, |d| {
                    for (idx, (&v, &xh)) in g.iter().zip(xhat).enumerate() {
                        d[(idx % per) / plane] += v * xh;
                    }
                });
                self.acc(grads, *beta, |d| {
                    for (idx, &v) in g.iter().enumerate() {
                        d[(idx % per) / plane] += v;
                    }
                });
                self.acc(grads, *x, |d| {
                    let count = T::from_usize_lossy(per);
                    for s in 0..n {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for idx in s * per..(s + 1) * per {
                            let gx = g[idx] * gv[(idx % per) / plane];
                            m1 += gx;
                            m2 += gx * xhat[idx];
                        }
                        m1 /= count;
                        m2 /= count;
                        for idx in s * per..(s + 1) * per {
                            let gx = g[idx] * gv[(idx % per) / plane];
                            d[idx] += inv_std[s] * (gx - m1 - xhat[idx] * m2);
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let plane = xs[2] * xs[3];
                let inv = T::one() / T::from_usize_lossy(plane);
                self.acc(grads, *x, |d| {
                    for (chunk, &v) in d.chunks_mut(plane).zip(g) {
                        for o in chunk {
                            *o += v * inv;
                        }
                    }
                });
            }
            Op::Resize(x) => {
                let xs = self.shape(*x);
                let k = xs.len();
                let (h, w) = (xs[k - 2], xs[k - 1]);
                let os = node.value.shape();
                let (oh, ow) = (os[k - 2], os[k - 1]);
                let planes = self.value(*x).len() / (h * w);
                self.acc(grads, *x, |d| kernels::resize_backward(g, planes, h, w, oh, ow, d));
            }
            Op::GramSchmidt { raw, norms } => {
                let rs = self.shape(*raw);
                let (m, dd) = (rs[0], rs[1]);
                let rv = self.value(*raw).data();
                let e = node.value.data();
                self.acc(grads, *raw, |d| gram_schmidt_backward(rv, e, norms, g, m, dd, d));
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for (o, &y) in d.iter_mut().zip(bv) {
                        *o += g[0] * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for (o, &x) in d.iter_mut().zip(av) {
                        *o += g[0] * x;
                    }
                });
            }
            Op::Diffusion(x) => {
                let xs = self.shape(*x);
                let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                let xv = self.value(*x).data();
                let planes = xv.len() / (h * w);
                self.acc(grads, *x, |d| kernels::diffusion_backward(xv, planes, h, w, g[0], d));
            }
            Op::SelfCompose(u) => {
                let us = self.shape(*u);
                let (h, w) = (us[1], us[2]);
                let uv = self.value(*u).data();
                self.acc(grads, *u, |d| {
                    add_into(d, g);
                    let mut gsrc = vec![T::zero(); d.len()];
                    fk::warp_backward(uv, 2, h, w, uv, g, Some(&mut gsrc), Some(d));
                    add_into(d, &gsrc);
                });
            }
            Op::Warp { img, disp } => {
                let ds = self.shape(*disp);
                let (h, w) = (ds[1], ds[2]);
                let iv = self.value(*img).data();
                let dv = self.value(*disp).data();
                let channels = iv.len() / (h * w);
                self.acc(grads, *img, |d| {
                    fk::warp_backward(iv, channels, h, w, dv, g, Some(d), None)
                });
                self.acc(grads, *disp, |d| {
                    fk::warp_backward(iv, channels, h, w, dv, g, None, Some(d))
                });
            }
            Op::Ncc {
                a,
                b,
                window,
                eps,
                cache,
            } => {
                let s = self.shape(*a);
                let (h, w) = (s[0], s[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                match (self.needs(*a), self.needs(*b)) {
                    (false, false) => {}
                    (true, false) => self.acc(grads, *a, |d| {
                        nk::ncc_backward(av, bv, h, w, *window, *eps, cache, g[0], Some(d), None)
                    }),
                    (false, true) => self.acc(grads, *b, |d| {
                        nk::ncc_backward(av, bv, h, w, *window, *eps, cache, g[0], None, Some(d))
                    }),
                    (true, true) => {
                        let mut ga = vec![T::zero(); av.len()];
                        let mut gb = vec![T::zero(); bv.len()];
                        nk::ncc_backward(av, bv, h, w, *window, *eps, cache, g[0], Some(&mut ga), Some(&mut gb));
                        self.acc(grads, *a, |d| add_into(d, &ga));
                        self.acc(grads, *b, |d| add_into(d, &gb));
                    }
                }
            }
        }
    }

    /// Runs `f` on the gradient buffer of `v` when `v` needs a gradient.
    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.needs(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)));
        f(slot.data_mut());
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).unwrap()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

/// Row norm below which Gram–Schmidt reports rank deficiency.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// Classical Gram–Schmidt on `m` rows of length `d`. Returns the
/// orthonormal rows and the pre-normalization norms.
pub fn gram_schmidt_rows<T: Scalar>(raw: &[T], m: usize, d: usize) -> Result<(Vec<T>, Vec<T>)> {
    let mut e = vec![T::zero(); m * d];
    let mut norms = Vec::with_capacity(m);
    for k in 0..m {
        let rk = &raw[k * d..][..d];
        let mut wk = rk.to_vec();
        for j in 0..k {
            let ej = &e[j * d..][..d];
            let c: T = rk.iter().zip(ej).map(|(&a, &b)| a * b).sum();
            for (x, &b) in wk.iter_mut().zip(ej) {
                *x -= c * b;
            }
        }
        let norm = wk.iter().map(|&x| x * x).sum::<T>().sqrt();
        if !(norm.as_f64() >= RANK_TOLERANCE) {
            return Err(Error::RankDeficient {
                row: k,
                norm: norm.as_f64(),
            });
        }
        for (dst, &x) in e[k * d..][..d].iter_mut().zip(&wk) {
            *dst = x / norm;
        }
        norms.push(norm);
    }
    Ok((e, norms))
}

fn gram_schmidt_backward<T: Scalar>(
    raw: &[T],
    e: &[T],
    norms: &[T],
    gout: &[T],
    m: usize,
    d: usize,
    graw: &mut [T],
) {
    let mut ge = gout.to_vec();
    for k in (0..m).rev() {
        let ek = &e[k * d..][..d];
        let gek = ge[k * d..][..d].to_vec();
        let proj: T = ek.iter().zip(&gek).map(|(&a, &b)| a * b).sum();
        let gw: Vec<T> = gek
            .iter()
            .zip(ek)
            .map(|(&g, &x)| (g - x * proj) / norms[k])
            .collect();
        let rk = &raw[k * d..][..d];
        for (o, &v) in graw[k * d..][..d].iter_mut().zip(&gw) {
            *o += v;
        }
        for j in 0..k {
            // w_k -= (r_k · e_j) e_j
            let c: T = rk.iter().zip(&e[j * d..][..d]).map(|(&a, &b)| a * b).sum();
            let gc: T = -gw.iter().zip(&e[j * d..][..d]).map(|(&a, &b)| a * b).sum::<T>();
            for t in 0..d {
                ge[j * d + t] += -c * gw[t] + gc * rk[t];
                graw[k * d + t] += gc * e[j * d + t];
            }
        }
    }
}
