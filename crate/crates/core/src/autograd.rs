//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Graph`] borrows the [`ParamStore`] read-only and records every operation.
//! Parameters outside the trainable mask enter the tape as constants: no
//! gradient is ever computed for them, although gradients still flow *through*
//! the operations that consume them.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::losses;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
struct NormCache {
    xhat_in: Vec<f32>,
    xhat_ln: Vec<f32>,
    inv_in: Vec<f32>,
    inv_ln: Vec<f32>,
    rho: f32,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    ScaleConst(Var, f32),
    MulScalar {
        x: Var,
        s: Var,
    },
    MulChannel {
        x: Var,
        w: Var,
    },
    ConcatChannels(Var, Var),
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    Tanh(Var),
    GlobalAvgPool(Var),
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    LayerInstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rho_logits: Var,
        cache: NormCache,
    },
    SpectralNorm {
        w: Var,
        u: Vec<f32>,
        v: Vec<f32>,
        sigma: f32,
    },
    MseTarget {
        x: Var,
        target: f32,
    },
    L1 {
        a: Var,
        b: Var,
    },
    Sum(Vec<Var>),
    SumAll(Var),
    Reshape(Var),
    MulConst(Var, Tensor),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    trainable: Vec<bool>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    sn_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }

    /// Gradient of a parameter, `None` if the parameter was constant or unused.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.by_node[v.0].as_ref())
    }

    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor)> {
        let mut out = Vec::new();
        for (id, v) in &self.params {
            if let Some(g) = self.by_node[v.0].take() {
                out.push((*id, g));
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

impl<'s> Graph<'s> {
    /// A graph where only the parameters flagged in `trainable` receive gradients.
    pub fn new(store: &'s ParamStore, trainable: Vec<bool>) -> Self {
        assert_eq!(trainable.len(), store.len());
        Graph {
            store,
            trainable,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            sn_vars: HashMap::new(),
        }
    }

    /// A graph with every parameter constant (inference).
    pub fn frozen(store: &'s ParamStore) -> Self {
        Self::new(store, vec![false; store.len()])
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is reported by [`Grads::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copies `v` into a constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        if !self.rg(v) {
            return v;
        }
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.trainable[id.0],
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// The spectrally normalized view `W / σ̂` of a parameter, using its stored
    /// power-iteration vectors. Cached per graph.
    pub fn spectral_param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.sn_vars.get(&id) {
            return Ok(*v);
        }
        let p = self.store.get(id);
        let state = p.spectral.as_ref().ok_or_else(|| {
            Error::Parameter(format!("{} has no spectral-normalization state", p.name))
        })?;
        let sigma = state.sigma(p.value.data());
        let normalized = p.value.map(|x| x / sigma);
        let (u, v) = (state.u.clone(), state.v.clone());
        let w = self.param(id);
        let rg = self.rg(w);
        let out = self.push(normalized, Op::SpectralNorm { w, u, v, sigma }, rg);
        self.sn_vars.insert(id, out);
        Ok(out)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, in_c, in_h, in_w) = self.value(x).dims4()?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != in_c || ws[2] != ws[3] {
            return Err(Error::shape(format!(
                "conv weight {ws:?} does not fit input with {in_c} channels"
            )));
        }
        let geom = ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c: ws[0],
            kernel: ws[2],
            stride,
            pad,
        };
        let (oh, ow) = geom.out_hw().ok_or_else(|| {
            Error::shape(format!(
                "{in_h}x{in_w} input is too small for a {}x{} kernel with padding {pad}",
                ws[2], ws[2]
            ))
        })?;
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(self.value(x).data(), n, self.value(w).data(), bias, &geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(vec![n, geom.out_c, oh, ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, n }, rg))
    }

    /// `x (n, in) · wᵀ (in, out) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!("linear {xs:?} x {ws:?}ᵀ")));
        }
        let (n, out_f) = (xs[0], ws[0]);
        let mut out = vec![0.0; n * out_f];
        kernels::gemm(
            kernels::MatRef::new(self.value(x).data(), n, xs[1]),
            kernels::MatRef::new(self.value(w).data(), out_f, ws[1]).t(),
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(out_f) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(vec![n, out_f], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "cannot add {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let t = self.value(x).map(|v| v * k);
        let rg = self.rg(x);
        self.push(t, Op::ScaleConst(x, k), rg)
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar expects a one-element factor"));
        }
        let k = self.value(s).item();
        let t = self.value(x).map(|v| v * k);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::MulScalar { x, s }, rg))
    }

    /// Scales channel `c` of an NCHW tensor by `w[c]`.
    pub fn mul_channel(&mut self, x: Var, w: Var) -> Result<Var> {
        let (_, c, h, wd) = self.value(x).dims4()?;
        if self.value(w).len() != c {
            return Err(Error::shape(format!(
                "{} channel weights for {c} channels",
                self.value(w).len()
            )));
        }
        let hw = h * wd;
        let wv = self.value(w).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, chunk) in t.data_mut().chunks_mut(hw).enumerate() {
            let k = wv[i % c];
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::MulChannel { x, w }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape("concat inputs differ in batch or spatial size"));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            data.extend_from_slice(&self.value(a).data()[s * ca * hw..(s + 1) * ca * hw]);
            data.extend_from_slice(&self.value(b).data()[s * cb * hw..(s + 1) * cb * hw]);
        }
        let t = Tensor::new(vec![n, ca + cb, h, w], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::ConcatChannels(a, b), rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { v * slope });
        let rg = self.rg(x);
        self.push(t, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f32::tanh);
        let rg = self.rg(x);
        self.push(t, Op::Tanh(x), rg)
    }

    /// `(n, c, h, w)` → `(n, c)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| (p.iter().map(|v| *v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let t = Tensor::new(vec![n, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GlobalAvgPool(x), rg))
    }

    /// `(n, c, h, w)` → `(n, c)` spatial max; ties resolve to the first position.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let mut argmax = Vec::with_capacity(n * c);
        let mut data = Vec::with_capacity(n * c);
        for p in self.value(x).data().chunks(hw) {
            let (mut best, mut idx) = (f32::NEG_INFINITY, 0);
            for (i, v) in p.iter().enumerate() {
                if *v > best {
                    best = *v;
                    idx = i;
                }
            }
            argmax.push(idx);
            data.push(best);
        }
        let t = Tensor::new(vec![n, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GlobalMaxPool { x, argmax }, rg))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if c % (r * r) != 0 {
            return Err(Error::shape(format!(
                "pixel shuffle by {r} needs channels divisible by {}, got {c}",
                r * r
            )));
        }
        let data = kernels::pixel_shuffle(self.value(x).data(), n, c, h, w, r);
        let t = Tensor::new(vec![n, c / (r * r), h * r, w * r], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::PixelShuffle { x, r }, rg))
    }

    /// Layer-instance normalization: `γ·(ρ·IN(x) + (1−ρ)·LN(x)) + β` with
    /// `ρ = softmax(rho_logits)[0]`. `gamma`/`beta` are either `(c)` or `(n, c)`.
    pub fn layer_instance_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        rho_logits: Var,
        eps: f32,
    ) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let len = self.value(v).len();
            if len != c && len != n * c {
                return Err(Error::shape(format!(
                    "{name} has {len} values for {n}x{c} (sample, channel) pairs"
                )));
            }
        }
        if self.value(rho_logits).len() != 2 {
            return Err(Error::shape("rho logits must have exactly two entries"));
        }
        let rho = rho_from_logits(self.value(rho_logits).data());
        let (out, cache) = layer_instance_norm_forward(
            self.value(x).data(),
            (n, c, h * w),
            self.value(gamma).data(),
            self.value(beta).data(),
            rho,
            eps,
        );
        let t = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta) || self.rg(rho_logits);
        Ok(self.push(
            t,
            Op::LayerInstanceNorm {
                x,
                gamma,
                beta,
                rho_logits,
                cache,
            },
            rg,
        ))
    }

    /// Scalar `mean((x − target)²)`.
    pub fn mse_target(&mut self, x: Var, target: f32) -> Var {
        let v = losses::mean_squared_to_target(self.value(x).data(), target);
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::MseTarget { x, target }, rg)
    }

    /// Scalar `mean(|a − b|)`.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "l1 between {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let v = losses::mean_abs_diff(self.value(a).data(), self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::L1 { a, b }, rg))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let v: f32 = parts.iter().map(|p| self.value(*p).item()).sum();
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Tensor::scalar(v), Op::Sum(parts.to_vec()), rg)
    }

    /// Scalar sum of every element.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let v: f64 = self.value(x).data().iter().map(|v| *v as f64).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v as f32), Op::SumAll(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, k: Tensor) -> Result<Var> {
        if self.shape(x) != k.shape() {
            return Err(Error::shape(format!(
                "mul_const {:?} by {:?}",
                self.shape(x),
                k.shape()
            )));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(k.data())
            .map(|(a, b)| a * b)
            .collect();
        let t = tensor_like(self.value(x), data);
        let rg = self.rg(x);
        Ok(self.push(t, Op::MulConst(x, k), rg))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Leaf | Op::Param(_));
            let Some(g) = (if is_leaf { None } else { grads[i].take() }) else {
                continue;
            };
            self.backward_node(Var(i), &g, &mut grads);
        }
        let params = self
            .param_vars
            .iter()
            .map(|(id, v)| (*id, *v))
            .collect::<Vec<_>>();
        Grads {
            by_node: grads,
            params,
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, out: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[out.0].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom, n } => {
                let cg = kernels::conv2d_backward(
                    self.value(*x).data(),
                    *n,
                    self.value(*w).data(),
                    gd,
                    geom,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(d) = cg.input {
                    self.accumulate(grads, *x, tensor_like(self.value(*x), d));
                }
                if let Some(d) = cg.weight {
                    self.accumulate(grads, *w, tensor_like(self.value(*w), d));
                }
                if let (Some(b), Some(d)) = (b, cg.bias) {
                    self.accumulate(grads, *b, tensor_like(self.value(*b), d));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, in_f) = (xs[0], xs[1]);
                let out_f = self.shape(*w)[0];
                let go = kernels::MatRef::new(gd, n, out_f);
                if self.rg(*x) {
                    let mut d = vec![0.0; n * in_f];
                    kernels::gemm(go, kernels::MatRef::new(self.value(*w).data(), out_f, in_f), &mut d, false);
                    self.accumulate(grads, *x, tensor_like(self.value(*x), d));
                }
                if self.rg(*w) {
                    let mut d = vec![0.0; out_f * in_f];
                    kernels::gemm(go.t(), kernels::MatRef::new(self.value(*x).data(), n, in_f), &mut d, false);
                    self.accumulate(grads, *w, tensor_like(self.value(*w), d));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut d = vec![0.0; out_f];
                    for row in gd.chunks(out_f) {
                        d.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    self.accumulate(grads, b, tensor_like(self.value(b), d));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::ScaleConst(x, k) => {
                self.accumulate(grads, *x, g.map(|v| v * k));
            }
            Op::MulScalar { x, s } => {
                let k = self.value(*s).item();
                if self.rg(*x) {
                    self.accumulate(grads, *x, g.map(|v| v * k));
                }
                if self.rg(*s) {
                    let d: f64 = gd
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(a, b)| *a as f64 * *b as f64)
                        .sum();
                    self.accumulate(grads, *s, Tensor::scalar(d as f32));
                }
            }
            Op::MulChannel { x, w } => {
                let (_, c, h, wd) = self.value(*x).dims4().expect("rank checked in forward");
                let hw = h * wd;
                let wv = self.value(*w).data();
                if self.rg(*x) {
                    let mut d = g.clone();
                    for (i, chunk) in d.data_mut().chunks_mut(hw).enumerate() {
                        let k = wv[i % c];
                        chunk.iter_mut().for_each(|v| *v *= k);
                    }
                    self.accumulate(grads, *x, d);
                }
                if self.rg(*w) {
                    let mut d = vec![0.0f64; c];
                    for (i, (gc, xc)) in gd.chunks(hw).zip(self.value(*x).data().chunks(hw)).enumerate() {
                        d[i % c] += gc.iter().zip(xc).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>();
                    }
                    let d = d.into_iter().map(|v| v as f32).collect();
                    self.accumulate(grads, *w, tensor_like(self.value(*w), d));
                }
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4().expect("rank checked in forward");
                let cb = self.shape(*b)[1];
                let hw = h * w;
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for s in 0..n {
                    let base = s * (ca + cb) * hw;
                    da.extend_from_slice(&gd[base..base + ca * hw]);
                    db.extend_from_slice(&gd[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accumulate(grads, *a, tensor_like(self.value(*a), da));
                self.accumulate(grads, *b, tensor_like(self.value(*b), db));
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| if *x > 0.0 { *g } else { g * slope })
                    .collect();
                self.accumulate(grads, *x, tensor_like(self.value(*x), d));
            }
            Op::Tanh(x) => {
                let yv = self.value(out).data();
                let d = gd.iter().zip(yv).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *x, tensor_like(self.value(*x), d));
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4().expect("rank checked in forward");
                let hw = h * w;
                let mut d = Vec::with_capacity(gd.len() * hw);
                for gv in gd {
                    d.extend(std::iter::repeat_n(gv / hw as f32, hw));
                }
                self.accumulate(grads, *x, tensor_like(self.value(*x), d));
            }
            Op::GlobalMaxPool { x, argmax } => {
                let (_, _, h, w) = self.value(*x).dims4().expect("rank checked in forward");
                let hw = h * w;
                let mut d = vec![0.0; gd.len() * hw];
                for (i, (gv, am)) in gd.iter().zip(argmax).enumerate() {
                    d[i * hw + am] = *gv;
                }
                self.accumulate(grads, *x, tensor_like(self.value(*x), d));
            }
            Op::PixelShuffle { x, r } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("rank checked in forward");
                let d = kernels::pixel_unshuffle(gd, n, c / (r * r), h, w, *r);
                self.accumulate(grads, *x, tensor_like(self.value(*x), d));
            }
            Op::LayerInstanceNorm {
                x,
                gamma,
                beta,
                rho_logits,
                cache,
            } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("rank checked in forward");
                let gb = layer_instance_norm_backward(
                    gd,
                    (n, c, h * w),
                    self.value(*gamma).data(),
                    cache,
                );
                if self.rg(*x) {
                    self.accumulate(grads, *x, tensor_like(self.value(*x), gb.x));
                }
                if self.rg(*gamma) {
                    let d = fold_affine(gb.gamma, self.value(*gamma).len(), c);
                    self.accumulate(grads, *gamma, tensor_like(self.value(*gamma), d));
                }
                if self.rg(*beta) {
                    let d = fold_affine(gb.beta, self.value(*beta).len(), c);
                    self.accumulate(grads, *beta, tensor_like(self.value(*beta), d));
                }
                if self.rg(*rho_logits) {
                    let r = cache.rho as f64;
                    let dl = gb.rho * r * (1.0 - r);
                    let d = vec![dl as f32, -dl as f32];
                    self.accumulate(grads, *rho_logits, tensor_like(self.value(*rho_logits), d));
                }
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let wn = self.value(out).data();
                let inner: f64 = gd.iter().zip(wn).map(|(a, b)| *a as f64 * *b as f64).sum();
                let cols = v.len();
                let mut d = Vec::with_capacity(gd.len());
                for (i, row) in gd.chunks(cols).enumerate() {
                    for (j, gv) in row.iter().enumerate() {
                        d.push(((*gv as f64 - inner * u[i] as f64 * v[j] as f64) / *sigma as f64) as f32);
                    }
                }
                self.accumulate(grads, *w, tensor_like(self.value(*w), d));
            }
            Op::MseTarget { x, target } => {
                let xv = self.value(*x).data();
                let mut d = vec![0.0; xv.len()];
                losses::mean_squared_to_target_grad(xv, *target, &mut d);
                let k = gd[0];
                d.iter_mut().for_each(|v| *v *= k);
                self.accumulate(grads, *x, tensor_like(self.value(*x), d));
            }
            Op::L1 { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut d = vec![0.0; av.len()];
                losses::mean_abs_diff_grad(av, bv, &mut d);
                let k = gd[0];
                d.iter_mut().for_each(|v| *v *= k);
                if self.rg(*b) {
                    let nb = d.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, tensor_like(self.value(*b), nb));
                }
                self.accumulate(grads, *a, tensor_like(self.value(*a), d));
            }
            Op::Sum(parts) => {
                for p in parts {
                    self.accumulate(grads, *p, g.clone());
                }
            }
            Op::SumAll(x) => {
                let t = Tensor::full(self.shape(*x), gd[0]);
                self.accumulate(grads, *x, t);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, tensor_like(self.value(*x), gd.to_vec()));
            }
            Op::MulConst(x, k) => {
                let d = gd.iter().zip(k.data()).map(|(a, b)| a * b).collect();
                self.accumulate(grads, *x, tensor_like(self.value(*x), d));
            }
        }
    }
}

fn tensor_like(t: &Tensor, data: Vec<f32>) -> Tensor {
    Tensor::new(t.shape().to_vec(), data).expect("gradient matches its tensor")
}

/// Sums per-(sample, channel) affine gradients down to per-channel when the
/// parameter was broadcast over the batch.
fn fold_affine(d: Vec<f32>, len: usize, c: usize) -> Vec<f32> {
    if d.len() == len {
        return d;
    }
    let mut out = vec![0.0; c];
    for (i, v) in d.iter().enumerate() {
        out[i % c] += v;
    }
    out
}

/// ρ = first component of the 2-way softmax.
pub fn rho_from_logits(logits: &[f32]) -> f32 {
    // softmax([a, b])[0] = 1 / (1 + e^(b − a)); ∞ − ∞ falls back to an even split.
    let d = logits[1] as f64 - logits[0] as f64;
    if d.is_nan() {
        return 0.5;
    }
    (1.0 / (1.0 + d.exp())) as f32
}

fn layer_instance_norm_forward(
    x: &[f32],
    (n, c, s): (usize, usize, usize),
    gamma: &[f32],
    beta: &[f32],
    rho: f32,
    eps: f32,
) -> (Vec<f32>, NormCache) {
    let mut xhat_in = vec![0.0f32; x.len()];
    let mut xhat_ln = vec![0.0f32; x.len()];
    let mut inv_in = vec![0.0f32; n * c];
    let mut inv_ln = vec![0.0f32; n];
    for smp in 0..n {
        let xs = &x[smp * c * s..(smp + 1) * c * s];
        let (mean, var) = moments(xs);
        let inv = 1.0 / (var + eps as f64).sqrt();
        inv_ln[smp] = inv as f32;
        for (o, v) in xhat_ln[smp * c * s..(smp + 1) * c * s].iter_mut().zip(xs) {
            *o = ((*v as f64 - mean) * inv) as f32;
        }
        for ch in 0..c {
            let base = (smp * c + ch) * s;
            let xc = &x[base..base + s];
            let (mean, var) = moments(xc);
            let inv = 1.0 / (var + eps as f64).sqrt();
            inv_in[smp * c + ch] = inv as f32;
            for (o, v) in xhat_in[base..base + s].iter_mut().zip(xc) {
                *o = ((*v as f64 - mean) * inv) as f32;
            }
        }
    }
    let per_sample = gamma.len() == n * c;
    let mut out = vec![0.0f32; x.len()];
    for (nc, chunk) in out.chunks_mut(s).enumerate() {
        let k = if per_sample { nc } else { nc % c };
        let (g, b) = (gamma[k], beta[k]);
        for (i, o) in chunk.iter_mut().enumerate() {
            let j = nc * s + i;
            *o = g * (rho * xhat_in[j] + (1.0 - rho) * xhat_ln[j]) + b;
        }
    }
    (
        out,
        NormCache {
            xhat_in,
            xhat_ln,
            inv_in,
            inv_ln,
            rho,
        },
    )
}

fn moments(xs: &[f32]) -> (f64, f64) {
    let len = xs.len() as f64;
    let mean = xs.iter().map(|v| *v as f64).sum::<f64>() / len;
    let var = xs.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / len;
    (mean, var)
}

struct NormGrads {
    x: Vec<f32>,
    /// Per (sample, channel).
    gamma: Vec<f32>,
    beta: Vec<f32>,
    rho: f64,
}

fn layer_instance_norm_backward(
    g: &[f32],
    (n, c, s): (usize, usize, usize),
    gamma: &[f32],
    cache: &NormCache,
) -> NormGrads {
    let per_sample = gamma.len() == n * c;
    let rho = cache.rho as f64;
    let mut d_gamma = vec![0.0f32; n * c];
    let mut d_beta = vec![0.0f32; n * c];
    let mut d_rho = 0.0f64;
    // Upstream gradients on the two normalized tensors.
    let mut d_in = vec![0.0f64; g.len()];
    let mut d_ln = vec![0.0f64; g.len()];
    for nc in 0..n * c {
        let k = if per_sample { nc } else { nc % c };
        let gk = gamma[k] as f64;
        let (mut sg, mut sb) = (0.0f64, 0.0f64);
        for i in nc * s..(nc + 1) * s {
            let gi = g[i] as f64;
            let (xi, xl) = (cache.xhat_in[i] as f64, cache.xhat_ln[i] as f64);
            sb += gi;
            sg += gi * (rho * xi + (1.0 - rho) * xl);
            d_rho += gi * gk * (xi - xl);
            d_in[i] = gi * gk * rho;
            d_ln[i] = gi * gk * (1.0 - rho);
        }
        d_gamma[nc] = sg as f32;
        d_beta[nc] = sb as f32;
    }
    let mut dx = vec![0.0f32; g.len()];
    for nc in 0..n * c {
        let r = nc * s..(nc + 1) * s;
        norm_input_grad(&d_in[r.clone()], &cache.xhat_in[r.clone()], cache.inv_in[nc], &mut dx[r], false);
    }
    for smp in 0..n {
        let r = smp * c * s..(smp + 1) * c * s;
        norm_input_grad(&d_ln[r.clone()], &cache.xhat_ln[r.clone()], cache.inv_ln[smp], &mut dx[r], true);
    }
    NormGrads {
        x: dx,
        gamma: d_gamma,
        beta: d_beta,
        rho: d_rho,
    }
}

/// dx = inv·(dx̂ − mean(dx̂) − x̂·mean(dx̂·x̂)) over one normalization group.
fn norm_input_grad(dxhat: &[f64], xhat: &[f32], inv: f32, dx: &mut [f32], accumulate: bool) {
    let len = dxhat.len() as f64;
    let m1 = dxhat.iter().sum::<f64>() / len;
    let m2 = dxhat.iter().zip(xhat).map(|(d, x)| d * *x as f64).sum::<f64>() / len;
    for ((o, d), x) in dx.iter_mut().zip(dxhat).zip(xhat) {
        let v = (inv as f64 * (d - m1 - *x as f64 * m2)) as f32;
        if accumulate {
            *o += v;
        } else {
            *o = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Group, ParamKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), crate::params::truncated_normal(len, 0.5, &mut rng)).unwrap()
    }

    /// Central-difference check of d(loss)/d(input) for a graph-building closure.
    fn check_grad(shape: &[usize], seed: u64, build: impl Fn(&mut Graph, Var) -> Var) {
        check_grad_with(&ParamStore::new(), shape, seed, build)
    }

    fn check_grad_with(
        store: &ParamStore,
        shape: &[usize],
        seed: u64,
        build: impl Fn(&mut Graph, Var) -> Var,
    ) {
        let x0 = rand_tensor(shape, seed);
        let mut g = Graph::frozen(store);
        let x = g.input(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.wrt(x).expect("input gradient").clone();
        let h = 1e-2f32;
        for i in 0..x0.len() {
            let eval = |delta: f32| {
                let mut t = x0.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::frozen(store);
                let x = g.input(t);
                let l = build(&mut g, x);
                g.value(l).item() as f64
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h as f64);
            let an = analytic.data()[i] as f64;
            assert!(
                (fd - an).abs() <= 2e-2 * (1.0 + fd.abs().max(an.abs())),
                "element {i}: finite difference {fd} vs analytic {an}"
            );
        }
    }

    /// A scalar that depends non-trivially on every element of `y`.
    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
        let r = g.constant(rand_tensor(g.shape(y), seed));
        let shifted = g.add(y, r).unwrap();
        g.mse_target(shifted, 0.3)
    }

    #[test]
    fn conv_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&[3, 2, 3, 3], 2), ParamKind::Weight, Group::C_X);
        check_grad_with(&store, &[2, 2, 5, 5], 1, |g, x| {
            let wv = g.param(w);
            let y = g.conv2d(x, wv, None, 2, 1).unwrap();
            weighted_sum(g, y, 7)
        });
    }

    #[test]
    fn norm_gradient_per_channel_and_per_sample() {
        check_grad(&[2, 3, 3, 3], 4, |g, x| {
            let gamma = g.constant(Tensor::new(vec![3], vec![1.2, 0.7, -0.4]).unwrap());
            let beta = g.constant(Tensor::new(vec![3], vec![0.1, 0.0, 0.3]).unwrap());
            let rho = g.constant(Tensor::new(vec![2], vec![0.3, -0.2]).unwrap());
            let y = g.layer_instance_norm(x, gamma, beta, rho, 1e-5).unwrap();
            weighted_sum(g, y, 8)
        });
        check_grad(&[2, 6], 5, |g, x| {
            let gamma = g.linear(x, x, None).unwrap(); // (2,2): exercises per-sample affine
            let x4 = g.reshape(x, &[2, 2, 3, 1]).unwrap();
            let beta = g.scale(gamma, 0.5);
            let rho = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
            let y = g.layer_instance_norm(x4, gamma, beta, rho, 1e-5).unwrap();
            weighted_sum(g, y, 9)
        });
    }

    #[test]
    fn pooling_shuffle_tanh_concat_gradients() {
        check_grad(&[1, 4, 3, 3], 11, |g, x| {
            let a = g.global_avg_pool(x).unwrap();
            let m = g.global_max_pool(x).unwrap();
            let s = g.add(a, m).unwrap();
            weighted_sum(g, s, 12)
        });
        check_grad(&[1, 8, 2, 2], 13, |g, x| {
            let y = g.pixel_shuffle(x, 2).unwrap();
            let t = g.tanh(y);
            let c = g.concat_channels(t, y).unwrap();
            let l = g.leaky_relu(c, 0.2);
            weighted_sum(g, l, 14)
        });
    }

    #[test]
    fn channel_and_scalar_scaling_gradients() {
        check_grad(&[3], 15, |g, w| {
            let x = g.constant(rand_tensor(&[2, 3, 2, 2], 16));
            let y = g.mul_channel(x, w).unwrap();
            weighted_sum(g, y, 17)
        });
        check_grad(&[1], 18, |g, s| {
            let x = g.constant(rand_tensor(&[1, 2, 2, 2], 19));
            let y = g.mul_scalar(x, s).unwrap();
            weighted_sum(g, y, 20)
        });
    }

    #[test]
    fn spectral_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let id = store.add_spectral("w", rand_tensor(&[3, 4], 22), Group::C_X, &mut rng);
        store.power_iterate(&[Group::C_X], 5);
        let mut g = Graph::new(&store, vec![true]);
        let wn = g.spectral_param(id).unwrap();
        let loss = weighted_sum(&mut g, wn, 23);
        let analytic = g.backward(loss).param(id).unwrap().clone();
        let h = 1e-2;
        for i in 0..12 {
            let eval = |delta: f32| {
                let mut s2 = store.clone();
                s2.get_mut(id).value.data_mut()[i] += delta;
                let mut g = Graph::frozen(&s2);
                let wn = g.spectral_param(id).unwrap();
                let l = weighted_sum(&mut g, wn, 23);
                g.value(l).item() as f64
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h as f64);
            let an = analytic.data()[i] as f64;
            assert!((fd - an).abs() < 2e-2 * (1.0 + fd.abs()), "{i}: {fd} vs {an}");
        }
    }

    #[test]
    fn frozen_params_get_no_gradient_but_pass_it_on() {
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&[2, 3], 30), ParamKind::Weight, Group::E_X);
        let mut g = Graph::frozen(&store);
        let x = g.input(rand_tensor(&[1, 3], 31));
        let wv = g.param(w);
        let y = g.linear(x, wv, None).unwrap();
        let l = g.mse_target(y, 1.0);
        let grads = g.backward(l);
        assert!(grads.param(w).is_none());
        assert!(grads.wrt(x).is_some());
    }

    #[test]
    fn rho_is_a_probability() {
        for l in [-1e30f32, -50.0, 0.0, 3.0, 1e30] {
            let r = rho_from_logits(&[l, -l]);
            assert!((0.0..=1.0).contains(&r));
        }
        assert!((rho_from_logits(&[9f32.ln(), 0.0]) - 0.9).abs() < 1e-6);
    }
}
