//! The tape. Every op appends a node holding its forward value; `backward`
//! walks the tape in reverse and accumulates gradients for nodes that
//! depend on a trainable leaf.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{Gradients, ParamId, ParamKey, ParamStore};
use crate::tensor::{matmul, Float, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, in_c: usize, out_c: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Abs(Var),
    Relu(Var),
    LeakyRelu(Var, F),
    Sigmoid(Var),
    Upsample2(Var),
    AvgPool2(Var),
    Normalize { x: Var, size: usize, rstd: Vec<F> },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Concat(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    SumAll(Var),
    MeanAll(Var),
    MeanPerSample(Var),
    SpatialMean(Var),
    Reshape(Var),
    SelectBatch { x: Var, indices: Vec<usize> },
    SpectralScale { w: Var, u: Vec<F>, v: Vec<F>, sigma: F },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    param: Option<ParamKey>,
}

/// Which statistics a normalization pools over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxes {
    /// Per sample and channel, over height × width.
    Instance,
    /// Per sample, over channels × height × width.
    Layer,
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    trainable: HashSet<u32>,
    bound: HashMap<ParamKey, Var>,
    memo: HashMap<(ParamKey, u32), Var>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), trainable: HashSet::new(), bound: HashMap::new(), memo: HashMap::new() }
    }

    /// Marks every parameter of `store` as differentiable in this graph.
    /// Parameters of other stores enter as constants.
    pub fn train(&mut self, store: &ParamStore<F>) {
        self.trainable.insert(store.id());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (test inputs, probes).
    pub fn variable(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored tensor. Each key is bound once per graph.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let key = store.key(id);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let trainable = self.trainable.contains(&store.id())
            && store.entries()[id.0].kind == crate::params::EntryKind::Param;
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.nodes[v.0].param = Some(key);
        self.bound.insert(key, v);
        v
    }

    pub fn memo_get(&self, key: ParamKey, tag: u32) -> Option<Var> {
        self.memo.get(&(key, tag)).copied()
    }

    pub fn memo_put(&mut self, key: ParamKey, tag: u32, v: Var) {
        self.memo.insert((key, tag), v);
    }

    /// A constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    // ---------------------------------------------------------------- layers

    /// Reflection-padded convolution with `ceil(in/stride)` outputs.
    /// `w` is `(out_c, in_c, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (out_c, wc, k, k2) = self.value(w).dims4()?;
        if wc != c || k != k2 {
            return shape_err(format!("conv weight {:?} vs input {:?}", self.shape(w), self.shape(x)));
        }
        if let Some(b) = b {
            if self.shape(b) != [out_c] {
                return shape_err(format!("conv bias {:?} for {out_c} channels", self.shape(b)));
            }
        }
        let geom = ConvGeom::same(h, wd, k, stride);
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            c,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            out_c,
            &geom,
        );
        let value = Tensor::new(&[n, out_c, geom.out_h, geom.out_w], y)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, in_c: c, out_c }, rg))
    }

    /// `x (n, in) · wᵀ + b` with `w` of shape `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err(format!("linear {xs:?} x {ws:?}"));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut y = vec![F::zero(); n * dout];
        matmul(n, din, dout, self.value(x).data(), false, self.value(w).data(), true, &mut y, false);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return shape_err(format!("linear bias {:?} for {dout} outputs", self.shape(b)));
            }
            let bias = self.value(b).data();
            for row in y.chunks_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let value = Tensor::new(&[n, dout], y)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// `w / σ` with `σ = uᵀ W v`, `W` being `w` viewed as `(rows, numel/rows)`.
    /// `u` and `v` are treated as constants.
    pub fn spectral_scale(&mut self, w: Var, u: &[F], v: &[F], min_sigma: F) -> Result<Var> {
        let wt = self.value(w);
        let rows = wt.dim(0);
        let cols = wt.numel() / rows.max(1);
        if u.len() != rows || v.len() != cols {
            return shape_err(format!("power vectors ({}, {}) for a {rows}x{cols} weight", u.len(), v.len()));
        }
        let mut sigma = F::zero();
        for (r, &ur) in u.iter().enumerate() {
            let row = &wt.data()[r * cols..(r + 1) * cols];
            sigma += ur * row.iter().zip(v).map(|(&a, &b)| a * b).sum::<F>();
        }
        let sigma = sigma.max(min_sigma);
        let value = wt.map(|x| x / sigma);
        let rg = self.rg(&[w]);
        Ok(self.push(value, Op::SpectralScale { w, u: u.to_vec(), v: v.to_vec(), sigma }, rg))
    }

    // ----------------------------------------------------------- elementwise

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > F::zero() { x } else { F::zero() }, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        self.unary(a, |x| if x > F::zero() { x } else { x * slope }, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| F::one() / (F::one() + (-x).exp()), Op::Sigmoid(a))
    }

    // --------------------------------------------------------------- spatial

    /// Nearest-neighbour 2× upsampling cropped to `(out_h, out_w)`; both must
    /// lie in `[2·in − 1, 2·in]`.
    pub fn upsample2(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if out_h > 2 * h || out_w > 2 * w || out_h + 1 < 2 * h || out_w + 1 < 2 * w {
            return shape_err(format!("cannot upsample {h}x{w} to {out_h}x{out_w}"));
        }
        let y = kernels::upsample2_forward(self.value(x).data(), n * c, h, w, out_h, out_w);
        let value = Tensor::new(&[n, c, out_h, out_w], y)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Upsample2(x), rg))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h < 2 || w < 2 {
            return shape_err(format!("cannot pool a {h}x{w} map"));
        }
        let y = kernels::avgpool2_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::new(&[n, c, h / 2, w / 2], y)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::AvgPool2(x), rg))
    }

    /// Affine-free normalization to zero mean, unit variance.
    pub fn normalize(&mut self, x: Var, axes: NormAxes, eps: F) -> Result<Var> {
        let (_, c, h, w) = self.value(x).dims4()?;
        let size = match axes {
            NormAxes::Instance => h * w,
            NormAxes::Layer => c * h * w,
        };
        let (y, rstd) = kernels::group_normalize(self.value(x).data(), size, eps);
        let value = Tensor::new(self.shape(x), y)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Normalize { x, size, rstd }, rg))
    }

    /// `x · scale + shift` per channel. `scale`/`shift` are either `(c)`
    /// (shared over the batch) or `(n, c)` (per sample).
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let ss = self.shape(scale).to_vec();
        if ss != self.shape(shift) || !(ss == [c] || ss == [n, c]) {
            return shape_err(format!("affine params {ss:?}/{:?} for input {:?}", self.shape(shift), self.shape(x)));
        }
        let per_sample = ss.len() == 2;
        let hw = h * w;
        let (xs, sc, sh) = (self.value(x).data(), self.value(scale).data(), self.value(shift).data());
        let mut y = Vec::with_capacity(xs.len());
        for b in 0..n {
            for ch in 0..c {
                let p = if per_sample { b * c + ch } else { ch };
                let (s, t) = (sc[p], sh[p]);
                let base = (b * c + ch) * hw;
                y.extend(xs[base..base + hw].iter().map(|&v| v * s + t));
            }
        }
        let value = Tensor::new(&[n, c, h, w], y)?;
        let rg = self.rg(&[x, scale, shift]);
        Ok(self.push(value, Op::ChannelAffine { x, scale, shift }, rg))
    }

    /// Channel-wise concatenation of rank-4 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return shape_err(format!("concat {:?} with {:?}", self.shape(p), self.shape(first)));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut y = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.dim(1);
                y.extend_from_slice(&t.data()[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let value = Tensor::new(&[n, total_c, h, w], y)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Channels `[start, start + len)` of a rank-4 tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if start + len > c || len == 0 {
            return shape_err(format!("channel slice {start}..{} of {c}", start + len));
        }
        let hw = h * w;
        let xs = self.value(x).data();
        let mut y = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            let base = (b * c + start) * hw;
            y.extend_from_slice(&xs[base..base + len * hw]);
        }
        let value = Tensor::new(&[n, len, h, w], y)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceChannels { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn select_batch(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(x).select_batch(indices)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SelectBatch { x, indices: indices.to_vec() }, rg))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(value, Op::MeanAll(x), rg)
    }

    /// Mean over every dimension but the first: `(n, ...) -> (n)`.
    pub fn mean_per_sample(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.dim(0);
        let per = t.numel() / n.max(1);
        let inv = F::one() / F::lit(per as f64);
        let y = t.data().chunks(per).map(|c| c.iter().copied().sum::<F>() * inv).collect();
        let value = Tensor::new(&[n], y).expect("n elements");
        let rg = self.rg(&[x]);
        self.push(value, Op::MeanPerSample(x), rg)
    }

    /// Global average pool: `(n, c, h, w) -> (n, c)`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let inv = F::one() / F::lit((h * w) as f64);
        let y = self.value(x).data().chunks(h * w).map(|p| p.iter().copied().sum::<F>() * inv).collect();
        let value = Tensor::new(&[n, c], y)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SpatialMean(x), rg))
    }

    // -------------------------------------------------------------- backward

    /// Reverse pass from a single-element `loss`. Returns gradients of every
    /// trainable parameter the loss depends on, plus those of `variable`
    /// leaves (see [`Backward::grad`]).
    pub fn backward(&self, loss: Var) -> Result<Backward<F>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        let mut params = BTreeMap::new();
        let mut leaves = HashMap::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), F::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                match node.param {
                    Some(key) => {
                        params.insert(key, dy);
                    }
                    None => {
                        leaves.insert(i, dy);
                    }
                }
                continue;
            }
            self.backward_node(node, &dy, &mut grads)?;
        }
        Ok(Backward { params: Gradients { by_key: params }, leaves })
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<F>, dy: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, in_c, out_c } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let n = xt.dim(0);
                let mut dx = self.wants(*x).then(|| Tensor::zeros(xt.shape()));
                let mut dw = self.wants(*w).then(|| Tensor::zeros(wt.shape()));
                let mut db = b.filter(|b| self.wants(*b)).map(|_| Tensor::zeros(&[*out_c]));
                kernels::conv2d_backward(
                    xt.data(),
                    n,
                    *in_c,
                    wt.data(),
                    *out_c,
                    geom,
                    dy.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.acc(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (n, din, dout) = (xt.dim(0), xt.dim(1), wt.dim(0));
                if self.wants(*x) {
                    let mut dx = vec![F::zero(); n * din];
                    matmul(n, dout, din, dy.data(), false, wt.data(), false, &mut dx, false);
                    self.acc(grads, *x, Tensor::new(&[n, din], dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![F::zero(); dout * din];
                    matmul(dout, n, din, dy.data(), true, xt.data(), false, &mut dw, false);
                    self.acc(grads, *w, Tensor::new(&[dout, din], dw)?);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = vec![F::zero(); dout];
                    for row in dy.data().chunks(dout) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.acc(grads, b, Tensor::new(&[dout], db)?);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, dy.clone());
                if self.wants(*b) {
                    self.acc(grads, *b, dy.map(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, dy.zip_map(self.value(*b), |g, v| g * v)?);
                }
                if self.wants(*b) {
                    self.acc(grads, *b, dy.zip_map(self.value(*a), |g, v| g * v)?);
                }
            }
            Op::Div(a, b) => {
                let bt = self.value(*b);
                if self.wants(*a) {
                    self.acc(grads, *a, dy.zip_map(bt, |g, v| g / v)?);
                }
                if self.wants(*b) {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let t = dy.zip_map(y, |g, q| g * q)?;
                    self.acc(grads, *b, t.zip_map(bt, |gq, v| -gq / v)?);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, dy.map(|g| g * s));
            }
            Op::AddScalar(a) => self.acc(grads, *a, dy.clone()),
            Op::Abs(a) => {
                let g = dy.zip_map(self.value(*a), |g, x| {
                    if x > F::zero() {
                        g
                    } else if x < F::zero() {
                        -g
                    } else {
                        F::zero()
                    }
                })?;
                self.acc(grads, *a, g);
            }
            Op::Relu(a) => {
                let g = dy.zip_map(self.value(*a), |g, x| if x > F::zero() { g } else { F::zero() })?;
                self.acc(grads, *a, g);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let g = dy.zip_map(self.value(*a), |g, x| if x > F::zero() { g } else { g * s })?;
                self.acc(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let g = dy.zip_map(y, |g, s| g * s * (F::one() - s))?;
                self.acc(grads, *a, g);
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (_, _, oh, ow) = y.dims4()?;
                let dx = kernels::upsample2_backward(dy.data(), n * c, h, w, oh, ow);
                self.acc(grads, *x, Tensor::new(&[n, c, h, w], dx)?);
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let dx = kernels::avgpool2_backward(dy.data(), n * c, h, w);
                self.acc(grads, *x, Tensor::new(&[n, c, h, w], dx)?);
            }
            Op::Normalize { x, size, rstd } => {
                let dx = kernels::group_normalize_backward(y.data(), rstd, dy.data(), *size);
                self.acc(grads, *x, Tensor::new(y.shape(), dx)?);
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (n, c, h, w) = y.dims4()?;
                let hw = h * w;
                let per_sample = self.shape(*scale).len() == 2;
                let (xs, sc) = (self.value(*x).data(), self.value(*scale).data());
                let mut dx = vec![F::zero(); xs.len()];
                let mut ds = Tensor::zeros(self.shape(*scale));
                let mut dt = Tensor::zeros(self.shape(*shift));
                for b in 0..n {
                    for ch in 0..c {
                        let p = if per_sample { b * c + ch } else { ch };
                        let base = (b * c + ch) * hw;
                        let (mut s_acc, mut t_acc) = (F::zero(), F::zero());
                        for j in base..base + hw {
                            let g = dy.data()[j];
                            dx[j] = g * sc[p];
                            s_acc += g * xs[j];
                            t_acc += g;
                        }
                        ds.data_mut()[p] += s_acc;
                        dt.data_mut()[p] += t_acc;
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape(), dx)?);
                self.acc(grads, *scale, ds);
                self.acc(grads, *shift, dt);
            }
            Op::Concat(parts) => {
                let (n, total_c, h, w) = y.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).dim(1);
                    if self.wants(p) {
                        let mut g = Vec::with_capacity(n * pc * hw);
                        for b in 0..n {
                            let base = (b * total_c + offset) * hw;
                            g.extend_from_slice(&dy.data()[base..base + pc * hw]);
                        }
                        self.acc(grads, p, Tensor::new(&[n, pc, h, w], g)?);
                    }
                    offset += pc;
                }
            }
            Op::SliceChannels { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let len = y.dim(1);
                let hw = h * w;
                let mut g = Tensor::zeros(&[n, c, h, w]);
                for b in 0..n {
                    let dst = (b * c + start) * hw;
                    let src = b * len * hw;
                    g.data_mut()[dst..dst + len * hw].copy_from_slice(&dy.data()[src..src + len * hw]);
                }
                self.acc(grads, *x, g);
            }
            Op::SumAll(x) => {
                let g = dy.data()[0];
                self.acc(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::MeanAll(x) => {
                let numel = self.value(*x).numel();
                let g = dy.data()[0] / F::lit(numel as f64);
                self.acc(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::MeanPerSample(x) => {
                let xt = self.value(*x);
                let per = xt.numel() / xt.dim(0).max(1);
                let inv = F::one() / F::lit(per as f64);
                let g = Tensor::from_fn(xt.shape(), |i| dy.data()[i / per] * inv);
                self.acc(grads, *x, g);
            }
            Op::SpatialMean(x) => {
                let xt = self.value(*x);
                let (_, _, h, w) = xt.dims4()?;
                let hw = h * w;
                let inv = F::one() / F::lit(hw as f64);
                let g = Tensor::from_fn(xt.shape(), |i| dy.data()[i / hw] * inv);
                self.acc(grads, *x, g);
            }
            Op::Reshape(x) => {
                let g = dy.clone().reshape(self.shape(*x))?;
                self.acc(grads, *x, g);
            }
            Op::SelectBatch { x, indices } => {
                let xt = self.value(*x);
                let per = xt.numel() / xt.dim(0).max(1);
                let mut g = Tensor::zeros(xt.shape());
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..per {
                        g.data_mut()[i * per + j] += dy.data()[k * per + j];
                    }
                }
                self.acc(grads, *x, g);
            }
            Op::SpectralScale { w, u, v, sigma } => {
                // y = W / σ(W), σ = uᵀWv:  dW = dy/σ − (Σ dy⊙W)/σ² · u vᵀ
                let wt = self.value(*w);
                let cols = v.len();
                let dot: F = dy.data().iter().zip(wt.data()).map(|(&a, &b)| a * b).sum();
                let coef = dot / (*sigma * *sigma);
                let inv = F::one() / *sigma;
                let g = Tensor::from_fn(wt.shape(), |i| dy.data()[i] * inv - coef * u[i / cols] * v[i % cols]);
                self.acc(grads, *w, g);
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
pub struct Backward<F> {
    params: Gradients<F>,
    leaves: HashMap<usize, Tensor<F>>,
}

impl<F: Float> Backward<F> {
    pub fn params(&self) -> &Gradients<F> {
        &self.params
    }

    pub fn into_params(self) -> Gradients<F> {
        self.params
    }

    /// Gradient of a `variable` leaf, if the loss depends on it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.leaves.get(&v.0)
    }
}
