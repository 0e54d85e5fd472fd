//! Building blocks shared by every network: reflection-padded convolutions,
//! pre-activation residual blocks, compressed long skips, spectral
//! normalization and the normalization-parameter MLP.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use segtrans_autograd::{Float, Graph, NormAxes, ParamId, ParamStore, Tensor, Var};

use crate::error::{Error, Result};

/// Variance epsilon of every normalization layer.
pub const NORM_EPS: f64 = 1e-5;
/// Lower clamp of the spectral-norm estimate.
pub const SIGMA_MIN: f64 = 1e-12;
/// Power iterations run when a spectrally normalized layer is created.
pub const SPECTRAL_WARMUP_ITERS: usize = 15;

const MEMO_SPECTRAL: u32 = 0;

pub(crate) fn normal<F: Float>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::lit(rng.sample::<f64, _>(StandardNormal) * std))
}

/// Power-iteration state for one weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState<F> {
    pub u: Vec<F>,
    pub v: Vec<F>,
}

impl<F: Float> SpectralState<F> {
    pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut u: Vec<F> = normal::<F>(rng, &[rows], 1.0).into_data();
        let mut v: Vec<F> = normal::<F>(rng, &[cols], 1.0).into_data();
        normalize_in_place(&mut u);
        normalize_in_place(&mut v);
        Self { u, v }
    }
}

fn normalize_in_place<F: Float>(x: &mut [F]) -> bool {
    let norm = x.iter().map(|&a| a * a).sum::<F>().sqrt();
    if !(norm > F::lit(SIGMA_MIN)) {
        return false;
    }
    for a in x.iter_mut() {
        *a = *a / norm;
    }
    true
}

/// Runs `n_iters` power iterations on `weight` viewed as
/// `(dim 0) × (everything else)` and returns `uᵀ W v`, clamped below by
/// [`SIGMA_MIN`]. A direction that collapses to zero keeps its previous value.
pub fn power_iterate<F: Float>(weight: &Tensor<F>, state: &mut SpectralState<F>, n_iters: usize) -> F {
    let rows = weight.dim(0);
    let cols = weight.numel() / rows;
    let w = weight.data();
    let mut wv = vec![F::zero(); rows];
    for _ in 0..n_iters {
        let mut wtu = vec![F::zero(); cols];
        for (r, &ur) in state.u.iter().enumerate() {
            for (acc, &x) in wtu.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *acc += ur * x;
            }
        }
        if normalize_in_place(&mut wtu) {
            state.v = wtu;
        }
        for (r, out) in wv.iter_mut().enumerate() {
            *out = w[r * cols..(r + 1) * cols].iter().zip(&state.v).map(|(&a, &b)| a * b).sum();
        }
        if normalize_in_place(&mut wv) {
            state.u.copy_from_slice(&wv);
        }
    }
    let mut sigma = F::zero();
    for (r, &ur) in state.u.iter().enumerate() {
        sigma += ur * w[r * cols..(r + 1) * cols].iter().zip(&state.v).map(|(&a, &b)| a * b).sum::<F>();
    }
    sigma.max(F::lit(SIGMA_MIN))
}

/// `weight / σ̂` after advancing `state` by `n_iters` power iterations.
pub fn spectral_normalize<F: Float>(weight: &Tensor<F>, state: &mut SpectralState<F>, n_iters: usize) -> Tensor<F> {
    let sigma = power_iterate(weight, state, n_iters);
    weight.map(|x| x / sigma)
}

#[derive(Clone, Copy, Debug)]
struct SpectralLink {
    weight: ParamId,
    u: ParamId,
    v: ParamId,
}

/// Parameters of one network plus its spectral-norm bookkeeping.
#[derive(Clone, Debug)]
pub struct Net<F> {
    pub store: ParamStore<F>,
    spectral: Vec<SpectralLink>,
    spectral_enabled: bool,
}

impl<F: Float> Net<F> {
    pub fn new(id: u32, name: &str, spectral: bool) -> Self {
        Self { store: ParamStore::new(id, name), spectral: Vec::new(), spectral_enabled: spectral }
    }

    pub fn spectral_enabled(&self) -> bool {
        self.spectral_enabled
    }

    /// Runs `build` with spectral normalization switched off for the layers
    /// it creates.
    pub fn without_spectral<R>(&mut self, build: impl FnOnce(&mut Self) -> R) -> R {
        let saved = std::mem::replace(&mut self.spectral_enabled, false);
        let out = build(self);
        self.spectral_enabled = saved;
        out
    }

    fn link_spectral(&mut self, name: &str, weight: ParamId, rng: &mut ChaCha8Rng) -> Option<SpectralLink> {
        if !self.spectral_enabled {
            return None;
        }
        let w = self.store.get(weight).clone();
        let rows = w.dim(0);
        let cols = w.numel() / rows;
        let mut state = SpectralState::random(rows, cols, rng);
        power_iterate(&w, &mut state, SPECTRAL_WARMUP_ITERS);
        let u = self.store.add_buffer(format!("{name}.sn_u"), Tensor::new(&[rows], state.u).expect("rows"));
        let v = self.store.add_buffer(format!("{name}.sn_v"), Tensor::new(&[cols], state.v).expect("cols"));
        let link = SpectralLink { weight, u, v };
        self.spectral.push(link);
        Some(link)
    }

    /// Kaiming-normal (fan-in, ReLU gain) convolution with zero bias.
    pub fn conv(&mut self, rng: &mut ChaCha8Rng, name: &str, in_c: usize, out_c: usize, kernel: usize, stride: usize) -> Conv2d {
        let fan_in = in_c * kernel * kernel;
        let w = normal::<F>(rng, &[out_c, in_c, kernel, kernel], (2.0 / fan_in as f64).sqrt());
        let weight = self.store.add_param(format!("{name}.weight"), w);
        let bias = self.store.add_param(format!("{name}.bias"), Tensor::zeros(&[out_c]));
        let spectral = self.link_spectral(name, weight, rng);
        Conv2d { weight, bias, spectral, in_c, out_c, kernel, stride }
    }

    pub fn linear(&mut self, rng: &mut ChaCha8Rng, name: &str, in_f: usize, out_f: usize) -> Linear {
        let w = normal::<F>(rng, &[out_f, in_f], (2.0 / in_f as f64).sqrt());
        let weight = self.store.add_param(format!("{name}.weight"), w);
        let bias = self.store.add_param(format!("{name}.bias"), Tensor::zeros(&[out_f]));
        let spectral = self.link_spectral(name, weight, rng);
        Linear { weight, bias, spectral, in_f, out_f }
    }

    /// Per-channel scale (init 1) and shift (init 0).
    pub fn affine(&mut self, name: &str, channels: usize) -> Affine {
        let scale = self.store.add_param(format!("{name}.scale"), Tensor::ones(&[channels]));
        let shift = self.store.add_param(format!("{name}.shift"), Tensor::zeros(&[channels]));
        Affine { scale, shift, channels }
    }

    /// One power iteration step per spectrally normalized weight.
    pub fn advance_spectral(&mut self, n_iters: usize) {
        for link in &self.spectral {
            let w = self.store.get(link.weight).clone();
            let mut state = SpectralState {
                u: self.store.get(link.u).data().to_vec(),
                v: self.store.get(link.v).data().to_vec(),
            };
            power_iterate(&w, &mut state, n_iters);
            self.store.get_mut(link.u).data_mut().copy_from_slice(&state.u);
            self.store.get_mut(link.v).data_mut().copy_from_slice(&state.v);
        }
    }

    fn weight_var(&self, g: &mut Graph<F>, weight: ParamId, spectral: Option<SpectralLink>) -> Result<Var> {
        let w = g.param(&self.store, weight);
        let Some(link) = spectral else { return Ok(w) };
        let key = self.store.key(weight);
        if let Some(v) = g.memo_get(key, MEMO_SPECTRAL) {
            return Ok(v);
        }
        let u = self.store.get(link.u).data().to_vec();
        let v = self.store.get(link.v).data().to_vec();
        let out = g.spectral_scale(w, &u, &v, F::lit(SIGMA_MIN))?;
        g.memo_put(key, MEMO_SPECTRAL, out);
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    spectral: Option<SpectralLink>,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, net: &Net<F>, x: Var) -> Result<Var> {
        let w = net.weight_var(g, self.weight, self.spectral)?;
        let b = g.param(&net.store, self.bias);
        Ok(g.conv2d(x, w, Some(b), self.stride)?)
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
    spectral: Option<SpectralLink>,
    pub in_f: usize,
    pub out_f: usize,
}

impl Linear {
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, net: &Net<F>, x: Var) -> Result<Var> {
        let w = net.weight_var(g, self.weight, self.spectral)?;
        let b = g.param(&net.store, self.bias);
        Ok(g.linear(x, w, Some(b))?)
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub scale: ParamId,
    pub shift: ParamId,
    pub channels: usize,
}

impl Affine {
    pub fn vars<F: Float>(&self, g: &mut Graph<F>, net: &Net<F>) -> (Var, Var) {
        (g.param(&net.store, self.scale), g.param(&net.store, self.shift))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per-sample, per-channel statistics; no learned affine.
    Instance,
    /// Per-sample statistics over all channels, learned per-channel affine.
    Layer,
    /// Instance statistics with externally supplied per-sample affine.
    Adaptive,
}

/// Externally supplied normalization for one layer: the statistics to pool
/// and the affine to apply after them. `scale`/`shift` are `(c)` or `(n, c)`.
#[derive(Clone, Copy, Debug)]
pub struct NormOverride {
    pub axes: NormAxes,
    pub scale: Var,
    pub shift: Var,
}

/// A normalization layer as configured in its network.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub kind: NormKind,
    pub channels: usize,
    affine: Option<Affine>,
}

impl Norm {
    pub fn new<F: Float>(net: &mut Net<F>, name: &str, kind: NormKind, channels: usize) -> Self {
        let affine = (kind == NormKind::Layer).then(|| net.affine(name, channels));
        Self { kind, channels, affine }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, net: &Net<F>, x: Var, over: Option<&NormOverride>) -> Result<Var> {
        let c = g.shape(x)[1];
        if c != self.channels {
            return Err(Error::Config(format!("norm for {} channels got {c}", self.channels)));
        }
        let eps = F::lit(NORM_EPS);
        if let Some(o) = over {
            let ps = g.shape(o.scale);
            if ps.last() != Some(&c) {
                return Err(Error::Config(format!("norm params of shape {ps:?} for a {c}-channel layer")));
            }
            let h = g.normalize(x, o.axes, eps)?;
            return Ok(g.channel_affine(h, o.scale, o.shift)?);
        }
        match self.kind {
            NormKind::Instance => Ok(g.normalize(x, NormAxes::Instance, eps)?),
            NormKind::Layer => {
                let h = g.normalize(x, NormAxes::Layer, eps)?;
                let (s, t) = self.affine.expect("layer norm has affine").vars(g, net);
                Ok(g.channel_affine(h, s, t)?)
            }
            NormKind::Adaptive => Err(Error::Config("adaptive normalization needs norm params".into())),
        }
    }
}

/// Configuration of one pre-activation residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub upsample: bool,
    pub short_skip: bool,
    pub norm_kind: NormKind,
    /// Extra channels concatenated after norm/ReLU (1 for a compressed long skip).
    #[serde(default)]
    pub skip_channels: usize,
}

impl ConvBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv block kernel {} must be odd", self.kernel)));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::Config(format!("conv block stride {} not in {{1, 2}}", self.stride)));
        }
        if self.stride == 2 && self.upsample {
            return Err(Error::Config("stride 2 and upsampling are mutually exclusive".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("conv block with zero channels".into()));
        }
        Ok(())
    }
}

/// norm → ReLU → [concat long skip] → [2× upsample] → conv, plus an
/// optional additive short skip from the block input.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub cfg: ConvBlockConfig,
    pub norm: Norm,
    pub conv: Conv2d,
    pub projection: Option<Conv2d>,
}

impl ConvBlock {
    pub fn new<F: Float>(net: &mut Net<F>, rng: &mut ChaCha8Rng, name: &str, cfg: ConvBlockConfig) -> Result<Self> {
        cfg.validate()?;
        let norm = Norm::new(net, &format!("{name}.norm"), cfg.norm_kind, cfg.in_channels);
        let conv = net.conv(rng, &format!("{name}.conv"), cfg.in_channels + cfg.skip_channels, cfg.out_channels, cfg.kernel, cfg.stride);
        let needs_projection = cfg.in_channels != cfg.out_channels || cfg.stride != 1;
        let projection = (cfg.short_skip && needs_projection)
            .then(|| net.conv(rng, &format!("{name}.proj"), cfg.in_channels, cfg.out_channels, 1, cfg.stride));
        Ok(Self { cfg, norm, conv, projection })
    }

    /// `out_size` is required when upsampling (2× the input, possibly
    /// cropped by one on odd targets).
    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<F>,
        net: &Net<F>,
        x: Var,
        norm: Option<&NormOverride>,
        long_skip: Option<(&SkipCompressor, Var)>,
        out_size: Option<(usize, usize)>,
    ) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Input(format!("conv block expects {} channels, got {c}", self.cfg.in_channels)));
        }
        let target = out_size.unwrap_or((2 * h, 2 * w));
        let mut y = self.norm.forward(g, net, x, norm)?;
        y = g.relu(y);
        match (long_skip, self.cfg.skip_channels) {
            (Some((compressor, enc)), 1) => y = compressor.compress_and_concat(g, net, enc, y)?,
            (None, 0) => {}
            _ => return Err(Error::Config("long skip wiring does not match the block config".into())),
        }
        if self.cfg.upsample {
            y = g.upsample2(y, target.0, target.1)?;
        }
        y = self.conv.forward(g, net, y)?;
        if self.cfg.short_skip {
            let mut s = match &self.projection {
                Some(p) => p.forward(g, net, x)?,
                None => x,
            };
            if self.cfg.upsample {
                s = g.upsample2(s, target.0, target.1)?;
            }
            y = g.add(y, s)?;
        }
        Ok(y)
    }
}

/// Compressed long skip: 1×1 conv to a single map, instance-normalized,
/// concatenated onto the decoder features.
#[derive(Clone, Debug)]
pub struct SkipCompressor {
    pub level: usize,
    pub conv: Conv2d,
}

impl SkipCompressor {
    pub fn new<F: Float>(net: &mut Net<F>, rng: &mut ChaCha8Rng, name: &str, level: usize, enc_channels: usize) -> Self {
        Self { level, conv: net.conv(rng, name, enc_channels, 1, 1, 1) }
    }

    pub fn compress_and_concat<F: Float>(&self, g: &mut Graph<F>, net: &Net<F>, enc: Var, dec: Var) -> Result<Var> {
        let (es, ds) = (g.shape(enc).to_vec(), g.shape(dec).to_vec());
        if es.len() != 4 || ds.len() != 4 || es[0] != ds[0] || es[2..] != ds[2..] {
            return Err(Error::SkipMismatch { level: self.level, enc: es, dec: ds });
        }
        let squeezed = self.conv.forward(g, net, enc)?;
        let normed = g.normalize(squeezed, NormAxes::Instance, F::lit(NORM_EPS))?;
        Ok(g.concat(&[dec, normed])?)
    }
}

/// Per-layer `(scale, shift)` for adaptively normalized layers; each entry
/// is a pair of `(batch, channels)` graph values.
#[derive(Clone, Debug)]
pub struct NormParams {
    pub layers: Vec<(Var, Var)>,
}

impl NormParams {
    pub fn overrides(&self, axes: NormAxes) -> Vec<NormOverride> {
        self.layers.iter().map(|&(scale, shift)| NormOverride { axes, scale, shift }).collect()
    }
}

/// Maps pooled `(c, u)` codes to normalization parameters.
#[derive(Clone, Debug)]
pub struct NormParamMlp {
    pub hidden: Vec<Linear>,
    pub scale_heads: Vec<Linear>,
    pub shift_heads: Vec<Linear>,
}

impl NormParamMlp {
    /// `depth` hidden layers of `width` units, then one scale and one shift
    /// head per entry of `layer_channels`.
    pub fn new<F: Float>(
        net: &mut Net<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        code_channels: usize,
        width: usize,
        depth: usize,
        layer_channels: &[usize],
    ) -> Self {
        let mut hidden = Vec::with_capacity(depth);
        let mut din = code_channels;
        for i in 0..depth {
            hidden.push(net.linear(rng, &format!("{name}.fc{i}"), din, width));
            din = width;
        }
        let scale_heads = layer_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| net.linear(rng, &format!("{name}.scale{i}"), din, c))
            .collect();
        let shift_heads = layer_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| net.linear(rng, &format!("{name}.shift{i}"), din, c))
            .collect();
        Self { hidden, scale_heads, shift_heads }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, net: &Net<F>, common: Var, unique: Var) -> Result<NormParams> {
        let pc = g.spatial_mean(common)?;
        let pu = g.spatial_mean(unique)?;
        let (n, cc, cu) = (g.shape(pc)[0], g.shape(pc)[1], g.shape(pu)[1]);
        if g.shape(pu)[0] != n {
            return Err(Error::Input("common and unique codes disagree on batch size".into()));
        }
        let a = g.reshape(pc, &[n, cc, 1, 1])?;
        let b = g.reshape(pu, &[n, cu, 1, 1])?;
        let cat = g.concat(&[a, b])?;
        let mut h = g.reshape(cat, &[n, cc + cu])?;
        for layer in &self.hidden {
            h = layer.forward(g, net, h)?;
            h = g.relu(h);
        }
        let mut layers = Vec::with_capacity(self.scale_heads.len());
        for (s, t) in self.scale_heads.iter().zip(&self.shift_heads) {
            layers.push((s.forward(g, net, h)?, t.forward(g, net, h)?));
        }
        Ok(NormParams { layers })
    }
}
