//! Encoder, decoders, segmentation head and multi-scale discriminator.

use rand_chacha::ChaCha8Rng;
use segtrans_autograd::{Float, Graph, NormAxes, Var};

use crate::arch::{level_sizes, Architecture, DecoderSpec, DiscriminatorSpec, EncoderSpec, SegNormMode};
use crate::error::{Error, Result};
use crate::nn::{Affine, Conv2d, ConvBlock, ConvBlockConfig, Net, Norm, NormKind, NormOverride, NormParamMlp, SkipCompressor};

/// Bottleneck features split along channels.
#[derive(Clone, Copy, Debug)]
pub struct LatentPair {
    pub common: Var,
    pub unique: Var,
    /// The unsplit bottleneck.
    pub raw: Var,
}

/// Encoder features at each intermediate resolution, finest first.
#[derive(Clone, Debug, Default)]
pub struct SkipStack {
    pub levels: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder<F> {
    pub net: Net<F>,
    pub spec: EncoderSpec,
    image_channels: usize,
    image_size: (usize, usize),
    common_channels: usize,
    stem: Conv2d,
    blocks: Vec<ConvBlock>,
    final_norm: Norm,
}

impl<F: Float> Encoder<F> {
    pub fn new(arch: &Architecture, store_id: u32, spectral: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let spec = arch.encoder.clone();
        let mut net = Net::new(store_id, "encoder", spectral);
        let stem = net.conv(rng, "stem", arch.image_channels, spec.stem_channels, spec.kernel, 1);
        let mut blocks = Vec::with_capacity(spec.block_channels.len());
        let mut prev = spec.stem_channels;
        for (i, &ch) in spec.block_channels.iter().enumerate() {
            let cfg = ConvBlockConfig {
                in_channels: prev,
                out_channels: ch,
                kernel: spec.kernel,
                stride: 2,
                upsample: false,
                short_skip: true,
                norm_kind: NormKind::Instance,
                skip_channels: 0,
            };
            blocks.push(ConvBlock::new(&mut net, rng, &format!("block{i}"), cfg)?);
            prev = ch;
        }
        let final_norm = Norm::new(&mut net, "final_norm", NormKind::Instance, prev);
        Ok(Self {
            net,
            spec,
            image_channels: arch.image_channels,
            image_size: arch.image_size,
            common_channels: arch.common_channels(),
            stem,
            blocks,
            final_norm,
        })
    }

    pub fn encode(&self, g: &mut Graph<F>, x: Var) -> Result<(LatentPair, SkipStack)> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.image_channels || (h, w) != self.image_size {
            return Err(Error::Input(format!(
                "encoder expects {}×{}×{} images, got {c}×{h}×{w}",
                self.image_channels, self.image_size.0, self.image_size.1
            )));
        }
        let mut y = self.stem.forward(g, &self.net, x)?;
        let mut skips = SkipStack::default();
        let last = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            y = block.forward(g, &self.net, y, None, None, None)?;
            if i < last {
                skips.levels.push(y);
            }
        }
        let raw = self.final_norm.forward(g, &self.net, y, None)?;
        let raw = g.relu(raw);
        let total = g.shape(raw)[1];
        let common = g.slice_channels(raw, 0, self.common_channels)?;
        let unique = g.slice_channels(raw, self.common_channels, total - self.common_channels)?;
        Ok((LatentPair { common, unique, raw }, skips))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder<F> {
    pub net: Net<F>,
    pub spec: DecoderSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub long_skips: bool,
    sizes: Vec<(usize, usize)>,
    stem: Conv2d,
    blocks: Vec<ConvBlock>,
    compressors: Vec<SkipCompressor>,
    final_norm: Norm,
    out_conv: Conv2d,
}

impl<F: Float> Decoder<F> {
    /// A decoder mirroring the encoder of `arch`. Long skips, when enabled,
    /// are compressed and concatenated at every intermediate resolution.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        arch: &Architecture,
        spec: &DecoderSpec,
        name: &str,
        store_id: u32,
        in_channels: usize,
        out_channels: usize,
        long_skips: bool,
        spectral: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let n_enc = arch.encoder.block_channels.len();
        if spec.block_channels.len() + 1 != n_enc {
            return Err(Error::Config(format!("{name}: decoder block count does not mirror the encoder")));
        }
        let mut net = Net::new(store_id, name, spectral);
        let stem = net.conv(rng, "stem", in_channels, spec.stem_channels, spec.kernel, 1);
        let mut blocks = Vec::new();
        let mut compressors = Vec::new();
        let mut prev = spec.stem_channels;
        for (j, &ch) in spec.block_channels.iter().enumerate() {
            let level = n_enc - 2 - j;
            if long_skips {
                let enc_ch = arch.encoder.block_channels[level];
                compressors.push(SkipCompressor::new(&mut net, rng, &format!("skip{level}"), level, enc_ch));
            }
            let cfg = ConvBlockConfig {
                in_channels: prev,
                out_channels: ch,
                kernel: spec.kernel,
                stride: 1,
                upsample: true,
                short_skip: spec.short_skip,
                norm_kind: NormKind::Layer,
                skip_channels: usize::from(long_skips),
            };
            blocks.push(ConvBlock::new(&mut net, rng, &format!("block{j}"), cfg)?);
            prev = ch;
        }
        let final_norm = Norm::new(&mut net, "final_norm", NormKind::Layer, prev);
        let out_conv = net.conv(rng, "out", prev, out_channels, spec.kernel, 1);
        Ok(Self {
            net,
            spec: spec.clone(),
            in_channels,
            out_channels,
            long_skips,
            sizes: level_sizes(arch.image_size, n_enc),
            stem,
            blocks,
            compressors,
            final_norm,
            out_conv,
        })
    }

    /// Number of normalization layers (blocks plus the final one).
    pub fn n_norms(&self) -> usize {
        self.blocks.len() + 1
    }

    pub fn norm_channels(&self) -> Vec<usize> {
        self.spec.norm_channels()
    }

    /// Everything up to, not including, the final norm/ReLU/conv.
    /// `norms`, when given, replaces the normalization of each block.
    pub fn features(&self, g: &mut Graph<F>, code: Var, skips: Option<&SkipStack>, norms: Option<&[NormOverride]>) -> Result<Var> {
        let (_, c, h, w) = g.value(code).dims4()?;
        let n_enc = self.sizes.len() - 1;
        if c != self.in_channels || (h, w) != self.sizes[n_enc] {
            return Err(Error::Input(format!(
                "decoder expects a {}×{}×{} code, got {c}×{h}×{w}",
                self.in_channels, self.sizes[n_enc].0, self.sizes[n_enc].1
            )));
        }
        if let Some(norms) = norms {
            if norms.len() < self.blocks.len() {
                return Err(Error::Config(format!("{} norm overrides for {} blocks", norms.len(), self.blocks.len())));
            }
        }
        let (th, tw) = self.sizes[n_enc - 1];
        let mut y = g.upsample2(code, th, tw)?;
        y = self.stem.forward(g, &self.net, y)?;
        for (j, block) in self.blocks.iter().enumerate() {
            let level = n_enc - 2 - j;
            let skip = if self.long_skips {
                let stack = skips.ok_or(Error::MissingSkip(level))?;
                let enc = *stack.levels.get(level).ok_or(Error::MissingSkip(level))?;
                Some((&self.compressors[j], enc))
            } else {
                None
            };
            let over = norms.map(|n| &n[j]);
            y = block.forward(g, &self.net, y, over, skip, Some(self.sizes[level]))?;
        }
        Ok(y)
    }

    pub fn decode(&self, g: &mut Graph<F>, code: Var, skips: Option<&SkipStack>) -> Result<Var> {
        let y = self.features(g, code, skips, None)?;
        let y = self.final_norm.forward(g, &self.net, y, None)?;
        let y = g.relu(y);
        self.out_conv.forward(g, &self.net, y)
    }

    fn final_norm(&self) -> &Norm {
        &self.final_norm
    }
}

/// Decodes the translation residual from `(c, u)`.
pub fn decode_residual<F: Float>(g: &mut Graph<F>, residual: &Decoder<F>, common: Var, unique: Var, skips: &SkipStack) -> Result<Var> {
    let code = concat_codes(g, common, unique)?;
    residual.decode(g, code, Some(skips))
}

fn concat_codes<F: Float>(g: &mut Graph<F>, common: Var, unique: Var) -> Result<Var> {
    let (a, b) = (g.shape(common).to_vec(), g.shape(unique).to_vec());
    if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2..] != b[2..] {
        return Err(Error::Input(format!("common code {a:?} and unique code {b:?} do not align")));
    }
    Ok(g.concat(&[common, unique])?)
}

/// Parameters that exist only on the segmentation path of the residual
/// decoder: the normalization replacement and the pixel classifier.
#[derive(Clone, Debug)]
pub struct SegHead<F> {
    pub net: Net<F>,
    pub mode: SegNormMode,
    mlp: Option<NormParamMlp>,
    affines: Vec<Affine>,
    classifier: Conv2d,
}

impl<F: Float> SegHead<F> {
    pub fn new(arch: &Architecture, residual: &Decoder<F>, store_id: u32, spectral: bool, rng: &mut ChaCha8Rng) -> Self {
        let mut net = Net::new(store_id, "seg_head", spectral);
        let channels = residual.norm_channels();
        let (mlp, affines) = match arch.seg_norm {
            SegNormMode::AdaptiveFromMlp => {
                // Under spectral norm the MLP could not scale its outputs up from
                // the small pooled code, leaving the adaptive scales (and so the
                // logits) near zero. It stays unnormalized.
                let mlp = net.without_spectral(|net| {
                    NormParamMlp::new(net, rng, "mlp", arch.latent_channels, arch.mlp_width, arch.mlp_depth, &channels)
                });
                (Some(mlp), Vec::new())
            }
            SegNormMode::SeparateLayerParams => {
                let affines = channels.iter().enumerate().map(|(i, &c)| net.affine(&format!("norm{i}"), c)).collect();
                (None, affines)
            }
        };
        let last = *channels.last().expect("at least one norm");
        let classifier = net.conv(rng, "classifier", last, arch.classes, 1, 1);
        Self { net, mode: arch.seg_norm, mlp, affines, classifier }
    }

    pub fn classifier(&self) -> &Conv2d {
        &self.classifier
    }

    fn overrides(&self, g: &mut Graph<F>, common: Var, unique: Var) -> Result<Vec<NormOverride>> {
        match (&self.mlp, self.mode) {
            (Some(mlp), SegNormMode::AdaptiveFromMlp) => Ok(mlp.forward(g, &self.net, common, unique)?.overrides(NormAxes::Instance)),
            (None, SegNormMode::SeparateLayerParams) => Ok(self
                .affines
                .iter()
                .map(|a| {
                    let (scale, shift) = a.vars(g, &self.net);
                    NormOverride { axes: NormAxes::Layer, scale, shift }
                })
                .collect()),
            _ => Err(Error::Config("segmentation normalization state does not match its mode".into())),
        }
    }
}

/// Per-pixel target probabilities from the residual decoder with the
/// segmentation normalization swapped in and its last layer replaced by
/// the classifier.
pub fn decode_segmentation<F: Float>(
    g: &mut Graph<F>,
    residual: &Decoder<F>,
    head: &SegHead<F>,
    common: Var,
    unique: Var,
    skips: &SkipStack,
) -> Result<Var> {
    let over = head.overrides(g, common, unique)?;
    if over.len() != residual.n_norms() {
        return Err(Error::Config(format!("{} segmentation norms for {} decoder norms", over.len(), residual.n_norms())));
    }
    let code = concat_codes(g, common, unique)?;
    let y = residual.features(g, code, Some(skips), Some(&over))?;
    let y = residual.final_norm().forward(g, &residual.net, y, over.last())?;
    let y = g.relu(y);
    let logits = head.classifier.forward(g, &head.net, y)?;
    Ok(g.sigmoid(logits))
}

#[derive(Clone, Debug)]
struct ScaleNet {
    stem: Conv2d,
    layers: Vec<(Norm, Conv2d)>,
    head: Conv2d,
}

/// Applies an independent patch discriminator at the input scale and at
/// successive 2× average-pooled copies; the score is the mean of each
/// output map, averaged across scales.
#[derive(Clone, Debug)]
pub struct Discriminator<F> {
    pub net: Net<F>,
    pub spec: DiscriminatorSpec,
    image_channels: usize,
    scales: Vec<ScaleNet>,
}

impl<F: Float> Discriminator<F> {
    pub fn new(arch: &Architecture, name: &str, store_id: u32, spectral: bool, rng: &mut ChaCha8Rng) -> Self {
        let spec = arch.discriminator.clone();
        let mut net = Net::new(store_id, name, spectral);
        let scales = (0..spec.n_scales)
            .map(|s| {
                let stem = net.conv(rng, &format!("s{s}.stem"), arch.image_channels, spec.stem_channels, spec.kernel, 1);
                let mut prev = spec.stem_channels;
                let layers = spec
                    .layer_channels
                    .iter()
                    .enumerate()
                    .map(|(i, &ch)| {
                        let norm = Norm::new(&mut net, &format!("s{s}.norm{i}"), NormKind::Instance, prev);
                        let conv = net.conv(rng, &format!("s{s}.conv{i}"), prev, ch, spec.kernel, 2);
                        prev = ch;
                        (norm, conv)
                    })
                    .collect();
                let head = net.conv(rng, &format!("s{s}.head"), prev, 1, 1, 1);
                ScaleNet { stem, layers, head }
            })
            .collect();
        Self { net, spec, image_channels: arch.image_channels, scales }
    }

    /// Score of shape `(batch)`.
    pub fn discriminate(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(x).dims4()?;
        if c != self.image_channels {
            return Err(Error::Input(format!("discriminator expects {} channels, got {c}", self.image_channels)));
        }
        let slope = F::lit(self.spec.leaky_slope);
        let mut input = x;
        let mut total: Option<Var> = None;
        for (s, scale) in self.scales.iter().enumerate() {
            if s > 0 {
                input = g.avg_pool2(input)?;
            }
            let mut y = scale.stem.forward(g, &self.net, input)?;
            for (norm, conv) in &scale.layers {
                y = norm.forward(g, &self.net, y, None)?;
                y = g.leaky_relu(y, slope);
                y = conv.forward(g, &self.net, y)?;
            }
            y = scale.head.forward(g, &self.net, y)?;
            let score = g.mean_per_sample(y);
            total = Some(match total {
                None => score,
                Some(t) => g.add(t, score)?,
            });
        }
        let total = total.expect("at least one scale");
        Ok(g.scale(total, F::lit(1.0 / self.scales.len() as f64)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::PresetName;
    use crate::nn::normal;
    use rand::SeedableRng;
    use segtrans_autograd::Tensor;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn zero(net: &mut Net<f32>) {
        for e in net.store.entries_mut() {
            if e.kind == segtrans_autograd::EntryKind::Param {
                e.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    #[test]
    fn mnist48_encode_shapes() {
        let arch = Architecture::preset(PresetName::Mnist48);
        let mut r = rng();
        let enc = Encoder::<f32>::new(&arch, 0, false, &mut r).unwrap();
        let mut g = Graph::new();
        let x = g.constant(normal(&mut r, &[2, 1, 48, 48], 1.0));
        let (lat, skips) = enc.encode(&mut g, x).unwrap();
        assert_eq!(g.shape(lat.common), &[2, 384, 3, 3]);
        assert_eq!(g.shape(lat.unique), &[2, 128, 3, 3]);
        let sizes: Vec<_> = skips.levels.iter().map(|&v| g.shape(v)[2..].to_vec()).collect();
        assert_eq!(sizes, vec![vec![24, 24], vec![12, 12], vec![6, 6]]);

        let bad = g.constant(Tensor::zeros(&[2, 3, 48, 48]));
        assert!(matches!(enc.encode(&mut g, bad), Err(Error::Input(_))));
    }

    #[test]
    fn mnist48_decoders_round_trip_shape() {
        let arch = Architecture::preset(PresetName::Mnist48);
        let mut r = rng();
        let enc = Encoder::<f32>::new(&arch, 0, false, &mut r).unwrap();
        let com = Decoder::<f32>::new(&arch, &arch.common_decoder, "common", 1, 384, 1, true, false, &mut r).unwrap();
        let res = Decoder::<f32>::new(&arch, &arch.residual_decoder, "residual", 2, 512, 1, true, false, &mut r).unwrap();
        let head = SegHead::new(&arch, &res, 3, false, &mut r);
        let mut g = Graph::new();
        let x = g.constant(normal(&mut r, &[2, 1, 48, 48], 1.0));
        let (lat, skips) = enc.encode(&mut g, x).unwrap();
        let xa = com.decode(&mut g, lat.common, Some(&skips)).unwrap();
        assert_eq!(g.shape(xa), &[2, 1, 48, 48]);
        let d = decode_residual(&mut g, &res, lat.common, lat.unique, &skips).unwrap();
        assert_eq!(g.shape(d), &[2, 1, 48, 48]);
        let y = decode_segmentation(&mut g, &res, &head, lat.common, lat.unique, &skips).unwrap();
        assert_eq!(g.shape(y), &[2, 1, 48, 48]);
        assert!(g.value(y).data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(matches!(com.decode(&mut g, lat.common, None), Err(Error::MissingSkip(2))));
    }

    #[test]
    fn zero_weights_give_zero_images() {
        let arch = Architecture::tiny((8, 8), 1);
        let mut r = rng();
        let enc = Encoder::<f32>::new(&arch, 0, false, &mut r).unwrap();
        let mut com = Decoder::<f32>::new(&arch, &arch.common_decoder, "common", 1, 6, 1, true, false, &mut r).unwrap();
        zero(&mut com.net);
        let mut g = Graph::new();
        let x = g.constant(normal(&mut r, &[2, 1, 8, 8], 1.0));
        let (lat, skips) = enc.encode(&mut g, x).unwrap();
        let y = com.decode(&mut g, lat.common, Some(&skips)).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discriminator_zero_and_permutation() {
        let arch = Architecture::preset(PresetName::Mnist48);
        let mut r = rng();
        let d = Discriminator::<f32>::new(&arch, "d", 4, true, &mut r);
        let a = normal::<f32>(&mut r, &[1, 1, 48, 48], 1.0);
        let b = normal::<f32>(&mut r, &[1, 1, 48, 48], 1.0);
        let mut g = Graph::new();
        let ab = g.constant(Tensor::stack_batch(&[a.clone(), b.clone()]).unwrap());
        let ba = g.constant(Tensor::stack_batch(&[b, a]).unwrap());
        let s1 = d.discriminate(&mut g, ab).unwrap();
        let s2 = d.discriminate(&mut g, ba).unwrap();
        assert_eq!(g.shape(s1), &[2]);
        let (v1, v2) = (g.value(s1).data(), g.value(s2).data());
        assert_eq!(v1[0], v2[1]);
        assert_eq!(v1[1], v2[0]);

        let mut dz = d.clone();
        zero(&mut dz.net);
        let mut g = Graph::new();
        let x = g.constant(normal(&mut r, &[2, 1, 48, 48], 1.0));
        let s = dz.discriminate(&mut g, x).unwrap();
        assert_eq!(g.value(s).data(), &[0.0, 0.0]);
    }
}
