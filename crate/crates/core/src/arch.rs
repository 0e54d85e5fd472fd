//! Layer tables for the supported image geometries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    Mnist48,
    Mnist128,
    Brats,
}

impl std::str::FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist48" => Ok(Self::Mnist48),
            "mnist128" => Ok(Self::Mnist128),
            "brats" => Ok(Self::Brats),
            other => Err(Error::Config(format!("unknown architecture preset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub stem_channels: usize,
    /// One stride-2 conv block per entry.
    pub block_channels: Vec<usize>,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub stem_channels: usize,
    /// One upsampling conv block per entry.
    pub block_channels: Vec<usize>,
    pub kernel: usize,
    pub short_skip: bool,
}

impl DecoderSpec {
    /// Channel count entering each normalization layer, in order: one per
    /// conv block and the final one before the output convolution.
    pub fn norm_channels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.block_channels.len() + 1);
        out.push(self.stem_channels);
        out.extend(&self.block_channels);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub stem_channels: usize,
    /// Stride-2 norm/activation/conv layers.
    pub layer_channels: Vec<usize>,
    pub kernel: usize,
    pub n_scales: usize,
    pub leaky_slope: f64,
}

/// How the segmentation path replaces the residual decoder's normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegNormMode {
    /// Per-sample affine parameters predicted from the latent codes;
    /// statistics pooled per channel.
    AdaptiveFromMlp,
    /// A second set of learned layer-norm affine parameters.
    SeparateLayerParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub image_channels: usize,
    pub image_size: (usize, usize),
    pub latent_channels: usize,
    pub unique_channels: usize,
    pub encoder: EncoderSpec,
    pub common_decoder: DecoderSpec,
    pub residual_decoder: DecoderSpec,
    pub discriminator: DiscriminatorSpec,
    pub seg_norm: SegNormMode,
    pub mlp_width: usize,
    pub mlp_depth: usize,
    pub classes: usize,
}

impl Architecture {
    pub fn preset(name: PresetName) -> Self {
        let d = |k: usize, short: bool, blocks: &[usize]| DecoderSpec {
            stem_channels: 256,
            block_channels: blocks.to_vec(),
            kernel: k,
            short_skip: short,
        };
        match name {
            PresetName::Mnist48 => Self {
                name: "mnist48".into(),
                image_channels: 1,
                image_size: (48, 48),
                latent_channels: 512,
                unique_channels: 128,
                encoder: EncoderSpec { stem_channels: 32, block_channels: vec![64, 128, 256, 512], kernel: 3 },
                common_decoder: d(3, true, &[128, 64, 32]),
                residual_decoder: d(5, false, &[128, 64, 32]),
                discriminator: DiscriminatorSpec {
                    stem_channels: 128,
                    layer_channels: vec![128, 256, 512],
                    kernel: 4,
                    n_scales: 3,
                    leaky_slope: 0.2,
                },
                seg_norm: SegNormMode::AdaptiveFromMlp,
                mlp_width: 256,
                mlp_depth: 4,
                classes: 1,
            },
            PresetName::Mnist128 => Self {
                name: "mnist128".into(),
                image_size: (128, 128),
                encoder: EncoderSpec { stem_channels: 16, block_channels: vec![32, 64, 128, 256, 512], kernel: 3 },
                common_decoder: d(3, true, &[128, 64, 32, 16]),
                residual_decoder: d(5, false, &[128, 64, 32, 16]),
                ..Self::preset(PresetName::Mnist48)
            },
            PresetName::Brats => Self {
                name: "brats".into(),
                image_channels: 4,
                image_size: (240, 120),
                discriminator: DiscriminatorSpec {
                    stem_channels: 64,
                    layer_channels: vec![64, 128, 256, 512],
                    kernel: 4,
                    n_scales: 3,
                    leaky_slope: 0.2,
                },
                seg_norm: SegNormMode::SeparateLayerParams,
                ..Self::preset(PresetName::Mnist128)
            },
        }
    }

    /// A miniature geometry for gradient checks and fast tests.
    pub fn tiny(image_size: (usize, usize), image_channels: usize) -> Self {
        Self {
            name: "tiny".into(),
            image_channels,
            image_size,
            latent_channels: 8,
            unique_channels: 2,
            encoder: EncoderSpec { stem_channels: 4, block_channels: vec![6, 8], kernel: 3 },
            common_decoder: DecoderSpec { stem_channels: 6, block_channels: vec![4], kernel: 3, short_skip: true },
            residual_decoder: DecoderSpec { stem_channels: 6, block_channels: vec![4], kernel: 3, short_skip: false },
            discriminator: DiscriminatorSpec {
                stem_channels: 4,
                layer_channels: vec![4],
                kernel: 4,
                n_scales: 3,
                leaky_slope: 0.2,
            },
            seg_norm: SegNormMode::AdaptiveFromMlp,
            mlp_width: 8,
            mlp_depth: 2,
            classes: 1,
        }
    }

    pub fn common_channels(&self) -> usize {
        self.latent_channels - self.unique_channels
    }

    /// Spatial size after the stem and after each stride-2 block.
    pub fn level_sizes(&self) -> Vec<(usize, usize)> {
        level_sizes(self.image_size, self.encoder.block_channels.len())
    }

    pub fn validate(&self) -> Result<()> {
        let enc = &self.encoder;
        if enc.block_channels.last() != Some(&self.latent_channels) {
            return Err(Error::Config(format!(
                "encoder ends with {:?} channels but the latent has {}",
                enc.block_channels.last(),
                self.latent_channels
            )));
        }
        if self.unique_channels == 0 || self.unique_channels >= self.latent_channels {
            return Err(Error::Config("unique code must be a proper, nonempty part of the latent".into()));
        }
        for (name, dec) in [("common", &self.common_decoder), ("residual", &self.residual_decoder)] {
            if dec.block_channels.len() + 1 != enc.block_channels.len() {
                return Err(Error::Config(format!(
                    "{name} decoder has {} blocks; the encoder needs {}",
                    dec.block_channels.len(),
                    enc.block_channels.len() - 1
                )));
            }
            if dec.kernel % 2 == 0 {
                return Err(Error::Config(format!("{name} decoder kernel must be odd")));
            }
        }
        if self.classes != 1 {
            return Err(Error::Config("only binary segmentation is supported".into()));
        }
        if self.discriminator.n_scales == 0 {
            return Err(Error::Config("discriminator needs at least one scale".into()));
        }
        Ok(())
    }
}

pub fn level_sizes(image: (usize, usize), n_blocks: usize) -> Vec<(usize, usize)> {
    let mut out = vec![image];
    for _ in 0..n_blocks {
        let (h, w) = *out.last().expect("nonempty");
        out.push((h.div_ceil(2), w.div_ceil(2)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [PresetName::Mnist48, PresetName::Mnist128, PresetName::Brats] {
            Architecture::preset(p).validate().unwrap();
        }
        Architecture::tiny((8, 8), 1).validate().unwrap();
    }

    #[test]
    fn level_sizes_use_ceil() {
        let a = Architecture::preset(PresetName::Brats);
        assert_eq!(a.level_sizes(), vec![(240, 120), (120, 60), (60, 30), (30, 15), (15, 8), (8, 4)]);
        let m = Architecture::preset(PresetName::Mnist48);
        assert_eq!(m.level_sizes().last(), Some(&(3, 3)));
        assert_eq!(m.residual_decoder.norm_channels(), vec![256, 128, 64, 32]);
    }
}
