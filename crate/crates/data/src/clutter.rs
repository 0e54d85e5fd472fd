//! Cluttered-digit benchmark generation.
//!
//! Presence images hold one complete digit on a background of small crops cut
//! from other digits of the same fold; absence images hold the crops only.
//! Wherever sprites overlap, each pixel shows one contributing sprite picked
//! at random, so there is no crisp occlusion edge to key on.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::digits::{DigitFolds, DigitSet, DIGIT_SIDE};
use crate::error::{io_err, Error, Result};
use crate::image::{write_gray_png, write_mask};
use crate::manifest::{
    select_labeled_subset, DatasetManifest, Domain, ExampleRecord, Fold, GeneratorSpec, ManifestHeader, MANIFEST_FILE,
    MANIFEST_VERSION,
};
use crate::seed::example_rng;

/// Attempts at finding a crop window that contains some ink before settling
/// for whatever the last draw produced.
const CROP_ATTEMPTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClutterSpec {
    pub image_size: usize,
    pub n_clutter: u32,
    pub crop_size: usize,
    pub fold: Fold,
    pub n_presence: usize,
    pub n_absence: usize,
    pub digit_filter_for_labels: u8,
    pub labeled_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClutterPreset {
    Simple48,
    Hard48,
    Large128,
}

impl std::str::FromStr for ClutterPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple48" | "48-simple" | "simple" => Ok(Self::Simple48),
            "hard48" | "48-hard" | "hard" => Ok(Self::Hard48),
            "large128" | "128" => Ok(Self::Large128),
            _ => Err(Error::Spec(format!(
                "unknown clutter preset {s:?} (simple48, hard48, large128)"
            ))),
        }
    }
}

impl ClutterSpec {
    pub fn preset(preset: ClutterPreset, fold: Fold, n_presence: usize, n_absence: usize) -> Self {
        let (image_size, n_clutter) = match preset {
            ClutterPreset::Simple48 => (48, 8),
            ClutterPreset::Hard48 => (48, 24),
            ClutterPreset::Large128 => (128, 80),
        };
        Self {
            image_size,
            n_clutter,
            crop_size: 10,
            fold,
            n_presence,
            n_absence,
            digit_filter_for_labels: 9,
            labeled_fraction: 0.01,
        }
    }

    /// Presets for all three folds with the default 50k/5k/5k sizes per domain.
    pub fn preset_folds(preset: ClutterPreset) -> Vec<Self> {
        Self::preset_folds_sized(preset, [50_000, 5_000, 5_000])
    }

    pub fn preset_folds_sized(preset: ClutterPreset, sizes: [usize; 3]) -> Vec<Self> {
        Fold::ALL
            .iter()
            .zip(sizes)
            .map(|(&f, n)| Self::preset(preset, f, n, n))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < DIGIT_SIDE {
            return Err(Error::Spec(format!(
                "image size {} cannot hold a {DIGIT_SIDE}×{DIGIT_SIDE} digit",
                self.image_size
            )));
        }
        if self.crop_size == 0 || self.crop_size > DIGIT_SIDE {
            return Err(Error::Spec(format!("crop size {} outside 1..={DIGIT_SIDE}", self.crop_size)));
        }
        if self.digit_filter_for_labels > 9 {
            return Err(Error::Spec(format!("label filter {} is not a digit", self.digit_filter_for_labels)));
        }
        if !(0.0..=1.0).contains(&self.labeled_fraction) {
            return Err(Error::Spec(format!("labeled fraction {} outside [0, 1]", self.labeled_fraction)));
        }
        Ok(())
    }
}

/// A sprite placed on the canvas; zero pixels are transparent.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub top: i64,
    pub left: i64,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<T>,
}

impl<T: Copy + Default + PartialEq> Layer<T> {
    fn at(&self, y: i64, x: i64) -> Option<T> {
        let (ly, lx) = (y - self.top, x - self.left);
        if ly < 0 || lx < 0 || ly >= self.height as i64 || lx >= self.width as i64 {
            return None;
        }
        let v = self.pixels[ly as usize * self.width + lx as usize];
        (v != T::default()).then_some(v)
    }
}

/// Composites layers onto a `height × width` canvas. A pixel covered by one
/// layer takes that value; a pixel covered by several takes the value of one
/// of them, chosen uniformly per pixel. Uncovered pixels stay at zero.
pub fn dither_overlaps<T: Copy + Default + PartialEq>(
    layers: &[Layer<T>],
    height: usize,
    width: usize,
    rng: &mut impl Rng,
) -> Vec<T> {
    let mut out = vec![T::default(); height * width];
    let mut hits = Vec::with_capacity(layers.len());
    for y in 0..height {
        for x in 0..width {
            hits.clear();
            hits.extend(layers.iter().filter_map(|l| l.at(y as i64, x as i64)));
            out[y * width + x] = match hits.len() {
                0 => T::default(),
                1 => hits[0],
                k => hits[rng.random_range(0..k)],
            };
        }
    }
    out
}

fn random_crop(digits: &DigitSet, crop: usize, size: usize, rng: &mut impl Rng) -> Layer<u8> {
    let mut pixels = vec![0u8; crop * crop];
    for _ in 0..CROP_ATTEMPTS {
        let sprite = digits.sprite(rng.random_range(0..digits.len()));
        let oy = rng.random_range(0..=DIGIT_SIDE - crop);
        let ox = rng.random_range(0..=DIGIT_SIDE - crop);
        for r in 0..crop {
            let row = (oy + r) * DIGIT_SIDE + ox;
            pixels[r * crop..(r + 1) * crop].copy_from_slice(&sprite[row..row + crop]);
        }
        if pixels.iter().any(|&v| v > 0) {
            break;
        }
    }
    // Crops are centred uniformly over the canvas, so they may hang off an edge.
    let half = (crop / 2) as i64;
    Layer {
        top: rng.random_range(0..size as i64) - half,
        left: rng.random_range(0..size as i64) - half,
        height: crop,
        width: crop,
        pixels,
    }
}

/// One rendered example before it is written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ClutteredExample {
    pub pixels: Vec<u8>,
    pub mask: Option<Vec<bool>>,
    pub digit_class: Option<u8>,
    pub n_clutter: u32,
}

/// Renders example `index` of a fold. Indices `0..n_presence` are presence
/// examples and the following `n_absence` are absence examples.
pub fn render_example(
    spec: &ClutterSpec,
    digits: &DigitSet,
    master_seed: u64,
    index: usize,
) -> Result<ClutteredExample> {
    if digits.is_empty() {
        return Err(Error::FoldTooSmall {
            fold: spec.fold,
            available: 0,
        });
    }
    let size = spec.image_size;
    let mut rng = example_rng(master_seed, spec.fold.tag(), index as u64);
    let presence = index < spec.n_presence;

    let mut layers = Vec::with_capacity(spec.n_clutter as usize + 1);
    let mut digit = None;
    if presence {
        let k = rng.random_range(0..digits.len());
        let max = (size - DIGIT_SIDE) as i64;
        let layer = Layer {
            top: rng.random_range(0..=max),
            left: rng.random_range(0..=max),
            height: DIGIT_SIDE,
            width: DIGIT_SIDE,
            pixels: digits.sprite(k).to_vec(),
        };
        digit = Some((digits.label(k), layer.clone()));
        layers.push(layer);
    }
    for _ in 0..spec.n_clutter {
        layers.push(random_crop(digits, spec.crop_size, size, &mut rng));
    }
    let pixels = dither_overlaps(&layers, size, size, &mut rng);

    let (digit_class, mask) = match digit {
        Some((label, layer)) => {
            let mut mask = vec![false; size * size];
            for y in 0..size {
                for x in 0..size {
                    mask[y * size + x] = layer.at(y as i64, x as i64).is_some();
                }
            }
            (Some(label), Some(mask))
        }
        None => (None, None),
    };
    Ok(ClutteredExample {
        pixels,
        mask,
        digit_class,
        n_clutter: spec.n_clutter,
    })
}

fn domain_dir(fold: Fold, domain: Domain) -> String {
    match domain {
        Domain::P => format!("{fold}/p"),
        Domain::A => format!("{fold}/a"),
    }
}

/// Renders one fold into `out_dir` and returns its records (manifest not written).
pub fn render_fold(
    spec: &ClutterSpec,
    source: &DigitFolds,
    master_seed: u64,
    out_dir: &Path,
) -> Result<Vec<ExampleRecord>> {
    spec.validate()?;
    let digits = source.fold(spec.fold);
    if digits.is_empty() {
        return Err(Error::FoldTooSmall {
            fold: spec.fold,
            available: 0,
        });
    }
    for domain in [Domain::P, Domain::A] {
        let dir = out_dir.join(domain_dir(spec.fold, domain));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let size = spec.image_size;
    let total = spec.n_presence + spec.n_absence;
    let mut records = Vec::with_capacity(total);
    for index in 0..total {
        let ex = render_example(spec, digits, master_seed, index)?;
        let domain = if ex.mask.is_some() { Domain::P } else { Domain::A };
        let stem = format!("{}/{index:06}", domain_dir(spec.fold, domain));
        let image_path = format!("{stem}.png");
        write_gray_png(&out_dir.join(&image_path), size, size, &ex.pixels)?;
        let mask_path = match &ex.mask {
            Some(mask) => {
                let p = format!("{stem}_mask.png");
                write_mask(&out_dir.join(&p), size, size, mask)?;
                Some(p.into())
            }
            None => None,
        };
        records.push(ExampleRecord {
            image_path: image_path.into(),
            mask_path,
            domain,
            digit_class: ex.digit_class,
            labeled: false,
            fold: spec.fold,
            clutter: Some(ex.n_clutter),
        });
    }
    log::info!(
        "rendered {} {} examples ({} presence) into {}",
        total,
        spec.fold,
        spec.n_presence,
        out_dir.display()
    );
    Ok(records)
}

/// Generates the folds described by `specs` under `out_dir` and writes the
/// manifest there. No labels are assigned; see `select_labeled_subset`.
pub fn generate_cluttered_mnist(
    specs: &[ClutterSpec],
    source: &DigitFolds,
    master_seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let mut folds_seen = Vec::new();
    let mut records = Vec::new();
    for spec in specs {
        if folds_seen.contains(&spec.fold) {
            return Err(Error::Spec(format!("fold {} listed twice", spec.fold)));
        }
        folds_seen.push(spec.fold);
        records.extend(render_fold(spec, source, master_seed, out_dir)?);
    }
    let manifest = DatasetManifest {
        header: ManifestHeader {
            format_version: MANIFEST_VERSION,
            master_seed,
            source: source.description.clone(),
            generator: GeneratorSpec::ClutteredDigits {
                folds: specs.to_vec(),
            },
            labeled: None,
        },
        records,
    };
    // Labels are drawn once, from the training fold's settings.
    let manifest = match specs.iter().find(|s| s.fold == Fold::Train) {
        Some(train) if train.labeled_fraction > 0.0 => select_labeled_subset(
            &manifest,
            train.labeled_fraction,
            Some(train.digit_filter_for_labels),
            master_seed,
        )?,
        _ => manifest,
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
