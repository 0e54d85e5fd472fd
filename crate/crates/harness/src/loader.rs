//! Reads manifest examples into batches.

use std::path::{Path, PathBuf};

use segtrans_autograd::Tensor;
use segtrans_data::{augment, load_image, load_mask, AugmentConfig, DatasetManifest, Domain, ExampleRecord, Fold, Image};

use crate::config::hex_digest;
use crate::error::{io_err, Error, Result};

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    /// SHA-256 of the manifest file.
    pub digest: String,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let bytes = std::fs::read(manifest_path).map_err(io_err(manifest_path))?;
        let manifest = DatasetManifest::read(manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self {
            root,
            manifest,
            digest: hex_digest(&bytes),
        })
    }

    pub fn records(&self, fold: Fold, domain: Domain) -> Vec<&ExampleRecord> {
        self.manifest.select(fold, domain).collect()
    }

    /// Presence examples with masks, the population evaluated for Dice.
    pub fn evaluation_records(&self, fold: Fold, limit: Option<usize>) -> Result<Vec<&ExampleRecord>> {
        let mut out: Vec<&ExampleRecord> = self
            .manifest
            .select(fold, Domain::P)
            .filter(|r| r.mask_path.is_some())
            .collect();
        if let Some(n) = limit {
            out.truncate(n);
        }
        if out.is_empty() {
            return Err(Error::EmptyFold { fold });
        }
        Ok(out)
    }

    pub fn image(&self, record: &ExampleRecord) -> Result<Image> {
        Ok(load_image(&self.root.join(&record.image_path))?)
    }

    pub fn mask(&self, record: &ExampleRecord) -> Result<Option<Image>> {
        record
            .mask_path
            .as_ref()
            .map(|p| load_mask(&self.root.join(p)).map_err(Error::from))
            .transpose()
    }
}

/// Stacks equally shaped images into an `(n, c, h, w)` tensor.
pub fn stack(images: &[Image]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::Config(format!(
                "batch mixes image shapes {:?} and {:?}",
                (c, h, w),
                (img.channels, img.height, img.width)
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::new(&[images.len(), c, h, w], data)?)
}

/// Loads examples, optionally augmenting each with its own seed.
pub fn load_batch(
    data: &Dataset,
    records: &[&ExampleRecord],
    augmentation: Option<(&AugmentConfig, &[u64])>,
) -> Result<(Vec<Image>, Vec<Option<Image>>)> {
    let mut images = Vec::with_capacity(records.len());
    let mut masks = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let img = data.image(r)?;
        let mask = data.mask(r)?;
        let (img, mask) = match augmentation {
            Some((cfg, seeds)) => augment(&img, mask.as_ref(), cfg, seeds[i])?,
            None => (img, mask),
        };
        images.push(img);
        masks.push(mask);
    }
    Ok((images, masks))
}
