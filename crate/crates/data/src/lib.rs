//! Data preparation for translation-assisted segmentation: synthetic
//! cluttered-digit benchmarks, MRI half-slice extraction, labeled-subset
//! selection, manifests and augmentation.

pub mod augment;
pub mod brats;
pub mod clutter;
pub mod digits;
pub mod error;
pub mod image;
pub mod manifest;
pub mod nifti;
pub mod seed;

pub use augment::{augment, AugmentConfig, AugmentParams};
pub use brats::{brats_to_half_slices, BratsNaming, BratsOutput, BratsSliceSpec, Sequence};
pub use clutter::{dither_overlaps, generate_cluttered_mnist, ClutterPreset, ClutterSpec, Layer};
pub use digits::{DigitFolds, DigitSet};
pub use error::{Error, Result};
pub use image::{load_image, load_mask, Image};
pub use manifest::{
    select_labeled_subset, validate, DatasetManifest, Domain, ExampleRecord, Fold, ValidationReport,
    MANIFEST_FILE,
};
