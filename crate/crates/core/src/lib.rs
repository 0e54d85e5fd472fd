//! Networks, objectives and the training step for segmentation assisted by
//! presence/absence image translation.

pub mod arch;
pub mod error;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod translation;

pub use arch::{Architecture, PresetName, SegNormMode};
pub use error::{Error, Result};
pub use losses::{LossReport, LossWeights};
pub use networks::{Decoder, Discriminator, Encoder, LatentPair, SegHead, SkipStack};
pub use translation::{
    sample_unique, AbsenceBundle, LabeledBatch, Model, OptimizerConfig, PresenceBundle, StepReport, Trainer, VariantKind,
};
