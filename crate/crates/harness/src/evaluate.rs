//! Dice evaluation of segmentation masks.

use serde::{Deserialize, Serialize};

use segtrans_autograd::Graph;
use segtrans_core::Model;
use segtrans_data::Fold;

use crate::error::{Error, Result};
use crate::loader::{load_batch, stack, Dataset};

const EVAL_BATCH: usize = 20;

/// Per-image Dice averaged over images, and Dice of the pooled pixel counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiceSummary {
    pub dice_mean: f64,
    pub dice_aggregate: f64,
    pub n: usize,
}

/// Overlap counts of one prediction against its reference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: u64,
    pub predicted: u64,
    pub reference: u64,
}

impl Overlap {
    pub fn of(predicted: &[bool], reference: &[bool]) -> Self {
        assert_eq!(predicted.len(), reference.len(), "mask sizes differ");
        let mut o = Self::default();
        for (&p, &r) in predicted.iter().zip(reference) {
            o.intersection += (p && r) as u64;
            o.predicted += p as u64;
            o.reference += r as u64;
        }
        o
    }

    /// `2|y∩ŷ| / (|y| + |ŷ|)`, taken as 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let denom = self.predicted + self.reference;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DiceAccumulator {
    per_image_sum: f64,
    n: usize,
    pooled: Overlap,
}

impl DiceAccumulator {
    pub fn add(&mut self, o: Overlap) {
        self.per_image_sum += o.dice();
        self.n += 1;
        self.pooled.intersection += o.intersection;
        self.pooled.predicted += o.predicted;
        self.pooled.reference += o.reference;
    }

    pub fn summary(&self) -> Option<DiceSummary> {
        (self.n > 0).then(|| DiceSummary {
            dice_mean: self.per_image_sum / self.n as f64,
            dice_aggregate: self.pooled.dice(),
            n: self.n,
        })
    }
}

/// Segments every presence example of `fold` (up to `limit`) and scores it.
pub fn evaluate(
    model: &Model<f32>,
    data: &Dataset,
    fold: Fold,
    threshold: f64,
    limit: Option<usize>,
) -> Result<DiceSummary> {
    let records = data.evaluation_records(fold, limit)?;
    let mut acc = DiceAccumulator::default();
    for chunk in records.chunks(EVAL_BATCH) {
        let (images, masks) = load_batch(data, chunk, None)?;
        let pred = model.segment(&stack(&images)?, threshold)?;
        let plane = pred.numel() / chunk.len();
        for (i, mask) in masks.iter().enumerate() {
            let mask = mask.as_ref().expect("evaluation records carry masks");
            let p: Vec<bool> = pred.data()[i * plane..(i + 1) * plane].iter().map(|&v| v > 0.5).collect();
            let r: Vec<bool> = mask.data.iter().map(|&v| v > 0.5).collect();
            acc.add(Overlap::of(&p, &r));
        }
    }
    acc.summary().ok_or(Error::EmptyFold { fold })
}

/// Where translation to the absence domain changes a presence image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualLocalization {
    /// Mean `|x_P − x_PA|` inside the reference mask, averaged over images.
    pub inside: f64,
    /// The same outside the mask.
    pub outside: f64,
    pub ratio: f64,
    pub n: usize,
}

/// Compares the translation residual inside and outside the target for the
/// presence examples of `fold` whose masks are nonempty.
pub fn residual_localization(
    model: &Model<f32>,
    data: &Dataset,
    fold: Fold,
    limit: Option<usize>,
) -> Result<ResidualLocalization> {
    let records = data.evaluation_records(fold, limit)?;
    let (mut inside, mut outside, mut n) = (0.0, 0.0, 0);
    for chunk in records.chunks(EVAL_BATCH) {
        let (images, masks) = load_batch(data, chunk, None)?;
        let x = stack(&images)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let x_pa = model.forward_presence(&mut g, xv, &[])?.x_pa;
        let x_pa = g.value(x_pa).data();
        let c = images[0].channels;
        let plane = images[0].height * images[0].width;
        for (i, mask) in masks.iter().enumerate() {
            let mask = mask.as_ref().expect("evaluation records carry masks");
            let (mut sum_in, mut n_in, mut sum_out, mut n_out) = (0.0, 0usize, 0.0, 0usize);
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for (j, &m) in mask.data.iter().enumerate() {
                    let d = (x.data()[base + j] - x_pa[base + j]).abs() as f64;
                    if m > 0.5 {
                        sum_in += d;
                        n_in += 1;
                    } else {
                        sum_out += d;
                        n_out += 1;
                    }
                }
            }
            if n_in > 0 && n_out > 0 {
                inside += sum_in / n_in as f64;
                outside += sum_out / n_out as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyFold { fold });
    }
    let (inside, outside) = (inside / n as f64, outside / n as f64);
    Ok(ResidualLocalization { inside, outside, ratio: inside / outside, n })
}
