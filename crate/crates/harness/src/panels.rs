//! Image grids showing translations, residuals and segmentations.
//!
//! A presence grid has rows `x_P, x_PA, Δ_PA, y_seg`; an absence grid has
//! rows `x_A, x_AA, x_AP, x_APA`. Images map [-1, 1] to black..white,
//! residuals use a symmetric scale with zero at mid-gray, probabilities map
//! [0, 1] to black..white. Multi-channel inputs show their first channel.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use segtrans_autograd::{Graph, Tensor};
use segtrans_core::{sample_unique, Model, VariantKind};
use segtrans_data::image::write_gray_png;
use segtrans_data::Domain;

use crate::error::{Error, Result};

const GAP: usize = 2;

#[derive(Clone, Copy)]
enum Scale {
    Image,
    Signed(f32),
    Probability,
}

fn to_byte(v: f32, scale: Scale) -> u8 {
    let unit = match scale {
        Scale::Image => (v + 1.0) / 2.0,
        Scale::Signed(max) => 0.5 + 0.5 * v / max,
        Scale::Probability => v,
    };
    if unit.is_nan() {
        return 0;
    }
    (unit.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rows of `(n, c, h, w)` tensors rendered into a `4 × n` grid.
fn render_grid(rows: &[(Tensor<f32>, Scale)], out: &Path) -> Result<()> {
    let (n, _, h, w) = rows[0].0.dims4()?;
    let width = n * w + (n - 1) * GAP;
    let height = rows.len() * h + (rows.len() - 1) * GAP;
    let mut canvas = vec![0u8; width * height];
    for (r, (t, scale)) in rows.iter().enumerate() {
        let (tn, c, th, tw) = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::Config(format!("panel row {r} has shape {:?}", t.shape())));
        }
        for i in 0..n {
            let plane = &t.data()[i * c * h * w..i * c * h * w + h * w];
            for y in 0..h {
                for x in 0..w {
                    canvas[(r * (h + GAP) + y) * width + i * (w + GAP) + x] = to_byte(plane[y * w + x], *scale);
                }
            }
        }
    }
    write_gray_png(out, width, height, &canvas).map_err(Error::from)
}

fn signed_scale(t: &Tensor<f32>) -> Scale {
    let max = t.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    Scale::Signed(if max > 0.0 { max } else { 1.0 })
}

/// Renders the grid for `samples` of the given domain. `seed` fixes the
/// unique codes sampled for absence-to-presence translations.
pub fn emit_panels(model: &Model<f32>, samples: &Tensor<f32>, domain: Domain, seed: u64, out: &Path) -> Result<()> {
    if model.variant != VariantKind::Proposed {
        return Err(Error::Config(format!("panels need the proposed model, not {}", model.variant.name())));
    }
    let n = samples.dim(0);
    if n == 0 {
        return Err(Error::Config("no samples to render".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(samples.clone());
    let rows = match domain {
        Domain::P => {
            let all: Vec<usize> = (0..n).collect();
            let b = model.forward_presence(&mut g, x, &all)?;
            let delta = g.value(b.delta_pa).clone();
            let scale = signed_scale(&delta);
            vec![
                (samples.clone(), Scale::Image),
                (g.value(b.x_pa).clone(), Scale::Image),
                (delta, scale),
                (g.value(b.y_seg.expect("rows requested")).clone(), Scale::Probability),
            ]
        }
        Domain::A => {
            let u = sample_unique::<f32>(&model.latent_shape(n), &mut ChaCha8Rng::seed_from_u64(seed));
            let b = model.forward_absence(&mut g, x, u, true)?;
            vec![
                (samples.clone(), Scale::Image),
                (g.value(b.x_aa).clone(), Scale::Image),
                (g.value(b.x_ap).clone(), Scale::Image),
                (g.value(b.x_apa.expect("cycle requested")).clone(), Scale::Image),
            ]
        }
    };
    render_grid(&rows, out)
}
