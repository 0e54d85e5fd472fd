//! Source digits: 28×28 grayscale sprites with class labels, partitioned into folds.
//!
//! Real MNIST is read from IDX files (optionally gzipped). When no files are
//! available a procedural source renders jittered stroke glyphs with the same
//! geometry: ink inside a roughly 20×20 box centred on a black 28×28 canvas.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{format_err, io_err, Error, Result};
use crate::manifest::Fold;
use crate::seed::derive_seed;

pub const DIGIT_SIDE: usize = 28;
const DIGIT_PIXELS: usize = DIGIT_SIDE * DIGIT_SIDE;

/// A flat collection of 28×28 sprites.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DigitSet {
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl DigitSet {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != labels.len() * DIGIT_PIXELS {
            return Err(Error::Spec(format!(
                "{} pixel bytes do not match {} labels of {DIGIT_SIDE}×{DIGIT_SIDE}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::Spec(format!("digit label {bad} outside 0..=9")));
        }
        Ok(Self { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sprite(&self, i: usize) -> &[u8] {
        &self.pixels[i * DIGIT_PIXELS..(i + 1) * DIGIT_PIXELS]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            pixels: self.pixels[range.start * DIGIT_PIXELS..range.end * DIGIT_PIXELS].to_vec(),
            labels: self.labels[range].to_vec(),
        }
    }
}

/// Source digits already split into train, validation and test folds.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitFolds {
    pub train: DigitSet,
    pub valid: DigitSet,
    pub test: DigitSet,
    /// Human-readable provenance recorded in dataset manifests.
    pub description: String,
}

impl DigitFolds {
    pub fn fold(&self, fold: Fold) -> &DigitSet {
        match fold {
            Fold::Train => &self.train,
            Fold::Valid => &self.valid,
            Fold::Test => &self.test,
        }
    }

    /// Reads the four standard MNIST IDX files from `dir` (plain or `.gz`).
    /// The last `n_valid` training digits become the validation fold.
    pub fn from_idx_dir(dir: &Path, n_valid: usize) -> Result<Self> {
        let train_full = read_idx_pair(dir, "train")?;
        let test = read_idx_pair(dir, "t10k")?;
        if n_valid >= train_full.len() {
            return Err(Error::Spec(format!(
                "validation size {n_valid} leaves no training digits out of {}",
                train_full.len()
            )));
        }
        let cut = train_full.len() - n_valid;
        Ok(Self {
            train: train_full.slice(0..cut),
            valid: train_full.slice(cut..train_full.len()),
            test,
            description: format!("mnist-idx:{}", dir.display()),
        })
    }

    /// Deterministic procedural digits with balanced classes.
    pub fn procedural(n_train: usize, n_valid: usize, n_test: usize, seed: u64) -> Self {
        let make = |fold: Fold, n: usize| {
            let mut pixels = Vec::with_capacity(n * DIGIT_PIXELS);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x6469_6769, fold.tag(), i as u64]));
                let class = (i % 10) as u8;
                pixels.extend_from_slice(&render_glyph(class, &mut rng));
                labels.push(class);
            }
            DigitSet { pixels, labels }
        };
        Self {
            train: make(Fold::Train, n_train),
            valid: make(Fold::Valid, n_valid),
            test: make(Fold::Test, n_test),
            description: format!("procedural:seed={seed}"),
        }
    }
}

fn open_maybe_gz(dir: &Path, stem: &str) -> Result<(std::path::PathBuf, Vec<u8>)> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let path = dir.join(&name);
        if !path.exists() {
            continue;
        }
        let mut raw = Vec::new();
        File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut raw))
            .map_err(io_err(&path))?;
        if raw.starts_with(&[0x1f, 0x8b]) {
            let mut out = Vec::new();
            GzDecoder::new(&raw[..])
                .read_to_end(&mut out)
                .map_err(io_err(&path))?;
            raw = out;
        }
        return Ok((path, raw));
    }
    Err(Error::Io {
        path: dir.join(stem),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found"),
    })
}

fn read_idx_pair(dir: &Path, prefix: &str) -> Result<DigitSet> {
    let (ipath, images) = open_maybe_gz(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let (lpath, labels) = open_maybe_gz(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let (idims, ipix) = parse_idx(&ipath, &images)?;
    let (ldims, lab) = parse_idx(&lpath, &labels)?;
    if idims.len() != 3 || idims[1] != DIGIT_SIDE || idims[2] != DIGIT_SIDE {
        return Err(format_err(&ipath, format!("expected N×28×28 images, found {idims:?}")));
    }
    if ldims.len() != 1 || ldims[0] != idims[0] {
        return Err(format_err(&lpath, format!("label count {ldims:?} does not match {} images", idims[0])));
    }
    DigitSet::new(ipix.to_vec(), lab.to_vec()).map_err(|e| format_err(&lpath, e.to_string()))
}

/// Parses an unsigned-byte IDX payload, returning its dimensions and data.
pub fn parse_idx<'a>(path: &Path, bytes: &'a [u8]) -> Result<(Vec<usize>, &'a [u8])> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(path, "not an IDX file"));
    }
    if bytes[2] != 0x08 {
        return Err(format_err(path, format!("unsupported IDX element type {:#04x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(format_err(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|d| {
            let o = 4 + 4 * d;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() != header + count {
        return Err(format_err(
            path,
            format!("IDX payload has {} bytes, dimensions need {count}", bytes.len() - header),
        ));
    }
    Ok((dims, &bytes[header..]))
}

type Stroke = Vec<(f32, f32)>;

fn arc(cx: f32, cy: f32, rx: f32, ry: f32, from_deg: f32, to_deg: f32) -> Stroke {
    let steps = 14;
    (0..=steps)
        .map(|i| {
            let t = (from_deg + (to_deg - from_deg) * i as f32 / steps as f32).to_radians();
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Glyph skeletons in a unit box, y pointing down, angles clockwise from +x.
fn glyph_strokes(class: u8) -> Vec<Stroke> {
    match class {
        0 => vec![arc(0.5, 0.5, 0.28, 0.42, 0.0, 360.0)],
        1 => vec![vec![(0.35, 0.25), (0.55, 0.08), (0.55, 0.92)]],
        2 => {
            let mut top = arc(0.5, 0.32, 0.28, 0.24, 190.0, 380.0);
            top.extend([(0.22, 0.9), (0.82, 0.9)]);
            vec![top]
        }
        3 => vec![
            arc(0.48, 0.3, 0.26, 0.21, 200.0, 450.0),
            arc(0.48, 0.7, 0.3, 0.21, 270.0, 520.0),
        ],
        4 => vec![vec![(0.62, 0.92), (0.62, 0.08), (0.18, 0.65), (0.86, 0.65)]],
        5 => {
            let mut s = vec![(0.78, 0.1), (0.32, 0.1), (0.27, 0.46)];
            s.extend(arc(0.5, 0.66, 0.3, 0.25, 220.0, 500.0));
            vec![s]
        }
        6 => {
            let mut s = arc(0.72, 0.5, 0.42, 0.42, 250.0, 180.0);
            s.extend(arc(0.5, 0.7, 0.22, 0.2, 180.0, 540.0));
            vec![s]
        }
        7 => vec![vec![(0.18, 0.1), (0.82, 0.1), (0.42, 0.92)]],
        8 => vec![
            arc(0.5, 0.28, 0.22, 0.19, 0.0, 360.0),
            arc(0.5, 0.7, 0.27, 0.22, 0.0, 360.0),
        ],
        _ => {
            let mut s = arc(0.48, 0.32, 0.25, 0.22, 0.0, 360.0);
            s.extend([(0.72, 0.4), (0.6, 0.92)]);
            vec![s]
        }
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders one jittered glyph into a 28×28 byte sprite.
pub fn render_glyph(class: u8, rng: &mut impl Rng) -> Vec<u8> {
    let rot = rng.random_range(-12.0f32..12.0).to_radians();
    let shear = rng.random_range(-0.25f32..0.25);
    let sx = rng.random_range(0.8f32..1.05) * 19.0;
    let sy = rng.random_range(0.9f32..1.05) * 19.0;
    let tx = rng.random_range(-1.5f32..1.5) + 14.0;
    let ty = rng.random_range(-1.5f32..1.5) + 14.0;
    let half_width = rng.random_range(0.9f32..1.8);
    let (sin, cos) = rot.sin_cos();

    let strokes: Vec<Stroke> = glyph_strokes(class)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(u, v)| {
                    let u = u + rng.random_range(-0.03f32..0.03) - 0.5;
                    let v = v + rng.random_range(-0.03f32..0.03) - 0.5;
                    let (x, y) = ((u + shear * v) * sx, v * sy);
                    (cos * x - sin * y + tx, sin * x + cos * y + ty)
                })
                .collect()
        })
        .collect();

    let mut out = vec![0u8; DIGIT_PIXELS];
    for y in 0..DIGIT_SIDE {
        for x in 0..DIGIT_SIDE {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            let d = strokes
                .iter()
                .flat_map(|s| s.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                .fold(f32::INFINITY, f32::min);
            let coverage = (half_width + 0.5 - d).clamp(0.0, 1.0);
            out[y * DIGIT_SIDE + x] = (coverage * 255.0).round() as u8;
        }
    }
    out
}
