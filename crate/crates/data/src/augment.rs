//! Random geometric and intensity augmentation for images with optional masks.
//!
//! One draw yields a rotation, zoom, intensity scale, optional flips and a
//! smooth displacement field interpolated from a coarse grid of control points.
//! The image is resampled bilinearly, the mask with nearest neighbour, and
//! samples falling outside the frame are taken from the mirrored image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub max_rotation_deg: f32,
    pub max_zoom_frac: f32,
    pub max_intensity_shift_frac: f32,
    pub hflip: bool,
    pub vflip: bool,
    /// Control points per axis of the displacement grid.
    pub spline_grid: usize,
    /// Standard deviation of control-point displacements, in pixels.
    pub spline_sigma: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 3.0,
            max_zoom_frac: 0.1,
            max_intensity_shift_frac: 0.1,
            hflip: true,
            vflip: true,
            spline_grid: 3,
            spline_sigma: 5.0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            max_rotation_deg: 0.0,
            max_zoom_frac: 0.0,
            max_intensity_shift_frac: 0.0,
            hflip: false,
            vflip: false,
            spline_grid: 3,
            spline_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mags = [
            self.max_rotation_deg,
            self.max_zoom_frac,
            self.max_intensity_shift_frac,
            self.spline_sigma,
        ];
        if mags.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::Spec("augmentation magnitudes must be finite and nonnegative".into()));
        }
        if self.max_zoom_frac >= 1.0 {
            return Err(Error::Spec("zoom fraction must stay below 1".into()));
        }
        if self.spline_grid < 2 {
            return Err(Error::Spec("displacement grid needs at least 2 points per axis".into()));
        }
        Ok(())
    }
}

/// One sampled transform.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: f32,
    pub zoom: f32,
    pub intensity: f32,
    pub hflip: bool,
    pub vflip: bool,
    pub grid: usize,
    /// Row-major `(dy, dx)` displacement of each control point.
    pub displacements: Vec<(f32, f32)>,
}

fn symmetric(rng: &mut impl Rng, max: f32) -> f32 {
    if max > 0.0 {
        rng.random_range(-max..=max)
    } else {
        0.0
    }
}

impl AugmentParams {
    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let rotation_deg = symmetric(rng, cfg.max_rotation_deg);
        let zoom = 1.0 + symmetric(rng, cfg.max_zoom_frac);
        let intensity = 1.0 + symmetric(rng, cfg.max_intensity_shift_frac);
        let hflip = cfg.hflip && rng.random_bool(0.5);
        let vflip = cfg.vflip && rng.random_bool(0.5);
        let n = cfg.spline_grid * cfg.spline_grid;
        let displacements = if cfg.spline_sigma > 0.0 {
            let normal = Normal::new(0.0, cfg.spline_sigma).expect("validated sigma");
            (0..n).map(|_| (normal.sample(rng), normal.sample(rng))).collect()
        } else {
            vec![(0.0, 0.0); n]
        };
        Self {
            rotation_deg,
            zoom,
            intensity,
            hflip,
            vflip,
            grid: cfg.spline_grid,
            displacements,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0
            && self.zoom == 1.0
            && self.intensity == 1.0
            && !self.hflip
            && !self.vflip
            && self.displacements.iter().all(|&(dy, dx)| dy == 0.0 && dx == 0.0)
    }

    /// Source coordinates `(y, x)` sampled for every output pixel.
    fn source_map(&self, height: usize, width: usize) -> Vec<(f32, f32)> {
        let (cy, cx) = ((height as f32 - 1.0) / 2.0, (width as f32 - 1.0) / 2.0);
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let wy: Vec<Vec<f32>> = (0..height).map(|y| basis(self.grid, unit(y, height))).collect();
        let wx: Vec<Vec<f32>> = (0..width).map(|x| basis(self.grid, unit(x, width))).collect();
        let mut map = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (mut dy, mut dx) = (0.0, 0.0);
                for (i, &a) in wy[y].iter().enumerate() {
                    for (j, &b) in wx[x].iter().enumerate() {
                        let (py, px) = self.displacements[i * self.grid + j];
                        dy += a * b * py;
                        dx += a * b * px;
                    }
                }
                let mut qy = y as f32 - cy;
                let mut qx = x as f32 - cx;
                if self.vflip {
                    qy = -qy;
                }
                if self.hflip {
                    qx = -qx;
                }
                let ry = sin * qx + cos * qy;
                let rx = cos * qx - sin * qy;
                map.push((ry / self.zoom + cy + dy, rx / self.zoom + cx + dx));
            }
        }
        map
    }

    pub fn apply(&self, image: &Image, mask: Option<&Image>) -> (Image, Option<Image>) {
        if let Some(m) = mask {
            assert_eq!((m.height, m.width), (image.height, image.width), "mask and image dims differ");
        }
        if self.is_identity() {
            return (image.clone(), mask.cloned());
        }
        let (h, w) = (image.height, image.width);
        let map = self.source_map(h, w);
        let mut out = Image::zeros(image.channels, h, w);
        for c in 0..image.channels {
            let src = image.plane(c);
            for (o, &(sy, sx)) in out.plane_mut(c).iter_mut().zip(&map) {
                *o = bilinear(src, h, w, sy, sx) * self.intensity;
            }
        }
        let mask = mask.map(|m| {
            let mut warped = Image::zeros(m.channels, h, w);
            for c in 0..m.channels {
                let src = m.plane(c);
                for (o, &(sy, sx)) in warped.plane_mut(c).iter_mut().zip(&map) {
                    *o = src[nearest(sy, h) * w + nearest(sx, w)];
                }
            }
            warped
        });
        (out, mask)
    }
}

fn unit(i: usize, n: usize) -> f32 {
    if n > 1 {
        i as f32 / (n - 1) as f32
    } else {
        0.0
    }
}

/// Interpolation weights of the control points at `t ∈ [0, 1]`: the
/// interpolating polynomial through equally spaced nodes, which for three
/// nodes is the cubic spline with not-a-knot ends.
fn basis(grid: usize, t: f32) -> Vec<f32> {
    let node = |k: usize| k as f32 / (grid - 1) as f32;
    (0..grid)
        .map(|k| {
            (0..grid)
                .filter(|&m| m != k)
                .map(|m| (t - node(m)) / (node(k) - node(m)))
                .product()
        })
        .collect()
}

/// Mirrors a continuous coordinate into `[-0.5, n - 0.5]` (edge pixels repeated once).
fn reflect(c: f32, n: usize) -> f32 {
    let period = 2.0 * n as f32;
    let mut t = (c + 0.5).rem_euclid(period);
    if t > n as f32 {
        t = period - t;
    }
    t - 0.5
}

fn nearest(c: f32, n: usize) -> usize {
    (reflect(c, n).round().max(0.0) as usize).min(n - 1)
}

fn bilinear(src: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y = reflect(y, h).clamp(0.0, (h - 1) as f32);
    let x = reflect(x, w).clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
    let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Samples a transform from `seed` and applies it to the image and mask.
pub fn augment(
    image: &Image,
    mask: Option<&Image>,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(Image, Option<Image>)> {
    cfg.validate()?;
    let params = AugmentParams::sample(cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(params.apply(image, mask))
}
