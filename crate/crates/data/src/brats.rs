//! Multi-sequence MRI volumes to normalized 2-D half-slices.
//!
//! Each case directory holds four co-registered sequences and a lesion label
//! volume. Volumes are standardized over brain voxels, every axial slice is cut
//! at the left/right midline, and half-slices with enough brain are routed to
//! the presence domain (enough lesion) or the absence domain (no lesion).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::image::{write_half_slice, write_mask, Image};
use crate::manifest::{
    DatasetManifest, Domain, ExampleRecord, Fold, GeneratorSpec, ManifestHeader, MANIFEST_FILE,
    MANIFEST_VERSION,
};
use crate::nifti::{read_nifti, Volume};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sequence {
    T1,
    T2,
    T1c,
    Flair,
}

/// File-name suffixes appended to the case directory name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BratsNaming {
    pub t1: String,
    pub t2: String,
    pub t1c: String,
    pub flair: String,
    pub label: String,
}

impl Default for BratsNaming {
    fn default() -> Self {
        Self {
            t1: "_t1.nii.gz".into(),
            t2: "_t2.nii.gz".into(),
            t1c: "_t1ce.nii.gz".into(),
            flair: "_flair.nii.gz".into(),
            label: "_seg.nii.gz".into(),
        }
    }
}

impl BratsNaming {
    fn suffix(&self, seq: Sequence) -> &str {
        match seq {
            Sequence::T1 => &self.t1,
            Sequence::T2 => &self.t2,
            Sequence::T1c => &self.t1c,
            Sequence::Flair => &self.flair,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BratsSliceSpec {
    pub min_brain_frac: f64,
    pub min_lesion_frac_of_brain: f64,
    pub hemisphere_split: bool,
    pub channels: Vec<Sequence>,
    pub naming: BratsNaming,
    /// Case-level split into train, validation and test.
    pub fold_fractions: [f64; 3],
}

impl Default for BratsSliceSpec {
    fn default() -> Self {
        Self {
            min_brain_frac: 0.25,
            min_lesion_frac_of_brain: 0.01,
            hemisphere_split: true,
            channels: vec![Sequence::T1, Sequence::T2, Sequence::T1c, Sequence::Flair],
            naming: BratsNaming::default(),
            fold_fractions: [0.8, 0.1, 0.1],
        }
    }
}

impl BratsSliceSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.min_brain_frac) || !unit.contains(&self.min_lesion_frac_of_brain) {
            return Err(Error::Spec("slice thresholds must lie in [0, 1]".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::Spec("at least one sequence is required".into()));
        }
        let total: f64 = self.fold_fractions.iter().sum();
        if self.fold_fractions.iter().any(|f| *f < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Spec(format!(
                "fold fractions {:?} must be nonnegative and sum to 1",
                self.fold_fractions
            )));
        }
        Ok(())
    }

    /// Routes a half-slice by its pixel counts; `None` means discarded.
    pub fn classify(&self, brain_px: usize, lesion_px: usize, total_px: usize) -> Option<Domain> {
        if total_px == 0 || (brain_px as f64) < self.min_brain_frac * total_px as f64 {
            return None;
        }
        if lesion_px == 0 {
            Some(Domain::A)
        } else if lesion_px as f64 >= self.min_lesion_frac_of_brain * brain_px as f64 {
            Some(Domain::P)
        } else {
            None
        }
    }
}

/// Mean and standard deviation of a channel over brain voxels after standardization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Standardizes each channel over `brain` voxels and zeroes everything else.
/// Returns the post-normalization statistics per channel.
pub fn normalize_brain(channels: &mut [Volume], brain: &[bool]) -> std::result::Result<Vec<ChannelStats>, String> {
    let n = brain.iter().filter(|&&b| b).count();
    if n < 2 {
        return Err("volume has fewer than two brain voxels".into());
    }
    let mut stats = Vec::with_capacity(channels.len());
    for (c, vol) in channels.iter_mut().enumerate() {
        let values = || vol.data.iter().zip(brain).filter(|(_, &b)| b).map(|(&v, _)| v as f64);
        let mean = values().sum::<f64>() / n as f64;
        let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(format!("channel {c} is constant over the brain"));
        }
        for (v, &b) in vol.data.iter_mut().zip(brain) {
            *v = if b { ((*v as f64 - mean) / std) as f32 } else { 0.0 };
        }
        let values = vol.data.iter().zip(brain).filter(|(_, &b)| b).map(|(&v, _)| v as f64);
        let (s, s2) = values.fold((0.0, 0.0), |(s, s2), v| (s + v, s2 + v * v));
        let m = s / n as f64;
        stats.push(ChannelStats {
            mean: m,
            std: (s2 / n as f64 - m * m).max(0.0).sqrt(),
        });
    }
    Ok(stats)
}

fn sequence_path(case_dir: &Path, case: &str, suffix: &str) -> Option<PathBuf> {
    let primary = case_dir.join(format!("{case}{suffix}"));
    if primary.exists() {
        return Some(primary);
    }
    let alt = match suffix.strip_suffix(".gz") {
        Some(plain) => case_dir.join(format!("{case}{plain}")),
        None => case_dir.join(format!("{case}{suffix}.gz")),
    };
    alt.exists().then_some(alt)
}

struct CaseVolumes {
    channels: Vec<Volume>,
    label: Volume,
}

fn load_case(case_dir: &Path, case: &str, spec: &BratsSliceSpec) -> std::result::Result<CaseVolumes, String> {
    let load = |suffix: &str| -> std::result::Result<Volume, String> {
        let path = sequence_path(case_dir, case, suffix).ok_or_else(|| format!("missing sequence {case}{suffix}"))?;
        read_nifti(&path).map_err(|e| e.to_string())
    };
    let channels = spec
        .channels
        .iter()
        .map(|&s| load(spec.naming.suffix(s)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let label = load(&spec.naming.label)?;
    let dims = channels[0].dims;
    if let Some(bad) = channels.iter().chain([&label]).find(|v| v.dims != dims) {
        return Err(format!("shape {:?} disagrees with {:?}", bad.dims, dims));
    }
    Ok(CaseVolumes { channels, label })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BratsOutput {
    pub manifest: DatasetManifest,
    /// `(case, reason)` for every volume that could not be processed.
    pub skipped: Vec<(String, String)>,
    /// Post-normalization statistics per processed case.
    pub stats: Vec<(String, Vec<ChannelStats>)>,
}

fn assign_folds(cases: &[String], fractions: [f64; 3], seed: u64) -> Vec<Fold> {
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x62_7261_7473])));
    let n = cases.len() as f64;
    let n_train = (fractions[0] * n).round() as usize;
    let n_valid = ((fractions[0] + fractions[1]) * n).round() as usize - n_train;
    let mut folds = vec![Fold::Test; cases.len()];
    for (rank, &i) in order.iter().enumerate() {
        folds[i] = if rank < n_train {
            Fold::Train
        } else if rank < n_train + n_valid {
            Fold::Valid
        } else {
            Fold::Test
        };
    }
    folds
}

/// Processes every case directory under `volume_dir` into `out_dir`.
pub fn brats_to_half_slices(
    volume_dir: &Path,
    spec: &BratsSliceSpec,
    master_seed: u64,
    out_dir: &Path,
) -> Result<BratsOutput> {
    spec.validate()?;
    let mut cases: Vec<String> = fs::read_dir(volume_dir)
        .map_err(io_err(volume_dir))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .collect();
    cases.sort();
    let folds = assign_folds(&cases, spec.fold_fractions, master_seed);

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut stats = Vec::new();
    for (case, &fold) in cases.iter().zip(&folds) {
        let mut volumes = match load_case(&volume_dir.join(case), case, spec) {
            Ok(v) => v,
            Err(reason) => {
                log::warn!("skipping volume {case}: {reason}");
                skipped.push((case.clone(), reason));
                continue;
            }
        };
        let brain: Vec<bool> = (0..volumes.label.data.len())
            .map(|i| volumes.channels.iter().any(|v| v.data[i] != 0.0))
            .collect();
        match normalize_brain(&mut volumes.channels, &brain) {
            Ok(s) => stats.push((case.clone(), s)),
            Err(reason) => {
                log::warn!("skipping volume {case}: {reason}");
                skipped.push((case.clone(), reason));
                continue;
            }
        }
        records.extend(write_case_slices(case, fold, &volumes, &brain, spec, out_dir)?);
    }

    let manifest = DatasetManifest {
        header: ManifestHeader {
            format_version: MANIFEST_VERSION,
            master_seed,
            source: format!("nifti:{}", volume_dir.display()),
            generator: GeneratorSpec::BratsHalfSlices { spec: spec.clone() },
            labeled: None,
        },
        records,
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(BratsOutput {
        manifest,
        skipped,
        stats,
    })
}

fn write_case_slices(
    case: &str,
    fold: Fold,
    volumes: &CaseVolumes,
    brain: &[bool],
    spec: &BratsSliceSpec,
    out_dir: &Path,
) -> Result<Vec<ExampleRecord>> {
    let [nx, ny, nz] = volumes.label.dims;
    let halves: Vec<(&str, usize, usize)> = if spec.hemisphere_split {
        vec![("l", 0, nx / 2), ("r", nx / 2, nx - nx / 2)]
    } else {
        vec![("w", 0, nx)]
    };
    let mut records = Vec::new();
    for z in 0..nz {
        for &(side, x0, w) in &halves {
            let index = |x: usize, y: usize| (x0 + x) + nx * (y + ny * z);
            let mut brain_px = 0;
            let mut lesion = vec![false; ny * w];
            for y in 0..ny {
                for x in 0..w {
                    let i = index(x, y);
                    brain_px += brain[i] as usize;
                    lesion[y * w + x] = volumes.label.data[i] > 0.0;
                }
            }
            let lesion_px = lesion.iter().filter(|&&l| l).count();
            let Some(domain) = spec.classify(brain_px, lesion_px, ny * w) else {
                continue;
            };
            let mut image = Image::zeros(volumes.channels.len(), ny, w);
            for (c, vol) in volumes.channels.iter().enumerate() {
                let plane = image.plane_mut(c);
                for y in 0..ny {
                    for x in 0..w {
                        plane[y * w + x] = vol.data[index(x, y)];
                    }
                }
            }
            let sub = match domain {
                Domain::P => "p",
                Domain::A => "a",
            };
            let dir = out_dir.join(format!("{fold}/{sub}"));
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let stem = format!("{fold}/{sub}/{case}_z{z:03}_{side}");
            let image_path = format!("{stem}.bin");
            write_half_slice(&out_dir.join(&image_path), &image)?;
            let mask_path = if domain == Domain::P {
                let p = format!("{stem}_mask.png");
                write_mask(&out_dir.join(&p), w, ny, &lesion)?;
                Some(PathBuf::from(p))
            } else {
                None
            };
            records.push(ExampleRecord {
                image_path: image_path.into(),
                mask_path,
                domain,
                digit_class: None,
                labeled: false,
                fold,
                clutter: None,
            });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_routing_rules() {
        let spec = BratsSliceSpec::default();
        let total = 240 * 120;
        assert_eq!(spec.classify(total * 30 / 100, 0, total), Some(Domain::A));
        let brain = total * 40 / 100;
        assert_eq!(spec.classify(brain, brain * 2 / 100, total), Some(Domain::P));
        assert_eq!(spec.classify(total / 10, 0, total), None);
        assert_eq!(spec.classify(brain, brain / 200, total), None);
        assert_eq!(spec.classify(total / 4, 0, total), Some(Domain::A));
    }

    #[test]
    fn normalization_is_zero_mean_unit_std_over_brain() {
        let dims = [6, 5, 4];
        let n = 120;
        let brain: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
        let mut vols: Vec<Volume> = (0..2)
            .map(|c| {
                Volume::new(
                    dims,
                    (0..n)
                        .map(|i| if brain[i] { 100.0 + (c as f32 + 1.0) * ((i * 37 % 11) as f32) } else { 0.0 })
                        .collect(),
                )
            })
            .collect();
        let stats = normalize_brain(&mut vols, &brain).unwrap();
        for s in stats {
            assert!(s.mean.abs() < 1e-3 && (s.std - 1.0).abs() < 1e-3, "{s:?}");
        }
        assert!(vols[0].data.iter().zip(&brain).all(|(&v, &b)| b || v == 0.0));

        let mut flat = vec![Volume::new(dims, vec![3.0; n])];
        assert!(normalize_brain(&mut flat, &brain).is_err());
    }

    #[test]
    fn folds_split_by_case() {
        let cases: Vec<String> = (0..10).map(|i| format!("case{i}")).collect();
        let folds = assign_folds(&cases, [0.8, 0.1, 0.1], 7);
        let count = |f| folds.iter().filter(|&&g| g == f).count();
        assert_eq!((count(Fold::Train), count(Fold::Valid), count(Fold::Test)), (8, 1, 1));
        assert_eq!(folds, assign_folds(&cases, [0.8, 0.1, 0.1], 7));
    }
}
