//! Dataset manifests: one JSON header line followed by one JSON object per example.
//!
//! Paths inside a manifest are relative to the directory holding the manifest file.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::brats::BratsSliceSpec;
use crate::clutter::ClutterSpec;
use crate::error::{io_err, Error, Result};
use crate::image::{load_image, load_mask};
use crate::seed::derive_seed;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
const LABEL_STREAM: u64 = 0x6c61_6265_6c73;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fold {
    Train,
    Valid,
    Test,
}

impl Fold {
    pub const ALL: [Fold; 3] = [Fold::Train, Fold::Valid, Fold::Test];

    pub fn name(self) -> &'static str {
        match self {
            Fold::Train => "train",
            Fold::Valid => "valid",
            Fold::Test => "test",
        }
    }

    pub(crate) fn tag(self) -> u64 {
        match self {
            Fold::Train => 0,
            Fold::Valid => 1,
            Fold::Test => 2,
        }
    }
}

impl fmt::Display for Fold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Fold::Train),
            "valid" | "val" | "validation" => Ok(Fold::Valid),
            "test" => Ok(Fold::Test),
            _ => Err(Error::Spec(format!("unknown fold {s:?}"))),
        }
    }
}

/// Presence (target visible) or absence domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    P,
    A,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    pub domain: Domain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digit_class: Option<u8>,
    pub labeled: bool,
    pub fold: Fold,
    /// Number of clutter crops placed, for generated digit benchmarks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clutter: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    ClutteredDigits { folds: Vec<ClutterSpec> },
    BratsHalfSlices { spec: BratsSliceSpec },
}

/// How the labeled subset was drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSelection {
    pub fraction: f64,
    pub class_filter: Option<u8>,
    pub seed: u64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format_version: u32,
    pub master_seed: u64,
    pub source: String,
    pub generator: GeneratorSpec,
    #[serde(default)]
    pub labeled: Option<LabelSelection>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: ManifestHeader,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<ExampleRecord>,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        let json_err = |line, source| Error::Json {
            path: path.to_path_buf(),
            line,
            source,
        };
        let header = serde_json::to_string(&HeaderLine {
            header: self.header.clone(),
        })
        .map_err(|e| json_err(1, e))?;
        writeln!(out, "{header}").map_err(io_err(path))?;
        for (i, r) in self.records.iter().enumerate() {
            let line = serde_json::to_string(r).map_err(|e| json_err(i + 2, e))?;
            writeln!(out, "{line}").map_err(io_err(path))?;
        }
        out.flush().map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut lines = BufReader::new(file).lines();
        let json_err = |line, source| Error::Json {
            path: path.to_path_buf(),
            line,
            source,
        };
        let first = lines
            .next()
            .transpose()
            .map_err(io_err(path))?
            .ok_or_else(|| crate::error::format_err(path, "empty manifest"))?;
        let header: HeaderLine = serde_json::from_str(&first).map_err(|e| json_err(1, e))?;
        if header.header.format_version != MANIFEST_VERSION {
            return Err(crate::error::format_err(
                path,
                format!(
                    "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                    header.header.format_version
                ),
            ));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| json_err(i + 2, e))?);
        }
        Ok(Self {
            header: header.header,
            records,
        })
    }

    pub fn select<'a>(
        &'a self,
        fold: Fold,
        domain: Domain,
    ) -> impl Iterator<Item = &'a ExampleRecord> + 'a {
        self.records
            .iter()
            .filter(move |r| r.fold == fold && r.domain == domain)
    }

    pub fn count(&self, fold: Fold, domain: Domain) -> usize {
        self.select(fold, domain).count()
    }

    pub fn n_labeled(&self) -> usize {
        self.records.iter().filter(|r| r.labeled).count()
    }
}

/// Marks `round(fraction · |train P|)` training presence examples as labeled,
/// drawn uniformly from those matching `class_filter` (all, when absent).
pub fn select_labeled_subset(
    manifest: &DatasetManifest,
    fraction: f64,
    class_filter: Option<u8>,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Spec(format!("labeled fraction {fraction} outside [0, 1]")));
    }
    let n_train_p = manifest.count(Fold::Train, Domain::P);
    let requested = (fraction * n_train_p as f64).round() as usize;
    let eligible: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| {
            r.fold == Fold::Train
                && r.domain == Domain::P
                && r.mask_path.is_some()
                && class_filter.is_none_or(|c| r.digit_class == Some(c))
        })
        .map(|(i, _)| i)
        .collect();
    if eligible.len() < requested {
        return Err(Error::LabelDeficit {
            requested,
            eligible: eligible.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, LABEL_STREAM]));
    let chosen: HashSet<usize> = rand::seq::index::sample(&mut rng, eligible.len(), requested)
        .into_iter()
        .map(|k| eligible[k])
        .collect();

    let mut out = manifest.clone();
    for (i, r) in out.records.iter_mut().enumerate() {
        r.labeled = chosen.contains(&i);
    }
    out.header.labeled = Some(LabelSelection {
        fraction,
        class_filter,
        seed,
        count: requested,
    });
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub n_records: usize,
    pub n_labeled: usize,
    pub problems: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Checks manifest invariants and, when `root` is given, the files on disk:
/// existence, consistent image sizes, mask/image agreement and nonempty masks.
pub fn validate(manifest: &DatasetManifest, root: Option<&Path>) -> ValidationReport {
    let mut problems = Vec::new();
    let mut seen = HashSet::new();
    let mut dims: Option<(usize, usize, usize)> = None;
    let clutter_by_fold: Option<Vec<(Fold, u32)>> = match &manifest.header.generator {
        GeneratorSpec::ClutteredDigits { folds } => {
            Some(folds.iter().map(|s| (s.fold, s.n_clutter)).collect())
        }
        GeneratorSpec::BratsHalfSlices { .. } => None,
    };
    let filter = manifest.header.labeled.as_ref().and_then(|l| l.class_filter);

    for (i, r) in manifest.records.iter().enumerate() {
        let at = format!("record {} ({})", i + 1, r.image_path.display());
        if !seen.insert(&r.image_path) {
            problems.push(format!("{at}: duplicate image path"));
        }
        match r.domain {
            Domain::A => {
                if r.mask_path.is_some() {
                    problems.push(format!("{at}: absence example has a mask"));
                }
                if r.digit_class.is_some() {
                    problems.push(format!("{at}: absence example has a digit class"));
                }
                if r.labeled {
                    problems.push(format!("{at}: absence example is labeled"));
                }
            }
            Domain::P => {
                if r.mask_path.is_none() {
                    problems.push(format!("{at}: presence example has no mask"));
                }
            }
        }
        if r.labeled && r.fold != Fold::Train {
            problems.push(format!("{at}: labeled example outside the training fold"));
        }
        if r.labeled {
            if let Some(c) = filter {
                if r.digit_class != Some(c) {
                    problems.push(format!("{at}: labeled example is not class {c}"));
                }
            }
        }
        if let Some(expected) = clutter_by_fold
            .as_ref()
            .and_then(|v| v.iter().find(|(f, _)| *f == r.fold).map(|&(_, n)| n))
        {
            if r.clutter != Some(expected) {
                problems.push(format!("{at}: clutter count {:?}, expected {expected}", r.clutter));
            }
        }

        let Some(root) = root else { continue };
        match load_image(&root.join(&r.image_path)) {
            Ok(img) => {
                let d = (img.channels, img.height, img.width);
                match dims {
                    None => dims = Some(d),
                    Some(prev) if prev != d => {
                        problems.push(format!("{at}: image shape {d:?} differs from {prev:?}"))
                    }
                    _ => {}
                }
                if let Some(mp) = &r.mask_path {
                    match load_mask(&root.join(mp)) {
                        Ok(m) if (m.height, m.width) != (img.height, img.width) => problems.push(
                            format!("{at}: mask is {}×{}, image {}×{}", m.height, m.width, img.height, img.width),
                        ),
                        Ok(m) if r.domain == Domain::P && !m.data.iter().any(|&v| v > 0.0) => {
                            problems.push(format!("{at}: mask is empty"))
                        }
                        Ok(_) => {}
                        Err(e) => problems.push(format!("{at}: {e}")),
                    }
                }
            }
            Err(e) => problems.push(format!("{at}: {e}")),
        }
    }

    let n_labeled = manifest.n_labeled();
    if let Some(sel) = &manifest.header.labeled {
        if sel.count != n_labeled {
            problems.push(format!(
                "header records {} labeled examples, records mark {n_labeled}",
                sel.count
            ));
        }
    }
    ValidationReport {
        n_records: manifest.records.len(),
        n_labeled,
        problems,
    }
}
