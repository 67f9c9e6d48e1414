//! B-scan records, manifest ingestion and pixel normalization.
//!
//! Ground-truth labels on target-domain data are wrapped in an access
//! guard: training code paths must go through [`GuardedLabel::for_training`],
//! which fails on eval-only labels, so a label leak is a hard error rather
//! than a silent bug.

pub mod synth;

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::tensor::bilinear_resize;

/// Canonical B-scan shape `(rows, cols)` after ingestion.
pub const CANONICAL_SHAPE: (usize, usize) = (248, 384);

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest has no data rows: {0}")]
    EmptyDataset(PathBuf),
    #[error("invalid grade value '{0}'")]
    InvalidGrade(String),
    #[error("referenced image missing: {0}")]
    MissingImage(PathBuf),
    #[error("duplicate image id '{0}'")]
    DuplicateImageId(String),
    #[error("image is not single-channel grayscale: {0}")]
    NotGrayscale(PathBuf),
    #[error("source sample '{0}' has no grade")]
    MissingGrade(String),
    #[error("manifest mixes source and target rows")]
    MixedDomains,
    #[error("invalid domain value '{0}'")]
    InvalidDomain(String),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("eval-only label read outside evaluation mode (image '{0}')")]
    LabelLeakage(String),
    #[error("sample '{0}' is unlabeled")]
    UnlabeledSample(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

/// 3-class ordinal glaucoma grade.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradeLabel {
    Healthy = 0,
    Early = 1,
    Advanced = 2,
}

impl GradeLabel {
    pub const ALL: [GradeLabel; 3] = [GradeLabel::Healthy, GradeLabel::Early, GradeLabel::Advanced];

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Self::Healthy),
            1 => Some(Self::Early),
            2 => Some(Self::Advanced),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn one_hot<T: crate::scalar::Scalar>(self) -> [T; 3] {
        let mut v = [T::zero(); 3];
        v[self.index()] = T::one();
        v
    }
}

impl FromStr for GradeLabel {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "0" | "healthy" => Ok(Self::Healthy),
            "1" | "early" => Ok(Self::Early),
            "2" | "advanced" => Ok(Self::Advanced),
            other => Err(DatasetError::InvalidGrade(other.to_string())),
        }
    }
}

impl fmt::Display for GradeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Healthy => "healthy",
            Self::Early => "early",
            Self::Advanced => "advanced",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl FromStr for Domain {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "source" => Ok(Self::Source),
            "target" => Ok(Self::Target),
            other => Err(DatasetError::InvalidDomain(other.to_string())),
        }
    }
}

/// Context under which a label read happens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelAccess {
    Training,
    Evaluation,
}

/// A ground-truth label, optionally restricted to evaluation-time reads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardedLabel {
    grade: GradeLabel,
    eval_only: bool,
}

impl GuardedLabel {
    pub fn open(grade: GradeLabel) -> Self {
        Self {
            grade,
            eval_only: false,
        }
    }

    pub fn eval_only(grade: GradeLabel) -> Self {
        Self {
            grade,
            eval_only: true,
        }
    }

    pub fn is_eval_only(&self) -> bool {
        self.eval_only
    }

    pub fn read(&self, access: LabelAccess, image_id: &str) -> Result<GradeLabel, DatasetError> {
        if self.eval_only && access == LabelAccess::Training {
            return Err(DatasetError::LabelLeakage(image_id.to_string()));
        }
        Ok(self.grade)
    }

    /// Explicitly lift the guard (full-supervision reference runs only).
    pub fn unlocked(self) -> Self {
        Self {
            grade: self.grade,
            eval_only: false,
        }
    }
}

/// A single grayscale B-scan with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BScan {
    pub image_id: String,
    pub patient_id: String,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<Real>,
    pub domain: Domain,
}

impl BScan {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub scan: BScan,
    pub label: Option<GuardedLabel>,
}

impl Sample {
    pub fn training_label(&self) -> Result<GradeLabel, DatasetError> {
        match &self.label {
            None => Err(DatasetError::UnlabeledSample(self.scan.image_id.clone())),
            Some(l) => l.read(LabelAccess::Training, &self.scan.image_id),
        }
    }

    pub fn eval_label(&self) -> Result<GradeLabel, DatasetError> {
        match &self.label {
            None => Err(DatasetError::UnlabeledSample(self.scan.image_id.clone())),
            Some(l) => l.read(LabelAccess::Evaluation, &self.scan.image_id),
        }
    }
}

/// An ordered collection of samples from one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub domain: Domain,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, domain: Domain) -> Self {
        Self { samples, domain }
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// Distinct patient ids in first-appearance order.
    pub fn patient_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for s in &self.samples {
            if seen.insert(s.scan.patient_id.clone()) {
                out.push(s.scan.patient_id.clone());
            }
        }
        out
    }

    pub fn n_patients(&self) -> usize {
        self.patient_ids().len()
    }

    /// Samples belonging to the given patient set, in dataset order.
    pub fn subset_by_patients(&self, patients: &HashSet<String>) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .filter(|s| patients.contains(&s.scan.patient_id))
                .cloned()
                .collect(),
            domain: self.domain,
        }
    }

    /// Copy of the dataset with every label guard lifted.
    pub fn with_labels_unlocked(&self) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    scan: s.scan.clone(),
                    label: s.label.map(|l| l.unlocked()),
                })
                .collect(),
            domain: self.domain,
        }
    }
}

/// Scale an 8-bit single-channel image into `[0, 1]` and resample to the
/// target shape when its dimensions differ.
pub fn normalize_bscan(
    raw: &[u8],
    rows: usize,
    cols: usize,
    target: (usize, usize),
) -> Vec<Real> {
    assert_eq!(raw.len(), rows * cols, "raw image size mismatch");
    let scaled: Vec<Real> = raw.iter().map(|&v| v as Real / 255.0).collect();
    if (rows, cols) == target {
        scaled
    } else {
        bilinear_resize(&scaled, rows, cols, target.0, target.1)
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRow {
    image_path: String,
    patient_id: String,
    grade: String,
    domain: String,
}

/// Load a dataset from a CSV manifest, resampling every image to the
/// canonical shape.
pub fn load_manifest(path: &Path) -> Result<Dataset, DatasetError> {
    load_manifest_with_shape(path, CANONICAL_SHAPE)
}

/// Same as [`load_manifest`] with an explicit target shape (reduced-scale
/// desk runs).
pub fn load_manifest_with_shape(
    path: &Path,
    target: (usize, usize),
) -> Result<Dataset, DatasetError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::Reader::from_path(path)?;
    let mut samples = Vec::new();
    let mut domain: Option<Domain> = None;
    let mut seen_ids = HashSet::new();

    for row in reader.deserialize::<ManifestRow>() {
        let row = row?;
        let row_domain: Domain = row.domain.parse()?;
        match domain {
            None => domain = Some(row_domain),
            Some(d) if d != row_domain => return Err(DatasetError::MixedDomains),
            _ => {}
        }
        let image_path = base.join(&row.image_path);
        if !image_path.exists() {
            return Err(DatasetError::MissingImage(image_path));
        }
        let img = image::open(&image_path)?;
        let gray = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            _ => return Err(DatasetError::NotGrayscale(image_path)),
        };
        let (cols, rows) = (gray.width() as usize, gray.height() as usize);
        let pixels = normalize_bscan(gray.as_raw(), rows, cols, target);

        let image_id = Path::new(&row.image_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| row.image_path.clone());
        if !seen_ids.insert(image_id.clone()) {
            return Err(DatasetError::DuplicateImageId(image_id));
        }

        let grade = row.grade.trim();
        let label = if grade.is_empty() {
            if row_domain == Domain::Source {
                return Err(DatasetError::MissingGrade(image_id));
            }
            None
        } else {
            let g: GradeLabel = grade.parse()?;
            Some(match row_domain {
                Domain::Source => GuardedLabel::open(g),
                Domain::Target => GuardedLabel::eval_only(g),
            })
        };

        samples.push(Sample {
            scan: BScan {
                image_id,
                patient_id: row.patient_id,
                rows: target.0,
                cols: target.1,
                pixels,
                domain: row_domain,
            },
            label,
        });
    }

    let domain = domain.ok_or_else(|| DatasetError::EmptyDataset(path.to_path_buf()))?;
    Ok(Dataset { samples, domain })
}

/// Write `manifest.csv` plus one 8-bit grayscale PNG per sample under `dir`.
///
/// Reloading the written manifest yields an equal dataset as long as the
/// pixel values are exact multiples of 1/255 (which holds for anything
/// that was itself ingested from 8-bit images or the synthetic generator).
pub fn save_manifest(dataset: &Dataset, dir: &Path) -> Result<PathBuf, DatasetError> {
    std::fs::create_dir_all(dir)?;
    let manifest_path = dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest_path)?;
    for sample in &dataset.samples {
        let scan = &sample.scan;
        let file_name = format!("{}.png", scan.image_id);
        let buf: Vec<u8> = scan
            .pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img =
            image::GrayImage::from_raw(scan.cols as u32, scan.rows as u32, buf).expect("png size");
        img.save(dir.join(&file_name))?;
        let grade = match &sample.label {
            Some(l) => l.read(LabelAccess::Evaluation, &scan.image_id)?.index().to_string(),
            None => String::new(),
        };
        writer.serialize(ManifestRow {
            image_path: file_name,
            patient_id: scan.patient_id.clone(),
            grade,
            domain: match dataset.domain {
                Domain::Source => "source".into(),
                Domain::Target => "target".into(),
            },
        })?;
    }
    writer.flush()?;
    Ok(manifest_path)
}
