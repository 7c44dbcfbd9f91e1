//! Dataset ingestion, preprocessing and box-to-grid supervision.
//!
//! Samples are stored fully preprocessed: three channels at the configured
//! square input size with values in `[0, 1]`. Standardization with the
//! configured mean/std happens at model input, so [`preprocess`] stays
//! idempotent.

mod grid;
mod nih;
mod preprocess;
mod synthetic;

pub use grid::{make_grid_labels, project_box_to_grid, GridLabelMap};
pub use nih::{load_dataset, write_dataset, DatasetFiles};
pub use preprocess::{preprocess, resize_bilinear};
pub use synthetic::{generate_synthetic_dataset, LesionKind, LesionSpec, SyntheticConfig};

use ndarray::{Array2, Array3};

use crate::error::{invalid, Result};

/// The fourteen NIH ChestX-ray14 findings, in the order of the public release.
pub const NIH_CLASSES: [&str; 14] = [
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural_Thickening",
    "Hernia",
];

/// Label string meaning "no disease present".
pub const NO_FINDING: &str = "No Finding";

/// Ordered class names; the index of a name is its channel in every
/// per-class array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    names: Vec<String>,
}

impl ClassVocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(invalid("class vocabulary is empty"));
        }
        Ok(Self { names })
    }

    pub fn nih() -> Self {
        Self {
            names: NIH_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Looks up a finding label. The NIH box list spells two findings
    /// differently from the label list, so those aliases are accepted too.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        let label = label.trim();
        let canonical = match label {
            "Infiltrate" => "Infiltration",
            "Pleural Thickening" => "Pleural_Thickening",
            other => other,
        };
        self.names.iter().position(|n| n == canonical)
    }
}

/// A ground-truth lesion box in pixel coordinates of the stored image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxAnnotation {
    pub class_index: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxAnnotation {
    pub fn new(class_index: usize, x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self {
            class_index,
            x,
            y,
            w,
            h,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 || self.x < 0.0 || self.y < 0.0 {
            return Err(invalid(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn fits_within(&self, width: f64, height: f64) -> bool {
        self.x + self.w <= width && self.y + self.h <= height
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            class_index: self.class_index,
            x: self.x * sx,
            y: self.y * sy,
            w: self.w * sx,
            h: self.h * sy,
        }
    }
}

/// One preprocessed image with its supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// `[3, size, size]`, values in `[0, 1]`.
    pub pixels: Array3<f32>,
    pub image_labels: Vec<bool>,
    /// Every known ground-truth box. Only classes flagged in `annotated`
    /// receive box-level supervision during training; evaluation uses all.
    pub boxes: Vec<BoxAnnotation>,
    /// Per-class box-annotation flag (λ).
    pub annotated: Vec<bool>,
}

impl ImageSample {
    pub fn num_classes(&self) -> usize {
        self.image_labels.len()
    }

    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn boxes_of(&self, class: usize) -> impl Iterator<Item = &BoxAnnotation> {
        self.boxes.iter().filter(move |b| b.class_index == class)
    }

    /// Mean over channels, as `f64`. SLIC and hashing operate on this plane.
    pub fn intensity(&self) -> Array2<f64> {
        let (_, h, w) = self.pixels.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            (0..3).map(|c| self.pixels[[c, y, x]] as f64).sum::<f64>() / 3.0
        })
    }

    /// Checks the sample invariants: shape, box classes and λ consistency.
    pub fn validate(&self) -> Result<()> {
        let shape = self.pixels.shape();
        if shape[0] != 3 || shape[1] != shape[2] {
            return Err(invalid(format!(
                "sample {}: pixel shape {shape:?}",
                self.id
            )));
        }
        let c = self.image_labels.len();
        if self.annotated.len() != c {
            return Err(invalid(format!("sample {}: λ length mismatch", self.id)));
        }
        for b in &self.boxes {
            b.validate()?;
            if b.class_index >= c || !self.image_labels[b.class_index] {
                return Err(invalid(format!(
                    "sample {}: box class {} not among image labels",
                    self.id, b.class_index
                )));
            }
        }
        for k in 0..c {
            if self.annotated[k] && self.boxes_of(k).next().is_none() {
                return Err(invalid(format!(
                    "sample {}: λ set for class {k} without a box",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: ClassVocabulary,
    pub image_size: usize,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.vocab.len()
    }
}

/// Train/test partition by sample index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// The last `holdout` samples form the test split.
    pub fn holdout_tail(n: usize, holdout: usize) -> Result<Self> {
        if holdout >= n && n > 0 {
            return Err(invalid(format!(
                "holdout {holdout} leaves no training data out of {n}"
            )));
        }
        let cut = n - holdout.min(n);
        Ok(Self {
            train: (0..cut).collect(),
            test: (cut..n).collect(),
        })
    }

    /// Contiguous k-fold split; fold `fold` is the test split.
    pub fn k_fold(n: usize, folds: usize, fold: usize) -> Result<Self> {
        if folds < 2 || fold >= folds || n < folds {
            return Err(invalid(format!(
                "bad fold {fold} of {folds} for {n} samples"
            )));
        }
        let lo = fold * n / folds;
        let hi = (fold + 1) * n / folds;
        Ok(Self {
            train: (0..lo).chain(hi..n).collect(),
            test: (lo..hi).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_aliases() {
        let v = ClassVocabulary::nih();
        assert_eq!(v.index_of("Infiltrate"), Some(3));
        assert_eq!(v.index_of("Infiltration"), Some(3));
        assert_eq!(v.index_of(" Effusion "), Some(2));
        assert_eq!(v.index_of("Unicorn"), None);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BoxAnnotation::new(0, 0.0, 0.0, 0.0, 4.0).is_err());
        assert!(BoxAnnotation::new(0, 0.0, 0.0, 4.0, -1.0).is_err());
        assert!(BoxAnnotation::new(0, 1.0, 2.0, 3.0, 4.0).is_ok());
    }

    #[test]
    fn splits() {
        let s = Split::holdout_tail(10, 3).unwrap();
        assert_eq!(s.train, (0..7).collect::<Vec<_>>());
        assert_eq!(s.test, vec![7, 8, 9]);
        let f = Split::k_fold(10, 5, 1).unwrap();
        assert_eq!(f.test, vec![2, 3]);
        assert_eq!(f.train.len(), 8);
        assert!(Split::k_fold(10, 5, 5).is_err());
    }
}
