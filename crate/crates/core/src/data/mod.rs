//! Datasets: the synthetic ShiftShapes generator and PNG directory ingestion.

mod io;
pub mod shapes;

use ndarray::{Array2, Array3};

pub use io::{load_dataset, save_dataset, ClassMapping};
pub use shapes::{gen_shiftshapes, gen_shiftshapes_with, DomainSpec, GeometrySpec, ShapeInstance, ShapeKind};

use crate::error::{Error, Result};
use crate::teacher::IGNORE_INDEX;

/// RGB image, `H × W × 3`, channels in `[0, 1]`.
pub type Image = Array3<f32>;

/// Per-pixel class indices; [`IGNORE_INDEX`] marks unlabelled pixels.
pub type LabelMap = Array2<u8>;

#[derive(Debug, Clone, PartialEq)]
pub struct DataItem {
    pub image: Image,
    pub label: Option<LabelMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<DataItem>,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.items.iter().all(|i| i.label.is_some())
    }

    /// Drops labels, as seen by source-free adaptation.
    pub fn unlabeled(&self) -> Dataset {
        Dataset {
            items: self
                .items
                .iter()
                .map(|i| DataItem {
                    image: i.image.clone(),
                    label: None,
                })
                .collect(),
            num_classes: self.num_classes,
            split: self.split.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, item) in self.items.iter().enumerate() {
            let (h, w, c) = item.image.dim();
            if c != 3 {
                return Err(Error::Data(format!("image {i} has {c} channels")));
            }
            if let Some(label) = &item.label {
                if label.dim() != (h, w) {
                    return Err(Error::Data(format!(
                        "label {i} is {:?}, image is {h}x{w}",
                        label.dim()
                    )));
                }
                if label
                    .iter()
                    .any(|&l| l != IGNORE_INDEX && l as usize >= self.num_classes)
                {
                    return Err(Error::Data(format!("label {i} has class ids >= {}", self.num_classes)));
                }
            }
        }
        Ok(())
    }

    /// Pixel count per class over all labelled items.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.num_classes];
        for l in self.items.iter().filter_map(|i| i.label.as_ref()) {
            for &v in l.iter() {
                if (v as usize) < self.num_classes {
                    hist[v as usize] += 1;
                }
            }
        }
        hist
    }
}
