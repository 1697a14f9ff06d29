//! Image datasets and test-suite construction.
//!
//! Pixels are stored as `byte / 255` in `[0,1]`, channel-last. Readers for
//! IDX (optionally gzip-compressed) and CSV live in submodules; see
//! `data-format.md` for the on-disk layouts.

mod csv;
mod idx;
mod suite;

pub use self::csv::load_csv;
pub use self::idx::{
    load_idx, load_idx_files, load_idx_images, save_idx, write_idx_images, write_idx_labels,
};
pub use self::suite::{select_test_suite, SuiteMember, SuiteOptions, TestSuite};

use crate::error::{Error, Result};
use crate::model::{Image, Shape};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: Shape,
    images: Vec<Image>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: Shape, images: Vec<Image>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Idx(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(img) = images.iter().find(|i| i.shape() != shape) {
            return Err(Error::ShapeMismatch {
                expected: shape.to_string(),
                actual: img.shape().to_string(),
            });
        }
        Ok(Self {
            shape,
            images,
            labels,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// One more than the largest label.
    pub fn class_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Image, usize)> {
        self.images.iter().zip(self.labels.iter().copied())
    }

    /// Keeps only the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            shape: self.shape,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn map_images(&self, mut f: impl FnMut(&Image) -> Result<Image>) -> Result<Self> {
        let images = self.images.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
        Self::new(self.shape, images, self.labels.clone())
    }
}

pub(crate) fn byte_to_pixel(b: u8) -> f64 {
    f64::from(b) / 255.0
}

pub(crate) fn pixel_to_byte(p: f64) -> u8 {
    (p * 255.0).round().clamp(0.0, 255.0) as u8
}
