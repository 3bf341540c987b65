//! MNIST ingestion: IDX parsing, download/cache, and attacker subsets.

mod fetch;
mod idx;
mod subset;

pub use fetch::{fetch_dataset, load_split, resolve_data_dir, MnistFiles, DEFAULT_MIRROR};
pub use idx::{parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels, IdxImages};
pub use subset::{attacker_subset, class_balanced_subset, held_out, SubsetSelection};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const CLASS_COUNT: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
    Attacker,
    HeldOut,
}

/// Images and labels held as raw bytes; binarization happens at inference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledDataset {
    images: Vec<u8>,
    labels: Vec<u8>,
    rows: usize,
    cols: usize,
    split: SplitTag,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<u8>,
        labels: Vec<u8>,
        rows: usize,
        cols: usize,
        split: SplitTag,
    ) -> Result<Self> {
        let pixels = rows * cols;
        if pixels == 0 {
            return Err(Error::Dimension("image dimensions must be nonzero".into()));
        }
        if images.len() != labels.len() * pixels {
            return Err(Error::Length(format!(
                "{} image bytes for {} labels of {rows}x{cols}",
                images.len(),
                labels.len()
            )));
        }
        if let Some((index, &value)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= CLASS_COUNT)
        {
            return Err(Error::LabelRange { index, value });
        }
        Ok(Self {
            images,
            labels,
            rows,
            cols,
            split,
        })
    }

    pub fn from_idx(images: IdxImages, labels: Vec<u8>, split: SplitTag) -> Result<Self> {
        if images.count != labels.len() {
            return Err(Error::Length(format!(
                "{} images but {} labels",
                images.count,
                labels.len()
            )));
        }
        Self::new(images.pixels, labels, images.rows, images.cols, split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.rows * self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn image(&self, index: usize) -> &[u8] {
        let n = self.pixels_per_image();
        &self.images[index * n..(index + 1) * n]
    }

    pub fn label(&self, index: usize) -> u8 {
        self.labels[index]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[u8], u8)> + '_ {
        self.images
            .chunks_exact(self.pixels_per_image())
            .zip(self.labels.iter().copied())
    }

    /// Gathers the given sample indices, in order, into a new dataset.
    pub fn select(&self, indices: &[usize], split: SplitTag) -> Result<Self> {
        let n = self.pixels_per_image();
        let mut images = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self::new(images, labels, self.rows, self.cols, split)
    }

    pub fn as_idx_images(&self) -> IdxImages {
        IdxImages {
            count: self.len(),
            rows: self.rows,
            cols: self.cols,
            pixels: self.images.clone(),
        }
    }
}
