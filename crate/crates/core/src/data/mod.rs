//! Samples, raster files, augmentation and the synthetic generator.

mod augment;
mod dataset;
mod pgm;
mod synth;

pub use augment::{augment36, Flip, Transform, AUGMENT_FLIPS, AUGMENT_SCALES};
pub use dataset::{Dataset, Split};
pub use pgm::{
    load_image, load_labels, load_segments, read_image, read_labels, read_pgm, save_image,
    save_labels, save_segments, write_image, write_labels, write_pgm, Pgm,
};
pub use synth::{synth_dataset, synth_generate, SynthParams};

use crate::error::{shape_err, Result};
use crate::eval::LabelImage;
use crate::objective::BoundaryLabels;
use crate::tensor::Tensor;

/// One training or test image with its boundary ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub labels: BoundaryLabels,
    pub segments: Option<LabelImage>,
}

impl Sample {
    /// Checks that all rasters share the image extent.
    pub fn new(
        image: Tensor,
        labels: BoundaryLabels,
        segments: Option<LabelImage>,
    ) -> Result<Self> {
        let (_, h, w) = image.dims3()?;
        if (labels.height(), labels.width()) != (h, w) {
            return Err(shape_err(format!(
                "labels are {}×{}, image is {h}×{w}",
                labels.height(),
                labels.width()
            )));
        }
        if let Some(s) = &segments {
            if (s.height(), s.width()) != (h, w) {
                return Err(shape_err(format!(
                    "segments are {}×{}, image is {h}×{w}",
                    s.height(),
                    s.width()
                )));
            }
        }
        Ok(Self {
            image,
            labels,
            segments,
        })
    }

    /// Sample whose labels are derived from `segments`.
    pub fn from_segments(image: Tensor, segments: LabelImage) -> Result<Self> {
        let labels = BoundaryLabels::from_segments(&segments);
        Self::new(image, labels, Some(segments))
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    /// Ground truth for scoring: the given segments, or the components of
    /// the non-boundary mask.
    pub fn ground_truth(&self) -> LabelImage {
        match &self.segments {
            Some(s) => s.clone(),
            None => {
                let fg: Vec<bool> = self.labels.mask().iter().map(|&b| !b).collect();
                crate::eval::label_components(self.height(), self.width(), &fg)
                    .expect("mask matches raster")
            }
        }
    }
}
