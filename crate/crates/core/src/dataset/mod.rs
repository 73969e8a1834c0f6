//! Labeled image data: in-memory datasets, the bundle file format, IDX
//! conversion, a procedural synthetic dataset, and the class-incremental task
//! schedule with per-client Dirichlet shards.

mod bundle;
mod idx;
mod schedule;
mod synthetic;

pub use bundle::{ingest_bundle, read_bundle, write_bundle, write_bundle_file, BUNDLE_MAGIC};
pub use idx::{convert_idx, read_idx_images, read_idx_labels, IdxImages};
pub use schedule::{build_schedule, Partition, PartitionConfig, TaskSchedule};
pub use synthetic::synth_dataset;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// One image with pixel values in `[0, 1]`, stored `(channels, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub image: Array3<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: ImageShape,
    num_classes: usize,
    examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn new(shape: ImageShape, num_classes: usize, examples: Vec<LabeledExample>) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.image.dim() != shape.dims() {
                return Err(Error::Shape(format!(
                    "example {i} has shape {:?}, dataset shape is {:?}",
                    ex.image.dim(),
                    shape.dims()
                )));
            }
            if ex.label >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "example {i} has label {} but the dataset has {num_classes} classes",
                    ex.label
                )));
            }
        }
        Ok(Dataset {
            shape,
            num_classes,
            examples,
        })
    }

    pub fn empty(shape: ImageShape, num_classes: usize) -> Self {
        Dataset {
            shape,
            num_classes,
            examples: Vec::new(),
        }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn get(&self, index: usize) -> Option<&LabeledExample> {
        self.examples.get(index)
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.examples.iter().map(|e| e.label)
    }

    /// Indices grouped by label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, e) in self.examples.iter().enumerate() {
            out[e.label].push(i);
        }
        out
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for l in self.labels() {
            h[l] += 1;
        }
        h
    }

    /// Stack the selected images as rows of a `(k, c·h·w)` matrix.
    pub fn image_rows(&self, indices: &[usize]) -> Result<Array2<f64>> {
        let d = self.shape.numel();
        let mut out = Array2::zeros((indices.len(), d));
        for (row, &i) in indices.iter().enumerate() {
            let ex = self.examples.get(i).ok_or_else(|| {
                Error::Integrity(format!("index {i} out of range for dataset of {}", self.len()))
            })?;
            let src = ex.image.as_slice().expect("standard layout image");
            out.row_mut(row).as_slice_mut().expect("row").copy_from_slice(src);
        }
        Ok(out)
    }

    /// Build a dataset from image rows and labels.
    pub fn from_rows(
        shape: ImageShape,
        num_classes: usize,
        rows: &Array2<f64>,
        labels: &[usize],
    ) -> Result<Self> {
        if rows.nrows() != labels.len() || rows.ncols() != shape.numel() {
            return Err(Error::Shape(format!(
                "{} rows of width {} with {} labels for image shape {:?}",
                rows.nrows(),
                rows.ncols(),
                labels.len(),
                shape
            )));
        }
        let examples = rows
            .outer_iter()
            .zip(labels)
            .map(|(r, &label)| LabeledExample {
                image: r
                    .to_owned()
                    .into_shape_with_order(shape.dims())
                    .expect("row length checked"),
                label,
            })
            .collect();
        Dataset::new(shape, num_classes, examples)
    }
}
